//! Operator entry points: worker, profile, plan, run, bench. JSON artifacts
//! flow between the stages; exit codes are stable (0 ok, 2 connectivity,
//! 3 i/o, 4 infeasible plan, 5 verification failure, 1 anything else).

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::collectives::TrafficCounters;
use crate::engine::{ExecMode, PhaseSeconds, RankLayerTrace};
use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::planner::{self, DeviceProfile, PartitionPlan};
use crate::profiler::{self, CalibrationMeta, ProfileReport};
use crate::runtime::{
    read_json_file, write_json_file, Cluster, ClusterConfig, ModelSpec, RunOutcome,
};
use crate::tensor::{DType, Scalar, Tensor};

pub const EXIT_OK: i32 = 0;
pub const EXIT_FAILURE: i32 = 1;
pub const EXIT_CONNECTIVITY: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_INFEASIBLE: i32 = 4;
pub const EXIT_VERIFY: i32 = 5;

pub fn exit_code_for(err: &Error) -> i32 {
    match err {
        Error::Connect { .. } | Error::PeerTimeout { .. } => EXIT_CONNECTIVITY,
        Error::Io { .. } => EXIT_IO,
        Error::Infeasible { .. } => EXIT_INFEASIBLE,
        Error::Verify { .. } => EXIT_VERIFY,
        _ => EXIT_FAILURE,
    }
}

// ---------------------------------------------------------------------------
// Argument surface
// ---------------------------------------------------------------------------

#[derive(Parser)]
#[command(
    name = "hmp",
    about = "Hybrid tensor/sequence model-parallel Transformer inference over emulated edge workers"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Start a worker process and serve coordinator commands.
    Worker {
        /// host:port to listen on (port 0 picks a free port, printed on stdout).
        #[arg(long, default_value = "127.0.0.1:0")]
        listen: String,
        /// Take the listen address from this cluster config instead.
        #[arg(long, requires = "rank")]
        cluster: Option<PathBuf>,
        /// This worker's rank within the cluster config.
        #[arg(long)]
        rank: Option<usize>,
    },
    /// Measure per-device latency tables and write a profile report.
    Profile(ProfileArgs),
    /// Turn a profile report into a partition plan.
    Plan(PlanArgs),
    /// Run one distributed inference and write a run report.
    Run(RunArgs),
    /// Repeat runs across bandwidth/mode/overlap settings and write a CSV.
    Bench(BenchArgs),
}

#[derive(Args)]
pub struct ProfileArgs {
    #[arg(long)]
    pub cluster: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Partition-size grid as fractions of each block total.
    #[arg(long, value_delimiter = ',', default_values_t = vec![0.125, 0.25, 0.375, 0.5, 0.625, 0.75, 0.875, 1.0])]
    pub sizes: Vec<f64>,
    /// Calibration sequence length.
    #[arg(long, default_value_t = profiler::DEFAULT_CALIBRATION_SEQ)]
    pub seq: usize,
    #[arg(long, default_value_t = profiler::DEFAULT_REPS)]
    pub reps: usize,
    #[arg(long, default_value_t = profiler::DEFAULT_WARMUPS)]
    pub warmups: usize,
    /// Profile all workers at once instead of one at a time.
    #[arg(long, default_value_t = false)]
    pub parallel: bool,
}

#[derive(Args)]
pub struct PlanArgs {
    #[arg(long)]
    pub profile: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Sequence length to plan for; defaults to the profile's calibration length.
    #[arg(long)]
    pub seq: Option<usize>,
}

#[derive(Args)]
pub struct RunArgs {
    #[arg(long)]
    pub cluster: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    /// Input tensor JSON; mutually exclusive with --seed.
    #[arg(long, conflicts_with = "seed")]
    pub input: Option<PathBuf>,
    /// Seed for a synthetic input (used with --seq).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Synthetic input length; defaults to the plan's sequence length.
    #[arg(long)]
    pub seq: Option<usize>,
    /// Tile-based communication/computation overlap.
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub overlap: Switch,
    #[arg(long, default_value = "hmp")]
    pub mode: ExecMode,
    /// Compare the distributed output against the local reference pass.
    #[arg(long, default_value_t = false)]
    pub verify: bool,
    /// Where to write the run report JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args)]
pub struct BenchArgs {
    #[arg(long)]
    pub cluster: PathBuf,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub plan: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub repeat: usize,
    /// Sender pacing limits to sweep, in Mbit/s (0 = unlimited).
    #[arg(long, value_delimiter = ',', default_values_t = vec![50.0, 125.0, 500.0, 1000.0])]
    pub bandwidths_mbps: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_values = ["hmp"])]
    pub modes: Vec<ExecMode>,
    /// Overlap settings to sweep: on, off or both.
    #[arg(long, default_value = "both")]
    pub overlap: String,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub seq: Option<usize>,
}

/// on/off switch argument.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Switch {
    On,
    Off,
}

impl Switch {
    pub fn is_on(self) -> bool {
        matches!(self, Self::On)
    }
}

impl clap::builder::ValueParserFactory for ExecMode {
    type Parser = clap::builder::ValueParser;

    fn value_parser() -> Self::Parser {
        clap::builder::ValueParser::new(|s: &str| s.parse::<ExecMode>().map_err(|e| e.to_string()))
    }
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Cross-rank aggregate of one layer's execution.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LayerStepTrace {
    pub per_rank_phase_seconds: Vec<PhaseSeconds>,
    /// Straggler (slowest-rank) time per phase, in `PhaseSeconds::NAMES` order.
    pub max_phase_seconds: Vec<f64>,
    pub straggler_rank: Vec<usize>,
    /// (max - min) / min per phase; how far the straggler trails the fastest
    /// device, relative to the fastest device's phase time.
    pub straggler_gap: Vec<f64>,
    pub all_gather_bytes: u64,
    pub reduce_scatter_bytes: u64,
    pub all_reduce_bytes: u64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct VerifyReport {
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RunReport {
    pub schema_version: u32,
    pub mode: ExecMode,
    pub overlap: bool,
    pub dtype: DType,
    pub seq: usize,
    /// Slowest worker's wall time for the whole pass.
    pub latency_s: f64,
    pub per_rank_latency_s: Vec<f64>,
    pub plan: PartitionPlan,
    pub cluster: ClusterConfig,
    pub layers: Vec<LayerStepTrace>,
    /// Payload bytes summed over all ranks, including the final gather.
    pub totals: TrafficCounters,
    pub output_checksum: String,
    pub verify: Option<VerifyReport>,
}

/// Folds per-rank layer traces into per-layer aggregates with straggler
/// attribution.
pub fn aggregate_traces(per_rank: &[Vec<RankLayerTrace>]) -> Vec<LayerStepTrace> {
    let world = per_rank.len();
    let layers = per_rank.first().map(|t| t.len()).unwrap_or(0);
    let mut out = Vec::with_capacity(layers);
    #[allow(clippy::needless_range_loop)] // ranks and layers index in step
    for li in 0..layers {
        let phases: Vec<PhaseSeconds> = (0..world).map(|r| per_rank[r][li].phases).collect();
        let mut max_phase = vec![0.0f64; 8];
        let mut straggler = vec![0usize; 8];
        let mut gap = vec![0.0f64; 8];
        for p in 0..8 {
            let times: Vec<f64> = phases.iter().map(|ps| ps.as_array()[p]).collect();
            let (mut max_v, mut max_r, mut min_v) = (f64::MIN, 0usize, f64::MAX);
            for (r, &t) in times.iter().enumerate() {
                if t > max_v {
                    max_v = t;
                    max_r = r;
                }
                min_v = min_v.min(t);
            }
            max_phase[p] = max_v;
            straggler[p] = max_r;
            gap[p] = if min_v > 1e-9 { (max_v - min_v) / min_v } else { 0.0 };
        }
        out.push(LayerStepTrace {
            per_rank_phase_seconds: phases,
            max_phase_seconds: max_phase,
            straggler_rank: straggler,
            straggler_gap: gap,
            all_gather_bytes: (0..world).map(|r| per_rank[r][li].all_gather_bytes).sum(),
            reduce_scatter_bytes: (0..world)
                .map(|r| per_rank[r][li].reduce_scatter_bytes)
                .sum(),
            all_reduce_bytes: (0..world).map(|r| per_rank[r][li].all_reduce_bytes).sum(),
        });
    }
    out
}

pub fn build_run_report<T: Scalar>(
    outcome: &RunOutcome<T>,
    plan: &PartitionPlan,
    cluster: &ClusterConfig,
    mode: ExecMode,
    overlap: bool,
    verify: Option<VerifyReport>,
) -> RunReport {
    let totals = outcome.per_rank_counters.iter().fold(TrafficCounters::default(), |acc, c| {
        TrafficCounters {
            all_gather: acc.all_gather + c.all_gather,
            reduce_scatter: acc.reduce_scatter + c.reduce_scatter,
            all_reduce: acc.all_reduce + c.all_reduce,
        }
    });
    RunReport {
        schema_version: 1,
        mode,
        overlap,
        dtype: T::DTYPE,
        seq: plan.seq_len(),
        latency_s: outcome.latency_s,
        per_rank_latency_s: outcome.per_rank_latency_s.clone(),
        plan: plan.clone(),
        cluster: cluster.clone(),
        layers: aggregate_traces(&outcome.per_rank_traces),
        totals,
        output_checksum: format!("{:016x}", outcome.output_checksum),
        verify,
    }
}

/// Verification tolerance on the distributed-vs-reference comparison.
pub fn verify_tolerance(dtype: DType) -> f64 {
    match dtype {
        DType::F64 => 1e-8,
        _ => 1e-4,
    }
}

// ---------------------------------------------------------------------------
// Tensor file format (JSON, human-auditable like the other artifacts)
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TensorFile {
    pub rows: usize,
    pub cols: usize,
    pub dtype: DType,
    pub data: Vec<f64>,
}

impl TensorFile {
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Format(format!(
                "tensor file claims {}x{} but carries {} values",
                self.rows,
                self.cols,
                self.data.len()
            )));
        }
        let data = self.data.iter().map(|&v| T::from_f64(v)).collect();
        Tensor::new(self.rows, self.cols, data).map_err(Error::Shape)
    }

    pub fn from_tensor<T: Scalar>(t: &Tensor<T>) -> Self {
        Self {
            rows: t.rows(),
            cols: t.cols(),
            dtype: T::DTYPE,
            data: t.data().iter().map(|v| v.to_f64()).collect(),
        }
    }
}

// ---------------------------------------------------------------------------
// Subcommands
// ---------------------------------------------------------------------------

fn fractions_to_sizes(fractions: &[f64], total: usize) -> Vec<usize> {
    let mut sizes: Vec<usize> = fractions
        .iter()
        .map(|f| ((total as f64 * f).round() as usize).clamp(1, total))
        .collect();
    sizes.sort_unstable();
    sizes.dedup();
    sizes
}

pub fn cmd_profile(args: &ProfileArgs) -> Result<ProfileReport> {
    let cluster_cfg: ClusterConfig = read_json_file(&args.cluster)?;
    let spec: ModelSpec = read_json_file(&args.model)?;
    let config = spec.config()?;
    let seq = args.seq.min(config.max_seq);

    let mha_sizes = fractions_to_sizes(&args.sizes, config.num_heads);
    let mlp_sizes = fractions_to_sizes(&args.sizes, config.intermediate());
    let con_sizes = fractions_to_sizes(&args.sizes, seq);

    let mut cluster = Cluster::connect(&cluster_cfg)?;
    cluster.init_ring()?;
    let tables = cluster.profile_all(
        &config,
        &mha_sizes,
        &mlp_sizes,
        &con_sizes,
        seq,
        args.reps,
        args.warmups,
        args.parallel,
    )?;

    let devices = cluster_cfg
        .workers
        .iter()
        .zip(tables)
        .map(|(w, t)| -> Result<DeviceProfile> {
            let capacity = planner::compute_capacity(&t.mha, &t.mlp, &config)?;
            Ok(DeviceProfile {
                device_id: w.device_id,
                capacity,
                memory_budget: w.memory_budget.unwrap_or(u64::MAX),
                mha_latency: t.mha,
                mlp_latency: t.mlp,
                con_latency: t.con,
                raw_monotonicity_violations: t.raw_monotonicity_violations,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let (m_att, m_mlp) = profiler::profile_model(&config);
    let report = ProfileReport {
        schema_version: 1,
        model: config,
        m_att,
        m_mlp,
        calibration: CalibrationMeta {
            seq,
            reps: args.reps,
            warmups: args.warmups,
            dtype: config.dtype,
        },
        devices,
    };
    write_json_file(&args.out, &report)?;
    for d in &report.devices {
        println!("device {}: capacity {:.3} /s, budget {} B", d.device_id, d.capacity, d.memory_budget);
    }
    println!("profile written to {}", args.out.display());
    Ok(report)
}

pub fn cmd_plan(args: &PlanArgs) -> Result<PartitionPlan> {
    let report: ProfileReport = read_json_file(&args.profile)?;
    let spec: ModelSpec = read_json_file(&args.model)?;
    let config = spec.config()?;
    if config != report.model {
        return Err(Error::Config(
            "model spec disagrees with the profiled model configuration".into(),
        ));
    }
    let seq = args.seq.unwrap_or(report.calibration.seq);
    let plan = planner::plan(&report.devices, &config, seq)?;
    write_json_file(&args.out, &plan)?;
    println!(
        "plan for {} devices: heads {:?}, mlp columns {:?}, sequence rows {:?}",
        plan.world(),
        plan.heads,
        plan.mlp_cols,
        plan.seq_rows
    );
    println!("plan written to {}", args.out.display());
    Ok(plan)
}

fn load_input<T: Scalar>(
    args: &RunArgs,
    config: &ModelConfig,
    plan: &PartitionPlan,
) -> Result<Tensor<T>> {
    match (&args.input, args.seed) {
        (Some(path), _) => {
            let file: TensorFile = read_json_file(path)?;
            if file.cols != config.hidden {
                return Err(Error::Config(format!(
                    "input width {} != hidden {}",
                    file.cols, config.hidden
                )));
            }
            file.to_tensor()
        }
        (None, seed) => {
            let seq = args.seq.unwrap_or_else(|| plan.seq_len());
            Ok(model::synthetic_input::<T>(config, seq, seed.unwrap_or(0)))
        }
    }
}

fn run_typed<T: Scalar>(
    args: &RunArgs,
    cluster_cfg: &ClusterConfig,
    spec: &ModelSpec,
    plan: PartitionPlan,
) -> Result<RunReport> {
    let config = spec.config()?;
    let input = load_input::<T>(args, &config, &plan)?;
    let mut plan = plan;
    if plan.seq_len() != input.rows() {
        eprintln!(
            "note: plan covers {} rows, input has {}; re-splitting the sequence equally",
            plan.seq_len(),
            input.rows()
        );
        plan.seq_rows = planner::equal_split(input.rows(), plan.world());
    }
    plan.validate(&config, input.rows())?;

    let mut cluster = Cluster::connect(cluster_cfg)?;
    cluster.init_ring()?;
    cluster.load_model(spec, &plan, args.mode, args.overlap.is_on())?;
    let outcome = cluster.run(&input, &plan, args.mode)?;

    let verify = if args.verify {
        let reference = model::reference_forward(&spec.build_model::<T>()?, &input)?;
        let max_rel_error = crate::tensor::max_rel_error(&outcome.output, &reference);
        let tolerance = verify_tolerance(T::DTYPE);
        Some(VerifyReport { max_rel_error, tolerance, passed: max_rel_error <= tolerance })
    } else {
        None
    };

    let report =
        build_run_report(&outcome, &plan, cluster_cfg, args.mode, args.overlap.is_on(), verify);
    if let Some(path) = &args.report {
        write_json_file(path, &report)?;
    }
    println!(
        "mode {} overlap {} seq {}: latency {:.3} s, {} payload bytes, checksum {}",
        report.mode,
        if report.overlap { "on" } else { "off" },
        report.seq,
        report.latency_s,
        report.totals.total(),
        report.output_checksum
    );
    if let Some(v) = &report.verify {
        println!(
            "verify: max relative error {:.3e} (tolerance {:.1e}) -> {}",
            v.max_rel_error,
            v.tolerance,
            if v.passed { "ok" } else { "FAILED" }
        );
        if !v.passed {
            return Err(Error::Verify { max_rel_error: v.max_rel_error, tolerance: v.tolerance });
        }
    }
    Ok(report)
}

pub fn cmd_run(args: &RunArgs) -> Result<RunReport> {
    let cluster_cfg: ClusterConfig = read_json_file(&args.cluster)?;
    let spec: ModelSpec = read_json_file(&args.model)?;
    let plan: PartitionPlan = read_json_file(&args.plan)?;
    match spec.dtype {
        DType::F64 => run_typed::<f64>(args, &cluster_cfg, &spec, plan),
        DType::F32 => run_typed::<f32>(args, &cluster_cfg, &spec, plan),
        DType::F16 => Err(Error::Config("f16 models cannot run; use f32 or f64".into())),
    }
}

/// One CSV row per (bandwidth, mode, overlap, repeat).
#[derive(Debug, Clone)]
pub struct BenchRow {
    pub bandwidth_mbps: f64,
    pub mode: ExecMode,
    pub overlap: bool,
    pub latency_ms: f64,
    pub bytes: u64,
}

pub const BENCH_CSV_HEADER: &str = "bandwidth_mbps,mode,overlap,latency_ms,bytes";

pub fn cmd_bench(args: &BenchArgs) -> Result<Vec<BenchRow>> {
    let cluster_cfg: ClusterConfig = read_json_file(&args.cluster)?;
    let spec: ModelSpec = read_json_file(&args.model)?;
    let plan: PartitionPlan = read_json_file(&args.plan)?;
    let config = spec.config()?;
    if spec.dtype == DType::F16 {
        return Err(Error::Config("f16 models cannot run; use f32 or f64".into()));
    }
    let overlaps: Vec<bool> = match args.overlap.as_str() {
        "on" => vec![true],
        "off" => vec![false],
        "both" => vec![true, false],
        other => return Err(Error::Config(format!("overlap must be on, off or both, not {other}"))),
    };
    let seq = args.seq.unwrap_or_else(|| plan.seq_len());
    let mut plan = plan;
    if plan.seq_len() != seq {
        plan.seq_rows = planner::equal_split(seq, plan.world());
    }
    plan.validate(&config, seq)?;

    let mut cluster = Cluster::connect(&cluster_cfg)?;
    cluster.init_ring()?;
    let input = model::synthetic_input::<f32>(&config, seq, args.seed);

    let mut rows = Vec::new();
    for &mode in &args.modes {
        // Overlap only changes the hmp schedule; baselines run plain.
        let mode_overlaps: &[bool] =
            if mode == ExecMode::Hmp { &overlaps } else { &overlaps[..1.min(overlaps.len())] };
        for &overlap in mode_overlaps {
            let effective_overlap = overlap && mode == ExecMode::Hmp;
            cluster.load_model(&spec, &plan, mode, effective_overlap)?;
            for &mbps in &args.bandwidths_mbps {
                let bps = if mbps <= 0.0 { None } else { Some((mbps * 1e6) as u64) };
                cluster.set_bandwidth(bps)?;
                for _ in 0..args.repeat {
                    let outcome = cluster.run(&input, &plan, mode)?;
                    let bytes: u64 =
                        outcome.per_rank_counters.iter().map(TrafficCounters::total).sum();
                    rows.push(BenchRow {
                        bandwidth_mbps: mbps,
                        mode,
                        overlap: effective_overlap,
                        latency_ms: outcome.latency_s * 1e3,
                        bytes,
                    });
                }
            }
        }
    }

    let mut csv = String::from(BENCH_CSV_HEADER);
    csv.push('\n');
    for row in &rows {
        csv.push_str(&format!(
            "{},{},{},{:.3},{}\n",
            row.bandwidth_mbps,
            row.mode,
            if row.overlap { "on" } else { "off" },
            row.latency_ms,
            row.bytes
        ));
    }
    std::fs::write(&args.out, csv).map_err(|e| Error::io(args.out.display().to_string(), e))?;

    // Median summary per configuration, in sweep order.
    let mut seen: Vec<(f64, ExecMode, bool)> = Vec::new();
    for row in &rows {
        let key = (row.bandwidth_mbps, row.mode, row.overlap);
        if !seen.contains(&key) {
            seen.push(key);
        }
    }
    for (mbps, mode, overlap) in seen {
        let lats: Vec<f64> = rows
            .iter()
            .filter(|r| r.bandwidth_mbps == mbps && r.mode == mode && r.overlap == overlap)
            .map(|r| r.latency_ms)
            .collect();
        println!(
            "{mbps} Mbit/s {mode} overlap {}: median {:.1} ms over {} repeats",
            if overlap { "on" } else { "off" },
            profiler::median(&lats),
            lats.len()
        );
    }
    println!("rows written to {}", args.out.display());
    Ok(rows)
}

/// Worker listen address: from the cluster config when rank is given,
/// otherwise the --listen flag; HMP_WORKER_PORT overrides the port either way.
fn resolve_worker_listen(
    listen: &str,
    cluster: Option<&Path>,
    rank: Option<usize>,
) -> Result<String> {
    let mut address = match (cluster, rank) {
        (Some(path), Some(rank)) => {
            let config: ClusterConfig = read_json_file(path)?;
            config
                .workers
                .get(rank)
                .map(|w| w.address.clone())
                .ok_or_else(|| Error::Config(format!("rank {rank} outside the cluster config")))?
        }
        _ => listen.to_string(),
    };
    if let Ok(port) = std::env::var("HMP_WORKER_PORT") {
        let port: u16 = port
            .parse()
            .map_err(|_| Error::Config(format!("HMP_WORKER_PORT={port} is not a port")))?;
        let host = address.rsplit_once(':').map(|(h, _)| h).unwrap_or(&address);
        address = format!("{host}:{port}");
    }
    Ok(address)
}

/// Parses argv and runs; returns the process exit code.
pub fn main_with_args<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_FAILURE } else { EXIT_OK };
        }
    };
    let result: Result<()> = match &cli.command {
        Command::Worker { listen, cluster, rank } => {
            resolve_worker_listen(listen, cluster.as_deref(), *rank)
                .and_then(|addr| crate::runtime::worker_main(&addr))
        }
        Command::Profile(args) => cmd_profile(args).map(|_| ()),
        Command::Plan(args) => cmd_plan(args).map(|_| ()),
        Command::Run(args) => cmd_run(args).map(|_| ()),
        Command::Bench(args) => cmd_bench(args).map(|_| ()),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code_for(&e)
        }
    }
}


#[cfg(test)]
mod tests {
    use super::*;
    use std::time::{Duration, Instant};

    #[test]
    fn exit_codes_map_error_kinds() {
        assert_eq!(
            exit_code_for(&Error::Connect { device_id: 0, address: "x".into(), detail: "d".into() }),
            EXIT_CONNECTIVITY
        );
        assert_eq!(exit_code_for(&Error::PeerTimeout { rank: 1, waited_ms: 5 }), EXIT_CONNECTIVITY);
        assert_eq!(
            exit_code_for(&Error::io("f", std::io::Error::other("x"))),
            EXIT_IO
        );
        assert_eq!(exit_code_for(&Error::Infeasible { violations: vec![] }), EXIT_INFEASIBLE);
        assert_eq!(
            exit_code_for(&Error::Verify { max_rel_error: 1.0, tolerance: 0.1 }),
            EXIT_VERIFY
        );
        assert_eq!(exit_code_for(&Error::Config("x".into())), EXIT_FAILURE);
    }

    #[test]
    fn trace_aggregation_finds_stragglers() {
        let mk = |mha: f64| RankLayerTrace {
            phases: PhaseSeconds { mha, ..Default::default() },
            all_gather_bytes: 10,
            reduce_scatter_bytes: 20,
            all_reduce_bytes: 0,
        };
        let per_rank = vec![vec![mk(0.2)], vec![mk(0.1)]];
        let agg = aggregate_traces(&per_rank);
        assert_eq!(agg.len(), 1);
        let mha_idx = PhaseSeconds::NAMES.iter().position(|n| *n == "mha").unwrap();
        assert_eq!(agg[0].straggler_rank[mha_idx], 0);
        assert!((agg[0].max_phase_seconds[mha_idx] - 0.2).abs() < 1e-12);
        assert!((agg[0].straggler_gap[mha_idx] - 1.0).abs() < 1e-9);
        assert_eq!(agg[0].all_gather_bytes, 20);
        assert_eq!(agg[0].reduce_scatter_bytes, 40);
    }

    #[test]
    fn tensor_file_round_trip_and_validation() {
        let t = Tensor::<f32>::from_fn(2, 3, |r, c| (r * 3 + c) as f32);
        let file = TensorFile::from_tensor(&t);
        let back: Tensor<f32> = file.to_tensor().unwrap();
        assert_eq!(back, t);

        let bad = TensorFile { rows: 2, cols: 3, dtype: DType::F32, data: vec![0.0; 5] };
        assert!(bad.to_tensor::<f32>().is_err());
    }

    #[test]
    fn fraction_grid_rounds_and_dedups() {
        assert_eq!(fractions_to_sizes(&[0.5, 1.0], 20), vec![10, 20]);
        assert_eq!(fractions_to_sizes(&[0.1, 0.12, 1.0], 10), vec![1, 10]);
        assert_eq!(fractions_to_sizes(&[2.0], 10), vec![10]);
    }

    #[test]
    fn unknown_mode_is_rejected_by_the_parser() {
        let code = main_with_args(["hmp", "run", "--cluster", "c", "--model", "m", "--plan", "p", "--mode", "zigzag"]);
        assert_eq!(code, EXIT_FAILURE);
    }

    #[test]
    fn run_with_unreadable_cluster_file_exits_io() {
        let args = RunArgs {
            cluster: PathBuf::from("/nonexistent/cluster.json"),
            model: PathBuf::from("/nonexistent/model.json"),
            plan: PathBuf::from("/nonexistent/plan.json"),
            input: None,
            seed: Some(0),
            seq: None,
            overlap: Switch::Off,
            mode: ExecMode::Hmp,
            verify: false,
            report: None,
        };
        let err = cmd_run(&args).unwrap_err();
        assert_eq!(exit_code_for(&err), EXIT_IO);
    }

    #[test]
    fn end_to_end_profile_plan_run_over_thread_workers() {
        // Spawn two in-process workers, then drive the three CLI stages
        // through their library entry points with real JSON artifacts.
        let dir = std::env::temp_dir().join(format!("hmp-cli-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();

        let mut handles = Vec::new();
        let mut workers = Vec::new();
        for d in 0..2 {
            let listener = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
            let addr = listener.local_addr().unwrap().to_string();
            drop(listener);
            let addr2 = addr.clone();
            handles.push(std::thread::spawn(move || crate::runtime::worker_main(&addr2)));
            workers.push(crate::runtime::WorkerSpec {
                device_id: d,
                address: addr,
                compute_throttle: 1.0,
                bandwidth_bps: None,
                memory_budget: None,
            });
        }
        let cluster = ClusterConfig { schema_version: 1, timeout_ms: 4000, workers };
        let cluster_path = dir.join("cluster.json");
        write_json_file(&cluster_path, &cluster).unwrap();

        let config = ModelConfig::new(2, 4, 32, 64, DType::F32).unwrap();
        let spec = ModelSpec::synthesized(config, 11);
        let model_path = dir.join("model.json");
        write_json_file(&model_path, &spec).unwrap();

        let profile_path = dir.join("profile.json");
        let report = cmd_profile(&ProfileArgs {
            cluster: cluster_path.clone(),
            model: model_path.clone(),
            out: profile_path.clone(),
            sizes: vec![0.5, 1.0],
            seq: 16,
            reps: 3,
            warmups: 1,
            parallel: false,
        })
        .unwrap();
        assert_eq!(report.devices.len(), 2);
        let spread = (report.devices[0].capacity - report.devices[1].capacity).abs()
            / report.devices[0].capacity.max(report.devices[1].capacity);
        assert!(spread < 0.5, "homogeneous capacities spread {spread:.2}");

        let plan_path = dir.join("plan.json");
        let plan = cmd_plan(&PlanArgs {
            profile: profile_path.clone(),
            model: model_path.clone(),
            out: plan_path.clone(),
            seq: Some(16),
        })
        .unwrap();
        assert_eq!(plan.heads.iter().sum::<usize>(), 4);

        let report_path = dir.join("run.json");
        let start = Instant::now();
        let run = cmd_run(&RunArgs {
            cluster: cluster_path.clone(),
            model: model_path.clone(),
            plan: plan_path.clone(),
            input: None,
            seed: Some(3),
            seq: Some(16),
            overlap: Switch::On,
            mode: ExecMode::Hmp,
            verify: true,
            report: Some(report_path.clone()),
        })
        .unwrap();
        assert!(start.elapsed() < Duration::from_secs(60));
        assert!(run.verify.as_ref().unwrap().passed);
        let written: RunReport = read_json_file(&report_path).unwrap();
        assert_eq!(written, run);

        // Workers stay alive between coordinator sessions; shut them down.
        let mut c = Cluster::connect(&cluster).unwrap();
        c.init_ring().unwrap();
        drop(c);
        let c = Cluster::connect(&cluster).unwrap();
        c.shutdown().unwrap();
        for h in handles {
            h.join().unwrap().unwrap();
        }
        std::fs::remove_dir_all(&dir).ok();
    }
}
