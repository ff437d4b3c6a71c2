//! Worker process lifecycle and the coordinator's view of the cluster.
//!
//! A worker binds a listener, accepts a coordinator control connection, and
//! then serves commands: initialize, wire the ring, load and shard a model,
//! profile, run, adjust bandwidth, shut down. Ring links between workers are
//! separate connections paced by the emulated device-to-device bandwidth;
//! the control plane is never paced.

use std::fs;
use std::io::Write as _;
use std::net::{TcpListener, TcpStream};
use std::path::Path;
use std::time::{Duration, Instant};

use crate::collectives::{RingGroup, TrafficCounters};
use crate::engine::{ExecMode, RankLayerTrace, WorkerEngine};
use crate::error::{Error, Result};
use crate::memory::MemoryAccountant;
use crate::model::{self, Model, ModelConfig};
use crate::planner::PartitionPlan;
use crate::profiler::{self, BlockTables};
use crate::tensor::{DType, Scalar, Tensor};
use crate::throttle::Throttle;
use crate::transport::{Frame, FrameKind, Link};

pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;

/// Ceiling on waiting for a worker to finish a long command (profiling a
/// large model can legitimately take minutes).
const OP_TIMEOUT: Duration = Duration::from_secs(900);

// ---------------------------------------------------------------------------
// Cluster and model descriptions
// ---------------------------------------------------------------------------

fn default_throttle() -> f64 {
    1.0
}

fn default_timeout_ms() -> u64 {
    DEFAULT_TIMEOUT_MS
}

fn default_schema_version() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct WorkerSpec {
    pub device_id: usize,
    /// host:port the worker listens on.
    pub address: String,
    /// Compute slowdown multiplier (1 = full speed).
    #[serde(default = "default_throttle")]
    pub compute_throttle: f64,
    /// Device-to-device bandwidth limit in bits/second; absent = unlimited.
    #[serde(default)]
    pub bandwidth_bps: Option<u64>,
    /// Memory budget in bytes; absent = unlimited.
    #[serde(default)]
    pub memory_budget: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterConfig {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    #[serde(default = "default_timeout_ms")]
    pub timeout_ms: u64,
    pub workers: Vec<WorkerSpec>,
}

impl ClusterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.workers.is_empty() {
            return Err(Error::Config("cluster has no workers".into()));
        }
        let mut ids: Vec<usize> = self.workers.iter().map(|w| w.device_id).collect();
        ids.sort_unstable();
        ids.dedup();
        if ids.len() != self.workers.len() {
            return Err(Error::Config("duplicate device ids in cluster config".into()));
        }
        for w in &self.workers {
            if w.compute_throttle < 1.0 || !w.compute_throttle.is_finite() {
                return Err(Error::Config(format!(
                    "device {} compute throttle {} must be >= 1",
                    w.device_id, w.compute_throttle
                )));
            }
            if w.memory_budget == Some(0) {
                return Err(Error::Config(format!("device {} has a zero memory budget", w.device_id)));
            }
        }
        Ok(())
    }

    pub fn timeout(&self) -> Duration {
        Duration::from_millis(self.timeout_ms)
    }
}

/// What to run: either synthesized weights (config + seed) or a checkpoint.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelSpec {
    #[serde(default = "default_schema_version")]
    pub schema_version: u32,
    pub num_layers: usize,
    pub num_heads: usize,
    pub hidden: usize,
    pub max_seq: usize,
    pub dtype: DType,
    #[serde(default)]
    pub seed: u64,
    /// When set, weights come from this checkpoint instead of the seed.
    #[serde(default)]
    pub weights_path: Option<String>,
}

impl ModelSpec {
    pub fn config(&self) -> Result<ModelConfig> {
        ModelConfig::new(self.num_layers, self.num_heads, self.hidden, self.max_seq, self.dtype)
    }

    pub fn synthesized(config: ModelConfig, seed: u64) -> Self {
        Self {
            schema_version: 1,
            num_layers: config.num_layers,
            num_heads: config.num_heads,
            hidden: config.hidden,
            max_seq: config.max_seq,
            dtype: config.dtype,
            seed,
            weights_path: None,
        }
    }

    pub fn build_model<T: Scalar>(&self) -> Result<Model<T>> {
        match &self.weights_path {
            Some(path) => model::load_weights::<T>(Path::new(path)),
            None => model::init_random::<T>(&self.config()?, self.seed),
        }
    }
}

// ---------------------------------------------------------------------------
// JSON artifact helpers
// ---------------------------------------------------------------------------

pub fn read_json_file<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_slice(&bytes)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_json_file<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Format(format!("encoding {}: {e}", path.display())))?;
    let mut file =
        fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    file.write_all(text.as_bytes())
        .and_then(|_| file.write_all(b"\n"))
        .map_err(|e| Error::io(path.display().to_string(), e))
}

/// FNV-1a over a byte stream; stable output fingerprint for reports.
pub fn checksum_bytes(bytes: &[u8]) -> u64 {
    let mut hash: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        hash ^= b as u64;
        hash = hash.wrapping_mul(0x0000_0100_0000_01b3);
    }
    hash
}

// ---------------------------------------------------------------------------
// Control protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
enum HelloRole {
    Coordinator,
    RingPeer,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
enum ControlMsg {
    Hello {
        role: HelloRole,
        rank: u16,
    },
    Init {
        rank: usize,
        world: usize,
        ring_addresses: Vec<String>,
        compute_throttle: f64,
        /// Host pace measured by the coordinator; workers self-calibrate
        /// when absent (e.g. physically distinct machines).
        seconds_per_flop: Option<f64>,
        bandwidth_bps: Option<u64>,
        memory_budget: Option<u64>,
        timeout_ms: u64,
    },
    InitOk,
    EstablishRing,
    RingOk,
    Ping,
    Pong,
    LoadModel {
        spec: ModelSpec,
        plan: PartitionPlan,
        mode: ExecMode,
        overlap: bool,
    },
    ModelLoaded {
        resident_bytes: u64,
    },
    Profile {
        config: ModelConfig,
        mha_sizes: Vec<usize>,
        mlp_sizes: Vec<usize>,
        con_sizes: Vec<usize>,
        seq: usize,
        reps: usize,
        warmups: usize,
    },
    ProfileDone {
        tables: BlockTables,
    },
    SetBandwidth {
        bandwidth_bps: Option<u64>,
    },
    Run {
        run_id: u64,
        input_rows: usize,
    },
    RunDone {
        run_id: u64,
        latency_s: f64,
        counters: TrafficCounters,
        checksum: u64,
        output_rows: usize,
    },
    WorkerErr {
        context: String,
        detail: String,
    },
    Shutdown,
}

fn control_frame(msg: &ControlMsg) -> Frame {
    Frame::control(serde_json::to_vec(msg).expect("control messages always encode"))
}

fn parse_control(frame: &Frame) -> Result<ControlMsg> {
    if frame.kind != FrameKind::Control {
        return Err(Error::Protocol(format!("expected control frame, got {:?}", frame.kind)));
    }
    serde_json::from_slice(&frame.payload)
        .map_err(|e| Error::Protocol(format!("undecodable control message: {e}")))
}

fn hello_frame(role: HelloRole, rank: u16) -> Frame {
    control_frame(&ControlMsg::Hello { role, rank })
}

fn read_hello(stream: &mut TcpStream, timeout: Duration) -> Result<(HelloRole, u16)> {
    stream
        .set_read_timeout(Some(timeout))
        .map_err(|e| Error::io("setting handshake timeout", e))?;
    let frame =
        Frame::read_from(stream).map_err(|e| Error::Protocol(format!("handshake read: {e}")))?;
    stream.set_read_timeout(None).map_err(|e| Error::io("clearing handshake timeout", e))?;
    match parse_control(&frame)? {
        ControlMsg::Hello { role, rank } => Ok((role, rank)),
        other => Err(Error::Protocol(format!("expected hello, got {other:?}"))),
    }
}

// ---------------------------------------------------------------------------
// Worker
// ---------------------------------------------------------------------------

enum EngineAny {
    F32(WorkerEngine<f32>),
    F64(WorkerEngine<f64>),
}

struct WorkerState {
    rank: usize,
    world: usize,
    ring_addresses: Vec<String>,
    throttle: Throttle,
    accountant: MemoryAccountant,
    bandwidth_bps: Option<u64>,
    timeout: Duration,
    group: Option<RingGroup>,
    engine: Option<EngineAny>,
    dtype: DType,
}

/// Runs a worker on `listen` until the coordinator sends a shutdown. Prints
/// the bound address on startup so callers may bind port 0.
pub fn worker_main(listen: &str) -> Result<()> {
    let listener = TcpListener::bind(listen)
        .map_err(|e| Error::io(format!("binding worker listener on {listen}"), e))?;
    let local = listener.local_addr().map_err(|e| Error::io("resolving listener address", e))?;
    println!("hmp worker listening on {local}");
    std::io::stdout().flush().ok();

    loop {
        let (mut stream, _) = listener
            .accept()
            .map_err(|e| Error::io("accepting coordinator connection", e))?;
        match read_hello(&mut stream, Duration::from_secs(30)) {
            Ok((HelloRole::Coordinator, _)) => {}
            Ok((HelloRole::RingPeer, rank)) => {
                eprintln!("hmp worker: stray ring connection from rank {rank}, dropping");
                continue;
            }
            Err(e) => {
                eprintln!("hmp worker: handshake failed: {e}");
                continue;
            }
        }
        let control = Link::new(stream, usize::MAX, None)
            .map_err(|e| Error::io("creating control link", e))?;
        match serve_coordinator(&listener, &control) {
            SessionEnd::Shutdown => return Ok(()),
            SessionEnd::Disconnected => continue,
        }
    }
}

enum SessionEnd {
    Shutdown,
    Disconnected,
}

fn serve_coordinator(listener: &TcpListener, control: &Link) -> SessionEnd {
    let mut state: Option<WorkerState> = None;
    loop {
        let frame = match control.recv(OP_TIMEOUT) {
            Ok(f) => f,
            Err(_) => return SessionEnd::Disconnected,
        };
        let msg = match parse_control(&frame) {
            Ok(m) => m,
            Err(e) => {
                let reply = ControlMsg::WorkerErr { context: "decode".into(), detail: e.to_string() };
                let _ = control.send(control_frame(&reply), OP_TIMEOUT);
                continue;
            }
        };
        let reply = match msg {
            ControlMsg::Shutdown => {
                let _ = control.send(control_frame(&ControlMsg::Pong), OP_TIMEOUT);
                return SessionEnd::Shutdown;
            }
            ControlMsg::Ping => ControlMsg::Pong,
            other => match handle_command(listener, control, &mut state, other) {
                Ok(reply) => reply,
                Err(e) => ControlMsg::WorkerErr { context: "command".into(), detail: e.to_string() },
            },
        };
        if control.send(control_frame(&reply), OP_TIMEOUT).is_err() {
            return SessionEnd::Disconnected;
        }
    }
}

fn handle_command(
    listener: &TcpListener,
    control: &Link,
    state: &mut Option<WorkerState>,
    msg: ControlMsg,
) -> Result<ControlMsg> {
    match msg {
        ControlMsg::Init {
            rank,
            world,
            ring_addresses,
            compute_throttle,
            seconds_per_flop,
            bandwidth_bps,
            memory_budget,
            timeout_ms,
        } => {
            if rank >= world || ring_addresses.len() != world {
                return Err(Error::Config(format!(
                    "init rank {rank} world {world} with {} addresses",
                    ring_addresses.len()
                )));
            }
            let throttle = match seconds_per_flop {
                Some(spf) => Throttle::with_pace(compute_throttle, spf)?,
                None => Throttle::calibrated(compute_throttle)?,
            };
            *state = Some(WorkerState {
                rank,
                world,
                ring_addresses,
                throttle,
                accountant: MemoryAccountant::new(memory_budget),
                bandwidth_bps,
                timeout: Duration::from_millis(timeout_ms),
                group: None,
                engine: None,
                dtype: DType::F32,
            });
            Ok(ControlMsg::InitOk)
        }
        ControlMsg::EstablishRing => {
            let st = state.as_mut().ok_or_else(|| Error::Protocol("ring before init".into()))?;
            st.group = Some(establish_ring(listener, st)?);
            Ok(ControlMsg::RingOk)
        }
        ControlMsg::LoadModel { spec, plan, mode, overlap } => {
            let st = state.as_mut().ok_or_else(|| Error::Protocol("load before init".into()))?;
            if plan.world() != st.world {
                return Err(Error::Config(format!(
                    "plan covers {} devices, ring has {}",
                    plan.world(),
                    st.world
                )));
            }
            st.accountant.reset_to(0);
            st.dtype = spec.dtype;
            let (engine, resident) = match spec.dtype {
                DType::F32 => {
                    let m = spec.build_model::<f32>()?;
                    let e = WorkerEngine::new(&m, &plan, st.rank, mode, overlap, &st.accountant)?;
                    let r = e.resident_bytes();
                    (EngineAny::F32(e), r)
                }
                DType::F64 => {
                    let m = spec.build_model::<f64>()?;
                    let e = WorkerEngine::new(&m, &plan, st.rank, mode, overlap, &st.accountant)?;
                    let r = e.resident_bytes();
                    (EngineAny::F64(e), r)
                }
                DType::F16 => {
                    return Err(Error::Config("f16 is an accounting dtype, not a compute dtype".into()))
                }
            };
            st.engine = Some(engine);
            Ok(ControlMsg::ModelLoaded { resident_bytes: resident })
        }
        ControlMsg::Profile { config, mha_sizes, mlp_sizes, con_sizes, seq, reps, warmups } => {
            let st = state.as_ref().ok_or_else(|| Error::Protocol("profile before init".into()))?;
            config.validate()?;
            let tables = match config.dtype {
                DType::F64 => profiler::profile_blocks::<f64>(
                    &config, &mha_sizes, &mlp_sizes, &con_sizes, seq, reps, warmups, &st.throttle,
                )?,
                _ => profiler::profile_blocks::<f32>(
                    &config, &mha_sizes, &mlp_sizes, &con_sizes, seq, reps, warmups, &st.throttle,
                )?,
            };
            Ok(ControlMsg::ProfileDone { tables })
        }
        ControlMsg::SetBandwidth { bandwidth_bps } => {
            let st = state.as_mut().ok_or_else(|| Error::Protocol("bandwidth before init".into()))?;
            st.bandwidth_bps = bandwidth_bps;
            if let Some(group) = &st.group {
                group.set_bandwidth(bandwidth_bps);
            }
            Ok(ControlMsg::Pong)
        }
        ControlMsg::Run { run_id, input_rows } => {
            let st = state.as_mut().ok_or_else(|| Error::Protocol("run before init".into()))?;
            let input_frame = control.recv(OP_TIMEOUT).map_err(|e| {
                Error::Protocol(format!("missing input fragment for run {run_id}: {e}"))
            })?;
            if input_frame.kind != FrameKind::TensorFragment {
                return Err(Error::Protocol("run input must be a tensor fragment".into()));
            }
            let WorkerState { rank, throttle, accountant, group, engine, .. } = st;
            let group = group.as_mut().ok_or_else(|| Error::Protocol("run before ring".into()))?;
            match engine {
                Some(EngineAny::F32(e)) => run_once::<f32>(
                    control, e, group, throttle, accountant, *rank, run_id, input_rows,
                    &input_frame.payload,
                ),
                Some(EngineAny::F64(e)) => run_once::<f64>(
                    control, e, group, throttle, accountant, *rank, run_id, input_rows,
                    &input_frame.payload,
                ),
                None => Err(Error::Protocol("run before model load".into())),
            }
        }
        other => Err(Error::Protocol(format!("unexpected command {other:?}"))),
    }
}

#[allow(clippy::too_many_arguments)]
fn run_once<T: Scalar>(
    control: &Link,
    engine: &WorkerEngine<T>,
    group: &mut RingGroup,
    throttle: &Throttle,
    accountant: &MemoryAccountant,
    rank: usize,
    run_id: u64,
    input_rows: usize,
    payload: &[u8],
) -> Result<ControlMsg> {
    let hidden = engine.config().hidden;
    let input = Tensor::<T>::from_le_bytes(input_rows, hidden, payload).map_err(Error::Shape)?;

    let start = Instant::now();
    let counters_before = group.counters();
    let (output, traces) = engine.run(group, throttle, accountant, &input)?;
    let latency_s = start.elapsed().as_secs_f64();
    let counters = group.counters().minus(&counters_before);

    let output_bytes = output.to_le_bytes();
    let checksum = checksum_bytes(&output_bytes);
    let trace_frame = Frame {
        kind: FrameKind::Trace,
        collective_id: run_id,
        origin_rank: rank as u16,
        step: 0,
        payload: serde_json::to_vec(&traces).expect("traces encode"),
    };
    control.send(trace_frame, OP_TIMEOUT)?;
    if rank == 0 {
        control.send(Frame::fragment(run_id, 0, 0, output_bytes), OP_TIMEOUT)?;
    }
    Ok(ControlMsg::RunDone {
        run_id,
        latency_s,
        counters,
        checksum,
        output_rows: output.rows(),
    })
}

fn establish_ring(listener: &TcpListener, st: &WorkerState) -> Result<RingGroup> {
    if st.world == 1 {
        let mut group = RingGroup::single();
        group.set_timeout(st.timeout);
        return Ok(group);
    }
    let succ_rank = (st.rank + 1) % st.world;
    let pred_rank = (st.rank + st.world - 1) % st.world;
    let succ_addr = st.ring_addresses[succ_rank].clone();
    let my_rank = st.rank as u16;
    let handshake_timeout = st.timeout.max(Duration::from_secs(2));
    let deadline = Instant::now() + handshake_timeout;

    let accept_handle = std::thread::scope(
        |scope| -> Result<(std::io::Result<TcpStream>, TcpStream)> {
            let acceptor = scope.spawn(move || -> Result<TcpStream> {
                let (mut stream, _) = listener
                    .accept()
                    .map_err(|e| Error::io("accepting ring predecessor", e))?;
                let (role, rank) = read_hello(&mut stream, handshake_timeout)?;
                if role != HelloRole::RingPeer || rank as usize != pred_rank {
                    return Err(Error::Protocol(format!(
                        "expected ring hello from rank {pred_rank}, got {role:?} rank {rank}"
                    )));
                }
                Ok(stream)
            });

            // Connect to the successor with retry until the deadline; the
            // successor may not have reached its accept yet.
            let next_stream = loop {
                match TcpStream::connect(&succ_addr) {
                    Ok(mut stream) => {
                        hello_frame(HelloRole::RingPeer, my_rank)
                            .write_to(&mut stream)
                            .map_err(|e| Error::io("sending ring hello", e))?;
                        break stream;
                    }
                    Err(e) => {
                        if Instant::now() > deadline {
                            return Err(Error::Connect {
                                device_id: succ_rank,
                                address: succ_addr.clone(),
                                detail: e.to_string(),
                            });
                        }
                        std::thread::sleep(Duration::from_millis(50));
                    }
                }
            };
            let prev_stream = acceptor.join().expect("ring acceptor thread")?;
            Ok((Ok(next_stream), prev_stream))
        },
    )?;
    let (next_stream, prev_stream) = (accept_handle.0.expect("stream present"), accept_handle.1);

    let next = Link::new(next_stream, succ_rank, st.bandwidth_bps)
        .map_err(|e| Error::io("successor link", e))?;
    let prev = Link::new(prev_stream, pred_rank, st.bandwidth_bps)
        .map_err(|e| Error::io("predecessor link", e))?;
    let mut group = RingGroup::new(st.rank, st.world, Some(next), Some(prev), st.timeout)?;
    group.set_timeout(st.timeout);
    Ok(group)
}

// ---------------------------------------------------------------------------
// Coordinator
// ---------------------------------------------------------------------------

/// Coordinator-side handle to one worker.
pub struct WorkerClient {
    pub spec: WorkerSpec,
    pub rank: usize,
    link: Link,
}

impl WorkerClient {
    fn connect(spec: &WorkerSpec, rank: usize, timeout: Duration) -> Result<Self> {
        let deadline = Instant::now() + timeout;
        let stream = loop {
            match TcpStream::connect(&spec.address) {
                Ok(s) => break s,
                Err(e) => {
                    if Instant::now() > deadline {
                        return Err(Error::Connect {
                            device_id: spec.device_id,
                            address: spec.address.clone(),
                            detail: e.to_string(),
                        });
                    }
                    std::thread::sleep(Duration::from_millis(50));
                }
            }
        };
        let link = Link::new(stream, rank, None).map_err(|e| Error::io("control link", e))?;
        link.send(hello_frame(HelloRole::Coordinator, 0), timeout)?;
        Ok(Self { spec: spec.clone(), rank, link })
    }

    fn send(&self, msg: &ControlMsg) -> Result<()> {
        self.link.send(control_frame(msg), OP_TIMEOUT).map_err(|e| self.attribute(e))
    }

    fn recv_msg(&self, timeout: Duration) -> Result<ControlMsg> {
        let frame = self.link.recv(timeout).map_err(|e| self.attribute(e))?;
        parse_control(&frame)
    }

    fn recv_frame(&self, timeout: Duration) -> Result<Frame> {
        self.link.recv(timeout).map_err(|e| self.attribute(e))
    }

    fn attribute(&self, err: Error) -> Error {
        Error::Worker { device_id: self.spec.device_id, detail: err.to_string() }
    }

    fn expect(&self, want: &str, got: ControlMsg) -> Result<ControlMsg> {
        match got {
            ControlMsg::WorkerErr { context, detail } => Err(Error::Worker {
                device_id: self.spec.device_id,
                detail: format!("{context}: {detail}"),
            }),
            other => {
                let tag = control_tag(&other);
                if tag == want {
                    Ok(other)
                } else {
                    Err(Error::Protocol(format!(
                        "worker {} answered {tag} to {want}",
                        self.spec.device_id
                    )))
                }
            }
        }
    }

    fn request(&self, msg: &ControlMsg, want: &str, timeout: Duration) -> Result<ControlMsg> {
        self.send(msg)?;
        let got = self.recv_msg(timeout)?;
        self.expect(want, got)
    }
}

fn control_tag(msg: &ControlMsg) -> &'static str {
    match msg {
        ControlMsg::Hello { .. } => "hello",
        ControlMsg::Init { .. } => "init",
        ControlMsg::InitOk => "init_ok",
        ControlMsg::EstablishRing => "establish_ring",
        ControlMsg::RingOk => "ring_ok",
        ControlMsg::Ping => "ping",
        ControlMsg::Pong => "pong",
        ControlMsg::LoadModel { .. } => "load_model",
        ControlMsg::ModelLoaded { .. } => "model_loaded",
        ControlMsg::Profile { .. } => "profile",
        ControlMsg::ProfileDone { .. } => "profile_done",
        ControlMsg::SetBandwidth { .. } => "set_bandwidth",
        ControlMsg::Run { .. } => "run",
        ControlMsg::RunDone { .. } => "run_done",
        ControlMsg::WorkerErr { .. } => "worker_err",
        ControlMsg::Shutdown => "shutdown",
    }
}

/// One distributed run's results as observed by the coordinator.
#[derive(Debug, Clone)]
pub struct RunOutcome<T> {
    /// Slowest worker's wall time for the run.
    pub latency_s: f64,
    /// Per-worker wall time, by rank.
    pub per_rank_latency_s: Vec<f64>,
    pub output: Tensor<T>,
    pub per_rank_traces: Vec<Vec<RankLayerTrace>>,
    pub per_rank_counters: Vec<TrafficCounters>,
    pub output_checksum: u64,
}

/// Coordinator connection to every worker in the cluster. Rank order follows
/// the order of `config.workers`.
pub struct Cluster {
    pub config: ClusterConfig,
    workers: Vec<WorkerClient>,
    next_run_id: u64,
}

impl Cluster {
    pub fn connect(config: &ClusterConfig) -> Result<Self> {
        config.validate()?;
        let timeout = config.timeout();
        let workers = config
            .workers
            .iter()
            .enumerate()
            .map(|(rank, spec)| WorkerClient::connect(spec, rank, timeout))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { config: config.clone(), workers, next_run_id: 0 })
    }

    pub fn world(&self) -> usize {
        self.workers.len()
    }

    /// Init + ring wiring + liveness round-trip on every worker.
    pub fn init_ring(&mut self) -> Result<()> {
        let addresses: Vec<String> =
            self.config.workers.iter().map(|w| w.address.clone()).collect();
        let world = self.workers.len();
        // One host calibration shared by every worker; the emulated devices
        // differ only through their throttle multipliers.
        let pace = Throttle::calibrated(1.0)?.seconds_per_flop();
        for (rank, w) in self.workers.iter().enumerate() {
            let msg = ControlMsg::Init {
                rank,
                world,
                ring_addresses: addresses.clone(),
                compute_throttle: w.spec.compute_throttle,
                seconds_per_flop: pace,
                bandwidth_bps: w.spec.bandwidth_bps,
                memory_budget: w.spec.memory_budget,
                timeout_ms: self.config.timeout_ms,
            };
            w.request(&msg, "init_ok", self.config.timeout().max(Duration::from_secs(5)))?;
        }
        // All workers must enter ring establishment together; send first,
        // then collect.
        for w in &self.workers {
            w.send(&ControlMsg::EstablishRing)?;
        }
        let ring_timeout = self.config.timeout().max(Duration::from_secs(2)) * 2;
        for w in &self.workers {
            let got = w.recv_msg(ring_timeout)?;
            w.expect("ring_ok", got)?;
        }
        self.ping_all()
    }

    pub fn ping_all(&self) -> Result<()> {
        for w in &self.workers {
            w.request(&ControlMsg::Ping, "pong", self.config.timeout().max(Duration::from_secs(5)))?;
        }
        Ok(())
    }

    /// Loads (or synthesizes) and shards the model on every worker; returns
    /// per-rank resident shard bytes.
    pub fn load_model(
        &mut self,
        spec: &ModelSpec,
        plan: &PartitionPlan,
        mode: ExecMode,
        overlap: bool,
    ) -> Result<Vec<u64>> {
        let mut resident = Vec::with_capacity(self.workers.len());
        for w in &self.workers {
            let msg = ControlMsg::LoadModel {
                spec: spec.clone(),
                plan: plan.clone(),
                mode,
                overlap,
            };
            match w.request(&msg, "model_loaded", OP_TIMEOUT)? {
                ControlMsg::ModelLoaded { resident_bytes } => resident.push(resident_bytes),
                _ => unreachable!("expect() filtered the tag"),
            }
        }
        Ok(resident)
    }

    /// Profiles every worker. Sequential by default so co-located workers do
    /// not disturb each other; `parallel` profiles all at once.
    #[allow(clippy::too_many_arguments)]
    pub fn profile_all(
        &mut self,
        config: &ModelConfig,
        mha_sizes: &[usize],
        mlp_sizes: &[usize],
        con_sizes: &[usize],
        seq: usize,
        reps: usize,
        warmups: usize,
        parallel: bool,
    ) -> Result<Vec<BlockTables>> {
        let msg = ControlMsg::Profile {
            config: *config,
            mha_sizes: mha_sizes.to_vec(),
            mlp_sizes: mlp_sizes.to_vec(),
            con_sizes: con_sizes.to_vec(),
            seq,
            reps,
            warmups,
        };
        let mut tables = Vec::with_capacity(self.workers.len());
        if parallel {
            for w in &self.workers {
                w.send(&msg)?;
            }
            for w in &self.workers {
                let got = w.recv_msg(OP_TIMEOUT)?;
                match w.expect("profile_done", got)? {
                    ControlMsg::ProfileDone { tables: t } => tables.push(t),
                    _ => unreachable!(),
                }
            }
        } else {
            for w in &self.workers {
                match w.request(&msg, "profile_done", OP_TIMEOUT)? {
                    ControlMsg::ProfileDone { tables: t } => tables.push(t),
                    _ => unreachable!(),
                }
            }
        }
        Ok(tables)
    }

    pub fn set_bandwidth(&mut self, bandwidth_bps: Option<u64>) -> Result<()> {
        for w in &self.workers {
            w.request(
                &ControlMsg::SetBandwidth { bandwidth_bps },
                "pong",
                self.config.timeout().max(Duration::from_secs(5)),
            )?;
        }
        Ok(())
    }

    /// Distributes the input (sequence segments, or the full tensor under
    /// tp-allreduce), runs all workers, and collects outputs and traces.
    /// Any worker failure aborts with a detail line per worker.
    pub fn run<T: Scalar>(
        &mut self,
        input: &Tensor<T>,
        plan: &PartitionPlan,
        mode: ExecMode,
    ) -> Result<RunOutcome<T>> {
        self.next_run_id += 1;
        let run_id = self.next_run_id;
        let world = self.workers.len();
        let segments = match mode {
            ExecMode::TpAllreduce => None,
            _ => Some(crate::tensor::split_rows(input, &plan.seq_rows)?),
        };
        for (rank, w) in self.workers.iter().enumerate() {
            let local: &Tensor<T> = match &segments {
                Some(parts) => &parts[rank],
                None => input,
            };
            w.send(&ControlMsg::Run { run_id, input_rows: local.rows() })?;
            w.link
                .send(Frame::fragment(run_id, rank as u16, 0, local.to_le_bytes()), OP_TIMEOUT)
                .map_err(|e| w.attribute(e))?;
        }

        // Collect trace frame + output fragment (rank 0) + RunDone from each
        // worker; tolerate failures and report them all.
        let deadline_each = OP_TIMEOUT;
        let mut failures: Vec<String> = Vec::new();
        let mut latencies = vec![0.0f64; world];
        let mut traces: Vec<Vec<RankLayerTrace>> = vec![Vec::new(); world];
        let mut counters = vec![TrafficCounters::default(); world];
        let mut checksums = vec![0u64; world];
        let mut output: Option<Tensor<T>> = None;

        for (rank, w) in self.workers.iter().enumerate() {
            let outcome = (|| -> Result<()> {
                loop {
                    let frame = w.recv_frame(deadline_each)?;
                    match frame.kind {
                        FrameKind::Trace => {
                            traces[rank] = serde_json::from_slice(&frame.payload)
                                .map_err(|e| Error::Protocol(format!("undecodable trace: {e}")))?;
                        }
                        FrameKind::TensorFragment => {
                            let rows = frame.payload.len() / (input.cols() * T::BYTES).max(1);
                            output = Some(
                                Tensor::<T>::from_le_bytes(rows, input.cols(), &frame.payload)
                                    .map_err(Error::Shape)?,
                            );
                        }
                        FrameKind::Control => match parse_control(&frame)? {
                            ControlMsg::RunDone {
                                run_id: rid,
                                latency_s,
                                counters: c,
                                checksum,
                                output_rows: _,
                            } => {
                                if rid != run_id {
                                    return Err(Error::Protocol(format!(
                                        "run id {rid} in reply to {run_id}"
                                    )));
                                }
                                latencies[rank] = latency_s;
                                counters[rank] = c;
                                checksums[rank] = checksum;
                                return Ok(());
                            }
                            ControlMsg::WorkerErr { context, detail } => {
                                return Err(Error::Worker {
                                    device_id: w.spec.device_id,
                                    detail: format!("{context}: {detail}"),
                                });
                            }
                            other => {
                                return Err(Error::Protocol(format!(
                                    "unexpected {} during run",
                                    control_tag(&other)
                                )))
                            }
                        },
                    }
                }
            })();
            if let Err(e) = outcome {
                failures.push(format!("device {}: {e}", w.spec.device_id));
            }
        }
        if !failures.is_empty() {
            return Err(Error::Worker {
                device_id: self.workers[0].spec.device_id,
                detail: format!("run aborted; {}", failures.join("; ")),
            });
        }
        let output = output.ok_or_else(|| Error::Protocol("rank 0 sent no output".into()))?;
        let reference = checksums[0];
        if checksums.iter().any(|&c| c != reference) {
            return Err(Error::Protocol(format!(
                "ranks disagree on the output checksum: {checksums:x?}"
            )));
        }
        let latency_s = latencies.iter().cloned().fold(0.0, f64::max);
        Ok(RunOutcome {
            latency_s,
            per_rank_latency_s: latencies,
            output,
            per_rank_traces: traces,
            per_rank_counters: counters,
            output_checksum: reference,
        })
    }

    /// Graceful stop; workers exit their process loop.
    pub fn shutdown(self) -> Result<()> {
        for w in &self.workers {
            let _ = w.send(&ControlMsg::Shutdown);
            let _ = w.recv_msg(Duration::from_secs(5));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::planner::equal_split;
    use crate::tensor::max_rel_error;

    fn spawn_worker_thread(listen: &str) -> (std::thread::JoinHandle<Result<()>>, String) {
        // Bind first so the bound port is known without parsing stdout.
        let listener = TcpListener::bind(listen).unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        drop(listener);
        let addr_clone = addr.clone();
        let handle = std::thread::spawn(move || worker_main(&addr_clone));
        (handle, addr)
    }

    fn local_cluster(world: usize, timeout_ms: u64) -> (Vec<std::thread::JoinHandle<Result<()>>>, ClusterConfig) {
        let mut handles = Vec::new();
        let mut workers = Vec::new();
        for d in 0..world {
            let (h, addr) = spawn_worker_thread("127.0.0.1:0");
            handles.push(h);
            workers.push(WorkerSpec {
                device_id: d,
                address: addr,
                compute_throttle: 1.0,
                bandwidth_bps: None,
                memory_budget: None,
            });
        }
        (handles, ClusterConfig { schema_version: 1, timeout_ms, workers })
    }

    #[test]
    fn cluster_config_validation() {
        let mut cfg = ClusterConfig {
            schema_version: 1,
            timeout_ms: 1000,
            workers: vec![
                WorkerSpec {
                    device_id: 0,
                    address: "127.0.0.1:1".into(),
                    compute_throttle: 1.0,
                    bandwidth_bps: None,
                    memory_budget: None,
                },
                WorkerSpec {
                    device_id: 0,
                    address: "127.0.0.1:2".into(),
                    compute_throttle: 1.0,
                    bandwidth_bps: None,
                    memory_budget: None,
                },
            ],
        };
        assert!(cfg.validate().is_err(), "duplicate ids accepted");
        cfg.workers[1].device_id = 1;
        cfg.validate().unwrap();
        cfg.workers[1].compute_throttle = 0.5;
        assert!(cfg.validate().is_err(), "sub-unit throttle accepted");
    }

    #[test]
    fn json_artifacts_round_trip_byte_identically() {
        let cfg = ClusterConfig {
            schema_version: 1,
            timeout_ms: 1234,
            workers: vec![WorkerSpec {
                device_id: 3,
                address: "10.0.0.1:7000".into(),
                compute_throttle: 2.5,
                bandwidth_bps: Some(100_000_000),
                memory_budget: Some(1 << 30),
            }],
        };
        let dir = std::env::temp_dir().join(format!("hmp-json-{}", std::process::id()));
        fs::create_dir_all(&dir).unwrap();
        let path = dir.join("cluster.json");
        write_json_file(&path, &cfg).unwrap();
        let loaded: ClusterConfig = read_json_file(&path).unwrap();
        assert_eq!(loaded, cfg);
        let first = fs::read(&path).unwrap();
        write_json_file(&path, &loaded).unwrap();
        assert_eq!(fs::read(&path).unwrap(), first);
        fs::remove_file(&path).unwrap();
    }

    #[test]
    fn checksum_is_stable_and_input_sensitive() {
        let a = checksum_bytes(b"hello");
        assert_eq!(a, checksum_bytes(b"hello"));
        assert_ne!(a, checksum_bytes(b"hellp"));
        assert_eq!(checksum_bytes(b""), 0xcbf2_9ce4_8422_2325);
    }

    #[test]
    fn single_worker_full_session() {
        let (handles, config) = local_cluster(1, 2000);
        let mut cluster = Cluster::connect(&config).unwrap();
        cluster.init_ring().unwrap();

        let mc = ModelConfig::new(2, 2, 16, 64, DType::F32).unwrap();
        let spec = ModelSpec::synthesized(mc, 7);
        let plan = PartitionPlan::single(&mc, 6);
        let resident = cluster.load_model(&spec, &plan, ExecMode::Hmp, false).unwrap();
        assert_eq!(resident.len(), 1);
        assert!(resident[0] > 0);

        let input = model::synthetic_input::<f32>(&mc, 6, 9);
        let outcome = cluster.run(&input, &plan, ExecMode::Hmp).unwrap();
        let model = spec.build_model::<f32>().unwrap();
        let want = model::reference_forward(&model, &input).unwrap();
        assert!(max_rel_error(&outcome.output, &want) < 1e-5);
        assert_eq!(outcome.per_rank_traces[0].len(), 2);

        // Deterministic repeat: same checksum.
        let again = cluster.run(&input, &plan, ExecMode::Hmp).unwrap();
        assert_eq!(again.output_checksum, outcome.output_checksum);

        cluster.shutdown().unwrap();
        for h in handles {
            h.join().unwrap().unwrap();
        }
    }

    #[test]
    fn three_workers_distributed_run_matches_reference() {
        let world = 3;
        let (handles, config) = local_cluster(world, 4000);
        let mut cluster = Cluster::connect(&config).unwrap();
        cluster.init_ring().unwrap();

        let mc = ModelConfig::new(2, 4, 16, 64, DType::F32).unwrap();
        let spec = ModelSpec::synthesized(mc, 21);
        let seq = 7;
        let plan = PartitionPlan {
            heads: vec![2, 1, 1],
            mlp_cols: equal_split(mc.intermediate(), world),
            seq_rows: equal_split(seq, world),
        };
        cluster.load_model(&spec, &plan, ExecMode::Hmp, true).unwrap();

        let input = model::synthetic_input::<f32>(&mc, seq, 33);
        let outcome = cluster.run(&input, &plan, ExecMode::Hmp).unwrap();
        let model = spec.build_model::<f32>().unwrap();
        let want = model::reference_forward(&model, &input).unwrap();
        assert!(max_rel_error(&outcome.output, &want) < 1e-4);
        assert_eq!(outcome.per_rank_counters.len(), world);
        assert!(outcome.per_rank_counters.iter().all(|c| c.total() > 0));

        cluster.shutdown().unwrap();
        for h in handles {
            h.join().unwrap().unwrap();
        }
    }

    #[test]
    fn missing_worker_yields_attributed_connect_error() {
        let free_port = {
            let l = TcpListener::bind("127.0.0.1:0").unwrap();
            l.local_addr().unwrap().to_string()
        };
        let config = ClusterConfig {
            schema_version: 1,
            timeout_ms: 300,
            workers: vec![WorkerSpec {
                device_id: 5,
                address: free_port,
                compute_throttle: 1.0,
                bandwidth_bps: None,
                memory_budget: None,
            }],
        };
        match Cluster::connect(&config) {
            Err(Error::Connect { device_id: 5, .. }) => {}
            Err(other) => panic!("expected attributed connect error, got {other}"),
            Ok(_) => panic!("connected to a vacated port"),
        }
    }

    #[test]
    fn budget_violation_surfaces_as_worker_error() {
        let (handles, mut config) = local_cluster(1, 2000);
        config.workers[0].memory_budget = Some(1024);
        let mut cluster = Cluster::connect(&config).unwrap();
        cluster.init_ring().unwrap();
        let mc = ModelConfig::new(2, 2, 16, 64, DType::F32).unwrap();
        let spec = ModelSpec::synthesized(mc, 1);
        let plan = PartitionPlan::single(&mc, 4);
        match cluster.load_model(&spec, &plan, ExecMode::SpOnly, false) {
            Err(Error::Worker { device_id: 0, detail }) => {
                assert!(detail.contains("budget"), "unexpected detail: {detail}");
            }
            other => panic!("expected budget failure, got {other:?}"),
        }
        cluster.shutdown().unwrap();
        for h in handles {
            h.join().unwrap().unwrap();
        }
    }
}
