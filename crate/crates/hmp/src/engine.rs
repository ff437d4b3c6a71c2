//! Per-layer hybrid-parallel dataflow: tensor parallelism over the MHA and
//! MLP blocks, sequence parallelism over the connective blocks, with a
//! ReduceScatter after each TP block and an AllGather after each SP block.
//! Also provides the two baseline execution modes used for comparison runs:
//! Megatron-style TP with AllReduce synchronization, and pure sequence
//! parallelism with replicated weights.

use std::time::Instant;

use crate::collectives::RingGroup;
use crate::error::{Error, Result};
use crate::memory::{MemoryAccountant, Reservation};
use crate::model::{self, LayerWeights, Model, ModelConfig};
use crate::planner::PartitionPlan;
use crate::tensor::{self, Scalar, Tensor};
use crate::throttle::Throttle;

// ---------------------------------------------------------------------------
// Modes and traces
// ---------------------------------------------------------------------------

/// How a run synchronizes across devices.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExecMode {
    /// Hybrid TP + SP with ReduceScatter/AllGather synchronization.
    Hmp,
    /// Weight-sharded TP with one AllReduce after each block; connective
    /// blocks are computed redundantly on every device.
    TpAllreduce,
    /// Sequence split with fully replicated weights; the MHA block gathers
    /// keys and values before attention.
    SpOnly,
}

impl std::str::FromStr for ExecMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "hmp" => Ok(Self::Hmp),
            "tp-allreduce" => Ok(Self::TpAllreduce),
            "sp-only" => Ok(Self::SpOnly),
            other => Err(Error::Config(format!(
                "unknown mode {other:?}, expected hmp, tp-allreduce or sp-only"
            ))),
        }
    }
}

impl std::fmt::Display for ExecMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Hmp => write!(f, "hmp"),
            Self::TpAllreduce => write!(f, "tp-allreduce"),
            Self::SpOnly => write!(f, "sp-only"),
        }
    }
}

/// Wall time per phase of one layer, in execution order. In overlap mode the
/// gather/scatter phases absorb the GEMM they fuse with.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PhaseSeconds {
    /// AllGather feeding the MHA block (fused with the QKV GEMM when overlapped).
    pub ag_mha: f64,
    pub mha: f64,
    /// ReduceScatter after the MHA block (fused with the output projection).
    pub rs_mha: f64,
    pub con_mha: f64,
    /// AllGather feeding the MLP block (fused with the up projection).
    pub ag_mlp: f64,
    pub mlp: f64,
    /// ReduceScatter after the MLP block (fused with the down projection).
    pub rs_mlp: f64,
    pub con_mlp: f64,
}

impl PhaseSeconds {
    pub const NAMES: [&'static str; 8] =
        ["ag_mha", "mha", "rs_mha", "con_mha", "ag_mlp", "mlp", "rs_mlp", "con_mlp"];

    pub fn as_array(&self) -> [f64; 8] {
        [
            self.ag_mha, self.mha, self.rs_mha, self.con_mha, self.ag_mlp, self.mlp, self.rs_mlp,
            self.con_mlp,
        ]
    }

    pub fn total(&self) -> f64 {
        self.as_array().iter().sum()
    }
}

/// One rank's observation of one layer.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RankLayerTrace {
    pub phases: PhaseSeconds,
    pub all_gather_bytes: u64,
    pub reduce_scatter_bytes: u64,
    pub all_reduce_bytes: u64,
}

// ---------------------------------------------------------------------------
// Shards
// ---------------------------------------------------------------------------

/// One rank's slice of a layer: QKV and output-projection shards for its
/// heads, MLP column/row shards for its columns, and replicated layer-norm
/// parameters. Biases of row-sharded matrices (`bb`, `be`) are replicated
/// and applied once, after the reduction, on the rows each rank owns.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerShards<T> {
    pub wq: Tensor<T>,
    pub wk: Tensor<T>,
    pub wv: Tensor<T>,
    pub bq: Vec<T>,
    pub bk: Vec<T>,
    pub bv: Vec<T>,
    pub wb: Tensor<T>,
    pub bb: Vec<T>,
    pub wd: Tensor<T>,
    pub bd: Vec<T>,
    pub we: Tensor<T>,
    pub be: Vec<T>,
    pub ln1_gamma: Vec<T>,
    pub ln1_beta: Vec<T>,
    pub ln2_gamma: Vec<T>,
    pub ln2_beta: Vec<T>,
    pub heads: usize,
    pub mlp_cols: usize,
}

impl<T: Scalar> LayerShards<T> {
    pub fn byte_size(&self) -> u64 {
        let elems = self.wq.data().len()
            + self.wk.data().len()
            + self.wv.data().len()
            + self.wb.data().len()
            + self.wd.data().len()
            + self.we.data().len()
            + self.bq.len()
            + self.bk.len()
            + self.bv.len()
            + self.bb.len()
            + self.bd.len()
            + self.be.len()
            + self.ln1_gamma.len()
            + self.ln1_beta.len()
            + self.ln2_gamma.len()
            + self.ln2_beta.len();
        (elems * T::BYTES) as u64
    }

    /// Column-concatenated `[Wq | Wk | Wv]` for the single QKV projection.
    pub fn wqkv(&self) -> Result<Tensor<T>> {
        Ok(tensor::concat_cols(&[self.wq.clone(), self.wk.clone(), self.wv.clone()])?)
    }

    pub fn bqkv(&self) -> Vec<T> {
        let mut out = Vec::with_capacity(self.bq.len() * 3);
        out.extend_from_slice(&self.bq);
        out.extend_from_slice(&self.bk);
        out.extend_from_slice(&self.bv);
        out
    }
}

/// Deterministic contiguous-by-rank slicing of one layer's weights: rank r
/// takes head block `[head_start, head_start + heads)` and MLP columns
/// `[col_start, col_start + cols)`.
pub fn shard_layer<T: Scalar>(
    layer: &LayerWeights<T>,
    config: &ModelConfig,
    plan: &PartitionPlan,
    rank: usize,
) -> LayerShards<T> {
    let hd = config.head_dim();
    let head_start: usize = plan.heads[..rank].iter().sum();
    let heads = plan.heads[rank];
    let c0 = head_start * hd;
    let cw = heads * hd;
    let col_start: usize = plan.mlp_cols[..rank].iter().sum();
    let cols = plan.mlp_cols[rank];

    LayerShards {
        wq: layer.wq.col_block(c0, cw),
        wk: layer.wk.col_block(c0, cw),
        wv: layer.wv.col_block(c0, cw),
        bq: layer.bq[c0..c0 + cw].to_vec(),
        bk: layer.bk[c0..c0 + cw].to_vec(),
        bv: layer.bv[c0..c0 + cw].to_vec(),
        wb: layer.wb.row_block(c0, cw),
        bb: layer.bb.clone(),
        wd: layer.wd.col_block(col_start, cols),
        bd: layer.bd[col_start..col_start + cols].to_vec(),
        we: layer.we.row_block(col_start, cols),
        be: layer.be.clone(),
        ln1_gamma: layer.ln1_gamma.clone(),
        ln1_beta: layer.ln1_beta.clone(),
        ln2_gamma: layer.ln2_gamma.clone(),
        ln2_beta: layer.ln2_beta.clone(),
        heads,
        mlp_cols: cols,
    }
}

pub fn shard_model<T: Scalar>(
    model: &Model<T>,
    plan: &PartitionPlan,
    rank: usize,
) -> Result<Vec<LayerShards<T>>> {
    if rank >= plan.world() {
        return Err(Error::Config(format!("rank {rank} outside plan of {}", plan.world())));
    }
    plan.validate(&model.config, plan.seq_len())?;
    Ok(model.layers.iter().map(|l| shard_layer(l, &model.config, plan, rank)).collect())
}

// ---------------------------------------------------------------------------
// TP / SP block operators
// ---------------------------------------------------------------------------

/// This rank's additive partial of the MHA block output: QKV projection over
/// its heads, per-head attention, then the row-sharded output projection.
/// The output-projection bias is not applied here; it is added once after
/// the cross-rank reduction.
pub fn run_mha_tp<T: Scalar>(
    shards: &LayerShards<T>,
    config: &ModelConfig,
    a_full: &Tensor<T>,
    throttle: &Throttle,
) -> Result<Tensor<T>> {
    let b_attn = mha_attention(shards, config, a_full, throttle)?;
    let cost = tensor::gemm_flops(b_attn.rows(), b_attn.cols(), shards.wb.cols());
    throttle.run_cost(cost, || tensor::gemm(&b_attn, &shards.wb)).map_err(Error::Shape)
}

/// QKV projection plus per-head attention (everything before the output
/// projection), shared by the plain and overlapped layer paths.
fn mha_attention<T: Scalar>(
    shards: &LayerShards<T>,
    config: &ModelConfig,
    a_full: &Tensor<T>,
    throttle: &Throttle,
) -> Result<Tensor<T>> {
    let cost = tensor::gemm_flops(a_full.rows(), a_full.cols(), 3 * shards.wq.cols());
    let qkv = throttle.run_cost(cost, || -> Result<Tensor<T>> {
        let proj = tensor::gemm(a_full, &shards.wqkv()?)?;
        Ok(tensor::add_row_vector(&proj, &shards.bqkv())?)
    })?;
    attention_from_qkv(shards, config, &qkv, throttle)
}

fn attention_from_qkv<T: Scalar>(
    shards: &LayerShards<T>,
    config: &ModelConfig,
    qkv: &Tensor<T>,
    throttle: &Throttle,
) -> Result<Tensor<T>> {
    let width = shards.heads * config.head_dim();
    let parts = tensor::split_cols(qkv, &[width, width, width])?;
    let cost = tensor::attention_flops(qkv.rows(), qkv.rows(), width);
    throttle
        .run_cost(cost, || tensor::self_attention(&parts[0], &parts[1], &parts[2], config.head_dim()))
        .map_err(Error::Shape)
}

/// This rank's additive partial of the MLP block output. GELU applies before
/// the reduction because column shards are independent: no cross-rank terms
/// appear inside the activation.
pub fn run_mlp_tp<T: Scalar>(
    shards: &LayerShards<T>,
    d_full: &Tensor<T>,
    throttle: &Throttle,
) -> Result<Tensor<T>> {
    let rows = d_full.rows();
    let up_cost = tensor::gemm_flops(rows, d_full.cols(), shards.wd.cols())
        + gelu_flops(rows, shards.wd.cols());
    let e = throttle.run_cost(up_cost, || -> Result<Tensor<T>> {
        let up = tensor::gemm(d_full, &shards.wd)?;
        Ok(tensor::gelu(&tensor::add_row_vector(&up, &shards.bd)?))
    })?;
    let down_cost = tensor::gemm_flops(rows, shards.we.rows(), shards.we.cols());
    throttle.run_cost(down_cost, || tensor::gemm(&e, &shards.we)).map_err(Error::Shape)
}

/// Connective block over this rank's sequence segment: dropout (identity),
/// residual add, layer norm. Row-local, so any sequence split concatenates
/// to the same result.
pub fn run_connective_sp<T: Scalar>(
    g_segment: &Tensor<T>,
    residual_segment: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    throttle: &Throttle,
) -> Result<Tensor<T>> {
    let cost = connective_flops(g_segment.rows(), g_segment.cols());
    throttle.run_cost(cost, || model::connective(g_segment, residual_segment, gamma, beta))
}

/// Pacing costs of the non-GEMM kernels in gemm-flop equivalents. They must
/// upper-bound the raw kernel so paced durations stay deterministic; the
/// same constants apply on every device, so allocation ratios are unbiased.
fn gelu_flops(rows: usize, cols: usize) -> f64 {
    (tensor::TANH_FLOPS + 8.0) * rows as f64 * cols as f64
}

fn connective_flops(rows: usize, cols: usize) -> f64 {
    64.0 * rows as f64 * cols as f64
}

// ---------------------------------------------------------------------------
// Worker engine
// ---------------------------------------------------------------------------

enum WorkerWeights<T> {
    Sharded(Vec<LayerShards<T>>),
    Replicated(Model<T>),
}

/// One worker's executable slice of the model plus the run mode. Immutable
/// during a run; one logical execution thread per layer, with concurrency
/// only inside the overlapped collectives.
pub struct WorkerEngine<T> {
    config: ModelConfig,
    plan: PartitionPlan,
    rank: usize,
    mode: ExecMode,
    overlap: bool,
    weights: WorkerWeights<T>,
    resident_bytes: u64,
}

fn timed<R>(slot: &mut f64, f: impl FnOnce() -> R) -> R {
    let start = Instant::now();
    let out = f();
    *slot += start.elapsed().as_secs_f64();
    out
}

impl<T: Scalar> WorkerEngine<T> {
    /// Shards (or replicates, for sp-only) the model for `rank` and charges
    /// the resident weight bytes against the memory budget.
    pub fn new(
        model: &Model<T>,
        plan: &PartitionPlan,
        rank: usize,
        mode: ExecMode,
        overlap: bool,
        accountant: &MemoryAccountant,
    ) -> Result<Self> {
        let mut resident = 0u64;
        let weights = match mode {
            ExecMode::Hmp | ExecMode::TpAllreduce => {
                let shards = shard_model(model, plan, rank)?;
                for (i, layer) in shards.iter().enumerate() {
                    let bytes = layer.byte_size();
                    accountant.reserve(&format!("layer{i}.shards"), bytes)?;
                    resident += bytes;
                }
                WorkerWeights::Sharded(shards)
            }
            ExecMode::SpOnly => {
                plan.validate(&model.config, plan.seq_len())?;
                for (i, layer) in model.layers.iter().enumerate() {
                    let bytes = layer_weight_bytes(layer);
                    accountant.reserve(&format!("layer{i}.weights"), bytes)?;
                    resident += bytes;
                }
                WorkerWeights::Replicated(model.clone())
            }
        };
        Ok(Self {
            config: model.config,
            plan: plan.clone(),
            rank,
            mode,
            overlap,
            weights,
            resident_bytes: resident,
        })
    }

    pub fn resident_bytes(&self) -> u64 {
        self.resident_bytes
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn plan(&self) -> &PartitionPlan {
        &self.plan
    }

    /// Rows of input this rank expects: its sequence segment, or the full
    /// sequence under tp-allreduce (which replicates activations).
    pub fn expected_input_rows(&self) -> usize {
        match self.mode {
            ExecMode::Hmp | ExecMode::SpOnly => self.plan.seq_rows[self.rank],
            ExecMode::TpAllreduce => self.plan.seq_len(),
        }
    }

    /// Executes the full model and returns the complete output (identical on
    /// every rank after the final gather) plus this rank's per-layer trace.
    pub fn run(
        &self,
        group: &mut RingGroup,
        throttle: &Throttle,
        accountant: &MemoryAccountant,
        input: &Tensor<T>,
    ) -> Result<(Tensor<T>, Vec<RankLayerTrace>)> {
        if input.cols() != self.config.hidden {
            return Err(Error::Config(format!(
                "input width {} != hidden {}",
                input.cols(),
                self.config.hidden
            )));
        }
        if input.rows() != self.expected_input_rows() {
            return Err(Error::Config(format!(
                "rank {} expected {} input rows, got {}",
                self.rank,
                self.expected_input_rows(),
                input.rows()
            )));
        }
        let _activations = Reservation::take(
            accountant,
            "activations",
            self.activation_envelope_bytes(),
        )?;

        let mut traces = Vec::with_capacity(self.config.num_layers);
        let mut x = input.clone();
        for li in 0..self.config.num_layers {
            let before = group.counters();
            let mut phases = PhaseSeconds::default();
            x = match (&self.weights, self.mode) {
                (WorkerWeights::Sharded(shards), ExecMode::Hmp) => {
                    self.hmp_layer(&shards[li], group, throttle, &x, &mut phases)?
                }
                (WorkerWeights::Sharded(shards), ExecMode::TpAllreduce) => {
                    self.tp_allreduce_layer(&shards[li], group, throttle, &x, &mut phases)?
                }
                (WorkerWeights::Replicated(model), ExecMode::SpOnly) => {
                    self.sp_only_layer(&model.layers[li], group, throttle, &x, &mut phases)?
                }
                _ => unreachable!("weights layout always matches mode"),
            };
            let delta = group.counters().minus(&before);
            traces.push(RankLayerTrace {
                phases,
                all_gather_bytes: delta.all_gather,
                reduce_scatter_bytes: delta.reduce_scatter,
                all_reduce_bytes: delta.all_reduce,
            });
        }

        // Final gather so rank 0 (and everyone else) holds the full output.
        let full = match self.mode {
            ExecMode::Hmp | ExecMode::SpOnly => group.all_gather(&x, &self.plan.seq_rows)?,
            ExecMode::TpAllreduce => x,
        };
        Ok((full, traces))
    }

    /// TP(MHA) -> ReduceScatter -> SP connective -> AllGather -> TP(MLP) ->
    /// ReduceScatter -> SP connective. The entry AllGather and both
    /// ReduceScatters fuse with their adjacent GEMMs when overlap is on.
    /// The residual stream stays sequence-partitioned: the ReduceScatter
    /// lands segment r exactly on the rank holding segment r's residual.
    fn hmp_layer(
        &self,
        shards: &LayerShards<T>,
        group: &mut RingGroup,
        throttle: &Throttle,
        h_local: &Tensor<T>,
        phases: &mut PhaseSeconds,
    ) -> Result<Tensor<T>> {
        let sizes = &self.plan.seq_rows;
        let config = &self.config;

        // MHA block.
        let b_attn = if self.overlap {
            let qkv = timed(&mut phases.ag_mha, || {
                let w = shards.wqkv()?;
                let proj = group.all_gather_gemm_overlapped(h_local, &w, sizes, throttle)?;
                Ok::<_, Error>(tensor::add_row_vector(&proj, &shards.bqkv())?)
            })?;
            timed(&mut phases.mha, || attention_from_qkv(shards, config, &qkv, throttle))?
        } else {
            let a_full = timed(&mut phases.ag_mha, || group.all_gather(h_local, sizes))?;
            timed(&mut phases.mha, || mha_attention(shards, config, &a_full, throttle))?
        };
        let g1 = if self.overlap {
            timed(&mut phases.rs_mha, || {
                group.gemm_reduce_scatter_overlapped(&b_attn, &shards.wb, sizes, throttle)
            })?
        } else {
            let cost = tensor::gemm_flops(b_attn.rows(), b_attn.cols(), shards.wb.cols());
            let c_partial = timed(&mut phases.mha, || {
                throttle.run_cost(cost, || tensor::gemm(&b_attn, &shards.wb))
            })?;
            timed(&mut phases.rs_mha, || group.reduce_scatter(&c_partial, sizes))?
        };

        // Connective block on this rank's segment; row-sharded bias lands
        // here, once, after the reduction.
        let h1 = timed(&mut phases.con_mha, || -> Result<Tensor<T>> {
            let with_bias = tensor::add_row_vector(&g1, &shards.bb)?;
            run_connective_sp(&with_bias, h_local, &shards.ln1_gamma, &shards.ln1_beta, throttle)
        })?;

        // MLP block.
        let e = if self.overlap {
            timed(&mut phases.ag_mlp, || {
                let up = group.all_gather_gemm_overlapped(&h1, &shards.wd, sizes, throttle)?;
                Ok::<_, Error>(tensor::gelu(&tensor::add_row_vector(&up, &shards.bd)?))
            })?
        } else {
            let d_full = timed(&mut phases.ag_mlp, || group.all_gather(&h1, sizes))?;
            let cost = tensor::gemm_flops(d_full.rows(), d_full.cols(), shards.wd.cols())
                + gelu_flops(d_full.rows(), shards.wd.cols());
            timed(&mut phases.mlp, || {
                throttle.run_cost(cost, || -> Result<Tensor<T>> {
                    let up = tensor::gemm(&d_full, &shards.wd)?;
                    Ok(tensor::gelu(&tensor::add_row_vector(&up, &shards.bd)?))
                })
            })?
        };
        let g2 = if self.overlap {
            timed(&mut phases.rs_mlp, || {
                group.gemm_reduce_scatter_overlapped(&e, &shards.we, sizes, throttle)
            })?
        } else {
            let cost = tensor::gemm_flops(e.rows(), shards.we.rows(), shards.we.cols());
            let f_partial = timed(&mut phases.mlp, || {
                throttle.run_cost(cost, || tensor::gemm(&e, &shards.we))
            })?;
            timed(&mut phases.rs_mlp, || group.reduce_scatter(&f_partial, sizes))?
        };

        timed(&mut phases.con_mlp, || -> Result<Tensor<T>> {
            let with_bias = tensor::add_row_vector(&g2, &shards.be)?;
            run_connective_sp(&with_bias, &h1, &shards.ln2_gamma, &shards.ln2_beta, throttle)
        })
    }

    /// Megatron-style baseline: same weight shards, full activations on
    /// every rank, one AllReduce per block, connective blocks computed
    /// redundantly everywhere.
    fn tp_allreduce_layer(
        &self,
        shards: &LayerShards<T>,
        group: &mut RingGroup,
        throttle: &Throttle,
        x_full: &Tensor<T>,
        phases: &mut PhaseSeconds,
    ) -> Result<Tensor<T>> {
        let config = &self.config;
        let c_partial =
            timed(&mut phases.mha, || run_mha_tp(shards, config, x_full, throttle))?;
        let g1 = timed(&mut phases.rs_mha, || group.all_reduce(&c_partial))?;
        let h1 = timed(&mut phases.con_mha, || -> Result<Tensor<T>> {
            let with_bias = tensor::add_row_vector(&g1, &shards.bb)?;
            run_connective_sp(&with_bias, x_full, &shards.ln1_gamma, &shards.ln1_beta, throttle)
        })?;
        let f_partial = timed(&mut phases.mlp, || run_mlp_tp(shards, &h1, throttle))?;
        let g2 = timed(&mut phases.rs_mlp, || group.all_reduce(&f_partial))?;
        timed(&mut phases.con_mlp, || -> Result<Tensor<T>> {
            let with_bias = tensor::add_row_vector(&g2, &shards.be)?;
            run_connective_sp(&with_bias, &h1, &shards.ln2_gamma, &shards.ln2_beta, throttle)
        })
    }

    /// Sequence-parallel baseline: full weights everywhere, rows split by
    /// the plan. Attention gathers keys and values (two AllGathers per
    /// layer: before score computation and before the weighted values);
    /// everything after the attention context is row-local.
    fn sp_only_layer(
        &self,
        layer: &LayerWeights<T>,
        group: &mut RingGroup,
        throttle: &Throttle,
        x_local: &Tensor<T>,
        phases: &mut PhaseSeconds,
    ) -> Result<Tensor<T>> {
        let sizes = &self.plan.seq_rows;
        let hd = self.config.head_dim();

        let h = self.config.hidden;
        let rows = x_local.rows();
        let seq = self.plan.seq_len();
        let (q_local, k_local, v_local) = timed(&mut phases.mha, || {
            throttle.run_cost(3.0 * tensor::gemm_flops(rows, h, h), || -> Result<_> {
                Ok((
                    model::linear(x_local, &layer.wq, &layer.bq)?,
                    model::linear(x_local, &layer.wk, &layer.bk)?,
                    model::linear(x_local, &layer.wv, &layer.bv)?,
                ))
            })
        })?;
        // The scores need K before softmax; the weighted sum needs V. Gather
        // V only once the scores exist, mirroring the two synchronization
        // points of the sequence-parallel baseline.
        let k_full = timed(&mut phases.ag_mha, || group.all_gather(&k_local, sizes))?;
        let score_cost = (2.0 * h as f64 + tensor::EXP_FLOPS) * (rows * seq) as f64;
        let weights = timed(&mut phases.mha, || {
            throttle.run_cost(score_cost, || tensor::attention_weights(&q_local, &k_full, hd))
        })?;
        let v_full = timed(&mut phases.ag_mha, || group.all_gather(&v_local, sizes))?;
        let apply_cost = 2.0 * (rows * seq * h) as f64;
        let b_local = timed(&mut phases.mha, || {
            throttle.run_cost(apply_cost, || tensor::attention_apply(&weights, &v_full, hd))
        })?;
        let c_local = timed(&mut phases.mha, || {
            throttle.run_cost(tensor::gemm_flops(rows, h, h), || {
                model::linear(&b_local, &layer.wb, &layer.bb)
            })
        })?;
        let h1 = timed(&mut phases.con_mha, || {
            run_connective_sp(&c_local, x_local, &layer.ln1_gamma, &layer.ln1_beta, throttle)
        })?;
        let inter = self.config.intermediate();
        let mlp_cost = tensor::gemm_flops(rows, h, inter)
            + gelu_flops(rows, inter)
            + tensor::gemm_flops(rows, inter, h);
        let f_local = timed(&mut phases.mlp, || {
            throttle.run_cost(mlp_cost, || -> Result<Tensor<T>> {
                let up = model::linear(&h1, &layer.wd, &layer.bd)?;
                model::linear(&tensor::gelu(&up), &layer.we, &layer.be)
            })
        })?;
        timed(&mut phases.con_mlp, || {
            run_connective_sp(&f_local, &h1, &layer.ln2_gamma, &layer.ln2_beta, throttle)
        })
    }

    /// Analytic envelope of the major transient activations alive at once,
    /// charged against the budget for the duration of a run.
    fn activation_envelope_bytes(&self) -> u64 {
        let seq = self.plan.seq_len();
        let h = self.config.hidden;
        let hd = self.config.head_dim();
        let (heads, cols, local_rows) = match self.mode {
            ExecMode::Hmp | ExecMode::TpAllreduce => (
                self.plan.heads[self.rank],
                self.plan.mlp_cols[self.rank],
                seq,
            ),
            ExecMode::SpOnly => {
                (self.config.num_heads, self.config.intermediate(), self.plan.seq_rows[self.rank])
            }
        };
        let attn_width = heads * hd;
        // Gathered input + QKV + one head of scores + attention output + block output.
        let mha_peak = seq * h + 3 * seq * attn_width + local_rows * seq + seq * attn_width + seq * h;
        // Gathered input + up projection (and its GELU copy) + block output.
        let mlp_peak = seq * h + 2 * seq * cols + seq * h;
        (mha_peak.max(mlp_peak) * T::BYTES) as u64
    }
}

fn layer_weight_bytes<T: Scalar>(layer: &LayerWeights<T>) -> u64 {
    let elems = layer.wq.data().len()
        + layer.wk.data().len()
        + layer.wv.data().len()
        + layer.wb.data().len()
        + layer.wd.data().len()
        + layer.we.data().len()
        + layer.bq.len()
        + layer.bk.len()
        + layer.bv.len()
        + layer.bb.len()
        + layer.bd.len()
        + layer.be.len()
        + layer.ln1_gamma.len()
        + layer.ln1_beta.len()
        + layer.ln2_gamma.len()
        + layer.ln2_beta.len();
    (elems * T::BYTES) as u64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{init_random, reference_forward, reference_mha, reference_mlp};
    use crate::planner::equal_split;
    use crate::tensor::{max_rel_error, DType};

    fn config(heads: usize, hidden: usize) -> ModelConfig {
        ModelConfig::new(1, heads, hidden, 256, DType::F64).unwrap()
    }

    fn plan_for(config: &ModelConfig, heads: Vec<usize>, seq: usize) -> PartitionPlan {
        let d = heads.len();
        PartitionPlan {
            heads,
            mlp_cols: equal_split(config.intermediate(), d),
            seq_rows: equal_split(seq, d),
        }
    }

    #[test]
    fn shards_reconstruct_layer_weights_exactly() {
        let cfg = config(4, 16);
        let m = init_random::<f64>(&cfg, 3).unwrap();
        let plan = plan_for(&cfg, vec![3, 1], 8);
        let shards: Vec<LayerShards<f64>> =
            (0..2).map(|r| shard_layer(&m.layers[0], &cfg, &plan, r)).collect();

        let wq = tensor::concat_cols(&[shards[0].wq.clone(), shards[1].wq.clone()]).unwrap();
        assert_eq!(wq, m.layers[0].wq);
        let wb = tensor::concat_rows(&[shards[0].wb.clone(), shards[1].wb.clone()]).unwrap();
        assert_eq!(wb, m.layers[0].wb);
        let wd = tensor::concat_cols(&[shards[0].wd.clone(), shards[1].wd.clone()]).unwrap();
        assert_eq!(wd, m.layers[0].wd);
        let we = tensor::concat_rows(&[shards[0].we.clone(), shards[1].we.clone()]).unwrap();
        assert_eq!(we, m.layers[0].we);
        let mut bq = shards[0].bq.clone();
        bq.extend_from_slice(&shards[1].bq);
        assert_eq!(bq, m.layers[0].bq);

        // Rank 0 holds head slices 0..2, rank 1 holds slice 3.
        assert_eq!(shards[0].wq.cols(), 3 * cfg.head_dim());
        assert_eq!(shards[1].wq.cols(), cfg.head_dim());
        assert_eq!(shards[0].wb.rows(), 3 * cfg.head_dim());
    }

    #[test]
    fn single_device_shards_equal_full_weights() {
        let cfg = config(2, 8);
        let m = init_random::<f64>(&cfg, 5).unwrap();
        let plan = PartitionPlan::single(&cfg, 4);
        let s = shard_layer(&m.layers[0], &cfg, &plan, 0);
        assert_eq!(s.wq, m.layers[0].wq);
        assert_eq!(s.we, m.layers[0].we);
        assert_eq!(s.bd, m.layers[0].bd);
    }

    #[test]
    fn mha_partials_sum_to_reference_block() {
        let cfg = config(4, 16);
        let m = init_random::<f64>(&cfg, 7).unwrap();
        let seq = 5;
        let x = crate::model::synthetic_input::<f64>(&cfg, seq, 1);
        let plan = plan_for(&cfg, vec![3, 1], seq);
        let throttle = Throttle::none();

        let mut sum = Tensor::<f64>::zeros(seq, cfg.hidden);
        for r in 0..2 {
            let shards = shard_layer(&m.layers[0], &cfg, &plan, r);
            let part = run_mha_tp(&shards, &cfg, &x, &throttle).unwrap();
            sum = tensor::residual_add(&sum, &part).unwrap();
        }
        let sum = tensor::add_row_vector(&sum, &m.layers[0].bb).unwrap();
        let want = reference_mha(&m.layers[0], &cfg, &x).unwrap();
        assert!(max_rel_error(&sum, &want) < 1e-5);
    }

    #[test]
    fn zero_head_rank_yields_zero_partial() {
        let cfg = config(4, 16);
        let m = init_random::<f64>(&cfg, 9).unwrap();
        let plan = plan_for(&cfg, vec![4, 0], 4);
        let shards = shard_layer(&m.layers[0], &cfg, &plan, 1);
        let x = crate::model::synthetic_input::<f64>(&cfg, 4, 2);
        let part = run_mha_tp(&shards, &cfg, &x, &Throttle::none()).unwrap();
        assert_eq!(part.shape(), (4, 16));
        assert!(part.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // the index is a device rank
    fn mlp_partials_sum_to_reference_block() {
        let cfg = config(2, 8);
        let m = init_random::<f64>(&cfg, 11).unwrap();
        let seq = 3;
        let x = crate::model::synthetic_input::<f64>(&cfg, seq, 4);
        let throttle = Throttle::none();

        for cols in [vec![16usize, 16], vec![27, 5], vec![32, 0]] {
            let plan = PartitionPlan {
                heads: vec![1, 1],
                mlp_cols: cols.clone(),
                seq_rows: vec![2, 1],
            };
            let mut sum = Tensor::<f64>::zeros(seq, cfg.hidden);
            for r in 0..2 {
                let shards = shard_layer(&m.layers[0], &cfg, &plan, r);
                let part = run_mlp_tp(&shards, &x, &throttle).unwrap();
                if cols[r] == 0 {
                    assert!(part.data().iter().all(|&v| v == 0.0));
                }
                sum = tensor::residual_add(&sum, &part).unwrap();
            }
            let sum = tensor::add_row_vector(&sum, &m.layers[0].be).unwrap();
            let want = reference_mlp(&m.layers[0], &x).unwrap();
            assert!(max_rel_error(&sum, &want) < 1e-5, "cols {cols:?}");
        }
    }

    #[test]
    fn connective_segments_concatenate_to_reference() {
        let cfg = config(2, 8);
        let m = init_random::<f64>(&cfg, 13).unwrap();
        let lw = &m.layers[0];
        let seq = 7;
        let g = crate::model::synthetic_input::<f64>(&cfg, seq, 5);
        let res = crate::model::synthetic_input::<f64>(&cfg, seq, 6);
        let want = model::connective(&g, &res, &lw.ln1_gamma, &lw.ln1_beta).unwrap();

        for sizes in [vec![3usize, 4], vec![7, 0], vec![1, 6]] {
            let g_parts = tensor::split_rows(&g, &sizes).unwrap();
            let r_parts = tensor::split_rows(&res, &sizes).unwrap();
            let outs: Vec<Tensor<f64>> = g_parts
                .iter()
                .zip(&r_parts)
                .map(|(gp, rp)| {
                    run_connective_sp(gp, rp, &lw.ln1_gamma, &lw.ln1_beta, &Throttle::none())
                        .unwrap()
                })
                .collect();
            let got = tensor::concat_rows(&outs).unwrap();
            assert!(max_rel_error(&got, &want) < 1e-6, "sizes {sizes:?}");
        }
    }

    /// Distributed run over an in-process loopback ring, all modes.
    fn run_distributed(
        model: &Model<f64>,
        plan: &PartitionPlan,
        input: &Tensor<f64>,
        mode: ExecMode,
        overlap: bool,
    ) -> Tensor<f64> {
        let world = plan.world();
        let groups = RingGroup::loopback_ring(world, None).unwrap();
        let seq_parts = tensor::split_rows(input, &plan.seq_rows).unwrap();
        let mut outputs: Vec<Option<Tensor<f64>>> = vec![None; world];
        std::thread::scope(|scope| {
            let mut handles = Vec::new();
            for mut group in groups {
                let rank = group.rank();
                let local_input = match mode {
                    ExecMode::TpAllreduce => input.clone(),
                    _ => seq_parts[rank].clone(),
                };
                let model = &model;
                let plan = &plan;
                handles.push(scope.spawn(move || {
                    let accountant = MemoryAccountant::new(None);
                    let engine =
                        WorkerEngine::new(model, plan, rank, mode, overlap, &accountant).unwrap();
                    let (out, traces) = engine
                        .run(&mut group, &Throttle::none(), &accountant, &local_input)
                        .unwrap();
                    (rank, out, traces)
                }));
            }
            for h in handles {
                let (rank, out, traces) = h.join().unwrap();
                assert_eq!(traces.len(), model.config.num_layers);
                outputs[rank] = Some(out);
            }
        });
        let first = outputs[0].take().unwrap();
        for other in outputs.into_iter().flatten() {
            assert_eq!(other.shape(), first.shape());
        }
        first
    }

    #[test]
    fn hmp_single_device_matches_reference() {
        let cfg = ModelConfig::new(2, 2, 8, 64, DType::F64).unwrap();
        let m = init_random::<f64>(&cfg, 17).unwrap();
        let x = crate::model::synthetic_input::<f64>(&cfg, 6, 8);
        let want = reference_forward(&m, &x).unwrap();
        let plan = PartitionPlan::single(&cfg, 6);
        for overlap in [false, true] {
            let got = run_distributed(&m, &plan, &x, ExecMode::Hmp, overlap);
            assert!(max_rel_error(&got, &want) < 1e-12);
        }
    }

    #[test]
    fn hmp_two_ranks_match_reference_including_skewed_plans() {
        let cfg = ModelConfig::new(2, 4, 16, 64, DType::F64).unwrap();
        let m = init_random::<f64>(&cfg, 19).unwrap();
        let x = crate::model::synthetic_input::<f64>(&cfg, 9, 10);
        let want = reference_forward(&m, &x).unwrap();
        for heads in [vec![2usize, 2], vec![3, 1], vec![4, 0]] {
            for overlap in [false, true] {
                let plan = PartitionPlan {
                    heads: heads.clone(),
                    mlp_cols: vec![40, 24],
                    seq_rows: vec![4, 5],
                };
                let got = run_distributed(&m, &plan, &x, ExecMode::Hmp, overlap);
                assert!(
                    max_rel_error(&got, &want) < 1e-8,
                    "heads {heads:?} overlap {overlap}"
                );
            }
        }
    }

    #[test]
    fn overlap_on_and_off_agree() {
        let cfg = ModelConfig::new(2, 4, 16, 64, DType::F64).unwrap();
        let m = init_random::<f64>(&cfg, 23).unwrap();
        let x = crate::model::synthetic_input::<f64>(&cfg, 8, 12);
        let plan = plan_for(&cfg, vec![1, 2, 1], 8);
        let on = run_distributed(&m, &plan, &x, ExecMode::Hmp, true);
        let off = run_distributed(&m, &plan, &x, ExecMode::Hmp, false);
        assert!(max_rel_error(&on, &off) < 1e-5);
    }

    #[test]
    fn baseline_modes_match_reference() {
        let cfg = ModelConfig::new(2, 4, 16, 64, DType::F64).unwrap();
        let m = init_random::<f64>(&cfg, 29).unwrap();
        let x = crate::model::synthetic_input::<f64>(&cfg, 7, 14);
        let want = reference_forward(&m, &x).unwrap();
        let plan = plan_for(&cfg, vec![2, 1, 1], 7);
        let tp = run_distributed(&m, &plan, &x, ExecMode::TpAllreduce, false);
        assert!(max_rel_error(&tp, &want) < 1e-8, "tp-allreduce diverged");
        let sp = run_distributed(&m, &plan, &x, ExecMode::SpOnly, false);
        assert!(max_rel_error(&sp, &want) < 1e-8, "sp-only diverged");
    }

    #[test]
    fn sp_only_charges_full_weights_per_rank() {
        let cfg = config(2, 8);
        let m = init_random::<f64>(&cfg, 31).unwrap();
        let plan = plan_for(&cfg, vec![1, 1], 4);
        let full_bytes = layer_weight_bytes(&m.layers[0]);
        let tight = MemoryAccountant::new(Some(full_bytes / 2));
        match WorkerEngine::new(&m, &plan, 0, ExecMode::SpOnly, false, &tight) {
            Err(Error::BudgetExceeded { site, .. }) => assert!(site.contains("weights")),
            Err(other) => panic!("expected budget error, got {other}"),
            Ok(_) => panic!("expected budget error, engine loaded"),
        }

        let roomy = MemoryAccountant::new(Some(2 * full_bytes));
        let engine = WorkerEngine::new(&m, &plan, 0, ExecMode::SpOnly, false, &roomy).unwrap();
        assert_eq!(engine.resident_bytes(), full_bytes);
        // Sharded mode needs roughly half of that per rank.
        let half = MemoryAccountant::new(Some(full_bytes));
        let sharded = WorkerEngine::new(&m, &plan, 0, ExecMode::Hmp, false, &half).unwrap();
        assert!(sharded.resident_bytes() < full_bytes);
    }

    #[test]
    #[allow(clippy::needless_range_loop)] // the index is a device id
    fn shard_accounting_tracks_memory_estimate() {
        let cfg = ModelConfig::new(3, 4, 32, 64, DType::F64).unwrap();
        let m = init_random::<f64>(&cfg, 37).unwrap();
        let plan = plan_for(&cfg, vec![3, 1], 8);
        for rank in 0..2 {
            let accountant = MemoryAccountant::new(None);
            let engine =
                WorkerEngine::new(&m, &plan, rank, ExecMode::Hmp, false, &accountant).unwrap();
            let est = model::estimate_memory(&cfg, &plan, rank);
            let got = engine.resident_bytes() as f64;
            // Replicated layer-norm parameters and biases sit outside the
            // h^2-dominated estimate; stay within a few percent.
            assert!(
                (got - est).abs() / est < 0.05,
                "rank {rank}: accounted {got} vs estimate {est}"
            );
        }
    }

    #[test]
    fn trace_phase_times_are_consistent() {
        let cfg = ModelConfig::new(1, 2, 8, 64, DType::F64).unwrap();
        let m = init_random::<f64>(&cfg, 41).unwrap();
        let x = crate::model::synthetic_input::<f64>(&cfg, 4, 3);
        let plan = PartitionPlan::single(&cfg, 4);
        let accountant = MemoryAccountant::new(None);
        let engine =
            WorkerEngine::new(&m, &plan, 0, ExecMode::Hmp, false, &accountant).unwrap();
        let mut group = RingGroup::single();
        let start = Instant::now();
        let (_, traces) =
            engine.run(&mut group, &Throttle::none(), &accountant, &x).unwrap();
        let wall = start.elapsed().as_secs_f64();
        let phase_sum: f64 = traces.iter().map(|t| t.phases.total()).sum();
        assert!(phase_sum <= wall * 1.01, "phases {phase_sum} exceed wall {wall}");
        assert_eq!(traces[0].all_gather_bytes, 0, "single device sends nothing");
    }
}
