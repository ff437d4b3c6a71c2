//! Calibration: runs each block shape in isolation on synthetic activations
//! to populate per-device latency tables, and records the model's
//! per-block weight footprints. Values, not text, drive planning — only the
//! tensor shapes matter for latency, so calibration inputs are random.

use crate::error::{Error, Result};
use crate::model::{self, ModelConfig};
use crate::planner::BlockKind;
use crate::rng::SplitMix64;
use crate::tensor::{self, Scalar, Tensor};
use crate::throttle::Throttle;

pub const DEFAULT_CALIBRATION_SEQ: usize = 284;
pub const DEFAULT_REPS: usize = 5;
pub const DEFAULT_WARMUPS: usize = 2;

/// How a profiling pass was taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CalibrationMeta {
    pub seq: usize,
    pub reps: usize,
    pub warmups: usize,
    pub dtype: crate::tensor::DType,
}

/// Per-cluster profiling output consumed by the planner.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ProfileReport {
    pub schema_version: u32,
    pub model: ModelConfig,
    /// Weight bytes of one full MHA block.
    pub m_att: u64,
    /// Weight bytes of one full MLP block.
    pub m_mlp: u64,
    pub calibration: CalibrationMeta,
    pub devices: Vec<crate::planner::DeviceProfile>,
}

/// Latency tables measured on one worker.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BlockTables {
    pub mha: Vec<(usize, f64)>,
    pub mlp: Vec<(usize, f64)>,
    pub con: Vec<(usize, f64)>,
    pub raw_monotonicity_violations: u32,
}

/// The weight-byte constants of Eq-style memory accounting:
/// `(M_att, M_mlp)` at the model dtype.
pub fn profile_model(config: &ModelConfig) -> (u64, u64) {
    (model::weight_bytes_mha(config), model::weight_bytes_mlp(config))
}

/// Fractions 1/8 .. 8/8 of the block total, rounded to whole units,
/// deduplicated, zero-free.
pub fn default_size_grid(total: usize) -> Vec<usize> {
    let mut out = Vec::new();
    for i in 1..=8usize {
        let size = ((total * i) as f64 / 8.0).round() as usize;
        if size > 0 && out.last() != Some(&size) {
            out.push(size);
        }
    }
    if out.last() != Some(&total) {
        out.push(total);
    }
    out
}

pub fn median(samples: &[f64]) -> f64 {
    assert!(!samples.is_empty(), "median of an empty sample set");
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mid = sorted.len() / 2;
    if sorted.len() % 2 == 1 {
        sorted[mid]
    } else {
        0.5 * (sorted[mid - 1] + sorted[mid])
    }
}

/// Pool-adjacent-violators pass: makes latencies monotone nondecreasing in
/// partition size, averaging any violating run. Returns the number of raw
/// violations repaired.
pub fn isotonic_cleanup(table: &mut [(usize, f64)]) -> u32 {
    let mut violations = 0;
    for i in 1..table.len() {
        if table[i].1 < table[i - 1].1 {
            violations += 1;
        }
    }
    if violations == 0 {
        return 0;
    }
    // Blocks of (sum, count, level); merge while out of order.
    let mut blocks: Vec<(f64, usize)> = Vec::with_capacity(table.len());
    for &(_, y) in table.iter() {
        blocks.push((y, 1));
        while blocks.len() > 1 {
            let last = blocks[blocks.len() - 1];
            let prev = blocks[blocks.len() - 2];
            if last.0 / last.1 as f64 >= prev.0 / prev.1 as f64 {
                break;
            }
            blocks.pop();
            let merged = (last.0 + prev.0, last.1 + prev.1);
            let idx = blocks.len() - 1;
            blocks[idx] = merged;
        }
    }
    let mut i = 0;
    for (sum, count) in blocks {
        let level = sum / count as f64;
        for _ in 0..count {
            table[i].1 = level;
            i += 1;
        }
    }
    violations
}

/// One timed execution of a block shard at `size` on synthetic activations.
/// Shapes follow the sharded layer exactly; weight values are irrelevant to
/// latency and come from the given rng.
pub fn run_block_once<T: Scalar>(
    config: &ModelConfig,
    block: BlockKind,
    size: usize,
    seq: usize,
    throttle: &Throttle,
    rng: &mut SplitMix64,
) -> Result<f64> {
    let h = config.hidden;
    let rand_tensor =
        |rows: usize, cols: usize, rng: &mut SplitMix64| {
            Tensor::from_fn(rows, cols, |_, _| T::from_f64(rng.normal(0.0, 0.02)))
        };
    match block {
        BlockKind::Mha => {
            let hd = config.head_dim();
            if size > config.num_heads {
                return Err(Error::Profile(format!(
                    "MHA size {size} exceeds {} heads",
                    config.num_heads
                )));
            }
            let width = size * hd;
            let wqkv = rand_tensor(h, 3 * width, rng);
            let wb = rand_tensor(width, h, rng);
            let x = rand_tensor(seq, h, rng);
            let cost = tensor::gemm_flops(seq, h, 3 * width)
                + tensor::attention_flops(seq, seq, width)
                + tensor::gemm_flops(seq, width, h);
            let start = std::time::Instant::now();
            throttle.run_cost(cost, || -> Result<()> {
                let qkv = tensor::gemm(&x, &wqkv)?;
                let parts = tensor::split_cols(&qkv, &[width, width, width])?;
                let attn = tensor::self_attention(&parts[0], &parts[1], &parts[2], hd)?;
                let _ = tensor::gemm(&attn, &wb)?;
                Ok(())
            })?;
            Ok(start.elapsed().as_secs_f64())
        }
        BlockKind::Mlp => {
            if size > config.intermediate() {
                return Err(Error::Profile(format!(
                    "MLP size {size} exceeds {} columns",
                    config.intermediate()
                )));
            }
            let wd = rand_tensor(h, size, rng);
            let we = rand_tensor(size, h, rng);
            let x = rand_tensor(seq, h, rng);
            let cost = tensor::gemm_flops(seq, h, size)
                + (tensor::TANH_FLOPS + 8.0) * (seq * size) as f64
                + tensor::gemm_flops(seq, size, h);
            let start = std::time::Instant::now();
            throttle.run_cost(cost, || -> Result<()> {
                let up = tensor::gemm(&x, &wd)?;
                let _ = tensor::gemm(&tensor::gelu(&up), &we)?;
                Ok(())
            })?;
            Ok(start.elapsed().as_secs_f64())
        }
        BlockKind::Con => {
            if size > seq {
                return Err(Error::Profile(format!("CON size {size} exceeds sequence {seq}")));
            }
            let g = rand_tensor(size, h, rng);
            let r = rand_tensor(size, h, rng);
            let gamma = vec![T::one(); h];
            let beta = vec![T::zero(); h];
            let cost = 64.0 * (size * h) as f64;
            let start = std::time::Instant::now();
            throttle.run_cost(cost, || -> Result<()> {
                let _ = model::connective(&g, &r, &gamma, &beta)?;
                Ok(())
            })?;
            Ok(start.elapsed().as_secs_f64())
        }
    }
}

/// Median-of-reps latency tables over the given size grids, with isotonic
/// cleanup; weights are untouched (profiling synthesizes its own).
#[allow(clippy::too_many_arguments)]
pub fn profile_blocks<T: Scalar>(
    config: &ModelConfig,
    mha_sizes: &[usize],
    mlp_sizes: &[usize],
    con_sizes: &[usize],
    seq: usize,
    reps: usize,
    warmups: usize,
    throttle: &Throttle,
) -> Result<BlockTables> {
    if reps == 0 {
        return Err(Error::Profile("profiling needs at least one repetition".into()));
    }
    let mut rng = SplitMix64::new(0x5EED);
    // Repetitions sweep across every (block, size) point before repeating,
    // so a transient noise burst cannot cover all samples of one entry.
    let points: Vec<(BlockKind, usize)> = mha_sizes
        .iter()
        .map(|&s| (BlockKind::Mha, s))
        .chain(mlp_sizes.iter().map(|&s| (BlockKind::Mlp, s)))
        .chain(con_sizes.iter().map(|&s| (BlockKind::Con, s)))
        .collect();
    let mut samples: Vec<Vec<f64>> = vec![Vec::with_capacity(reps); points.len()];
    for _ in 0..warmups {
        for &(block, size) in &points {
            run_block_once::<T>(config, block, size, seq, throttle, &mut rng)?;
        }
    }
    for _ in 0..reps {
        for (slot, &(block, size)) in samples.iter_mut().zip(&points) {
            slot.push(run_block_once::<T>(config, block, size, seq, throttle, &mut rng)?);
        }
    }
    let table_for = |block: BlockKind| -> Result<Vec<(usize, f64)>> {
        let mut table = Vec::new();
        for (slot, &(b, size)) in samples.iter().zip(&points) {
            if b != block {
                continue;
            }
            let m = median(slot);
            if m <= 0.0 {
                return Err(Error::Profile(format!("non-positive latency at {block:?} size {size}")));
            }
            table.push((size, m));
        }
        table.sort_by_key(|(s, _)| *s);
        Ok(table)
    };
    let mut mha = table_for(BlockKind::Mha)?;
    let mut mlp = table_for(BlockKind::Mlp)?;
    let mut con = table_for(BlockKind::Con)?;
    let violations =
        isotonic_cleanup(&mut mha) + isotonic_cleanup(&mut mlp) + isotonic_cleanup(&mut con);
    Ok(BlockTables { mha, mlp, con, raw_monotonicity_violations: violations })
}
