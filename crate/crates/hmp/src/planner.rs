//! Heterogeneity- and memory-aware workload planning.
//!
//! Two steps: capacity-proportional balanced partition of the MHA heads and
//! MLP columns, then iterative rebalancing that shifts overflowing workload
//! from over-budget devices onto devices with free memory, proportional to
//! their capacities. Sequence rows are split equally; the connective block's
//! cost is memory-bound, not compute-bound, and equal splits keep the ring
//! fragments uniform.

use crate::error::{Error, MemoryDeficit, Result};
use crate::model::{self, ModelConfig};

/// Per-device allocation triple: attention heads, MLP columns, sequence rows.
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct PartitionPlan {
    pub heads: Vec<usize>,
    pub mlp_cols: Vec<usize>,
    pub seq_rows: Vec<usize>,
}

impl PartitionPlan {
    pub fn world(&self) -> usize {
        self.heads.len()
    }

    pub fn seq_len(&self) -> usize {
        self.seq_rows.iter().sum()
    }

    /// Degenerate single-device plan.
    pub fn single(config: &ModelConfig, seq: usize) -> Self {
        Self {
            heads: vec![config.num_heads],
            mlp_cols: vec![config.intermediate()],
            seq_rows: vec![seq],
        }
    }

    pub fn validate(&self, config: &ModelConfig, seq: usize) -> Result<()> {
        let d = self.heads.len();
        if d == 0 || self.mlp_cols.len() != d || self.seq_rows.len() != d {
            return Err(Error::Config(format!(
                "plan vectors disagree on device count: {} / {} / {}",
                self.heads.len(),
                self.mlp_cols.len(),
                self.seq_rows.len()
            )));
        }
        let heads: usize = self.heads.iter().sum();
        if heads != config.num_heads {
            return Err(Error::Config(format!(
                "plan allocates {heads} heads, model has {}",
                config.num_heads
            )));
        }
        let cols: usize = self.mlp_cols.iter().sum();
        if cols != config.intermediate() {
            return Err(Error::Config(format!(
                "plan allocates {cols} MLP columns, model has {}",
                config.intermediate()
            )));
        }
        let rows: usize = self.seq_rows.iter().sum();
        if rows != seq {
            return Err(Error::Config(format!(
                "plan covers {rows} sequence rows, input has {seq}"
            )));
        }
        Ok(())
    }
}

/// Block kinds the profiler measures and the planner allocates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Mha,
    Mlp,
    Con,
}

/// Measured per-device latency curves, capacity and memory budget.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DeviceProfile {
    pub device_id: usize,
    /// Inverse of the device's full MHA + MLP block latency, 1/seconds.
    pub capacity: f64,
    pub memory_budget: u64,
    /// (partition size, seconds) pairs, sorted by size, monotone after cleanup.
    pub mha_latency: Vec<(usize, f64)>,
    pub mlp_latency: Vec<(usize, f64)>,
    pub con_latency: Vec<(usize, f64)>,
    #[serde(default)]
    pub raw_monotonicity_violations: u32,
}

impl DeviceProfile {
    fn table(&self, block: BlockKind) -> &[(usize, f64)] {
        match block {
            BlockKind::Mha => &self.mha_latency,
            BlockKind::Mlp => &self.mlp_latency,
            BlockKind::Con => &self.con_latency,
        }
    }

    /// Latency estimate at an arbitrary partition size: piecewise-linear
    /// interpolation over the measured grid, clamped at the ends.
    pub fn latency_at(&self, block: BlockKind, size: usize) -> Option<f64> {
        let table = self.table(block);
        if table.is_empty() {
            return None;
        }
        if size == 0 {
            return Some(0.0);
        }
        let s = size as f64;
        if s <= table[0].0 as f64 {
            // Interpolate between the implicit (0, 0) point and the first entry.
            return Some(table[0].1 * s / table[0].0 as f64);
        }
        for pair in table.windows(2) {
            let (x0, y0) = (pair[0].0 as f64, pair[0].1);
            let (x1, y1) = (pair[1].0 as f64, pair[1].1);
            if s <= x1 {
                return Some(y0 + (y1 - y0) * (s - x0) / (x1 - x0));
            }
        }
        Some(table.last().unwrap().1)
    }
}

/// Capacity from full-block latencies:
/// `V_d = 1 / (L(MHA, total heads) + L(MLP, total columns))`.
pub fn compute_capacity(
    mha_latency: &[(usize, f64)],
    mlp_latency: &[(usize, f64)],
    config: &ModelConfig,
) -> Result<f64> {
    let full = |table: &[(usize, f64)], size: usize, name: &str| -> Result<f64> {
        let lat = table
            .iter()
            .find(|(s, _)| *s == size)
            .map(|(_, l)| *l)
            .ok_or_else(|| Error::Profile(format!("no full-size {name} measurement at {size}")))?;
        if lat <= 0.0 || !lat.is_finite() {
            return Err(Error::Profile(format!("{name} latency {lat} at size {size} is not positive")));
        }
        Ok(lat)
    };
    let mha = full(mha_latency, config.num_heads, "MHA")?;
    let mlp = full(mlp_latency, config.intermediate(), "MLP")?;
    Ok(1.0 / (mha + mlp))
}

/// Integer allocation proportional to capacities, rounded by largest
/// remainder so the total is exact. Ties break toward the lower device index.
pub fn balanced_partition(capacities: &[f64], total: usize) -> Result<Vec<usize>> {
    if capacities.is_empty() {
        return Err(Error::Config("balanced_partition over an empty device list".into()));
    }
    if capacities.iter().any(|&v| v <= 0.0 || !v.is_finite()) {
        return Err(Error::Config("capacities must be positive and finite".into()));
    }
    let sum: f64 = capacities.iter().sum();
    let quotas: Vec<f64> = capacities.iter().map(|v| total as f64 * v / sum).collect();
    Ok(largest_remainder(&quotas, total))
}

/// Equal split with largest-remainder rounding (lower indices take the
/// remainder), used for the sequence dimension.
pub fn equal_split(total: usize, parts: usize) -> Vec<usize> {
    assert!(parts > 0, "equal_split over zero parts");
    let base = total / parts;
    let rem = total % parts;
    (0..parts).map(|i| base + usize::from(i < rem)).collect()
}

fn largest_remainder(quotas: &[f64], total: usize) -> Vec<usize> {
    let mut alloc: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
    let assigned: usize = alloc.iter().sum();
    let mut order: Vec<usize> = (0..quotas.len()).collect();
    // Sort by remainder descending; equal remainders go to the lower index.
    order.sort_by(|&a, &b| {
        let ra = quotas[a] - quotas[a].floor();
        let rb = quotas[b] - quotas[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    for i in 0..total.saturating_sub(assigned) {
        alloc[order[i % order.len()]] += 1;
    }
    alloc
}

fn over_budget(config: &ModelConfig, plan: &PartitionPlan, profiles: &[DeviceProfile], d: usize) -> bool {
    // Eq. 5 is a strict inequality: estimate < budget.
    model::estimate_memory(config, plan, d) >= profiles[d].memory_budget as f64
}

/// Smallest number of `block` units whose removal brings device `d` under
/// budget, clamped to what the device actually holds.
fn overflow_units(
    config: &ModelConfig,
    plan: &PartitionPlan,
    profiles: &[DeviceProfile],
    block: BlockKind,
    d: usize,
) -> usize {
    let held = match block {
        BlockKind::Mha => plan.heads[d],
        BlockKind::Mlp => plan.mlp_cols[d],
        BlockKind::Con => return 0,
    };
    let est = model::estimate_memory(config, plan, d);
    let budget = profiles[d].memory_budget as f64;
    if est < budget {
        return 0;
    }
    let unit_bytes = match block {
        BlockKind::Mha => {
            config.num_layers as f64 * model::weight_bytes_mha(config) as f64
                / config.num_heads as f64
        }
        BlockKind::Mlp => {
            config.num_layers as f64 * model::weight_bytes_mlp(config) as f64
                / config.intermediate() as f64
        }
        BlockKind::Con => unreachable!(),
    };
    let needed = ((est - budget) / unit_bytes).floor() as usize + 1;
    needed.min(held)
}

/// One rebalancing pass over `block`: every over-budget device in the live
/// set sheds its overflowing units onto devices with free memory,
/// proportional to their capacities, and leaves the live set. Runs until no
/// live device is over budget; the live set shrinks every round, so at most
/// `D` rounds happen.
pub fn memory_aware_balancing(
    block: BlockKind,
    config: &ModelConfig,
    plan: &mut PartitionPlan,
    capacities: &[f64],
    profiles: &[DeviceProfile],
    live: &mut [bool],
) {
    loop {
        let oom: Vec<usize> = (0..plan.world())
            .filter(|&d| live[d] && over_budget(config, plan, profiles, d))
            .collect();
        if oom.is_empty() {
            return;
        }
        for &o in &oom {
            let free: Vec<usize> = (0..plan.world())
                .filter(|&d| live[d] && !oom.contains(&d) && !over_budget(config, plan, profiles, d))
                .collect();
            let shift = overflow_units(config, plan, profiles, block, o);
            if shift > 0 && !free.is_empty() {
                let free_caps: Vec<f64> = free.iter().map(|&f| capacities[f]).collect();
                let sum: f64 = free_caps.iter().sum();
                let quotas: Vec<f64> =
                    free_caps.iter().map(|v| shift as f64 * v / sum).collect();
                let shares = largest_remainder(&quotas, shift);
                let units = match block {
                    BlockKind::Mha => &mut plan.heads,
                    BlockKind::Mlp => &mut plan.mlp_cols,
                    BlockKind::Con => return,
                };
                units[o] -= shift;
                for (&f, &share) in free.iter().zip(&shares) {
                    units[f] += share;
                }
            }
            live[o] = false;
        }
    }
}

/// Full planning pipeline: proportional partition of both TP blocks, MLP
/// rebalancing before MHA (columns are the finer granularity), equal
/// sequence split, then a final feasibility check over every device.
pub fn plan(profiles: &[DeviceProfile], config: &ModelConfig, seq: usize) -> Result<PartitionPlan> {
    if profiles.is_empty() {
        return Err(Error::Config("planning requires at least one device profile".into()));
    }
    let capacities: Vec<f64> = profiles.iter().map(|p| p.capacity).collect();
    let mut plan = PartitionPlan {
        heads: balanced_partition(&capacities, config.num_heads)?,
        mlp_cols: balanced_partition(&capacities, config.intermediate())?,
        seq_rows: equal_split(seq, profiles.len()),
    };
    let mut live = vec![true; profiles.len()];
    memory_aware_balancing(BlockKind::Mlp, config, &mut plan, &capacities, profiles, &mut live);
    memory_aware_balancing(BlockKind::Mha, config, &mut plan, &capacities, profiles, &mut live);

    let violations: Vec<MemoryDeficit> = (0..profiles.len())
        .filter(|&d| over_budget(config, &plan, profiles, d))
        .map(|d| {
            let required = model::estimate_memory(config, &plan, d).ceil() as u64;
            let budget = profiles[d].memory_budget;
            MemoryDeficit {
                device_id: profiles[d].device_id,
                required_bytes: required,
                budget_bytes: budget,
                deficit_bytes: required.saturating_sub(budget),
            }
        })
        .collect();
    if !violations.is_empty() {
        return Err(Error::Infeasible { violations });
    }
    Ok(plan)
}
