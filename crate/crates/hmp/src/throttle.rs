//! Compute slowdown emulation.
//!
//! Two pacing modes. The measured mode pads each kernel to `multiplier`
//! times its own measured duration. The calibrated mode benchmarks the
//! worker's solo compute rate once and then paces every kernel to
//! `multiplier x headroom x flops / rate`, a deterministic duration: on a
//! shared host, co-located workers perturb each other's raw kernel times,
//! and measured-mode padding would let that perturbation leak between
//! emulated devices. Padding sleeps for the bulk of the wait and spins only
//! the final stretch, so it never steals host cycles from a co-located
//! worker the way a real slower device never would.

use std::time::{Duration, Instant};

use crate::error::{Error, Result};

/// Calibrated pacing targets must absorb the slowdown co-scheduled workers
/// inflict on each other, or raw kernel time would overrun the pacing
/// window and re-couple the emulated devices.
pub const EMULATION_HEADROOM: f64 = 1.75;

#[derive(Debug, Clone)]
pub struct Throttle {
    multiplier: f64,
    /// Seconds per floating-point operation at emulated full speed
    /// (headroom included); `None` selects measured-mode padding.
    seconds_per_flop: Option<f64>,
}

impl Throttle {
    /// No slowdown, no pacing.
    pub fn none() -> Self {
        Self { multiplier: 1.0, seconds_per_flop: None }
    }

    /// Measured-mode padding: each kernel is padded to `multiplier` times
    /// its own duration.
    pub fn new(multiplier: f64) -> Result<Self> {
        if !multiplier.is_finite() || multiplier < 1.0 {
            return Err(Error::Config(format!("compute throttle {multiplier} must be >= 1")));
        }
        Ok(Self { multiplier, seconds_per_flop: None })
    }

    /// Calibrated pacing: benchmarks this host's solo compute rate, then
    /// paces every costed kernel to a deterministic duration. Used by
    /// workers so that co-located emulated devices stay independent.
    pub fn calibrated(multiplier: f64) -> Result<Self> {
        let mut throttle = Self::new(multiplier)?;
        let rate = solo_flop_rate();
        throttle.seconds_per_flop = Some(EMULATION_HEADROOM / rate);
        Ok(throttle)
    }

    /// Calibrated pacing with a pace measured elsewhere; the coordinator
    /// calibrates once and shares the host pace with every co-located
    /// worker so their emulated rates agree exactly.
    pub fn with_pace(multiplier: f64, seconds_per_flop: f64) -> Result<Self> {
        if !seconds_per_flop.is_finite() || seconds_per_flop <= 0.0 {
            return Err(Error::Config(format!("pace {seconds_per_flop} must be positive")));
        }
        let mut throttle = Self::new(multiplier)?;
        throttle.seconds_per_flop = Some(seconds_per_flop);
        Ok(throttle)
    }

    /// The calibrated pace, when present.
    pub fn seconds_per_flop(&self) -> Option<f64> {
        self.seconds_per_flop
    }

    pub fn multiplier(&self) -> f64 {
        self.multiplier
    }

    pub fn is_calibrated(&self) -> bool {
        self.seconds_per_flop.is_some()
    }

    /// Runs a kernel of an estimated `cost_flops`, padding per the mode.
    pub fn run_cost<R>(&self, cost_flops: f64, f: impl FnOnce() -> R) -> R {
        match self.seconds_per_flop {
            Some(spf) => {
                let start = Instant::now();
                let out = f();
                pad_until(start, Duration::from_secs_f64(self.multiplier * cost_flops * spf));
                out
            }
            None => self.run(f),
        }
    }

    /// Measured-mode entry point: pads to `multiplier` times the kernel's
    /// own duration (calibration ignored, no flop estimate needed).
    pub fn run<R>(&self, f: impl FnOnce() -> R) -> R {
        if self.multiplier <= 1.0 {
            return f();
        }
        let start = Instant::now();
        let out = f();
        let target = start.elapsed().mul_f64(self.multiplier);
        pad_until(start, target);
        out
    }
}

fn pad_until(start: Instant, target: Duration) {
    // Sleep overshoot on sandboxed kernels reaches a millisecond; the spin
    // tail absorbs it so paced durations land on target.
    let spin_tail = Duration::from_micros(1500);
    loop {
        let elapsed = start.elapsed();
        if elapsed + spin_tail >= target {
            break;
        }
        std::thread::sleep((target - elapsed - spin_tail).min(Duration::from_millis(5)));
    }
    while start.elapsed() < target {
        std::hint::spin_loop();
    }
}

/// Minimum timing of a fixed blocked-GEMM benchmark; the minimum sheds
/// scheduler noise and approximates the quiet-host rate. Rounds are spaced
/// out so a single noise burst cannot cover every sample.
fn solo_flop_rate() -> f64 {
    use crate::tensor::{gemm, gemm_flops, Tensor};
    let (m, k, n) = (96usize, 256usize, 512usize);
    let a = Tensor::<f32>::from_fn(m, k, |r, c| ((r * 31 + c * 7) % 23) as f32 * 0.01 - 0.1);
    let b = Tensor::<f32>::from_fn(k, n, |r, c| ((r * 13 + c * 3) % 19) as f32 * 0.01 - 0.08);
    let flops = gemm_flops(m, k, n);
    let mut best = f64::INFINITY;
    for round in 0..4 {
        if round > 0 {
            std::thread::sleep(Duration::from_millis(7));
        }
        for _ in 0..7 {
            let start = Instant::now();
            std::hint::black_box(gemm(&a, &b).expect("benchmark shapes agree"));
            best = best.min(start.elapsed().as_secs_f64());
        }
    }
    flops / best
}
