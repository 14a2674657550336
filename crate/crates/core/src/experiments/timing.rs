//! Per-step controller timing.

use crate::plant::ClosedLoopTrajectory;

const GROUPS: usize = 10;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingStats {
    /// Steps measured, warm-up excluded.
    pub samples: usize,
    pub mean: f64,
    /// Median of the means of `GROUPS` consecutive blocks.
    pub median_of_means: f64,
}

/// Median over `groups` contiguous blocks of the block means. Leftover
/// samples are spread over the leading blocks.
pub fn median_of_means(times: &[f64], groups: usize) -> f64 {
    if times.is_empty() {
        return 0.0;
    }
    let g = groups.clamp(1, times.len());
    let base = times.len() / g;
    let extra = times.len() % g;
    let mut means = Vec::with_capacity(g);
    let mut start = 0;
    for i in 0..g {
        let len = base + usize::from(i < extra);
        let block = &times[start..start + len];
        means.push(block.iter().sum::<f64>() / len as f64);
        start += len;
    }
    means.sort_by(f64::total_cmp);
    if g % 2 == 1 {
        means[g / 2]
    } else {
        0.5 * (means[g / 2 - 1] + means[g / 2])
    }
}

/// Statistics of the controller times, skipping the first (warm-up) step.
pub fn timing_stats(traj: &ClosedLoopTrajectory) -> TimingStats {
    let times = traj.controller_times();
    let measured = times.get(1..).unwrap_or(&[]);
    let mean = if measured.is_empty() {
        0.0
    } else {
        measured.iter().sum::<f64>() / measured.len() as f64
    };
    TimingStats {
        samples: measured.len(),
        mean,
        median_of_means: median_of_means(measured, GROUPS),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimingReport {
    pub mpc: TimingStats,
    pub farma: TimingStats,
    /// MPC over F-ARMA, using the median-of-means estimates.
    pub ratio: f64,
}

pub fn bench_timing(mpc: &ClosedLoopTrajectory, farma: &ClosedLoopTrajectory) -> TimingReport {
    let mpc = timing_stats(mpc);
    let farma = timing_stats(farma);
    let ratio = if farma.median_of_means > 0.0 {
        mpc.median_of_means / farma.median_of_means
    } else {
        f64::INFINITY
    };
    TimingReport { mpc, farma, ratio }
}
