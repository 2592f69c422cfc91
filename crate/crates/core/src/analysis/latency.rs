//! Per-scale latency profiling over repeated generation runs.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orchestrator::RunStats;

pub const MIN_WARMUP: usize = 3;
pub const MIN_REPETITIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatencyReport {
    pub per_scale_mean: Vec<f64>,
    pub per_scale_std: Vec<f64>,
    /// Mean total handoff-ingest seconds per run, kept as its own phase.
    pub ingest_mean: f64,
    /// Fraction of per-scale time spent in the last three scales.
    pub last_three_fraction: f64,
    pub repetitions: usize,
}

/// Runs `produce` for `warmup` discarded plus `reps` measured repetitions and
/// aggregates the per-scale wall times.
pub fn profile_latency(
    mut produce: impl FnMut() -> Result<RunStats>,
    warmup: usize,
    reps: usize,
) -> Result<LatencyReport> {
    if warmup < MIN_WARMUP || reps < MIN_REPETITIONS {
        return Err(Error::InsufficientSamples(format!(
            "need at least {MIN_WARMUP} warmup and {MIN_REPETITIONS} measured repetitions, \
             got {warmup} + {reps}"
        )));
    }
    for _ in 0..warmup {
        produce()?;
    }
    let mut samples: Vec<RunStats> = Vec::with_capacity(reps);
    for _ in 0..reps {
        samples.push(produce()?);
    }
    let scales = samples[0].per_scale.len();
    if samples.iter().any(|s| s.per_scale.len() != scales) {
        return Err(Error::Contract(
            "repetitions disagree on scale count".into(),
        ));
    }
    let n = reps as f64;
    let mut per_scale_mean = vec![0.0; scales];
    let mut per_scale_std = vec![0.0; scales];
    for k in 0..scales {
        let xs: Vec<f64> = samples.iter().map(|s| s.per_scale[k].seconds).collect();
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        per_scale_mean[k] = mean;
        per_scale_std[k] = var.sqrt();
    }
    let ingest_mean = samples
        .iter()
        .map(|s| s.handoffs.iter().map(|h| h.ingest_seconds).sum::<f64>())
        .sum::<f64>()
        / n;
    let total: f64 = per_scale_mean.iter().sum();
    let tail: f64 = per_scale_mean
        .iter()
        .skip(scales.saturating_sub(3))
        .sum();
    let last_three_fraction = if total > 0.0 { tail / total } else { 1.0 };
    Ok(LatencyReport {
        per_scale_mean,
        per_scale_std,
        ingest_mean,
        last_three_fraction,
        repetitions: reps,
    })
}
