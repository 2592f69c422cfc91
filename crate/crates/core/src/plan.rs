//! Decode plans: the drafter/refiner partition point, per-scale model
//! assignment, sampler settings and seed that fully determine a run.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::ScaleSchedule;

/// Default top-k cutoff (fine-tuned collaborative sampling recipe).
pub const DEFAULT_TOP_K: usize = 600;
/// Default nucleus cutoff.
pub const DEFAULT_TOP_P: f64 = 0.96;
/// Default temperature on the smallest scales.
pub const DEFAULT_EARLY_TEMP: f64 = 1.1;
/// Number of leading scales the raised temperature applies to.
pub const DEFAULT_EARLY_TEMP_SCALES: usize = 7;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerConfig {
    pub top_k: usize,
    pub top_p: f64,
    /// One temperature per scale.
    pub temp_schedule: Vec<f64>,
    /// Bypass all randomness: argmax with lowest-index tie-break.
    pub greedy: bool,
}

impl SamplerConfig {
    /// The default recipe: top-k 600, top-p 0.96, temperature 1.1 on the
    /// first seven scales and 1.0 after.
    pub fn recipe_defaults(num_scales: usize) -> Self {
        let temp_schedule = (0..num_scales)
            .map(|k| {
                if k < DEFAULT_EARLY_TEMP_SCALES {
                    DEFAULT_EARLY_TEMP
                } else {
                    1.0
                }
            })
            .collect();
        Self {
            top_k: DEFAULT_TOP_K,
            top_p: DEFAULT_TOP_P,
            temp_schedule,
            greedy: false,
        }
    }

    pub fn greedy(num_scales: usize) -> Self {
        Self {
            greedy: true,
            ..Self::recipe_defaults(num_scales)
        }
    }

    pub fn validate(&self, num_scales: usize) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::Contract("top_k must be at least 1".into()));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(Error::Contract(format!(
                "top_p must lie in (0, 1], got {}",
                self.top_p
            )));
        }
        if self.temp_schedule.len() < num_scales {
            return Err(Error::Contract(format!(
                "temp_schedule covers {} scales, need {num_scales}",
                self.temp_schedule.len()
            )));
        }
        if let Some(t) = self.temp_schedule.iter().find(|t| **t <= 0.0 || t.is_nan()) {
            return Err(Error::Contract(format!("temperature must be > 0, got {t}")));
        }
        Ok(())
    }
}

/// Partition point, per-scale model assignment, sampler and seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodePlan {
    /// Number of drafting steps `N`.
    pub partition_n: usize,
    /// Model index (into the caller's bundle list) generating each scale.
    pub assignment: Vec<usize>,
    pub sampler: SamplerConfig,
    /// Classifier-free guidance strength; `None` disables guidance.
    pub cfg_scale: Option<f64>,
    pub seed: u64,
}

impl DecodePlan {
    /// Single-model plan: every scale assigned to model 0.
    pub fn vanilla(schedule: &ScaleSchedule, sampler: SamplerConfig, seed: u64) -> Self {
        let k = schedule.num_scales();
        Self {
            partition_n: k,
            assignment: vec![0; k],
            sampler,
            cfg_scale: None,
            seed,
        }
    }

    /// Plain collaborative plan: model 0 (drafter) for scales `< n`, model 1
    /// (refiner) for the rest.
    pub fn collaborative(
        schedule: &ScaleSchedule,
        n: usize,
        sampler: SamplerConfig,
        seed: u64,
    ) -> Result<Self> {
        let k = schedule.num_scales();
        if n > k {
            return Err(Error::Range {
                what: "drafting steps",
                got: n,
                limit: k,
            });
        }
        let assignment = (0..k).map(|s| usize::from(s >= n)).collect();
        Ok(Self {
            partition_n: n,
            assignment,
            sampler,
            cfg_scale: None,
            seed,
        })
    }

    pub fn validate(&self, schedule: &ScaleSchedule, num_models: usize) -> Result<()> {
        let k = schedule.num_scales();
        if self.partition_n > k {
            return Err(Error::Range {
                what: "drafting steps",
                got: self.partition_n,
                limit: k,
            });
        }
        if self.assignment.len() != k {
            return Err(Error::Contract(format!(
                "assignment covers {} scales, schedule has {k}",
                self.assignment.len()
            )));
        }
        if let Some(&m) = self.assignment.iter().find(|&&m| m >= num_models) {
            return Err(Error::Contract(format!(
                "assignment references model {m}, only {num_models} provided"
            )));
        }
        if let Some(s) = &self.cfg_scale {
            if !s.is_finite() {
                return Err(Error::Contract("cfg_scale must be finite".into()));
            }
        }
        self.sampler.validate(k)
    }
}
