//! Run configuration: a single TOML file naming the checkpoints, decode plan
//! and outputs. Unknown fields and malformed values produce located
//! diagnostics, never a crash. `COSCALE_SEED` overrides the configured seed.

use std::path::{Path, PathBuf};

use serde::Deserialize;

use coscale_core::plan::{DecodePlan, SamplerConfig};
use coscale_core::schedule::{ScaleSchedule, STANDARD_PATCH_NUMS};

use crate::error::{CliError, CliResult};

pub const SEED_ENV: &str = "COSCALE_SEED";
/// Drafting steps used when a refiner is configured but no
/// `plan.partition_n` is given.
pub const DEFAULT_PARTITION: usize = 6;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RunConfigFile {
    schedule: Option<Vec<usize>>,
    batch: Option<usize>,
    seed: Option<u64>,
    class: Option<usize>,
    kv_bytes_per_element: Option<usize>,
    models: ModelsSection,
    plan: Option<PlanSection>,
    sampler: Option<SamplerSection>,
    output: Option<OutputSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelsSection {
    vqvae: PathBuf,
    drafter: PathBuf,
    refiner: Option<PathBuf>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct PlanSection {
    partition_n: Option<usize>,
    cfg_scale: Option<f64>,
    assignment: Option<Vec<usize>>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct SamplerSection {
    top_k: Option<usize>,
    top_p: Option<f64>,
    temperatures: Option<Vec<f64>>,
    greedy: Option<bool>,
}

#[derive(Debug, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    dir: Option<PathBuf>,
    prefix: Option<String>,
    png: Option<bool>,
}

/// A fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub schedule: ScaleSchedule,
    pub vqvae_path: PathBuf,
    pub drafter_path: PathBuf,
    pub refiner_path: Option<PathBuf>,
    pub plan: DecodePlan,
    pub batch: usize,
    pub class_id: usize,
    pub kv_bytes_per_element: usize,
    pub out_dir: PathBuf,
    pub prefix: String,
    pub png: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> CliResult<Self> {
        if !path.exists() {
            return Err(CliError::Missing(path.display().to_string()));
        }
        let text = std::fs::read_to_string(path)?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Parses and resolves a config; any malformed input yields a diagnostic
    /// carrying the offending line/field.
    pub fn parse(text: &str, base: &Path) -> CliResult<Self> {
        let file: RunConfigFile =
            toml::from_str(text).map_err(|e| CliError::Usage(format!("config error: {e}")))?;

        let patch_nums = file
            .schedule
            .unwrap_or_else(|| STANDARD_PATCH_NUMS.to_vec());
        let schedule = ScaleSchedule::new(&patch_nums)
            .map_err(|e| CliError::Usage(format!("config field `schedule`: {e}")))?;
        let k = schedule.num_scales();

        let sampler_section = file.sampler.unwrap_or_default();
        let mut sampler = SamplerConfig::recipe_defaults(k);
        if let Some(top_k) = sampler_section.top_k {
            sampler.top_k = top_k;
        }
        if let Some(top_p) = sampler_section.top_p {
            sampler.top_p = top_p;
        }
        if let Some(temps) = sampler_section.temperatures {
            sampler.temp_schedule = temps;
        }
        if let Some(greedy) = sampler_section.greedy {
            sampler.greedy = greedy;
        }
        sampler
            .validate(k)
            .map_err(|e| CliError::Usage(format!("config table `sampler`: {e}")))?;

        let plan_section = file.plan.unwrap_or_default();
        let has_refiner = file.models.refiner.is_some();
        let partition_n = plan_section.partition_n.unwrap_or(if has_refiner {
            DEFAULT_PARTITION.min(k)
        } else {
            k
        });
        let mut seed = file.seed.unwrap_or(0);
        if let Ok(env_seed) = std::env::var(SEED_ENV) {
            seed = env_seed.parse().map_err(|_| {
                CliError::Usage(format!("{SEED_ENV} must be an unsigned 64-bit integer"))
            })?;
        }
        let mut plan = if has_refiner {
            DecodePlan::collaborative(&schedule, partition_n, sampler, seed)
                .map_err(|e| CliError::Usage(format!("config field `plan.partition_n`: {e}")))?
        } else {
            DecodePlan::vanilla(&schedule, sampler, seed)
        };
        plan.cfg_scale = plan_section.cfg_scale;
        if let Some(assignment) = plan_section.assignment {
            plan.assignment = assignment;
        }
        let num_models = if has_refiner { 2 } else { 1 };
        plan.validate(&schedule, num_models)
            .map_err(|e| CliError::Usage(format!("config table `plan`: {e}")))?;

        let batch = file.batch.unwrap_or(1);
        if batch == 0 {
            return Err(CliError::Usage("config field `batch` must be >= 1".into()));
        }
        let kv_bytes_per_element = file.kv_bytes_per_element.unwrap_or(4);
        if !(kv_bytes_per_element == 2 || kv_bytes_per_element == 4) {
            return Err(CliError::Usage(
                "config field `kv_bytes_per_element` must be 2 or 4".into(),
            ));
        }

        let output = file.output.unwrap_or_default();
        let resolve = |p: PathBuf| if p.is_absolute() { p } else { base.join(p) };
        Ok(RunConfig {
            schedule,
            vqvae_path: resolve(file.models.vqvae),
            drafter_path: resolve(file.models.drafter),
            refiner_path: file.models.refiner.map(resolve),
            plan,
            batch,
            class_id: file.class.unwrap_or(0),
            kv_bytes_per_element,
            out_dir: resolve(output.dir.unwrap_or_else(|| PathBuf::from("."))),
            prefix: output.prefix.unwrap_or_else(|| "run".into()),
            png: output.png.unwrap_or(true),
        })
    }
}
