//! Closed-form memory accounting for vanilla and collaborative decoding.
//!
//! The KV figures are exact and must agree with the engine's measured cache
//! bytes for the same accounting width. The peak for a collaborative run is
//! the maximum over phases, not the sum: the drafter cache is released before
//! the refiner cache grows. Running-activation and parameter figures are
//! coarse models (attention score buffers plus linear activations; parameters
//! held at 4 bytes each) meant for order-of-magnitude context, not exact
//! validation.

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::model::ModelConfig;
use crate::schedule::ScaleSchedule;

/// Bytes each weight occupies regardless of the cache accounting width.
const PARAM_BYTES: u64 = 4;
/// Linear-activation buffers per token, in units of `width` elements.
const ACT_WIDTH_FACTOR: u64 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryReport {
    pub running: u64,
    /// Peak KV-cache bytes over the whole run.
    pub kv_cache: u64,
    pub params: u64,
    pub total: u64,
    /// KV bytes at the draft-phase peak (prefix plus condition token).
    pub draft_peak_kv: u64,
    /// KV bytes right after the handoff release.
    pub post_release_kv: u64,
    /// KV bytes at the refine-phase peak (full sequence plus condition).
    pub refine_peak_kv: u64,
}

fn kv_bytes(cfg: &ModelConfig, tokens: u64, batch: u64, bpe: u64, cfg_factor: u64) -> u64 {
    2 * cfg.depth as u64 * cfg.width as u64 * tokens * bpe * batch * cfg_factor
}

fn running_bytes(cfg: &ModelConfig, block: u64, cached: u64, batch: u64, bpe: u64, cfgf: u64) -> u64 {
    let scores = cfg.heads as u64 * block * cached;
    let linear = ACT_WIDTH_FACTOR * block * cfg.width as u64;
    (scores + linear) * bpe * batch * cfgf
}

/// Predicts peak memory for a run.
///
/// With `refiner: None` this models vanilla single-model decoding; with a
/// refiner it models the collaborative run with `partition_n` drafting steps.
pub fn kv_memory_model(
    drafter: &ModelConfig,
    schedule: &ScaleSchedule,
    batch: usize,
    bytes_per_element: usize,
    cfg_factor: usize,
    partition_n: usize,
    refiner: Option<&ModelConfig>,
) -> Result<MemoryReport> {
    drafter.validate()?;
    if let Some(r) = refiner {
        r.validate()?;
    }
    let total_tokens = schedule.total_tokens() as u64 + 1; // condition token
    let prefix_tokens = schedule.prefix_tokens(partition_n.min(schedule.num_scales()))? as u64 + 1;
    let final_block = schedule.tokens_at(schedule.num_scales() - 1) as u64;
    let (batch, bpe, cfgf) = (batch as u64, bytes_per_element as u64, cfg_factor as u64);

    let report = match refiner {
        None => {
            let peak = kv_bytes(drafter, total_tokens, batch, bpe, cfgf);
            let running = running_bytes(drafter, final_block, total_tokens, batch, bpe, cfgf);
            let params = drafter.param_count() * PARAM_BYTES;
            MemoryReport {
                running,
                kv_cache: peak,
                params,
                total: running + peak + params,
                draft_peak_kv: peak,
                post_release_kv: peak,
                refine_peak_kv: peak,
            }
        }
        Some(refiner) => {
            let draft_peak = kv_bytes(drafter, prefix_tokens, batch, bpe, cfgf);
            let refine_peak = kv_bytes(refiner, total_tokens, batch, bpe, cfgf);
            let peak = draft_peak.max(refine_peak);
            let running = running_bytes(refiner, final_block, total_tokens, batch, bpe, cfgf)
                .max(running_bytes(
                    drafter,
                    if partition_n > 0 {
                        schedule.tokens_at(partition_n - 1) as u64
                    } else {
                        0
                    },
                    prefix_tokens,
                    batch,
                    bpe,
                    cfgf,
                ));
            let params = (drafter.param_count() + refiner.param_count()) * PARAM_BYTES;
            MemoryReport {
                running,
                kv_cache: peak,
                params,
                total: running + peak + params,
                draft_peak_kv: draft_peak,
                post_release_kv: 0,
                refine_peak_kv: refine_peak,
            }
        }
    };
    Ok(report)
}
