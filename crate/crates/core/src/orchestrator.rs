//! Decoding strategies: vanilla next-scale decoding, collaborative
//! drafter/refiner decoding with an explicit cache handoff, arbitrary
//! per-scale model assignment, and teacher-forced inpainting/editing.
//!
//! A handoff happens whenever the per-scale assignment switches models: the
//! outgoing model's cache is released (the freed bytes are recorded exactly)
//! and the incoming model rebuilds its own cache from the token prefix with
//! one masked ingestion pass, recorded as a separate labeled phase rather
//! than folded into the next scale's time.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    build_scale_input, cond_cache, forward_scale, ingest_prefix, KVCacheState, ModelBundle,
};
use crate::plan::DecodePlan;
use crate::pyramid::{TokenMap, TokenPyramid};
use crate::quantizer::{decode_image, upsample, Codebook, DecoderWeights, PixelImage};
use crate::rng::StreamRng;
use crate::sampler::sample_tokens;
use crate::schedule::ScaleSchedule;
use crate::tensor::{FeatureMap, Mat};

/// The quantizer state shared by every model in a run.
#[derive(Clone, Copy)]
pub struct VqContext<'a> {
    pub codebook: &'a Codebook,
    pub decoder: &'a DecoderWeights,
    pub schedule: &'a ScaleSchedule,
}

/// Engine knobs that are not part of the decode plan.
#[derive(Debug, Clone, Copy)]
pub struct DecodeOptions {
    /// Accounting width for KV-cache bytes (2 or 4).
    pub bytes_per_element: usize,
    /// Which RNG stream this run draws from (batch element / job index).
    pub stream_index: u32,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        Self {
            bytes_per_element: 4,
            stream_index: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleStat {
    pub scale: usize,
    pub seconds: f64,
    pub cache_bytes_after: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HandoffStat {
    /// Scale index the incoming model starts at.
    pub at_scale: usize,
    pub freed_bytes: u64,
    pub ingest_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunStats {
    pub per_scale: Vec<ScaleStat>,
    pub handoffs: Vec<HandoffStat>,
    pub peak_cache_bytes: u64,
    pub total_seconds: f64,
}

impl RunStats {
    pub fn freed_bytes(&self) -> u64 {
        self.handoffs.iter().map(|h| h.freed_bytes).sum()
    }
}

#[derive(Debug, Clone)]
pub struct GenerationResult {
    pub pyramid: TokenPyramid,
    pub image: PixelImage,
    pub stats: RunStats,
}

/// A full-resolution boolean mask; `true` marks cells the model generates,
/// `false` marks teacher-forced cells.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaskGrid {
    pub side: usize,
    pub inside: Vec<bool>,
}

impl MaskGrid {
    pub fn new(side: usize, inside: Vec<bool>) -> Result<Self> {
        if inside.len() != side * side {
            return Err(Error::Shape(format!(
                "mask side {side} needs {} entries, got {}",
                side * side,
                inside.len()
            )));
        }
        Ok(Self { side, inside })
    }

    pub fn filled(side: usize, value: bool) -> Self {
        Self {
            side,
            inside: vec![value; side * side],
        }
    }

    /// Axis-aligned rectangle `[x0, x1) x [y0, y1)` marked inside.
    pub fn from_bbox(side: usize, x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x1 > side || y1 > side || x0 > x1 || y0 > y1 {
            return Err(Error::Contract(format!(
                "bbox ({x0},{y0})..({x1},{y1}) outside {side}x{side} image"
            )));
        }
        let mut inside = vec![false; side * side];
        for y in y0..y1 {
            for x in x0..x1 {
                inside[y * side + x] = true;
            }
        }
        Ok(Self { side, inside })
    }

    /// Conservative downsampling: a coarse cell is inside as soon as any
    /// full-resolution pixel it covers is inside.
    pub fn at_scale(&self, side: usize) -> Vec<bool> {
        let full = self.side;
        let mut out = vec![false; side * side];
        for (i, cell) in out.iter_mut().enumerate() {
            let (cy, cx) = (i / side, i % side);
            let y0 = cy * full / side;
            let y1 = ((cy + 1) * full).div_ceil(side);
            let x0 = cx * full / side;
            let x1 = ((cx + 1) * full).div_ceil(side);
            'scan: for y in y0..y1.min(full) {
                for x in x0..x1.min(full) {
                    if self.inside[y * full + x] {
                        *cell = true;
                        break 'scan;
                    }
                }
            }
        }
        out
    }
}

struct TeacherForcing<'a> {
    truth: &'a TokenPyramid,
    mask: &'a MaskGrid,
}

fn validate_models(models: &[&ModelBundle], ctx: &VqContext, cond: usize) -> Result<()> {
    if models.is_empty() {
        return Err(Error::Contract("at least one model required".into()));
    }
    for m in models {
        if m.config.patch_nums != ctx.schedule.patch_nums() {
            return Err(Error::Contract(
                "model schedule does not match run schedule".into(),
            ));
        }
        if m.config.vocab != ctx.codebook.vocab() {
            return Err(Error::Contract(format!(
                "model vocabulary {} does not match codebook {}",
                m.config.vocab,
                ctx.codebook.vocab()
            )));
        }
        if m.config.in_channels != ctx.codebook.channels() {
            return Err(Error::Contract(format!(
                "model expects {} channels, codebook has {}",
                m.config.in_channels,
                ctx.codebook.channels()
            )));
        }
        if cond >= m.config.cond_classes {
            return Err(Error::Contract(format!(
                "class id {cond} outside {} classes",
                m.config.cond_classes
            )));
        }
    }
    Ok(())
}

fn conds_for(m: &ModelBundle, cond: usize, cfg: bool) -> Vec<usize> {
    if cfg {
        vec![cond, m.config.null_class()]
    } else {
        vec![cond]
    }
}

/// Guidance mix over per-stream logits: `uncond + s * (cond - uncond)`.
fn mix_cfg(logits: &[Mat], scale: f64) -> Mat {
    let cond = &logits[0];
    let uncond = &logits[1];
    let mut out = uncond.clone();
    for (o, (&c, &u)) in out
        .data_mut()
        .iter_mut()
        .zip(cond.data().iter().zip(uncond.data()))
    {
        *o = u + scale * (c - u);
    }
    out
}

fn decode_run(
    models: &[&ModelBundle],
    ctx: &VqContext,
    cond: usize,
    plan: &DecodePlan,
    opts: &DecodeOptions,
    teacher: Option<TeacherForcing>,
) -> Result<GenerationResult> {
    validate_models(models, ctx, cond)?;
    plan.validate(ctx.schedule, models.len())?;
    if let Some(t) = &teacher {
        t.truth.validate(ctx.schedule)?;
        if t.mask.side != ctx.schedule.final_side() {
            return Err(Error::Shape(format!(
                "mask side {} does not match final side {}",
                t.mask.side,
                ctx.schedule.final_side()
            )));
        }
    }
    if !(opts.bytes_per_element == 2 || opts.bytes_per_element == 4) {
        return Err(Error::Contract("bytes_per_element must be 2 or 4".into()));
    }

    let schedule = ctx.schedule;
    let k_scales = schedule.num_scales();
    let cfg_on = plan.cfg_scale.is_some();
    let rng = StreamRng::new(plan.seed);
    let run_start = Instant::now();

    let mut stats = RunStats {
        per_scale: Vec::with_capacity(k_scales),
        handoffs: Vec::new(),
        peak_cache_bytes: 0,
        total_seconds: 0.0,
    };
    let mut maps: Vec<TokenMap> = Vec::with_capacity(k_scales);
    let mut recon = FeatureMap::zeros(schedule.final_side(), ctx.codebook.channels());

    let mut active = plan.assignment.first().copied().unwrap_or(0);
    let mut cache: KVCacheState = cond_cache(
        models[active],
        &conds_for(models[active], cond, cfg_on),
        opts.bytes_per_element,
    )?;
    stats.peak_cache_bytes = stats.peak_cache_bytes.max(cache.measured_bytes());

    for k in 0..k_scales {
        let assigned = plan.assignment[k];
        if assigned != active {
            // handoff: release the outgoing cache, re-ingest the prefix
            let freed = cache.release();
            let incoming = models[assigned];
            let ingest_start = Instant::now();
            cache = ingest_prefix(
                incoming,
                ctx.codebook,
                &maps,
                &conds_for(incoming, cond, cfg_on),
                opts.bytes_per_element,
            )?;
            stats.handoffs.push(HandoffStat {
                at_scale: k,
                freed_bytes: freed,
                ingest_seconds: ingest_start.elapsed().as_secs_f64(),
            });
            stats.peak_cache_bytes = stats.peak_cache_bytes.max(cache.measured_bytes());
            active = assigned;
        }
        let model = models[active];
        let conds = conds_for(model, cond, cfg_on);

        let scale_start = Instant::now();
        let inputs = build_scale_input(model, &recon, k, &conds)?;
        let logits = forward_scale(model, &mut cache, &inputs, k)?;
        let merged = match plan.cfg_scale {
            Some(s) => mix_cfg(&logits, s),
            None => logits.into_iter().next().unwrap(),
        };
        let mut tokens = sample_tokens(
            &merged,
            &plan.sampler,
            k,
            &mut rng.substream(opts.stream_index, k as u32),
        )?;
        if let Some(t) = &teacher {
            let inside = t.mask.at_scale(schedule.side(k));
            for (i, tok) in tokens.iter_mut().enumerate() {
                if !inside[i] {
                    *tok = t.truth.maps[k].tokens[i];
                }
            }
        }
        let map = TokenMap::new(schedule.side(k), tokens)?;
        recon.add_assign(&upsample(
            &ctx.codebook.embed_map(&map),
            schedule.final_side(),
        )?);
        maps.push(map);
        stats.per_scale.push(ScaleStat {
            scale: k,
            seconds: scale_start.elapsed().as_secs_f64(),
            cache_bytes_after: cache.measured_bytes(),
        });
        stats.peak_cache_bytes = stats.peak_cache_bytes.max(cache.measured_bytes());
    }

    stats.total_seconds = run_start.elapsed().as_secs_f64();
    let image = decode_image(&recon, ctx.decoder);
    Ok(GenerationResult {
        pyramid: TokenPyramid::new(ctx.codebook.vocab(), maps),
        image,
        stats,
    })
}

/// Single-model next-scale decoding.
pub fn decode_vanilla(
    m: &ModelBundle,
    ctx: &VqContext,
    cond: usize,
    plan: &DecodePlan,
    opts: &DecodeOptions,
) -> Result<GenerationResult> {
    if plan.assignment.iter().any(|&a| a != plan.assignment[0]) {
        return Err(Error::Contract(
            "vanilla decoding requires a single-model assignment".into(),
        ));
    }
    let mut single = plan.clone();
    single.assignment = vec![0; ctx.schedule.num_scales()];
    decode_run(&[m], ctx, cond, &single, opts, None)
}

/// Drafter/refiner collaboration: the drafter generates scales `< N`, its
/// cache is released, and the refiner ingests the drafted prefix before
/// generating the rest.
pub fn decode_collaborative(
    drafter: &ModelBundle,
    refiner: &ModelBundle,
    ctx: &VqContext,
    cond: usize,
    plan: &DecodePlan,
    opts: &DecodeOptions,
) -> Result<GenerationResult> {
    let k = ctx.schedule.num_scales();
    if plan.partition_n > k {
        return Err(Error::Range {
            what: "drafting steps",
            got: plan.partition_n,
            limit: k,
        });
    }
    let expected: Vec<usize> = (0..k).map(|s| usize::from(s >= plan.partition_n)).collect();
    if plan.assignment != expected {
        return Err(Error::Contract(
            "plan assignment does not match the drafter/refiner partition".into(),
        ));
    }
    decode_run(&[drafter, refiner], ctx, cond, plan, opts, None)
}

/// Fully general per-scale assignment; consecutive runs of the same model
/// share a cache and every switch triggers a release + ingest handoff.
pub fn decode_assigned(
    models: &[&ModelBundle],
    ctx: &VqContext,
    cond: usize,
    plan: &DecodePlan,
    opts: &DecodeOptions,
) -> Result<GenerationResult> {
    decode_run(models, ctx, cond, plan, opts, None)
}

/// Teacher-forced generation: tokens whose cells fall outside `mask` are
/// pinned to `ground_truth` at every scale; tokens inside are generated.
pub fn inpaint(
    models: &[&ModelBundle],
    ctx: &VqContext,
    cond: usize,
    ground_truth: &TokenPyramid,
    mask: &MaskGrid,
    plan: &DecodePlan,
    opts: &DecodeOptions,
) -> Result<GenerationResult> {
    decode_run(
        models,
        ctx,
        cond,
        plan,
        opts,
        Some(TeacherForcing {
            truth: ground_truth,
            mask,
        }),
    )
}

/// Class-conditional editing restricted to a bounding box: inpainting with
/// the box interior as the mask and `cond` as the editing class.
#[allow(clippy::too_many_arguments)]
pub fn edit_box(
    models: &[&ModelBundle],
    ctx: &VqContext,
    cond: usize,
    ground_truth: &TokenPyramid,
    bbox: (usize, usize, usize, usize),
    plan: &DecodePlan,
    opts: &DecodeOptions,
) -> Result<GenerationResult> {
    let (x0, y0, x1, y1) = bbox;
    let mask = MaskGrid::from_bbox(ctx.schedule.final_side(), x0, y0, x1, y1)?;
    inpaint(models, ctx, cond, ground_truth, &mask, plan, opts)
}
