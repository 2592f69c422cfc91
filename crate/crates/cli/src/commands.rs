//! Command implementations. Each returns a `CliResult`; the binary maps
//! errors to exit codes.

use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use coscale_core::analysis::{kv_memory_model, profile_latency, radial_spectrum, scale_contribution, LatencyReport, MemoryReport};
use coscale_core::finetune::{
    drafter_loss, drafter_loss_grad, refiner_loss, refiner_loss_grad, LossKind,
};
use coscale_core::model::{ModelBundle, ModelConfig};
use coscale_core::orchestrator::{
    decode_assigned, inpaint, DecodeOptions, GenerationResult, MaskGrid, VqContext,
};
use coscale_core::pyramid::{TokenMap, TokenPyramid};
use coscale_core::schedule::{ScaleSchedule, STANDARD_PATCH_NUMS};
use coscale_core::tensor::Mat;

use crate::checkpoint::{self, VqvaePack};
use crate::config::RunConfig;
use crate::error::{CliError, CliResult};
use crate::imageio;

/// Everything loaded for a configured run.
struct LoadedRun {
    cfg: RunConfig,
    vq: VqvaePack,
    models: Vec<ModelBundle>,
}

fn load_run(config_path: &Path) -> CliResult<LoadedRun> {
    let cfg = RunConfig::load(config_path)?;
    let vq = checkpoint::load_vqvae(&cfg.vqvae_path)?;
    let mut models = vec![checkpoint::load_model(&cfg.drafter_path)?];
    if let Some(refiner) = &cfg.refiner_path {
        models.push(checkpoint::load_model(refiner)?);
    }
    Ok(LoadedRun { cfg, vq, models })
}

impl LoadedRun {
    fn ctx(&self) -> VqContext<'_> {
        VqContext {
            codebook: &self.vq.codebook,
            decoder: &self.vq.decoder,
            schedule: &self.cfg.schedule,
        }
    }

    fn decode_stream(
        &self,
        stream_index: u32,
        class_id: usize,
        teacher: Option<(&TokenPyramid, &MaskGrid)>,
    ) -> CliResult<GenerationResult> {
        let refs: Vec<&ModelBundle> = self.models.iter().collect();
        let opts = DecodeOptions {
            bytes_per_element: self.cfg.kv_bytes_per_element,
            stream_index,
        };
        let out = match teacher {
            None => decode_assigned(&refs, &self.ctx(), class_id, &self.cfg.plan, &opts)?,
            Some((truth, mask)) => inpaint(
                &refs,
                &self.ctx(),
                class_id,
                truth,
                mask,
                &self.cfg.plan,
                &opts,
            )?,
        };
        Ok(out)
    }
}

fn write_outputs(
    cfg: &RunConfig,
    base_name: &str,
    result: &GenerationResult,
) -> CliResult<Vec<PathBuf>> {
    std::fs::create_dir_all(&cfg.out_dir)?;
    let base = cfg.out_dir.join(base_name);
    let mut written = Vec::new();
    let ppm = base.with_extension("ppm");
    imageio::write_ppm(&ppm, &result.image)?;
    written.push(ppm);
    if cfg.png {
        let png = base.with_extension("png");
        imageio::write_png(&png, &result.image)?;
        written.push(png);
    }
    let tokens = base.with_extension("tokens.json");
    std::fs::write(&tokens, serde_json::to_vec_pretty(&result.pyramid).unwrap())?;
    written.push(tokens);
    let stats = base.with_extension("stats.json");
    std::fs::write(&stats, serde_json::to_vec_pretty(&result.stats).unwrap())?;
    written.push(stats);
    Ok(written)
}

/// Runs every configured stream (optionally across `jobs` worker threads;
/// stream RNG substreams make the result independent of the thread count)
/// and writes images, token pyramids and stats.
fn run_streams(
    run: &LoadedRun,
    class_id: usize,
    teacher: Option<(&TokenPyramid, &MaskGrid)>,
    suffix: &str,
    jobs: usize,
) -> CliResult<Vec<PathBuf>> {
    let batch = run.cfg.batch;
    let jobs = jobs.clamp(1, batch);
    let results: Vec<CliResult<GenerationResult>> = if jobs == 1 {
        (0..batch)
            .map(|i| run.decode_stream(i as u32, class_id, teacher))
            .collect()
    } else {
        let mut slots: Vec<Option<CliResult<GenerationResult>>> = (0..batch).map(|_| None).collect();
        let slots_ref = &mut slots;
        std::thread::scope(|scope| {
            let chunks: Vec<&mut [Option<CliResult<GenerationResult>>]> =
                chunked_slots(slots_ref, batch, jobs);
            let mut offset = 0usize;
            for chunk in chunks {
                let start = offset;
                offset += chunk.len();
                scope.spawn(move || {
                    for (j, slot) in chunk.iter_mut().enumerate() {
                        *slot = Some(run.decode_stream((start + j) as u32, class_id, teacher));
                    }
                });
            }
        });
        slots.into_iter().map(|s| s.expect("stream completed")).collect()
    };
    let mut written = Vec::new();
    for (i, result) in results.into_iter().enumerate() {
        let result = result?;
        let name = format!("{}{suffix}_{i}", run.cfg.prefix);
        written.extend(write_outputs(&run.cfg, &name, &result)?);
    }
    Ok(written)
}

fn chunked_slots<T>(slots: &mut [Option<T>], total: usize, jobs: usize) -> Vec<&mut [Option<T>]> {
    let per = total.div_ceil(jobs);
    slots.chunks_mut(per).collect()
}

pub fn cmd_generate(config_path: &Path, jobs: usize) -> CliResult<Vec<PathBuf>> {
    let run = load_run(config_path)?;
    run_streams(&run, run.cfg.class_id, None, "", jobs)
}

pub fn cmd_inpaint(config_path: &Path, mask_path: &Path, truth_path: &Path) -> CliResult<Vec<PathBuf>> {
    let run = load_run(config_path)?;
    let mask = imageio::load_mask(mask_path)?;
    let truth = load_pyramid(truth_path)?;
    run_streams(&run, run.cfg.class_id, Some((&truth, &mask)), "_inpaint", 1)
}

#[allow(clippy::too_many_arguments)]
pub fn cmd_edit(
    config_path: &Path,
    bbox: (usize, usize, usize, usize),
    class_id: usize,
    truth_path: &Path,
) -> CliResult<Vec<PathBuf>> {
    let run = load_run(config_path)?;
    let truth = load_pyramid(truth_path)?;
    let side = run.cfg.schedule.final_side();
    let mask = MaskGrid::from_bbox(side, bbox.0, bbox.1, bbox.2, bbox.3)?;
    run_streams(&run, class_id, Some((&truth, &mask)), "_edit", 1)
}

fn load_pyramid(path: &Path) -> CliResult<TokenPyramid> {
    if !path.exists() {
        return Err(CliError::Missing(path.display().to_string()));
    }
    let text = std::fs::read_to_string(path)?;
    serde_json::from_str(&text)
        .map_err(|e| CliError::Usage(format!("{}: bad token pyramid: {e}", path.display())))
}

// ---------------------------------------------------------------------------
// memplan

/// `d30`, `d16`, `DEPTHxWIDTH` or `DEPTHxWIDTHxHEADS`.
pub fn parse_model_spec(spec: &str) -> CliResult<ModelConfig> {
    match spec {
        "d30" => return Ok(ModelConfig::preset_d30()),
        "d16" => return Ok(ModelConfig::preset_d16()),
        _ => {}
    }
    let parts: Vec<&str> = spec.split('x').collect();
    if !(parts.len() == 2 || parts.len() == 3) {
        return Err(CliError::Usage(format!(
            "model spec `{spec}` is not d30/d16/DEPTHxWIDTH[xHEADS]"
        )));
    }
    let num = |s: &str| -> CliResult<usize> {
        s.parse()
            .map_err(|_| CliError::Usage(format!("bad number `{s}` in model spec `{spec}`")))
    };
    let cfg = ModelConfig {
        depth: num(parts[0])?,
        width: num(parts[1])?,
        heads: if parts.len() == 3 { num(parts[2])? } else { 1 },
        vocab: 4096,
        cond_classes: 1000,
        in_channels: 32,
        patch_nums: STANDARD_PATCH_NUMS.to_vec(),
    };
    cfg.validate()
        .map_err(|e| CliError::Usage(format!("model spec `{spec}`: {e}")))?;
    Ok(cfg)
}

#[derive(Debug, Serialize)]
pub struct MemplanRow {
    pub batch: usize,
    pub vanilla: MemoryReport,
    pub collaborative: Option<MemoryReport>,
    pub kv_ratio: Option<f64>,
}

pub struct MemplanArgs {
    pub drafter: ModelConfig,
    pub refiner: Option<ModelConfig>,
    pub partition_n: usize,
    pub batches: Vec<usize>,
    pub bytes_per_element: usize,
    pub cfg_factor: usize,
    pub schedule: ScaleSchedule,
    pub json: bool,
}

fn mb(bytes: u64) -> f64 {
    bytes as f64 / (1024.0 * 1024.0)
}

pub fn cmd_memplan(args: &MemplanArgs, out: &mut impl Write) -> CliResult<()> {
    let mut rows = Vec::new();
    for &batch in &args.batches {
        let vanilla = kv_memory_model(
            &args.drafter,
            &args.schedule,
            batch,
            args.bytes_per_element,
            args.cfg_factor,
            args.schedule.num_scales(),
            None,
        )?;
        let (collaborative, kv_ratio) = match &args.refiner {
            Some(refiner) => {
                let code = kv_memory_model(
                    &args.drafter,
                    &args.schedule,
                    batch,
                    args.bytes_per_element,
                    args.cfg_factor,
                    args.partition_n,
                    Some(refiner),
                )?;
                let ratio = code.kv_cache as f64 / vanilla.kv_cache as f64;
                (Some(code), Some(ratio))
            }
            None => (None, None),
        };
        rows.push(MemplanRow {
            batch,
            vanilla,
            collaborative,
            kv_ratio,
        });
    }
    if args.json {
        writeln!(out, "{}", serde_json::to_string_pretty(&rows).unwrap())?;
        return Ok(());
    }
    writeln!(
        out,
        "{:<14} {:>12} {:>12} {:>12} {:>12} {:>9}",
        "method", "running", "kv-cache", "params", "total", "kv-ratio"
    )?;
    for row in &rows {
        writeln!(
            out,
            "{:<14} {:>10.1}MB {:>10.1}MB {:>10.1}MB {:>10.1}MB {:>9}",
            format!("vanilla bs={}", row.batch),
            mb(row.vanilla.running),
            mb(row.vanilla.kv_cache),
            mb(row.vanilla.params),
            mb(row.vanilla.total),
            "",
        )?;
        if let (Some(code), Some(ratio)) = (&row.collaborative, row.kv_ratio) {
            writeln!(
                out,
                "{:<14} {:>10.1}MB {:>10.1}MB {:>10.1}MB {:>10.1}MB {:>9.3}",
                format!("+collab bs={}", row.batch),
                mb(code.running),
                mb(code.kv_cache),
                mb(code.params),
                mb(code.total),
                ratio,
            )?;
        }
    }
    // informational: how dominant the cache is over the activation estimate
    if let Some(last) = rows.last() {
        if last.vanilla.running > 0 {
            writeln!(
                out,
                "(vanilla bs={}: kv cache is {:.1}x the modeled running activations)",
                last.batch,
                last.vanilla.kv_cache as f64 / last.vanilla.running as f64
            )?;
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// bench

pub fn cmd_bench(
    config_path: &Path,
    warmup: usize,
    reps: usize,
    json: bool,
    out: &mut impl Write,
) -> CliResult<()> {
    let run = load_run(config_path)?;
    let report: LatencyReport = profile_latency(
        || {
            run.decode_stream(0, run.cfg.class_id, None)
                .map(|r| r.stats)
                .map_err(|e| coscale_core::Error::Contract(e.to_string()))
        },
        warmup,
        reps,
    )?;
    if json {
        writeln!(out, "{}", serde_json::to_string_pretty(&report).unwrap())?;
        return Ok(());
    }
    writeln!(out, "{:<8} {:>12} {:>12}", "scale", "mean", "std")?;
    for (k, (mean, std)) in report
        .per_scale_mean
        .iter()
        .zip(&report.per_scale_std)
        .enumerate()
    {
        writeln!(out, "{:<8} {:>10.3}ms {:>10.3}ms", k + 1, mean * 1e3, std * 1e3)?;
    }
    writeln!(out, "handoff ingest: {:.3}ms", report.ingest_mean * 1e3)?;
    writeln!(
        out,
        "last three scales: {:.1}% of per-scale time",
        report.last_three_fraction * 100.0
    )?;
    Ok(())
}

// ---------------------------------------------------------------------------
// spectrum

/// Writes one `bin_center,fraction` CSV per requested (1-based) scale.
pub fn cmd_spectrum(
    pyramid_path: &Path,
    vqvae_path: &Path,
    scales: &[usize],
    out_dir: &Path,
) -> CliResult<Vec<PathBuf>> {
    let pyramid = load_pyramid(pyramid_path)?;
    let vq = checkpoint::load_vqvae(vqvae_path)?;
    let sides: Vec<usize> = pyramid.maps.iter().map(|m| m.side).collect();
    let schedule = ScaleSchedule::new(&sides)
        .map_err(|e| CliError::Usage(format!("pyramid scales are not a schedule: {e}")))?;
    pyramid
        .validate(&schedule)
        .map_err(|e| CliError::Usage(format!("invalid pyramid: {e}")))?;
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    for &scale in scales {
        if scale == 0 || scale > schedule.num_scales() {
            return Err(CliError::Usage(format!(
                "scale {scale} outside 1..={}",
                schedule.num_scales()
            )));
        }
        let contribution = scale_contribution(&pyramid, scale - 1, &vq.codebook, &schedule)?;
        let spectrum = radial_spectrum(&contribution)?;
        let mut csv = String::from("bin_center,fraction\n");
        for (c, e) in spectrum.bin_centers.iter().zip(&spectrum.energy) {
            csv.push_str(&format!("{c},{e}\n"));
        }
        let path = out_dir.join(format!("spectrum_scale{scale}.csv"));
        std::fs::write(&path, csv)?;
        written.push(path);
    }
    Ok(written)
}

// ---------------------------------------------------------------------------
// check-losses

#[derive(Debug, Serialize, Deserialize)]
pub struct LossFixtures {
    pub cases: Vec<LossCase>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LossCase {
    pub name: String,
    pub kind: LossKind,
    pub vocab: usize,
    pub sides: Vec<usize>,
    pub n: usize,
    #[serde(default)]
    pub ep: usize,
    #[serde(default)]
    pub total_ep: usize,
    /// Student (or drafter) logits, one row-major matrix per scale.
    pub logits: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub teacher: Option<Vec<Vec<Vec<f64>>>>,
    #[serde(default)]
    pub targets: Option<Vec<Vec<u32>>>,
    pub expected_total: f64,
    /// Central finite differences of the loss, h = 1e-5.
    pub expected_grads: Vec<Vec<Vec<f64>>>,
    pub total_tol: f64,
    pub grad_rtol: f64,
}

fn to_mats(raw: &[Vec<Vec<f64>>]) -> CliResult<Vec<Mat>> {
    raw.iter()
        .map(|rows| {
            Mat::from_rows(rows.clone()).map_err(|e| CliError::Usage(format!("bad fixture matrix: {e}")))
        })
        .collect()
}

pub fn cmd_check_losses(fixtures_path: &Path, out: &mut impl Write) -> CliResult<()> {
    if !fixtures_path.exists() {
        return Err(CliError::Missing(fixtures_path.display().to_string()));
    }
    let fixtures: LossFixtures =
        serde_json::from_str(&std::fs::read_to_string(fixtures_path)?)
            .map_err(|e| CliError::Usage(format!("bad fixtures: {e}")))?;
    let mut failures = 0usize;
    for case in &fixtures.cases {
        let student = to_mats(&case.logits)?;
        let (total, grads) = match case.kind {
            LossKind::Drafter => {
                let targets = case
                    .targets
                    .as_ref()
                    .ok_or_else(|| CliError::Usage(format!("{}: missing targets", case.name)))?;
                let maps: Vec<TokenMap> = case
                    .sides
                    .iter()
                    .zip(targets)
                    .map(|(&side, toks)| {
                        TokenMap::new(side, toks.clone())
                            .map_err(|e| CliError::Usage(format!("{}: {e}", case.name)))
                    })
                    .collect::<CliResult<_>>()?;
                let pyramid = TokenPyramid::new(case.vocab, maps);
                (
                    drafter_loss(&student, &pyramid, case.n)?.total,
                    drafter_loss_grad(&student, &pyramid, case.n)?,
                )
            }
            LossKind::Refiner => {
                let teacher = to_mats(case.teacher.as_ref().ok_or_else(|| {
                    CliError::Usage(format!("{}: missing teacher logits", case.name))
                })?)?;
                (
                    refiner_loss(&student, &teacher, case.ep, case.total_ep, case.n)?.total,
                    refiner_loss_grad(&student, &teacher, case.ep, case.total_ep, case.n)?,
                )
            }
        };
        let mut ok = (total - case.expected_total).abs()
            <= case.total_tol * case.expected_total.abs().max(1.0);
        'outer: for (g, e) in grads.iter().zip(&case.expected_grads) {
            for (row_idx, row) in e.iter().enumerate() {
                for (col_idx, &expect) in row.iter().enumerate() {
                    let got = g.get(row_idx, col_idx);
                    let tol = case.grad_rtol * got.abs().max(expect.abs()).max(1e-6);
                    if (got - expect).abs() > tol {
                        ok = false;
                        break 'outer;
                    }
                }
            }
        }
        writeln!(out, "[{}] {}", if ok { "PASS" } else { "FAIL" }, case.name)?;
        if !ok {
            failures += 1;
        }
    }
    if failures > 0 {
        return Err(CliError::Invariant(format!(
            "{failures} loss fixture(s) failed"
        )));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// init-ckpt

pub enum InitSpec {
    Model(Box<ModelConfig>),
    Vqvae { vocab: usize, channels: usize },
}

pub fn cmd_init_ckpt(spec: &InitSpec, seed: u64, out_path: &Path) -> CliResult<()> {
    match spec {
        InitSpec::Model(config) => {
            let bundle = ModelBundle::random(*config.clone(), seed)?;
            checkpoint::save_model(out_path, &bundle)
        }
        InitSpec::Vqvae { vocab, channels } => {
            checkpoint::save_vqvae(out_path, &VqvaePack::random(*vocab, *channels, seed))
        }
    }
}
