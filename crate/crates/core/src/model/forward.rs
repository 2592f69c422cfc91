//! Forward paths: incremental per-scale decoding and the single-pass masked
//! prefix ingestion used at a drafter/refiner handoff.
//!
//! Both paths funnel through the same per-block routine; they differ only in
//! how many key rows each query is allowed to see. Incrementally decoded
//! blocks see the whole cache (all previous scales plus full attention inside
//! their own scale); a masked ingestion pass processes every prefix position
//! at once, with positions of scale `i` restricted to scales `<= i`. The two
//! constructions therefore populate element-wise identical caches.

use crate::error::{Error, Result};
use crate::par;
use crate::pyramid::TokenMap;
use crate::quantizer::{resize_to, upsample, Codebook};
use crate::tensor::{FeatureMap, Mat};

use super::cache::KVCacheState;
use super::{LayerWeights, ModelBundle};

const LN_EPS: f64 = 1e-5;

fn layer_norm_rows(x: &Mat, gain: &[f64], bias: &[f64]) -> Mat {
    let w = x.cols();
    let mut data = vec![0.0; x.rows() * w];
    par::fill_rows(&mut data, w, w * 4, |r, out| {
        let row = x.row(r);
        let mean = row.iter().sum::<f64>() / w as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
        let inv = 1.0 / (var + LN_EPS).sqrt();
        for (i, (o, v)) in out.iter_mut().zip(row).enumerate() {
            *o = (v - mean) * inv * gain[i] + bias[i];
        }
    });
    Mat::from_vec(x.rows(), w, data).unwrap()
}

fn gelu(x: f64) -> f64 {
    const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + 0.044715 * x * x * x)).tanh())
}

/// Multi-head scaled dot-product attention of `q` against flat key/value
/// buffers; query row `t` sees the first `allowed[t]` key rows.
fn attention(q: &Mat, keys: &[f64], values: &[f64], allowed: &[usize], heads: usize) -> Mat {
    let t = q.rows();
    let w = q.cols();
    let hd = w / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let max_keys = allowed.iter().copied().max().unwrap_or(0);
    let mut data = vec![0.0; t * w];
    par::fill_rows(&mut data, w, max_keys * w, |qi, out| {
        let n = allowed[qi];
        let qrow = q.row(qi);
        let mut scores = vec![0.0; n];
        for h in 0..heads {
            let off = h * hd;
            let mut max_score = f64::NEG_INFINITY;
            for (j, s) in scores.iter_mut().enumerate() {
                let krow = &keys[j * w + off..j * w + off + hd];
                let mut dot = 0.0;
                for d in 0..hd {
                    dot += qrow[off + d] * krow[d];
                }
                *s = dot * scale;
                if *s > max_score {
                    max_score = *s;
                }
            }
            let mut denom = 0.0;
            for s in scores.iter_mut() {
                *s = (*s - max_score).exp();
                denom += *s;
            }
            let inv = 1.0 / denom;
            for (j, s) in scores.iter().enumerate() {
                let weight = s * inv;
                let vrow = &values[j * w + off..j * w + off + hd];
                for d in 0..hd {
                    out[off + d] += weight * vrow[d];
                }
            }
        }
    });
    Mat::from_vec(t, w, data).unwrap()
}

fn add_bias_rows(x: &mut Mat, bias: &[f64]) {
    let cols = x.cols();
    for r in 0..x.rows() {
        for (v, b) in x.row_mut(r).iter_mut().zip(&bias[..cols]) {
            *v += b;
        }
    }
}

fn mlp(x: &Mat, layer: &LayerWeights) -> Mat {
    let h = layer_norm_rows(x, &layer.ln2_gain, &layer.ln2_bias);
    let mut a = h.matmul(&layer.w1);
    add_bias_rows(&mut a, &layer.b1);
    for v in a.data_mut() {
        *v = gelu(*v);
    }
    let mut out = a.matmul(&layer.w2);
    add_bias_rows(&mut out, &layer.b2);
    out
}

/// Runs one block of positions through every layer, appending its keys and
/// values to `cache`. `allowed[t]` counts the visible cache rows for query
/// `t` after this block's rows are appended. Returns the final hidden states.
fn forward_block(
    m: &ModelBundle,
    cache: &mut KVCacheState,
    inputs: &[Mat],
    allowed: &[usize],
) -> Result<Vec<Mat>> {
    let mut xs: Vec<Mat> = inputs.to_vec();
    let tokens = xs[0].rows();
    for (l, layer) in m.weights.layers.iter().enumerate() {
        for (b, x) in xs.iter_mut().enumerate() {
            let h = layer_norm_rows(x, &layer.ln1_gain, &layer.ln1_bias);
            let q = h.matmul(&layer.wq);
            let k = h.matmul(&layer.wk);
            let v = h.matmul(&layer.wv);
            cache.append_layer(l, b, k.data(), v.data())?;
            let (kc, vc) = cache.layer_kv(l, b);
            let attn = attention(&q, kc, vc, allowed, m.config.heads);
            x.add_assign(&attn.matmul(&layer.wo));
            let ff = mlp(x, layer);
            x.add_assign(&ff);
        }
    }
    cache.advance(tokens);
    Ok(xs)
}

fn logits_from_hidden(m: &ModelBundle, hidden: &[Mat]) -> Vec<Mat> {
    hidden
        .iter()
        .map(|x| {
            layer_norm_rows(x, &m.weights.final_norm_gain, &m.weights.final_norm_bias)
                .matmul(&m.weights.head)
        })
        .collect()
}

fn check_conds(m: &ModelBundle, conds: &[usize]) -> Result<()> {
    if conds.is_empty() {
        return Err(Error::Contract("at least one class id required".into()));
    }
    for &c in conds {
        if c > m.config.cond_classes {
            return Err(Error::Contract(format!(
                "class id {c} outside embedding table of {} classes (+1 null row)",
                m.config.cond_classes
            )));
        }
    }
    Ok(())
}

fn cond_row(m: &ModelBundle, cond: usize) -> Vec<f64> {
    let w = m.config.width;
    let mut row = m.weights.class_embed.row(cond).to_vec();
    for (a, b) in row.iter_mut().zip(&m.weights.pos_embed.row(0)[..w]) {
        *a += b;
    }
    row
}

/// Builds the model input block for scale `k` from the accumulated
/// full-resolution reconstruction of scales `0..k`, one matrix per batch
/// element.
///
/// Scale 0 has no prior reconstruction; its single-token block starts from
/// the class embedding instead. Later scales resize the reconstruction to the
/// scale's grid, project it to model width and add the scale and position
/// embeddings.
pub fn build_scale_input(
    m: &ModelBundle,
    recon: &FeatureMap,
    k: usize,
    conds: &[usize],
) -> Result<Vec<Mat>> {
    check_conds(m, conds)?;
    let schedule = m.config.schedule();
    if k >= schedule.num_scales() {
        return Err(Error::Range {
            what: "scale index",
            got: k,
            limit: schedule.num_scales() - 1,
        });
    }
    let w = m.config.width;
    let side = schedule.side(k);
    let tokens = side * side;
    let pos_base = 1 + schedule.offsets()[k];
    if k == 0 {
        // class-embedding start block
        return conds
            .iter()
            .map(|&cond| {
                let mut row = m.weights.class_embed.row(cond).to_vec();
                for (i, v) in row.iter_mut().enumerate() {
                    *v += m.weights.scale_embed.get(0, i);
                    *v += m.weights.pos_embed.get(pos_base, i);
                }
                Mat::from_vec(1, w, row)
            })
            .collect();
    }
    if recon.side != schedule.final_side() || recon.channels != m.config.in_channels {
        return Err(Error::Shape(format!(
            "reconstruction must be {0}x{0}x{1}",
            schedule.final_side(),
            m.config.in_channels
        )));
    }
    let resized = resize_to(recon, side);
    let cells = Mat::from_vec(tokens, m.config.in_channels, resized.data().to_vec())?;
    let mut base = cells.matmul(&m.weights.input_proj);
    for t in 0..tokens {
        let row = base.row_mut(t);
        for (i, v) in row.iter_mut().enumerate() {
            *v += m.weights.scale_embed.get(k, i);
            *v += m.weights.pos_embed.get(pos_base + t, i);
        }
    }
    // identical across the batch: the class only enters via scale 0 and the
    // cached condition position
    Ok(vec![base; conds.len()])
}

/// A fresh cache holding only the condition token, one stream per class id.
pub fn cond_cache(m: &ModelBundle, conds: &[usize], bytes_per_element: usize) -> Result<KVCacheState> {
    check_conds(m, conds)?;
    let mut cache = KVCacheState::new(
        m.config.depth,
        m.config.width,
        conds.len(),
        bytes_per_element,
    );
    let inputs: Vec<Mat> = conds
        .iter()
        .map(|&c| Mat::from_vec(1, m.config.width, cond_row(m, c)))
        .collect::<Result<_>>()?;
    forward_block(m, &mut cache, &inputs, &[1])?;
    Ok(cache)
}

/// Predicts all tokens of scale `k` in parallel.
///
/// The cache must hold exactly the condition token plus the tokens of scales
/// `0..k`; it is appended with scale `k`'s keys and values. Returns one
/// `(tokens x vocab)` logit matrix per batch element.
pub fn forward_scale(
    m: &ModelBundle,
    cache: &mut KVCacheState,
    inputs: &[Mat],
    k: usize,
) -> Result<Vec<Mat>> {
    let schedule = m.config.schedule();
    if k >= schedule.num_scales() {
        return Err(Error::Range {
            what: "scale index",
            got: k,
            limit: schedule.num_scales() - 1,
        });
    }
    let expected = 1 + schedule.offsets()[k];
    if cache.cached_tokens() != expected {
        return Err(Error::Contract(format!(
            "cache holds {} tokens, scale {k} requires {expected}",
            cache.cached_tokens()
        )));
    }
    if inputs.len() != cache.batch() {
        return Err(Error::Contract(format!(
            "{} input blocks for cache batch {}",
            inputs.len(),
            cache.batch()
        )));
    }
    let tokens = schedule.tokens_at(k);
    for input in inputs {
        if input.rows() != tokens || input.cols() != m.config.width {
            return Err(Error::Shape(format!(
                "scale {k} input must be {tokens}x{}",
                m.config.width
            )));
        }
    }
    let visible = expected + tokens;
    let allowed = vec![visible; tokens];
    let hidden = forward_block(m, cache, inputs, &allowed)?;
    Ok(logits_from_hidden(m, &hidden))
}

/// Populates a fresh cache from a drafted token prefix in a single masked
/// forward pass over all prefix positions (plus the condition token).
///
/// Equivalent, element-wise, to running [`forward_scale`] sequentially over
/// the same prefix with teacher-forced inputs.
pub fn ingest_prefix(
    m: &ModelBundle,
    codebook: &Codebook,
    prefix: &[TokenMap],
    conds: &[usize],
    bytes_per_element: usize,
) -> Result<KVCacheState> {
    check_conds(m, conds)?;
    let schedule = m.config.schedule();
    if prefix.len() > schedule.num_scales() {
        return Err(Error::Range {
            what: "prefix scales",
            got: prefix.len(),
            limit: schedule.num_scales(),
        });
    }
    if prefix.is_empty() {
        return cond_cache(m, conds, bytes_per_element);
    }
    check_codebook(m, codebook)?;
    for (k, map) in prefix.iter().enumerate() {
        if map.side != schedule.side(k) {
            return Err(Error::Contract(format!(
                "prefix map {k} has side {}, schedule expects {}",
                map.side,
                schedule.side(k)
            )));
        }
    }
    let n = prefix.len();
    let total_rows = 1 + schedule.offsets()[n];
    let w = m.config.width;

    // Teacher-forced inputs for every prefix scale, accumulated the same way
    // the decoding loop accumulates them.
    let mut recon = FeatureMap::zeros(schedule.final_side(), m.config.in_channels);
    let mut per_batch: Vec<Vec<f64>> = conds
        .iter()
        .map(|&c| {
            let mut data = Vec::with_capacity(total_rows * w);
            data.extend_from_slice(&cond_row(m, c));
            data
        })
        .collect();
    let mut allowed = Vec::with_capacity(total_rows);
    allowed.push(1); // the condition token sees only itself
    for (k, map) in prefix.iter().enumerate() {
        let inputs = build_scale_input(m, &recon, k, conds)?;
        for (b, input) in inputs.iter().enumerate() {
            per_batch[b].extend_from_slice(input.data());
        }
        let visible = 1 + schedule.offsets()[k + 1];
        allowed.extend(std::iter::repeat_n(visible, schedule.tokens_at(k)));
        recon.add_assign(&upsample(
            &codebook.embed_map(map),
            schedule.final_side(),
        )?);
    }
    let inputs: Vec<Mat> = per_batch
        .into_iter()
        .map(|data| Mat::from_vec(total_rows, w, data))
        .collect::<Result<_>>()?;
    let mut cache = KVCacheState::new(m.config.depth, w, conds.len(), bytes_per_element);
    forward_block(m, &mut cache, &inputs, &allowed)?;
    Ok(cache)
}

fn check_codebook(m: &ModelBundle, codebook: &Codebook) -> Result<()> {
    if codebook.channels() != m.config.in_channels {
        return Err(Error::Contract(format!(
            "codebook has {} channels, model expects {}",
            codebook.channels(),
            m.config.in_channels
        )));
    }
    if codebook.vocab() != m.config.vocab {
        return Err(Error::Contract(format!(
            "codebook vocabulary {} does not match model vocabulary {}",
            codebook.vocab(),
            m.config.vocab
        )));
    }
    Ok(())
}

/// Sequential teacher-forced pass over a full pyramid prefix; returns the
/// per-scale logits (outer index scale, inner index batch) and the resulting
/// cache.
pub fn forward_teacher_forced(
    m: &ModelBundle,
    codebook: &Codebook,
    maps: &[TokenMap],
    conds: &[usize],
    bytes_per_element: usize,
) -> Result<(Vec<Vec<Mat>>, KVCacheState)> {
    check_codebook(m, codebook)?;
    let schedule = m.config.schedule();
    if maps.len() > schedule.num_scales() {
        return Err(Error::Range {
            what: "scales",
            got: maps.len(),
            limit: schedule.num_scales(),
        });
    }
    let mut cache = cond_cache(m, conds, bytes_per_element)?;
    let mut recon = FeatureMap::zeros(schedule.final_side(), m.config.in_channels);
    let mut logits = Vec::with_capacity(maps.len());
    for (k, map) in maps.iter().enumerate() {
        let inputs = build_scale_input(m, &recon, k, conds)?;
        logits.push(forward_scale(m, &mut cache, &inputs, k)?);
        recon.add_assign(&upsample(
            &codebook.embed_map(map),
            schedule.final_side(),
        )?);
    }
    Ok((logits, cache))
}
