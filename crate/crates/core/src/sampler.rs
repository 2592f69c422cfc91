//! Token sampling: temperature scaling, top-k then top-p truncation, and a
//! greedy bypass with lowest-index tie-breaks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::plan::SamplerConfig;
use crate::tensor::Mat;

/// Argmax with the lowest index winning ties.
pub fn argmax_row(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// The renormalized `(token, probability)` support the sampler draws from for
/// one logit row at scale `k`: logits divided by the scale's temperature, the
/// `top_k` largest kept, then the smallest prefix reaching cumulative
/// probability `top_p`.
///
/// Ties order by probability descending then index ascending, so the support
/// is fully deterministic. A `top_k` beyond the vocabulary is clamped with a
/// warning.
pub fn truncated_distribution(
    logits_row: &[f64],
    cfg: &SamplerConfig,
    k: usize,
) -> Result<Vec<(usize, f64)>> {
    if logits_row.iter().any(|v| !v.is_finite()) {
        return Err(Error::Contract("non-finite logits".into()));
    }
    let temp = *cfg.temp_schedule.get(k).ok_or(Error::Range {
        what: "scale index",
        got: k,
        limit: cfg.temp_schedule.len(),
    })?;
    let vocab = logits_row.len();
    let top_k = if cfg.top_k > vocab {
        log::warn!("top_k {} exceeds vocabulary {vocab}; clamping", cfg.top_k);
        vocab
    } else {
        cfg.top_k
    };

    // stable softmax of logits / temp
    let scaled: Vec<f64> = logits_row.iter().map(|&v| v / temp).collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|&v| (v - max).exp()).collect();
    let denom: f64 = exps.iter().sum();

    let mut order: Vec<usize> = (0..vocab).collect();
    order.sort_by(|&a, &b| exps[b].partial_cmp(&exps[a]).unwrap().then(a.cmp(&b)));
    order.truncate(top_k);

    // probabilities renormalized over the top-k support
    let k_mass: f64 = order.iter().map(|&i| exps[i]).sum::<f64>() / denom;
    let mut kept = Vec::with_capacity(order.len());
    let mut cum = 0.0;
    for &i in &order {
        let p = exps[i] / denom / k_mass;
        kept.push((i, p));
        cum += p;
        if cum >= cfg.top_p - 1e-12 {
            break;
        }
    }
    let mass: f64 = kept.iter().map(|(_, p)| p).sum();
    for (_, p) in kept.iter_mut() {
        *p /= mass;
    }
    Ok(kept)
}

/// Samples one token per logit row.
///
/// With `greedy` set this is a pure argmax over the raw logits; otherwise one
/// uniform draw per row walks the truncated distribution's CDF.
pub fn sample_tokens(
    logits: &Mat,
    cfg: &SamplerConfig,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<u32>> {
    let mut out = Vec::with_capacity(logits.rows());
    for r in 0..logits.rows() {
        let row = logits.row(r);
        if cfg.greedy {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Contract("non-finite logits".into()));
            }
            out.push(argmax_row(row) as u32);
            continue;
        }
        let support = truncated_distribution(row, cfg, k)?;
        let u: f64 = rng.random();
        let mut cum = 0.0;
        let mut chosen = support.last().unwrap().0;
        for &(i, p) in &support {
            cum += p;
            if u < cum {
                chosen = i;
                break;
            }
        }
        out.push(chosen as u32);
    }
    Ok(out)
}
