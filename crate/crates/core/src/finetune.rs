//! Loss kernels for specializing the drafter and refiner to their own scale
//! ranges: scale-restricted cross-entropy for the drafter and a dynamically
//! weighted distillation loss for the refiner, both with closed-form logit
//! gradients.
//!
//! Reductions are mean-per-token inside a scale (scales differ in token count
//! by orders of magnitude) and a plain sum across scales. `per_scale` entries
//! are the weighted contributions, so `total` is exactly their sum.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pyramid::TokenPyramid;
use crate::tensor::Mat;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub total: f64,
    /// Weighted contribution of each scale; sums to `total`.
    pub per_scale: Vec<f64>,
    /// Weight applied to draft scales (1 for the drafter loss, the epoch
    /// lambda for the refiner loss).
    pub lambda_used: f64,
}

fn log_softmax_row(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_denom = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    row.iter().map(|&v| v - log_denom).collect()
}

fn softmax_row(row: &[f64]) -> Vec<f64> {
    log_softmax_row(row).iter().map(|&v| v.exp()).collect()
}

fn check_scale_shape(logits: &Mat, tokens: usize, vocab: usize, k: usize) -> Result<()> {
    if logits.rows() != tokens || logits.cols() != vocab {
        return Err(Error::Shape(format!(
            "scale {k}: logits are {}x{}, expected {tokens}x{vocab}",
            logits.rows(),
            logits.cols()
        )));
    }
    Ok(())
}

/// Scale-restricted cross-entropy: mean-per-token CE summed over the first
/// `n` scales; scales past `n` contribute exactly zero.
pub fn drafter_loss(logits: &[Mat], targets: &TokenPyramid, n: usize) -> Result<LossReport> {
    let k_scales = targets.maps.len();
    if n > k_scales {
        return Err(Error::Range {
            what: "drafting steps",
            got: n,
            limit: k_scales,
        });
    }
    if logits.len() < n {
        return Err(Error::Contract(format!(
            "logits cover {} scales, drafting needs {n}",
            logits.len()
        )));
    }
    let mut per_scale = vec![0.0; k_scales];
    for (k, item) in per_scale.iter_mut().enumerate().take(n) {
        let map = &targets.maps[k];
        check_scale_shape(&logits[k], map.len(), targets.vocab_size, k)?;
        let mut ce = 0.0;
        for (t, &target) in map.tokens.iter().enumerate() {
            ce -= log_softmax_row(logits[k].row(t))[target as usize];
        }
        *item = ce / map.len() as f64;
    }
    Ok(LossReport {
        total: per_scale.iter().sum(),
        per_scale,
        lambda_used: 1.0,
    })
}

/// Linear draft-scale weight decay over fine-tuning: `1 - ep / total_ep`.
pub fn lambda_schedule(ep: usize, total_ep: usize) -> Result<f64> {
    if total_ep == 0 {
        return Err(Error::Range {
            what: "epoch budget",
            got: 0,
            limit: usize::MAX,
        });
    }
    if ep > total_ep {
        return Err(Error::Range {
            what: "epoch",
            got: ep,
            limit: total_ep,
        });
    }
    Ok(1.0 - ep as f64 / total_ep as f64)
}

/// Per-token mean KL over one scale: `KL(softmax(student) || softmax(teacher))`.
fn scale_kl(student: &Mat, teacher: &Mat) -> f64 {
    let mut kl = 0.0;
    for t in 0..student.rows() {
        let p = softmax_row(student.row(t));
        let lp = log_softmax_row(student.row(t));
        let lq = log_softmax_row(teacher.row(t));
        for i in 0..p.len() {
            kl += p[i] * (lp[i] - lq[i]);
        }
    }
    kl / student.rows() as f64
}

/// Dynamically weighted distillation: per-token mean
/// `KL(student || teacher)` with weight `lambda(ep)` on draft scales
/// (`k < n`) and 1 on refining scales.
pub fn refiner_loss(
    student_logits: &[Mat],
    teacher_logits: &[Mat],
    ep: usize,
    total_ep: usize,
    n: usize,
) -> Result<LossReport> {
    let k_scales = student_logits.len();
    if teacher_logits.len() != k_scales {
        return Err(Error::Shape(format!(
            "student covers {k_scales} scales, teacher covers {}",
            teacher_logits.len()
        )));
    }
    if n > k_scales {
        return Err(Error::Range {
            what: "drafting steps",
            got: n,
            limit: k_scales,
        });
    }
    let lambda = lambda_schedule(ep, total_ep)?;
    let mut per_scale = Vec::with_capacity(k_scales);
    for k in 0..k_scales {
        let (s, t) = (&student_logits[k], &teacher_logits[k]);
        check_scale_shape(t, s.rows(), s.cols(), k)?;
        let weight = if k < n { lambda } else { 1.0 };
        per_scale.push(if weight == 0.0 {
            0.0
        } else {
            weight * scale_kl(s, t)
        });
    }
    Ok(LossReport {
        total: per_scale.iter().sum(),
        per_scale,
        lambda_used: lambda,
    })
}

/// Closed-form gradient of [`drafter_loss`] with respect to the logits:
/// `(softmax(logits) - onehot(target)) / tokens_in_scale` on draft scales,
/// zero elsewhere.
pub fn drafter_loss_grad(logits: &[Mat], targets: &TokenPyramid, n: usize) -> Result<Vec<Mat>> {
    // validates shapes as a side effect
    drafter_loss(logits, targets, n)?;
    let mut grads = Vec::with_capacity(logits.len());
    for (k, l) in logits.iter().enumerate() {
        let mut g = Mat::zeros(l.rows(), l.cols());
        if k < n {
            let inv = 1.0 / l.rows() as f64;
            for t in 0..l.rows() {
                let p = softmax_row(l.row(t));
                let target = targets.maps[k].tokens[t] as usize;
                let out = g.row_mut(t);
                for (i, &pi) in p.iter().enumerate() {
                    out[i] = (pi - f64::from(i == target)) * inv;
                }
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Closed-form gradient of [`refiner_loss`] with respect to the student
/// logits.
///
/// For one token with `p = softmax(student)`, `q = softmax(teacher)` and
/// `KL = sum_i p_i (ln p_i - ln q_i)`, using `dp_i/dz_j = p_i (d_ij - p_j)`:
///
/// ```text
/// dKL/dz_j = p_j * ((ln p_j - ln q_j) - KL)
/// ```
///
/// scaled by the scale weight and the per-token mean factor. Zero-weight
/// scales get an identically zero gradient.
pub fn refiner_loss_grad(
    student_logits: &[Mat],
    teacher_logits: &[Mat],
    ep: usize,
    total_ep: usize,
    n: usize,
) -> Result<Vec<Mat>> {
    refiner_loss(student_logits, teacher_logits, ep, total_ep, n)?;
    let lambda = lambda_schedule(ep, total_ep)?;
    let mut grads = Vec::with_capacity(student_logits.len());
    for (k, s) in student_logits.iter().enumerate() {
        let weight = if k < n { lambda } else { 1.0 };
        let mut g = Mat::zeros(s.rows(), s.cols());
        if weight != 0.0 {
            let scale = weight / s.rows() as f64;
            for t in 0..s.rows() {
                let lp = log_softmax_row(s.row(t));
                let lq = log_softmax_row(teacher_logits[k].row(t));
                let p: Vec<f64> = lp.iter().map(|&v| v.exp()).collect();
                let kl: f64 = p.iter().zip(&lp).zip(&lq).map(|((pi, a), b)| pi * (a - b)).sum();
                let out = g.row_mut(t);
                for i in 0..p.len() {
                    out[i] = p[i] * ((lp[i] - lq[i]) - kl) * scale;
                }
            }
        }
        grads.push(g);
    }
    Ok(grads)
}

/// Which loss a gradient request refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Drafter,
    Refiner,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pyramid::TokenMap;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_targets() -> TokenPyramid {
        TokenPyramid::new(
            4,
            vec![
                TokenMap::new(1, vec![2]).unwrap(),
                TokenMap::new(2, vec![0, 1, 2, 3]).unwrap(),
            ],
        )
    }

    fn random_logits(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Mat {
        Mat::from_vec(
            rows,
            cols,
            (0..rows * cols).map(|_| rng.random_range(-2.0..2.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn one_hot_logits_give_near_zero_loss() {
        let targets = toy_targets();
        let mut l0 = Mat::zeros(1, 4);
        l0.set(0, 2, 1e6);
        let mut l1 = Mat::zeros(4, 4);
        for (t, &tok) in targets.maps[1].tokens.iter().enumerate() {
            l1.set(t, tok as usize, 1e6);
        }
        let report = drafter_loss(&[l0, l1], &targets, 2).unwrap();
        assert!(report.total.abs() < 1e-9);
    }

    #[test]
    fn uniform_logits_cost_ln_v() {
        let targets = toy_targets();
        let report =
            drafter_loss(&[Mat::zeros(1, 4), Mat::zeros(4, 4)], &targets, 2).unwrap();
        let ln_v = 4.0f64.ln();
        for k in 0..2 {
            assert!((report.per_scale[k] - ln_v).abs() < 1e-12);
        }
        assert!((report.total - 2.0 * ln_v).abs() < 1e-12);
    }

    #[test]
    fn zero_drafting_steps_zero_loss() {
        let targets = toy_targets();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = vec![random_logits(1, 4, &mut rng), random_logits(4, 4, &mut rng)];
        let report = drafter_loss(&logits, &targets, 0).unwrap();
        assert_eq!(report.total, 0.0);
    }

    #[test]
    fn lambda_endpoints_and_midpoint() {
        assert_eq!(lambda_schedule(0, 10).unwrap(), 1.0);
        assert_eq!(lambda_schedule(10, 10).unwrap(), 0.0);
        assert_eq!(lambda_schedule(5, 10).unwrap(), 0.5);
        assert!(lambda_schedule(11, 10).is_err());
        assert!(lambda_schedule(0, 0).is_err());
    }

    #[test]
    fn matched_distributions_have_zero_kl() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let logits = vec![random_logits(1, 4, &mut rng), random_logits(4, 4, &mut rng)];
        for ep in [0, 3, 7] {
            let report = refiner_loss(&logits, &logits, ep, 7, 1).unwrap();
            assert!(report.total.abs() < 1e-12);
        }
    }

    #[test]
    fn final_epoch_ignores_draft_scales() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let student = vec![random_logits(1, 4, &mut rng), random_logits(4, 4, &mut rng)];
        let teacher = vec![random_logits(1, 4, &mut rng), random_logits(4, 4, &mut rng)];
        let report = refiner_loss(&student, &teacher, 5, 5, 1).unwrap();
        assert_eq!(report.per_scale[0], 0.0);
        assert!(report.per_scale[1] > 0.0);
        assert_eq!(report.lambda_used, 0.0);
    }

    #[test]
    fn hand_computed_two_scale_kl() {
        // scale 0: student (0, ln2, 0) vs teacher (0, 0, 0);
        // p = (1/(2+2), 2/4, 1/4) = (0.25, 0.5, 0.25), q = (1/3, 1/3, 1/3)
        let student = vec![
            Mat::from_vec(1, 3, vec![0.0, 2f64.ln(), 0.0]).unwrap(),
            Mat::from_vec(1, 3, vec![0.0, 0.0, 0.0]).unwrap(),
        ];
        let teacher = vec![
            Mat::from_vec(1, 3, vec![0.0, 0.0, 0.0]).unwrap(),
            Mat::from_vec(1, 3, vec![0.0, 0.0, 0.0]).unwrap(),
        ];
        let p = [0.25f64, 0.5, 0.25];
        let hand_kl: f64 = p.iter().map(|&pi| pi * (pi / (1.0 / 3.0)).ln()).sum();
        // ep 1 of 4 => lambda 0.75 on the single draft scale
        let report = refiner_loss(&student, &teacher, 1, 4, 1).unwrap();
        assert!((report.per_scale[0] - 0.75 * hand_kl).abs() < 1e-12);
        assert!((report.per_scale[1] - 0.0).abs() < 1e-12);
        assert!((report.total - 0.75 * hand_kl).abs() < 1e-12);
    }

    #[test]
    fn drafter_uniform_gradient_is_softmax_minus_onehot() {
        let targets = TokenPyramid::new(4, vec![TokenMap::new(1, vec![2]).unwrap()]);
        let grads = drafter_loss_grad(&[Mat::zeros(1, 4)], &targets, 1).unwrap();
        let expect = [0.25, 0.25, -0.75, 0.25];
        for (g, e) in grads[0].row(0).iter().zip(&expect) {
            assert!((g - e).abs() < 1e-12);
        }
    }

    #[test]
    fn matched_refiner_gradient_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let logits = vec![random_logits(3, 5, &mut rng)];
        let grads = refiner_loss_grad(&logits, &logits, 1, 4, 0).unwrap();
        assert!(grads[0].data().iter().all(|&g| g.abs() < 1e-12));
    }

    #[test]
    fn perturbing_zero_weight_scale_changes_nothing() {
        let targets = toy_targets();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut logits = vec![random_logits(1, 4, &mut rng), random_logits(4, 4, &mut rng)];
        let base = drafter_loss(&logits, &targets, 1).unwrap();
        let base_grad = drafter_loss_grad(&logits, &targets, 1).unwrap();
        logits[1].set(2, 2, 55.0);
        let bumped = drafter_loss(&logits, &targets, 1).unwrap();
        let bumped_grad = drafter_loss_grad(&logits, &targets, 1).unwrap();
        assert_eq!(base.total, bumped.total);
        assert_eq!(base_grad, bumped_grad);
    }

    #[test]
    fn lambda_monotone_when_only_draft_scales_differ() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let student = vec![random_logits(1, 4, &mut rng), random_logits(4, 4, &mut rng)];
        // teacher matches on the refining scale so only draft terms remain
        let teacher = vec![random_logits(1, 4, &mut rng), student[1].clone()];
        let mut prev = f64::INFINITY;
        for ep in 0..=6 {
            let total = refiner_loss(&student, &teacher, ep, 6, 1).unwrap().total;
            assert!(total <= prev + 1e-15);
            prev = total;
        }
    }

    /// Central finite differences against the analytic gradients.
    fn finite_difference_check(seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let targets = toy_targets();
        let shapes = [(1usize, 4usize), (4, 4)];
        let student: Vec<Mat> = shapes
            .iter()
            .map(|&(r, c)| random_logits(r, c, &mut rng))
            .collect();
        let teacher: Vec<Mat> = shapes
            .iter()
            .map(|&(r, c)| random_logits(r, c, &mut rng))
            .collect();
        let n = (seed % 3) as usize; // 0, 1 or 2 drafting steps
        let (ep, total_ep) = (1 + (seed as usize % 3), 4);
        let h = 1e-5;

        let tol = |a: f64, b: f64| (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-6);

        let drafter_grads = drafter_loss_grad(&student, &targets, n).unwrap();
        let refiner_grads =
            refiner_loss_grad(&student, &teacher, ep, total_ep, n).unwrap();
        for k in 0..2 {
            for idx in 0..student[k].data().len() {
                let mut plus = student.clone();
                plus[k].data_mut()[idx] += h;
                let mut minus = student.clone();
                minus[k].data_mut()[idx] -= h;

                let fd_drafter = (drafter_loss(&plus, &targets, n).unwrap().total
                    - drafter_loss(&minus, &targets, n).unwrap().total)
                    / (2.0 * h);
                assert!(
                    tol(drafter_grads[k].data()[idx], fd_drafter),
                    "drafter scale {k} idx {idx}: {} vs {}",
                    drafter_grads[k].data()[idx],
                    fd_drafter
                );

                let fd_refiner = (refiner_loss(&plus, &teacher, ep, total_ep, n)
                    .unwrap()
                    .total
                    - refiner_loss(&minus, &teacher, ep, total_ep, n).unwrap().total)
                    / (2.0 * h);
                assert!(
                    tol(refiner_grads[k].data()[idx], fd_refiner),
                    "refiner scale {k} idx {idx}: {} vs {}",
                    refiner_grads[k].data()[idx],
                    fd_refiner
                );
            }
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for seed in 0..10 {
            finite_difference_check(seed);
        }
    }
}
