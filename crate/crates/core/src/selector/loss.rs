//! Pyramid loss: per-scale weighted binary cross-entropy, averaged over the
//! patches of a scale and summed over scales.

use candle_core::{Tensor, D};
use ndarray::Array2;

use super::ScorePyramid;
use crate::dataset::PatchLabelPyramid;
use crate::error::{bail, Result};

/// Scores are clipped to `[EPS, 1 - EPS]` before taking logs.
pub const SCORE_EPS: f64 = 1e-7;

/// Loss value and its gradient with respect to every score.
#[derive(Clone, Debug)]
pub struct LossWithGrad {
    pub loss: f64,
    pub grad: Vec<Array2<f64>>,
}

/// Evaluates the pyramid loss on positive-class scores.
///
/// Clipped scores have zero gradient.
pub fn pyramid_loss(
    scores: &ScorePyramid,
    labels: &PatchLabelPyramid,
    beta_neg: f64,
) -> Result<LossWithGrad> {
    if scores.levels.len() != labels.levels().len() {
        bail!(
            Shape,
            "{} score scales vs {} label scales",
            scores.levels.len(),
            labels.levels().len()
        );
    }
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.levels.len());
    for (s, y) in scores.levels.iter().zip(labels.levels()) {
        if s.dim() != y.dim() {
            bail!(Shape, "scores {:?} vs labels {:?}", s.dim(), y.dim());
        }
        let n = s.len() as f64;
        let mut g = Array2::<f64>::zeros(s.dim());
        let mut level = 0.0;
        for ((idx, &raw), &label) in s.indexed_iter().zip(y.iter()) {
            let p = raw.clamp(SCORE_EPS, 1.0 - SCORE_EPS);
            let inside = raw > SCORE_EPS && raw < 1.0 - SCORE_EPS;
            if label != 0 {
                level -= p.ln();
                if inside {
                    g[idx] = -1.0 / (p * n);
                }
            } else {
                level -= beta_neg * (1.0 - p).ln();
                if inside {
                    g[idx] = beta_neg / ((1.0 - p) * n);
                }
            }
        }
        loss += level / n;
        grad.push(g);
    }
    Ok(LossWithGrad { loss, grad })
}

/// Differentiable batch form on class logits `[B, h, w, 2]`, labels `[B, h, w]` in {0,1}.
///
/// Uses log-softmax directly; equal to [`pyramid_loss`] wherever the scores
/// are not clipped.
pub fn pyramid_loss_from_logits(
    logits: &[Tensor],
    labels: &[Tensor],
    beta_neg: f64,
) -> Result<Tensor> {
    if logits.len() != labels.len() || logits.is_empty() {
        bail!(Shape, "{} logit scales vs {} label scales", logits.len(), labels.len());
    }
    let mut total: Option<Tensor> = None;
    for (z, y) in logits.iter().zip(labels) {
        let logp = candle_nn::ops::log_softmax(z, D::Minus1)?;
        let log_neg = logp.narrow(3, 0, 1)?.squeeze(3)?;
        let log_pos = logp.narrow(3, 1, 1)?.squeeze(3)?;
        let y = y.to_dtype(z.dtype())?;
        if y.dims() != log_pos.dims() {
            bail!(Shape, "labels {:?} vs scores {:?}", y.dims(), log_pos.dims());
        }
        let pos_term = (&y * &log_pos)?;
        let neg_term = ((1.0 - &y)? * &log_neg)?.affine(beta_neg, 0.0)?;
        let level = (pos_term + neg_term)?.neg()?.mean_all()?;
        total = Some(match total {
            Some(t) => (t + level)?,
            None => level,
        });
    }
    Ok(total.expect("non-empty"))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn single(s: f64, y: u8) -> (ScorePyramid, PatchLabelPyramid) {
        let scores = ScorePyramid {
            levels: vec![array![[s]], array![[s]], array![[s]]],
        };
        let labels = PatchLabelPyramid::from_levels(vec![array![[y]], array![[y]], array![[y]]])
            .unwrap();
        (scores, labels)
    }

    #[test]
    fn single_patch_values() {
        let (s, y) = single(0.5, 1);
        let l = pyramid_loss(&s, &y, 0.01).unwrap().loss;
        assert!((l - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert!((l - 2.07944).abs() < 1e-5);
        let (s, y) = single(0.5, 0);
        let l = pyramid_loss(&s, &y, 0.01).unwrap().loss;
        assert!((l - 0.0207944).abs() < 1e-7);
    }

    #[test]
    fn perfect_prediction_is_near_zero() {
        for y in [0u8, 1] {
            let (s, l) = single(y as f64, y);
            let loss = pyramid_loss(&s, &l, 0.01).unwrap().loss;
            assert!(loss <= 3.0 * -(1.0 - SCORE_EPS).ln() + 1e-15);
        }
    }

    #[test]
    fn shape_mismatch_is_error() {
        let (mut s, y) = single(0.5, 1);
        s.levels[1] = Array2::zeros((2, 2));
        assert!(pyramid_loss(&s, &y, 0.01).is_err());
    }

    fn random_case(rng: &mut ChaCha8Rng) -> (ScorePyramid, PatchLabelPyramid) {
        let fine = Array2::from_shape_fn((4, 4), |_| u8::from(rng.gen_bool(0.3)));
        let mid = crate::dataset::pool_any(&fine, 2).unwrap();
        let coarse = crate::dataset::pool_any(&mid, 1).unwrap();
        let labels = PatchLabelPyramid::from_levels(vec![fine, mid, coarse]).unwrap();
        let scores = ScorePyramid {
            levels: [4, 2, 1]
                .iter()
                .map(|&g| Array2::from_shape_fn((g, g), |_| rng.gen_range(0.02..0.98)))
                .collect(),
        };
        (scores, labels)
    }

    #[test]
    fn analytic_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = 1e-4;
        for _ in 0..20 {
            let (scores, labels) = random_case(&mut rng);
            let beta = rng.gen_range(0.005..0.5);
            let analytic = pyramid_loss(&scores, &labels, beta).unwrap().grad;
            for (lvl, g) in analytic.iter().enumerate() {
                for (idx, &ga) in g.indexed_iter() {
                    let mut plus = scores.clone();
                    plus.levels[lvl][idx] += h;
                    let mut minus = scores.clone();
                    minus.levels[lvl][idx] -= h;
                    let fd = (pyramid_loss(&plus, &labels, beta).unwrap().loss
                        - pyramid_loss(&minus, &labels, beta).unwrap().loss)
                        / (2.0 * h);
                    let rel = (fd - ga).abs() / ga.abs().max(1e-12);
                    assert!(rel <= 1e-3, "level {lvl} {idx:?}: fd {fd} vs {ga}");
                }
            }
        }
    }

    #[test]
    fn logits_form_agrees_with_score_form() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (scores, labels) = random_case(&mut rng);
        // logits (0, log(p/(1-p))) give softmax positive probability p.
        let logits: Vec<Tensor> = scores
            .levels
            .iter()
            .map(|s| {
                let g = s.nrows();
                let v: Vec<f64> = s
                    .iter()
                    .flat_map(|&p| [0.0, (p / (1.0 - p)).ln()])
                    .collect();
                Tensor::from_vec(v, (1, g, g, 2), &Device::Cpu).unwrap()
            })
            .collect();
        let label_t: Vec<Tensor> = labels
            .levels()
            .iter()
            .map(|l| {
                let g = l.nrows();
                let v: Vec<f64> = l.iter().map(|&b| b as f64).collect();
                Tensor::from_vec(v, (1, g, g), &Device::Cpu).unwrap()
            })
            .collect();
        let t = pyramid_loss_from_logits(&logits, &label_t, 0.01)
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let r = pyramid_loss(&scores, &labels, 0.01).unwrap().loss;
        assert!((t - r).abs() < 1e-10);
    }

    #[test]
    fn smaller_beta_shrinks_only_negative_terms() {
        let (s, y) = single(0.3, 0);
        let hi = pyramid_loss(&s, &y, 0.1).unwrap().loss;
        let lo = pyramid_loss(&s, &y, 0.01).unwrap().loss;
        assert!(lo < hi);
        let (s, y) = single(0.3, 1);
        assert_eq!(
            pyramid_loss(&s, &y, 0.1).unwrap().loss,
            pyramid_loss(&s, &y, 0.01).unwrap().loss
        );
    }
}
