//! Pseudo-label-assisted training objective.
//!
//! The CNN branch is trained with plain cross-entropy against the coarse
//! labels. Its per-pixel argmax is intersected with those labels to form a
//! mask, and the fused output is trained only where the mask is set.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{argmax_labels, LabelGrid, MaskGrid, VOID};
use crate::nn::layers::{log_softmax, to_f64_vec};

/// A scalar loss and the number of pixels it averages over.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub pixels: usize,
}

impl LossValue {
    /// No pixel contributed; the value is defined as zero.
    pub fn is_empty(&self) -> bool {
        self.pixels == 0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub ce: f64,
    pub mce: f64,
    pub total: f64,
    pub mask_coverage: f64,
    /// The masked term had no selected pixel.
    pub empty_mask: bool,
}

/// Differentiable loss plus its report.
pub struct Objective {
    pub loss: Tensor,
    pub report: LossReport,
}

/// Mean negative log-likelihood of `targets` under `logits` over pixels with
/// nonzero `weights`. Returns the scalar tensor and the weighted pixel count.
fn weighted_nll(logits: &Tensor, targets: &Tensor, weights: &Tensor) -> Result<(Tensor, usize)> {
    let logp = log_softmax(logits, 1)?;
    let picked = logp.gather(&targets.unsqueeze(1)?, 1)?.squeeze(1)?;
    let count = to_f64_vec(&weights.sum_all()?)?[0].round() as usize;
    let summed = (picked * weights)?.sum_all()?;
    let loss = if count == 0 {
        (summed * 0.0)?
    } else {
        (summed * (-1.0 / count as f64))?
    };
    Ok((loss, count))
}

fn check_batch(logits: &Tensor, labels: &[LabelGrid]) -> Result<(usize, usize, usize, usize)> {
    let (b, l, h, w) = logits.dims4()?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} label grids for a batch of {b}", labels.len())));
    }
    for y in labels {
        if y.dims() != (h, w) {
            return Err(Error::Shape(format!("label {:?} vs logits {h}x{w}", y.dims())));
        }
        if let Some(&bad) = y.as_slice().iter().find(|&&v| v != VOID && v as usize >= l) {
            return Err(Error::Shape(format!("label value {bad} outside {l} classes")));
        }
    }
    Ok((b, l, h, w))
}

fn targets(labels: &[LabelGrid], logits: &Tensor) -> Result<Tensor> {
    let t = labels
        .iter()
        .map(|y| y.to_index_tensor(0, logits.device()))
        .collect::<Result<Vec<_>>>()?;
    Ok(Tensor::stack(&t, 0)?)
}

fn weights(labels: &[LabelGrid], masks: Option<&[MaskGrid]>, logits: &Tensor) -> Result<Tensor> {
    let (h, w) = labels[0].dims();
    let mut data = Vec::with_capacity(labels.len() * h * w);
    for (i, y) in labels.iter().enumerate() {
        let m = masks.map(|m| m[i].as_slice());
        for (p, &v) in y.as_slice().iter().enumerate() {
            let keep = v != VOID && m.is_none_or(|m| m[p]);
            data.push(if keep { 1f32 } else { 0.0 });
        }
    }
    Ok(Tensor::from_vec(data, (labels.len(), h, w), logits.device())?.to_dtype(logits.dtype())?)
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Cross-entropy over a batch of `(B, L, H, W)` logits, void pixels excluded.
pub fn ce_batch(labels: &[LabelGrid], logits: &Tensor) -> Result<(Tensor, usize)> {
    check_batch(logits, labels)?;
    weighted_nll(logits, &targets(labels, logits)?, &weights(labels, None, logits)?)
}

/// Masked cross-entropy over a batch, normalized by the number of selected pixels.
pub fn mce_batch(labels: &[LabelGrid], masks: &[MaskGrid], logits: &Tensor) -> Result<(Tensor, usize)> {
    let (_, _, h, w) = check_batch(logits, labels)?;
    if masks.len() != labels.len() || masks.iter().any(|m| m.dims() != (h, w)) {
        return Err(Error::Shape("masks disagree with the batch".into()));
    }
    weighted_nll(logits, &targets(labels, logits)?, &weights(labels, Some(masks), logits)?)
}

fn single(logits: &Tensor) -> Result<Tensor> {
    let (l, h, w) = logits.dims3()?;
    let values = to_f64_vec(logits)?;
    if values.iter().any(|v| v.is_nan()) {
        return Err(Error::NonFinite("logits"));
    }
    Ok(logits.reshape((1, l, h, w))?)
}

/// Cross-entropy of `(L, H, W)` logits against `y`.
pub fn ce_loss(y: &LabelGrid, logits: &Tensor) -> Result<LossValue> {
    let (loss, pixels) = ce_batch(std::slice::from_ref(y), &single(logits)?)?;
    Ok(LossValue {
        value: scalar(&loss)?,
        pixels,
    })
}

/// Masked cross-entropy of `(L, H, W)` logits against `y` where `m` is set.
pub fn mce_loss(y: &LabelGrid, m: &MaskGrid, logits: &Tensor) -> Result<LossValue> {
    let (loss, pixels) = mce_batch(std::slice::from_ref(y), std::slice::from_ref(m), &single(logits)?)?;
    Ok(LossValue {
        value: scalar(&loss)?,
        pixels,
    })
}

/// Pixels where the prediction agrees with a non-void label.
pub fn intersect_mask(y: &LabelGrid, pred: &LabelGrid) -> Result<MaskGrid> {
    if y.dims() != pred.dims() {
        return Err(Error::Shape(format!("label {:?} vs prediction {:?}", y.dims(), pred.dims())));
    }
    let data = y
        .as_slice()
        .iter()
        .zip(pred.as_slice())
        .map(|(&a, &b)| a != VOID && a == b)
        .collect();
    let (h, w) = y.dims();
    MaskGrid::from_vec(h, w, data)
}

/// Full objective on a batch: CE on the primal logits plus masked CE on the
/// fused logits, with the mask rebuilt from the current primal argmax.
pub fn plat_objective(labels: &[LabelGrid], primal: &Tensor, fused: &Tensor) -> Result<Objective> {
    if primal.dims() != fused.dims() {
        return Err(Error::Shape(format!("primal {:?} vs fused {:?}", primal.dims(), fused.dims())));
    }
    let (ce, supervised) = ce_batch(labels, primal)?;
    let preds = argmax_labels(&primal.detach())?;
    let masks = labels
        .iter()
        .zip(&preds)
        .map(|(y, p)| intersect_mask(y, p))
        .collect::<Result<Vec<_>>>()?;
    let (mce, selected) = mce_batch(labels, &masks, fused)?;
    let loss = (&ce + &mce)?;
    let (ce_v, mce_v) = (scalar(&ce)?, scalar(&mce)?);
    Ok(Objective {
        report: LossReport {
            ce: ce_v,
            mce: mce_v,
            total: ce_v + mce_v,
            mask_coverage: if supervised == 0 { 0.0 } else { selected as f64 / supervised as f64 },
            empty_mask: selected == 0,
        },
        loss,
    })
}

/// Plain cross-entropy objective used by the ablations without a mask.
pub fn ce_objective(labels: &[LabelGrid], logits: &Tensor) -> Result<Objective> {
    let (loss, supervised) = ce_batch(labels, logits)?;
    let v = scalar(&loss)?;
    Ok(Objective {
        report: LossReport {
            ce: v,
            mce: 0.0,
            total: v,
            mask_coverage: if supervised == 0 { 0.0 } else { 1.0 },
            empty_mask: false,
        },
        loss,
    })
}

/// [`plat_objective`] on a single `(L, H, W)` pair.
pub fn total_loss(y: &LabelGrid, logits1: &Tensor, logits2: &Tensor) -> Result<LossReport> {
    let obj = plat_objective(std::slice::from_ref(y), &single(logits1)?, &single(logits2)?)?;
    if !obj.report.total.is_finite() {
        return Err(Error::NonFinite("loss"));
    }
    Ok(obj.report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn t3(v: Vec<f64>, l: usize, h: usize, w: usize) -> Tensor {
        Tensor::from_vec(v, (l, h, w), &Device::Cpu).unwrap()
    }

    /// log p_c at one pixel, computed directly from the definition.
    fn oracle_logp(logits: &[f64], l: usize, plane: usize, p: usize, c: usize) -> f64 {
        let z: Vec<f64> = (0..l).map(|k| logits[k * plane + p]).collect();
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s: f64 = z.iter().map(|v| (v - m).exp()).sum();
        z[c] - m - s.ln()
    }

    fn oracle_masked(y: &[u8], m: &[bool], logits: &[f64], l: usize) -> f64 {
        let plane = y.len();
        let mut acc = 0.0;
        let mut n = 0usize;
        for p in 0..plane {
            if y[p] != VOID && m[p] {
                acc -= oracle_logp(logits, l, plane, p, y[p] as usize);
                n += 1;
            }
        }
        if n == 0 {
            0.0
        } else {
            acc / n as f64
        }
    }

    fn random_case(rng: &mut ChaCha8Rng, l: usize, h: usize, w: usize) -> (LabelGrid, Vec<f64>) {
        let y: Vec<u8> = (0..h * w).map(|_| rng.random_range(0..l as u8)).collect();
        let z: Vec<f64> = (0..l * h * w).map(|_| rng.random_range(-3.0..3.0)).collect();
        (LabelGrid::from_vec(h, w, y).unwrap(), z)
    }

    #[test]
    fn uniform_logits_give_ln_l() {
        let y = LabelGrid::from_rows(&[[0, 1, 2], [3, 0, 1]]).unwrap();
        let ce = ce_loss(&y, &t3(vec![0.0; 24], 4, 2, 3)).unwrap();
        assert_abs_diff_eq!(ce.value, 4f64.ln(), epsilon = 1e-6);
        assert_abs_diff_eq!(ce.value, 1.3863, epsilon = 1e-4);
    }

    #[test]
    fn confident_logits_give_near_zero() {
        let y = LabelGrid::from_rows(&[[1, 0], [0, 1]]).unwrap();
        let mut z = vec![0.0; 8];
        for p in 0..4 {
            z[y.as_slice()[p] as usize * 4 + p] = 40.0;
        }
        assert!(ce_loss(&y, &t3(z, 2, 2, 2)).unwrap().value < 1e-12);
    }

    #[test]
    fn random_ce_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (y, z) = random_case(&mut rng, 3, 2, 2);
        let ce = ce_loss(&y, &t3(z.clone(), 3, 2, 2)).unwrap();
        let all = vec![true; 4];
        assert_abs_diff_eq!(ce.value, oracle_masked(y.as_slice(), &all, &z, 3), epsilon = 1e-6);
    }

    #[test]
    fn void_pixels_are_excluded() {
        let y = LabelGrid::from_rows(&[[0, VOID], [VOID, VOID]]).unwrap();
        let z = vec![2.0, 9.0, -1.0, 0.0, 0.0, 0.0, 4.0, 3.0];
        let ce = ce_loss(&y, &t3(z.clone(), 2, 2, 2)).unwrap();
        assert_eq!(ce.pixels, 1);
        assert_abs_diff_eq!(ce.value, -oracle_logp(&z, 2, 4, 0, 0), epsilon = 1e-12);

        let all_void = LabelGrid::filled(2, 2, VOID);
        let ce = ce_loss(&all_void, &t3(z, 2, 2, 2)).unwrap();
        assert!(ce.is_empty());
        assert_eq!(ce.value, 0.0);
    }

    #[test]
    fn nan_logits_are_rejected() {
        let y = LabelGrid::filled(1, 2, 0);
        let z = t3(vec![0.0, f64::NAN, 1.0, 1.0], 2, 1, 2);
        assert!(matches!(ce_loss(&y, &z), Err(Error::NonFinite(_))));
        assert!(matches!(mce_loss(&y, &MaskGrid::filled(1, 2, false), &z), Err(Error::NonFinite(_))));
    }

    #[test]
    fn mask_examples() {
        let y = LabelGrid::from_rows(&[[1, 2], [3, 1]]).unwrap();
        let p = LabelGrid::from_rows(&[[1, 1], [3, 2]]).unwrap();
        let m = intersect_mask(&y, &p).unwrap();
        assert_eq!(m.as_slice(), &[true, false, true, false]);
        assert_eq!(intersect_mask(&y, &y).unwrap().count_ones(), 4);
        let q = LabelGrid::from_rows(&[[0, 0], [0, 0]]).unwrap();
        assert_eq!(intersect_mask(&y, &q).unwrap().count_ones(), 0);
        let v = LabelGrid::filled(2, 2, VOID);
        assert_eq!(intersect_mask(&v, &v).unwrap().count_ones(), 0);
    }

    #[test]
    fn empty_mask_is_zero_and_flagged() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (y, z) = random_case(&mut rng, 3, 2, 2);
        let v = mce_loss(&y, &MaskGrid::filled(2, 2, false), &t3(z, 3, 2, 2)).unwrap();
        assert!(v.is_empty());
        assert_eq!(v.value, 0.0);
    }

    #[test]
    fn mixed_mask_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let (y, z) = random_case(&mut rng, 3, 2, 2);
        let m = MaskGrid::from_vec(2, 2, vec![true, false, false, true]).unwrap();
        let v = mce_loss(&y, &m, &t3(z.clone(), 3, 2, 2)).unwrap();
        assert_eq!(v.pixels, 2);
        assert_abs_diff_eq!(v.value, oracle_masked(y.as_slice(), m.as_slice(), &z, 3), epsilon = 1e-6);
    }

    #[test]
    fn total_composes_parts() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let (y, z1) = random_case(&mut rng, 3, 3, 3);
        let (_, z2) = random_case(&mut rng, 3, 3, 3);
        let r = total_loss(&y, &t3(z1.clone(), 3, 3, 3), &t3(z2.clone(), 3, 3, 3)).unwrap();
        let pred: Vec<u8> = (0..9)
            .map(|p| {
                let mut best = 0;
                for c in 1..3 {
                    if z1[c * 9 + p] > z1[best * 9 + p] {
                        best = c;
                    }
                }
                best as u8
            })
            .collect();
        let m: Vec<bool> = y.as_slice().iter().zip(&pred).map(|(a, b)| a == b).collect();
        assert_abs_diff_eq!(r.ce, oracle_masked(y.as_slice(), &[true; 9], &z1, 3), epsilon = 1e-6);
        assert_abs_diff_eq!(r.mce, oracle_masked(y.as_slice(), &m, &z2, 3), epsilon = 1e-6);
        assert_eq!(r.total, r.ce + r.mce);
        assert_abs_diff_eq!(r.mask_coverage, m.iter().filter(|&&b| b).count() as f64 / 9.0, epsilon = 1e-12);
    }

    #[test]
    fn perfect_primal_uniform_fused() {
        let y = LabelGrid::from_rows(&[[0, 1], [2, 3]]).unwrap();
        let mut z1 = vec![0.0; 16];
        for p in 0..4 {
            z1[y.as_slice()[p] as usize * 4 + p] = 50.0;
        }
        let r = total_loss(&y, &t3(z1.clone(), 4, 2, 2), &t3(vec![0.0; 16], 4, 2, 2)).unwrap();
        assert_abs_diff_eq!(r.total, 4f64.ln(), epsilon = 1e-6);
        assert_eq!(r.mask_coverage, 1.0);
        let r = total_loss(&y, &t3(z1.clone(), 4, 2, 2), &t3(z1, 4, 2, 2)).unwrap();
        assert!(r.total < 1e-12);
    }

    #[test]
    fn masked_out_pixels_get_no_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (y, z) = random_case(&mut rng, 3, 2, 3);
        let m = MaskGrid::from_vec(2, 3, vec![true, false, true, false, false, true]).unwrap();
        let var = Var::from_tensor(&Tensor::from_vec(z, (1, 3, 2, 3), &Device::Cpu).unwrap()).unwrap();
        let (loss, _) = mce_batch(std::slice::from_ref(&y), std::slice::from_ref(&m), var.as_tensor()).unwrap();
        let g = to_f64_vec(loss.backward().unwrap().get(var.as_tensor()).unwrap()).unwrap();
        for c in 0..3 {
            for p in 0..6 {
                if !m.as_slice()[p] {
                    assert_eq!(g[c * 6 + p], 0.0);
                }
            }
        }
    }
}
