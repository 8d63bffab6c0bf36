//! Whole-tile inference by overlapping windows with logit averaging.

use candle_core::{DType, Tensor};

use crate::dataset::{Manifest, Split, Tile};
use crate::error::{Error, Result};
use crate::grid::{argmax_labels, ImagePatch, LabelGrid};
use crate::metrics::{evaluate_many, EvalReport};
use crate::nn::{Mode, Paraformer};

/// Window origins along one axis of length `n`: stride `patch - patch/4`,
/// with the last window flush against the far edge.
pub fn window_starts(n: usize, patch: usize) -> Vec<usize> {
    if n <= patch {
        return vec![0];
    }
    let step = (patch - patch / 4).max(1);
    let mut starts: Vec<usize> = (0..).map(|i| i * step).take_while(|&s| s + patch < n).collect();
    starts.push(n - patch);
    starts
}

/// Averaged `(L, H, W)` logits for a whole image.
pub fn stitched_logits(model: &Paraformer, image: &ImagePatch, patch: usize) -> Result<Tensor> {
    let mult = model.size_multiple();
    if patch == 0 || patch % mult != 0 {
        return Err(Error::Config(format!("window {patch} is not a multiple of {mult}")));
    }
    let (h, w) = image.dims();
    let (ph, pw) = (h.max(patch), w.max(patch));
    let padded = if (ph, pw) == (h, w) { image.clone() } else { image.pad_to(ph, pw) };
    let l = model.config().num_classes;
    let plane = ph * pw;
    let mut sum = vec![0f32; l * plane];
    let mut count = vec![0u32; plane];
    for &top in &window_starts(ph, patch) {
        for &left in &window_starts(pw, patch) {
            let win = padded.crop(top, left, patch, patch)?;
            let x = win.to_tensor(model.dtype(), model.device())?.unsqueeze(0)?;
            let out = model.forward(&x, Mode::Eval)?;
            let logits: Vec<f32> = out.output().to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            for y in 0..patch {
                let row = (top + y) * pw + left;
                for x in 0..patch {
                    count[row + x] += 1;
                }
                for c in 0..l {
                    let src = &logits[c * patch * patch + y * patch..][..patch];
                    let dst = &mut sum[c * plane + row..][..patch];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
    }
    for c in 0..l {
        for (v, &n) in sum[c * plane..(c + 1) * plane].iter_mut().zip(&count) {
            *v /= n as f32;
        }
    }
    let full = Tensor::from_vec(sum, (l, ph, pw), model.device())?;
    Ok(full.narrow(1, 0, h)?.narrow(2, 0, w)?)
}

pub fn predict_tile(model: &Paraformer, image: &ImagePatch, patch: usize) -> Result<LabelGrid> {
    let logits = stitched_logits(model, image, patch)?;
    Ok(argmax_labels(&logits.unsqueeze(0)?)?.remove(0))
}

pub fn predict_split(model: &Paraformer, tiles: &[Tile], patch: usize) -> Result<Vec<LabelGrid>> {
    tiles.iter().map(|t| predict_tile(model, &t.image, patch)).collect()
}

/// Stitched predictions for a manifest split and their pooled score.
pub struct Prediction {
    pub ids: Vec<String>,
    pub labels: Vec<LabelGrid>,
    pub report: EvalReport,
}

pub fn predict_tiles(model: &Paraformer, manifest: &Manifest, split: Split, patch: usize) -> Result<Prediction> {
    let tiles = manifest.load_split(split)?;
    if tiles.is_empty() {
        return Err(Error::Eval(format!("split {split} has no tiles")));
    }
    let labels = predict_split(model, &tiles, patch)?;
    let report = evaluate_many(
        labels.iter().zip(tiles.iter().map(|t| &t.gt)),
        model.config().num_classes,
    )?;
    Ok(Prediction {
        ids: tiles.into_iter().map(|t| t.id).collect(),
        labels,
        report,
    })
}

/// Scores the coarse labels themselves, replicated to full resolution.
pub fn baseline_report(tiles: &[Tile], num_classes: usize) -> Result<EvalReport> {
    evaluate_many(tiles.iter().map(|t| (&t.lr_label, &t.gt)), num_classes)
}
