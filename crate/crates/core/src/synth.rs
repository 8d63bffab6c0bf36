//! Synthetic scenes with exact high-resolution truth, plus the block-majority
//! degradation that produces coarse training labels from them.

use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataset::{Manifest, Split, TileRecord};
use crate::error::{Error, Result};
use crate::grid::{ImagePatch, LabelGrid, VOID};
use crate::io;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSpec {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    /// Characteristic region diameter in pixels.
    pub blob_scale: usize,
    /// Standard deviation of the additive per-pixel noise.
    pub texture_noise: f32,
    pub bands: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        Self {
            seed: 0,
            height: 256,
            width: 256,
            num_classes: 4,
            blob_scale: 32,
            texture_noise: 0.1,
            bands: 4,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::InvalidSpec("scene dimensions must be positive".into()));
        }
        if !(2..=VOID as usize).contains(&self.num_classes) {
            return Err(Error::InvalidSpec(format!(
                "num_classes must be in 2..=255, got {}",
                self.num_classes
            )));
        }
        if self.blob_scale == 0 {
            return Err(Error::InvalidSpec("blob_scale must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.texture_noise) {
            return Err(Error::InvalidSpec(format!(
                "texture_noise must be in [0, 1], got {}",
                self.texture_noise
            )));
        }
        if !(self.bands == 3 || self.bands == 4) {
            return Err(Error::InvalidSpec(format!("bands must be 3 or 4, got {}", self.bands)));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DegradeSpec {
    /// High-resolution pixels per low-resolution pixel side.
    pub factor: usize,
    /// Probability of replacing a block's class with a random wrong class.
    pub label_noise: f64,
    pub seed: u64,
}

impl Default for DegradeSpec {
    fn default() -> Self {
        Self {
            factor: 16,
            label_noise: 0.1,
            seed: 0,
        }
    }
}

impl DegradeSpec {
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.factor == 0 {
            return Err(Error::InvalidSpec("degradation factor must be >= 1".into()));
        }
        if height % self.factor != 0 || width % self.factor != 0 {
            return Err(Error::InvalidSpec(format!(
                "factor {} does not divide {height}x{width}",
                self.factor
            )));
        }
        if !(0.0..1.0).contains(&self.label_noise) {
            return Err(Error::InvalidSpec(format!(
                "label_noise must be in [0, 1), got {}",
                self.label_noise
            )));
        }
        Ok(())
    }
}

/// Mean reflectance of `class` in `band`; every band orders the classes differently.
pub fn class_mean(class: usize, band: usize, num_classes: usize) -> f32 {
    let rank = (class + band) % num_classes;
    0.2 + 0.6 * rank as f32 / (num_classes - 1) as f32
}

fn rng_for(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Smooth scalar field in `[-1, 1]` from bilinearly blended lattice values.
struct ValueNoise {
    cell: f32,
    cols: usize,
    lattice: Vec<f32>,
}

impl ValueNoise {
    fn new(rng: &mut ChaCha8Rng, height: usize, width: usize, cell: f32) -> Self {
        let rows = (height as f32 / cell).ceil() as usize + 2;
        let cols = (width as f32 / cell).ceil() as usize + 2;
        let lattice = (0..rows * cols).map(|_| rng.random_range(-1.0f32..1.0)).collect();
        Self {
            cell,
            cols,
            lattice,
        }
    }

    fn sample(&self, y: f32, x: f32) -> f32 {
        let fy = y / self.cell;
        let fx = x / self.cell;
        let (iy, ix) = (fy.floor() as usize, fx.floor() as usize);
        let smooth = |t: f32| t * t * (3.0 - 2.0 * t);
        let (ty, tx) = (smooth(fy - iy as f32), smooth(fx - ix as f32));
        let at = |r: usize, c: usize| self.lattice[r * self.cols + c];
        let top = at(iy, ix) * (1.0 - tx) + at(iy, ix + 1) * tx;
        let bottom = at(iy + 1, ix) * (1.0 - tx) + at(iy + 1, ix + 1) * tx;
        top * (1.0 - ty) + bottom * ty
    }
}

/// Renders a piecewise-constant class map and its image.
///
/// Regions come from a domain-warped nearest-seed partition over a jittered
/// seed lattice with spacing `blob_scale`; classes are dealt to seeds from a
/// shuffled balanced deck so every class appears.
pub fn generate_scene(spec: &SceneSpec) -> Result<(LabelGrid, ImagePatch)> {
    spec.validate()?;
    let (h, w, l) = (spec.height, spec.width, spec.num_classes);
    let s = spec.blob_scale;
    let cell = s as f32;

    let mut layout_rng = rng_for(spec.seed, 0);
    let seed_rows = h.div_ceil(s);
    let seed_cols = w.div_ceil(s);
    let n_seeds = seed_rows * seed_cols;
    let seeds: Vec<(f32, f32)> = (0..n_seeds)
        .map(|i| {
            let (r, c) = (i / seed_cols, i % seed_cols);
            let jy: f32 = layout_rng.random();
            let jx: f32 = layout_rng.random();
            ((r as f32 + jy) * cell, (c as f32 + jx) * cell)
        })
        .collect();
    let mut deck: Vec<u8> = (0..n_seeds).map(|i| (i % l) as u8).collect();
    deck.shuffle(&mut layout_rng);

    let warp_y = ValueNoise::new(&mut layout_rng, h, w, cell);
    let warp_x = ValueNoise::new(&mut layout_rng, h, w, cell);
    let amplitude = 0.35 * cell;

    let mut gt = LabelGrid::filled(h, w, 0);
    for y in 0..h {
        for x in 0..w {
            let (py, px) = (y as f32 + 0.5, x as f32 + 0.5);
            let qy = py + amplitude * warp_y.sample(py, px);
            let qx = px + amplitude * warp_x.sample(py, px);
            let cr = (qy / cell).floor() as isize;
            let cc = (qx / cell).floor() as isize;
            let mut best = f32::INFINITY;
            let mut best_idx = 0usize;
            for r in (cr - 2).max(0)..=(cr + 2).min(seed_rows as isize - 1) {
                for c in (cc - 2).max(0)..=(cc + 2).min(seed_cols as isize - 1) {
                    let idx = r as usize * seed_cols + c as usize;
                    let (sy, sx) = seeds[idx];
                    let d = (sy - qy).powi(2) + (sx - qx).powi(2);
                    if d < best {
                        best = d;
                        best_idx = idx;
                    }
                }
            }
            gt.set(y, x, deck[best_idx]);
        }
    }

    let mut noise_rng = rng_for(spec.seed, 1);
    let noise = if spec.texture_noise > 0.0 {
        Some(Normal::new(0.0f32, spec.texture_noise).expect("finite std"))
    } else {
        None
    };
    let mut image = ImagePatch::filled(spec.bands, h, w, 0.0);
    for b in 0..spec.bands {
        let means: Vec<f32> = (0..l).map(|c| class_mean(c, b, l)).collect();
        let plane = image.band_mut(b);
        for (v, &class) in plane.iter_mut().zip(gt.as_slice()) {
            let mut value = means[class as usize];
            if let Some(n) = &noise {
                value += n.sample(&mut noise_rng);
            }
            // quantized to the 8-bit grid so the in-memory and on-disk images agree
            *v = (value.clamp(0.0, 1.0) * 255.0).round() / 255.0;
        }
    }
    Ok((gt, image))
}

/// Majority class of the non-void values in `counts`; ties go to the smallest index.
fn majority(counts: &[u32]) -> Option<u8> {
    let mut best: Option<(usize, u32)> = None;
    for (c, &n) in counts.iter().enumerate() {
        if n > 0 && best.is_none_or(|(_, b)| n > b) {
            best = Some((c, n));
        }
    }
    best.map(|(c, _)| c as u8)
}

/// Reduces every `factor × factor` block to its majority class, optionally
/// corrupts it, and replicates the result back onto the high-resolution grid.
///
/// `num_classes` bounds the replacement draw for `label_noise`. Void pixels do
/// not vote; an all-void block stays void.
pub fn degrade_label(gt: &LabelGrid, num_classes: usize, d: &DegradeSpec) -> Result<LabelGrid> {
    let (h, w) = gt.dims();
    d.validate(h, w)?;
    if num_classes < 2 || num_classes > VOID as usize {
        return Err(Error::InvalidSpec(format!("num_classes {num_classes} out of range")));
    }
    let k = d.factor;
    let mut rng = rng_for(d.seed, 2);
    let mut out = LabelGrid::filled(h, w, VOID);
    let mut counts = vec![0u32; num_classes];
    for by in (0..h).step_by(k) {
        for bx in (0..w).step_by(k) {
            counts.iter_mut().for_each(|c| *c = 0);
            for y in by..by + k {
                for x in bx..bx + k {
                    let v = gt.get(y, x);
                    if v != VOID {
                        let v = v as usize;
                        if v >= num_classes {
                            return Err(Error::InvalidSpec(format!(
                                "label {v} outside 0..{num_classes}"
                            )));
                        }
                        counts[v] += 1;
                    }
                }
            }
            let mut label = majority(&counts);
            // exactly two draws per block
            let flip = rng.random::<f64>() < d.label_noise;
            let pick = rng.random_range(0..num_classes - 1) as u8;
            if let (Some(m), true) = (label, flip) {
                label = Some(if pick >= m { pick + 1 } else { pick });
            }
            let value = label.unwrap_or(VOID);
            for y in by..by + k {
                for x in bx..bx + k {
                    out.set(y, x, value);
                }
            }
        }
    }
    Ok(out)
}

/// Train/val/test fractions; the remainder after train and val goes to test.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitPlan {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        Self {
            train: 0.6,
            val: 0.2,
        }
    }
}

impl SplitPlan {
    /// Assigns splits in scene order.
    pub fn assign(&self, n: usize) -> Vec<Split> {
        let n_train = (self.train * n as f64).round() as usize;
        let n_val = ((self.val * n as f64).round() as usize).min(n - n_train.min(n));
        (0..n)
            .map(|i| {
                if i < n_train {
                    Split::Train
                } else if i < n_train + n_val {
                    Split::Val
                } else {
                    Split::Test
                }
            })
            .collect()
    }
}

/// Renders each scene, degrades its labels, writes PNG tiles plus
/// `manifest.json` under `out_dir`, and returns the manifest.
///
/// Each tile gets its own noise stream derived from `d.seed` and its index.
pub fn build_benchmark(
    scene_specs: &[SceneSpec],
    d: &DegradeSpec,
    plan: &SplitPlan,
    out_dir: &Path,
) -> Result<Manifest> {
    if scene_specs.is_empty() {
        return Err(Error::EmptyBenchmark);
    }
    for spec in scene_specs {
        spec.validate()?;
        d.validate(spec.height, spec.width)?;
    }
    let tiles_dir = out_dir.join("tiles");
    fs::create_dir_all(&tiles_dir).map_err(|e| Error::io(&tiles_dir, e))?;

    let splits = plan.assign(scene_specs.len());
    let mut records = Vec::with_capacity(scene_specs.len());
    for (i, (spec, split)) in scene_specs.iter().zip(splits).enumerate() {
        let id = format!("tile_{i:04}");
        let (gt, image) = generate_scene(spec)?;
        let tile_degrade = DegradeSpec {
            seed: d.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(i as u64),
            ..d.clone()
        };
        let lr = degrade_label(&gt, spec.num_classes, &tile_degrade)?;

        let rel = |suffix: &str| PathBuf::from("tiles").join(format!("{id}_{suffix}.png"));
        let image_path = rel("image");
        let extra_band_path = (image.bands() == 4).then(|| rel("band4"));
        let lr_label_path = rel("lr");
        let gt_path = rel("gt");

        io::write_image_png(&image, &out_dir.join(&image_path), extra_band_path.as_ref().map(|p| out_dir.join(p)).as_deref())?;
        io::write_label_png(&lr, &out_dir.join(&lr_label_path))?;
        io::write_label_png(&gt, &out_dir.join(&gt_path))?;

        records.push(TileRecord {
            id,
            image_path,
            extra_band_path,
            lr_label_path,
            gt_path,
            split,
        });
    }
    let manifest = Manifest::new(records, out_dir.to_path_buf());
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}
