//! Training loop, history logging, checkpoint resume and the ablation harness.

use std::path::Path;

use candle_core::{DType, Device};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::dataset::{sample_patch, Manifest, Patch, Split, Tile};
use crate::error::{Error, Result};
use crate::grid::{stack_images, ImagePatch, LabelGrid};
use crate::infer::{baseline_report, predict_split};
use crate::metrics::evaluate_many;
use crate::nn::{AblationMode, Mode, ModelConfig, Paraformer, Preset};
use crate::optim::{AdamW, AdamWConfig, PlateauScheduler};
use crate::plat::{ce_objective, plat_objective, LossReport};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub preset: Preset,
    pub mode: AblationMode,
    pub bands: usize,
    pub num_classes: usize,
    pub lr0: f64,
    pub patch: usize,
    pub batch: usize,
    pub plateau_epochs: usize,
    pub lr_decay: f64,
    pub plateau_threshold: f64,
    pub betas: (f64, f64),
    pub weight_decay: f64,
    pub max_epochs: usize,
    /// Random patches drawn from every training tile per epoch.
    pub patches_per_tile: usize,
    pub seed: u64,
    /// Patch-sampling threads; results do not depend on this.
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            preset: Preset::Paper,
            mode: AblationMode::Full,
            bands: 4,
            num_classes: 4,
            lr0: 0.01,
            patch: 224,
            batch: 8,
            plateau_epochs: 8,
            lr_decay: 0.9,
            plateau_threshold: 1e-4,
            betas: (0.9, 0.999),
            weight_decay: 0.01,
            max_epochs: 100,
            patches_per_tile: 4,
            seed: 0,
            workers: 1,
        }
    }
}

impl RunConfig {
    /// CPU-sized run: small model, 64-pixel patches, batches of 4, 10 epochs.
    pub fn desk() -> Self {
        Self {
            preset: Preset::Desk,
            patch: 64,
            batch: 4,
            max_epochs: 10,
            ..Self::default()
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig::preset(self.preset, self.bands, self.num_classes, self.patch)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 || self.patch == 0 || self.patches_per_tile == 0 {
            return Err(Error::Config("batch, patch and patches_per_tile must be positive".into()));
        }
        if self.workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        let stride = self.model_config().transformer.embed_stride;
        if self.mode != AblationMode::CnnOnly && self.patch % stride != 0 {
            return Err(Error::Config(format!("patch {} is not a multiple of the embed stride {stride}", self.patch)));
        }
        self.model_config().validate()
    }
}

/// One row of the training history.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub mce: f64,
    pub total: f64,
    /// Learning rate used during the epoch.
    pub lr: f64,
    pub mask_coverage: f64,
}

pub fn write_history_csv(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    for r in history {
        w.serialize(r).map_err(|e| csv_err(path, e))?;
    }
    if history.is_empty() {
        w.write_record(["epoch", "ce", "mce", "total", "lr", "mask_coverage"])
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_history_csv(path: &Path) -> Result<Vec<EpochRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_err(path, e))?;
    r.deserialize().map(|row| row.map_err(|e| csv_err(path, e))).collect()
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    Error::io(path, std::io::Error::other(e))
}

/// SplitMix64 finalizer over a sequence of words.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        z = z.wrapping_add(p).wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

/// The shuffled patches of one epoch. Patch `k` is drawn from its own seed,
/// so the result is independent of the number of workers.
pub fn epoch_patches(tiles: &[Tile], cfg: &RunConfig, epoch: usize) -> Result<Vec<Patch>> {
    let mut order: Vec<usize> = (0..tiles.len())
        .flat_map(|i| std::iter::repeat_n(i, cfg.patches_per_tile))
        .collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, epoch as u64])));
    let draw = |(k, &i): (usize, &usize)| sample_patch(&tiles[i], cfg.patch, derive_seed(&[cfg.seed, epoch as u64, k as u64]));
    if cfg.workers <= 1 {
        return order.iter().enumerate().map(draw).collect();
    }
    use rayon::prelude::*;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.workers)
        .build()
        .map_err(|e| Error::Config(e.to_string()))?;
    pool.install(|| order.par_iter().enumerate().map(draw).collect())
}

#[derive(Serialize, Deserialize)]
struct Meta {
    run: RunConfig,
    model: ModelConfig,
    seed: u64,
    epoch: usize,
    scheduler: PlateauScheduler,
    adam_step: u64,
    history: Vec<EpochRecord>,
    empty_mask_batches: usize,
}

pub struct Trainer {
    cfg: RunConfig,
    model: Paraformer,
    opt: AdamW,
    sched: PlateauScheduler,
    epoch: usize,
    history: Vec<EpochRecord>,
    empty_mask_batches: usize,
    last_good: Checkpoint,
}

impl Trainer {
    pub fn new(cfg: RunConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Paraformer::new(cfg.model_config(), cfg.mode, cfg.seed, DType::F32, &Device::Cpu)?;
        let opt = AdamW::new(
            model.store().params().iter().map(|(k, v)| (k.clone(), v.clone())),
            AdamWConfig {
                lr: cfg.lr0,
                beta1: cfg.betas.0,
                beta2: cfg.betas.1,
                eps: 1e-8,
                weight_decay: cfg.weight_decay,
            },
        )?;
        let mut sched = PlateauScheduler::new(cfg.lr0, cfg.plateau_epochs, cfg.lr_decay)?;
        sched.threshold = cfg.plateau_threshold;
        let mut t = Self {
            cfg,
            model,
            opt,
            sched,
            epoch: 0,
            history: Vec::new(),
            empty_mask_batches: 0,
            last_good: Checkpoint::default(),
        };
        t.last_good = t.checkpoint()?;
        Ok(t)
    }

    /// Rebuilds the trainer, including optimizer moments and schedule state.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let meta: Meta = serde_json::from_value(ck.meta.clone())
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let mut t = Self::new(meta.run.clone())?;
        if t.model.config() != &meta.model {
            return Err(Error::Checkpoint("model architecture disagrees with the run config".into()));
        }
        let (dtype, device) = (t.model.dtype(), t.model.device().clone());
        let store = t.model.store();
        for name in store.params().keys() {
            store.assign(name, &ck.tensor(&format!("param/{name}"), dtype, &device)?)?;
        }
        for name in store.buffers().keys() {
            store.assign(name, &ck.tensor(&format!("buffer/{name}"), dtype, &device)?)?;
        }
        t.opt.restore(meta.adam_step, |name| {
            let m = ck.tensor(&format!("adam_m/{name}"), dtype, &device).ok()?;
            let v = ck.tensor(&format!("adam_v/{name}"), dtype, &device).ok()?;
            Some((m, v))
        })?;
        t.opt.set_lr(meta.scheduler.lr);
        t.sched = meta.scheduler;
        t.epoch = meta.epoch;
        t.history = meta.history;
        t.empty_mask_batches = meta.empty_mask_batches;
        t.last_good = ck.clone();
        Ok(t)
    }

    pub fn checkpoint(&self) -> Result<Checkpoint> {
        let meta = Meta {
            run: self.cfg.clone(),
            model: self.model.config().clone(),
            seed: self.cfg.seed,
            epoch: self.epoch,
            scheduler: self.sched.clone(),
            adam_step: self.opt.steps(),
            history: self.history.clone(),
            empty_mask_batches: self.empty_mask_batches,
        };
        let mut ck = Checkpoint::new(serde_json::to_value(meta)?);
        for (name, v) in self.model.store().params() {
            ck.insert(format!("param/{name}"), v.as_tensor())?;
        }
        for (name, v) in self.model.store().buffers() {
            ck.insert(format!("buffer/{name}"), v.as_tensor())?;
        }
        for (name, m, v) in self.opt.moments() {
            ck.insert(format!("adam_m/{name}"), m)?;
            ck.insert(format!("adam_v/{name}"), v)?;
        }
        Ok(ck)
    }

    pub fn config(&self) -> &RunConfig {
        &self.cfg
    }

    pub fn model(&self) -> &Paraformer {
        &self.model
    }

    pub fn into_model(self) -> Paraformer {
        self.model
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }

    /// Raises or lowers the epoch budget of a restored run.
    pub fn set_max_epochs(&mut self, max_epochs: usize) {
        self.cfg.max_epochs = max_epochs;
    }

    pub fn set_workers(&mut self, workers: usize) -> Result<()> {
        if workers == 0 {
            return Err(Error::Config("workers must be at least 1".into()));
        }
        self.cfg.workers = workers;
        Ok(())
    }

    pub fn lr(&self) -> f64 {
        self.opt.lr()
    }

    pub fn history(&self) -> &[EpochRecord] {
        &self.history
    }

    /// Batches in which the mask selected no pixel.
    pub fn empty_mask_batches(&self) -> usize {
        self.empty_mask_batches
    }

    /// One optimizer step on `(image, coarse label)` pairs.
    pub fn step(&mut self, images: &[&ImagePatch], labels: &[LabelGrid]) -> Result<LossReport> {
        let x = stack_images(images, self.model.dtype(), self.model.device())?;
        let out = self.model.forward(&x, Mode::Train)?;
        let obj = match (self.cfg.mode, &out.primal, &out.fused) {
            (AblationMode::Full, Some(p), Some(f)) => plat_objective(labels, p, f)?,
            (AblationMode::CnnOnly, Some(p), _) => ce_objective(labels, p)?,
            (AblationMode::NoPlat | AblationMode::TransformerOnly, _, Some(f)) => ce_objective(labels, f)?,
            _ => unreachable!("model parts follow the ablation mode"),
        };
        if !obj.report.total.is_finite() {
            return Err(Error::Diverged {
                epoch: self.epoch + 1,
                last_good: Box::new(self.last_good.clone()),
            });
        }
        if obj.report.empty_mask {
            self.empty_mask_batches += 1;
        }
        let grads = obj.loss.backward()?;
        self.opt.step(&grads)?;
        Ok(obj.report)
    }

    pub fn step_patches(&mut self, batch: &[Patch]) -> Result<LossReport> {
        let images: Vec<&ImagePatch> = batch.iter().map(|p| &p.image).collect();
        let labels: Vec<LabelGrid> = batch.iter().map(|p| p.label.clone()).collect();
        self.step(&images, &labels)
    }

    pub fn train_epoch(&mut self, tiles: &[Tile]) -> Result<EpochRecord> {
        if tiles.is_empty() {
            return Err(Error::Config("no training tiles".into()));
        }
        let epoch = self.epoch + 1;
        let patches = epoch_patches(tiles, &self.cfg, epoch)?;
        let lr = self.opt.lr();
        let (mut ce, mut mce, mut total, mut cov) = (0.0, 0.0, 0.0, 0.0);
        let mut n = 0usize;
        for batch in patches.chunks(self.cfg.batch) {
            let r = self.step_patches(batch)?;
            ce += r.ce;
            mce += r.mce;
            total += r.total;
            cov += r.mask_coverage;
            n += 1;
        }
        let k = n as f64;
        let record = EpochRecord {
            epoch,
            ce: ce / k,
            mce: mce / k,
            total: total / k,
            lr,
            mask_coverage: cov / k,
        };
        let next = self.sched.step(record.total);
        self.opt.set_lr(next);
        self.epoch = epoch;
        self.history.push(record);
        self.last_good = self.checkpoint()?;
        Ok(record)
    }

    /// Trains until `max_epochs`, calling `on_epoch` after each epoch.
    pub fn fit(&mut self, tiles: &[Tile], mut on_epoch: impl FnMut(&EpochRecord)) -> Result<()> {
        while self.epoch < self.cfg.max_epochs {
            let r = self.train_epoch(tiles)?;
            log::info!(
                "epoch {} total {:.4} ce {:.4} mce {:.4} lr {:.5} coverage {:.3}",
                r.epoch,
                r.total,
                r.ce,
                r.mce,
                r.lr,
                r.mask_coverage
            );
            on_epoch(&r);
        }
        Ok(())
    }
}

/// Trains on the manifest's training split.
pub fn train(cfg: &RunConfig, manifest: &Manifest) -> Result<Trainer> {
    let tiles = manifest.load_split(Split::Train)?;
    if tiles.is_empty() {
        return Err(Error::Config("manifest has no training tiles".into()));
    }
    let mut t = Trainer::new(cfg.clone())?;
    t.fit(&tiles, |_| {})?;
    Ok(t)
}

/// Continues a checkpointed run up to `max_epochs` (which may be raised).
pub fn resume(ck: &Checkpoint, manifest: &Manifest, max_epochs: Option<usize>) -> Result<Trainer> {
    let mut t = Trainer::from_checkpoint(ck)?;
    if let Some(e) = max_epochs {
        t.set_max_epochs(e);
    }
    let tiles = manifest.load_split(Split::Train)?;
    t.fit(&tiles, |_| {})?;
    Ok(t)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub mode: AblationMode,
    pub mious: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub seeds: Vec<u64>,
    pub rows: Vec<AblationRow>,
    pub baseline_miou: f64,
}

impl AblationTable {
    pub fn row(&self, mode: AblationMode) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.mode == mode)
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from("| mode | mIoU mean | mIoU std |\n|---|---|---|\n");
        for r in &self.rows {
            s += &format!("| {} | {:.4} | {:.4} |\n", r.mode.name(), r.mean, r.std);
        }
        s += &format!("| upsampled_lr_baseline | {:.4} | 0.0000 |\n", self.baseline_miou);
        s
    }
}

pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt())
}

/// Trains each mode under each seed and scores it on the test split.
pub fn run_ablation(
    base: &RunConfig,
    manifest: &Manifest,
    seeds: &[u64],
    modes: &[AblationMode],
    mut progress: impl FnMut(AblationMode, u64, f64),
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::Config("at least one seed is required".into()));
    }
    let train_tiles = manifest.load_split(Split::Train)?;
    let test_tiles = manifest.load_split(Split::Test)?;
    if train_tiles.is_empty() || test_tiles.is_empty() {
        return Err(Error::Config("ablation needs training and test tiles".into()));
    }
    let gts: Vec<&LabelGrid> = test_tiles.iter().map(|t| &t.gt).collect();
    let mut rows = Vec::new();
    for &mode in modes {
        let mut mious = Vec::new();
        for &seed in seeds {
            let cfg = RunConfig {
                mode,
                seed,
                ..base.clone()
            };
            let mut t = Trainer::new(cfg)?;
            t.fit(&train_tiles, |_| {})?;
            let preds = predict_split(t.model(), &test_tiles, base.patch)?;
            let report = evaluate_many(preds.iter().zip(gts.iter().copied()), base.num_classes)?;
            progress(mode, seed, report.miou);
            mious.push(report.miou);
        }
        let (mean, std) = mean_std(&mious);
        rows.push(AblationRow { mode, mious, mean, std });
    }
    Ok(AblationTable {
        seeds: seeds.to_vec(),
        rows,
        baseline_miou: baseline_report(&test_tiles, base.num_classes)?.miou,
    })
}
