//! TOML run configuration shared by every command.

use std::fs;
use std::path::Path;

use anyhow::Context;
use paraformer::train::derive_seed;
use paraformer::{AblationMode, DegradeSpec, Preset, RunConfig, SceneSpec, Split, SplitPlan};
use serde::{Deserialize, Serialize};

use crate::Usage;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CliConfig {
    pub scene: SceneSection,
    pub degrade: DegradeSpec,
    pub model: ModelSection,
    pub train: TrainSection,
    pub eval: EvalSection,
}

/// Benchmark layout: `tiles` scenes sharing one spec, tile `i` seeded from `(seed, i)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneSection {
    pub tiles: usize,
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub blob_scale: usize,
    pub texture_noise: f32,
    pub bands: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
}

impl Default for SceneSection {
    fn default() -> Self {
        let spec = SceneSpec::default();
        let plan = SplitPlan::default();
        Self {
            tiles: 20,
            seed: spec.seed,
            height: spec.height,
            width: spec.width,
            num_classes: spec.num_classes,
            blob_scale: spec.blob_scale,
            texture_noise: spec.texture_noise,
            bands: spec.bands,
            train_fraction: plan.train,
            val_fraction: plan.val,
        }
    }
}

impl SceneSection {
    pub fn specs(&self) -> Vec<SceneSpec> {
        (0..self.tiles as u64)
            .map(|i| SceneSpec {
                seed: derive_seed(&[self.seed, i]),
                height: self.height,
                width: self.width,
                num_classes: self.num_classes,
                blob_scale: self.blob_scale,
                texture_noise: self.texture_noise,
                bands: self.bands,
            })
            .collect()
    }

    pub fn plan(&self) -> SplitPlan {
        SplitPlan {
            train: self.train_fraction,
            val: self.val_fraction,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    pub preset: Preset,
    pub mode: AblationMode,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            preset: Preset::Paper,
            mode: AblationMode::Full,
        }
    }
}

/// Unset fields take the preset's value.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    pub lr0: Option<f64>,
    pub patch: Option<usize>,
    pub batch: Option<usize>,
    pub plateau_epochs: Option<usize>,
    pub lr_decay: Option<f64>,
    pub plateau_threshold: Option<f64>,
    pub betas: Option<(f64, f64)>,
    pub weight_decay: Option<f64>,
    pub max_epochs: Option<usize>,
    pub patches_per_tile: Option<usize>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalSection {
    pub split: Split,
    /// Inference window; defaults to the training patch size.
    pub window: Option<usize>,
    /// Seeds per mode for `ablate`.
    pub seeds: usize,
}

impl Default for EvalSection {
    fn default() -> Self {
        Self {
            split: Split::Test,
            window: None,
            seeds: 3,
        }
    }
}

impl CliConfig {
    /// Reads `path`, or returns the defaults when no file is given.
    pub fn load(path: Option<&Path>) -> anyhow::Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        if !path.is_file() {
            return Err(Usage(format!("config file {} not found", path.display())).into());
        }
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        toml::from_str(&text).map_err(|e| Usage(format!("{}: {e}", path.display())).into())
    }

    /// Applies the global `--seed` and `--preset` flags.
    pub fn apply_overrides(&mut self, seed: Option<u64>, preset: Option<Preset>) {
        if let Some(s) = seed {
            self.scene.seed = s;
            self.degrade.seed = s;
            self.train.seed = Some(s);
        }
        if let Some(p) = preset {
            self.model.preset = p;
        }
    }

    pub fn run_config(&self) -> RunConfig {
        let base = match self.model.preset {
            Preset::Paper => RunConfig::default(),
            Preset::Desk => RunConfig::desk(),
        };
        let t = &self.train;
        RunConfig {
            preset: self.model.preset,
            mode: self.model.mode,
            bands: self.scene.bands,
            num_classes: self.scene.num_classes,
            lr0: t.lr0.unwrap_or(base.lr0),
            patch: t.patch.unwrap_or(base.patch),
            batch: t.batch.unwrap_or(base.batch),
            plateau_epochs: t.plateau_epochs.unwrap_or(base.plateau_epochs),
            lr_decay: t.lr_decay.unwrap_or(base.lr_decay),
            plateau_threshold: t.plateau_threshold.unwrap_or(base.plateau_threshold),
            betas: t.betas.unwrap_or(base.betas),
            weight_decay: t.weight_decay.unwrap_or(base.weight_decay),
            max_epochs: t.max_epochs.unwrap_or(base.max_epochs),
            patches_per_tile: t.patches_per_tile.unwrap_or(base.patches_per_tile),
            seed: t.seed.unwrap_or(base.seed),
            workers: t.workers.unwrap_or(base.workers),
        }
    }
}
