//! Weakly supervised segmentation from coarse labels: a resolution-preserving
//! CNN branch and a transformer branch trained jointly, where the CNN's own
//! agreement with the coarse labels selects the pixels that supervise the
//! fused output.
//!
//! The crate also generates synthetic scenes with exact ground truth so the
//! whole pipeline runs without external data.

pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod grid;
pub mod infer;
pub mod io;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod plat;
pub mod synth;
pub mod train;

pub use checkpoint::Checkpoint;
pub use dataset::{load_tile, sample_patch, unify_classes, ClassMap, ClassTarget, Manifest, Patch, Split, Tile, TileRecord};
pub use error::{Error, Result};
pub use grid::{argmax_labels, ImagePatch, LabelGrid, MaskGrid, VOID};
pub use infer::{predict_tile, predict_tiles, Prediction};
pub use metrics::{evaluate_miou, EvalReport};
pub use nn::{AblationMode, ModelConfig, Paraformer, Preset};
pub use plat::{ce_loss, intersect_mask, mce_loss, total_loss, LossReport};
pub use synth::{build_benchmark, degrade_label, generate_scene, DegradeSpec, SceneSpec, SplitPlan};
pub use train::{train, AblationTable, EpochRecord, RunConfig, Trainer};
