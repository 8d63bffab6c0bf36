//! Network building blocks and the assembled hybrid model.

pub mod conv;
pub mod fused;
pub mod layers;
pub mod model;
pub mod params;
pub mod rp_cnn;
pub mod transformer;

pub use conv::{conv2d, Conv2d};
pub use layers::{log_softmax, upsample2x, BatchNorm2d, LayerNorm, Linear, Mode};
pub use model::{AblationMode, ForwardOutput, ModelConfig, Paraformer, Preset};
pub use params::ParamStore;
pub use rp_cnn::{CnnBranch, CnnConfig, RpBlock, RpBlockConfig};
pub use transformer::{Decoder, FeatureEmbedding, TokenSequence, TransformerConfig, TransformerEncoder};
