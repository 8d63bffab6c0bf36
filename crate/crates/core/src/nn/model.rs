use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::Conv2d;
use crate::nn::layers::Mode;
use crate::nn::params::ParamStore;
use crate::nn::rp_cnn::{CnnBranch, CnnConfig};
use crate::nn::transformer::{Decoder, FeatureEmbedding, TokenSequence, TransformerConfig, TransformerEncoder};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Preset {
    Paper,
    Desk,
}

impl std::str::FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "paper" => Ok(Preset::Paper),
            "desk" => Ok(Preset::Desk),
            other => Err(Error::Config(format!("unknown preset `{other}`"))),
        }
    }
}

/// Which parts of the network exist and which loss trains them.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    /// Both branches, trained with the CE + masked-CE objective.
    Full,
    /// CNN branch and primal classifier only, CE against coarse labels.
    CnnOnly,
    /// Transformer branch embedding the image directly, CE against coarse labels.
    TransformerOnly,
    /// Both branches, CE on the final output against coarse labels.
    NoPlat,
}

impl AblationMode {
    pub const ALL: [AblationMode; 4] = [
        AblationMode::Full,
        AblationMode::NoPlat,
        AblationMode::CnnOnly,
        AblationMode::TransformerOnly,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationMode::Full => "full",
            AblationMode::CnnOnly => "cnn_only",
            AblationMode::TransformerOnly => "transformer_only",
            AblationMode::NoPlat => "no_plat",
        }
    }

    fn has_cnn(self) -> bool {
        !matches!(self, AblationMode::TransformerOnly)
    }

    fn has_transformer(self) -> bool {
        !matches!(self, AblationMode::CnnOnly)
    }
}

impl std::str::FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        AblationMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown ablation mode `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub bands: usize,
    pub num_classes: usize,
    pub cnn: CnnConfig,
    pub transformer: TransformerConfig,
}

impl ModelConfig {
    pub fn paper(bands: usize, num_classes: usize) -> Self {
        Self {
            bands,
            num_classes,
            cnn: CnnConfig::paper(bands),
            transformer: TransformerConfig::paper(),
        }
    }

    /// Narrow CNN and small transformer sized for CPU experiments on `patch`-pixel crops.
    pub fn desk(bands: usize, num_classes: usize, patch: usize) -> Self {
        Self {
            bands,
            num_classes,
            cnn: CnnConfig {
                bands,
                width: 24,
                branch_channels: (24, 12, 6),
                blocks: 5,
            },
            transformer: TransformerConfig::desk(patch),
        }
    }

    pub fn preset(preset: Preset, bands: usize, num_classes: usize, patch: usize) -> Self {
        match preset {
            Preset::Paper => Self::paper(bands, num_classes),
            Preset::Desk => Self::desk(bands, num_classes, patch),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {}", self.num_classes)));
        }
        if self.num_classes > 255 {
            return Err(Error::Config("at most 255 classes".into()));
        }
        if self.cnn.bands != self.bands {
            return Err(Error::Config("CNN band count disagrees with the model".into()));
        }
        self.transformer.validate()
    }
}

/// Logits produced by one forward pass, each `(B, L, H, W)`.
#[derive(Clone, Debug)]
pub struct ForwardOutput {
    /// CNN-branch classifier output (prediction⁽¹⁾).
    pub primal: Option<Tensor>,
    /// Final classifier output (prediction⁽²⁾).
    pub fused: Option<Tensor>,
}

impl ForwardOutput {
    /// The map a deployed model reports: the fused output when present.
    pub fn output(&self) -> &Tensor {
        self.fused
            .as_ref()
            .or(self.primal.as_ref())
            .expect("every mode produces at least one output")
    }
}

pub struct Paraformer {
    cfg: ModelConfig,
    mode: AblationMode,
    store: ParamStore,
    cnn: Option<CnnBranch>,
    primal: Option<Conv2d>,
    embed: Option<FeatureEmbedding>,
    encoder: Option<TransformerEncoder>,
    decoder: Option<Decoder>,
    fused: Option<Conv2d>,
}

impl Paraformer {
    pub fn new(cfg: ModelConfig, mode: AblationMode, seed: u64, dtype: DType, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let mut store = ParamStore::new(seed, dtype, device.clone());
        let l = cfg.num_classes;
        let (cnn, primal) = if mode.has_cnn() {
            (
                Some(CnnBranch::new(&mut store, "cnn", cfg.cnn)?),
                Some(Conv2d::new(&mut store, "primal", cfg.cnn.width, l, 3, 1)?),
            )
        } else {
            (None, None)
        };
        let (embed, encoder, decoder, fused) = if mode.has_transformer() {
            let tcfg = &cfg.transformer;
            let embed_in = if mode.has_cnn() {
                cfg.cnn.width * cfg.cnn.blocks
            } else {
                cfg.bands
            };
            let embed = FeatureEmbedding::new(&mut store, "embed", embed_in, tcfg)?;
            let encoder = TransformerEncoder::new(&mut store, "encoder", tcfg)?;
            let decoder = Decoder::new(&mut store, "decoder", tcfg)?;
            let dec_out = decoder.out_channels(tcfg);
            let fused_in = if mode.has_cnn() { cfg.cnn.width + dec_out } else { dec_out };
            let fused = Conv2d::new(&mut store, "fused", fused_in, l, 3, 1)?;
            (Some(embed), Some(encoder), Some(decoder), Some(fused))
        } else {
            (None, None, None, None)
        };
        Ok(Self {
            cfg,
            mode,
            store,
            cnn,
            primal,
            embed,
            encoder,
            decoder,
            fused,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn mode(&self) -> AblationMode {
        self.mode
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn num_params(&self) -> usize {
        self.store.num_params()
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Patch sizes must be multiples of this when the transformer branch is present.
    pub fn size_multiple(&self) -> usize {
        if self.mode.has_transformer() {
            self.cfg.transformer.embed_stride
        } else {
            1
        }
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<ForwardOutput> {
        let (_, bands, h, w) = x.dims4()?;
        if bands != self.cfg.bands {
            return Err(Error::Shape(format!("model expects {} bands, got {bands}", self.cfg.bands)));
        }
        let feats = match &self.cnn {
            Some(cnn) => Some(cnn.forward(x, mode)?),
            None => None,
        };
        let cnn_last = feats.as_ref().and_then(|f| f.last().cloned());
        let primal = match (&self.primal, &cnn_last) {
            (Some(cls), Some(f)) => Some(cls.forward(f)?),
            _ => None,
        };
        let fused = match (&self.embed, &self.encoder, &self.decoder, &self.fused) {
            (Some(embed), Some(encoder), Some(decoder), Some(cls)) => {
                let input = match &feats {
                    Some(f) => f.clone(),
                    None => vec![x.clone()],
                };
                let (tokens, skips) = embed.forward(&input, mode)?;
                let encoded = encoder.forward(&tokens)?;
                let (trans, _) = decoder.forward(&encoded, &skips, mode)?;
                let (_, _, th, tw) = trans.dims4()?;
                if (th, tw) != (h, w) {
                    return Err(Error::Shape(format!("decoder produced {th}x{tw} for a {h}x{w} patch")));
                }
                let joined = match &cnn_last {
                    Some(c) => Tensor::cat(&[c, &trans], 1)?,
                    None => trans,
                };
                Some(cls.forward(&joined)?)
            }
            _ => None,
        };
        Ok(ForwardOutput { primal, fused })
    }

    /// Runs only the embedding and encoder; exposed for probing.
    pub fn encode(&self, feats: &[Tensor], mode: Mode) -> Result<TokenSequence> {
        let (embed, encoder) = self
            .embed
            .as_ref()
            .zip(self.encoder.as_ref())
            .ok_or_else(|| Error::Config(format!("mode {} has no transformer branch", self.mode.name())))?;
        let (tokens, _) = embed.forward(feats, mode)?;
        encoder.forward(&tokens)
    }

    pub fn cnn(&self) -> Option<&CnnBranch> {
        self.cnn.as_ref()
    }

    pub fn decoder(&self) -> Option<&Decoder> {
        self.decoder.as_ref()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn modes_build_the_expected_parts() {
        let cfg = ModelConfig::desk(3, 4, 32);
        let dev = Device::Cpu;
        let full = Paraformer::new(cfg.clone(), AblationMode::Full, 0, DType::F32, &dev).unwrap();
        let no_plat = Paraformer::new(cfg.clone(), AblationMode::NoPlat, 0, DType::F32, &dev).unwrap();
        let cnn = Paraformer::new(cfg.clone(), AblationMode::CnnOnly, 0, DType::F32, &dev).unwrap();
        let trans = Paraformer::new(cfg, AblationMode::TransformerOnly, 0, DType::F32, &dev).unwrap();
        assert_eq!(full.num_params(), no_plat.num_params());
        assert!(cnn.num_params() < full.num_params());
        assert!(trans.store().num_params_under("cnn.") == 0);
        assert!(cnn.store().num_params_under("encoder.") == 0);

        let x = Tensor::zeros((1, 3, 32, 32), DType::F32, &dev).unwrap();
        let out = full.forward(&x, Mode::Eval).unwrap();
        assert_eq!(out.primal.as_ref().unwrap().dims(), &[1, 4, 32, 32]);
        assert_eq!(out.fused.as_ref().unwrap().dims(), &[1, 4, 32, 32]);
        let out = cnn.forward(&x, Mode::Eval).unwrap();
        assert!(out.fused.is_none());
        assert_eq!(out.output().dims(), &[1, 4, 32, 32]);
        let out = trans.forward(&x, Mode::Eval).unwrap();
        assert!(out.primal.is_none());
    }

    #[test]
    fn same_seed_same_weights() {
        let cfg = ModelConfig::desk(4, 3, 16);
        let a = Paraformer::new(cfg.clone(), AblationMode::Full, 9, DType::F32, &Device::Cpu).unwrap();
        let b = Paraformer::new(cfg, AblationMode::Full, 9, DType::F32, &Device::Cpu).unwrap();
        for ((na, va), (nb, vb)) in a.store().params().iter().zip(b.store().params()) {
            assert_eq!(na, nb);
            let d = (va.as_tensor() - vb.as_tensor()).unwrap().abs().unwrap().sum_all().unwrap();
            assert_eq!(d.to_scalar::<f32>().unwrap(), 0.0);
        }
    }

    #[test]
    fn band_mismatch_and_too_few_classes() {
        let model = Paraformer::new(ModelConfig::desk(4, 3, 16), AblationMode::CnnOnly, 0, DType::F32, &Device::Cpu).unwrap();
        let x = Tensor::zeros((1, 3, 16, 16), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(model.forward(&x, Mode::Eval), Err(Error::Shape(_))));
        let bad = ModelConfig::desk(4, 1, 16);
        assert!(matches!(
            Paraformer::new(bad, AblationMode::Full, 0, DType::F32, &Device::Cpu),
            Err(Error::Config(_))
        ));
    }

    fn grad_norm_under(model: &Paraformer, grads: &candle_core::backprop::GradStore, prefix: &str) -> f32 {
        model
            .store()
            .params()
            .iter()
            .filter(|(name, _)| name.starts_with(prefix))
            .filter_map(|(_, v)| grads.get(v.as_tensor()))
            .map(|g| g.sqr().unwrap().sum_all().unwrap().to_scalar::<f32>().unwrap())
            .sum()
    }

    #[test]
    fn joint_loss_reaches_both_branches() {
        use crate::grid::LabelGrid;
        use crate::plat::{ce_objective, plat_objective};
        let dev = Device::Cpu;
        let model = Paraformer::new(ModelConfig::desk(4, 3, 16), AblationMode::Full, 1, DType::F32, &dev).unwrap();
        let x = Tensor::randn(0f32, 1.0, (2, 4, 16, 16), &dev).unwrap();
        let labels: Vec<LabelGrid> = (0..2u8)
            .map(|i| LabelGrid::from_vec(16, 16, (0..256).map(|p| ((p / 16 + i as usize) % 3) as u8).collect()).unwrap())
            .collect();
        let out = model.forward(&x, Mode::Train).unwrap();
        let obj = plat_objective(&labels, out.primal.as_ref().unwrap(), out.fused.as_ref().unwrap()).unwrap();
        let grads = obj.loss.backward().unwrap();
        for prefix in ["cnn.", "primal.", "embed.", "encoder.", "decoder.", "fused."] {
            assert!(grad_norm_under(&model, &grads, prefix) > 0.0, "no gradient under {prefix}");
        }

        let no_plat = Paraformer::new(ModelConfig::desk(4, 3, 16), AblationMode::NoPlat, 1, DType::F32, &dev).unwrap();
        let out = no_plat.forward(&x, Mode::Train).unwrap();
        let grads = ce_objective(&labels, out.fused.as_ref().unwrap()).unwrap().loss.backward().unwrap();
        assert!(grad_norm_under(&no_plat, &grads, "cnn.") > 0.0);
        assert_eq!(grad_norm_under(&no_plat, &grads, "primal."), 0.0);
    }
}
