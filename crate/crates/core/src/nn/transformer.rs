//! Global-modeling branch: strided-conv embedding of the concatenated CNN
//! features, a pre-norm transformer encoder over the token grid, and a cascade
//! of 2× upsampling stages that concatenate the embedding path's intermediate
//! maps back in until the map reaches patch resolution.

use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::Conv2d;
use crate::nn::fused::relu;
use crate::nn::layers::{softmax_last, upsample2x, BatchNorm2d, LayerNorm, Linear, Mode};
use crate::nn::params::ParamStore;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TransformerConfig {
    pub layers: usize,
    pub hidden_dim: usize,
    pub heads: usize,
    pub mlp_dim: usize,
    /// Downsampling from the patch grid to the token grid; a power of two.
    pub embed_stride: usize,
    /// Embedding-path widths: the full-resolution projection followed by each
    /// intermediate stride-2 output. Length is `log2(embed_stride)`.
    pub embed_channels: Vec<usize>,
    /// Output width of each decoder stage, coarsest first. Same length.
    pub decoder_channels: Vec<usize>,
    /// Side of the learned positional-embedding grid (patch / stride).
    pub token_grid: usize,
}

impl TransformerConfig {
    /// ViT-Base-like widths at stride 16 for 224-pixel patches.
    pub fn paper() -> Self {
        Self {
            layers: 12,
            hidden_dim: 768,
            heads: 12,
            mlp_dim: 3072,
            embed_stride: 16,
            embed_channels: vec![64, 128, 256, 512],
            decoder_channels: vec![256, 128, 64, 32],
            token_grid: 14,
        }
    }

    pub fn desk(patch: usize) -> Self {
        Self {
            layers: 12,
            hidden_dim: 128,
            heads: 4,
            mlp_dim: 256,
            embed_stride: 8,
            embed_channels: vec![16, 32, 64],
            decoder_channels: vec![64, 32, 16],
            token_grid: (patch / 8).max(1),
        }
    }

    pub fn stages(&self) -> usize {
        self.embed_stride.trailing_zeros() as usize
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers != 12 {
            return Err(Error::Config(format!("transformer must have 12 layers, got {}", self.layers)));
        }
        if self.heads == 0 || self.hidden_dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden_dim {} not divisible by {} heads",
                self.hidden_dim, self.heads
            )));
        }
        if self.embed_stride < 2 || !self.embed_stride.is_power_of_two() {
            return Err(Error::Config(format!(
                "embed_stride must be a power of two >= 2, got {}",
                self.embed_stride
            )));
        }
        let n = self.stages();
        if self.embed_channels.len() != n || self.decoder_channels.len() != n {
            return Err(Error::Config(format!(
                "stride {} needs {n} embedding and decoder widths",
                self.embed_stride
            )));
        }
        if self.token_grid == 0 {
            return Err(Error::Config("token_grid must be positive".into()));
        }
        Ok(())
    }
}

/// Tokens `(B, N, D)` plus the grid they were flattened from.
#[derive(Clone, Debug)]
pub struct TokenSequence {
    pub tokens: Tensor,
    pub grid: (usize, usize),
}

struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new(store: &mut ParamStore, path: &str, cin: usize, cout: usize, k: usize, stride: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{path}.conv"), cin, cout, k, stride)?,
            bn: BatchNorm2d::new(store, &format!("{path}.bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        relu(&self.bn.forward(&self.conv.forward(x)?, mode)?)
    }
}

/// Concatenation → 1×1 projection → stride-2 3×3 convolutions down to the
/// token grid → flatten + positional embeddings.
pub struct FeatureEmbedding {
    in_channels: usize,
    stride: usize,
    token_grid: usize,
    hidden: usize,
    project: ConvBnRelu,
    downs: Vec<ConvBnRelu>,
    to_tokens: Conv2d,
    position: Tensor,
}

impl FeatureEmbedding {
    pub fn new(store: &mut ParamStore, path: &str, in_channels: usize, cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let ch = &cfg.embed_channels;
        let project = ConvBnRelu::new(store, &format!("{path}.project"), in_channels, ch[0], 1, 1)?;
        let downs = ch
            .windows(2)
            .enumerate()
            .map(|(i, w)| ConvBnRelu::new(store, &format!("{path}.down{i}"), w[0], w[1], 3, 2))
            .collect::<Result<_>>()?;
        let last = *ch.last().expect("validated non-empty");
        let to_tokens = Conv2d::new(store, &format!("{path}.to_tokens"), last, cfg.hidden_dim, 3, 2)?;
        let position = store
            .normal(
                format!("{path}.position"),
                &[cfg.token_grid * cfg.token_grid, cfg.hidden_dim],
                0.02,
            )?
            .as_tensor()
            .clone();
        Ok(Self {
            in_channels,
            stride: cfg.embed_stride,
            token_grid: cfg.token_grid,
            hidden: cfg.hidden_dim,
            project,
            downs,
            to_tokens,
            position,
        })
    }

    /// Positional embeddings for a `gh × gw` grid, nearest-resampled from the
    /// learned grid when the sizes differ.
    pub fn positions(&self, gh: usize, gw: usize) -> Result<Tensor> {
        let g = self.token_grid;
        if (gh, gw) == (g, g) {
            return Ok(self.position.clone());
        }
        let idx: Vec<u32> = (0..gh)
            .flat_map(|y| (0..gw).map(move |x| ((y * g / gh) * g + x * g / gw) as u32))
            .collect();
        let idx = Tensor::from_vec(idx, gh * gw, self.position.device())?;
        Ok(self.position.index_select(&idx, 0)?)
    }

    /// Returns the token sequence and the skip maps, finest first.
    pub fn forward(&self, feats: &[Tensor], mode: Mode) -> Result<(TokenSequence, Vec<Tensor>)> {
        let first = feats.first().ok_or_else(|| Error::Shape("no features to embed".into()))?;
        let (_, _, h, w) = first.dims4()?;
        for f in feats {
            let (_, _, fh, fw) = f.dims4()?;
            if (fh, fw) != (h, w) {
                return Err(Error::Shape(format!("feature maps differ in size: {h}x{w} vs {fh}x{fw}")));
            }
        }
        if h % self.stride != 0 || w % self.stride != 0 {
            return Err(Error::Shape(format!("{h}x{w} not divisible by embed stride {}", self.stride)));
        }
        let x = if feats.len() == 1 {
            first.clone()
        } else {
            Tensor::cat(feats, 1)?
        };
        let c = x.dim(1)?;
        if c != self.in_channels {
            return Err(Error::Shape(format!("embedding expects {} channels, got {c}", self.in_channels)));
        }
        let mut skips = Vec::with_capacity(self.downs.len() + 1);
        let mut h_map = self.project.forward(&x, mode)?;
        for down in &self.downs {
            skips.push(h_map.clone());
            h_map = down.forward(&h_map, mode)?;
        }
        skips.push(h_map.clone());
        let grid_map = self.to_tokens.forward(&h_map)?;
        let (b, d, gh, gw) = grid_map.dims4()?;
        debug_assert_eq!(d, self.hidden);
        let tokens = grid_map.flatten_from(2)?.transpose(1, 2)?;
        let tokens = tokens.broadcast_add(&self.positions(gh, gw)?.unsqueeze(0)?)?;
        debug_assert_eq!(tokens.dims(), &[b, gh * gw, d]);
        Ok((
            TokenSequence {
                tokens,
                grid: (gh, gw),
            },
            skips,
        ))
    }
}

pub struct SelfAttention {
    qkv: Linear,
    proj: Linear,
    heads: usize,
}

impl SelfAttention {
    fn new(store: &mut ParamStore, path: &str, dim: usize, heads: usize) -> Result<Self> {
        Ok(Self {
            qkv: Linear::new(store, &format!("{path}.qkv"), dim, 3 * dim)?,
            proj: Linear::new(store, &format!("{path}.proj"), dim, dim)?,
            heads,
        })
    }

    fn forward(&self, x: &Tensor, probe: Option<&mut Vec<Tensor>>) -> Result<Tensor> {
        let (b, n, d) = x.dims3()?;
        let dh = d / self.heads;
        let qkv = self
            .qkv
            .forward(x)?
            .reshape((b, n, 3, self.heads, dh))?
            .permute((2, 0, 3, 1, 4))?;
        let q = qkv.get(0)?.contiguous()?;
        let k = qkv.get(1)?.contiguous()?;
        let v = qkv.get(2)?.contiguous()?;
        let scores = (q.matmul(&k.t()?.contiguous()?)? / (dh as f64).sqrt())?;
        let attn = softmax_last(&scores)?;
        if let Some(p) = probe {
            p.push(attn.detach());
        }
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, n, d))?;
        self.proj.forward(&out)
    }
}

/// LN → MHSA → residual; LN → MLP → residual.
pub struct EncoderLayer {
    norm1: LayerNorm,
    attn: SelfAttention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl EncoderLayer {
    fn new(store: &mut ParamStore, path: &str, cfg: &TransformerConfig) -> Result<Self> {
        let d = cfg.hidden_dim;
        Ok(Self {
            norm1: LayerNorm::new(store, &format!("{path}.norm1"), d)?,
            attn: SelfAttention::new(store, &format!("{path}.attn"), d, cfg.heads)?,
            norm2: LayerNorm::new(store, &format!("{path}.norm2"), d)?,
            fc1: Linear::new(store, &format!("{path}.mlp.fc1"), d, cfg.mlp_dim)?,
            fc2: Linear::new(store, &format!("{path}.mlp.fc2"), cfg.mlp_dim, d)?,
        })
    }

    fn forward(&self, x: &Tensor, probe: Option<&mut Vec<Tensor>>) -> Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, probe)?)?;
        let mlp = self.fc2.forward(&self.fc1.forward(&self.norm2.forward(&x)?)?.gelu_erf()?)?;
        Ok((x + mlp)?)
    }
}

pub struct TransformerEncoder {
    layers: Vec<EncoderLayer>,
    norm: LayerNorm,
    hidden: usize,
}

impl TransformerEncoder {
    pub fn new(store: &mut ParamStore, path: &str, cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let layers = (0..cfg.layers)
            .map(|i| EncoderLayer::new(store, &format!("{path}.layer{i}"), cfg))
            .collect::<Result<_>>()?;
        Ok(Self {
            layers,
            norm: LayerNorm::new(store, &format!("{path}.norm"), cfg.hidden_dim)?,
            hidden: cfg.hidden_dim,
        })
    }

    pub fn num_layers(&self) -> usize {
        self.layers.len()
    }

    pub fn forward(&self, seq: &TokenSequence) -> Result<TokenSequence> {
        self.forward_probed(seq, None)
    }

    /// Like [`forward`](Self::forward), additionally collecting every layer's
    /// attention probabilities `(B, heads, N, N)` into `probe`.
    pub fn forward_probed(&self, seq: &TokenSequence, mut probe: Option<&mut Vec<Tensor>>) -> Result<TokenSequence> {
        let d = seq.tokens.dim(D::Minus1)?;
        if d != self.hidden {
            return Err(Error::Shape(format!("encoder expects width {}, got {d}", self.hidden)));
        }
        let mut x = seq.tokens.clone();
        for layer in &self.layers {
            x = layer.forward(&x, probe.as_deref_mut())?;
        }
        Ok(TokenSequence {
            tokens: self.norm.forward(&x)?,
            grid: seq.grid,
        })
    }
}

/// Upsampling cascade back to patch resolution.
pub struct Decoder {
    stages: Vec<ConvBnRelu>,
    skip_channels: Vec<usize>,
}

impl Decoder {
    pub fn new(store: &mut ParamStore, path: &str, cfg: &TransformerConfig) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.stages();
        let mut stages = Vec::with_capacity(n);
        let mut skip_channels = Vec::with_capacity(n);
        let mut cin = cfg.hidden_dim;
        for (j, &cout) in cfg.decoder_channels.iter().enumerate() {
            let skip = cfg.embed_channels[n - 1 - j];
            stages.push(ConvBnRelu::new(store, &format!("{path}.stage{j}"), cin + skip, cout, 3, 1)?);
            skip_channels.push(skip);
            cin = cout;
        }
        Ok(Self { stages, skip_channels })
    }

    pub fn num_stages(&self) -> usize {
        self.stages.len()
    }

    pub fn out_channels(&self, cfg: &TransformerConfig) -> usize {
        *cfg.decoder_channels.last().expect("validated non-empty")
    }

    /// `skips` are finest first, as returned by [`FeatureEmbedding::forward`].
    /// Returns the output map and the spatial size after each stage.
    pub fn forward(&self, encoded: &TokenSequence, skips: &[Tensor], mode: Mode) -> Result<(Tensor, Vec<(usize, usize)>)> {
        let (b, n, d) = encoded.tokens.dims3()?;
        let (gh, gw) = encoded.grid;
        if n != gh * gw {
            return Err(Error::Shape(format!("{n} tokens do not fill a {gh}x{gw} grid")));
        }
        let mut x = encoded.tokens.transpose(1, 2)?.reshape((b, d, gh, gw))?;
        let mut trace = Vec::with_capacity(self.stages.len());
        for (j, stage) in self.stages.iter().enumerate() {
            x = upsample2x(&x)?;
            let (_, _, h, w) = x.dims4()?;
            let idx = skips.len().checked_sub(1 + j);
            let skip = idx
                .and_then(|i| skips.get(i))
                .ok_or_else(|| Error::Config(format!("missing skip for decoder stage {j} at {h}x{w}")))?;
            let (_, sc, sh, sw) = skip.dims4()?;
            if (sh, sw) != (h, w) || sc != self.skip_channels[j] {
                return Err(Error::Config(format!(
                    "decoder stage {j} needs a {}-channel skip at {h}x{w}, got {sc} at {sh}x{sw}",
                    self.skip_channels[j]
                )));
            }
            x = stage.forward(&Tensor::cat(&[&x, skip], 1)?, mode)?;
            trace.push((h, w));
        }
        Ok((x, trace))
    }
}
