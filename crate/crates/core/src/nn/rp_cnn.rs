//! Resolution-preserving CNN branch: parallel 1×1/3×3/5×5 stride-1 convolutions
//! per block, channel concatenation, 1×1 reduction and a residual shortcut.
//! No layer in this branch changes the spatial size.

use candle_core::Tensor;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv::Conv2d;
use crate::nn::fused::relu;
use crate::nn::layers::{BatchNorm2d, Mode};
use crate::nn::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RpBlockConfig {
    pub in_channels: usize,
    /// Output channels of the 1×1, 3×3 and 5×5 paths.
    pub branch_channels: (usize, usize, usize),
    pub out_channels: usize,
}

impl Default for RpBlockConfig {
    fn default() -> Self {
        Self {
            in_channels: 128,
            branch_channels: (128, 64, 32),
            out_channels: 128,
        }
    }
}

/// conv → batch norm → ReLU
struct ConvBnRelu {
    conv: Conv2d,
    bn: BatchNorm2d,
}

impl ConvBnRelu {
    fn new(store: &mut ParamStore, path: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        Ok(Self {
            conv: Conv2d::new(store, &format!("{path}.conv"), cin, cout, k, 1)?,
            bn: BatchNorm2d::new(store, &format!("{path}.bn"), cout)?,
        })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        relu(&self.bn.forward(&self.conv.forward(x)?, mode)?)
    }
}

pub struct RpBlock {
    cfg: RpBlockConfig,
    path1: ConvBnRelu,
    path3: ConvBnRelu,
    path5: ConvBnRelu,
    reduce: ConvBnRelu,
    projection: Option<Conv2d>,
}

impl RpBlock {
    pub fn new(store: &mut ParamStore, path: &str, cfg: RpBlockConfig) -> Result<Self> {
        let (c1, c3, c5) = cfg.branch_channels;
        if cfg.in_channels == 0 || cfg.out_channels == 0 || c1 + c3 + c5 == 0 {
            return Err(Error::Config(format!("degenerate RP block config {cfg:?}")));
        }
        let cin = cfg.in_channels;
        Ok(Self {
            cfg,
            path1: ConvBnRelu::new(store, &format!("{path}.path1"), cin, c1, 1)?,
            path3: ConvBnRelu::new(store, &format!("{path}.path3"), cin, c3, 3)?,
            path5: ConvBnRelu::new(store, &format!("{path}.path5"), cin, c5, 5)?,
            reduce: ConvBnRelu::new(store, &format!("{path}.reduce"), c1 + c3 + c5, cfg.out_channels, 1)?,
            projection: if cin != cfg.out_channels {
                Some(Conv2d::new(store, &format!("{path}.shortcut"), cin, cfg.out_channels, 1, 1)?)
            } else {
                None
            },
        })
    }

    pub fn config(&self) -> &RpBlockConfig {
        &self.cfg
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.cfg.in_channels {
            return Err(Error::Shape(format!(
                "RP block expects {} channels, got {c}",
                self.cfg.in_channels
            )));
        }
        let paths = [
            self.path1.forward(x, mode)?,
            self.path3.forward(x, mode)?,
            self.path5.forward(x, mode)?,
        ];
        let fused = self.reduce.forward(&Tensor::cat(&paths, 1)?, mode)?;
        let shortcut = match &self.projection {
            Some(p) => p.forward(x)?,
            None => x.clone(),
        };
        Ok((fused + shortcut)?)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CnnConfig {
    pub bands: usize,
    pub width: usize,
    pub branch_channels: (usize, usize, usize),
    pub blocks: usize,
}

impl CnnConfig {
    pub fn paper(bands: usize) -> Self {
        Self {
            bands,
            width: 128,
            branch_channels: (128, 64, 32),
            blocks: 5,
        }
    }

    pub fn block(&self) -> RpBlockConfig {
        RpBlockConfig {
            in_channels: self.width,
            branch_channels: self.branch_channels,
            out_channels: self.width,
        }
    }
}

/// A 1×1 stem lifting bands to `width` channels, followed by serial RP blocks.
pub struct CnnBranch {
    cfg: CnnConfig,
    stem: Conv2d,
    blocks: Vec<RpBlock>,
}

impl CnnBranch {
    pub fn new(store: &mut ParamStore, path: &str, cfg: CnnConfig) -> Result<Self> {
        if cfg.blocks == 0 {
            return Err(Error::Config("CNN branch needs at least one block".into()));
        }
        let stem = Conv2d::new(store, &format!("{path}.stem"), cfg.bands, cfg.width, 1, 1)?;
        let blocks = (0..cfg.blocks)
            .map(|i| RpBlock::new(store, &format!("{path}.block{i}"), cfg.block()))
            .collect::<Result<_>>()?;
        Ok(Self { cfg, stem, blocks })
    }

    pub fn config(&self) -> &CnnConfig {
        &self.cfg
    }

    /// Outputs of every block, each `width × H × W`.
    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Vec<Tensor>> {
        let bands = x.dim(1)?;
        if bands != self.cfg.bands {
            return Err(Error::Shape(format!(
                "CNN branch expects {} bands, got {bands}",
                self.cfg.bands
            )));
        }
        let mut h = self.stem.forward(x)?;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            h = block.forward(&h, mode)?;
            outs.push(h.clone());
        }
        Ok(outs)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::layers::to_f64_vec;
    use candle_core::{DType, Device};

    fn input(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
    }

    fn small() -> RpBlockConfig {
        RpBlockConfig {
            in_channels: 8,
            branch_channels: (8, 4, 2),
            out_channels: 8,
        }
    }

    #[test]
    fn block_preserves_resolution_at_any_size() {
        let mut store = ParamStore::new(1, DType::F32, Device::Cpu);
        let block = RpBlock::new(&mut store, "b", small()).unwrap();
        for size in [5, 17, 32] {
            let y = block.forward(&input((2, 8, size, size + 3), 2), Mode::Train).unwrap();
            assert_eq!(y.dims(), &[2, 8, size, size + 3]);
        }
    }

    #[test]
    fn zero_weights_give_identity() {
        let mut store = ParamStore::new(1, DType::F32, Device::Cpu);
        let block = RpBlock::new(&mut store, "b", small()).unwrap();
        for (name, var) in store.params() {
            store.assign(name, &var.as_tensor().zeros_like().unwrap()).unwrap();
        }
        let x = input((1, 8, 9, 9), 3);
        for mode in [Mode::Eval, Mode::Train] {
            let y = block.forward(&x, mode).unwrap();
            let diff = to_f64_vec(&(y - &x).unwrap().abs().unwrap()).unwrap();
            assert!(diff.iter().all(|&d| d == 0.0));
        }
    }

    #[test]
    fn channel_mismatch_is_a_shape_error() {
        let mut store = ParamStore::new(1, DType::F32, Device::Cpu);
        let block = RpBlock::new(&mut store, "b", small()).unwrap();
        assert!(matches!(block.forward(&input((1, 7, 4, 4), 0), Mode::Eval), Err(Error::Shape(_))));
    }

    #[test]
    fn projection_shortcut_when_widths_differ() {
        let mut store = ParamStore::new(1, DType::F32, Device::Cpu);
        let cfg = RpBlockConfig {
            in_channels: 3,
            branch_channels: (4, 2, 2),
            out_channels: 6,
        };
        let block = RpBlock::new(&mut store, "b", cfg).unwrap();
        assert!(store.params().contains_key("b.shortcut.weight"));
        let y = block.forward(&input((1, 3, 6, 6), 1), Mode::Eval).unwrap();
        assert_eq!(y.dims(), &[1, 6, 6, 6]);
    }

    #[test]
    fn paper_block_parameter_count() {
        // 1x1: 128*128+128, 3x3: 128*64*9+64, 5x5: 128*32*25+32, reduce: 224*128+128,
        // batch-norm affine pairs: 2*(128+64+32+128)
        let mut store = ParamStore::new(0, DType::F32, Device::Cpu);
        RpBlock::new(&mut store, "b", RpBlockConfig::default()).unwrap();
        let expected = (128 * 128 + 128) + (128 * 64 * 9 + 64) + (128 * 32 * 25 + 32) + (224 * 128 + 128) + 2 * (128 + 64 + 32 + 128);
        assert_eq!(store.num_params(), expected);
    }

    #[test]
    fn branch_is_translation_covariant_in_the_interior() {
        let cfg = CnnConfig {
            bands: 3,
            width: 6,
            branch_channels: (6, 4, 2),
            blocks: 5,
        };
        let mut store = ParamStore::new(4, DType::F64, Device::Cpu);
        let branch = CnnBranch::new(&mut store, "cnn", cfg).unwrap();
        let big = input((1, 3, 48, 48), 9).to_dtype(DType::F64).unwrap();
        let (dy, dx) = (3usize, 5usize);
        let a = big.narrow(2, 0, 40).unwrap().narrow(3, 0, 40).unwrap();
        let b = big.narrow(2, dy, 40).unwrap().narrow(3, dx, 40).unwrap();
        let fa = branch.forward(&a, Mode::Eval).unwrap().pop().unwrap();
        let fb = branch.forward(&b, Mode::Eval).unwrap().pop().unwrap();
        // five blocks of 5x5 reach 10 pixels; compare well inside both crops
        let m = 11;
        let inner = 40 - dy.max(dx) - 2 * m;
        let ca = fa.narrow(2, m + dy, inner).unwrap().narrow(3, m + dx, inner).unwrap();
        let cb = fb.narrow(2, m, inner).unwrap().narrow(3, m, inner).unwrap();
        let diff = to_f64_vec(&(ca - cb).unwrap().abs().unwrap()).unwrap();
        assert!(diff.iter().all(|&d| d < 1e-5), "max {}", diff.iter().cloned().fold(0.0, f64::max));
    }
}
