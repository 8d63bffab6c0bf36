use candle_core::{DType, Tensor, Var, D};

use crate::error::{Error, Result};
use crate::nn::fused::{batch_norm_train, upsample2x_op};
use crate::nn::params::ParamStore;

/// Whether normalization layers use batch statistics (and update their
/// running estimates) or the stored running estimates.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub struct BatchNorm2d {
    gamma: Tensor,
    beta: Tensor,
    running_mean: Var,
    running_var: Var,
    channels: usize,
    momentum: f64,
    eps: f64,
}

impl BatchNorm2d {
    pub fn new(store: &mut ParamStore, path: &str, channels: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(format!("{path}.weight"), &[channels], 1.0)?.as_tensor().clone(),
            beta: store.constant(format!("{path}.bias"), &[channels], 0.0)?.as_tensor().clone(),
            running_mean: store.buffer(format!("{path}.running_mean"), &[channels], 0.0)?,
            running_var: store.buffer(format!("{path}.running_var"), &[channels], 1.0)?,
            channels,
            momentum: 0.1,
            eps: 1e-5,
        })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        if mode == Mode::Train {
            let (b, _, h, w) = x.dims4()?;
            let n = b * h * w;
            let (y, mean, var) = batch_norm_train(x, &self.gamma, &self.beta, self.eps)?;
            let unbiased = if n > 1 { n as f64 / (n - 1) as f64 } else { 1.0 };
            let m = self.momentum;
            let dev = x.device();
            let mean = Tensor::from_vec(mean, self.channels, dev)?.to_dtype(x.dtype())?;
            let var = Tensor::from_vec(var, self.channels, dev)?.to_dtype(x.dtype())?;
            let new_mean = ((self.running_mean.as_tensor() * (1.0 - m))? + (mean * m)?)?;
            let new_var = ((self.running_var.as_tensor() * (1.0 - m))? + (var * (m * unbiased))?)?;
            self.running_mean.set(&new_mean)?;
            self.running_var.set(&new_var)?;
            return Ok(y);
        }
        let shape = (1, self.channels, 1, 1);
        let scale = (self.gamma.clone() / (self.running_var.as_tensor() + self.eps)?.sqrt()?)?;
        let shift = (&self.beta - (self.running_mean.as_tensor() * &scale)?)?;
        Ok(x.broadcast_mul(&scale.reshape(shape)?)?.broadcast_add(&shift.reshape(shape)?)?)
    }
}

/// Normalization over the last axis.
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
    eps: f64,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, path: &str, dim: usize) -> Result<Self> {
        Ok(Self {
            gamma: store.constant(format!("{path}.weight"), &[dim], 1.0)?.as_tensor().clone(),
            beta: store.constant(format!("{path}.bias"), &[dim], 0.0)?.as_tensor().clone(),
            eps: 1e-6,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        let normed = centered.broadcast_div(&(var + self.eps)?.sqrt()?)?;
        Ok(normed.broadcast_mul(&self.gamma)?.broadcast_add(&self.beta)?)
    }
}

pub struct Linear {
    weight: Tensor,
    bias: Tensor,
    in_dim: usize,
    out_dim: usize,
}

impl Linear {
    /// `U(-1/√in, 1/√in)` weights, zero bias.
    pub fn new(store: &mut ParamStore, path: &str, in_dim: usize, out_dim: usize) -> Result<Self> {
        let bound = 1.0 / (in_dim as f64).sqrt();
        Ok(Self {
            weight: store.uniform(format!("{path}.weight"), &[out_dim, in_dim], bound)?.as_tensor().clone(),
            bias: store.constant(format!("{path}.bias"), &[out_dim], 0.0)?.as_tensor().clone(),
            in_dim,
            out_dim,
        })
    }

    /// Applies to the last axis of any-rank input.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let dims = x.dims().to_vec();
        let last = *dims.last().ok_or_else(|| Error::Shape("linear on a scalar".into()))?;
        if last != self.in_dim {
            return Err(Error::Shape(format!("linear expects {} features, got {last}", self.in_dim)));
        }
        let rows = x.elem_count() / last;
        let y = x
            .reshape((rows, last))?
            .matmul(&self.weight.t()?)?
            .broadcast_add(&self.bias)?;
        let mut out_dims = dims;
        *out_dims.last_mut().expect("non-empty") = self.out_dim;
        Ok(y.reshape(out_dims)?)
    }
}

/// 2× bilinear upsampling of `(B, C, H, W)` with half-pixel centers and
/// clamped edges, differentiable.
pub fn upsample2x(x: &Tensor) -> Result<Tensor> {
    let (_, _, h, w) = x.dims4()?;
    if h == 0 || w == 0 {
        return Err(Error::Shape("cannot upsample an empty map".into()));
    }
    upsample2x_op(x)
}

/// Log-softmax over `axis`, stabilized by the detached maximum.
pub fn log_softmax(x: &Tensor, axis: usize) -> Result<Tensor> {
    let max = x.max_keepdim(axis)?.detach();
    let shifted = x.broadcast_sub(&max)?;
    let lse = shifted.exp()?.sum_keepdim(axis)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(D::Minus1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

pub(crate) fn to_f64_vec(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.to_dtype(DType::F64)?.flatten_all()?.to_vec1()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn upsample_matches_reference_bilinear() {
        let x = Tensor::arange(0f32, 30.0, &Device::Cpu).unwrap().reshape((1, 2, 3, 5)).unwrap();
        let x = (x.sqr().unwrap() * 0.1).unwrap();
        let ours = upsample2x(&x).unwrap();
        let reference = x.upsample_bilinear2d(6, 10, false).unwrap();
        let diff = to_f64_vec(&ours.sub(&reference).unwrap().abs().unwrap()).unwrap();
        assert!(diff.iter().all(|d| *d < 1e-5), "{diff:?}");
    }

    #[test]
    fn upsample_is_differentiable() {
        let v = Var::from_tensor(&Tensor::ones((1, 1, 2, 2), DType::F32, &Device::Cpu).unwrap()).unwrap();
        let y = upsample2x(v.as_tensor()).unwrap().sum_all().unwrap();
        let g = y.backward().unwrap();
        // every source pixel spreads total weight 4 over the 4x4 output
        let grad = to_f64_vec(g.get(v.as_tensor()).unwrap()).unwrap();
        assert!(grad.iter().all(|&x| (x - 4.0).abs() < 1e-6), "{grad:?}");
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::new(&[[1000f32, 1001.0, 999.0], [-3.0, 0.0, 2.0]], &Device::Cpu).unwrap();
        let s = to_f64_vec(&softmax_last(&x).unwrap().sum(1).unwrap()).unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-6));
        let ls = log_softmax(&x, 1).unwrap().exp().unwrap().sum(1).unwrap();
        assert!(to_f64_vec(&ls).unwrap().iter().all(|v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn batchnorm_train_normalizes_and_tracks() {
        let mut store = ParamStore::new(0, DType::F64, Device::Cpu);
        let bn = BatchNorm2d::new(&mut store, "bn", 2).unwrap();
        let x = Tensor::arange(0f64, 16.0, &Device::Cpu).unwrap().reshape((2, 2, 2, 2)).unwrap();
        let y = bn.forward(&x, Mode::Train).unwrap();
        let mean = to_f64_vec(&y.mean((0, 2, 3)).unwrap()).unwrap();
        assert!(mean.iter().all(|m| m.abs() < 1e-9));
        let rm = to_f64_vec(store.buffers()["bn.running_mean"].as_tensor()).unwrap();
        // channel 0 holds {0,1,2,3,8,9,10,11}: mean 5.5
        assert!((rm[0] - 0.55).abs() < 1e-12);
    }
}
