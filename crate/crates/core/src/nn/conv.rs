//! 2-D convolution as patch-matrix products, with its own backward pass.
//!
//! Work is split per image and partial weight gradients are summed in batch
//! order, so results do not depend on the thread count.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor};
use num_traits::Float;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::nn::fused::add_channel_bias;
use crate::nn::params::ParamStore;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
struct Geometry {
    batch: usize,
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl Geometry {
    fn new(x: &[usize], k: &[usize], stride: usize, pad: usize) -> candle_core::Result<Self> {
        let [batch, c_in, h, w] = <[usize; 4]>::try_from(x)
            .map_err(|_| candle_core::Error::Msg(format!("conv input must be 4-D, got {x:?}")))?;
        let [c_out, k_in, kh, kw] = <[usize; 4]>::try_from(k)
            .map_err(|_| candle_core::Error::Msg(format!("conv kernel must be 4-D, got {k:?}")))?;
        if k_in != c_in {
            candle_core::bail!("conv expects {k_in} input channels, got {c_in}");
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            candle_core::bail!("conv kernel {kh}x{kw} larger than padded input {h}x{w}");
        }
        Ok(Self {
            batch,
            c_in,
            c_out,
            h,
            w,
            kh,
            kw,
            stride,
            pad,
            oh: (h + 2 * pad - kh) / stride + 1,
            ow: (w + 2 * pad - kw) / stride + 1,
        })
    }

    /// Output index range `[lo, hi)` whose input coordinate `o*s + k - p` lies in `[0, n)`.
    fn valid(&self, k: usize, n: usize, out: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if self.pad > k { (self.pad - k).div_ceil(s) } else { 0 };
        let hi = if n + self.pad > k {
            ((n - 1 + self.pad - k) / s + 1).min(out)
        } else {
            0
        };
        (lo, hi.max(lo))
    }
}

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    if !layout.is_contiguous() {
        candle_core::bail!("direct conv requires contiguous operands");
    }
    let start = layout.start_offset();
    Ok(&data[start..start + layout.shape().elem_count()])
}

/// Upper bound on column-buffer elements per chunk of output rows.
const COL_BUDGET: usize = 1 << 21;

fn rows_per_chunk(g: &Geometry, budget: usize) -> usize {
    (budget / (g.c_in * g.kh * g.kw * g.ow).max(1)).clamp(1, g.oh)
}

/// Patch matrix `(c_in·kh·kw, rows·ow)` for output rows `oy0..oy0+rows` of one image.
fn im2col<T: Float>(x: &[T], g: &Geometry, oy0: usize, rows: usize, cols: &mut [T]) {
    let np = rows * g.ow;
    let plane_in = g.h * g.w;
    for i in 0..g.c_in {
        let xin = &x[i * plane_in..][..plane_in];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid(ky, g.h, g.oh);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid(kx, g.w, g.ow);
                let r = (i * g.kh + ky) * g.kw + kx;
                let dst_row = &mut cols[r * np..][..np];
                for (j, oy) in (oy0..oy0 + rows).enumerate() {
                    let dst = &mut dst_row[j * g.ow..][..g.ow];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        dst.fill(T::zero());
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let xrow = &xin[iy * g.w..][..g.w];
                    dst[..ox_lo].fill(T::zero());
                    dst[ox_hi..].fill(T::zero());
                    if g.stride == 1 {
                        let start = ox_lo + kx - g.pad;
                        dst[ox_lo..ox_hi].copy_from_slice(&xrow[start..start + ox_hi - ox_lo]);
                    } else {
                        for ox in ox_lo..ox_hi {
                            dst[ox] = xrow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds a patch matrix back onto one image (adjoint of [`im2col`]).
fn col2im<T: Float>(cols: &[T], g: &Geometry, oy0: usize, rows: usize, x: &mut [T]) {
    let np = rows * g.ow;
    let plane_in = g.h * g.w;
    for i in 0..g.c_in {
        let xin = &mut x[i * plane_in..][..plane_in];
        for ky in 0..g.kh {
            let (oy_lo, oy_hi) = g.valid(ky, g.h, g.oh);
            for kx in 0..g.kw {
                let (ox_lo, ox_hi) = g.valid(kx, g.w, g.ow);
                if ox_lo >= ox_hi {
                    continue;
                }
                let r = (i * g.kh + ky) * g.kw + kx;
                let src_row = &cols[r * np..][..np];
                for (j, oy) in (oy0..oy0 + rows).enumerate() {
                    if oy < oy_lo || oy >= oy_hi {
                        continue;
                    }
                    let src = &src_row[j * g.ow..][..g.ow];
                    let iy = oy * g.stride + ky - g.pad;
                    let xrow = &mut xin[iy * g.w..][..g.w];
                    if g.stride == 1 {
                        let start = ox_lo + kx - g.pad;
                        for (d, &v) in xrow[start..start + ox_hi - ox_lo].iter_mut().zip(&src[ox_lo..ox_hi]) {
                            *d = *d + v;
                        }
                    } else {
                        for ox in ox_lo..ox_hi {
                            let ix = ox * g.stride + kx - g.pad;
                            xrow[ix] = xrow[ix] + src[ox];
                        }
                    }
                }
            }
        }
    }
}

/// `dst (m×n) = [dst +] lhs (m×k) · rhs (k×n)` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn matmul<T: Float + 'static>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    (dst_rs, dst_cs): (usize, usize),
    accumulate: bool,
    lhs: &[T],
    (lhs_rs, lhs_cs): (usize, usize),
    rhs: &[T],
    (rhs_rs, rhs_cs): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(dst.len() > (m - 1) * dst_rs + (n - 1) * dst_cs);
    assert!(k == 0 || lhs.len() > (m - 1) * lhs_rs + (k - 1) * lhs_cs);
    assert!(k == 0 || rhs.len() > (k - 1) * rhs_rs + (n - 1) * rhs_cs);
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            dst_cs as isize,
            dst_rs as isize,
            accumulate,
            lhs.as_ptr(),
            lhs_cs as isize,
            lhs_rs as isize,
            rhs.as_ptr(),
            rhs_cs as isize,
            rhs_rs as isize,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

trait Elem: Float + Send + Sync + 'static {}
impl<T: Float + Send + Sync + 'static> Elem for T {}

fn forward<T: Elem>(x: &[T], k: &[T], g: &Geometry, budget: usize) -> Vec<T> {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let kk = g.c_in * g.kh * g.kw;
    let chunk = rows_per_chunk(g, budget);
    let mut y = vec![T::zero(); g.batch * g.c_out * plane_out];
    y.par_chunks_mut(g.c_out * plane_out).enumerate().for_each(|(b, out)| {
        let xin = &x[b * g.c_in * plane_in..][..g.c_in * plane_in];
        let mut cols = vec![T::zero(); kk * chunk * g.ow];
        for oy0 in (0..g.oh).step_by(chunk) {
            let rows = chunk.min(g.oh - oy0);
            let np = rows * g.ow;
            im2col(xin, g, oy0, rows, &mut cols);
            matmul(g.c_out, np, kk, &mut out[oy0 * g.ow..], (plane_out, 1), false, k, (kk, 1), &cols, (np, 1));
        }
    });
    y
}

fn input_grad<T: Elem>(gy: &[T], k: &[T], g: &Geometry, budget: usize) -> Vec<T> {
    if g.stride == 1 && g.kh == g.kw && g.pad < g.kh {
        input_grad_transposed(gy, k, g, budget)
    } else {
        input_grad_scatter(gy, k, g, budget)
    }
}

/// Stride-1 input gradient as a convolution of `gy` with the flipped, transposed kernel.
fn input_grad_transposed<T: Elem>(gy: &[T], k: &[T], g: &Geometry, budget: usize) -> Vec<T> {
    let (kh, kw) = (g.kh, g.kw);
    let mut kt = vec![T::zero(); k.len()];
    for o in 0..g.c_out {
        for i in 0..g.c_in {
            for y in 0..kh {
                for x in 0..kw {
                    kt[((i * g.c_out + o) * kh + kh - 1 - y) * kw + kw - 1 - x] = k[((o * g.c_in + i) * kh + y) * kw + x];
                }
            }
        }
    }
    let gt = Geometry::new(&[g.batch, g.c_out, g.oh, g.ow], &[g.c_in, g.c_out, kh, kw], 1, kh - 1 - g.pad)
        .expect("transposed geometry is valid");
    debug_assert_eq!((gt.oh, gt.ow), (g.h, g.w));
    forward(gy, &kt, &gt, budget)
}

fn input_grad_scatter<T: Elem>(gy: &[T], k: &[T], g: &Geometry, budget: usize) -> Vec<T> {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let kk = g.c_in * g.kh * g.kw;
    let chunk = rows_per_chunk(g, budget);
    let mut gx = vec![T::zero(); g.batch * g.c_in * plane_in];
    gx.par_chunks_mut(g.c_in * plane_in).enumerate().for_each(|(b, gin)| {
        let gout = &gy[b * g.c_out * plane_out..][..g.c_out * plane_out];
        let mut cols = vec![T::zero(); kk * chunk * g.ow];
        for oy0 in (0..g.oh).step_by(chunk) {
            let rows = chunk.min(g.oh - oy0);
            let np = rows * g.ow;
            matmul(kk, np, g.c_out, &mut cols, (np, 1), false, k, (1, kk), &gout[oy0 * g.ow..], (plane_out, 1));
            col2im(&cols, g, oy0, rows, gin);
        }
    });
    gx
}

fn weight_grad<T: Elem>(x: &[T], gy: &[T], g: &Geometry, budget: usize) -> Vec<T> {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let kk = g.c_in * g.kh * g.kw;
    let chunk = rows_per_chunk(g, budget);
    // per-image partial sums, reduced in batch order for thread-count independence
    let partial: Vec<Vec<T>> = (0..g.batch)
        .into_par_iter()
        .map(|b| {
            let xin = &x[b * g.c_in * plane_in..][..g.c_in * plane_in];
            let gout = &gy[b * g.c_out * plane_out..][..g.c_out * plane_out];
            let mut gk = vec![T::zero(); g.c_out * kk];
            let mut cols = vec![T::zero(); kk * chunk * g.ow];
            for oy0 in (0..g.oh).step_by(chunk) {
                let rows = chunk.min(g.oh - oy0);
                let np = rows * g.ow;
                im2col(xin, g, oy0, rows, &mut cols);
                matmul(kk, g.c_out, np, &mut gk, (1, kk), true, &cols, (np, 1), &gout[oy0 * g.ow..], (1, plane_out));
            }
            gk
        })
        .collect();
    let mut gk = vec![T::zero(); g.c_out * kk];
    for p in partial {
        gk.iter_mut().zip(p).for_each(|(a, b)| *a = *a + b);
    }
    gk
}

macro_rules! dispatch {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $f:expr) => {
        match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32($f(contiguous(a, $l1)?, contiguous(b, $l2)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64($f(contiguous(a, $l1)?, contiguous(b, $l2)?))
            }
            _ => candle_core::bail!("direct conv supports matching f32 or f64 operands"),
        }
    };
}

struct ConvOp {
    stride: usize,
    pad: usize,
}

impl CustomOp2 for ConvOp {
    fn name(&self) -> &'static str {
        "direct-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geometry::new(l1.dims(), l2.dims(), self.stride, self.pad)?;
        let out = dispatch!(s1, l1, s2, l2, |x, k| forward(x, k, &g, COL_BUDGET));
        Ok((out, Shape::from((g.batch, g.c_out, g.oh, g.ow))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        kernel: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (_, _, h, w) = x.dims4()?;
        let gx = grad.apply_op2_no_bwd(
            kernel,
            &InputGradOp {
                stride: self.stride,
                pad: self.pad,
                h,
                w,
            },
        )?;
        let (_, _, kh, kw) = kernel.dims4()?;
        let gk = x.apply_op2_no_bwd(
            &grad,
            &WeightGradOp {
                stride: self.stride,
                pad: self.pad,
                kh,
                kw,
            },
        )?;
        Ok((Some(gx), Some(gk)))
    }
}

struct InputGradOp {
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

impl CustomOp2 for InputGradOp {
    fn name(&self) -> &'static str {
        "direct-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let gy_dims = l1.dims();
        let k_dims = l2.dims();
        let g = Geometry::new(
            &[gy_dims[0], k_dims[1], self.h, self.w],
            k_dims,
            self.stride,
            self.pad,
        )?;
        if (g.oh, g.ow, g.c_out) != (gy_dims[2], gy_dims[3], gy_dims[1]) {
            candle_core::bail!("conv grad shape {gy_dims:?} inconsistent with geometry");
        }
        let out = dispatch!(s1, l1, s2, l2, |gy, k| input_grad(gy, k, &g, COL_BUDGET));
        Ok((out, Shape::from((g.batch, g.c_in, g.h, g.w))))
    }
}

struct WeightGradOp {
    stride: usize,
    pad: usize,
    kh: usize,
    kw: usize,
}

impl CustomOp2 for WeightGradOp {
    fn name(&self) -> &'static str {
        "direct-conv2d-weight-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let x_dims = l1.dims();
        let gy_dims = l2.dims();
        let g = Geometry::new(
            x_dims,
            &[gy_dims[1], x_dims[1], self.kh, self.kw],
            self.stride,
            self.pad,
        )?;
        let out = dispatch!(s1, l1, s2, l2, |x, gy| weight_grad(x, gy, &g, COL_BUDGET));
        Ok((out, Shape::from((g.c_out, g.c_in, g.kh, g.kw))))
    }
}

/// `(B, Cin, H, W) ⊛ (Cout, Cin, kh, kw)` with zero padding, no bias.
pub fn conv2d(x: &Tensor, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
    if stride == 0 {
        return Err(Error::Config("conv stride must be >= 1".into()));
    }
    let x = x.contiguous()?;
    let kernel = kernel.contiguous()?;
    Ok(x.apply_op2(&kernel, ConvOp { stride, pad })?)
}

/// Convolution layer with bias.
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    stride: usize,
    pad: usize,
    in_channels: usize,
    out_channels: usize,
}

impl Conv2d {
    /// Square `kernel`, He-initialized weights, zero bias; `pad` defaults to
    /// "same" for stride 1.
    pub fn new(
        store: &mut ParamStore,
        path: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
    ) -> Result<Self> {
        let weight = store.kaiming(
            format!("{path}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            in_channels * kernel * kernel,
        )?;
        let bias = store.constant(format!("{path}.bias"), &[out_channels], 0.0)?;
        Ok(Self {
            weight: weight.as_tensor().clone(),
            bias: bias.as_tensor().clone(),
            stride,
            pad: kernel / 2,
            in_channels,
            out_channels,
        })
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn out_channels(&self) -> usize {
        self.out_channels
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let c = x.dim(1)?;
        if c != self.in_channels {
            return Err(Error::Shape(format!(
                "conv expects {} channels, got {c}",
                self.in_channels
            )));
        }
        let y = conv2d(x, &self.weight, self.stride, self.pad)?;
        add_channel_bias(&y, &self.bias)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand_tensor(shape: &[usize], seed: u64, dtype: DType) -> Tensor {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &Device::Cpu).unwrap().to_dtype(dtype).unwrap()
    }

    fn max_abs_diff(a: &Tensor, b: &Tensor) -> f64 {
        a.sub(b).unwrap().abs().unwrap().flatten_all().unwrap().max(0).unwrap()
            .to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
    }

    #[test]
    fn forward_matches_candle_reference() {
        for &(k, s, h, w) in &[(1, 1, 7, 5), (3, 1, 6, 9), (5, 1, 8, 8), (3, 2, 8, 8), (3, 2, 7, 9), (5, 2, 4, 4)] {
            let x = rand_tensor(&[2, 3, h, w], 1, DType::F64);
            let kern = rand_tensor(&[4, 3, k, k], 2, DType::F64);
            let ours = conv2d(&x, &kern, s, k / 2).unwrap();
            let reference = x.conv2d(&kern, k / 2, s, 1, 1).unwrap();
            assert_eq!(ours.dims(), reference.dims());
            assert!(max_abs_diff(&ours, &reference) < 1e-12, "k{k} s{s} {h}x{w}");
        }
    }

    #[test]
    fn gradients_match_finite_differences() {
        for &(k, s) in &[(3usize, 1usize), (5, 1), (3, 2), (1, 1)] {
            let x = Var::from_tensor(&rand_tensor(&[2, 2, 5, 6], 3, DType::F64)).unwrap();
            let kern = Var::from_tensor(&rand_tensor(&[3, 2, k, k], 4, DType::F64)).unwrap();
            let probe = rand_tensor(&[2, 3, (5 + 2 * (k / 2) - k) / s + 1, (6 + 2 * (k / 2) - k) / s + 1], 5, DType::F64);
            let loss = |x: &Tensor, kern: &Tensor| {
                conv2d(x, kern, s, k / 2).unwrap().mul(&probe).unwrap().sum_all().unwrap()
            };
            let grads = loss(x.as_tensor(), kern.as_tensor()).backward().unwrap();
            let eps = 1e-6;
            for (var, other, is_x) in [(&x, &kern, true), (&kern, &x, false)] {
                let g: Vec<f64> = grads.get(var.as_tensor()).unwrap().flatten_all().unwrap().to_vec1().unwrap();
                let base: Vec<f64> = var.as_tensor().flatten_all().unwrap().to_vec1().unwrap();
                for idx in (0..base.len()).step_by(3) {
                    let mut plus = base.clone();
                    plus[idx] += eps;
                    let mut minus = base.clone();
                    minus[idx] -= eps;
                    let tp = Tensor::from_vec(plus, var.dims(), &Device::Cpu).unwrap();
                    let tm = Tensor::from_vec(minus, var.dims(), &Device::Cpu).unwrap();
                    let (lp, lm) = if is_x {
                        (loss(&tp, other.as_tensor()), loss(&tm, other.as_tensor()))
                    } else {
                        (loss(other.as_tensor(), &tp), loss(other.as_tensor(), &tm))
                    };
                    let fd = (lp.to_scalar::<f64>().unwrap() - lm.to_scalar::<f64>().unwrap()) / (2.0 * eps);
                    assert!((fd - g[idx]).abs() < 1e-6 * (1.0 + fd.abs()), "k{k} s{s} idx {idx}: {fd} vs {}", g[idx]);
                }
            }
        }
    }

    #[test]
    fn chunked_rows_match_single_chunk() {
        let x: Vec<f64> = (0..2 * 3 * 9 * 7).map(|i| ((i * 37) % 11) as f64 - 5.0).collect();
        let k: Vec<f64> = (0..4 * 3 * 3 * 3).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
        for stride in [1, 2] {
            let g = Geometry::new(&[2, 3, 9, 7], &[4, 3, 3, 3], stride, 1).unwrap();
            let gy: Vec<f64> = (0..2 * 4 * g.oh * g.ow).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
            assert_eq!(forward(&x, &k, &g, 1), forward(&x, &k, &g, usize::MAX));
            assert_eq!(input_grad(&gy, &k, &g, 1), input_grad(&gy, &k, &g, usize::MAX));
            assert_eq!(weight_grad(&x, &gy, &g, 1), weight_grad(&x, &gy, &g, usize::MAX));
        }
    }

    #[test]
    fn transposed_input_grad_matches_scatter() {
        for (kk, pad) in [(1, 0), (3, 1), (5, 2), (3, 0), (5, 4)] {
            let g = Geometry::new(&[2, 3, 9, 7], &[4, 3, kk, kk], 1, pad).unwrap();
            let k: Vec<f64> = (0..4 * 3 * kk * kk).map(|i| ((i * 13) % 7) as f64 - 3.0).collect();
            let gy: Vec<f64> = (0..2 * 4 * g.oh * g.ow).map(|i| ((i * 7) % 5) as f64 - 2.0).collect();
            let a = input_grad_transposed(&gy, &k, &g, COL_BUDGET);
            let b = input_grad_scatter(&gy, &k, &g, COL_BUDGET);
            assert_eq!(a, b, "k{kk} pad{pad}");
        }
    }

    #[test]
    fn f32_path_matches_f64() {
        let x = rand_tensor(&[1, 4, 9, 9], 7, DType::F32);
        let kern = rand_tensor(&[2, 4, 3, 3], 8, DType::F32);
        let a = conv2d(&x, &kern, 1, 1).unwrap();
        let b = conv2d(&x.to_dtype(DType::F64).unwrap(), &kern.to_dtype(DType::F64).unwrap(), 1, 1).unwrap();
        assert!(max_abs_diff(&a.to_dtype(DType::F64).unwrap(), &b) < 1e-5);
    }
}
