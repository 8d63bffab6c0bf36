//! Per-channel kernels with hand-written backward passes. The generic
//! broadcast ops reduce over strided axes on the way back, which dominates
//! step time for `(B, C, H, W)` maps.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, CustomOp3, Layout, Shape, Storage, Tensor, WithDType};
use num_traits::{Float, NumCast};

use crate::error::Result;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout) -> candle_core::Result<&'a [T]> {
    if !layout.is_contiguous() {
        candle_core::bail!("fused kernels require contiguous operands");
    }
    let start = layout.start_offset();
    Ok(&data[start..start + layout.shape().elem_count()])
}

fn f64_of<T: Float>(v: T) -> f64 {
    v.to_f64().unwrap_or(f64::NAN)
}

fn cast<T: Float>(v: f64) -> T {
    <T as NumCast>::from(v).expect("finite cast")
}

/// `(batch, channels, plane)` for an N-D tensor laid out channel-second.
fn split_dims(dims: &[usize]) -> candle_core::Result<(usize, usize, usize)> {
    if dims.len() < 2 {
        candle_core::bail!("expected at least 2 dims, got {dims:?}");
    }
    Ok((dims[0], dims[1], dims[2..].iter().product()))
}

#[cfg(test)]
fn values(t: &Tensor) -> candle_core::Result<Vec<f64>> {
    t.to_dtype(candle_core::DType::F64)?.flatten_all()?.to_vec1()
}

fn tensor_like(v: Vec<f64>, like: &Tensor, dims: &[usize]) -> candle_core::Result<Tensor> {
    Tensor::from_vec(v, dims, like.device())?.to_dtype(like.dtype())
}

/// Evaluates `$body` with `$v` bound to the contiguous CPU data of `$t`.
macro_rules! with_data {
    ($t:expr, |$v:ident| $body:expr) => {{
        let t = $t.contiguous()?;
        let (s, l) = t.storage_and_layout();
        match &*s {
            Storage::Cpu(CpuStorage::F32(a)) => {
                let $v = contiguous(a, l)?;
                $body
            }
            Storage::Cpu(CpuStorage::F64(a)) => {
                let $v = contiguous(a, l)?;
                $body
            }
            _ => candle_core::bail!("fused kernels support f32 or f64 on the CPU"),
        }
    }};
}

/// Like `with_data!` for two tensors of the same dtype.
macro_rules! with_pair {
    ($a:expr, $b:expr, |$x:ident, $y:ident| $body:expr) => {{
        let a = $a.contiguous()?;
        let b = $b.contiguous()?;
        let (sa, la) = a.storage_and_layout();
        let (sb, lb) = b.storage_and_layout();
        match (&*sa, &*sb) {
            (Storage::Cpu(CpuStorage::F32(p)), Storage::Cpu(CpuStorage::F32(q))) => {
                let ($x, $y) = (contiguous(p, la)?, contiguous(q, lb)?);
                $body
            }
            (Storage::Cpu(CpuStorage::F64(p)), Storage::Cpu(CpuStorage::F64(q))) => {
                let ($x, $y) = (contiguous(p, la)?, contiguous(q, lb)?);
                $body
            }
            _ => candle_core::bail!("fused kernels need matching f32 or f64 CPU operands"),
        }
    }};
}

macro_rules! unary_storage {
    ($s:expr, $l:expr, $f:expr) => {
        match $s {
            CpuStorage::F32(a) => CpuStorage::F32($f(contiguous(a, $l)?)),
            CpuStorage::F64(a) => CpuStorage::F64($f(contiguous(a, $l)?)),
            _ => candle_core::bail!("fused kernels support f32 or f64"),
        }
    };
}

/// Sums over every axis except axis 1.
fn channel_sums<T: Float>(v: &[T], dims: &[usize]) -> candle_core::Result<Vec<f64>> {
    let (b, c, plane) = split_dims(dims)?;
    let mut out = vec![0.0; c];
    for n in 0..b {
        for (ch, acc) in out.iter_mut().enumerate() {
            let base = (n * c + ch) * plane;
            *acc += v[base..base + plane].iter().map(|&x| f64_of(x)).sum::<f64>();
        }
    }
    Ok(out)
}

struct ChannelBias;

impl CustomOp2 for ChannelBias {
    fn name(&self) -> &'static str {
        "channel-bias"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Float>(x: &[T], bias: &[T], dims: &[usize]) -> candle_core::Result<Vec<T>> {
            let (_, c, plane) = split_dims(dims)?;
            let mut out = Vec::with_capacity(x.len());
            for (i, p) in x.chunks(plane).enumerate() {
                let b = bias[i % c];
                out.extend(p.iter().map(|&v| v + b));
            }
            Ok(out)
        }
        let dims = l1.dims();
        if l2.dims() != [dims[1]] {
            candle_core::bail!("bias of shape {:?} for {} channels", l2.dims(), dims[1]);
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(b)) => CpuStorage::F32(run(contiguous(x, l1)?, contiguous(b, l2)?, dims)?),
            (CpuStorage::F64(x), CpuStorage::F64(b)) => CpuStorage::F64(run(contiguous(x, l1)?, contiguous(b, l2)?, dims)?),
            _ => candle_core::bail!("channel bias needs matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, _x: &Tensor, bias: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let gb = with_data!(grad, |g| channel_sums(g, grad.dims())?);
        Ok((Some(grad.clone()), Some(tensor_like(gb, bias, bias.dims())?)))
    }
}

/// Adds `bias[c]` to every element of channel `c` of a `(B, C, ...)` tensor.
pub fn add_channel_bias(x: &Tensor, bias: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&bias.contiguous()?, ChannelBias)?)
}

/// Per-channel mean and biased variance, accumulated in f64.
fn channel_moments<T: Float>(v: &[T], dims: &[usize]) -> candle_core::Result<(Vec<f64>, Vec<f64>)> {
    let (b, c, plane) = split_dims(dims)?;
    let n = (b * plane) as f64;
    let mean: Vec<f64> = channel_sums(v, dims)?.into_iter().map(|s| s / n).collect();
    let mut var = vec![0.0; c];
    for (i, p) in v.chunks(plane).enumerate() {
        let m = mean[i % c];
        var[i % c] += p
            .iter()
            .map(|x| {
                let d = f64_of(*x) - m;
                d * d
            })
            .sum::<f64>();
    }
    var.iter_mut().for_each(|s| *s /= n);
    Ok((mean, var))
}

fn batch_norm_backward<T: Float + WithDType>(
    x: &[T],
    g: &[T],
    gamma: &[f64],
    mean: &[f64],
    invstd: &[f64],
    dims: &[usize],
    like: &Tensor,
) -> candle_core::Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let (b, c, plane) = split_dims(dims)?;
    let n = (b * plane) as f64;
    let mut dbeta = vec![0.0; c];
    let mut dgamma = vec![0.0; c];
    for (i, (xp, gp)) in x.chunks(plane).zip(g.chunks(plane)).enumerate() {
        let ch = i % c;
        let (m, s) = (mean[ch], invstd[ch]);
        let (mut sb, mut sg) = (0.0, 0.0);
        for (&xv, &gv) in xp.iter().zip(gp) {
            let gv = f64_of(gv);
            sb += gv;
            sg += gv * (f64_of(xv) - m) * s;
        }
        dbeta[ch] += sb;
        dgamma[ch] += sg;
    }
    let mut dx = Vec::with_capacity(x.len());
    for (i, (xp, gp)) in x.chunks(plane).zip(g.chunks(plane)).enumerate() {
        let ch = i % c;
        let (m, s) = (mean[ch], invstd[ch]);
        let k0 = gamma[ch] * s;
        // dx = k0 * (g - dbeta/n - (x - m) * s * dgamma/n), expanded to a*g + b*x + c
        let a: T = cast(k0);
        let bx: T = cast(-k0 * s * dgamma[ch] / n);
        let c0: T = cast(-k0 * dbeta[ch] / n + k0 * m * s * dgamma[ch] / n);
        dx.extend(xp.iter().zip(gp).map(|(&xv, &gv)| a * gv + bx * xv + c0));
    }
    Ok((Tensor::from_vec(dx, dims, like.device())?, dgamma, dbeta))
}

fn apply_batch_norm<T: Float>(x: &[T], gamma: &[T], beta: &[T], mean: &[f64], invstd: &[f64], c: usize, plane: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for (i, p) in x.chunks(plane).enumerate() {
        let ch = i % c;
        let (g, b) = (f64_of(gamma[ch]), f64_of(beta[ch]));
        let scale: T = cast(g * invstd[ch]);
        let shift: T = cast(b - mean[ch] * g * invstd[ch]);
        out.extend(p.iter().map(|&v| v * scale + shift));
    }
    out
}

/// Training-mode batch normalization with statistics fixed at construction.
struct BatchNormOp {
    mean: Vec<f64>,
    invstd: Vec<f64>,
}

impl CustomOp3 for BatchNormOp {
    fn name(&self) -> &'static str {
        "batch-norm-train"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
        s3: &CpuStorage,
        l3: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l1.dims();
        let (_, c, plane) = split_dims(dims)?;
        let out = match (s1, s2, s3) {
            (CpuStorage::F32(x), CpuStorage::F32(g), CpuStorage::F32(b)) => {
                CpuStorage::F32(apply_batch_norm(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(b, l3)?, &self.mean, &self.invstd, c, plane))
            }
            (CpuStorage::F64(x), CpuStorage::F64(g), CpuStorage::F64(b)) => {
                CpuStorage::F64(apply_batch_norm(contiguous(x, l1)?, contiguous(g, l2)?, contiguous(b, l3)?, &self.mean, &self.invstd, c, plane))
            }
            _ => candle_core::bail!("batch norm needs matching f32 or f64 operands"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>, Option<Tensor>)> {
        let gamma_v: Vec<f64> = gamma.to_dtype(candle_core::DType::F64)?.to_vec1()?;
        let (dx, dgamma, dbeta) = with_pair!(x, grad, |xv, gv| batch_norm_backward(
            xv,
            gv,
            &gamma_v,
            &self.mean,
            &self.invstd,
            x.dims(),
            x
        )?);
        Ok((
            Some(dx),
            Some(tensor_like(dgamma, gamma, gamma.dims())?),
            Some(tensor_like(dbeta, beta, beta.dims())?),
        ))
    }
}

/// Normalizes each channel of `(B, C, H, W)` by its batch statistics and
/// applies the affine map. Returns the output, the batch mean and the biased
/// batch variance.
pub fn batch_norm_train(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<(Tensor, Vec<f64>, Vec<f64>)> {
    let x = x.contiguous()?;
    let moments = || -> candle_core::Result<_> { Ok(with_data!(x, |v| channel_moments(v, x.dims())?)) };
    let (mean, var) = moments()?;
    let invstd = var.iter().map(|s| 1.0 / (s + eps).sqrt()).collect();
    let y = x.apply_op3(&gamma.contiguous()?, &beta.contiguous()?, BatchNormOp { mean: mean.clone(), invstd })?;
    Ok((y, mean, var))
}

struct Relu;

impl CustomOp1 for Relu {
    fn name(&self) -> &'static str {
        "relu"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        fn run<T: Float>(x: &[T]) -> Vec<T> {
            x.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect()
        }
        Ok((unary_storage!(s, l, run), l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        fn run<T: Float + WithDType>(x: &[T], g: &[T], like: &Tensor) -> candle_core::Result<Tensor> {
            let v: Vec<T> = x.iter().zip(g).map(|(&x, &g)| if x > T::zero() { g } else { T::zero() }).collect();
            Tensor::from_vec(v, like.dims(), like.device())
        }
        Ok(Some(with_pair!(x, grad, |xv, gv| run(xv, gv, x)?)))
    }
}

/// `max(x, 0)` with a single-pass backward.
pub fn relu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Relu)?)
}

/// Source taps of output index `o` along an axis of length `n` for 2x
/// half-pixel linear upsampling.
fn taps(o: usize, n: usize) -> [(usize, f64); 2] {
    let i = o / 2;
    let other = if o % 2 == 0 { i.saturating_sub(1) } else { (i + 1).min(n - 1) };
    [(i, 0.75), (other, 0.25)]
}

struct Upsample2x;

impl CustomOp1 for Upsample2x {
    fn name(&self) -> &'static str {
        "upsample2x"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let dims = l.dims();
        let [b, c, h, w] = <[usize; 4]>::try_from(dims).map_err(|_| candle_core::Error::Msg("upsample expects 4-D input".into()))?;
        fn run<T: Float>(x: &[T], h: usize, w: usize) -> Vec<T> {
            let (oh, ow) = (2 * h, 2 * w);
            let mut out = Vec::with_capacity(x.len() * 4);
            let rows: Vec<[(usize, T); 2]> = (0..oh).map(|o| taps(o, h).map(|(i, wt)| (i, cast(wt)))).collect();
            let cols: Vec<[(usize, T); 2]> = (0..ow).map(|o| taps(o, w).map(|(i, wt)| (i, cast(wt)))).collect();
            for p in x.chunks(h * w) {
                for [(y0, wy0), (y1, wy1)] in &rows {
                    let (r0, r1) = (&p[y0 * w..][..w], &p[y1 * w..][..w]);
                    for [(x0, wx0), (x1, wx1)] in &cols {
                        let top = r0[*x0] * *wx0 + r0[*x1] * *wx1;
                        let bottom = r1[*x0] * *wx0 + r1[*x1] * *wx1;
                        out.push(top * *wy0 + bottom * *wy1);
                    }
                }
            }
            out
        }
        let out = unary_storage!(s, l, |x| run(x, h, w));
        Ok((out, Shape::from((b, c, 2 * h, 2 * w))))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        fn run<T: Float + WithDType>(g: &[T], like: &Tensor) -> candle_core::Result<Tensor> {
            let (_, _, h, w) = like.dims4()?;
            let (oh, ow) = (2 * h, 2 * w);
            let rows: Vec<[(usize, T); 2]> = (0..oh).map(|o| taps(o, h).map(|(i, wt)| (i, cast(wt)))).collect();
            let cols: Vec<[(usize, T); 2]> = (0..ow).map(|o| taps(o, w).map(|(i, wt)| (i, cast(wt)))).collect();
            let mut dx = vec![T::zero(); like.elem_count()];
            let mut tmp = vec![T::zero(); w];
            for (p, gp) in dx.chunks_mut(h * w).zip(g.chunks(oh * ow)) {
                for (oy, [(y0, wy0), (y1, wy1)]) in rows.iter().enumerate() {
                    tmp.fill(T::zero());
                    for (ox, [(x0, wx0), (x1, wx1)]) in cols.iter().enumerate() {
                        let gv = gp[oy * ow + ox];
                        tmp[*x0] = tmp[*x0] + gv * *wx0;
                        tmp[*x1] = tmp[*x1] + gv * *wx1;
                    }
                    for (xx, &t) in tmp.iter().enumerate() {
                        p[y0 * w + xx] = p[y0 * w + xx] + t * *wy0;
                        p[y1 * w + xx] = p[y1 * w + xx] + t * *wy1;
                    }
                }
            }
            Tensor::from_vec(dx, like.dims(), like.device())
        }
        Ok(Some(with_data!(grad, |g| run(g, x)?)))
    }
}

/// 2x bilinear upsampling (half-pixel centers, clamped edges) of `(B, C, H, W)`.
pub fn upsample2x_op(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Upsample2x)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};

    fn rand_vec(n: usize, seed: u64) -> Vec<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Central differences of `f` at `x0`, in f64.
    fn numeric_grad(x0: &[f64], f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
        let h = 1e-6;
        (0..x0.len())
            .map(|i| {
                let mut a = x0.to_vec();
                let mut b = x0.to_vec();
                a[i] += h;
                b[i] -= h;
                (f(&a) - f(&b)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(a: &[f64], b: &[f64], tol: f64) {
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() <= tol * (1.0 + y.abs()), "{x} vs {y}");
        }
    }

    #[test]
    fn batch_norm_gradients() {
        let dims = [2, 3, 2, 3];
        let dev = Device::Cpu;
        let x0 = rand_vec(36, 1);
        let gamma0 = vec![0.5, -1.5, 2.0];
        let beta0 = vec![0.1, 0.2, -0.3];
        let weights = rand_vec(36, 2);
        let w = Tensor::from_vec(weights.clone(), &dims, &dev).unwrap();
        let loss = |x: &[f64], g: &[f64], b: &[f64]| -> f64 {
            let xt = Tensor::from_vec(x.to_vec(), &dims, &dev).unwrap();
            let gt = Tensor::from_vec(g.to_vec(), 3, &dev).unwrap();
            let bt = Tensor::from_vec(b.to_vec(), 3, &dev).unwrap();
            let (y, _, _) = batch_norm_train(&xt, &gt, &bt, 1e-5).unwrap();
            (y * &w).unwrap().sum_all().unwrap().to_scalar().unwrap()
        };
        let xv = Var::from_tensor(&Tensor::from_vec(x0.clone(), &dims, &dev).unwrap()).unwrap();
        let gv = Var::from_tensor(&Tensor::from_vec(gamma0.clone(), 3, &dev).unwrap()).unwrap();
        let bv = Var::from_tensor(&Tensor::from_vec(beta0.clone(), 3, &dev).unwrap()).unwrap();
        let (y, mean, _) = batch_norm_train(xv.as_tensor(), gv.as_tensor(), bv.as_tensor(), 1e-5).unwrap();
        let grads = (y * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let analytic = |v: &Var| values(grads.get(v.as_tensor()).unwrap()).unwrap();
        assert_close(&analytic(&xv), &numeric_grad(&x0, |x| loss(x, &gamma0, &beta0)), 1e-5);
        assert_close(&analytic(&gv), &numeric_grad(&gamma0, |g| loss(&x0, g, &beta0)), 1e-5);
        assert_close(&analytic(&bv), &numeric_grad(&beta0, |b| loss(&x0, &gamma0, b)), 1e-5);
        let m0: f64 = (0..2).flat_map(|n| x0[n * 18..n * 18 + 6].to_vec()).sum::<f64>() / 12.0;
        assert!((mean[0] - m0).abs() < 1e-12);
    }

    #[test]
    fn channel_bias_matches_broadcast() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::from_vec(rand_vec(24, 3), (2, 3, 4), &dev).unwrap()).unwrap();
        let b = Var::from_tensor(&Tensor::new(&[1.0f64, -2.0, 0.5], &dev).unwrap()).unwrap();
        let ours = add_channel_bias(x.as_tensor(), b.as_tensor()).unwrap();
        let reference = x.as_tensor().broadcast_add(&b.as_tensor().reshape((1, 3, 1)).unwrap()).unwrap();
        assert_close(&values(&ours).unwrap(), &values(&reference).unwrap(), 0.0);
        let w = Tensor::from_vec(rand_vec(24, 4), (2, 3, 4), &dev).unwrap();
        let g = (ours * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gr = (reference * &w).unwrap().sum_all().unwrap().backward().unwrap();
        for v in [&x, &b] {
            let a = values(g.get(v.as_tensor()).unwrap()).unwrap();
            let r = values(gr.get(v.as_tensor()).unwrap()).unwrap();
            assert_close(&a, &r, 1e-12);
        }
    }

    #[test]
    fn upsample_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let dims = [1, 2, 3, 2];
        let x0 = rand_vec(12, 5);
        let w = Tensor::from_vec(rand_vec(48, 6), (1, 2, 6, 4), &dev).unwrap();
        let loss = |x: &[f64]| -> f64 {
            let t = Tensor::from_vec(x.to_vec(), &dims, &dev).unwrap();
            (upsample2x_op(&t).unwrap() * &w).unwrap().sum_all().unwrap().to_scalar().unwrap()
        };
        let v = Var::from_tensor(&Tensor::from_vec(x0.clone(), &dims, &dev).unwrap()).unwrap();
        let g = (upsample2x_op(v.as_tensor()).unwrap() * &w).unwrap().sum_all().unwrap().backward().unwrap();
        assert_close(&values(g.get(v.as_tensor()).unwrap()).unwrap(), &numeric_grad(&x0, loss), 1e-6);
    }

    #[test]
    fn relu_matches_candle() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::from_vec(rand_vec(30, 8), (2, 3, 5), &dev).unwrap()).unwrap();
        let w = Tensor::from_vec(rand_vec(30, 9), (2, 3, 5), &dev).unwrap();
        let ours = relu(x.as_tensor()).unwrap();
        let reference = x.as_tensor().relu().unwrap();
        assert_close(&values(&ours).unwrap(), &values(&reference).unwrap(), 0.0);
        let g = (ours * &w).unwrap().sum_all().unwrap().backward().unwrap();
        let gr = (reference * &w).unwrap().sum_all().unwrap().backward().unwrap();
        assert_close(
            &values(g.get(x.as_tensor()).unwrap()).unwrap(),
            &values(gr.get(x.as_tensor()).unwrap()).unwrap(),
            0.0,
        );
    }

    #[test]
    fn f32_batch_norm_agrees_with_f64() {
        let dev = Device::Cpu;
        let x = Tensor::from_vec(rand_vec(48, 7), (2, 2, 3, 4), &dev).unwrap();
        let g = Tensor::new(&[1.5f64, 0.5], &dev).unwrap();
        let b = Tensor::new(&[0.0f64, 1.0], &dev).unwrap();
        let (y64, _, _) = batch_norm_train(&x, &g, &b, 1e-5).unwrap();
        let f = |t: &Tensor| t.to_dtype(DType::F32).unwrap();
        let (y32, _, _) = batch_norm_train(&f(&x), &f(&g), &f(&b), 1e-5).unwrap();
        assert_close(&values(&y32).unwrap(), &values(&y64).unwrap(), 1e-5);
    }
}
