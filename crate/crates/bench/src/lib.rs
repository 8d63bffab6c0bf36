//! Fixtures shared by the criterion benches.

use candle_core::{Device, Tensor};
use paraformer::{LabelGrid, VOID};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard-normal `f32` tensor on the CPU.
pub fn normal(shape: &[usize]) -> Tensor {
    Tensor::randn(0f32, 1.0, shape, &Device::Cpu).expect("allocating a bench tensor")
}

/// Labels in `0..classes` with about `void_rate` of the pixels void.
pub fn labels(rng: &mut ChaCha8Rng, h: usize, w: usize, classes: u8, void_rate: f64) -> LabelGrid {
    let data = (0..h * w)
        .map(|_| if rng.random_bool(void_rate) { VOID } else { rng.random_range(0..classes) })
        .collect();
    LabelGrid::from_vec(h, w, data).expect("label dims match")
}
