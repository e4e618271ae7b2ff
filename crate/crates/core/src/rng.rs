//! Seeded randomness. Every stochastic component draws from a ChaCha stream
//! so runs are reproducible across platforms.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::tensor::Tensor;

pub type DetRng = ChaCha8Rng;

pub fn seeded(seed: u64) -> DetRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives an independent stream from a base seed and a label.
pub fn derived(seed: u64, label: &str) -> DetRng {
    seeded(seed ^ fnv1a(label.as_bytes()).rotate_left(17))
}

/// 64-bit FNV-1a; stable across Rust versions, unlike `DefaultHasher`.
pub fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    h
}

pub fn normal_tensor(shape: &[usize], std: f64, rng: &mut DetRng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}

pub fn uniform_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut DetRng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape and data agree")
}
