//! Deterministic seeded randomness.
//!
//! Every random decision in a model (kernel noise, wiring, dataset shuffles)
//! is drawn from a ChaCha stream keyed by the master seed plus a derivation
//! path, so a model is reproducible bit-for-bit across runs and platforms
//! independently of iteration order. Floats and bounded integers are derived
//! from raw `next_u64` output here rather than through a distribution crate,
//! which pins the byte-to-value mapping for the lifetime of saved models.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

/// The deterministic generator used throughout the crate.
pub type Rng = ChaCha8Rng;

const DOMAIN_KERNEL: u8 = 0;
const DOMAIN_WIRING: u8 = 1;
const DOMAIN_SPLIT: u8 = 2;
const DOMAIN_SUBSAMPLE: u8 = 3;
const DOMAIN_VERIFY: u8 = 4;

fn stream(seed: u64, layer: u64, projection: u64, domain: u8) -> Rng {
    let mut key = [0u8; 32];
    key[..8].copy_from_slice(&seed.to_le_bytes());
    key[8..16].copy_from_slice(&layer.to_le_bytes());
    key[16..24].copy_from_slice(&projection.to_le_bytes());
    key[24] = domain;
    Rng::from_seed(key)
}

/// The noise stream for one projection kernel.
pub fn child_rng(seed: u64, layer: usize, projection: usize) -> Rng {
    stream(seed, layer as u64, projection as u64, DOMAIN_KERNEL)
}

/// The wiring stream for one projection; independent of the kernel stream.
pub(crate) fn wiring_rng(seed: u64, layer: usize, projection: usize) -> Rng {
    stream(seed, layer as u64, projection as u64, DOMAIN_WIRING)
}

/// Per-class shuffle stream for the deterministic train/test split.
pub(crate) fn split_rng(seed: u64, class: usize) -> Rng {
    stream(seed, class as u64, 0, DOMAIN_SPLIT)
}

/// Per-class shuffle stream for stratified subsampling.
pub(crate) fn subsample_rng(seed: u64, class: usize) -> Rng {
    stream(seed, class as u64, 0, DOMAIN_SUBSAMPLE)
}

/// Per-instance stream for the verification oracles.
pub(crate) fn verify_rng(seed: u64, instance: usize) -> Rng {
    stream(seed, instance as u64, 0, DOMAIN_VERIFY)
}

/// Uniform draw in [0, 1) with 53 bits of precision.
#[inline]
pub fn unit_f64(rng: &mut impl RngCore) -> f64 {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    (rng.next_u64() >> 11) as f64 * SCALE
}

/// Uniform index in [0, n) via rejection sampling (no modulo bias).
pub fn uniform_index(rng: &mut impl RngCore, n: usize) -> usize {
    assert!(n > 0, "uniform_index requires n > 0");
    let span = n as u64;
    let zone = (u64::MAX / span) * span;
    loop {
        let x = rng.next_u64();
        if x < zone {
            return (x % span) as usize;
        }
    }
}

/// Deterministic Fisher-Yates shuffle.
pub fn shuffle<T>(rng: &mut impl RngCore, items: &mut [T]) {
    for i in (1..items.len()).rev() {
        let j = uniform_index(rng, i + 1);
        items.swap(i, j);
    }
}
