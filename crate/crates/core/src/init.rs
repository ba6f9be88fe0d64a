//! Deterministic parameter initialization.
//!
//! Each parameter draws from a stream seeded by (global seed, parameter name),
//! so adding or removing unrelated parameters (e.g. SE units) never shifts the
//! initial values of the others.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::tensor::Tensor;

fn fnv1a(bytes: &[u8], salt: u64) -> u64 {
    let mut h = 0xcbf29ce484222325u64 ^ salt;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

pub fn rng_for(seed: u64, name: &str) -> ChaCha8Rng {
    let mut key = [0u8; 32];
    for i in 0..4 {
        let h = fnv1a(name.as_bytes(), seed.wrapping_add(i as u64).wrapping_mul(0x9e3779b97f4a7c15));
        key[i * 8..(i + 1) * 8].copy_from_slice(&h.to_le_bytes());
    }
    ChaCha8Rng::from_seed(key)
}

/// He-normal: N(0, sqrt(2 / fan_in)), sampled by Box-Muller for a fixed layout.
pub fn he_normal(dims: &[usize], fan_in: usize, seed: u64, name: &str) -> Tensor {
    let mut rng = rng_for(seed, name);
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        let u1: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.random_range(0.0..1.0);
        let r = (-2.0 * u1.ln()).sqrt();
        let theta = 2.0 * std::f64::consts::PI * u2;
        data.push(std * r * theta.cos());
        if data.len() < n {
            data.push(std * r * theta.sin());
        }
    }
    Tensor::from_dims(dims, data).expect("he_normal: bad dims")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_name_same_seed_is_identical() {
        let a = he_normal(&[4, 3, 3, 3], 27, 42, "conv.w");
        let b = he_normal(&[4, 3, 3, 3], 27, 42, "conv.w");
        assert_eq!(a.data, b.data);
    }

    #[test]
    fn different_names_differ() {
        let a = he_normal(&[8], 8, 42, "a.w");
        let b = he_normal(&[8], 8, 42, "b.w");
        assert_ne!(a.data, b.data);
    }

    #[test]
    fn scale_tracks_fan_in() {
        let t = he_normal(&[10000], 50, 1, "big");
        let var: f64 = t.data.iter().map(|v| v * v).sum::<f64>() / t.data.len() as f64;
        let expect = 2.0 / 50.0;
        assert!((var - expect).abs() < 0.2 * expect, "var {var} vs {expect}");
    }
}
