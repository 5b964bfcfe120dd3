//! Deterministic randomness. Everything stochastic in the crate draws from a
//! seeded ChaCha8 stream so runs are reproducible bit-for-bit.

use rand::{Rng as _, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub type Rng = ChaCha8Rng;

pub fn seeded(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Independent substream of a seed, for decoupling e.g. init from shuffling.
pub fn stream(seed: u64, stream: u64) -> Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

pub fn uniform_tensor<T: Scalar>(shape: &[usize], lo: f64, hi: f64, rng: &mut Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of_f64(lo + (hi - lo) * rng.random::<f64>()))
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data consistent")
}

/// Standard normal truncated at two standard deviations and rescaled so the
/// post-truncation standard deviation equals `std`.
pub fn truncated_normal_tensor<T: Scalar>(shape: &[usize], std: f64, rng: &mut Rng) -> Tensor<T> {
    // std of a standard normal truncated to [-2, 2]
    const TRUNC_STD: f64 = 0.879_625_661_033_374_7;
    let n: usize = shape.iter().product();
    let dist = rand_distr::StandardNormal;
    let data = (0..n)
        .map(|_| {
            let z = loop {
                let z: f64 = rng.sample(dist);
                if z.abs() <= 2.0 {
                    break z;
                }
            };
            T::of_f64(z * std / TRUNC_STD)
        })
        .collect();
    Tensor::from_vec(shape, data).expect("shape/data consistent")
}

/// Uniformly random permutation of `0..n` (Fisher-Yates).
pub fn permutation(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        let j = rng.random_range(0..=i);
        p.swap(i, j);
    }
    p
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_draws() {
        let a: Vec<f64> = {
            let mut r = seeded(5);
            (0..8).map(|_| r.random()).collect()
        };
        let b: Vec<f64> = {
            let mut r = seeded(5);
            (0..8).map(|_| r.random()).collect()
        };
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_independent() {
        let mut a = stream(5, 0);
        let mut b = stream(5, 1);
        let xa: f64 = a.random();
        let xb: f64 = b.random();
        assert_ne!(xa, xb);
    }

    #[test]
    fn permutation_is_bijection() {
        let mut rng = seeded(9);
        let p = permutation(100, &mut rng);
        let mut seen = vec![false; 100];
        for &i in &p {
            assert!(!seen[i]);
            seen[i] = true;
        }
    }

    #[test]
    fn truncated_normal_sample_std() {
        let mut rng = seeded(2);
        let t = truncated_normal_tensor::<f64>(&[20000], 0.125, &mut rng);
        let mean: f64 = t.data().iter().sum::<f64>() / 20000.0;
        let var: f64 = t.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 20000.0;
        let std = var.sqrt();
        assert!((std - 0.125).abs() / 0.125 < 0.05, "std {std}");
        assert!(t.data().iter().all(|v| v.abs() <= 2.0 * 0.125 / 0.8796257));
    }
}
