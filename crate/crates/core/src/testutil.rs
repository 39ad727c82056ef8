use num_complex::Complex64;

use crate::rng::{complex_normal_vec, stream, StreamRng};

pub fn rng(seed: u64) -> StreamRng {
    stream(seed, 99)
}

pub fn crandn_vec(rng: &mut StreamRng, len: usize) -> Vec<Complex64> {
    complex_normal_vec(rng, len)
}

pub fn max_abs_diff(a: &[Complex64], b: &[Complex64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max)
}

pub fn norm(a: &[Complex64]) -> f64 {
    a.iter().map(|c| c.norm_sqr()).sum::<f64>().sqrt()
}
