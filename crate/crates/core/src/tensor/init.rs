//! Deterministic weight initialisers. All randomness flows through the
//! caller's seeded RNG.

use rand::Rng;

use super::Tensor;

/// Normal(0, std) truncated at two standard deviations by resampling.
pub fn trunc_normal<R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let mut data = Vec::with_capacity(n);
    while data.len() < n {
        // Box-Muller keeps the dependency surface small and the stream
        // reproducible.
        let u1: f64 = rng.random::<f64>().max(1e-300);
        let u2: f64 = rng.random();
        let z = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        if z.abs() <= 2.0 {
            data.push(z * std);
        }
    }
    Tensor::from_vec(data, shape).expect("shape matches data")
}

pub fn uniform<R: Rng>(rng: &mut R, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.random::<f64>()).collect();
    Tensor::from_vec(data, shape).expect("shape matches data")
}

/// He-style initialisation for a conv weight (KH,KW,Cin,Cout):
/// truncated normal with std sqrt(2 / fan_in).
pub fn he_normal<R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize) -> Tensor {
    trunc_normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}
