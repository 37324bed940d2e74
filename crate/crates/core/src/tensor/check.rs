//! Central finite-difference gradient verification.

use super::Tensor;
use crate::error::{Error, Result};

/// Compare reverse-mode gradients of a scalar-valued function against
/// central finite differences, coordinate by coordinate.
///
/// Returns the maximum of `|analytic - numeric| / max(1, |analytic|,
/// |numeric|)` over every coordinate of every `requires_grad` input; frozen
/// inputs are skipped. The numeric side never touches the backward pass, so
/// it stands as an independent oracle for it.
pub fn grad_check<F>(f: F, inputs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&[Tensor]) -> Result<Tensor>,
{
    if eps <= 0.0 {
        return Err(Error::invalid("grad_check", "eps must be positive"));
    }
    for t in inputs {
        t.zero_grad();
    }
    let loss = f(inputs)?;
    if loss.numel() != 1 {
        return Err(Error::invalid(
            "grad_check",
            format!("function must return a scalar, got {:?}", loss.shape()),
        ));
    }
    loss.backward()?;

    let mut max_rel: f64 = 0.0;
    for t in inputs.iter().filter(|t| t.requires_grad()) {
        let analytic = t.grad().unwrap_or_else(|| vec![0.0; t.numel()]);
        for i in 0..t.numel() {
            let orig = t.data()[i];
            t.set_value(i, orig + eps);
            let fp = f(inputs)?.item();
            t.set_value(i, orig - eps);
            let fm = f(inputs)?.item();
            t.set_value(i, orig);
            let numeric = (fp - fm) / (2.0 * eps);
            if !numeric.is_finite() {
                return Err(Error::NonFinite { op: "grad_check" });
            }
            let rel = (analytic[i] - numeric).abs()
                / 1.0_f64.max(analytic[i].abs()).max(numeric.abs());
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
        Tensor::from_vec(data, shape).unwrap()
    }

    #[test]
    fn sum_of_squares_is_tight() {
        // f = sum(x^2): analytic gradient 2x, so the check is near machine
        // precision.
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_tensor(&mut rng, &[3, 4]).trainable();
        let err = grad_check(|ins| ins[0].sqr()?.sum_all(), &[x], 1e-5).unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn frozen_inputs_are_skipped() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_tensor(&mut rng, &[2, 2]).trainable();
        let frozen = random_tensor(&mut rng, &[2, 2]);
        let err = grad_check(
            |ins| ins[0].mul(&ins[1])?.sum_all(),
            &[x, frozen],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-7, "relative error {err}");
    }

    #[test]
    fn softmax_cross_entropy_composite() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_tensor(&mut rng, &[4, 5]).trainable();
        let w = random_tensor(&mut rng, &[5, 3]).trainable();
        let err = grad_check(
            |ins| ins[0].matmul(&ins[1])?.cross_entropy(&[0, 2, 1, 1]),
            &[x, w],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn two_layer_mlp_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_tensor(&mut rng, &[3, 6]);
        let w1 = random_tensor(&mut rng, &[6, 8]).trainable();
        let b1 = random_tensor(&mut rng, &[8]).trainable();
        let w2 = random_tensor(&mut rng, &[8, 4]).trainable();
        let b2 = random_tensor(&mut rng, &[4]).trainable();
        let xc = x.clone();
        let err = grad_check(
            move |ins| {
                xc.matmul(&ins[0])?
                    .add(&ins[1])?
                    .gelu()?
                    .matmul(&ins[2])?
                    .add(&ins[3])?
                    .sqr()?
                    .mean_all()
            },
            &[w1, b1, w2, b2],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "relative error {err}");
    }

    #[test]
    fn rejects_non_scalar_and_bad_eps() {
        let x = Tensor::from_vec(vec![1.0, 2.0], &[2]).unwrap().trainable();
        assert!(grad_check(|ins| ins[0].sqr(), &[x.clone()], 1e-5).is_err());
        assert!(grad_check(|ins| ins[0].sum_all(), &[x], 0.0).is_err());
    }
}
