//! Finite-difference gradients.
//!
//! This is the independent oracle against which the tape's analytic
//! gradients are validated: it only ever calls the forward evaluation, so it
//! shares no code with the backward kernels. Central differences,
//! `(f(x+h) - f(x-h)) / 2h`, elementwise over each requested input. Meant to
//! run in double precision on small shapes.

use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Default step for double-precision checks.
pub const DEFAULT_STEP: f64 = 1e-4;

/// Numerically differentiates `f` (a scalar-valued function of `inputs`)
/// with respect to every element of every input.
pub fn finite_diff_grad<T, F>(inputs: &[Tensor<T>], f: F, h: T) -> Result<Vec<Tensor<T>>>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    if h <= T::ZERO {
        return Err(Error::contract(
            "finite_diff_grad",
            format!("step must be positive, got {h}"),
        ));
    }
    let two_h = h + h;
    let mut grads = Vec::with_capacity(inputs.len());
    for (which, input) in inputs.iter().enumerate() {
        let mut g = vec![T::ZERO; input.numel()];
        for e in 0..input.numel() {
            let fp = eval_shifted(inputs, which, e, h, &f)?;
            let fm = eval_shifted(inputs, which, e, T::ZERO - h, &f)?;
            g[e] = (fp - fm) / two_h;
        }
        grads.push(Tensor::from_vec(input.shape(), g)?);
    }
    Ok(grads)
}

fn eval_shifted<T, F>(inputs: &[Tensor<T>], which: usize, elem: usize, delta: T, f: &F) -> Result<T>
where
    T: Scalar,
    F: Fn(&[Tensor<T>]) -> Result<Tensor<T>>,
{
    let mut shifted: Vec<Tensor<T>> = inputs.to_vec();
    let mut data = inputs[which].data().to_vec();
    data[elem] += delta;
    shifted[which] = Tensor::from_vec(inputs[which].shape(), data)?;
    let out = f(&shifted)?;
    if out.numel() != 1 {
        return Err(Error::contract(
            "finite_diff_grad",
            format!("objective must be scalar, got shape {:?}", out.shape()),
        ));
    }
    out.item()
}

/// Relative error with an absolute floor: plain relative error for O(1)
/// entries, absolute comparison once both values are tiny, so truncation
/// noise in the difference quotient cannot blow up the ratio.
pub fn rel_error<T: Scalar>(a: T, b: T) -> T {
    let denom = a.abs().maximum(b.abs()).maximum(T::from_f64(1e-2));
    (a - b).abs() / denom
}

/// Largest [`rel_error`] over two same-shape tensors.
pub fn max_rel_error<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    debug_assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data().iter())
        .fold(T::ZERO, |acc, (&x, &y)| acc.maximum(rel_error(x, y)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::kernels;

    #[test]
    fn matches_analytic_gradient_of_sum_of_squares() {
        let x = Tensor::from_vec(&[3], vec![0.3, -0.7, 1.1]).unwrap();
        let grads = finite_diff_grad(
            &[x.clone()],
            |ins| Ok(kernels::sum_all(&kernels::mul(&ins[0], &ins[0])?)),
            DEFAULT_STEP,
        )
        .unwrap();
        for i in 0..3 {
            let want = 2.0 * x.at(&[i]);
            assert!((grads[0].at(&[i]) - want).abs() < 1e-9);
        }
    }

    #[test]
    fn rejects_non_scalar_objectives_and_bad_steps() {
        let x = Tensor::<f64>::full(&[2], 1.0).unwrap();
        assert!(finite_diff_grad(&[x.clone()], |ins| Ok(ins[0].clone()), 1e-4).is_err());
        assert!(finite_diff_grad(&[x], |ins| Ok(kernels::sum_all(&ins[0])), 0.0).is_err());
    }
}
