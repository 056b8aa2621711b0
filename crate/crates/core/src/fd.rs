//! Central-difference gradient verification.
//!
//! `fd_check` is the acceptance oracle for the whole tensor engine: it
//! compares the tape's analytic gradient of a scalar-valued function
//! against `(f(x+h e_i) - f(x-h e_i)) / 2h` per coordinate and returns the
//! worst relative error, with `max(1, |fd|, |grad|)` in the denominator so
//! near-zero coordinates are judged absolutely.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorId};

/// A scalar-valued tensor function built on a fresh tape per call.
pub trait TensorFn<T: Scalar>: Fn(&mut Tape<T>, TensorId) -> Result<TensorId> {}
impl<T: Scalar, F: Fn(&mut Tape<T>, TensorId) -> Result<TensorId>> TensorFn<T> for F {}

fn eval_scalar<T: Scalar>(f: &impl TensorFn<T>, x: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let out = f(&mut tape, xid)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Usage(format!(
            "fd_check requires a scalar-valued function, got output shape {:?}",
            tape.shape(out)
        )));
    }
    Ok(tape.data(out)[0])
}

/// Max relative error between analytic and central-difference gradients
/// over every coordinate of `x`. `h` must lie in `[1e-6, 1e-3]`.
pub fn fd_check<T: Scalar>(f: impl TensorFn<T>, x: &Tensor<T>, h: T) -> Result<T> {
    let coords: Vec<usize> = (0..x.numel()).collect();
    fd_check_at(f, x, h, &coords)
}

/// `fd_check` restricted to the given coordinates; used where the full
/// sweep is too expensive (whole-model checks sample coordinates).
pub fn fd_check_at<T: Scalar>(
    f: impl TensorFn<T>,
    x: &Tensor<T>,
    h: T,
    coords: &[usize],
) -> Result<T> {
    let (lo, hi) = (T::from_f64_c(1e-6), T::from_f64_c(1e-3));
    if h < lo || h > hi {
        return Err(Error::Usage(format!("fd_check step must lie in [1e-6, 1e-3], got {h}")));
    }
    if let Some(&bad) = coords.iter().find(|&&c| c >= x.numel()) {
        return Err(Error::Usage(format!(
            "fd_check coordinate {bad} out of range for a tensor of {} elements",
            x.numel()
        )));
    }

    // Analytic gradient from one taped forward/backward.
    let mut tape = Tape::new();
    let xid = tape.param(x.clone());
    let out = f(&mut tape, xid)?;
    if tape.value(out).numel() != 1 {
        return Err(Error::Usage(format!(
            "fd_check requires a scalar-valued function, got output shape {:?}",
            tape.shape(out)
        )));
    }
    tape.backward(out)?;
    let grad = tape.grad(xid).expect("param gradient").to_vec();

    let two_h = h + h;
    let mut worst = T::zero();
    for &i in coords {
        let mut plus = x.clone();
        let mut minus = x.clone();
        {
            let base = x.data()[i];
            perturb(&mut plus, i, base + h);
            perturb(&mut minus, i, base - h);
        }
        let fp = eval_scalar(&f, &plus)?;
        let fm = eval_scalar(&f, &minus)?;
        let fd = (fp - fm) / two_h;
        let denom = T::one().max(fd.abs()).max(grad[i].abs());
        let err = (fd - grad[i]).abs() / denom;
        worst = worst.max(err);
    }
    Ok(worst)
}

fn perturb<T: Scalar>(t: &mut Tensor<T>, i: usize, v: T) {
    // Rebuild through the public constructor to keep invariants centralized.
    let mut data = t.data().to_vec();
    data[i] = v;
    *t = Tensor::new(t.shape().to_vec(), data).expect("same-shape rebuild");
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_is_exact_under_fd() {
        let x = Tensor::<f64>::matrix(2, 3, vec![0.3, -1.2, 0.7, 2.0, -0.5, 0.1]).unwrap();
        let err = fd_check(|t: &mut Tape<f64>, x| t.sum(x), &x, 1e-4).unwrap();
        assert!(err < 1e-10, "linear FD should be near-exact, got {err}");
    }

    #[test]
    fn sigmoid_sum_at_zero_has_quarter_gradient() {
        let x = Tensor::<f64>::vector(vec![0.0; 5]);
        let mut tape = Tape::new();
        let xi = tape.param(x.clone());
        let s = tape.sigmoid(xi).unwrap();
        let loss = tape.sum(s).unwrap();
        tape.backward(loss).unwrap();
        for &g in tape.grad(xi).unwrap() {
            assert!((g - 0.25).abs() < 1e-15);
        }
        let err = fd_check(
            |t: &mut Tape<f64>, x| {
                let s = t.sigmoid(x)?;
                t.sum(s)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-8, "sigmoid FD error {err}");
    }

    #[test]
    fn composite_chain_passes_fd() {
        // linear -> gelu -> softmax -> weighted sum
        let x = Tensor::<f64>::matrix(2, 3, vec![0.4, -0.8, 1.3, 0.2, 0.9, -1.1]).unwrap();
        let err = fd_check(
            |t: &mut Tape<f64>, x| {
                let w = t.constant(
                    Tensor::matrix(3, 3, vec![0.5, -0.2, 0.1, 0.3, 0.8, -0.4, -0.6, 0.2, 0.7])
                        .unwrap(),
                );
                let b = t.constant(Tensor::vector(vec![0.05, -0.1, 0.2]));
                let lin = t.linear(x, w, b)?;
                let act = t.gelu(lin)?;
                let sm = t.softmax_rows(act)?;
                let c = t.constant(
                    Tensor::matrix(2, 3, vec![1.0, -2.0, 0.5, 0.25, 3.0, -1.5]).unwrap(),
                );
                let weighted = t.mul(sm, c)?;
                t.sum(weighted)
            },
            &x,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-4, "composite FD error {err}");
    }

    #[test]
    fn step_size_outside_range_is_usage_error() {
        let x = Tensor::<f64>::scalar(1.0);
        let err = fd_check(|t: &mut Tape<f64>, x| t.sum(x), &x, 1e-2);
        assert!(matches!(err, Err(Error::Usage(_))));
    }

    #[test]
    fn non_scalar_function_is_usage_error() {
        let x = Tensor::<f64>::matrix(2, 2, vec![1.0; 4]).unwrap();
        let err = fd_check(|t: &mut Tape<f64>, x| t.sigmoid(x), &x, 1e-4);
        assert!(matches!(err, Err(Error::Usage(_))));
    }
}
