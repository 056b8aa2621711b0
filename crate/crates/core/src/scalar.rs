//! Floating-point scalar abstraction for the numeric kernels.
//!
//! The tensor engine, the polygon geometry, and the attention math are
//! written against this trait so they work for `f32` and `f64` alike.
//! The model pipeline itself runs in `f64` (see the aliases at the crate
//! root): gradient checks by central differences need the headroom.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Scalar type the numeric kernels are generic over: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + NumAssign + Sum + Debug + Display + Send + Sync + 'static
{
    /// Lossless-enough conversion from `f64` for constants and literals.
    fn from_f64_c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant not representable")
    }

    /// Widen to `f64` for accumulation, reporting, and serialization.
    fn to_f64_c(self) -> f64;

    /// `C = alpha * op(A) op(B) + beta * C` for row-major dense matrices.
    ///
    /// `op(A)` is `m x k` and `op(B)` is `k x n`; when `trans_a`/`trans_b`
    /// is set, the corresponding buffer holds the transposed storage
    /// (`k x m` / `n x k`) and is read through swapped strides, no copy.
    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    );
}

fn gemm_strides(trans: bool, rows: usize, cols: usize) -> (isize, isize) {
    // Strides of op(X) given that the buffer stores the un-transposed
    // matrix row-major. rows/cols refer to op(X).
    if trans {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

fn check_gemm_lens(m: usize, k: usize, n: usize, a: usize, b: usize, c: usize) {
    assert_eq!(a, m * k, "gemm: A buffer length");
    assert_eq!(b, k * n, "gemm: B buffer length");
    assert_eq!(c, m * n, "gemm: C buffer length");
}

impl Scalar for f32 {
    fn to_f64_c(self) -> f64 {
        self as f64
    }

    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    ) {
        check_gemm_lens(m, k, n, a.len(), b.len(), c.len());
        let (rsa, csa) = gemm_strides(trans_a, m, k);
        let (rsb, csb) = gemm_strides(trans_b, k, n);
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}

impl Scalar for f64 {
    fn to_f64_c(self) -> f64 {
        self
    }

    fn gemm(
        trans_a: bool,
        trans_b: bool,
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        b: &[Self],
        beta: Self,
        c: &mut [Self],
    ) {
        check_gemm_lens(m, k, n, a.len(), b.len(), c.len());
        let (rsa, csa) = gemm_strides(trans_a, m, k);
        let (rsb, csb) = gemm_strides(trans_b, k, n);
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }
}
