//! Minimal neural-network kernels used by the generators and discriminators.
//!
//! Everything here is hand-rolled on top of `ndarray` plus a GEMM from
//! `matrixmultiply`. Two properties drive the design:
//!
//! - **Determinism.** All reductions (batch parallelism included) run in a
//!   fixed order, so repeated runs with the same seed produce bit-identical
//!   parameters on the same platform.
//! - **Checkable gradients.** Every layer is generic over [`Scalar`] so the
//!   same code path runs in `f64` for finite-difference gradient tests and
//!   in `f32` for training.
//!
//! Tensors are NCHW (`Array4`: batch, channel, height, width).

mod adam;
mod conv;
mod init;
mod linear;
mod norm;
mod seq;
pub mod probe;

#[cfg(test)]
mod tests;

pub use adam::Adam;
pub use conv::{same_padding, Conv2d};
pub use init::{conv2d, linear, ParamInit};
pub use linear::Linear;
pub use norm::InstanceNorm;
pub use seq::{
    flatten as seq_flatten, sigmoid, unflatten as seq_unflatten, upsample2x, Act, Layer, Seq,
    SeqCache, SeqGrads,
};

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type of all network math. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::NumAssignOps
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + Sum
    + Send
    + Sync
    + 'static
{
    /// Tag written into checkpoint blob headers.
    const DTYPE: &'static str;

    /// `C = alpha * A * B + beta * C` with explicit strides, row-major logic.
    ///
    /// # Safety
    /// Pointers must be valid for the given dimensions and strides.
    #[allow(clippy::too_many_arguments)]
    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    );

    fn of_f64(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite f64 converts")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }
}

impl Scalar for f32 {
    const DTYPE: &'static str = "f32";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::sgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

impl Scalar for f64 {
    const DTYPE: &'static str = "f64";

    unsafe fn gemm_raw(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: *const Self,
        rsa: isize,
        csa: isize,
        b: *const Self,
        rsb: isize,
        csb: isize,
        beta: Self,
        c: *mut Self,
        rsc: isize,
        csc: isize,
    ) {
        matrixmultiply::dgemm(m, k, n, alpha, a, rsa, csa, b, rsb, csb, beta, c, rsc, csc);
    }
}

/// `C (m×n) += alpha * A (m×k) · B (k×n)`, all row-major contiguous.
pub fn gemm_nn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C (m×n) += alpha * A (m×k) · Bᵀ` where `B` is stored row-major `n×k`.
pub fn gemm_nt<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            k as isize,
            1,
            b.as_ptr(),
            1,
            k as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `C (m×n) += alpha * Aᵀ · B` where `A` is stored row-major `k×m`.
pub fn gemm_tn<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: &[T],
    b: &[T],
    beta: T,
    c: &mut [T],
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    unsafe {
        T::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            1,
            m as isize,
            b.as_ptr(),
            n as isize,
            1,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Number of samples each worker processes per parallel chunk. Fixed so the
/// reduction order (and therefore the floating-point result) never depends
/// on the thread count.
pub(crate) const BATCH_CHUNK: usize = 12;
