//! Flat indexing over a network's parameter arrays; used by the
//! finite-difference gradient checks and the checkpoint round-trip tests.

use ndarray::{ArrayViewD, ArrayViewMutD};

use super::Scalar;

pub fn flat_len<T: Scalar>(params: &[(String, ArrayViewD<'_, T>)]) -> usize {
    params.iter().map(|(_, a)| a.len()).sum()
}

/// Add `delta` to the `k`-th scalar parameter (visit order, row-major).
pub fn add_at<T: Scalar>(params: &mut [(String, ArrayViewMutD<'_, T>)], k: usize, delta: T) {
    let mut rem = k;
    for (_, arr) in params.iter_mut() {
        if rem < arr.len() {
            let s = arr.as_slice_mut().expect("contiguous param");
            s[rem] += delta;
            return;
        }
        rem -= arr.len();
    }
    panic!("parameter index {k} out of range");
}

/// Read the `k`-th scalar from a flat list of gradient views.
pub fn grad_at<T: Scalar>(grads: &[ArrayViewD<'_, T>], k: usize) -> T {
    let mut rem = k;
    for arr in grads {
        if rem < arr.len() {
            return arr.as_slice().expect("contiguous grad")[rem];
        }
        rem -= arr.len();
    }
    panic!("gradient index {k} out of range");
}

pub fn grad_len<T: Scalar>(grads: &[ArrayViewD<'_, T>]) -> usize {
    grads.iter().map(|a| a.len()).sum()
}
