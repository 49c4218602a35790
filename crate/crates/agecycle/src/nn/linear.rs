use ndarray::{Array1, Array2};

use super::{gemm_nn, gemm_tn, Scalar};

/// Fully connected layer, weights `(n_out, n_in)`.
#[derive(Debug, Clone)]
pub struct Linear<T: Scalar> {
    pub w: Array2<T>,
    pub b: Array1<T>,
}

impl<T: Scalar> Linear<T> {
    pub fn n_in(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn n_out(&self) -> usize {
        self.w.shape()[0]
    }

    /// `y (B×out) = x (B×in) · Wᵀ + b`
    pub fn forward(&self, x: &Array2<T>) -> Array2<T> {
        let (batch, n_in) = x.dim();
        assert_eq!(n_in, self.n_in(), "linear input width");
        let n_out = self.n_out();
        let mut y = Array2::zeros((batch, n_out));
        // y = x · Wᵀ: A (B×in) · B stored (out×in) transposed.
        unsafe {
            T::gemm_raw(
                batch,
                n_in,
                n_out,
                T::one(),
                x.as_slice().expect("contiguous x").as_ptr(),
                n_in as isize,
                1,
                self.w.as_slice().expect("contiguous w").as_ptr(),
                1,
                n_in as isize,
                T::zero(),
                y.as_slice_mut().expect("contiguous y").as_mut_ptr(),
                n_out as isize,
                1,
            );
        }
        for mut row in y.outer_iter_mut() {
            for (v, &bias) in row.iter_mut().zip(self.b.iter()) {
                *v += bias;
            }
        }
        y
    }

    pub fn backward(
        &self,
        x: &Array2<T>,
        dy: &Array2<T>,
        dw: &mut Array2<T>,
        db: &mut Array1<T>,
    ) -> Array2<T> {
        let (batch, n_in) = x.dim();
        let n_out = self.n_out();
        assert_eq!(dy.dim(), (batch, n_out), "linear dy shape");

        // dW (out×in) += dyᵀ (out×B) · x (B×in)
        gemm_tn(
            n_out,
            batch,
            n_in,
            T::one(),
            dy.as_slice().expect("contiguous dy"),
            x.as_slice().expect("contiguous x"),
            T::one(),
            dw.as_slice_mut().expect("contiguous dw"),
        );
        for row in dy.outer_iter() {
            for (d, &v) in db.iter_mut().zip(row.iter()) {
                *d += v;
            }
        }
        // dx (B×in) = dy (B×out) · W (out×in)
        let mut dx = Array2::zeros((batch, n_in));
        gemm_nn(
            batch,
            n_out,
            n_in,
            T::one(),
            dy.as_slice().expect("contiguous dy"),
            self.w.as_slice().expect("contiguous w"),
            T::zero(),
            dx.as_slice_mut().expect("contiguous dx"),
        );
        dx
    }
}
