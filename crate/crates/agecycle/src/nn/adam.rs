use ndarray::{ArrayD, ArrayViewD, ArrayViewMutD};

use super::Scalar;

/// Adam optimizer. Moment buffers are allocated on the first step in the
/// parameter visit order, which is stable, so optimizer state serializes as
/// an ordered list of arrays.
#[derive(Debug, Clone)]
pub struct Adam<T: Scalar> {
    pub lr: T,
    pub beta1: T,
    pub beta2: T,
    pub eps: T,
    pub t: u64,
    pub m: Vec<ArrayD<T>>,
    pub v: Vec<ArrayD<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64) -> Self {
        Adam {
            lr: T::of_f64(lr),
            beta1: T::of_f64(beta1),
            beta2: T::of_f64(beta2),
            eps: T::of_f64(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step(&mut self, mut params: Vec<ArrayViewMutD<T>>, grads: Vec<ArrayViewD<T>>) {
        assert_eq!(params.len(), grads.len(), "param/grad count");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
            self.v = params.iter().map(|p| ArrayD::zeros(p.raw_dim())).collect();
        }
        assert_eq!(self.m.len(), params.len(), "optimizer state count");
        self.t += 1;
        let t = self.t as i32;
        let bc1 = T::one() - self.beta1.powi(t);
        let bc2 = T::one() - self.beta2.powi(t);
        let one = T::one();

        for ((p, g), (m, v)) in params
            .iter_mut()
            .zip(grads.iter())
            .zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            debug_assert_eq!(p.shape(), g.shape(), "param/grad shape");
            let (ps, gs) = (
                p.as_slice_mut().expect("contiguous param"),
                g.as_slice().expect("contiguous grad"),
            );
            let ms = m.as_slice_mut().expect("contiguous m");
            let vs = v.as_slice_mut().expect("contiguous v");
            for i in 0..ps.len() {
                let gi = gs[i];
                ms[i] = self.beta1 * ms[i] + (one - self.beta1) * gi;
                vs[i] = self.beta2 * vs[i] + (one - self.beta2) * gi * gi;
                let mhat = ms[i] / bc1;
                let vhat = vs[i] / bc2;
                ps[i] = ps[i] - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
