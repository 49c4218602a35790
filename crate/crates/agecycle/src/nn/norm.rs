use ndarray::{Array1, Array2, Array4};
use rayon::prelude::*;

use super::{Scalar, BATCH_CHUNK};

/// Instance normalization: each (sample, channel) plane is normalized over
/// its spatial extent, then scaled/shifted by per-channel `gamma`/`beta`.
#[derive(Debug, Clone)]
pub struct InstanceNorm<T: Scalar> {
    pub gamma: Array1<T>,
    pub beta: Array1<T>,
    pub eps: T,
}

/// Per-(sample, channel) statistics cached by the forward pass.
#[derive(Debug, Clone)]
pub struct NormStats<T> {
    pub mean: Array2<T>,
    pub inv_std: Array2<T>,
}

impl<T: Scalar> InstanceNorm<T> {
    pub fn new(channels: usize) -> Self {
        InstanceNorm {
            gamma: Array1::from_elem(channels, T::one()),
            beta: Array1::zeros(channels),
            eps: T::of_f64(1e-5),
        }
    }

    pub fn forward(&self, x: &Array4<T>) -> (Array4<T>, NormStats<T>) {
        let (batch, c, h, w) = x.dim();
        assert_eq!(c, self.gamma.len(), "norm channels");
        let n = T::of_f64((h * w) as f64);
        let hw = h * w;
        let mut y = Array4::zeros((batch, c, h, w));
        let mut mean = Array2::zeros((batch, c));
        let mut inv_std = Array2::zeros((batch, c));

        let xs = x.as_slice().expect("contiguous");
        let ys = y.as_slice_mut().expect("contiguous");
        let gamma = &self.gamma;
        let beta = &self.beta;
        let eps = self.eps;

        let mean_s = mean.as_slice_mut().expect("contiguous");
        let inv_s = inv_std.as_slice_mut().expect("contiguous");
        xs.par_chunks(BATCH_CHUNK * c * hw)
            .zip(ys.par_chunks_mut(BATCH_CHUNK * c * hw))
            .zip(
                mean_s
                    .par_chunks_mut(BATCH_CHUNK * c)
                    .zip(inv_s.par_chunks_mut(BATCH_CHUNK * c)),
            )
            .for_each(|((xc, yc), (mc, ic))| {
                let samples = xc.len() / (c * hw);
                for b in 0..samples {
                    for ci in 0..c {
                        let off = (b * c + ci) * hw;
                        let plane = &xc[off..off + hw];
                        let mut m = T::zero();
                        for &v in plane {
                            m += v;
                        }
                        m = m / n;
                        let mut var = T::zero();
                        for &v in plane {
                            let d = v - m;
                            var += d * d;
                        }
                        var = var / n;
                        let inv = (var + eps).sqrt().recip();
                        let (g, bta) = (gamma[ci], beta[ci]);
                        for (o, &v) in yc[off..off + hw].iter_mut().zip(plane) {
                            *o = g * (v - m) * inv + bta;
                        }
                        mc[b * c + ci] = m;
                        ic[b * c + ci] = inv;
                    }
                }
            });
        (y, NormStats { mean, inv_std })
    }

    pub fn backward(
        &self,
        x: &Array4<T>,
        stats: &NormStats<T>,
        dy: &Array4<T>,
        dgamma: &mut Array1<T>,
        dbeta: &mut Array1<T>,
    ) -> Array4<T> {
        let (batch, c, h, w) = x.dim();
        let hw = h * w;
        let n = T::of_f64(hw as f64);
        let mut dx = Array4::zeros((batch, c, h, w));

        let xs = x.as_slice().expect("contiguous");
        let dys = dy.as_slice().expect("contiguous");
        let dxs = dx.as_slice_mut().expect("contiguous");
        let means = stats.mean.as_slice().expect("contiguous");
        let invs = stats.inv_std.as_slice().expect("contiguous");
        let gamma = &self.gamma;

        // Per-chunk (dgamma, dbeta) partials, combined in chunk order.
        let partials: Vec<(Vec<T>, Vec<T>)> = xs
            .par_chunks(BATCH_CHUNK * c * hw)
            .zip(dys.par_chunks(BATCH_CHUNK * c * hw))
            .zip(dxs.par_chunks_mut(BATCH_CHUNK * c * hw))
            .zip(
                means
                    .par_chunks(BATCH_CHUNK * c)
                    .zip(invs.par_chunks(BATCH_CHUNK * c)),
            )
            .map(|(((xc, dyc), dxc), (mc, ic))| {
                let mut dg = vec![T::zero(); c];
                let mut db = vec![T::zero(); c];
                let samples = xc.len() / (c * hw);
                for b in 0..samples {
                    for ci in 0..c {
                        let off = (b * c + ci) * hw;
                        let (m, inv) = (mc[b * c + ci], ic[b * c + ci]);
                        let g = gamma[ci];
                        let mut sum_dy = T::zero();
                        let mut sum_dy_xhat = T::zero();
                        for i in 0..hw {
                            let xhat = (xc[off + i] - m) * inv;
                            sum_dy += dyc[off + i];
                            sum_dy_xhat += dyc[off + i] * xhat;
                        }
                        dg[ci] += sum_dy_xhat;
                        db[ci] += sum_dy;
                        let mean_dy = sum_dy / n;
                        let mean_dy_xhat = sum_dy_xhat / n;
                        for i in 0..hw {
                            let xhat = (xc[off + i] - m) * inv;
                            dxc[off + i] =
                                g * inv * (dyc[off + i] - mean_dy - xhat * mean_dy_xhat);
                        }
                    }
                }
                (dg, db)
            })
            .collect();

        for (dg, db) in partials {
            for (d, s) in dgamma.iter_mut().zip(dg) {
                *d += s;
            }
            for (d, s) in dbeta.iter_mut().zip(db) {
                *d += s;
            }
        }
        dx
    }
}
