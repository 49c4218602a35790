use ndarray::{Array1, Array4, ArrayView3, ArrayViewMut3};
use rayon::prelude::*;

use super::{gemm_nn, gemm_nt, gemm_tn, Scalar, BATCH_CHUNK};

/// TensorFlow-style SAME padding `(top, bottom, left, right)` for inputs whose
/// side length is a multiple of the stride (all resolutions here are).
pub fn same_padding(kernel: usize, stride: usize) -> (usize, usize, usize, usize) {
    let total = kernel.saturating_sub(stride);
    let lo = total / 2;
    let hi = total - lo;
    (lo, hi, lo, hi)
}

/// 2-D convolution with weights `(c_out, c_in, kh, kw)`.
///
/// Forward and backward both run as im2col + GEMM per sample; the batch is
/// split into fixed-size chunks so gradient accumulation order is stable.
#[derive(Debug, Clone)]
pub struct Conv2d<T: Scalar> {
    pub w: Array4<T>,
    pub b: Array1<T>,
    pub stride: usize,
    /// (top, bottom, left, right)
    pub pad: (usize, usize, usize, usize),
}

impl<T: Scalar> Conv2d<T> {
    pub fn c_out(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn c_in(&self) -> usize {
        self.w.shape()[1]
    }

    pub fn kernel(&self) -> (usize, usize) {
        (self.w.shape()[2], self.w.shape()[3])
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        let (kh, kw) = self.kernel();
        let (pt, pb, pl, pr) = self.pad;
        let oh = (h + pt + pb - kh) / self.stride + 1;
        let ow = (w + pl + pr - kw) / self.stride + 1;
        (oh, ow)
    }

    pub fn forward(&self, x: &Array4<T>) -> Array4<T> {
        let (batch, c_in, h, w) = x.dim();
        assert_eq!(c_in, self.c_in(), "conv input channels");
        let (oh, ow) = self.out_hw(h, w);
        let c_out = self.c_out();
        let k = self.c_in() * self.kernel().0 * self.kernel().1;

        let mut y = Array4::<T>::zeros((batch, c_out, oh, ow));
        let w_flat = self.w.as_slice().expect("contiguous weights");

        let x_views: Vec<ArrayView3<T>> = x.outer_iter().collect();
        let mut y_views: Vec<ArrayViewMut3<T>> = y.outer_iter_mut().collect();

        x_views
            .par_chunks(BATCH_CHUNK)
            .zip(y_views.par_chunks_mut(BATCH_CHUNK))
            .for_each(|(xs, ys)| {
                let mut col = vec![T::zero(); k * oh * ow];
                for (xb, yb) in xs.iter().zip(ys.iter_mut()) {
                    self.im2col(xb, &mut col, oh, ow);
                    let yb_flat = yb.as_slice_mut().expect("contiguous output");
                    gemm_nn(c_out, k, oh * ow, T::one(), w_flat, &col, T::zero(), yb_flat);
                    for (co, row) in yb_flat.chunks_exact_mut(oh * ow).enumerate() {
                        let bias = self.b[co];
                        for v in row {
                            *v += bias;
                        }
                    }
                }
            });
        y
    }

    /// Backward pass. Accumulates into `dw`/`db`, returns `dx` when requested.
    pub fn backward(
        &self,
        x: &Array4<T>,
        dy: &Array4<T>,
        dw: &mut Array4<T>,
        db: &mut Array1<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let (batch, c_in, h, w) = x.dim();
        let (oh, ow) = self.out_hw(h, w);
        let c_out = self.c_out();
        assert_eq!(dy.dim(), (batch, c_out, oh, ow), "conv dy shape");
        let k = c_in * self.kernel().0 * self.kernel().1;
        let w_flat = self.w.as_slice().expect("contiguous weights");

        let mut dx = if need_dx {
            Some(Array4::<T>::zeros((batch, c_in, h, w)))
        } else {
            None
        };

        let x_views: Vec<ArrayView3<T>> = x.outer_iter().collect();
        let dy_views: Vec<ArrayView3<T>> = dy.outer_iter().collect();
        let mut dx_views: Vec<Option<ArrayViewMut3<T>>> = match dx.as_mut() {
            Some(dx) => dx.outer_iter_mut().map(Some).collect(),
            None => (0..batch).map(|_| None).collect(),
        };

        // Each chunk returns its own (dw, db); combined sequentially below in
        // chunk order.
        let partials: Vec<(Vec<T>, Vec<T>)> = x_views
            .par_chunks(BATCH_CHUNK)
            .zip(dy_views.par_chunks(BATCH_CHUNK))
            .zip(dx_views.par_chunks_mut(BATCH_CHUNK))
            .map(|((xs, dys), dxs)| {
                let mut dw_part = vec![T::zero(); c_out * k];
                let mut db_part = vec![T::zero(); c_out];
                let mut col = vec![T::zero(); k * oh * ow];
                let mut dcol = vec![T::zero(); k * oh * ow];
                for ((xb, dyb), dxb) in xs.iter().zip(dys.iter()).zip(dxs.iter_mut()) {
                    let dy_flat = dyb.to_slice().expect("contiguous dy");
                    self.im2col(xb, &mut col, oh, ow);
                    gemm_nt(c_out, oh * ow, k, T::one(), dy_flat, &col, T::one(), &mut dw_part);
                    for (co, row) in dy_flat.chunks_exact(oh * ow).enumerate() {
                        let mut s = T::zero();
                        for &v in row {
                            s += v;
                        }
                        db_part[co] += s;
                    }
                    if let Some(dxb) = dxb.as_mut() {
                        gemm_tn(k, c_out, oh * ow, T::one(), w_flat, dy_flat, T::zero(), &mut dcol);
                        self.col2im(&dcol, dxb, oh, ow);
                    }
                }
                (dw_part, db_part)
            })
            .collect();

        let dw_flat = dw.as_slice_mut().expect("contiguous dw");
        for (dw_part, db_part) in partials {
            for (d, s) in dw_flat.iter_mut().zip(dw_part) {
                *d += s;
            }
            for (d, s) in db.iter_mut().zip(db_part) {
                *d += s;
            }
        }
        dx
    }

    /// Unfold one sample into `col` with rows `(c, ky, kx)` and columns
    /// `(oy, ox)`. Out-of-bounds taps are zero.
    fn im2col(&self, x: &ArrayView3<T>, col: &mut [T], oh: usize, ow: usize) {
        let (c_in, h, w) = x.dim();
        let (kh, kw) = self.kernel();
        let (pt, _, pl, _) = self.pad;
        let s = self.stride;
        let xs = x.to_slice().expect("contiguous sample");

        let mut row = 0usize;
        for c in 0..c_in {
            let xc = &xs[c * h * w..(c + 1) * h * w];
            for ky in 0..kh {
                for kx in 0..kw {
                    // ix = ox*s + kx - pl must land in [0, w): precompute the
                    // in-bounds ox range for this tap (empty for taps past
                    // the right edge of tiny maps).
                    let ox_lo = if pl > kx { (pl - kx).div_ceil(s) } else { 0 };
                    let bound = w as isize + pl as isize - kx as isize;
                    let ox_hi =
                        ((bound + s as isize - 1) / s as isize).clamp(0, ow as isize) as usize;
                    let out_row = &mut col[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pt as isize;
                        let dst = &mut out_row[oy * ow..(oy + 1) * ow];
                        if iy < 0 || iy >= h as isize || ox_lo >= ox_hi {
                            dst.fill(T::zero());
                            continue;
                        }
                        let src_row = &xc[iy as usize * w..(iy as usize + 1) * w];
                        dst[..ox_lo].fill(T::zero());
                        dst[ox_hi..].fill(T::zero());
                        if s == 1 {
                            let ix0 = ox_lo + kx - pl;
                            dst[ox_lo..ox_hi]
                                .copy_from_slice(&src_row[ix0..ix0 + (ox_hi - ox_lo)]);
                        } else {
                            for (d, ox) in dst[ox_lo..ox_hi].iter_mut().zip(ox_lo..) {
                                *d = src_row[ox * s + kx - pl];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }

    /// Fold `dcol` back onto the input gradient (scatter-add).
    fn col2im(&self, dcol: &[T], dx: &mut ArrayViewMut3<T>, oh: usize, ow: usize) {
        let (c_in, h, w) = dx.dim();
        let (kh, kw) = self.kernel();
        let (pt, _, pl, _) = self.pad;
        let s = self.stride;
        let dxs = dx.as_slice_mut().expect("contiguous dx");
        dxs.fill(T::zero());

        let mut row = 0usize;
        for c in 0..c_in {
            for ky in 0..kh {
                for kx in 0..kw {
                    let ox_lo = if pl > kx { (pl - kx).div_ceil(s) } else { 0 };
                    let bound = w as isize + pl as isize - kx as isize;
                    let ox_hi =
                        ((bound + s as isize - 1) / s as isize).clamp(0, ow as isize) as usize;
                    let src_row = &dcol[row * oh * ow..(row + 1) * oh * ow];
                    for oy in 0..oh {
                        let iy = (oy * s + ky) as isize - pt as isize;
                        if iy < 0 || iy >= h as isize || ox_lo >= ox_hi {
                            continue;
                        }
                        let base = c * h * w + iy as usize * w;
                        if s == 1 {
                            let ix0 = ox_lo + kx - pl;
                            for (d, &v) in dxs[base + ix0..base + ix0 + (ox_hi - ox_lo)]
                                .iter_mut()
                                .zip(&src_row[oy * ow + ox_lo..oy * ow + ox_hi])
                            {
                                *d += v;
                            }
                        } else {
                            for ox in ox_lo..ox_hi {
                                dxs[base + ox * s + kx - pl] += src_row[oy * ow + ox];
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}
