use ndarray::{Array1, Array2, Array4, ArrayViewD, ArrayViewMutD};

use super::norm::NormStats;
use super::{Conv2d, InstanceNorm, Scalar};

/// Parameter-free activation functions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Act {
    Relu,
    LeakyRelu(f64),
    Tanh,
    Sigmoid,
}

impl Act {
    fn forward<T: Scalar>(&self, x: &Array4<T>) -> Array4<T> {
        match self {
            Act::Relu => x.mapv(|v| if v > T::zero() { v } else { T::zero() }),
            Act::LeakyRelu(slope) => {
                let s = T::of_f64(*slope);
                x.mapv(|v| if v > T::zero() { v } else { s * v })
            }
            Act::Tanh => x.mapv(|v| v.tanh()),
            Act::Sigmoid => x.mapv(sigmoid),
        }
    }

    /// `x` is the layer input, `y` its output; both are cached by `Seq`.
    fn backward<T: Scalar>(&self, x: &Array4<T>, y: &Array4<T>, dy: &Array4<T>) -> Array4<T> {
        match self {
            Act::Relu => {
                let mut dx = dy.clone();
                dx.zip_mut_with(x, |d, &v| {
                    if v <= T::zero() {
                        *d = T::zero();
                    }
                });
                dx
            }
            Act::LeakyRelu(slope) => {
                let s = T::of_f64(*slope);
                let mut dx = dy.clone();
                dx.zip_mut_with(x, |d, &v| {
                    if v <= T::zero() {
                        *d = *d * s;
                    }
                });
                dx
            }
            Act::Tanh => {
                let mut dx = dy.clone();
                dx.zip_mut_with(y, |d, &o| *d = *d * (T::one() - o * o));
                dx
            }
            Act::Sigmoid => {
                let mut dx = dy.clone();
                dx.zip_mut_with(y, |d, &o| *d = *d * o * (T::one() - o));
                dx
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        (T::one() + (-v).exp()).recip()
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Clone)]
pub enum Layer<T: Scalar> {
    Conv(Conv2d<T>),
    Norm(InstanceNorm<T>),
    Act(Act),
    /// Multiply activations by a fixed constant.
    Scale(f64),
    /// Nearest-neighbor 2x upsampling.
    Upsample2x,
    /// `y = x + inner(x)`.
    Residual(Seq<T>),
}

/// A sequential stack of layers.
#[derive(Debug, Clone)]
pub struct Seq<T: Scalar> {
    pub layers: Vec<Layer<T>>,
}

#[derive(Debug)]
pub enum LayerAux<T: Scalar> {
    None,
    Norm(NormStats<T>),
    Res(Box<SeqCache<T>>),
}

/// Forward-pass cache: `xs[i]` is the input to layer `i`, `xs[len]` the output.
#[derive(Debug)]
pub struct SeqCache<T: Scalar> {
    pub xs: Vec<Array4<T>>,
    pub aux: Vec<LayerAux<T>>,
}

impl<T: Scalar> SeqCache<T> {
    pub fn output(&self) -> &Array4<T> {
        self.xs.last().expect("non-empty cache")
    }
}

#[derive(Debug)]
pub enum LayerGrads<T: Scalar> {
    None,
    Conv { dw: Array4<T>, db: Array1<T> },
    Norm { dgamma: Array1<T>, dbeta: Array1<T> },
    Res(Box<SeqGrads<T>>),
}

/// Gradient accumulators mirroring a `Seq`'s parameter structure.
#[derive(Debug)]
pub struct SeqGrads<T: Scalar> {
    pub layers: Vec<LayerGrads<T>>,
}

impl<T: Scalar> Seq<T> {
    pub fn new(layers: Vec<Layer<T>>) -> Self {
        Seq { layers }
    }

    pub fn forward(&self, x: &Array4<T>) -> SeqCache<T> {
        let mut xs = Vec::with_capacity(self.layers.len() + 1);
        let mut aux = Vec::with_capacity(self.layers.len());
        xs.push(x.clone());
        for layer in &self.layers {
            let cur = xs.last().expect("input present");
            let (y, a) = match layer {
                Layer::Conv(c) => (c.forward(cur), LayerAux::None),
                Layer::Norm(n) => {
                    let (y, stats) = n.forward(cur);
                    (y, LayerAux::Norm(stats))
                }
                Layer::Act(act) => (act.forward(cur), LayerAux::None),
                Layer::Scale(g) => {
                    let gt = T::of_f64(*g);
                    (cur.mapv(|v| v * gt), LayerAux::None)
                }
                Layer::Upsample2x => (upsample2x(cur), LayerAux::None),
                Layer::Residual(inner) => {
                    let c = inner.forward(cur);
                    let y = c.output() + cur;
                    (y, LayerAux::Res(Box::new(c)))
                }
            };
            xs.push(y);
            aux.push(a);
        }
        SeqCache { xs, aux }
    }

    /// Forward without keeping intermediates.
    pub fn infer(&self, x: &Array4<T>) -> Array4<T> {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = match layer {
                Layer::Conv(c) => c.forward(&cur),
                Layer::Norm(n) => n.forward(&cur).0,
                Layer::Act(act) => act.forward(&cur),
                Layer::Scale(g) => {
                    let gt = T::of_f64(*g);
                    cur.mapv(|v| v * gt)
                }
                Layer::Upsample2x => upsample2x(&cur),
                Layer::Residual(inner) => inner.infer(&cur) + &cur,
            };
        }
        cur
    }

    pub fn backward(
        &self,
        cache: &SeqCache<T>,
        dy: Array4<T>,
        grads: &mut SeqGrads<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let mut d = dy;
        for i in (0..self.layers.len()).rev() {
            let want = need_dx || i > 0;
            let x = &cache.xs[i];
            let y = &cache.xs[i + 1];
            d = match (&self.layers[i], &mut grads.layers[i], &cache.aux[i]) {
                (Layer::Conv(c), LayerGrads::Conv { dw, db }, _) => {
                    match c.backward(x, &d, dw, db, want) {
                        Some(dx) => dx,
                        None => return None,
                    }
                }
                (Layer::Norm(n), LayerGrads::Norm { dgamma, dbeta }, LayerAux::Norm(stats)) => {
                    n.backward(x, stats, &d, dgamma, dbeta)
                }
                (Layer::Act(a), _, _) => a.backward(x, y, &d),
                (Layer::Scale(g), _, _) => {
                    let gt = T::of_f64(*g);
                    d.mapv(|v| v * gt)
                }
                (Layer::Upsample2x, _, _) => downsample2x_sum(&d),
                (Layer::Residual(inner), LayerGrads::Res(ig), LayerAux::Res(ic)) => {
                    let dinner = inner
                        .backward(ic, d.clone(), ig, true)
                        .expect("residual inner dx");
                    d + dinner
                }
                _ => unreachable!("grads/aux misaligned with layers"),
            };
        }
        Some(d)
    }

    pub fn zero_grads(&self) -> SeqGrads<T> {
        SeqGrads {
            layers: self
                .layers
                .iter()
                .map(|l| match l {
                    Layer::Conv(c) => LayerGrads::Conv {
                        dw: Array4::zeros(c.w.raw_dim()),
                        db: Array1::zeros(c.b.raw_dim()),
                    },
                    Layer::Norm(n) => LayerGrads::Norm {
                        dgamma: Array1::zeros(n.gamma.raw_dim()),
                        dbeta: Array1::zeros(n.beta.raw_dim()),
                    },
                    Layer::Residual(inner) => LayerGrads::Res(Box::new(inner.zero_grads())),
                    _ => LayerGrads::None,
                })
                .collect(),
        }
    }

    pub fn visit<'a>(&'a self, prefix: &str, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        for (i, layer) in self.layers.iter().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    out.push((format!("{prefix}.{i}.w"), c.w.view().into_dyn()));
                    out.push((format!("{prefix}.{i}.b"), c.b.view().into_dyn()));
                }
                Layer::Norm(n) => {
                    out.push((format!("{prefix}.{i}.gamma"), n.gamma.view().into_dyn()));
                    out.push((format!("{prefix}.{i}.beta"), n.beta.view().into_dyn()));
                }
                Layer::Residual(inner) => inner.visit(&format!("{prefix}.{i}"), out),
                _ => {}
            }
        }
    }

    pub fn visit_mut<'a>(
        &'a mut self,
        prefix: &str,
        out: &mut Vec<(String, ArrayViewMutD<'a, T>)>,
    ) {
        for (i, layer) in self.layers.iter_mut().enumerate() {
            match layer {
                Layer::Conv(c) => {
                    out.push((format!("{prefix}.{i}.w"), c.w.view_mut().into_dyn()));
                    out.push((format!("{prefix}.{i}.b"), c.b.view_mut().into_dyn()));
                }
                Layer::Norm(n) => {
                    out.push((format!("{prefix}.{i}.gamma"), n.gamma.view_mut().into_dyn()));
                    out.push((format!("{prefix}.{i}.beta"), n.beta.view_mut().into_dyn()));
                }
                Layer::Residual(inner) => inner.visit_mut(&format!("{prefix}.{i}"), out),
                _ => {}
            }
        }
    }
}

impl<T: Scalar> SeqGrads<T> {
    pub fn visit<'a>(&'a self, out: &mut Vec<ArrayViewD<'a, T>>) {
        for layer in &self.layers {
            match layer {
                LayerGrads::Conv { dw, db } => {
                    out.push(dw.view().into_dyn());
                    out.push(db.view().into_dyn());
                }
                LayerGrads::Norm { dgamma, dbeta } => {
                    out.push(dgamma.view().into_dyn());
                    out.push(dbeta.view().into_dyn());
                }
                LayerGrads::Res(inner) => inner.visit(out),
                LayerGrads::None => {}
            }
        }
    }
}

pub fn upsample2x<T: Scalar>(x: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = x.dim();
    let mut y = Array4::zeros((b, c, 2 * h, 2 * w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    let v = x[(bi, ci, i, j)];
                    y[(bi, ci, 2 * i, 2 * j)] = v;
                    y[(bi, ci, 2 * i, 2 * j + 1)] = v;
                    y[(bi, ci, 2 * i + 1, 2 * j)] = v;
                    y[(bi, ci, 2 * i + 1, 2 * j + 1)] = v;
                }
            }
        }
    }
    y
}

fn downsample2x_sum<T: Scalar>(dy: &Array4<T>) -> Array4<T> {
    let (b, c, h2, w2) = dy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut dx = Array4::zeros((b, c, h, w));
    for bi in 0..b {
        for ci in 0..c {
            for i in 0..h {
                for j in 0..w {
                    dx[(bi, ci, i, j)] = dy[(bi, ci, 2 * i, 2 * j)]
                        + dy[(bi, ci, 2 * i, 2 * j + 1)]
                        + dy[(bi, ci, 2 * i + 1, 2 * j)]
                        + dy[(bi, ci, 2 * i + 1, 2 * j + 1)];
                }
            }
        }
    }
    dx
}

/// Flatten NCHW features to `(B, C·H·W)` rows for a fully connected head.
pub fn flatten<T: Scalar>(x: &Array4<T>) -> Array2<T> {
    let (b, c, h, w) = x.dim();
    x.view()
        .into_shape_with_order((b, c * h * w))
        .expect("contiguous flatten")
        .to_owned()
}

/// Inverse of [`flatten`].
pub fn unflatten<T: Scalar>(x: &Array2<T>, c: usize, h: usize, w: usize) -> Array4<T> {
    let b = x.dim().0;
    x.view()
        .into_shape_with_order((b, c, h, w))
        .expect("contiguous unflatten")
        .to_owned()
}
