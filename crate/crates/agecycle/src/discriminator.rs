//! Patch discriminator with an auxiliary age-regression head.
//!
//! Six stride-2 4×4 convolutions, each followed by a Leaky ReLU (slope 0.2),
//! halve the input resolution six times. A 1-channel 4×4 stride-1 convolution
//! on the final feature map produces the patch realism scores (left linear
//! for the least-squares loss), and a single fully connected layer on the
//! flattened features regresses the length-N age vector.

use ndarray::{Array2, Array4, ArrayViewD, ArrayViewMutD};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, Act, Conv2d, Layer, Linear, ParamInit, Scalar, Seq, SeqCache, SeqGrads};

pub const DISC_LAYERS: usize = 6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub resolution: usize,
    pub n_groups: usize,
    /// Output channels of the six convolution layers.
    pub widths: [usize; DISC_LAYERS],
    pub leaky_slope: f64,
}

impl Default for DiscriminatorConfig {
    fn default() -> Self {
        DiscriminatorConfig {
            resolution: 256,
            n_groups: 4,
            widths: [32, 64, 128, 256, 512, 512],
            leaky_slope: 0.2,
        }
    }
}

impl DiscriminatorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution % (1 << DISC_LAYERS) != 0 {
            return Err(Error::invalid(format!(
                "resolution {} must be divisible by {}",
                self.resolution,
                1 << DISC_LAYERS
            )));
        }
        if self.n_groups < 2 {
            return Err(Error::invalid("n_groups must be at least 2"));
        }
        if self.widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("discriminator widths must be positive"));
        }
        Ok(())
    }

    /// Spatial size of the patch score map for this resolution.
    pub fn patch_size(&self) -> usize {
        self.resolution >> DISC_LAYERS
    }
}

/// Patch realism scores `D^I` and age vector `D^α` for a batch.
#[derive(Debug, Clone)]
pub struct DiscriminatorOutput<T: Scalar> {
    /// `(B, 1, h, w)` with `h = w = resolution / 2^6`; unbounded reals.
    pub patch: Array4<T>,
    /// `(B, N)` age vector, compared against one-hot conditions.
    pub age: Array2<T>,
}

#[derive(Debug)]
pub struct DiscForward<T: Scalar> {
    pub out: DiscriminatorOutput<T>,
    convs: SeqCache<T>,
    feat_dim: (usize, usize, usize),
}

#[derive(Debug)]
pub struct DiscriminatorGrads<T: Scalar> {
    pub convs: SeqGrads<T>,
    pub patch_dw: Array4<T>,
    pub patch_db: ndarray::Array1<T>,
    pub age_dw: Array2<T>,
    pub age_db: ndarray::Array1<T>,
}

impl<T: Scalar> DiscriminatorGrads<T> {
    pub fn visit<'a>(&'a self, out: &mut Vec<ArrayViewD<'a, T>>) {
        self.convs.visit(out);
        out.push(self.patch_dw.view().into_dyn());
        out.push(self.patch_db.view().into_dyn());
        out.push(self.age_dw.view().into_dyn());
        out.push(self.age_db.view().into_dyn());
    }
}

#[derive(Debug, Clone)]
pub struct Discriminator<T: Scalar> {
    pub convs: Seq<T>,
    pub patch_head: Conv2d<T>,
    pub age_head: Linear<T>,
    pub config: DiscriminatorConfig,
}

impl<T: Scalar> Discriminator<T> {
    pub fn init(config: &DiscriminatorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::new();
        let mut c_in = 3;
        for &c_out in &config.widths {
            layers.push(Layer::Conv(nn::conv2d(
                c_in,
                c_out,
                4,
                2,
                ParamInit::Normal(0.02),
                &mut rng,
            )));
            layers.push(Layer::Act(Act::LeakyRelu(config.leaky_slope)));
            c_in = c_out;
        }
        let patch_head = nn::conv2d(c_in, 1, 4, 1, ParamInit::Normal(0.02), &mut rng);
        let p = config.patch_size();
        let age_head = nn::linear(c_in * p * p, config.n_groups, ParamInit::Normal(0.02), &mut rng);
        Ok(Discriminator {
            convs: Seq::new(layers),
            patch_head,
            age_head,
            config: config.clone(),
        })
    }

    fn check_input(&self, images: &Array4<T>) -> Result<()> {
        let (_, c, h, w) = images.dim();
        let r = self.config.resolution;
        if c != 3 || h != r || w != r {
            return Err(Error::shape(
                format!("(B, 3, {r}, {r})"),
                format!("{:?}", images.shape()),
            ));
        }
        Ok(())
    }

    pub fn forward(&self, images: &Array4<T>) -> Result<DiscForward<T>> {
        self.check_input(images)?;
        let convs = self.convs.forward(images);
        let feat = convs.output();
        let (b, c, h, w) = feat.dim();
        let patch = self.patch_head.forward(feat);
        let age = self.age_head.forward(&nn::seq_flatten(feat));
        debug_assert_eq!(patch.dim(), (b, 1, h, w));
        Ok(DiscForward {
            out: DiscriminatorOutput { patch, age },
            convs,
            feat_dim: (c, h, w),
        })
    }

    pub fn infer(&self, images: &Array4<T>) -> Result<DiscriminatorOutput<T>> {
        self.check_input(images)?;
        let feat = self.convs.infer(images);
        let patch = self.patch_head.forward(&feat);
        let age = self.age_head.forward(&nn::seq_flatten(&feat));
        Ok(DiscriminatorOutput { patch, age })
    }

    /// Backward from gradients on the patch map and/or age vector.
    /// Returns the input-image gradient when requested.
    pub fn backward(
        &self,
        fwd: &DiscForward<T>,
        d_patch: Option<&Array4<T>>,
        d_age: Option<&Array2<T>>,
        grads: &mut DiscriminatorGrads<T>,
        need_dx: bool,
    ) -> Option<Array4<T>> {
        let feat = fwd.convs.output();
        let (c, h, w) = fwd.feat_dim;
        let b = feat.dim().0;
        let mut d_feat = Array4::<T>::zeros((b, c, h, w));

        if let Some(dp) = d_patch {
            let dx = self
                .patch_head
                .backward(feat, dp, &mut grads.patch_dw, &mut grads.patch_db, true)
                .expect("patch head dx");
            d_feat += &dx;
        }
        if let Some(da) = d_age {
            let flat = nn::seq_flatten(feat);
            let dflat = self
                .age_head
                .backward(&flat, da, &mut grads.age_dw, &mut grads.age_db);
            d_feat += &nn::seq_unflatten(&dflat, c, h, w);
        }
        self.convs.backward(&fwd.convs, d_feat, &mut grads.convs, need_dx)
    }

    pub fn zero_grads(&self) -> DiscriminatorGrads<T> {
        DiscriminatorGrads {
            convs: self.convs.zero_grads(),
            patch_dw: Array4::zeros(self.patch_head.w.raw_dim()),
            patch_db: ndarray::Array1::zeros(self.patch_head.b.raw_dim()),
            age_dw: Array2::zeros(self.age_head.w.raw_dim()),
            age_db: ndarray::Array1::zeros(self.age_head.b.raw_dim()),
        }
    }

    pub fn visit<'a>(&'a self, out: &mut Vec<(String, ArrayViewD<'a, T>)>) {
        self.convs.visit("convs", out);
        out.push(("patch.w".into(), self.patch_head.w.view().into_dyn()));
        out.push(("patch.b".into(), self.patch_head.b.view().into_dyn()));
        out.push(("age.w".into(), self.age_head.w.view().into_dyn()));
        out.push(("age.b".into(), self.age_head.b.view().into_dyn()));
    }

    pub fn visit_mut<'a>(&'a mut self, out: &mut Vec<(String, ArrayViewMutD<'a, T>)>) {
        self.convs.visit_mut("convs", out);
        out.push(("patch.w".into(), self.patch_head.w.view_mut().into_dyn()));
        out.push(("patch.b".into(), self.patch_head.b.view_mut().into_dyn()));
        out.push(("age.w".into(), self.age_head.w.view_mut().into_dyn()));
        out.push(("age.b".into(), self.age_head.b.view_mut().into_dyn()));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn cfg(resolution: usize) -> DiscriminatorConfig {
        DiscriminatorConfig {
            resolution,
            n_groups: 4,
            widths: [4, 8, 8, 8, 8, 8],
            leaky_slope: 0.2,
        }
    }

    fn rand_images(b: usize, res: usize, seed: u64) -> Array4<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Array4::from_shape_simple_fn((b, 3, res, res), || rng.gen_range(-1.0..1.0))
    }

    #[test]
    fn patch_map_halves_six_times() {
        for res in [64usize, 128, 256] {
            let d = Discriminator::<f32>::init(&cfg(res), 3).unwrap();
            let out = d.infer(&rand_images(1, res, 1)).unwrap();
            let expect = res / 64;
            assert_eq!(out.patch.dim(), (1, 1, expect, expect), "res {res}");
            assert_eq!(out.age.dim(), (1, 4));
        }
    }

    #[test]
    fn age_vector_length_matches_groups() {
        let mut c = cfg(64);
        c.n_groups = 9;
        let d = Discriminator::<f32>::init(&c, 3).unwrap();
        let out = d.infer(&rand_images(2, 64, 5)).unwrap();
        assert_eq!(out.age.dim(), (2, 9));
    }

    #[test]
    fn init_deterministic_and_finite() {
        let a = Discriminator::<f32>::init(&cfg(64), 7).unwrap();
        let b = Discriminator::<f32>::init(&cfg(64), 7).unwrap();
        let (mut pa, mut pb) = (Vec::new(), Vec::new());
        a.visit(&mut pa);
        b.visit(&mut pb);
        for ((na, va), (_, vb)) in pa.iter().zip(pb.iter()) {
            assert_eq!(va, vb, "same seed differs at {na}");
        }
        let out = a.infer(&rand_images(2, 64, 9)).unwrap();
        assert!(out.patch.iter().all(|v| v.is_finite()));
        assert!(out.age.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn age_outputs_small_at_init() {
        let d = Discriminator::<f32>::init(&cfg(64), 11).unwrap();
        for seed in 0..100 {
            let out = d.infer(&rand_images(1, 64, 1000 + seed)).unwrap();
            assert!(
                out.age.iter().all(|v| v.abs() < 10.0),
                "age head magnitude at init (seed {seed})"
            );
        }
    }

    #[test]
    fn leaky_relu_scales_negative_inputs() {
        // Single-layer probe: identity-ish conv (center tap 1) then slope 0.2.
        let mut d = Discriminator::<f32>::init(&cfg(64), 1).unwrap();
        if let Layer::Conv(c) = &mut d.convs.layers[0] {
            c.w.fill(0.0);
            for co in 0..c.w.shape()[0] {
                c.w[(co, 0, 1, 1)] = 1.0; // stride-2 center-ish tap on channel 0
            }
            c.b.fill(0.0);
        }
        let mut img = Array4::<f32>::zeros((1, 3, 64, 64));
        img.slice_mut(ndarray::s![0, 0, .., ..]).fill(-0.5);
        let feat1 = match (&d.convs.layers[0], &d.convs.layers[1]) {
            (Layer::Conv(c), Layer::Act(a)) => {
                let y = c.forward(&img);
                match a {
                    Act::LeakyRelu(_) => {}
                    _ => panic!("expected leaky relu"),
                }
                let mut z = y.clone();
                z.mapv_inplace(|v| if v > 0.0 { v } else { 0.2 * v });
                z
            }
            _ => panic!("unexpected layer structure"),
        };
        // Interior outputs should equal -0.5 * 0.2.
        let v = feat1[(0, 0, 8, 8)];
        assert!((v - (-0.1)).abs() < 1e-6, "leaky relu slope, got {v}");
    }

    #[test]
    fn wrong_input_shape_rejected() {
        let d = Discriminator::<f32>::init(&cfg(64), 1).unwrap();
        assert!(matches!(
            d.infer(&rand_images(1, 128, 1)),
            Err(Error::ShapeMismatch { .. })
        ));
    }
}
