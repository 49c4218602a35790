//! Local estimator backends for the procedural corpus.
//!
//! Age: a small convolutional classifier trained on labeled renders and
//! frozen before scoring any generated image, so the metric is independent
//! of the adversarial networks' own age heads.
//!
//! Identity: nearest-subject style matching in a mean-pooled pixel space;
//! the score decays with embedding distance. Before use as a metric oracle
//! its self-consistency must exceed 99% (checked by [`OracleVerifier::self_consistency`]).

use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::EstimatorBackend;
use crate::data::{Dataset, GroupScheme, Image};
use crate::error::{Error, Result};
use crate::nn::{self, Act, Adam, Layer, Linear, ParamInit, Seq};

/// Small CNN: three stride-2 convolutions and a linear head over groups.
#[derive(Debug, Clone)]
pub struct OracleAgeEstimator {
    convs: Seq<f32>,
    head: Linear<f32>,
    scheme: GroupScheme,
    resolution: usize,
}

/// Training settings for the oracle classifier.
#[derive(Debug, Clone, Copy)]
pub struct OracleTrainOptions {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for OracleTrainOptions {
    fn default() -> Self {
        OracleTrainOptions {
            epochs: 30,
            batch_size: 32,
            learning_rate: 1e-3,
            seed: 17,
        }
    }
}

fn softmax_rows(logits: &Array2<f32>) -> Array2<f32> {
    let mut out = logits.clone();
    for mut row in out.outer_iter_mut() {
        let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    out
}

/// Mean cross-entropy and its gradient with respect to the logits.
fn softmax_ce(logits: &Array2<f32>, labels: &[usize]) -> (f32, Array2<f32>) {
    let (b, _) = logits.dim();
    let probs = softmax_rows(logits);
    let mut loss = 0.0f32;
    let mut grad = probs.clone();
    for (i, &y) in labels.iter().enumerate() {
        loss -= probs[(i, y)].max(1e-12).ln();
        grad[(i, y)] -= 1.0;
    }
    grad.mapv_inplace(|v| v / b as f32);
    (loss / b as f32, grad)
}

impl OracleAgeEstimator {
    /// Train on labeled renders. The returned estimator is frozen.
    pub fn train(dataset: &Dataset, scheme: &GroupScheme, opts: &OracleTrainOptions) -> Result<Self> {
        if dataset.is_empty() {
            return Err(Error::invalid("cannot train the age oracle on an empty dataset"));
        }
        if scheme.n_groups() != dataset.n_groups {
            return Err(Error::invalid(format!(
                "scheme has {} groups but dataset has {}",
                scheme.n_groups(),
                dataset.n_groups
            )));
        }
        let resolution = dataset.images[0].dim().1;
        if resolution % 8 != 0 {
            return Err(Error::invalid("oracle classifier needs a resolution divisible by 8"));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
        let convs = Seq::new(vec![
            Layer::Conv(nn::conv2d(3, 8, 3, 2, ParamInit::He, &mut rng)),
            Layer::Act(Act::LeakyRelu(0.2)),
            Layer::Conv(nn::conv2d(8, 16, 3, 2, ParamInit::He, &mut rng)),
            Layer::Act(Act::LeakyRelu(0.2)),
            Layer::Conv(nn::conv2d(16, 32, 3, 2, ParamInit::He, &mut rng)),
            Layer::Act(Act::LeakyRelu(0.2)),
        ]);
        let feat = 32 * (resolution / 8) * (resolution / 8);
        let head = nn::linear(feat, dataset.n_groups, ParamInit::Normal(0.02), &mut rng);
        let mut model = OracleAgeEstimator {
            convs,
            head,
            scheme: scheme.clone(),
            resolution,
        };

        let mut opt = Adam::<f32>::new(opts.learning_rate, 0.9, 0.999);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        for _epoch in 0..opts.epochs {
            order.shuffle(&mut rng);
            for chunk in order.chunks(opts.batch_size) {
                let images: Vec<&Image> = chunk.iter().map(|&i| &dataset.images[i]).collect();
                let labels: Vec<usize> = chunk.iter().map(|&i| dataset.records[i].group).collect();
                let batch = crate::data::stack_images(&images);
                model.train_batch(&batch, &labels, &mut opt);
            }
        }
        Ok(model)
    }

    fn train_batch(&mut self, batch: &Array4<f32>, labels: &[usize], opt: &mut Adam<f32>) {
        let cache = self.convs.forward(batch);
        let feat = cache.output();
        let (_, c, h, w) = feat.dim();
        let flat = nn::seq_flatten(feat);
        let logits = self.head.forward(&flat);
        let (_, dlogits) = softmax_ce(&logits, labels);

        let mut conv_grads = self.convs.zero_grads();
        let mut head_dw = Array2::zeros(self.head.w.raw_dim());
        let mut head_db = ndarray::Array1::zeros(self.head.b.raw_dim());
        let dflat = self.head.backward(&flat, &dlogits, &mut head_dw, &mut head_db);
        let dfeat = nn::seq_unflatten(&dflat, c, h, w);
        self.convs.backward(&cache, dfeat, &mut conv_grads, false);

        let mut gviews = Vec::new();
        conv_grads.visit(&mut gviews);
        gviews.push(head_dw.view().into_dyn());
        gviews.push(head_db.view().into_dyn());
        let mut pviews = Vec::new();
        self.convs.visit_mut("c", &mut pviews);
        let mut params: Vec<ndarray::ArrayViewMutD<f32>> =
            pviews.into_iter().map(|(_, v)| v).collect();
        params.push(self.head.w.view_mut().into_dyn());
        params.push(self.head.b.view_mut().into_dyn());
        opt.step(params, gviews);
    }

    pub fn classify(&self, image: &Image) -> Result<usize> {
        let (c, h, w) = image.dim();
        if c != 3 || h != self.resolution || w != self.resolution {
            return Err(Error::shape(
                format!("(3, {0}, {0})", self.resolution),
                format!("{:?}", image.dim()),
            ));
        }
        let batch = crate::data::stack_images(&[image]);
        let feat = self.convs.infer(&batch);
        let logits = self.head.forward(&nn::seq_flatten(&feat));
        let mut best = 0;
        for j in 1..logits.dim().1 {
            if logits[(0, j)] > logits[(0, best)] {
                best = j;
            }
        }
        Ok(best)
    }

    /// Fraction of records classified into their labeled group.
    pub fn accuracy(&self, dataset: &Dataset) -> Result<f64> {
        let mut correct = 0usize;
        for (img, rec) in dataset.images.iter().zip(dataset.records.iter()) {
            if self.classify(img)? == rec.group {
                correct += 1;
            }
        }
        Ok(correct as f64 / dataset.len() as f64)
    }
}

/// Identity verifier: images are mean-pooled to a coarse grid and compared
/// by RMS distance; the confidence decays as `100 · exp(-(d/σ)²)`.
#[derive(Debug, Clone)]
pub struct OracleVerifier {
    /// Pooled grid side length.
    pub grid: usize,
    /// Distance scale.
    pub sigma: f64,
}

impl Default for OracleVerifier {
    fn default() -> Self {
        OracleVerifier {
            grid: 16,
            sigma: 0.05,
        }
    }
}

impl OracleVerifier {
    pub fn embed(&self, image: &Image) -> Vec<f64> {
        let (c, h, w) = image.dim();
        let g = self.grid.min(h);
        let ph = h / g;
        let pw = w / g;
        let mut out = Vec::with_capacity(c * g * g);
        for ci in 0..c {
            for gy in 0..g {
                for gx in 0..g {
                    let mut s = 0.0f64;
                    for y in gy * ph..(gy + 1) * ph {
                        for x in gx * pw..(gx + 1) * pw {
                            s += image[(ci, y, x)] as f64;
                        }
                    }
                    out.push(s / (ph * pw) as f64);
                }
            }
        }
        out
    }

    pub fn score(&self, a: &Image, b: &Image) -> f64 {
        let ea = self.embed(a);
        let eb = self.embed(b);
        let mut ss = 0.0;
        for (x, y) in ea.iter().zip(eb.iter()) {
            ss += (x - y) * (x - y);
        }
        let d = (ss / ea.len() as f64).sqrt();
        100.0 * (-(d / self.sigma).powi(2)).exp()
    }

    /// Match rate of identical-image pairs at the threshold; must exceed
    /// 0.99 before the verifier may serve as a metric oracle.
    pub fn self_consistency(&self, images: &[Image], threshold: f64) -> f64 {
        if images.is_empty() {
            return 0.0;
        }
        let hits = images
            .iter()
            .filter(|img| self.score(img, img) >= threshold)
            .count();
        hits as f64 / images.len() as f64
    }
}

/// The combined local backend: trained age classifier + pixel verifier.
pub struct OracleBackend {
    pub age: OracleAgeEstimator,
    pub verifier: OracleVerifier,
}

impl OracleBackend {
    /// Train the age oracle on `train` and gate the verifier on its
    /// self-consistency over a sample of the training images.
    pub fn train(train: &Dataset, scheme: &GroupScheme, opts: &OracleTrainOptions) -> Result<Self> {
        let age = OracleAgeEstimator::train(train, scheme, opts)?;
        let verifier = OracleVerifier::default();
        let probe: Vec<Image> = train.images.iter().take(64).cloned().collect();
        let consistency = verifier.self_consistency(&probe, super::DEFAULT_VERIFY_THRESHOLD);
        if consistency <= 0.99 {
            return Err(Error::Backend(format!(
                "identity verifier self-consistency {consistency:.3} does not exceed 0.99"
            )));
        }
        Ok(OracleBackend { age, verifier })
    }
}

impl EstimatorBackend for OracleBackend {
    fn estimate_age(&self, image: &Image) -> Result<f64> {
        let group = self.age.classify(image)?;
        self.age.scheme.midpoint_age(group)
    }

    fn verify(&self, a: &Image, b: &Image) -> Result<f64> {
        Ok(self.verifier.score(a, b))
    }
}
