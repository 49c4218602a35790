//! Scalar loss terms for the adversarial training objective, together with
//! their analytic gradients.
//!
//! Conventions:
//! - Patch and pixel losses reduce by **mean**, so values are independent of
//!   resolution and batch size.
//! - The attention activation loss is the per-mask RMS (the mask L2 norm
//!   normalized by `sqrt(H·W)`), averaged over the batch. A mask that is all
//!   ones scores exactly 1.
//! - The age regression loss is the squared L2 distance between the
//!   discriminator's age vector and the one-hot target, averaged over the
//!   batch.

use ndarray::{Array2, Array4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Scalar;

/// Coefficients of the weighted loss combination.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_recon: f64,
    pub lambda_actv: f64,
    pub lambda_reg: f64,
}

impl LossWeights {
    pub fn new(lambda_recon: f64, lambda_actv: f64, lambda_reg: f64) -> Result<Self> {
        for (name, v) in [
            ("lambda_recon", lambda_recon),
            ("lambda_actv", lambda_actv),
            ("lambda_reg", lambda_reg),
        ] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::invalid(format!(
                    "{name} must be finite and non-negative, got {v}"
                )));
            }
        }
        Ok(LossWeights {
            lambda_recon,
            lambda_actv,
            lambda_reg,
        })
    }
}

/// Per-step scalar losses as logged during training.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub gan_g: f64,
    pub gan_d: f64,
    pub recon: f64,
    pub actv: f64,
    pub reg: f64,
    pub total: f64,
}

impl LossReport {
    pub fn is_finite(&self) -> bool {
        self.gan_g.is_finite()
            && self.gan_d.is_finite()
            && self.recon.is_finite()
            && self.actv.is_finite()
            && self.reg.is_finite()
            && self.total.is_finite()
    }
}

fn check_same_shape<T: Scalar, D: ndarray::Dimension>(
    a: &ndarray::Array<T, D>,
    b: &ndarray::Array<T, D>,
) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(
            format!("{:?}", a.shape()),
            format!("{:?}", b.shape()),
        ));
    }
    Ok(())
}

/// Discriminator side of the least-squares adversarial loss:
/// `mean((real - 1)^2) + mean(fake^2)`.
pub fn lsgan_d_loss<T: Scalar>(real: &Array4<T>, fake: &Array4<T>) -> Result<T> {
    check_same_shape(real, fake)?;
    let n = T::of_f64(real.len() as f64);
    let one = T::one();
    let mut lr = T::zero();
    let mut lf = T::zero();
    for (&r, &f) in real.iter().zip(fake.iter()) {
        lr += (r - one) * (r - one);
        lf += f * f;
    }
    Ok(lr / n + lf / n)
}

/// Gradients of [`lsgan_d_loss`] with respect to both score maps.
pub fn lsgan_d_grads<T: Scalar>(real: &Array4<T>, fake: &Array4<T>) -> (Array4<T>, Array4<T>) {
    let n = T::of_f64(real.len() as f64);
    let two = T::of_f64(2.0);
    let one = T::one();
    let d_real = real.mapv(|r| two * (r - one) / n);
    let d_fake = fake.mapv(|f| two * f / n);
    (d_real, d_fake)
}

/// Generator side of the least-squares adversarial loss: `mean((fake - 1)^2)`.
pub fn lsgan_g_loss<T: Scalar>(fake: &Array4<T>) -> T {
    let n = T::of_f64(fake.len() as f64);
    let one = T::one();
    let mut l = T::zero();
    for &f in fake.iter() {
        l += (f - one) * (f - one);
    }
    l / n
}

pub fn lsgan_g_grad<T: Scalar>(fake: &Array4<T>) -> Array4<T> {
    let n = T::of_f64(fake.len() as f64);
    let two = T::of_f64(2.0);
    let one = T::one();
    fake.mapv(|f| two * (f - one) / n)
}

/// Mean absolute difference over all pixels and channels (cycle L1).
pub fn reconstruction_loss<T: Scalar>(recon: &Array4<T>, original: &Array4<T>) -> Result<T> {
    check_same_shape(recon, original)?;
    let n = T::of_f64(recon.len() as f64);
    let mut l = T::zero();
    for (&a, &b) in recon.iter().zip(original.iter()) {
        l += (a - b).abs();
    }
    Ok(l / n)
}

/// Gradient of [`reconstruction_loss`] with respect to `recon`.
pub fn reconstruction_grad<T: Scalar>(recon: &Array4<T>, original: &Array4<T>) -> Array4<T> {
    let n = T::of_f64(recon.len() as f64);
    let mut d = Array4::zeros(recon.raw_dim());
    for ((&a, &b), g) in recon.iter().zip(original.iter()).zip(d.iter_mut()) {
        *g = if a > b {
            T::one() / n
        } else if a < b {
            -T::one() / n
        } else {
            T::zero()
        };
    }
    d
}

/// Attention activation loss over a batch of masks `(B, 1, H, W)`:
/// per-mask RMS, averaged over the batch.
pub fn attention_activation_loss<T: Scalar>(masks: &Array4<T>) -> Result<T> {
    for &v in masks.iter() {
        if v < T::zero() || v > T::one() {
            return Err(Error::invalid(format!(
                "attention mask entry {v} outside [0, 1]"
            )));
        }
    }
    let (b, c, h, w) = masks.dim();
    let plane = T::of_f64((c * h * w) as f64);
    let mut total = T::zero();
    for sample in masks.outer_iter() {
        let mut ss = T::zero();
        for &v in sample.iter() {
            ss += v * v;
        }
        total += (ss / plane).sqrt();
    }
    Ok(total / T::of_f64(b as f64))
}

/// Gradient of [`attention_activation_loss`]. Zero where a mask is all zeros.
pub fn attention_activation_grad<T: Scalar>(masks: &Array4<T>) -> Array4<T> {
    let (b, c, h, w) = masks.dim();
    let plane = T::of_f64((c * h * w) as f64);
    let bn = T::of_f64(b as f64);
    let mut d = Array4::zeros(masks.raw_dim());
    for (sample, mut ds) in masks.outer_iter().zip(d.outer_iter_mut()) {
        let mut ss = T::zero();
        for &v in sample.iter() {
            ss += v * v;
        }
        let rms = (ss / plane).sqrt();
        if rms > T::zero() {
            let scale = (bn * plane * rms).recip();
            for (g, &v) in ds.iter_mut().zip(sample.iter()) {
                *g = v * scale;
            }
        }
    }
    d
}

/// Squared L2 distance between predicted age vectors and one-hot targets,
/// averaged over the batch. Rows are samples.
pub fn age_regression_loss<T: Scalar>(pred: &Array2<T>, target: &Array2<T>) -> Result<T> {
    check_same_shape(pred, target)?;
    let b = T::of_f64(pred.dim().0 as f64);
    let mut l = T::zero();
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let d = p - t;
        l += d * d;
    }
    Ok(l / b)
}

/// Gradient of [`age_regression_loss`] with respect to `pred`.
pub fn age_regression_grad<T: Scalar>(pred: &Array2<T>, target: &Array2<T>) -> Array2<T> {
    let b = T::of_f64(pred.dim().0 as f64);
    let two = T::of_f64(2.0);
    let mut d = Array2::zeros(pred.raw_dim());
    for ((&p, &t), g) in pred.iter().zip(target.iter()).zip(d.iter_mut()) {
        *g = two * (p - t) / b;
    }
    d
}

/// Weighted combination `gan + λ_recon·recon + λ_actv·actv + λ_reg·reg`.
pub fn total_loss(
    gan: f64,
    recon: f64,
    actv: f64,
    reg: f64,
    weights: &LossWeights,
) -> Result<f64> {
    for (name, v) in [("gan", gan), ("recon", recon), ("actv", actv), ("reg", reg)] {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                context: format!("total_loss input {name}"),
            });
        }
    }
    Ok(gan
        + weights.lambda_recon * recon
        + weights.lambda_actv * actv
        + weights.lambda_reg * reg)
}
