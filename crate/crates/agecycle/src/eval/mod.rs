//! Quantitative evaluation: age translation accuracy and identity
//! preservation, against pluggable estimator backends.
//!
//! The default backend is local: a small convolutional age classifier
//! trained on procedural renders (frozen before any generated image is
//! scored) plus a pixel-space identity verifier. A remote HTTP backend
//! implements the same interface for external estimators.
//!
//! Desk-scale numbers are group-level and are not comparable to published
//! year-scale results; they support relative comparisons only (e.g.
//! ablations should not beat the full model).

pub mod oracle;
pub mod remote;

pub use oracle::{OracleBackend, OracleVerifier};
pub use remote::{remote_estimator_client, RemoteOptions};

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::data::{assign_age_group, condition_rows, stack_images, Dataset, GroupScheme, Image};
use crate::error::{Error, Result};
use crate::generator::Generator;

/// An age estimator plus face verifier. Implementations must be
/// deterministic for fixed inputs or document otherwise.
pub trait EstimatorBackend {
    /// Estimated age in years.
    fn estimate_age(&self, image: &Image) -> Result<f64>;
    /// Same-person confidence in `[0, 100]`.
    fn verify(&self, a: &Image, b: &Image) -> Result<f64>;
}

/// Default verification threshold, mirroring the published protocol's
/// operating point.
pub const DEFAULT_VERIFY_THRESHOLD: f64 = 76.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupBreakdown {
    pub target_group: usize,
    pub mean_error: f64,
    pub count: usize,
}

/// Evaluation outcome; serialized as JSON and printable as a table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean_group_error: f64,
    pub std_group_error: f64,
    /// Fraction of (input, output) pairs at or above the verify threshold.
    pub identity_rate: f64,
    pub identity_mean_score: f64,
    pub verify_threshold: f64,
    pub per_group: Vec<GroupBreakdown>,
    /// Mean attention mask value over all translations, when available.
    pub mean_attention: Option<f64>,
    pub n_translations: usize,
}

impl EvalReport {
    /// Human-readable table: per-group errors, then the summary row with
    /// the verification rate and bracketed mean score.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str("target group | age est. error (groups) | n\n");
        out.push_str("-------------+--------------------------+----\n");
        for g in &self.per_group {
            out.push_str(&format!(
                "{:>12} | {:>24.4} | {:>3}\n",
                g.target_group, g.mean_error, g.count
            ));
        }
        out.push_str(&format!(
            "overall: age est. error {:.4} ± {:.4} | veri. rate {:.2}% ({:.2}) @ {:.1}\n",
            self.mean_group_error,
            self.std_group_error,
            100.0 * self.identity_rate,
            self.identity_mean_score,
            self.verify_threshold
        ));
        if let Some(a) = self.mean_attention {
            out.push_str(&format!("mean attention activation: {a:.4}\n"));
        }
        out
    }
}

/// Mean |estimated group − target group| over generated images, with
/// standard deviation and a per-target-group breakdown.
pub fn group_classification_error(
    generated: &[(Image, usize)],
    backend: &dyn EstimatorBackend,
    scheme: &GroupScheme,
) -> Result<(f64, f64, Vec<GroupBreakdown>)> {
    if generated.is_empty() {
        return Err(Error::invalid("no generated images to evaluate"));
    }
    let mut errors = Vec::with_capacity(generated.len());
    let mut by_target: std::collections::BTreeMap<usize, (f64, usize)> =
        std::collections::BTreeMap::new();
    for (i, (img, target)) in generated.iter().enumerate() {
        let age = backend
            .estimate_age(img)
            .map_err(|e| Error::Backend(format!("image {i}: {e}")))?;
        let est_group = assign_age_group(age.round().max(0.0) as i64, scheme)?;
        let err = (est_group as f64 - *target as f64).abs();
        errors.push(err);
        let slot = by_target.entry(*target).or_insert((0.0, 0));
        slot.0 += err;
        slot.1 += 1;
    }
    let mean = errors.iter().sum::<f64>() / errors.len() as f64;
    let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / errors.len() as f64;
    let per_group = by_target
        .into_iter()
        .map(|(g, (sum, n))| GroupBreakdown {
            target_group: g,
            mean_error: sum / n as f64,
            count: n,
        })
        .collect();
    Ok((mean, var.sqrt(), per_group))
}

/// Fraction of aligned (input, output) pairs whose verify score reaches the
/// threshold, plus the mean score.
pub fn identity_preservation(
    inputs: &[Image],
    outputs: &[Image],
    backend: &dyn EstimatorBackend,
    threshold: f64,
) -> Result<(f64, f64)> {
    if inputs.len() != outputs.len() {
        return Err(Error::invalid(format!(
            "identity_preservation got {} inputs but {} outputs",
            inputs.len(),
            outputs.len()
        )));
    }
    if inputs.is_empty() {
        return Err(Error::invalid("identity_preservation needs at least one pair"));
    }
    let mut matches = 0usize;
    let mut total = 0.0;
    for (i, (a, b)) in inputs.iter().zip(outputs.iter()).enumerate() {
        let score = backend
            .verify(a, b)
            .map_err(|e| Error::Backend(format!("pair {i}: {e}")))?;
        if !(0.0..=100.0).contains(&score) {
            return Err(Error::Backend(format!(
                "pair {i}: verify score {score} outside [0, 100]"
            )));
        }
        if score >= threshold {
            matches += 1;
        }
        total += score;
    }
    Ok((
        matches as f64 / inputs.len() as f64,
        total / inputs.len() as f64,
    ))
}

/// Evaluation settings.
#[derive(Debug, Clone, Copy)]
pub struct EvalOptions {
    pub threshold: f64,
    pub batch_size: usize,
}

impl Default for EvalOptions {
    fn default() -> Self {
        EvalOptions {
            threshold: DEFAULT_VERIFY_THRESHOLD,
            batch_size: 24,
        }
    }
}

/// One planned translation: test image index and target group.
#[derive(Debug, Clone, Copy)]
struct Task {
    record: usize,
    target: usize,
}

/// Translate every test image to every other group (the progressor handles
/// older targets, the regressor younger ones), then score age accuracy and
/// identity preservation.
pub fn evaluate_model(
    g_p: &Generator<f32>,
    g_r: &Generator<f32>,
    test: &Dataset,
    scheme: &GroupScheme,
    backend: &dyn EstimatorBackend,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::invalid("empty test split"));
    }
    let n = test.n_groups;
    let mut progress_tasks = Vec::new();
    let mut regress_tasks = Vec::new();
    for (i, r) in test.records.iter().enumerate() {
        for t in 0..n {
            if t > r.group {
                progress_tasks.push(Task { record: i, target: t });
            } else if t < r.group {
                regress_tasks.push(Task { record: i, target: t });
            }
        }
    }

    let mut generated: Vec<(Image, usize)> = Vec::new();
    let mut inputs: Vec<Image> = Vec::new();
    let mut attention_sum = 0.0f64;
    let mut attention_count = 0usize;

    for (gen, tasks) in [(g_p, &progress_tasks), (g_r, &regress_tasks)] {
        for chunk in tasks.chunks(opts.batch_size.max(1)) {
            let images: Vec<&Image> = chunk.iter().map(|t| &test.images[t.record]).collect();
            let batch = stack_images(&images);
            let targets: Vec<usize> = chunk.iter().map(|t| t.target).collect();
            let conds: Array2<f32> = condition_rows(&targets, n)?;
            let out = gen.infer(&batch, &conds)?;
            for (row, task) in chunk.iter().enumerate() {
                let img = out
                    .fused
                    .slice(ndarray::s![row, .., .., ..])
                    .to_owned();
                generated.push((img.clone(), task.target));
                inputs.push(test.images[task.record].clone());
            }
            attention_sum += out.attention.iter().map(|&v| v as f64).sum::<f64>();
            attention_count += out.attention.len();
        }
    }

    let (mean, std, per_group) = group_classification_error(&generated, backend, scheme)?;
    let outputs: Vec<Image> = generated.into_iter().map(|(img, _)| img).collect();
    let (rate, mean_score) = identity_preservation(&inputs, &outputs, backend, opts.threshold)?;

    Ok(EvalReport {
        mean_group_error: mean,
        std_group_error: std,
        identity_rate: rate,
        identity_mean_score: mean_score,
        verify_threshold: opts.threshold,
        per_group,
        mean_attention: if attention_count > 0 {
            Some(attention_sum / attention_count as f64)
        } else {
            None
        },
        n_translations: inputs.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;

    /// Backend with scripted ages and a fixed verify score.
    struct Scripted {
        age: Box<dyn Fn(&Image) -> f64>,
        score: f64,
    }

    impl EstimatorBackend for Scripted {
        fn estimate_age(&self, image: &Image) -> Result<f64> {
            Ok((self.age)(image))
        }
        fn verify(&self, _a: &Image, _b: &Image) -> Result<f64> {
            Ok(self.score)
        }
    }

    fn img(v: f32) -> Image {
        Array3::from_elem((3, 8, 8), v)
    }

    #[test]
    fn perfect_estimator_zero_error() {
        let scheme = GroupScheme::uniform_decades(4).unwrap();
        // Encode the target group in the constant pixel value.
        let generated: Vec<(Image, usize)> =
            (0..4).map(|g| (img(g as f32 * 0.1), g)).collect();
        let backend = Scripted {
            age: Box::new(|im: &Image| ((im[(0, 0, 0)] / 0.1).round() as f64) * 10.0 + 5.0),
            score: 100.0,
        };
        let (mean, std, per_group) =
            group_classification_error(&generated, &backend, &scheme).unwrap();
        assert_eq!(mean, 0.0);
        assert_eq!(std, 0.0);
        assert_eq!(per_group.len(), 4);
    }

    #[test]
    fn constant_young_estimator_error_is_target_distance() {
        let scheme = GroupScheme::uniform_decades(4).unwrap();
        let generated: Vec<(Image, usize)> = (0..5).map(|_| (img(0.0), 3usize)).collect();
        let backend = Scripted {
            age: Box::new(|_| 5.0),
            score: 100.0,
        };
        let (mean, _, _) = group_classification_error(&generated, &backend, &scheme).unwrap();
        assert_eq!(mean, 3.0);
    }

    #[test]
    fn identity_trivial_cases() {
        let backend = Scripted {
            age: Box::new(|_| 0.0),
            score: 100.0,
        };
        let inputs = vec![img(0.1), img(0.2)];
        let (rate, mean) =
            identity_preservation(&inputs, &inputs.clone(), &backend, 76.5).unwrap();
        assert_eq!(rate, 1.0);
        assert_eq!(mean, 100.0);

        assert!(identity_preservation(&inputs, &inputs[..1].to_vec(), &backend, 76.5).is_err());
        assert!(identity_preservation(&[], &[], &backend, 76.5).is_err());
    }

    #[test]
    fn identity_rate_monotone_in_threshold() {
        struct Alternating;
        impl EstimatorBackend for Alternating {
            fn estimate_age(&self, _: &Image) -> Result<f64> {
                Ok(0.0)
            }
            fn verify(&self, a: &Image, _b: &Image) -> Result<f64> {
                Ok(if a[(0, 0, 0)] > 0.0 { 90.0 } else { 40.0 })
            }
        }
        let inputs = vec![img(1.0), img(-1.0), img(1.0), img(-1.0)];
        let outputs = inputs.clone();
        let mut prev = f64::INFINITY;
        for t in [0.0, 40.0, 60.0, 90.0, 95.0] {
            let (rate, _) = identity_preservation(&inputs, &outputs, &Alternating, t).unwrap();
            assert!(rate <= prev, "rate not monotone at threshold {t}");
            prev = rate;
        }
    }

    #[test]
    fn empty_generated_rejected() {
        let scheme = GroupScheme::uniform_decades(4).unwrap();
        let backend = Scripted {
            age: Box::new(|_| 0.0),
            score: 0.0,
        };
        assert!(group_classification_error(&[], &backend, &scheme).is_err());
    }
}
