//! Flat key-value config file (TOML) merged with CLI flag overrides; flags
//! win. Every key is optional; unset keys keep the built-in defaults.

use std::path::Path;

use agecycle::generator::SkipMode;
use agecycle::trainer::{TrainConfig, WeightsSpec};
use anyhow::{bail, Context, Result};
use serde::Deserialize;

/// Keys accepted in the config file. See `configs/desk.toml` for a template.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileConfig {
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub learning_rate: Option<f64>,
    pub g_update_period: Option<u64>,
    pub resolution: Option<usize>,
    pub n_groups: Option<usize>,
    pub seed: Option<u64>,
    pub train_fraction: Option<f64>,
    /// "auto" or three comma-separated numbers "recon,actv,reg".
    pub weights: Option<String>,
    pub lambda_actv: Option<f64>,
    pub use_attention: Option<bool>,
    pub ordered_input: Option<bool>,
    pub fake_age_updates_d: Option<bool>,
    pub gen_base_width: Option<usize>,
    pub gen_res_blocks: Option<usize>,
    /// "atanh", "none", or "scaled:<gain>".
    pub gen_skip: Option<String>,
    pub attention_gain: Option<f64>,
    pub disc_widths: Option<Vec<usize>>,
    pub adam_beta1: Option<f64>,
    pub adam_beta2: Option<f64>,
    pub checkpoint_every_epochs: Option<usize>,
    /// "desk" or "paper": the preset the other keys override.
    pub preset: Option<String>,
}

pub fn parse_weights(spec: &str) -> Result<WeightsSpec> {
    if spec.trim() == "auto" {
        return Ok(WeightsSpec::Auto);
    }
    let parts: Vec<&str> = spec.split(',').map(str::trim).collect();
    if parts.len() != 3 {
        bail!("weights must be \"auto\" or \"recon,actv,reg\", got {spec:?}");
    }
    let vals: Vec<f64> = parts
        .iter()
        .map(|p| p.parse::<f64>().with_context(|| format!("bad weight {p:?}")))
        .collect::<Result<_>>()?;
    Ok(WeightsSpec::Fixed {
        lambda_recon: vals[0],
        lambda_actv: vals[1],
        lambda_reg: vals[2],
    })
}

pub fn parse_skip(spec: &str) -> Result<SkipMode> {
    match spec.trim() {
        "atanh" => Ok(SkipMode::Atanh),
        "none" => Ok(SkipMode::None),
        s if s.starts_with("scaled:") => {
            let gain: f64 = s["scaled:".len()..]
                .parse()
                .with_context(|| format!("bad skip gain in {spec:?}"))?;
            Ok(SkipMode::Scaled { gain })
        }
        other => bail!("gen_skip must be \"atanh\", \"none\" or \"scaled:<gain>\", got {other:?}"),
    }
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    /// Apply file keys over the preset base.
    pub fn into_train_config(self) -> Result<TrainConfig> {
        let mut cfg = match self.preset.as_deref() {
            None | Some("desk") => TrainConfig::desk(),
            Some("paper") => TrainConfig::default(),
            Some(other) => bail!("unknown preset {other:?} (expected \"desk\" or \"paper\")"),
        };
        macro_rules! set {
            ($field:ident) => {
                if let Some(v) = self.$field {
                    cfg.$field = v;
                }
            };
        }
        set!(epochs);
        set!(batch_size);
        set!(learning_rate);
        set!(g_update_period);
        set!(resolution);
        set!(n_groups);
        set!(seed);
        set!(train_fraction);
        set!(use_attention);
        set!(ordered_input);
        set!(fake_age_updates_d);
        set!(gen_base_width);
        set!(gen_res_blocks);
        set!(attention_gain);
        set!(adam_beta1);
        set!(adam_beta2);
        set!(checkpoint_every_epochs);
        if let Some(w) = self.weights {
            cfg.weights = parse_weights(&w)?;
        }
        if let Some(v) = self.lambda_actv {
            cfg.lambda_actv_override = Some(v);
        }
        if let Some(s) = self.gen_skip {
            cfg.gen_skip = parse_skip(&s)?;
        }
        if let Some(w) = self.disc_widths {
            if w.len() != 6 {
                bail!("disc_widths must list exactly 6 values, got {}", w.len());
            }
            cfg.disc_widths = [w[0], w[1], w[2], w[3], w[4], w[5]];
        }
        Ok(cfg)
    }
}
