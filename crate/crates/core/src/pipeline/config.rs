//! Experiment configuration.
//!
//! Configs are TOML documents with the sections `problem`, `flow`,
//! `diffusion`, `training` and `io`. Every section except `problem` may be
//! omitted; unknown keys anywhere are errors. A minimal vector problem:
//!
//! ```toml
//! [problem]
//! kind = "vector"
//! measurement_dither = true
//!
//! [problem.degradation]
//! kind = "linear-matrix"
//! input_shape = [2]
//! matrix = [[1.0, 0.0]]
//!
//! [training]
//! sigma = 0.05
//! ```
//!
//! Command-line overrides use dotted keys, e.g. `training.sigma=0.1` or
//! `flow.activation=relu`; the value is parsed as TOML and falls back to a
//! plain string.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degradations::{DegradationDescriptor, DegradationOp};
use crate::diffusion::{DenoiserConfig, ScheduleConfig, SigmaRule};
use crate::error::{Error, Result};
use crate::flow::{FlowConfig, PartitionOrder};
use crate::nn::Activation;
use crate::numerics::AdamConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProblemKind {
    /// Standard normal vectors, generated on the fly.
    Vector,
    /// 8-bit images from a directory.
    Image,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemSection {
    pub kind: ProblemKind,
    pub degradation: DegradationDescriptor,
    /// Directory of training images (image problems).
    #[serde(default)]
    pub data_dir: Option<PathBuf>,
    /// Vector problems: perturb flow-training inputs by `σ·D⁺ξ` while
    /// keeping the clean measurement as the target, so that the
    /// measurement likelihood of width `σ` is actually exercised.
    #[serde(default)]
    pub measurement_dither: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FlowSection {
    pub layers: usize,
    pub hidden: usize,
    pub clamp: f64,
    /// Defaults to `tanh` for vectors and `relu` for images.
    pub activation: Option<Activation>,
    pub partition: PartitionOrder,
}

impl Default for FlowSection {
    fn default() -> Self {
        FlowSection {
            layers: 8,
            hidden: 64,
            clamp: 2.0,
            activation: None,
            partition: PartitionOrder::Alternate,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DiffusionSection {
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub sigma: SigmaRule,
    pub loss_weight: f64,
    pub hidden: usize,
    pub blocks: usize,
    pub embed_dim: usize,
    pub activation: Activation,
    /// Push the training set through the frozen flow once instead of per
    /// batch (image problems; vectors are always fresh).
    pub cache_latents: bool,
    /// Predict the noise as a learned correction to the standard-normal
    /// prior's exact answer.
    pub prior_skip: bool,
}

impl Default for DiffusionSection {
    fn default() -> Self {
        let s = ScheduleConfig::default();
        DiffusionSection {
            steps: s.steps,
            beta_start: s.beta_start,
            beta_end: s.beta_end,
            sigma: s.sigma,
            loss_weight: s.loss_weight,
            hidden: 64,
            blocks: 2,
            embed_dim: 32,
            activation: Activation::Silu,
            cache_latents: false,
            prior_skip: true,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LrDecay {
    Constant,
    /// Half-cosine from the base rate down to zero over the run.
    #[default]
    Cosine,
}

/// Largest seed a config file can hold.
pub const MAX_SEED: u64 = i64::MAX as u64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainingSection {
    /// Width of the measurement likelihood in the flow objective.
    pub sigma: f64,
    pub batch_size: usize,
    pub flow_iters: usize,
    pub ddpm_iters: usize,
    pub flow_lr: f64,
    pub ddpm_lr: f64,
    pub lr_decay: LrDecay,
    /// Global gradient-norm clip for flow training (0 disables).
    pub clip_norm: f64,
    pub log_every: usize,
    /// Samples used for post-training diagnostics.
    pub eval_samples: usize,
    pub seed: u64,
}

impl Default for TrainingSection {
    fn default() -> Self {
        TrainingSection {
            sigma: 0.05,
            batch_size: 256,
            flow_iters: 20_000,
            ddpm_iters: 20_000,
            flow_lr: 1e-3,
            ddpm_lr: 1e-3,
            lr_decay: LrDecay::Cosine,
            clip_norm: 1.0,
            log_every: 100,
            eval_samples: 10_000,
            seed: 0,
        }
    }
}

impl TrainingSection {
    pub fn lr_at(&self, base: f64, iter: usize, total: usize) -> f64 {
        match self.lr_decay {
            LrDecay::Constant => base,
            LrDecay::Cosine => {
                let p = iter as f64 / total.max(1) as f64;
                0.5 * base * (1.0 + (std::f64::consts::PI * p).cos())
            }
        }
    }

    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr: lr as f32,
            ..AdamConfig::default()
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IoSection {
    pub out_dir: PathBuf,
}

impl Default for IoSection {
    fn default() -> Self {
        IoSection {
            out_dir: PathBuf::from("runs/default"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub problem: ProblemSection,
    #[serde(default)]
    pub flow: FlowSection,
    #[serde(default)]
    pub diffusion: DiffusionSection,
    #[serde(default)]
    pub training: TrainingSection,
    #[serde(default)]
    pub io: IoSection,
}

fn set_dotted(table: &mut toml::Table, key: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = key.split('.').collect();
    let last = parts
        .pop()
        .filter(|k| !k.is_empty())
        .ok_or_else(|| Error::Config(format!("override key {key:?} is empty")))?;
    let mut cur = table;
    for p in parts {
        let entry = cur
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        cur = entry
            .as_table_mut()
            .ok_or_else(|| Error::Config(format!("override {key:?}: {p} is not a section")))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn parse_override(raw: &str) -> Result<(String, toml::Value)> {
    let (key, val) = raw
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override {raw:?} is not key=value")))?;
    let key = key.trim().to_string();
    let val = val.trim();
    let parsed = toml::from_str::<toml::Table>(&format!("v = {val}"))
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(val.to_string()));
    Ok((key, parsed))
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with_overrides(text, &[])
    }

    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for raw in overrides {
            let (k, v) = parse_override(raw)?;
            set_dotted(&mut table, &k, v)?;
        }
        let cfg: ExperimentConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path, overrides: &[String]) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read config {}: {e}", path.display())))?;
        let mut cfg = Self::from_toml_with_overrides(&text, overrides)?;
        // Relative data paths are relative to the config file.
        if let (Some(dir), Some(base)) = (cfg.problem.data_dir.as_mut(), path.parent()) {
            if dir.is_relative() {
                *dir = base.join(&*dir);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let t = &self.training;
        if !(t.sigma > 0.0 && t.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "training.sigma must be > 0, got {}",
                t.sigma
            )));
        }
        if t.seed > MAX_SEED {
            return Err(Error::Config(format!(
                "training.seed must be at most {MAX_SEED} (TOML integers are signed 64-bit), got {}",
                t.seed
            )));
        }
        if t.batch_size == 0 || t.log_every == 0 {
            return Err(Error::Config(
                "batch_size and log_every must be positive".into(),
            ));
        }
        if !(t.flow_lr > 0.0 && t.ddpm_lr > 0.0) || t.clip_norm < 0.0 {
            return Err(Error::Config(
                "learning rates must be positive and clip_norm >= 0".into(),
            ));
        }
        let op = self.degradation()?;
        let kind_ok = match self.problem.kind {
            ProblemKind::Vector => op.input_shape().len() == 1,
            ProblemKind::Image => op.input_shape().len() == 3,
        };
        if !kind_ok {
            return Err(Error::Config(format!(
                "{:?} problem is incompatible with degradation input shape {:?}",
                self.problem.kind,
                op.input_shape()
            )));
        }
        if self.problem.measurement_dither && self.problem.kind == ProblemKind::Image {
            return Err(Error::Config(
                "measurement_dither applies to vector problems only".into(),
            ));
        }
        self.flow_config()?.validate()?;
        self.schedule_config().build()?;
        self.denoiser_config()?.validate()
    }

    pub fn degradation(&self) -> Result<DegradationOp> {
        DegradationOp::from_descriptor(&self.problem.degradation, None)
    }

    pub fn flow_config(&self) -> Result<FlowConfig> {
        let op = self.degradation()?;
        let mut cfg = match self.problem.kind {
            ProblemKind::Vector => FlowConfig::vector(op.input_len(), op.output_len()),
            ProblemKind::Image => {
                let s = op.input_shape();
                FlowConfig::image(s[0], s[1], s[2], op.scale())
            }
        };
        if cfg.y_shape() != op.output_shape() {
            return Err(Error::Config(format!(
                "flow y shape {:?} does not match the measurement shape {:?}",
                cfg.y_shape(),
                op.output_shape()
            )));
        }
        let f = &self.flow;
        cfg.layers = f.layers;
        cfg.hidden = f.hidden;
        cfg.clamp = f.clamp;
        cfg.partition = f.partition;
        if let Some(a) = f.activation {
            cfg.activation = a;
        }
        Ok(cfg)
    }

    pub fn schedule_config(&self) -> ScheduleConfig {
        let d = &self.diffusion;
        ScheduleConfig {
            steps: d.steps,
            beta_start: d.beta_start,
            beta_end: d.beta_end,
            sigma: d.sigma,
            loss_weight: d.loss_weight,
        }
    }

    pub fn denoiser_config(&self) -> Result<DenoiserConfig> {
        let f = self.flow_config()?;
        let d = &self.diffusion;
        Ok(DenoiserConfig {
            z_shape: f.z_shape(),
            y_shape: f.y_shape(),
            hidden: d.hidden,
            blocks: d.blocks,
            embed_dim: d.embed_dim,
            activation: d.activation,
            prior_skip: d.prior_skip,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const TOY: &str = r#"
[problem]
kind = "vector"
measurement_dither = true

[problem.degradation]
kind = "linear-matrix"
input_shape = [2]
matrix = [[1.0, 0.0]]

[training]
sigma = 0.05
"#;

    #[test]
    fn minimal_config_fills_defaults() {
        let c = ExperimentConfig::from_toml(TOY).unwrap();
        assert_eq!(c.flow.layers, 8);
        assert_eq!(c.diffusion.steps, 1000);
        assert_eq!(c.flow_config().unwrap().y_dim, 1);
        assert_eq!(c.denoiser_config().unwrap().z_shape, vec![1]);
        let back = ExperimentConfig::from_toml(&c.to_toml()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn overrides_apply_and_unknown_keys_fail() {
        let c = ExperimentConfig::from_toml_with_overrides(
            TOY,
            &["training.sigma=0.1".into(), "flow.activation=relu".into()],
        )
        .unwrap();
        assert_eq!(c.training.sigma, 0.1);
        assert_eq!(c.flow.activation, Some(Activation::Relu));
        assert!(
            ExperimentConfig::from_toml_with_overrides(TOY, &["training.sigmaa=1".into()]).is_err()
        );
        assert!(ExperimentConfig::from_toml(&format!("{TOY}\n[extra]\na = 1\n")).is_err());
    }

    #[test]
    fn nonpositive_sigma_is_rejected() {
        let err = ExperimentConfig::from_toml_with_overrides(TOY, &["training.sigma=0".into()]);
        assert!(matches!(err, Err(Error::Config(_))));
    }
}
