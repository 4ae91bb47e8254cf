use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::zoo::{Arch, TextSpec};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// A tower given either by registry name (`"vitamin-s"`) or in full.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ArchRef {
    Named(String),
    Spec(Arch),
}

impl ArchRef {
    pub fn resolve(&self) -> Result<Arch> {
        let a = match self {
            ArchRef::Named(n) => Arch::named(n)?,
            ArchRef::Spec(a) => a.clone(),
        };
        a.validate()?;
        Ok(a)
    }
}

fn d_n_values() -> usize {
    4
}
fn d_context() -> usize {
    16
}
fn d_noise() -> f64 {
    0.05
}

/// Synthetic paired-data settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// Values per attribute (shape, color, position).
    #[serde(default = "d_n_values")]
    pub n_values: usize,
    #[serde(default = "d_context")]
    pub context: usize,
    /// Std of additive pixel noise.
    #[serde(default = "d_noise")]
    pub noise: f64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            n_values: d_n_values(),
            context: d_context(),
            noise: d_noise(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LttConfig {
    pub enabled: bool,
    pub text_checkpoint: Option<PathBuf>,
}

fn d_eval_per_class() -> usize {
    16
}
fn d_eval_batches() -> usize {
    4
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    /// Images per held-out class for zero-shot accuracy.
    #[serde(default = "d_eval_per_class")]
    pub zero_shot_per_class: usize,
    /// Eval-split batches (of `batch_size`) averaged into the eval loss.
    #[serde(default = "d_eval_batches")]
    pub loss_batches: usize,
    /// Prompt templates averaged per class (1 or 2).
    #[serde(default = "one")]
    pub templates: usize,
}

fn one() -> usize {
    1
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            zero_shot_per_class: d_eval_per_class(),
            loss_batches: d_eval_batches(),
            templates: 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScheduleKind {
    /// Linear warmup, then cosine decay to zero at the last step.
    WarmupCosine,
}

fn d_seed() -> u64 {
    0
}
fn d_batch() -> usize {
    64
}
fn d_lr() -> f64 {
    1e-3
}
fn d_wd() -> f64 {
    0.02
}
fn d_beta1() -> f64 {
    0.9
}
fn d_beta2() -> f64 {
    0.98
}
fn d_eps() -> f64 {
    1e-6
}
fn d_schedule() -> ScheduleKind {
    ScheduleKind::WarmupCosine
}
fn d_drop_path() -> f64 {
    0.1
}
fn d_image_size() -> usize {
    16
}
fn d_log_every() -> u64 {
    10
}
fn yes() -> bool {
    true
}

/// Everything that determines a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "d_seed")]
    pub seed: u64,
    #[serde(default = "d_batch")]
    pub batch_size: usize,
    /// Seen-sample budget; the run takes `ceil(total_samples / batch_size)` steps.
    pub total_samples: u64,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default = "d_wd")]
    pub weight_decay: f64,
    #[serde(default = "d_beta1")]
    pub beta1: f64,
    #[serde(default = "d_beta2")]
    pub beta2: f64,
    #[serde(default = "d_eps")]
    pub eps: f64,
    pub warmup_steps: u64,
    #[serde(default = "d_schedule")]
    pub schedule: ScheduleKind,
    /// Stochastic-depth rate of the deepest block.
    #[serde(default = "d_drop_path")]
    pub drop_path: f64,
    #[serde(default = "d_image_size")]
    pub image_size: usize,
    pub image: ArchRef,
    pub text: TextSpec,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub ltt: LttConfig,
    #[serde(default)]
    pub eval: EvalConfig,
    #[serde(default = "d_log_every")]
    pub log_every: u64,
    /// Steps between rolling checkpoints; 0 writes only the final one.
    #[serde(default)]
    pub checkpoint_every: u64,
    /// When false the metrics `wall_time` column is written as 0 so the
    /// file is bitwise reproducible.
    #[serde(default = "yes")]
    pub log_wall_time: bool,
}

impl TrainConfig {
    pub fn from_toml(s: &str) -> Result<Self> {
        let c: TrainConfig = toml::from_str(s).map_err(|e| Error::Parse(e.to_string()))?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&s)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Parse(e.to_string()))
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn digest(&self) -> Result<String> {
        Ok(sha256_hex(self.to_toml()?.as_bytes()))
    }

    pub fn total_steps(&self) -> u64 {
        self.total_samples.div_ceil(self.batch_size.max(1) as u64)
    }

    pub fn image_arch(&self) -> Result<Arch> {
        self.image.resolve()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.batch_size == 0 {
            return bad("batch_size must be positive".into());
        }
        if self.total_samples == 0 {
            return bad("total_samples must be positive".into());
        }
        if self.warmup_steps >= self.total_steps() {
            return bad(format!(
                "warmup_steps ({}) must be below the total step count ({})",
                self.warmup_steps,
                self.total_steps()
            ));
        }
        if !(self.lr >= 0.0) || !(self.weight_decay >= 0.0) || !(self.eps > 0.0) {
            return bad("lr and weight_decay must be non-negative, eps positive".into());
        }
        for (n, b) in [("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&b) {
                return bad(format!("{n} must lie in [0, 1), got {b}"));
            }
        }
        if !(0.0..1.0).contains(&self.drop_path) {
            return bad(format!("drop_path must lie in [0, 1), got {}", self.drop_path));
        }
        let image = self.image_arch()?;
        if !image.is_image() {
            return bad("the image tower must be a vitamin or vit arch".into());
        }
        self.text.validate()?;
        if image.embed_dim() != self.text.embed_dim {
            return bad(format!(
                "embed_dim mismatch: image tower {} vs text tower {}",
                image.embed_dim(),
                self.text.embed_dim
            ));
        }
        if self.image_size % image.input_multiple() != 0 {
            return bad(format!(
                "image_size {} is not divisible by {}",
                self.image_size,
                image.input_multiple()
            ));
        }
        if !(2..=8).contains(&self.data.n_values) {
            return bad(format!("data.n_values must be in 2..=8, got {}", self.data.n_values));
        }
        if self.data.context != self.text.context {
            return bad(format!(
                "data.context {} differs from text.context {}",
                self.data.context, self.text.context
            ));
        }
        if self.data.context < 4 || self.text.vocab < 3 * self.data.n_values + 2 {
            return bad("text tower too small for the synthetic captions (context >= 4, vocab >= 3n+2)".into());
        }
        if self.ltt.enabled && self.ltt.text_checkpoint.is_none() {
            return bad("ltt.enabled needs ltt.text_checkpoint".into());
        }
        if self.eval.templates == 0 || self.eval.templates > 2 {
            return bad("eval.templates must be 1 or 2".into());
        }
        Ok(())
    }
}
