use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::classifier::{DistillConfig, LabelSource};
use crate::container::sha256_hex;
use crate::diffusion::{SamplerKind, ScheduleKind, TrainConfig};
use crate::error::{Error, Result};
use crate::metrics::{Scorer, Tier};
use crate::nn::Activation;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetKind {
    GaussianMixture,
    TinyImageGrid,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetSpec {
    pub kind: DatasetKind,
    pub n: usize,
    /// Vector width; a perfect square for `tiny_image_grid`.
    pub dim: usize,
    pub classes: usize,
    pub seed: u64,
    /// Per-sample noise scale relative to the class structure.
    #[serde(default = "default_noise")]
    pub noise: f64,
    /// Weight of the shared class prototype in each image (`tiny_image_grid`).
    #[serde(default = "default_prototype_weight")]
    pub prototype_weight: f64,
}

fn default_noise() -> f64 {
    0.3
}

fn default_prototype_weight() -> f64 {
    0.5
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetSpec {
    pub hidden: usize,
    pub blocks: usize,
    #[serde(default = "silu")]
    pub activation: Activation,
    /// Sinusoidal embedding width for time-conditioned networks.
    #[serde(default = "default_embed")]
    pub time_embed_dim: usize,
}

fn silu() -> Activation {
    Activation::Silu
}

fn default_embed() -> usize {
    32
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DiffusionSpec {
    pub steps: usize,
    pub schedule: ScheduleKind,
    #[serde(default = "default_beta_min")]
    pub beta_min: f64,
    #[serde(default = "default_beta_max")]
    pub beta_max: f64,
    pub net: NetSpec,
    pub train: TrainConfig,
}

fn default_beta_min() -> f64 {
    1e-4
}

fn default_beta_max() -> f64 {
    0.02
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSpec {
    pub steps: usize,
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub kind: SamplerKind,
    #[serde(default = "yes")]
    pub clip_denoised: bool,
}

fn yes() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TeacherSpec {
    pub net: NetSpec,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoSpec {
    /// Pseudo dataset size as a multiple of the training set size.
    #[serde(default = "default_synthetic_factor")]
    pub synthetic_factor: usize,
}

fn default_synthetic_factor() -> usize {
    4
}

impl Default for PseudoSpec {
    fn default() -> Self {
        Self {
            synthetic_factor: default_synthetic_factor(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExtractionSpec {
    /// Guidance scales to run; must contain 0.
    pub lambda_set: Vec<f64>,
    /// Generations per guidance scale, split evenly over target classes.
    pub n_generated: usize,
    /// Inclusive `[lo, hi]` window averaged for the headline comparison.
    #[serde(default)]
    pub average_window: Option<[f64; 2]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricSpec {
    #[serde(default = "default_thresholds")]
    pub tier_thresholds: Vec<f64>,
    #[serde(default)]
    pub scorer: Scorer,
}

fn default_thresholds() -> Vec<f64> {
    vec![0.4, 0.5, 0.6]
}

impl Default for MetricSpec {
    fn default() -> Self {
        Self {
            tier_thresholds: default_thresholds(),
            scorer: Scorer::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub schema: u32,
    /// Root seed; every stage derives its own generator from it.
    pub seed: u64,
    pub dataset: DatasetSpec,
    pub diffusion: DiffusionSpec,
    pub sampler: SamplerSpec,
    pub labels: LabelSource,
    pub teacher: TeacherSpec,
    #[serde(default)]
    pub pseudo: PseudoSpec,
    pub student: DistillConfig,
    pub extraction: ExtractionSpec,
    #[serde(default)]
    pub metrics: MetricSpec,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.schema != SCHEMA_VERSION {
            return bad(format!(
                "unsupported schema {} (expected {SCHEMA_VERSION})",
                self.schema
            ));
        }
        let d = &self.dataset;
        if d.n < 2 || d.dim == 0 || d.classes < 2 || d.classes > d.n {
            return bad(format!(
                "dataset needs n >= 2, dim >= 1 and 2 <= classes <= n (n={}, dim={}, classes={})",
                d.n, d.dim, d.classes
            ));
        }
        if d.kind == DatasetKind::TinyImageGrid && d.dim.isqrt().pow(2) != d.dim {
            return bad(format!("tiny_image_grid needs a square dim, got {}", d.dim));
        }
        if !(0.0..=1.0).contains(&d.prototype_weight) || d.noise < 0.0 {
            return bad("dataset noise must be >= 0 and prototype_weight in [0, 1]".into());
        }
        let e = &self.extraction;
        if e.lambda_set.is_empty() || !e.lambda_set.contains(&0.0) {
            return bad("extraction.lambda_set must include 0 (the unguided baseline)".into());
        }
        if e.lambda_set.iter().any(|l| !l.is_finite() || *l < 0.0) {
            return bad("guidance scales must be finite and non-negative".into());
        }
        if e.n_generated == 0 {
            return bad("extraction.n_generated must be positive".into());
        }
        if let Some([lo, hi]) = e.average_window {
            if lo > hi || !e.lambda_set.iter().any(|l| (lo..=hi).contains(l)) {
                return bad(format!("average window [{lo}, {hi}] selects no guidance scale"));
            }
        }
        if self.sampler.steps == 0 || self.sampler.steps > self.diffusion.steps {
            return bad(format!(
                "sampler.steps must be in [1, {}]",
                self.diffusion.steps
            ));
        }
        for (name, t) in [
            ("diffusion", &self.diffusion.train),
            ("teacher", &self.teacher.train),
            ("student", &self.student.train),
        ] {
            if t.epochs == 0 || t.batch_size == 0 || t.optimizer.lr.is_nan() || t.optimizer.lr <= 0.0 {
                return bad(format!("{name}.train needs positive epochs, batch_size and lr"));
            }
        }
        if self.pseudo.synthetic_factor == 0 {
            return bad("pseudo.synthetic_factor must be positive".into());
        }
        Tier::from_thresholds(&self.metrics.tier_thresholds)
            .map_err(|e| Error::Config(e.to_string()))?;
        if self.metrics.tier_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return bad("tier thresholds must be strictly increasing".into());
        }
        Ok(())
    }

    pub fn tiers(&self) -> Vec<Tier> {
        Tier::from_thresholds(&self.metrics.tier_thresholds).expect("validated thresholds")
    }

    /// Stable hash of the semantic content (key order independent).
    pub fn hash(&self) -> String {
        hash_value(self)
    }

    /// Guidance scales inside the averaging window, or all of them.
    pub fn window_lambdas(&self) -> Vec<f64> {
        match self.extraction.average_window {
            Some([lo, hi]) => self
                .extraction
                .lambda_set
                .iter()
                .copied()
                .filter(|l| (lo..=hi).contains(l) && *l > 0.0)
                .collect(),
            None => self
                .extraction
                .lambda_set
                .iter()
                .copied()
                .filter(|l| *l > 0.0)
                .collect(),
        }
    }
}

/// SHA-256 of the canonical JSON form. `serde_json::Value` keeps object
/// keys sorted, so permuted fields hash identically.
pub fn hash_value<T: Serialize>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("config serialises");
    sha256_hex(v.to_string().as_bytes())
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) const SMALL: &str = r#"
schema = 1
seed = 7

[dataset]
kind = "gaussian_mixture"
n = 16
dim = 4
classes = 2
seed = 3

[diffusion]
steps = 20
schedule = "linear"
beta_max = 0.2
net = { hidden = 16, blocks = 1, time_embed_dim = 8 }
train = { epochs = 5, batch_size = 8, optimizer = { lr = 1e-3 } }

[sampler]
steps = 10

[labels]
kind = "original"

[teacher]
net = { hidden = 8, blocks = 1 }
train = { epochs = 5, batch_size = 8, optimizer = { lr = 1e-2 } }

[student]
time_embed_dim = 8
train = { epochs = 3, batch_size = 8, optimizer = { lr = 1e-3 } }

[extraction]
lambda_set = [0.0, 2.0]
n_generated = 8
"#;

    #[test]
    fn parses_and_validates() {
        let c = ExperimentConfig::from_toml(SMALL).unwrap();
        assert_eq!(c.metrics.tier_thresholds, vec![0.4, 0.5, 0.6]);
        assert_eq!(c.pseudo.synthetic_factor, 4);
        let again = ExperimentConfig::from_toml(&c.to_toml().unwrap()).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn unknown_keys_fail() {
        let text = SMALL.replace("seed = 7", "seed = 7\nbogus = 1");
        assert!(matches!(ExperimentConfig::from_toml(&text), Err(Error::Config(_))));
    }

    #[test]
    fn lambda_set_must_include_zero() {
        let text = SMALL.replace("lambda_set = [0.0, 2.0]", "lambda_set = [1.0, 2.0]");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn hash_ignores_field_order() {
        let a = ExperimentConfig::from_toml(SMALL).unwrap();
        // move [sampler] above [dataset] and swap top-level keys
        let reordered = SMALL
            .replace("schema = 1\nseed = 7", "seed = 7\nschema = 1\n\n[sampler]\nsteps = 10")
            .replacen("[sampler]\nsteps = 10\n\n[labels]", "[labels]", 1);
        let b = ExperimentConfig::from_toml(&reordered).unwrap();
        assert_eq!(a.hash(), b.hash());
        let mut c = a.clone();
        c.seed = 8;
        assert_ne!(a.hash(), c.hash());
    }
}
