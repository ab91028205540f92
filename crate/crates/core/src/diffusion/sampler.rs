//! Reverse-process samplers with optional classifier guidance.
//!
//! Guidance shifts the predicted noise before every update:
//!
//! ```text
//! eps' = eps(x_t, t) - lambda * sqrt(1 - abar_t) * grad_x log p_t(c | x_t)
//! ```
//!
//! which is the discrete counterpart of adding `lambda * grad log p(c|x)`
//! to the score. With `lambda = 0` the classifier is never evaluated, so the
//! guided and unguided paths are the same computation.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::schedule::NoiseSchedule;
use super::train::ScoreModel;
use crate::container;
use crate::error::{Error, Result};
use crate::exec::{chunk_ranges, Exec};
use crate::nn::Tensor;
use crate::rng::{self, Rng};

/// Chains advanced together as one network batch.
pub const CHAIN_CHUNK: usize = 64;

/// A classifier usable for guidance: returns log-probability gradients with
/// respect to its (noisy) input.
pub trait GuidanceClassifier: Sync {
    fn num_classes(&self) -> usize;
    fn input_dim(&self) -> usize;

    /// Class probabilities, one row per input row.
    fn probabilities(&self, x: &Tensor, t: &[f64]) -> Result<Tensor>;

    /// `grad_x log p_t(classes[i] | x_i)` for every row.
    fn log_prob_grad(&self, x: &Tensor, t: &[f64], classes: &[usize]) -> Result<Tensor>;
}

/// `grad_{x_t} log p_t(y = class | x_t)` for a single input.
pub fn classifier_score<C: GuidanceClassifier + ?Sized>(
    classifier: &C,
    x_t: &[f64],
    t: usize,
    class: usize,
) -> Result<Vec<f64>> {
    if class >= classifier.num_classes() {
        return Err(Error::InvalidArgument(format!(
            "class {class} out of range for {} classes",
            classifier.num_classes()
        )));
    }
    let g = classifier.log_prob_grad(&Tensor::row(x_t), &[t as f64], &[class])?;
    Ok(g.into_data())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Implicit sampler over a strided subsequence of timesteps.
    #[default]
    Implicit,
    /// Ancestral sampler over every timestep.
    Ancestral,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GuidanceSpec {
    pub target_label: usize,
    pub lambda: f64,
    pub steps: usize,
    /// 0 gives the deterministic implicit sampler, 1 matches ancestral noise.
    #[serde(default)]
    pub eta: f64,
    #[serde(default)]
    pub sampler: SamplerKind,
    /// Clamp the predicted clean sample to `[-1, 1]` at every step.
    #[serde(default = "default_clip")]
    pub clip_denoised: bool,
}

fn default_clip() -> bool {
    true
}

impl GuidanceSpec {
    pub fn unguided(steps: usize) -> Self {
        Self {
            target_label: 0,
            lambda: 0.0,
            steps,
            eta: 0.0,
            sampler: SamplerKind::Implicit,
            clip_denoised: true,
        }
    }

    pub fn with_lambda(&self, lambda: f64) -> Self {
        Self {
            lambda,
            ..self.clone()
        }
    }

    fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::InvalidArgument(format!(
                "guidance scale must be a finite non-negative number, got {}",
                self.lambda
            )));
        }
        if !(0.0..=1.0).contains(&self.eta) {
            return Err(Error::InvalidArgument(format!("eta {} outside [0, 1]", self.eta)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub seed: u64,
    pub lambda: f64,
    pub steps: usize,
    pub target_label: usize,
    #[serde(default)]
    pub model_checksum: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleBatch {
    pub meta: SampleMeta,
    pub samples: Tensor,
}

const SAMPLES_KIND: &str = "samples";

#[derive(Serialize, Deserialize)]
struct SampleHeader {
    #[serde(flatten)]
    meta: SampleMeta,
    shape: Vec<usize>,
}

impl SampleBatch {
    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.rows() == 0
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let header = SampleHeader {
            meta: self.meta.clone(),
            shape: self.samples.shape().to_vec(),
        };
        container::save(path, SAMPLES_KIND, &header, &[self.samples.data()])
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (header, mut arrays): (SampleHeader, _) = container::load(path, SAMPLES_KIND)?;
        let data = arrays.pop().unwrap_or_default();
        let samples = Tensor::new(header.shape, data).map_err(|e| Error::Corrupt {
            path: path.to_path_buf(),
            reason: e.to_string(),
        })?;
        Ok(Self {
            meta: header.meta,
            samples,
        })
    }
}

/// Draw `n` samples, guided towards `spec.target_label` when
/// `spec.lambda > 0`. Chain `i` uses RNG stream `(seed, i)`, so the output
/// does not depend on the execution policy.
pub fn guided_sample(
    model: &ScoreModel,
    sched: &NoiseSchedule,
    spec: &GuidanceSpec,
    classifier: Option<&dyn GuidanceClassifier>,
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<SampleBatch> {
    spec.validate()?;
    let guide = if spec.lambda > 0.0 {
        let c = classifier.ok_or_else(|| {
            Error::InvalidArgument("guidance scale > 0 requires a classifier".into())
        })?;
        if spec.target_label >= c.num_classes() {
            return Err(Error::InvalidArgument(format!(
                "target class {} out of range for {} classes",
                spec.target_label,
                c.num_classes()
            )));
        }
        if c.input_dim() != model.dim() {
            return Err(Error::shape("classifier input", model.dim(), c.input_dim()));
        }
        Some(c)
    } else {
        None
    };
    let timesteps = match spec.sampler {
        SamplerKind::Implicit => sched.sampling_timesteps(spec.steps)?,
        SamplerKind::Ancestral => (1..=sched.steps()).rev().collect(),
    };
    let ranges = chunk_ranges(n, CHAIN_CHUNK);
    let parts = exec.try_map(ranges.len(), |i| {
        run_chains(model, sched, spec, guide, &timesteps, ranges[i].clone(), seed)
    })?;
    let samples = if parts.is_empty() {
        Tensor::zeros(vec![0, model.dim()])
    } else {
        Tensor::vstack(&parts)?
    };
    Ok(SampleBatch {
        meta: SampleMeta {
            seed,
            lambda: spec.lambda,
            steps: timesteps.len(),
            target_label: spec.target_label,
            model_checksum: None,
        },
        samples,
    })
}

/// Unguided sampling; the reference path for the `lambda = 0` reduction.
pub fn sample_unguided(
    model: &ScoreModel,
    sched: &NoiseSchedule,
    spec: &GuidanceSpec,
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<SampleBatch> {
    guided_sample(model, sched, &spec.with_lambda(0.0), None, n, seed, exec)
}

fn run_chains(
    model: &ScoreModel,
    sched: &NoiseSchedule,
    spec: &GuidanceSpec,
    guide: Option<&dyn GuidanceClassifier>,
    timesteps: &[usize],
    chains: std::ops::Range<usize>,
    seed: u64,
) -> Result<Tensor> {
    let d = model.dim();
    let n = chains.len();
    let mut rngs: Vec<Rng> = chains.clone().map(|i| rng::stream(seed, i as u64)).collect();
    let mut x = Vec::with_capacity(n * d);
    for r in &mut rngs {
        x.extend(rng::normal_vec(r, d));
    }
    let mut x = Tensor::new(vec![n, d], x)?;
    let classes = vec![spec.target_label; n];
    for (k, &t) in timesteps.iter().enumerate() {
        let t_prev = match spec.sampler {
            SamplerKind::Implicit => timesteps.get(k + 1).copied().unwrap_or(0),
            SamplerKind::Ancestral => t - 1,
        };
        let tf = vec![t as f64; n];
        let ab = sched.alpha_bar(t);
        let ab_prev = sched.alpha_bar(t_prev);
        let mut eps = model.predict_noise(&x, &tf)?;
        if let Some(c) = guide {
            let g = c.log_prob_grad(&x, &tf, &classes)?;
            let scale = spec.lambda * (1.0 - ab).sqrt();
            for (e, gi) in eps.data_mut().iter_mut().zip(g.data()) {
                *e -= scale * gi;
            }
        }
        let sigma = match spec.sampler {
            SamplerKind::Implicit => {
                spec.eta * ((1.0 - ab_prev) / (1.0 - ab) * (1.0 - ab / ab_prev)).max(0.0).sqrt()
            }
            SamplerKind::Ancestral => ((1.0 - ab_prev) / (1.0 - ab) * sched.beta(t)).sqrt(),
        };
        let (sa, sb) = (ab.sqrt(), (1.0 - ab).sqrt());
        let dir = (1.0 - ab_prev - sigma * sigma).max(0.0).sqrt();
        for (i, r) in rngs.iter_mut().enumerate() {
            let noise = if sigma > 0.0 {
                rng::normal_vec(r, d)
            } else {
                Vec::new()
            };
            let xi = x.row_slice_mut(i);
            let ei = &eps.data()[i * d..(i + 1) * d];
            for j in 0..d {
                let mut x0 = (xi[j] - sb * ei[j]) / sa;
                let mut e = ei[j];
                if spec.clip_denoised && !(-1.0..=1.0).contains(&x0) {
                    x0 = x0.clamp(-1.0, 1.0);
                    e = (xi[j] - sa * x0) / sb;
                }
                let mut next = match spec.sampler {
                    SamplerKind::Implicit => ab_prev.sqrt() * x0 + dir * e,
                    SamplerKind::Ancestral => {
                        let beta = sched.beta(t);
                        let c0 = ab_prev.sqrt() * beta / (1.0 - ab);
                        let ct = (1.0 - beta).sqrt() * (1.0 - ab_prev) / (1.0 - ab);
                        c0 * x0 + ct * xi[j]
                    }
                };
                if sigma > 0.0 {
                    next += sigma * noise[j];
                }
                xi[j] = next;
            }
        }
        if !x.is_finite() {
            return Err(Error::SamplerDiverged { timestep: t });
        }
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::ScheduleKind;
    use crate::nn::{Activation, MlpConfig, MlpParams};

    fn model(seed: u64) -> ScoreModel {
        let cfg = MlpConfig {
            input_dim: 3,
            hidden_dim: 8,
            output_dim: 3,
            blocks: 1,
            activation: Activation::Silu,
            time_embed_dim: 8,
            time_input: true,
            time_modules: false,
        };
        ScoreModel::new(MlpParams::init(cfg, &mut rng::seeded(seed)).unwrap()).unwrap()
    }

    struct Linear2 {
        w: [[f64; 3]; 2],
    }

    impl GuidanceClassifier for Linear2 {
        fn num_classes(&self) -> usize {
            2
        }
        fn input_dim(&self) -> usize {
            3
        }
        fn probabilities(&self, x: &Tensor, _t: &[f64]) -> Result<Tensor> {
            let mut out = Vec::new();
            for r in x.iter_rows() {
                let l: Vec<f64> = self.w.iter().map(|w| w.iter().zip(r).map(|(a, b)| a * b).sum()).collect();
                let m = l[0].max(l[1]);
                let z = (l[0] - m).exp() + (l[1] - m).exp();
                out.extend(l.iter().map(|v| (v - m).exp() / z));
            }
            Tensor::new(vec![x.rows(), 2], out)
        }
        fn log_prob_grad(&self, x: &Tensor, t: &[f64], classes: &[usize]) -> Result<Tensor> {
            let p = self.probabilities(x, t)?;
            let mut out = Vec::new();
            for (i, &c) in classes.iter().enumerate() {
                for j in 0..3 {
                    let mut g = self.w[c][j];
                    for k in 0..2 {
                        g -= p.row_slice(i)[k] * self.w[k][j];
                    }
                    out.push(g);
                }
            }
            Tensor::new(vec![x.rows(), 3], out)
        }
    }

    #[test]
    fn zero_lambda_matches_unguided_exactly() {
        let m = model(1);
        let s = NoiseSchedule::new(100, ScheduleKind::Linear, (1e-4, 0.05)).unwrap();
        let spec = GuidanceSpec {
            eta: 0.5,
            ..GuidanceSpec::unguided(20)
        };
        let c = Linear2 {
            w: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]],
        };
        for seed in 0..3 {
            let a = sample_unguided(&m, &s, &spec, 70, seed, Exec::Sequential).unwrap();
            let b = guided_sample(&m, &s, &spec, Some(&c), 70, seed, Exec::Parallel).unwrap();
            assert_eq!(a.samples, b.samples);
        }
    }

    #[test]
    fn guidance_requires_classifier() {
        let m = model(1);
        let s = NoiseSchedule::new(10, ScheduleKind::Linear, (1e-4, 0.05)).unwrap();
        let spec = GuidanceSpec::unguided(5).with_lambda(1.0);
        assert!(guided_sample(&m, &s, &spec, None, 4, 0, Exec::Sequential).is_err());
        let c = Linear2 { w: [[0.0; 3]; 2] };
        let bad = GuidanceSpec {
            target_label: 2,
            ..spec.clone()
        };
        assert!(guided_sample(&m, &s, &bad, Some(&c), 4, 0, Exec::Sequential).is_err());
        assert!(guided_sample(&m, &s, &spec.with_lambda(-1.0), Some(&c), 4, 0, Exec::Sequential).is_err());
    }

    #[test]
    fn classifier_score_logistic_closed_form() {
        // two classes with logits w_c . x: grad log p(c|x) = (1 - p_c)(w_c - w_other)
        let c = Linear2 {
            w: [[0.5, -1.0, 2.0], [1.0, 0.3, -0.4]],
        };
        let x = [0.2, 0.7, -0.1];
        let g = classifier_score(&c, &x, 3, 0).unwrap();
        let l0: f64 = c.w[0].iter().zip(&x).map(|(a, b)| a * b).sum();
        let l1: f64 = c.w[1].iter().zip(&x).map(|(a, b)| a * b).sum();
        let p0 = 1.0 / (1.0 + (l1 - l0).exp());
        for (j, gj) in g.iter().enumerate() {
            let expected = (1.0 - p0) * (c.w[0][j] - c.w[1][j]);
            assert!((gj - expected).abs() < 1e-12);
        }
        assert!(classifier_score(&c, &x, 3, 2).is_err());
    }

    #[test]
    fn one_step_deterministic_update_by_hand() {
        // T = 1, eta = 0: x_0 = (x_1 - sqrt(1 - ab) eps) / sqrt(ab), using a
        // score net that is exactly linear: eps = W x (zero bias, no blocks).
        let cfg = MlpConfig {
            input_dim: 2,
            hidden_dim: 0,
            output_dim: 2,
            blocks: 0,
            activation: Activation::Silu,
            time_embed_dim: 0,
            time_input: false,
            time_modules: false,
        };
        let mut net = MlpParams::zeroed(cfg).unwrap();
        net.params_mut()[..4].copy_from_slice(&[0.3, 0.1, -0.2, 0.4]);
        let m = ScoreModel { net };
        let s = NoiseSchedule::new(1, ScheduleKind::Linear, (0.4, 0.4)).unwrap();
        let spec = GuidanceSpec {
            clip_denoised: false,
            ..GuidanceSpec::unguided(1)
        };
        let out = sample_unguided(&m, &s, &spec, 1, 42, Exec::Sequential).unwrap();
        let x1 = rng::normal_vec(&mut rng::stream(42, 0), 2);
        let ab: f64 = 0.6;
        let eps = [0.3 * x1[0] + 0.1 * x1[1], -0.2 * x1[0] + 0.4 * x1[1]];
        for j in 0..2 {
            let expected = (x1[j] - (1.0 - ab).sqrt() * eps[j]) / ab.sqrt();
            assert!((out.samples.data()[j] - expected).abs() < 1e-14);
        }

    }

    #[test]
    fn sample_batch_roundtrip() {
        let m = model(3);
        let s = NoiseSchedule::new(20, ScheduleKind::Cosine, (1e-4, 0.999)).unwrap();
        let mut b = sample_unguided(&m, &s, &GuidanceSpec::unguided(10), 5, 9, Exec::Sequential).unwrap();
        b.meta.model_checksum = Some("abc".into());
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.samples");
        b.save(&p).unwrap();
        assert_eq!(SampleBatch::load(&p).unwrap(), b);
        assert_eq!(b.len(), 5);
        assert_eq!(b.meta.steps, 10);
    }
}
