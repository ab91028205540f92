use serde::{Deserialize, Serialize};

use super::network::{argmax, log_softmax, softmax_rows, Classifier};
use crate::diffusion::{guided_sample, GuidanceSpec, NoiseSchedule, ScoreModel, TrainConfig};
use crate::diffusion::train::epoch_batches;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{accumulate_gradients, AdamW, ForwardCache, MlpParams, Tensor};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TeacherReport {
    /// Mean minibatch cross-entropy per epoch.
    pub loss_history: Vec<f64>,
    /// Full-batch cross-entropy after training.
    pub final_loss: f64,
    pub train_accuracy: f64,
}

/// Mean cross-entropy of `net` on `(x, labels)` and its parameter gradient.
pub fn cross_entropy(
    net: &MlpParams,
    x: &Tensor,
    labels: &[usize],
    exec: Exec,
) -> Result<(f64, Vec<f64>, Vec<ForwardCache>)> {
    let n = x.rows();
    if n == 0 || labels.len() != n {
        return Err(Error::shape("cross-entropy labels", n, labels.len()));
    }
    let c = net.output_dim();
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {c} classes"
        )));
    }
    let inv_n = 1.0 / n as f64;
    accumulate_gradients(net, x, None, exec, |rows, logits| {
        let mut loss = 0.0;
        let mut up = Vec::with_capacity(logits.len());
        for (i, row) in logits.iter_rows().enumerate() {
            let ls = log_softmax(row);
            let y = labels[rows.start + i];
            loss -= ls[y];
            for (k, l) in ls.iter().enumerate() {
                let target = if k == y { 1.0 } else { 0.0 };
                up.push((l.exp() - target) * inv_n);
            }
        }
        Ok((loss * inv_n, Tensor::new(logits.shape().to_vec(), up)?))
    })
}

/// Fit a time-independent classifier with minibatch cross-entropy.
pub fn train_teacher(
    net: MlpParams,
    data: &Tensor,
    labels: &[usize],
    cfg: &TrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<(Classifier, TeacherReport)> {
    if net.is_time_conditioned() {
        return Err(Error::InvalidArgument("teacher must be time-independent".into()));
    }
    if data.rows() != labels.len() {
        return Err(Error::shape("teacher labels", data.rows(), labels.len()));
    }
    let mut present = vec![false; net.output_dim()];
    for &l in labels {
        if l < present.len() {
            present[l] = true;
        }
    }
    if let Some(c) = present.iter().position(|p| !p) {
        return Err(Error::InvalidArgument(format!("class {c} has no training samples")));
    }
    let mut net = net;
    let mut rng = rng::seeded(seed);
    let mut opt = AdamW::new(cfg.optimizer, net.num_params());
    let per_epoch = data.rows().div_ceil(cfg.batch_size.max(1));
    let total = cfg.epochs * per_epoch;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let batches = epoch_batches(data.rows(), cfg.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        for idx in &batches {
            let x = data.select_rows(idx);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let (loss, grad, caches) = cross_entropy(&net, &x, &y, exec)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            opt.set_lr(cfg.lr_at(step, total));
            opt.step(net.params_mut(), &grad)?;
            for c in &caches {
                net.update_norm_stats(c, cfg.norm_momentum);
            }
            epoch_loss += loss;
            step += 1;
        }
        history.push(epoch_loss / batches.len() as f64);
    }
    let (final_loss, _, _) = cross_entropy(&net, data, labels, exec)?;
    let classifier = Classifier::new(net)?;
    let train_accuracy = accuracy(&classifier.predict(data, None)?, labels);
    Ok((
        classifier,
        TeacherReport {
            loss_history: history,
            final_loss,
            train_accuracy,
        },
    ))
}

pub fn accuracy(pred: &[usize], labels: &[usize]) -> f64 {
    if pred.is_empty() {
        return 0.0;
    }
    pred.iter().zip(labels).filter(|(a, b)| a == b).count() as f64 / pred.len() as f64
}

/// Synthetic samples with the teacher's full predictive distribution.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoDataset {
    pub samples: Tensor,
    pub soft_labels: Tensor,
}

impl PseudoDataset {
    pub fn new(samples: Tensor, soft_labels: Tensor) -> Result<Self> {
        if samples.rows() != soft_labels.rows() {
            return Err(Error::shape("soft labels", samples.rows(), soft_labels.rows()));
        }
        for (i, row) in soft_labels.iter_rows().enumerate() {
            let s: f64 = row.iter().sum();
            if row.iter().any(|p| !(0.0..=1.0).contains(p)) || (s - 1.0).abs() > 1e-6 {
                return Err(Error::InvalidArgument(format!(
                    "soft label {i} is not a probability vector"
                )));
            }
        }
        Ok(Self {
            samples,
            soft_labels,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fraction of samples whose soft-label argmax is each class.
    pub fn argmax_histogram(&self) -> Vec<f64> {
        let c = self.soft_labels.cols();
        let mut h = vec![0.0; c];
        for row in self.soft_labels.iter_rows() {
            h[argmax(row)] += 1.0;
        }
        h.iter().map(|v| v / self.len().max(1) as f64).collect()
    }

    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            samples: self.samples.select_rows(idx),
            soft_labels: self.soft_labels.select_rows(idx),
        }
    }
}

/// Label already-generated samples with the teacher's softmax.
pub fn label_samples(teacher: &Classifier, samples: Tensor) -> Result<PseudoDataset> {
    let soft = softmax_rows(&teacher.logits(&samples, None)?);
    PseudoDataset::new(samples, soft)
}

/// Draw `n` unguided samples from `model` and label them with `teacher`.
#[allow(clippy::too_many_arguments)]
pub fn generate_pseudo_dataset(
    model: &ScoreModel,
    sched: &NoiseSchedule,
    sampler: &GuidanceSpec,
    teacher: &Classifier,
    n: usize,
    seed: u64,
    exec: Exec,
) -> Result<PseudoDataset> {
    if n == 0 {
        return Err(Error::InvalidArgument("pseudo dataset needs n >= 1".into()));
    }
    let batch = guided_sample(model, sched, &sampler.with_lambda(0.0), None, n, seed, exec)?;
    label_samples(teacher, batch.samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, AdamWConfig, MlpConfig};
    use rand::seq::SliceRandom;

    fn mlp(d: usize, c: usize, hidden: usize) -> MlpConfig {
        MlpConfig {
            input_dim: d,
            hidden_dim: hidden,
            output_dim: c,
            blocks: usize::from(hidden > 0),
            activation: Activation::Silu,
            time_embed_dim: 0,
            time_input: false,
            time_modules: false,
        }
    }

    fn cfg(epochs: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            epochs,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr,
                ..Default::default()
            },
            norm_momentum: 0.0,
            final_lr_fraction: 1.0,
        }
    }

    fn blobs(n: usize, seed: u64) -> (Tensor, Vec<usize>) {
        let mut r = rng::seeded(seed);
        let mut rows = Vec::new();
        let mut y = Vec::new();
        for i in 0..n {
            let c = i % 2;
            let sign = if c == 0 { -1.0 } else { 1.0 };
            let e = rng::normal_vec(&mut r, 2);
            rows.push(vec![sign * 3.0 + 0.5 * e[0], e[1]]);
            y.push(c);
        }
        (Tensor::from_rows(&rows).unwrap(), y)
    }

    #[test]
    fn separable_blobs_are_learned() {
        let (x, y) = blobs(64, 1);
        // oracle: the separating hyperplane x_0 = 0 classifies every point
        assert!(x.iter_rows().zip(&y).all(|(r, &c)| usize::from(r[0] > 0.0) == c));
        let net = MlpParams::init(mlp(2, 2, 0), &mut rng::seeded(0)).unwrap();
        let (_, rep) = train_teacher(net, &x, &y, &cfg(60, 0.05), 3, Exec::Sequential).unwrap();
        assert!(rep.train_accuracy >= 0.99, "{}", rep.train_accuracy);
        assert!(rep.loss_history.last() < rep.loss_history.first());
    }

    #[test]
    fn one_sample_per_class_overfits() {
        let mut r = rng::seeded(5);
        let x = Tensor::new(vec![8, 6], rng::normal_vec(&mut r, 48)).unwrap();
        let y: Vec<usize> = (0..8).collect();
        let net = MlpParams::init(mlp(6, 8, 32), &mut r).unwrap();
        let (_, rep) = train_teacher(net, &x, &y, &cfg(400, 0.01), 3, Exec::Sequential).unwrap();
        assert!(rep.final_loss < 0.1, "{}", rep.final_loss);
        assert_eq!(rep.train_accuracy, 1.0);
    }

    #[test]
    fn loss_is_permutation_invariant() {
        let (x, y) = blobs(40, 2);
        let net = MlpParams::init(mlp(2, 2, 8), &mut rng::seeded(1)).unwrap();
        let mut perm: Vec<usize> = (0..40).collect();
        perm.shuffle(&mut rng::seeded(9));
        let xp = x.select_rows(&perm);
        let yp: Vec<usize> = perm.iter().map(|&i| y[i]).collect();
        let a = cross_entropy(&net, &x, &y, Exec::Sequential).unwrap().0;
        let b = cross_entropy(&net, &xp, &yp, Exec::Sequential).unwrap().0;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn missing_class_rejected() {
        let (x, _) = blobs(4, 0);
        let net = MlpParams::init(mlp(2, 3, 0), &mut rng::seeded(1)).unwrap();
        assert!(train_teacher(net, &x, &[0, 1, 0, 1], &cfg(1, 0.1), 0, Exec::Sequential).is_err());
    }

    #[test]
    fn uniform_teacher_gives_uniform_soft_labels() {
        let net = MlpParams::zeroed(mlp(3, 4, 0)).unwrap();
        let teacher = Classifier::new(net).unwrap();
        let x = Tensor::new(vec![1, 3], vec![0.3, -1.0, 2.0]).unwrap();
        let p = label_samples(&teacher, x).unwrap();
        assert_eq!(p.len(), 1);
        assert!(p.soft_labels.data().iter().all(|v| (v - 0.25).abs() < 1e-15));
    }

    #[test]
    fn rejects_invalid_soft_labels() {
        let x = Tensor::zeros(vec![1, 2]);
        assert!(PseudoDataset::new(x.clone(), Tensor::row(&[0.6, 0.6])).is_err());
        assert!(PseudoDataset::new(x, Tensor::row(&[0.25, 0.75])).is_ok());
    }
}
