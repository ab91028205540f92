use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::network::{argmax, kl_divergence, log_softmax, Classifier};
use super::teacher::PseudoDataset;
use crate::diffusion::train::epoch_batches;
use crate::diffusion::{noise_with, NoiseSchedule, TrainConfig};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{accumulate_gradients, AdamW, ForwardCache, MlpParams, Tensor};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistillConfig {
    pub train: TrainConfig,
    /// Width of the sinusoidal embedding feeding the time modules.
    pub time_embed_dim: usize,
    /// Start from the teacher's weights instead of a fresh initialisation.
    #[serde(default = "yes")]
    pub init_from_teacher: bool,
    /// Fraction of the pseudo dataset held out for the t = 1 check.
    #[serde(default = "holdout")]
    pub holdout_fraction: f64,
    /// Held-out KL at t = 1 above which the run is flagged.
    #[serde(default = "threshold")]
    pub kl_threshold: f64,
}

fn yes() -> bool {
    true
}

fn holdout() -> f64 {
    0.1
}

fn threshold() -> f64 {
    0.05
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistillReport {
    /// Mean minibatch distillation loss per epoch.
    pub loss_history: Vec<f64>,
    /// Mean `KL(teacher || student)` on held-out samples at `t = 1`.
    pub holdout_kl_t1: f64,
    /// Top-1 agreement with the teacher on held-out samples at `t = 1`.
    pub holdout_agreement_t1: f64,
    pub within_threshold: bool,
}

/// Mean over rows of `KL(soft[i] || student(x_t[i], t[i]))` and its gradient.
pub fn distillation_loss_with(
    student: &MlpParams,
    x_t: &Tensor,
    t: &[f64],
    soft: &Tensor,
    exec: Exec,
) -> Result<(f64, Vec<f64>, Vec<ForwardCache>)> {
    let n = x_t.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty distillation batch".into()));
    }
    if soft.rows() != n || t.len() != n || soft.cols() != student.output_dim() {
        return Err(Error::shape(
            "distillation targets",
            format!("{n} rows of {} classes", student.output_dim()),
            format!("{} rows of {} classes, {} times", soft.rows(), soft.cols(), t.len()),
        ));
    }
    let inv_n = 1.0 / n as f64;
    accumulate_gradients(student, x_t, Some(t), exec, |rows, logits| {
        let mut loss = 0.0;
        let mut up = Vec::with_capacity(logits.len());
        for (i, row) in logits.iter_rows().enumerate() {
            let p = soft.row_slice(rows.start + i);
            let lq = log_softmax(row);
            loss += kl_divergence(p, &lq);
            // d KL(p || softmax(z)) / dz = q - p
            up.extend(lq.iter().zip(p).map(|(l, pi)| (l.exp() - pi) * inv_n));
        }
        Ok((loss * inv_n, Tensor::new(logits.shape().to_vec(), up)?))
    })
}

fn noised(
    samples: &Tensor,
    sched: &NoiseSchedule,
    ts: &[usize],
    rng: &mut rng::Rng,
) -> Result<Tensor> {
    let mut out = Vec::with_capacity(samples.len());
    for (i, &t) in ts.iter().enumerate() {
        let e = rng::normal_vec(rng, samples.cols());
        out.extend(noise_with(sched.alpha_bar(t), samples.row_slice(i), &e));
    }
    Tensor::new(samples.shape().to_vec(), out)
}

/// Held-out fidelity at a fixed timestep: mean KL and top-1 agreement.
pub fn fidelity_at(
    teacher_soft: &Tensor,
    student: &Classifier,
    samples: &Tensor,
    sched: &NoiseSchedule,
    t: usize,
    seed: u64,
) -> Result<(f64, f64)> {
    sched.check_timestep(t)?;
    let n = samples.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty held-out set".into()));
    }
    let mut r = rng::seeded(seed);
    let xt = noised(samples, sched, &vec![t; n], &mut r)?;
    let logits = student.logits(&xt, Some(&vec![t as f64; n]))?;
    let mut kl = 0.0;
    let mut agree = 0;
    for (p, z) in teacher_soft.iter_rows().zip(logits.iter_rows()) {
        kl += kl_divergence(p, &log_softmax(z));
        agree += usize::from(argmax(p) == argmax(z));
    }
    Ok((kl / n as f64, agree as f64 / n as f64))
}

/// Train a time-dependent student to reproduce the teacher's soft labels
/// from noised inputs. Timesteps are uniform over `1..=T` with a fresh
/// noise draw for every sample on every pass.
pub fn distill(
    teacher: &Classifier,
    pseudo: &PseudoDataset,
    sched: &NoiseSchedule,
    cfg: &DistillConfig,
    seed: u64,
    exec: Exec,
) -> Result<(Classifier, DistillReport)> {
    if pseudo.is_empty() {
        return Err(Error::InvalidArgument("empty pseudo dataset".into()));
    }
    if pseudo.soft_labels.cols() != teacher.net.output_dim() {
        return Err(Error::shape(
            "soft labels",
            teacher.net.output_dim(),
            pseudo.soft_labels.cols(),
        ));
    }
    let mut rng = rng::seeded(seed);
    let mut student = if cfg.init_from_teacher {
        MlpParams::insert_time_modules(&teacher.net, cfg.time_embed_dim)?
    } else {
        let c = teacher.net.config().with_time_modules(cfg.time_embed_dim);
        MlpParams::init(c, &mut rng)?
    };
    if !student.is_time_conditioned() {
        return Err(Error::InvalidArgument(
            "student needs at least one residual block to carry time modules".into(),
        ));
    }

    let n = pseudo.len();
    let held = if n > 1 {
        ((n as f64 * cfg.holdout_fraction).round() as usize).min(n - 1)
    } else {
        0
    };
    let train_idx: Vec<usize> = (held..n).collect();
    let train = pseudo.subset(&train_idx);
    let holdout = pseudo.subset(&(0..held).collect::<Vec<_>>());

    let mut opt = AdamW::new(cfg.train.optimizer, student.num_params());
    let per_epoch = train.len().div_ceil(cfg.train.batch_size.max(1));
    let total = cfg.train.epochs * per_epoch;
    let mut history = Vec::with_capacity(cfg.train.epochs);
    let mut step = 0;
    for _ in 0..cfg.train.epochs {
        let batches = epoch_batches(train.len(), cfg.train.batch_size, &mut rng);
        let mut epoch_loss = 0.0;
        for idx in &batches {
            let b = train.subset(idx);
            let ts: Vec<usize> = (0..idx.len())
                .map(|_| rng.random_range(1..=sched.steps()))
                .collect();
            let xt = noised(&b.samples, sched, &ts, &mut rng)?;
            let tf: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
            let (loss, grad, caches) =
                distillation_loss_with(&student, &xt, &tf, &b.soft_labels, exec)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { step, loss });
            }
            opt.set_lr(cfg.train.lr_at(step, total));
            opt.step(student.params_mut(), &grad)?;
            for c in &caches {
                student.update_norm_stats(c, cfg.train.norm_momentum);
            }
            epoch_loss += loss;
            step += 1;
        }
        history.push(epoch_loss / batches.len() as f64);
    }

    let student = Classifier::new(student)?;
    let eval = if holdout.is_empty() { &train } else { &holdout };
    let (kl, agree) = fidelity_at(
        &eval.soft_labels,
        &student,
        &eval.samples,
        sched,
        1,
        rng::derive_seed(seed, "holdout"),
    )?;
    Ok((
        student,
        DistillReport {
            loss_history: history,
            holdout_kl_t1: kl,
            holdout_agreement_t1: agree,
            within_threshold: kl <= cfg.kl_threshold,
        },
    ))
}
