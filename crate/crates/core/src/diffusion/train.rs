use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::schedule::{noise_with, NoiseSchedule};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::{accumulate_gradients, AdamW, AdamWConfig, MlpParams, Tensor};
use crate::rng::{self, Rng};

/// Noise-prediction network `eps(x_t, t)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreModel {
    pub net: MlpParams,
}

impl ScoreModel {
    pub fn new(net: MlpParams) -> Result<Self> {
        if net.input_dim() != net.output_dim() {
            return Err(Error::shape(
                "score network output",
                net.input_dim(),
                net.output_dim(),
            ));
        }
        if !net.is_time_conditioned() {
            return Err(Error::InvalidArgument(
                "score network must be time-conditioned".into(),
            ));
        }
        Ok(Self { net })
    }

    pub fn dim(&self) -> usize {
        self.net.input_dim()
    }

    pub fn predict_noise(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.net.forward(x, Some(t))
    }
}

/// Loss and parameter gradient for one denoising minibatch.
#[derive(Debug, Clone)]
pub struct DenoisingLoss {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Mean over the batch of `||eps_hat(x_t, t) - eps||^2` for the given
/// timesteps and noise draws.
pub fn denoising_loss_with(
    net: &MlpParams,
    batch: &Tensor,
    sched: &NoiseSchedule,
    timesteps: &[usize],
    noise: &Tensor,
    exec: Exec,
) -> Result<(DenoisingLoss, Vec<crate::nn::ForwardCache>)> {
    let n = batch.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("empty denoising batch".into()));
    }
    if timesteps.len() != n || noise.shape() != batch.shape() {
        return Err(Error::shape(
            "denoising loss inputs",
            format!("{n} timesteps and noise {:?}", batch.shape()),
            format!("{} timesteps and noise {:?}", timesteps.len(), noise.shape()),
        ));
    }
    let d = batch.cols();
    let mut xt = Vec::with_capacity(n * d);
    for (i, &t) in timesteps.iter().enumerate() {
        sched.check_timestep(t)?;
        xt.extend(noise_with(
            sched.alpha_bar(t),
            batch.row_slice(i),
            noise.row_slice(i),
        ));
    }
    let xt = Tensor::new(batch.shape().to_vec(), xt)?;
    let tf: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
    let inv_n = 1.0 / n as f64;
    let (loss, grad, caches) = accumulate_gradients(net, &xt, Some(&tf), exec, |rows, pred| {
        let target = &noise.data()[rows.start * d..rows.end * d];
        let mut up = Vec::with_capacity(pred.len());
        let mut loss = 0.0;
        for (p, e) in pred.data().iter().zip(target) {
            let r = p - e;
            loss += r * r;
            up.push(2.0 * r * inv_n);
        }
        Ok((loss * inv_n, Tensor::new(pred.shape().to_vec(), up)?))
    })?;
    if !loss.is_finite() {
        return Err(Error::NonFinite("denoising loss".into()));
    }
    Ok((DenoisingLoss { loss, grad }, caches))
}

/// Denoising loss with timesteps drawn uniformly from `1..=T` and fresh
/// standard-normal noise.
pub fn denoising_loss(
    net: &MlpParams,
    batch: &Tensor,
    sched: &NoiseSchedule,
    rng: &mut Rng,
    exec: Exec,
) -> Result<DenoisingLoss> {
    let (ts, noise) = draw_noise(batch, sched, rng);
    denoising_loss_with(net, batch, sched, &ts, &noise, exec).map(|(l, _)| l)
}

fn draw_noise(batch: &Tensor, sched: &NoiseSchedule, rng: &mut Rng) -> (Vec<usize>, Tensor) {
    let n = batch.rows();
    let ts: Vec<usize> = (0..n).map(|_| rng.random_range(1..=sched.steps())).collect();
    let noise = Tensor::new(batch.shape().to_vec(), rng::normal_vec(rng, batch.len()))
        .expect("matching shape");
    (ts, noise)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: AdamWConfig,
    /// EMA momentum for normalization statistics (0 keeps them frozen).
    #[serde(default)]
    pub norm_momentum: f64,
    /// Cosine decay of the learning rate to this fraction of its start.
    #[serde(default = "one")]
    pub final_lr_fraction: f64,
}

fn one() -> f64 {
    1.0
}

impl TrainConfig {
    pub(crate) fn lr_at(&self, step: usize, total: usize) -> f64 {
        let base = self.optimizer.lr;
        if total <= 1 || self.final_lr_fraction >= 1.0 {
            return base;
        }
        let progress = step as f64 / (total - 1) as f64;
        let cos = 0.5 * (1.0 + (std::f64::consts::PI * progress).cos());
        base * (self.final_lr_fraction + (1.0 - self.final_lr_fraction) * cos)
    }
}

/// Shuffled minibatch index lists for one epoch.
pub(crate) fn epoch_batches(n: usize, batch_size: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    idx.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Train a score network on `data`. Returns the mean loss of every epoch.
pub fn train_score_net(
    net: &mut MlpParams,
    data: &Tensor,
    sched: &NoiseSchedule,
    cfg: &TrainConfig,
    seed: u64,
    exec: Exec,
) -> Result<Vec<f64>> {
    if data.rows() == 0 {
        return Err(Error::InvalidArgument("empty training set".into()));
    }
    let mut rng = rng::seeded(seed);
    let mut opt = AdamW::new(cfg.optimizer, net.num_params());
    let per_epoch = data.rows().div_ceil(cfg.batch_size.max(1));
    let total = cfg.epochs * per_epoch;
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for _ in 0..cfg.epochs {
        let mut epoch_loss = 0.0;
        let batches = epoch_batches(data.rows(), cfg.batch_size, &mut rng);
        for idx in &batches {
            let batch = data.select_rows(idx);
            let (ts, noise) = draw_noise(&batch, sched, &mut rng);
            let (l, caches) = denoising_loss_with(net, &batch, sched, &ts, &noise, exec)
                .map_err(|e| match e {
                    Error::NonFinite(_) => Error::Diverged {
                        step,
                        loss: f64::NAN,
                    },
                    other => other,
                })?;
            opt.set_lr(cfg.lr_at(step, total));
            opt.step(net.params_mut(), &l.grad)?;
            for c in &caches {
                net.update_norm_stats(c, cfg.norm_momentum);
            }
            epoch_loss += l.loss;
            step += 1;
        }
        history.push(epoch_loss / batches.len() as f64);
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffusion::schedule::ScheduleKind;
    use crate::nn::{Activation, MlpConfig};

    fn score_cfg(d: usize) -> MlpConfig {
        MlpConfig {
            input_dim: d,
            hidden_dim: 16,
            output_dim: d,
            blocks: 1,
            activation: Activation::Silu,
            time_embed_dim: 8,
            time_input: true,
            time_modules: true,
        }
    }

    fn sched() -> NoiseSchedule {
        NoiseSchedule::new(50, ScheduleKind::Linear, (1e-3, 0.2)).unwrap()
    }

    #[test]
    fn zero_model_loss_is_dimension() {
        let d = 4;
        let net = MlpParams::zeroed(score_cfg(d)).unwrap();
        let mut r = rng::seeded(1);
        let data = Tensor::new(vec![4000, d], rng::normal_vec(&mut r, 4000 * d)).unwrap();
        let l = denoising_loss(&net, &data, &sched(), &mut r, Exec::Sequential).unwrap();
        // E||eps||^2 = d; standard error ~ sqrt(2d / n)
        assert!((l.loss - d as f64).abs() < 0.15, "{}", l.loss);
        assert!(l.grad.iter().any(|g| *g != 0.0));
    }

    #[test]
    fn perfect_noise_prediction_has_zero_loss() {
        // x0 = 0 and T = 1 with abar = 1 - beta: x_t = sqrt(beta) eps, so a
        // linear net with W = I / sqrt(beta) predicts eps exactly.
        let beta: f64 = 0.25;
        let sched = NoiseSchedule::new(1, ScheduleKind::Linear, (beta, beta)).unwrap();
        let mut cfg = MlpConfig::linear(2, 2);
        cfg.time_embed_dim = 0;
        let mut net = MlpParams::zeroed(cfg).unwrap();
        net.params_mut()[0] = 1.0 / beta.sqrt();
        net.params_mut()[3] = 1.0 / beta.sqrt();
        let batch = Tensor::zeros(vec![3, 2]);
        let noise = Tensor::new(vec![3, 2], vec![0.5, -1.0, 2.0, 0.1, -0.3, 0.9]).unwrap();
        let (l, _) =
            denoising_loss_with(&net, &batch, &sched, &[1, 1, 1], &noise, Exec::Sequential)
                .unwrap();
        assert!(l.loss.abs() < 1e-24, "{}", l.loss);
        assert!(l.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn loss_gradient_matches_finite_differences() {
        let d = 3;
        let mut r = rng::seeded(4);
        let mut net = MlpParams::init(score_cfg(d), &mut r).unwrap();
        for p in net.params_mut() {
            *p += r.random_range(-0.2..0.2);
        }
        let batch = Tensor::new(vec![5, d], rng::normal_vec(&mut r, 5 * d)).unwrap();
        let noise = Tensor::new(vec![5, d], rng::normal_vec(&mut r, 5 * d)).unwrap();
        let ts = [1, 7, 20, 33, 50];
        let s = sched();
        let (l, _) = denoising_loss_with(&net, &batch, &s, &ts, &noise, Exec::Sequential).unwrap();
        let h = 1e-5;
        let mut probe = net.clone();
        for i in (0..net.num_params()).step_by(7) {
            let orig = probe.params()[i];
            probe.params_mut()[i] = orig + h;
            let up = denoising_loss_with(&probe, &batch, &s, &ts, &noise, Exec::Sequential)
                .unwrap()
                .0
                .loss;
            probe.params_mut()[i] = orig - h;
            let down = denoising_loss_with(&probe, &batch, &s, &ts, &noise, Exec::Sequential)
                .unwrap()
                .0
                .loss;
            probe.params_mut()[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let scale = fd.abs().max(l.grad[i].abs()).max(1e-3);
            assert!((fd - l.grad[i]).abs() / scale < 1e-4, "param {i}: {fd} vs {}", l.grad[i]);
        }
    }

    #[test]
    fn empty_batch_rejected() {
        let net = MlpParams::zeroed(score_cfg(2)).unwrap();
        let mut r = rng::seeded(0);
        assert!(denoising_loss(&net, &Tensor::zeros(vec![0, 2]), &sched(), &mut r, Exec::Sequential).is_err());
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let d = 2;
        let mut r = rng::seeded(8);
        let data = Tensor::new(vec![32, d], rng::normal_vec(&mut r, 64)).unwrap();
        let cfg = TrainConfig {
            epochs: 40,
            batch_size: 16,
            optimizer: AdamWConfig {
                lr: 3e-3,
                ..Default::default()
            },
            norm_momentum: 0.01,
            final_lr_fraction: 0.1,
        };
        let run = |exec| {
            let mut net = MlpParams::init(score_cfg(d), &mut rng::seeded(2)).unwrap();
            let hist = train_score_net(&mut net, &data, &sched(), &cfg, 5, exec).unwrap();
            (net, hist)
        };
        let (a, ha) = run(Exec::Sequential);
        let (b, _) = run(Exec::Parallel);
        assert_eq!(a.params(), b.params());
        let head: f64 = ha[..5].iter().sum::<f64>() / 5.0;
        let tail: f64 = ha[35..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
    }
}
