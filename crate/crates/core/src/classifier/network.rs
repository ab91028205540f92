use crate::diffusion::GuidanceClassifier;
use crate::error::{Error, Result};
use crate::nn::{MlpParams, Tensor};

/// Softmax classifier over an MLP's logits. Time-conditioned networks use
/// the timestep; time-independent ones ignore it, which is how a plain
/// teacher is plugged into guidance for the time-independent baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    pub net: MlpParams,
}

impl Classifier {
    pub fn new(net: MlpParams) -> Result<Self> {
        if net.output_dim() < 2 {
            return Err(Error::InvalidArgument(
                "a classifier needs at least two classes".into(),
            ));
        }
        Ok(Self { net })
    }

    pub fn is_time_dependent(&self) -> bool {
        self.net.is_time_conditioned()
    }

    fn times<'a>(&self, t: Option<&'a [f64]>) -> Result<Option<&'a [f64]>> {
        if self.is_time_dependent() && t.is_none() {
            return Err(Error::InvalidArgument(
                "time-dependent classifier needs timesteps".into(),
            ));
        }
        Ok(if self.is_time_dependent() { t } else { None })
    }

    pub fn logits(&self, x: &Tensor, t: Option<&[f64]>) -> Result<Tensor> {
        self.net.forward(x, self.times(t)?)
    }

    /// Row-wise softmax probabilities.
    pub fn predict_proba(&self, x: &Tensor, t: Option<&[f64]>) -> Result<Tensor> {
        let logits = self.logits(x, t)?;
        Ok(softmax_rows(&logits))
    }

    pub fn predict(&self, x: &Tensor, t: Option<&[f64]>) -> Result<Vec<usize>> {
        Ok(self
            .predict_proba(x, t)?
            .iter_rows()
            .map(argmax)
            .collect())
    }
}

impl GuidanceClassifier for Classifier {
    fn num_classes(&self) -> usize {
        self.net.output_dim()
    }

    fn input_dim(&self) -> usize {
        self.net.input_dim()
    }

    fn probabilities(&self, x: &Tensor, t: &[f64]) -> Result<Tensor> {
        self.predict_proba(x, Some(t))
    }

    fn log_prob_grad(&self, x: &Tensor, t: &[f64], classes: &[usize]) -> Result<Tensor> {
        let c = self.num_classes();
        if classes.len() != x.rows() {
            return Err(Error::shape("guidance classes", x.rows(), classes.len()));
        }
        if let Some(&bad) = classes.iter().find(|&&k| k >= c) {
            return Err(Error::InvalidArgument(format!(
                "class {bad} out of range for {c} classes"
            )));
        }
        let (logits, cache) = self.net.forward_cached(x, self.times(Some(t))?)?;
        let p = softmax_rows(&logits);
        // d log p_c / d logits = onehot(c) - p
        let mut up = p.data().iter().map(|v| -v).collect::<Vec<_>>();
        for (i, &k) in classes.iter().enumerate() {
            up[i * c + k] += 1.0;
        }
        let up = Tensor::new(vec![x.rows(), c], up)?;
        let mut scratch = vec![0.0; self.net.num_params()];
        self.net.backward_into(&cache, &up, &mut scratch)
    }
}

pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = Vec::with_capacity(logits.len());
    for r in logits.iter_rows() {
        out.extend(log_softmax(r).into_iter().map(f64::exp));
    }
    Tensor::new(logits.shape().to_vec(), out).expect("same shape")
}

/// `KL(p || q)` for probability vectors, with `0 log 0 = 0`.
pub fn kl_divergence(p: &[f64], log_q: &[f64]) -> f64 {
    p.iter()
        .zip(log_q)
        .filter(|(&pi, _)| pi > 0.0)
        .map(|(&pi, &lq)| pi * (pi.ln() - lq))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{Activation, MlpConfig};
    use crate::rng;
    use rand::Rng;

    #[test]
    fn probabilities_normalise() {
        let cfg = MlpConfig {
            input_dim: 4,
            hidden_dim: 8,
            output_dim: 5,
            blocks: 2,
            activation: Activation::Silu,
            time_embed_dim: 0,
            time_input: false,
            time_modules: false,
        };
        let mut r = rng::seeded(2);
        let c = Classifier::new(MlpParams::init(cfg, &mut r).unwrap()).unwrap();
        let x = Tensor::new(vec![10, 4], rng::normal_vec(&mut r, 40)).unwrap();
        let p = c.predict_proba(&x, None).unwrap();
        for row in p.iter_rows() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn constant_logits_give_zero_gradient() {
        // zero input weights: logits equal the bias for every x
        let mut net = MlpParams::zeroed(MlpConfig::linear(3, 2)).unwrap();
        net.params_mut()[6] = 0.7;
        let c = Classifier::new(net).unwrap();
        let g = crate::diffusion::classifier_score(&c, &[0.1, -2.0, 3.0], 5, 1).unwrap();
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn log_prob_gradient_matches_finite_differences() {
        let cfg = MlpConfig {
            input_dim: 3,
            hidden_dim: 6,
            output_dim: 4,
            blocks: 2,
            activation: Activation::Silu,
            time_embed_dim: 8,
            time_input: false,
            time_modules: true,
        };
        let mut r = rng::seeded(6);
        let mut net = MlpParams::init(cfg, &mut r).unwrap();
        for p in net.params_mut() {
            *p += r.random_range(-0.3..0.3);
        }
        let c = Classifier::new(net).unwrap();
        let x = [0.4, -0.3, 0.9];
        for (t, class) in [(1usize, 0usize), (20, 3), (77, 2)] {
            let g = crate::diffusion::classifier_score(&c, &x, t, class).unwrap();
            for j in 0..3 {
                let h = 1e-5;
                let f = |v: f64| {
                    let mut xs = x;
                    xs[j] = v;
                    let l = c.logits(&Tensor::row(&xs), Some(&[t as f64])).unwrap();
                    log_softmax(l.data())[class]
                };
                let fd = (f(x[j] + h) - f(x[j] - h)) / (2.0 * h);
                let scale = fd.abs().max(g[j].abs()).max(1e-3);
                assert!((fd - g[j]).abs() / scale < 1e-4, "{fd} vs {}", g[j]);
            }
        }
    }

    #[test]
    fn kl_is_asymmetric_and_ordered() {
        let p = [0.7, 0.2, 0.1];
        let q = [0.1, 0.1, 0.8];
        let lq: Vec<f64> = q.iter().map(|v: &f64| v.ln()).collect();
        let lp: Vec<f64> = p.iter().map(|v: &f64| v.ln()).collect();
        let forward = kl_divergence(&p, &lq);
        let reverse = kl_divergence(&q, &lp);
        let by_hand: f64 = p.iter().zip(&q).map(|(a, b)| a * (a / b).ln()).sum();
        assert!((forward - by_hand).abs() < 1e-15);
        assert!((forward - reverse).abs() > 0.1);
        assert_eq!(kl_divergence(&[1.0, 0.0], &[0.0, f64::NEG_INFINITY]), 0.0);
    }
}
