use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleKind {
    Linear,
    Cosine,
}

/// Discrete variance-preserving noise schedule over timesteps `1..=T`.
///
/// Index `t - 1` of `betas`/`alpha_bar` holds step `t`; `alpha_bar(0) = 1`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    kind: ScheduleKind,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    /// `beta_range` is `(beta_min, beta_max)` for the linear schedule; the
    /// cosine schedule ignores `beta_min` and clips each beta at `beta_max`.
    pub fn new(steps: usize, kind: ScheduleKind, beta_range: (f64, f64)) -> Result<Self> {
        let (lo, hi) = beta_range;
        if steps == 0 {
            return Err(Error::InvalidArgument("schedule needs T >= 1".into()));
        }
        if !(lo > 0.0 && lo <= hi && hi < 1.0) {
            return Err(Error::InvalidArgument(format!(
                "beta range must satisfy 0 < min <= max < 1, got ({lo}, {hi})"
            )));
        }
        let betas: Vec<f64> = match kind {
            ScheduleKind::Linear => (0..steps)
                .map(|i| {
                    if steps == 1 {
                        lo
                    } else {
                        lo + (hi - lo) * i as f64 / (steps - 1) as f64
                    }
                })
                .collect(),
            ScheduleKind::Cosine => {
                let s = 0.008;
                let f = |t: f64| {
                    let x = (t / steps as f64 + s) / (1.0 + s) * std::f64::consts::FRAC_PI_2;
                    x.cos().powi(2)
                };
                (1..=steps)
                    .map(|t| (1.0 - f(t as f64) / f(t as f64 - 1.0)).clamp(1e-8, hi))
                    .collect()
            }
        };
        let mut alpha_bar = Vec::with_capacity(steps);
        let mut prod = 1.0;
        for b in &betas {
            prod *= 1.0 - b;
            alpha_bar.push(prod);
        }
        Ok(Self {
            kind,
            betas,
            alpha_bar,
        })
    }

    pub fn kind(&self) -> ScheduleKind {
        self.kind
    }

    /// Number of diffusion steps `T`.
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bar
    }

    /// Cumulative signal fraction at step `t`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 {
            1.0
        } else {
            self.alpha_bar[t - 1]
        }
    }

    pub fn check_timestep(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps() {
            return Err(Error::InvalidArgument(format!(
                "timestep {t} outside [1, {}]",
                self.steps()
            )));
        }
        Ok(())
    }

    /// `x_t = sqrt(abar_t) x0 + sqrt(1 - abar_t) noise`.
    pub fn forward_noise(&self, x0: &[f64], t: usize, noise: &[f64]) -> Result<Vec<f64>> {
        self.check_timestep(t)?;
        if noise.len() != x0.len() {
            return Err(Error::shape("forward_noise noise", x0.len(), noise.len()));
        }
        Ok(noise_with(self.alpha_bar(t), x0, noise))
    }

    /// Evenly spaced descending timesteps for a `steps`-step sampler,
    /// always starting at `T`.
    pub fn sampling_timesteps(&self, steps: usize) -> Result<Vec<usize>> {
        let total = self.steps();
        if steps == 0 || steps > total {
            return Err(Error::InvalidArgument(format!(
                "sampler steps must be in [1, {total}], got {steps}"
            )));
        }
        let mut ts: Vec<usize> = (0..steps)
            .map(|i| total - (i * total) / steps)
            .collect();
        ts.dedup();
        Ok(ts)
    }
}

/// Closed-form forward noising at a given `alpha_bar`.
pub fn noise_with(alpha_bar: f64, x0: &[f64], noise: &[f64]) -> Vec<f64> {
    let a = alpha_bar.sqrt();
    let s = (1.0 - alpha_bar).max(0.0).sqrt();
    x0.iter().zip(noise).map(|(x, e)| a * x + s * e).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn single_step_linear() {
        let s = NoiseSchedule::new(1, ScheduleKind::Linear, (0.1, 0.1)).unwrap();
        assert_eq!(s.alpha_bars().len(), 1);
        assert!((s.alpha_bar(1) - 0.9).abs() < 1e-15);
    }

    #[test]
    fn standard_linear_schedule_destroys_signal() {
        let s = NoiseSchedule::new(1000, ScheduleKind::Linear, (1e-4, 0.02)).unwrap();
        // direct product, independent of the stored running product
        let direct: f64 = (0..1000)
            .map(|i| 1.0 - (1e-4 + (0.02 - 1e-4) * i as f64 / 999.0))
            .product();
        assert!(direct < 1e-4);
        assert!((s.alpha_bar(1000) - direct).abs() < 1e-12);
        assert!(s.alpha_bar(1) >= 0.999);
    }

    #[test]
    fn schedules_are_strictly_decreasing() {
        for kind in [ScheduleKind::Linear, ScheduleKind::Cosine] {
            for steps in [1, 2, 10, 200, 1000] {
                let hi = if kind == ScheduleKind::Linear { 0.02 } else { 0.999 };
                let s = NoiseSchedule::new(steps, kind, (1e-4, hi)).unwrap();
                let mut prev = 1.0;
                let mut prod = 1.0;
                for t in 1..=steps {
                    let b = s.beta(t);
                    assert!(b > 0.0 && b < 1.0);
                    prod *= 1.0 - b;
                    assert!((s.alpha_bar(t) - prod).abs() < 1e-12);
                    assert!(s.alpha_bar(t) < prev, "{kind:?} T={steps} t={t}");
                    prev = s.alpha_bar(t);
                }
            }
        }
    }

    #[test]
    fn rejects_bad_ranges() {
        assert!(NoiseSchedule::new(0, ScheduleKind::Linear, (0.1, 0.2)).is_err());
        assert!(NoiseSchedule::new(10, ScheduleKind::Linear, (0.0, 0.2)).is_err());
        assert!(NoiseSchedule::new(10, ScheduleKind::Linear, (0.3, 0.2)).is_err());
        assert!(NoiseSchedule::new(10, ScheduleKind::Linear, (0.1, 1.0)).is_err());
    }

    #[test]
    fn forward_noise_edge_cases() {
        let x0 = [0.5, -0.25];
        let e = [1.5, 2.0];
        assert_eq!(noise_with(1.0, &x0, &e), x0.to_vec());
        assert_eq!(noise_with(0.0, &x0, &e), e.to_vec());
        let s = NoiseSchedule::new(10, ScheduleKind::Linear, (0.01, 0.2)).unwrap();
        assert!(s.forward_noise(&x0, 0, &e).is_err());
        assert!(s.forward_noise(&x0, 11, &e).is_err());
        assert!(s.forward_noise(&x0, 3, &e[..1]).is_err());
        assert_eq!(s.forward_noise(&x0, 3, &e).unwrap().len(), 2);
    }

    #[test]
    fn forward_noise_preserves_unit_variance() {
        let s = NoiseSchedule::new(100, ScheduleKind::Linear, (1e-4, 0.05)).unwrap();
        let mut r = rng::seeded(9);
        for t in [1, 30, 100] {
            let n = 10_000;
            let mut sum = 0.0;
            let mut sq = 0.0;
            for _ in 0..n {
                let x0 = rng::normal_vec(&mut r, 1);
                let e = rng::normal_vec(&mut r, 1);
                let xt = s.forward_noise(&x0, t, &e).unwrap()[0];
                sum += xt;
                sq += xt * xt;
            }
            let mean = sum / n as f64;
            let var = sq / n as f64 - mean * mean;
            assert!((var - 1.0).abs() < 0.05, "t={t} var={var}");
        }
    }

    #[test]
    fn sampling_timesteps_cover_range() {
        let s = NoiseSchedule::new(1000, ScheduleKind::Linear, (1e-4, 0.02)).unwrap();
        let ts = s.sampling_timesteps(50).unwrap();
        assert_eq!(ts.len(), 50);
        assert_eq!(ts[0], 1000);
        assert_eq!(*ts.last().unwrap(), 20);
        assert!(ts.windows(2).all(|w| w[0] > w[1]));
        assert_eq!(s.sampling_timesteps(1000).unwrap().last(), Some(&1));
        assert!(s.sampling_timesteps(0).is_err());
        assert!(s.sampling_timesteps(1001).is_err());
    }
}
