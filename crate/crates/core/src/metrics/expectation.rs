use rand_distr::{Binomial, Distribution};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::exec::{chunk_ranges, Exec};
use crate::rng;

fn check_probabilities(p: &[f64]) -> Result<()> {
    if let Some((i, v)) = p.iter().enumerate().find(|(_, v)| !(0.0..=1.0).contains(*v)) {
        return Err(Error::InvalidArgument(format!(
            "memorisation probability {i} = {v} outside [0, 1]"
        )));
    }
    Ok(())
}

/// `N_G * sum_i p_i`.
pub fn expected_mem_count(p: &[f64], n_generated: u64) -> Result<f64> {
    check_probabilities(p)?;
    Ok(n_generated as f64 * p.iter().sum::<f64>())
}

/// `sum_i 1 - (1 - p_i)^N_G`.
pub fn expected_unique_mem_count(p: &[f64], n_generated: u64) -> Result<f64> {
    check_probabilities(p)?;
    let n = i32::try_from(n_generated).unwrap_or(i32::MAX);
    Ok(p.iter().map(|&pi| 1.0 - (1.0 - pi).powi(n)).sum())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MonteCarloEstimate {
    pub mean: f64,
    pub std_error: f64,
}

impl MonteCarloEstimate {
    fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0).max(1.0);
        Self {
            mean,
            std_error: (var / n).sqrt(),
        }
    }

    /// `|value - mean| <= k * std_error`.
    pub fn within(&self, value: f64, k: f64) -> bool {
        (value - self.mean).abs() <= k * self.std_error
    }
}

/// Simulated memorisation and unique-memorisation counts over `runs`
/// independent batches of `N_G` generations, where each generation hits
/// training image `i` independently with probability `p_i`.
pub fn simulate_counts(
    p: &[f64],
    n_generated: u64,
    runs: usize,
    seed: u64,
    exec: Exec,
) -> Result<(MonteCarloEstimate, MonteCarloEstimate)> {
    check_probabilities(p)?;
    if runs < 2 {
        return Err(Error::InvalidArgument("need at least two simulation runs".into()));
    }
    let dists: Vec<Binomial> = p
        .iter()
        .map(|&pi| Binomial::new(n_generated, pi).expect("validated probability"))
        .collect();
    let ranges = chunk_ranges(runs, 1024);
    let parts = exec.map(ranges.len(), |c| {
        let mut r = rng::stream(seed, c as u64);
        ranges[c]
            .clone()
            .map(|_| {
                let mut total = 0u64;
                let mut unique = 0u64;
                for d in &dists {
                    let k = d.sample(&mut r);
                    total += k;
                    unique += u64::from(k > 0);
                }
                (total as f64, unique as f64)
            })
            .collect::<Vec<_>>()
    });
    let (totals, uniques): (Vec<f64>, Vec<f64>) = parts.into_iter().flatten().unzip();
    Ok((
        MonteCarloEstimate::from_samples(&totals),
        MonteCarloEstimate::from_samples(&uniques),
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn closed_form_examples() {
        assert_eq!(expected_mem_count(&[0.0; 5], 100).unwrap(), 0.0);
        assert!((expected_mem_count(&[0.1, 0.2], 10).unwrap() - 3.0).abs() < 1e-12);
        assert_eq!(expected_unique_mem_count(&[1.0; 7], 3).unwrap(), 7.0);
        assert_eq!(expected_unique_mem_count(&[0.5], 2).unwrap(), 0.75);
        assert!(expected_mem_count(&[1.5], 1).is_err());
        assert!(expected_unique_mem_count(&[-0.1], 1).is_err());
    }

    #[test]
    fn simulation_matches_formulas() {
        let mut r = rng::seeded(21);
        let p: Vec<f64> = (0..12).map(|_| r.random_range(0.0..0.08)).collect();
        let (mem, uniq) = simulate_counts(&p, 20, 100_000, 4, Exec::Parallel).unwrap();
        let e_mem = expected_mem_count(&p, 20).unwrap();
        let e_uniq = expected_unique_mem_count(&p, 20).unwrap();
        assert!(mem.within(e_mem, 3.0), "{mem:?} vs {e_mem}");
        assert!(uniq.within(e_uniq, 3.0), "{uniq:?} vs {e_uniq}");
        let (seq, _) = simulate_counts(&p, 20, 100_000, 4, Exec::Sequential).unwrap();
        assert_eq!(seq, mem);
    }

    proptest! {
        #[test]
        fn unique_count_bounds(p in prop::collection::vec(0.0f64..=1.0, 1..30), n in 1u64..500) {
            let m = p.len() as f64;
            let u = expected_unique_mem_count(&p, n).unwrap();
            let u_next = expected_unique_mem_count(&p, n + 1).unwrap();
            prop_assert!(u <= m + 1e-12);
            prop_assert!(u_next >= u - 1e-12);
            prop_assert!(u <= expected_mem_count(&p, n).unwrap() + 1e-9);
        }
    }
}
