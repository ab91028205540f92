use serde::{Deserialize, Serialize};

/// Two-sided 95% normal quantile.
pub const Z95: f64 = 1.959_963_984_540_054;

/// A proportion estimate with its binomial standard error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Proportion {
    pub estimate: f64,
    pub std_error: f64,
}

impl Proportion {
    pub fn binomial(count: usize, trials: usize) -> Self {
        if trials == 0 {
            return Self {
                estimate: 0.0,
                std_error: 0.0,
            };
        }
        let p = count as f64 / trials as f64;
        Self {
            estimate: p,
            std_error: (p * (1.0 - p) / trials as f64).sqrt(),
        }
    }

    /// Mean of several proportions. The standard error is the mean of the
    /// individual errors, an upper bound that holds however the estimates
    /// are correlated (they share noise seeds across guidance scales).
    pub fn average(parts: &[Proportion]) -> Self {
        if parts.is_empty() {
            return Self {
                estimate: 0.0,
                std_error: 0.0,
            };
        }
        let n = parts.len() as f64;
        Self {
            estimate: parts.iter().map(|p| p.estimate).sum::<f64>() / n,
            std_error: parts.iter().map(|p| p.std_error).sum::<f64>() / n,
        }
    }
}

/// Difference `a - b` against its 95% band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MarginTest {
    pub difference: f64,
    pub band: f64,
    pub exceeds: bool,
}

/// Whether `a` exceeds `b` by more than the combined 95% binomial band.
/// The errors are combined as if independent; positively correlated
/// estimates only make this conservative.
pub fn exceeds_band(a: Proportion, b: Proportion) -> MarginTest {
    let difference = a.estimate - b.estimate;
    let band = Z95 * (a.std_error.powi(2) + b.std_error.powi(2)).sqrt();
    MarginTest {
        difference,
        band,
        exceeds: difference > band,
    }
}
