use serde::{Deserialize, Serialize};

/// A symmetric similarity between two flattened samples.
///
/// `prepare` runs once per vector before any pairwise `score`, so per-sample
/// preprocessing is not repeated inside the matching loop.
pub trait Similarity: Sync {
    fn prepare(&self, x: &[f64]) -> Vec<f64>;
    fn score(&self, a: &[f64], b: &[f64]) -> f64;

    fn similarity(&self, a: &[f64], b: &[f64]) -> f64 {
        self.score(&self.prepare(a), &self.prepare(b))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Scorer {
    /// Cosine similarity, optionally after per-sample mean/variance
    /// standardisation (which makes it the Pearson correlation).
    CosineNormalized {
        #[serde(default = "yes")]
        standardize: bool,
    },
    /// `exp(-||a - b|| / (scale * sqrt(d)))`, in `(0, 1]`.
    NegL2Mapped { scale: f64 },
}

fn yes() -> bool {
    true
}

impl Default for Scorer {
    fn default() -> Self {
        Scorer::CosineNormalized { standardize: true }
    }
}

impl Similarity for Scorer {
    fn prepare(&self, x: &[f64]) -> Vec<f64> {
        match *self {
            Scorer::CosineNormalized { standardize } => {
                let mut v = x.to_vec();
                if standardize && !v.is_empty() {
                    let mean = v.iter().sum::<f64>() / v.len() as f64;
                    v.iter_mut().for_each(|e| *e -= mean);
                }
                let norm = v.iter().map(|e| e * e).sum::<f64>().sqrt();
                // zero vectors stay zero and score 0 against everything
                if norm > 0.0 {
                    v.iter_mut().for_each(|e| *e /= norm);
                }
                v
            }
            Scorer::NegL2Mapped { .. } => x.to_vec(),
        }
    }

    fn score(&self, a: &[f64], b: &[f64]) -> f64 {
        match *self {
            Scorer::CosineNormalized { .. } => {
                crate::nn::mlp::dot(a, b).clamp(-1.0, 1.0)
            }
            Scorer::NegL2Mapped { scale } => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-d2.sqrt() / (scale * (a.len().max(1) as f64).sqrt())).exp()
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn standardised_cosine_is_pearson() {
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [2.0, 1.0, 4.0, 3.0];
        let s = Scorer::default().similarity(&a, &b);
        // Pearson by hand: deviations (-1.5,-0.5,0.5,1.5) and (-0.5,-1.5,1.5,0.5)
        assert!((s - 0.6).abs() < 1e-12);
    }

    #[test]
    fn plain_cosine_hand_values() {
        let s = Scorer::CosineNormalized { standardize: false };
        assert!((s.similarity(&[1.0, 0.0], &[0.0, 2.0])).abs() < 1e-15);
        assert!((s.similarity(&[3.0, 4.0], &[3.0, 4.0]) - 1.0).abs() < 1e-15);
        assert_eq!(s.similarity(&[0.0, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn l2_mapped_is_one_on_identity() {
        let s = Scorer::NegL2Mapped { scale: 1.0 };
        assert_eq!(s.similarity(&[0.3, 0.1], &[0.3, 0.1]), 1.0);
        assert!(s.similarity(&[0.0, 0.0], &[3.0, 4.0]) < 0.1);
    }

    proptest! {
        #[test]
        fn cosine_is_symmetric_and_bounded(
            a in prop::collection::vec(-5.0f64..5.0, 6),
            b in prop::collection::vec(-5.0f64..5.0, 6),
            standardize in any::<bool>(),
        ) {
            let s = Scorer::CosineNormalized { standardize };
            let ab = s.similarity(&a, &b);
            prop_assert_eq!(ab, s.similarity(&b, &a));
            prop_assert!((-1.0..=1.0).contains(&ab));
            let spread = a.iter().cloned().fold(f64::MIN, f64::max) - a.iter().cloned().fold(f64::MAX, f64::min);
            if spread > 1e-3 {
                prop_assert!((s.similarity(&a, &a) - 1.0).abs() < 1e-12);
            }
        }
    }
}
