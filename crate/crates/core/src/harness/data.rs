use std::path::Path;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::config::{DatasetKind, DatasetSpec};
use crate::container;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;

const KIND: &str = "dataset";

/// Training set with its original class labels. Values lie in `[-1, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub data: Tensor,
    pub labels: Vec<usize>,
    /// Factor the raw values were divided by to fit `[-1, 1]`.
    pub scale: f64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    n: usize,
    dim: usize,
    scale: f64,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.labels.iter().max().map_or(0, |m| m + 1)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let labels: Vec<f64> = self.labels.iter().map(|&l| l as f64).collect();
        container::save(
            path,
            KIND,
            &Header {
                n: self.data.rows(),
                dim: self.data.cols(),
                scale: self.scale,
            },
            &[self.data.data(), &labels],
        )
    }

    pub fn load(path: &Path) -> Result<Self> {
        let (h, mut arrays): (Header, _) = container::load(path, KIND)?;
        let corrupt = |reason: &str| Error::Corrupt {
            path: path.to_path_buf(),
            reason: reason.into(),
        };
        if arrays.len() != 2 || arrays[1].len() != h.n {
            return Err(corrupt("dataset arrays do not match header"));
        }
        let labels = arrays.pop().expect("two arrays").into_iter().map(|l| l as usize).collect();
        let data = Tensor::new(vec![h.n, h.dim], arrays.pop().expect("two arrays"))
            .map_err(|_| corrupt("dataset shape does not match header"))?;
        Ok(Self {
            data,
            labels,
            scale: h.scale,
        })
    }
}

/// Smooth random field on an `s x s` grid: a few signed Gaussian bumps.
fn smooth_field(s: usize, r: &mut rng::Rng) -> Vec<f64> {
    let mut out = vec![0.0; s * s];
    let bumps = 3;
    for _ in 0..bumps {
        let cy = r.random_range(0.0..s as f64);
        let cx = r.random_range(0.0..s as f64);
        let w = r.random_range(0.15..0.35) * s as f64;
        let a = if r.random_bool(0.5) { 1.0 } else { -1.0 } * r.random_range(0.5..1.0);
        for y in 0..s {
            for x in 0..s {
                let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                out[y * s + x] += a * (-d2 / (2.0 * w * w)).exp();
            }
        }
    }
    out
}

/// Deterministic synthetic training set with balanced classes.
pub fn synth_dataset(spec: &DatasetSpec) -> Result<Dataset> {
    if spec.n < 2 || spec.dim == 0 || spec.classes < 1 || spec.classes > spec.n {
        return Err(Error::InvalidArgument(format!(
            "dataset needs n >= 2, dim >= 1 and 1 <= classes <= n, got {spec:?}"
        )));
    }
    let mut r = rng::seeded(spec.seed);
    let labels: Vec<usize> = (0..spec.n).map(|i| i % spec.classes).collect();
    let d = spec.dim;
    let mut raw = Vec::with_capacity(spec.n * d);
    match spec.kind {
        DatasetKind::GaussianMixture => {
            let means: Vec<Vec<f64>> = (0..spec.classes)
                .map(|_| (0..d).map(|_| r.random_range(-1.0..1.0)).collect())
                .collect();
            for &c in &labels {
                let e = rng::normal_vec(&mut r, d);
                raw.extend(means[c].iter().zip(&e).map(|(m, v)| m + spec.noise * v));
            }
        }
        DatasetKind::TinyImageGrid => {
            let s = d.isqrt();
            if s * s != d {
                return Err(Error::InvalidArgument(format!(
                    "tiny_image_grid needs a square dim, got {d}"
                )));
            }
            let protos: Vec<Vec<f64>> = (0..spec.classes).map(|_| smooth_field(s, &mut r)).collect();
            let w = spec.prototype_weight;
            for &c in &labels {
                let own = smooth_field(s, &mut r);
                let e = rng::normal_vec(&mut r, d);
                raw.extend(
                    (0..d).map(|j| w * protos[c][j] + (1.0 - w) * own[j] + spec.noise * e[j]),
                );
            }
        }
    }
    let max = raw.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let scale = if max > 1.0 { max } else { 1.0 };
    raw.iter_mut().for_each(|v| *v /= scale);
    Ok(Dataset {
        data: Tensor::new(vec![spec.n, d], raw)?,
        labels,
        scale,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(kind: DatasetKind, n: usize, dim: usize, classes: usize) -> DatasetSpec {
        DatasetSpec {
            kind,
            n,
            dim,
            classes,
            seed: 5,
            noise: 0.2,
            prototype_weight: 0.5,
        }
    }

    #[test]
    fn single_component_mean_is_close() {
        let mut s = spec(DatasetKind::GaussianMixture, 100, 3, 1);
        s.noise = 0.1;
        let ds = synth_dataset(&s).unwrap();
        // regenerate the component mean with the same stream
        let mut r = rng::seeded(5);
        let mean: Vec<f64> = (0..3).map(|_| r.random_range(-1.0..1.0)).collect();
        for j in 0..3 {
            let m: f64 = ds.data.iter_rows().map(|row| row[j]).sum::<f64>() / 100.0;
            let bound = 3.0 * s.noise / ds.scale / 10.0;
            assert!((m - mean[j] / ds.scale).abs() < bound, "{m} vs {}", mean[j]);
        }
    }

    #[test]
    fn deterministic_and_bounded() {
        for kind in [DatasetKind::GaussianMixture, DatasetKind::TinyImageGrid] {
            let s = spec(kind, 40, 16, 4);
            let a = synth_dataset(&s).unwrap();
            let b = synth_dataset(&s).unwrap();
            assert_eq!(a, b);
            assert!(a.data.data().iter().all(|v| (-1.0..=1.0).contains(v)));
            assert_eq!(a.num_classes(), 4);
        }
        assert!(synth_dataset(&spec(DatasetKind::TinyImageGrid, 4, 15, 2)).is_err());
        assert!(synth_dataset(&spec(DatasetKind::GaussianMixture, 1, 2, 1)).is_err());
    }

    #[test]
    fn container_roundtrip() {
        let ds = synth_dataset(&spec(DatasetKind::TinyImageGrid, 12, 9, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("data.bin");
        ds.save(&p).unwrap();
        assert_eq!(Dataset::load(&p).unwrap(), ds);
    }
}
