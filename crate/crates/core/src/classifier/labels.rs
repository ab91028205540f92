use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::container::write_atomic;
use crate::error::{Error, Result};
use crate::nn::Tensor;
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelKind {
    /// The dataset's own labels.
    Original,
    /// One distinct label per training sample.
    RandomPerSample,
    /// Uniformly random balanced labels over `k` classes.
    RandomK,
    /// k-means cluster membership.
    ClusterK,
}

impl LabelKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LabelKind::Original => "original",
            LabelKind::RandomPerSample => "random_per_sample",
            LabelKind::RandomK => "random_k",
            LabelKind::ClusterK => "cluster_k",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelSource {
    pub kind: LabelKind,
    /// Class count for `random_k` and `cluster_k`.
    #[serde(default)]
    pub k: Option<usize>,
    #[serde(default)]
    pub seed: u64,
    /// Cluster on the top principal components instead of raw features.
    #[serde(default)]
    pub pca_components: Option<usize>,
}

impl LabelSource {
    pub fn original() -> Self {
        Self {
            kind: LabelKind::Original,
            k: None,
            seed: 0,
            pca_components: None,
        }
    }
}

/// Labels together with the source that produced them. Construction
/// enforces that every class is non-empty and a strict subset of the data.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelAssignment {
    labels: Vec<usize>,
    num_classes: usize,
    source: LabelSource,
}

impl LabelAssignment {
    pub fn new(labels: Vec<usize>, num_classes: usize, source: LabelSource) -> Result<Self> {
        check_informative(&labels, num_classes)?;
        Ok(Self {
            labels,
            num_classes,
            source,
        })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn source(&self) -> &LabelSource {
        &self.source
    }

    pub fn class_sizes(&self) -> Vec<usize> {
        histogram(&self.labels, self.num_classes)
    }

    /// Text table with columns `index,label,source_kind,seed`.
    pub fn to_table(&self) -> String {
        let mut s = String::from("index,label,source_kind,seed\n");
        for (i, l) in self.labels.iter().enumerate() {
            let _ = writeln!(s, "{i},{l},{},{}", self.source.kind.as_str(), self.source.seed);
        }
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_table().as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let corrupt = |reason: String| Error::Corrupt {
            path: path.to_path_buf(),
            reason,
        };
        let mut lines = text.lines();
        if lines.next() != Some("index,label,source_kind,seed") {
            return Err(corrupt("unexpected header".into()));
        }
        let mut labels = Vec::new();
        let mut kind = None;
        let mut seed = 0;
        for (row, line) in lines.enumerate() {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 || f[0].parse::<usize>().ok() != Some(row) {
                return Err(corrupt(format!("bad row {row}: {line}")));
            }
            labels.push(f[1].parse().map_err(|_| corrupt(format!("bad label in row {row}")))?);
            kind = Some(f[2].to_string());
            seed = f[3].parse().map_err(|_| corrupt(format!("bad seed in row {row}")))?;
        }
        let kind: LabelKind = serde_json::from_value(serde_json::Value::String(
            kind.ok_or_else(|| corrupt("empty table".into()))?,
        ))
        .map_err(|e| corrupt(e.to_string()))?;
        let num_classes = labels.iter().max().map_or(0, |m| m + 1);
        let k = matches!(kind, LabelKind::RandomK | LabelKind::ClusterK).then_some(num_classes);
        Self::new(
            labels,
            num_classes,
            LabelSource {
                kind,
                k,
                seed,
                pca_components: None,
            },
        )
    }
}

fn histogram(labels: &[usize], k: usize) -> Vec<usize> {
    let mut h = vec![0; k];
    for &l in labels {
        h[l] += 1;
    }
    h
}

/// Every class must be non-empty and strictly smaller than the dataset.
pub fn check_informative(labels: &[usize], num_classes: usize) -> Result<()> {
    let n = labels.len();
    if num_classes < 2 {
        return Err(Error::NonInformativeLabels(format!(
            "{num_classes} class(es): a single label covers the whole dataset"
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} out of range for {num_classes} classes"
        )));
    }
    for (c, size) in histogram(labels, num_classes).into_iter().enumerate() {
        if size == 0 {
            return Err(Error::NonInformativeLabels(format!("class {c} is empty")));
        }
        if size >= n {
            return Err(Error::NonInformativeLabels(format!(
                "class {c} contains all {n} samples"
            )));
        }
    }
    Ok(())
}

/// Produce labels for `data` from `source`. `original` is required for
/// [`LabelKind::Original`] and ignored otherwise.
pub fn assign_labels(
    data: &Tensor,
    original: Option<&[usize]>,
    source: &LabelSource,
) -> Result<LabelAssignment> {
    let n = data.rows();
    if n == 0 {
        return Err(Error::InvalidArgument("cannot label an empty dataset".into()));
    }
    let need_k = || {
        let k = source.k.ok_or_else(|| {
            Error::InvalidArgument(format!("label source {:?} needs k", source.kind))
        })?;
        if k > n {
            return Err(Error::InvalidArgument(format!("k = {k} exceeds N = {n}")));
        }
        if k < 2 {
            return Err(Error::NonInformativeLabels(format!(
                "k = {k} puts every sample in one class"
            )));
        }
        Ok(k)
    };
    let mut r = rng::seeded(source.seed);
    let (labels, k) = match source.kind {
        LabelKind::Original => {
            let labels = original
                .ok_or_else(|| Error::InvalidArgument("dataset has no original labels".into()))?;
            if labels.len() != n {
                return Err(Error::shape("original labels", n, labels.len()));
            }
            let k = labels.iter().max().map_or(0, |m| m + 1);
            (labels.to_vec(), k)
        }
        LabelKind::RandomPerSample => {
            let mut labels: Vec<usize> = (0..n).collect();
            labels.shuffle(&mut r);
            (labels, n)
        }
        LabelKind::RandomK => {
            let k = need_k()?;
            let mut labels: Vec<usize> = (0..n).map(|i| i % k).collect();
            labels.shuffle(&mut r);
            (labels, k)
        }
        LabelKind::ClusterK => {
            let k = need_k()?;
            let features = match source.pca_components {
                Some(q) => project_principal(data, q)?,
                None => data.clone(),
            };
            (kmeans(&features, k, &mut r, 8, 200).labels, k)
        }
    };
    LabelAssignment::new(labels, k, source.clone())
}

/// Rows of `data` projected onto its top `q` principal directions.
pub fn project_principal(data: &Tensor, q: usize) -> Result<Tensor> {
    let (n, d) = (data.rows(), data.cols());
    if q == 0 || q > d {
        return Err(Error::InvalidArgument(format!(
            "principal components must be in [1, {d}], got {q}"
        )));
    }
    let x = DMatrix::from_row_slice(n, d, data.data());
    let mean = x.row_mean();
    let centred = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centred.transpose() * &centred / n.max(1) as f64;
    let eig = SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let mut out = Vec::with_capacity(n * q);
    for i in 0..n {
        for &c in &order[..q] {
            let v = eig.eigenvectors.column(c);
            out.push((0..d).map(|j| centred[(i, j)] * v[j]).sum());
        }
    }
    Tensor::new(vec![n, q], out)
}

#[derive(Debug, Clone)]
pub struct KMeans {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub inertia: f64,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(x, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding; best of `restarts` runs.
/// Empty clusters are re-seeded with the point farthest from its centroid,
/// so every returned cluster is non-empty when `k <= n`.
pub fn kmeans(data: &Tensor, k: usize, r: &mut rng::Rng, restarts: usize, max_iter: usize) -> KMeans {
    let mut best: Option<KMeans> = None;
    for _ in 0..restarts.max(1) {
        let run = kmeans_once(data, k, r, max_iter);
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    best.expect("at least one restart")
}

fn kmeans_once(data: &Tensor, k: usize, r: &mut rng::Rng, max_iter: usize) -> KMeans {
    let n = data.rows();
    let rows: Vec<&[f64]> = data.iter_rows().collect();
    let mut centroids = vec![rows[r.random_range(0..n)].to_vec()];
    while centroids.len() < k {
        let d2: Vec<f64> = rows.iter().map(|x| nearest(x, &centroids).1).collect();
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut u = r.random_range(0.0..total);
            let mut idx = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if u < w {
                    idx = i;
                    break;
                }
                u -= w;
            }
            idx
        } else {
            r.random_range(0..n)
        };
        centroids.push(rows[pick].to_vec());
    }
    let mut labels = vec![usize::MAX; n];
    for _ in 0..max_iter {
        let mut changed = false;
        for (i, x) in rows.iter().enumerate() {
            let c = nearest(x, &centroids).0;
            if labels[i] != c {
                labels[i] = c;
                changed = true;
            }
        }
        // re-seed empty clusters
        let mut sizes = histogram(&labels, k);
        for c in 0..k {
            if sizes[c] == 0 {
                let far = (0..n)
                    .filter(|&i| sizes[labels[i]] > 1)
                    .max_by(|&a, &b| {
                        sq_dist(rows[a], &centroids[labels[a]])
                            .total_cmp(&sq_dist(rows[b], &centroids[labels[b]]))
                    })
                    .expect("k <= n leaves a donor cluster");
                sizes[labels[far]] -= 1;
                labels[far] = c;
                sizes[c] = 1;
                changed = true;
            }
        }
        let d = data.cols();
        let mut sums = vec![vec![0.0; d]; k];
        for (i, x) in rows.iter().enumerate() {
            for (s, v) in sums[labels[i]].iter_mut().zip(*x) {
                *s += v;
            }
        }
        for c in 0..k {
            centroids[c] = sums[c].iter().map(|s| s / sizes[c] as f64).collect();
        }
        if !changed {
            break;
        }
    }
    let inertia = rows
        .iter()
        .zip(&labels)
        .map(|(x, &c)| sq_dist(x, &centroids[c]))
        .sum();
    KMeans {
        labels,
        centroids,
        inertia,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn data(n: usize, d: usize, seed: u64) -> Tensor {
        let mut r = rng::seeded(seed);
        Tensor::new(vec![n, d], rng::normal_vec(&mut r, n * d)).unwrap()
    }

    fn src(kind: LabelKind, k: Option<usize>) -> LabelSource {
        LabelSource {
            kind,
            k,
            seed: 3,
            pca_components: None,
        }
    }

    #[test]
    fn random_per_sample_is_a_permutation() {
        let a = assign_labels(&data(5, 2, 0), None, &src(LabelKind::RandomPerSample, None)).unwrap();
        let mut sorted = a.labels().to_vec();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3, 4]);
        assert_eq!(a.class_sizes(), vec![1; 5]);
    }

    #[test]
    fn original_labels_pass_through() {
        let labels = vec![1, 0, 2, 1, 0, 2];
        let a = assign_labels(&data(6, 2, 0), Some(&labels), &LabelSource::original()).unwrap();
        assert_eq!(a.labels(), &labels[..]);
        assert_eq!(a.num_classes(), 3);
    }

    #[test]
    fn rejects_non_informative() {
        let d = data(6, 2, 0);
        assert!(matches!(
            assign_labels(&d, None, &src(LabelKind::RandomK, Some(1))),
            Err(Error::NonInformativeLabels(_))
        ));
        assert!(assign_labels(&d, None, &src(LabelKind::ClusterK, Some(7))).is_err());
        assert!(matches!(
            assign_labels(&d, Some(&[0; 6]), &LabelSource::original()),
            Err(Error::NonInformativeLabels(_))
        ));
        assert!(check_informative(&[0, 0, 2], 3).is_err());
    }

    #[test]
    fn random_k_balanced() {
        let a = assign_labels(&data(10, 2, 0), None, &src(LabelKind::RandomK, Some(3))).unwrap();
        assert_eq!(a.class_sizes(), vec![4, 3, 3]);
    }

    #[test]
    fn clusters_recover_separated_blobs() {
        let mut r = rng::seeded(11);
        let mut rows = Vec::new();
        let mut truth = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let centre = if c == 0 { [-5.0, 0.0, 1.0] } else { [5.0, 1.0, -1.0] };
            let noise = rng::normal_vec(&mut r, 3);
            rows.push(centre.iter().zip(&noise).map(|(a, b)| a + 0.5 * b).collect::<Vec<_>>());
            truth.push(c);
        }
        let x = Tensor::from_rows(&rows).unwrap();
        let a = assign_labels(&x, None, &src(LabelKind::ClusterK, Some(2))).unwrap();
        // brute-force oracle: nearest true centre
        let oracle: Vec<usize> = rows
            .iter()
            .map(|p| usize::from(sq_dist(p, &[5.0, 1.0, -1.0]) < sq_dist(p, &[-5.0, 0.0, 1.0])))
            .collect();
        assert_eq!(oracle, truth);
        let same = a.labels().iter().zip(&oracle).all(|(a, b)| a == b);
        let flipped = a.labels().iter().zip(&oracle).all(|(a, b)| *a == 1 - b);
        assert!(same || flipped);

        let pca = LabelSource {
            pca_components: Some(1),
            ..src(LabelKind::ClusterK, Some(2))
        };
        let b = assign_labels(&x, None, &pca).unwrap();
        let agree = b.labels().iter().zip(a.labels()).filter(|(x, y)| x == y).count();
        assert!(agree == 40 || agree == 0);
    }

    #[test]
    fn table_roundtrip() {
        let a = assign_labels(&data(8, 2, 1), None, &src(LabelKind::ClusterK, Some(3))).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        a.save(&p).unwrap();
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("index,label,source_kind,seed\n0,"));
        assert!(text.contains(",cluster_k,3\n"));
        let b = LabelAssignment::load(&p).unwrap();
        assert_eq!(b.labels(), a.labels());
        assert_eq!(b.source().kind, LabelKind::ClusterK);
    }
}
