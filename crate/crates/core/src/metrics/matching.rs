use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::scorer::Similarity;
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MatchRecord {
    pub generated: usize,
    pub train_index: usize,
    pub score: f64,
}

/// Exact nearest training sample for every generated sample. Ties go to the
/// lowest training index.
pub fn best_matches(
    generated: &Tensor,
    train: &Tensor,
    scorer: &dyn Similarity,
    exec: Exec,
) -> Result<Vec<MatchRecord>> {
    if generated.rows() == 0 || train.rows() == 0 {
        return Err(Error::InvalidArgument(
            "matching needs non-empty generated and training sets".into(),
        ));
    }
    if generated.cols() != train.cols() {
        return Err(Error::shape("generated sample width", train.cols(), generated.cols()));
    }
    let train_prepared: Vec<Vec<f64>> = exec.map(train.rows(), |j| scorer.prepare(train.row_slice(j)));
    Ok(exec.map(generated.rows(), |i| {
        let g = scorer.prepare(generated.row_slice(i));
        let mut best = MatchRecord {
            generated: i,
            train_index: 0,
            score: f64::NEG_INFINITY,
        };
        for (j, t) in train_prepared.iter().enumerate() {
            let s = scorer.score(&g, t);
            if s > best.score {
                best.train_index = j;
                best.score = s;
            }
        }
        best
    }))
}

/// Similarity band `[alpha, beta)`, or `[alpha, beta]` when `closed`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Tier {
    pub name: String,
    pub alpha: f64,
    pub beta: f64,
    #[serde(default)]
    pub closed: bool,
}

impl Tier {
    pub fn new(name: &str, alpha: f64, beta: f64, closed: bool) -> Result<Self> {
        if !(0.0 <= alpha && alpha < beta && beta <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "tier {name} needs 0 <= alpha < beta <= 1, got [{alpha}, {beta}]"
            )));
        }
        Ok(Self {
            name: name.to_string(),
            alpha,
            beta,
            closed,
        })
    }

    /// Low `[0.4, 0.5)`, mid `[0.5, 0.6)` and high `[0.6, 1.0]`.
    pub fn standard() -> Vec<Tier> {
        Self::from_thresholds(&[0.4, 0.5, 0.6]).expect("valid thresholds")
    }

    /// Contiguous tiers from ascending lower bounds, the last closed at 1.
    pub fn from_thresholds(lows: &[f64]) -> Result<Vec<Tier>> {
        let names = ["low", "mid", "high"];
        let mut tiers = Vec::with_capacity(lows.len());
        for (i, &alpha) in lows.iter().enumerate() {
            let last = i + 1 == lows.len();
            let beta = if last { 1.0 } else { lows[i + 1] };
            let name = if lows.len() == 3 {
                names[i].to_string()
            } else {
                format!("tier{i}")
            };
            tiers.push(Tier::new(&name, alpha, beta, last)?);
        }
        Ok(tiers)
    }

    pub fn contains(&self, score: f64) -> bool {
        score >= self.alpha && (score < self.beta || (self.closed && score <= self.beta))
    }
}

fn in_tier<'a>(records: &'a [MatchRecord], tier: &'a Tier) -> impl Iterator<Item = &'a MatchRecord> {
    records.iter().filter(|r| tier.contains(r.score))
}

fn check_ng(n_generated: usize) -> Result<()> {
    if n_generated == 0 {
        return Err(Error::InvalidArgument("N_G must be positive".into()));
    }
    Ok(())
}

/// Fraction of generations whose best match falls in `tier`.
pub fn ams(records: &[MatchRecord], tier: &Tier, n_generated: usize) -> Result<f64> {
    check_ng(n_generated)?;
    Ok(in_tier(records, tier).count() as f64 / n_generated as f64)
}

/// Distinct best-matched training samples among in-tier generations, over N_G.
pub fn ums(records: &[MatchRecord], tier: &Tier, n_generated: usize) -> Result<f64> {
    check_ng(n_generated)?;
    let distinct: BTreeSet<usize> = in_tier(records, tier).map(|r| r.train_index).collect();
    Ok(distinct.len() as f64 / n_generated as f64)
}

/// Per-training-sample frequency of being the in-tier best match.
pub fn empirical_mem_probabilities(records: &[MatchRecord], tier: &Tier, n_train: usize) -> Vec<f64> {
    let mut p = vec![0.0; n_train];
    if records.is_empty() {
        return p;
    }
    for r in in_tier(records, tier) {
        p[r.train_index] += 1.0;
    }
    p.iter_mut().for_each(|v| *v /= records.len() as f64);
    p
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierScore {
    pub tier: Tier,
    pub ams: f64,
    pub ums: f64,
    pub in_tier: usize,
    pub unique: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemorizationReport {
    pub lambda: f64,
    pub n_generated: usize,
    pub tiers: Vec<TierScore>,
    pub records: Vec<MatchRecord>,
}

impl MemorizationReport {
    pub fn new(records: Vec<MatchRecord>, tiers: &[Tier], lambda: f64) -> Result<Self> {
        let n = records.len();
        check_ng(n)?;
        let tiers = tiers
            .iter()
            .map(|t| {
                let in_tier = in_tier(&records, t).count();
                let unique = in_tier_unique(&records, t);
                TierScore {
                    tier: t.clone(),
                    ams: in_tier as f64 / n as f64,
                    ums: unique as f64 / n as f64,
                    in_tier,
                    unique,
                }
            })
            .collect();
        Ok(Self {
            lambda,
            n_generated: n,
            tiers,
            records,
        })
    }

    pub fn tier(&self, name: &str) -> Option<&TierScore> {
        self.tiers.iter().find(|t| t.tier.name == name)
    }
}

fn in_tier_unique(records: &[MatchRecord], tier: &Tier) -> usize {
    in_tier(records, tier)
        .map(|r| r.train_index)
        .collect::<BTreeSet<_>>()
        .len()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub lambda: f64,
    pub tier: String,
    pub alpha: f64,
    pub beta: f64,
    pub ams: f64,
    pub ums: f64,
    pub in_tier: usize,
    pub n_generated: usize,
}

pub fn report_rows(reports: &[MemorizationReport]) -> Vec<ReportRow> {
    reports
        .iter()
        .flat_map(|r| {
            r.tiers.iter().map(move |t| ReportRow {
                lambda: r.lambda,
                tier: t.tier.name.clone(),
                alpha: t.tier.alpha,
                beta: t.tier.beta,
                ams: t.ams,
                ums: t.ums,
                in_tier: t.in_tier,
                n_generated: r.n_generated,
            })
        })
        .collect()
}

fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    crate::container::write_atomic(path, &bytes)
}

pub fn read_csv<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    r.deserialize()
        .map(|row| {
            row.map_err(|e| Error::Corrupt {
                path: path.to_path_buf(),
                reason: e.to_string(),
            })
        })
        .collect()
}

/// One row per (lambda, tier).
pub fn write_report_csv(path: &Path, reports: &[MemorizationReport]) -> Result<()> {
    write_csv(path, &report_rows(reports))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchRow {
    pub lambda: f64,
    pub generated: usize,
    pub train_index: usize,
    pub score: f64,
}

pub fn write_matches_csv(path: &Path, reports: &[MemorizationReport]) -> Result<()> {
    let rows: Vec<MatchRow> = reports
        .iter()
        .flat_map(|r| {
            r.records.iter().map(move |m| MatchRow {
                lambda: r.lambda,
                generated: m.generated,
                train_index: m.train_index,
                score: m.score,
            })
        })
        .collect();
    write_csv(path, &rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::Scorer;
    use crate::rng;
    use proptest::prelude::*;
    use std::collections::HashSet;

    fn rec(scores: &[f64], idx: &[usize]) -> Vec<MatchRecord> {
        scores
            .iter()
            .zip(idx)
            .enumerate()
            .map(|(i, (&score, &train_index))| MatchRecord {
                generated: i,
                train_index,
                score,
            })
            .collect()
    }

    fn mid() -> Tier {
        Tier::standard()[1].clone()
    }

    #[test]
    fn identical_sets_match_themselves() {
        let mut r = rng::seeded(1);
        let x = Tensor::new(vec![20, 8], rng::normal_vec(&mut r, 160)).unwrap();
        let m = best_matches(&x, &x, &Scorer::default(), Exec::Parallel).unwrap();
        for (i, rec) in m.iter().enumerate() {
            assert_eq!(rec.train_index, i);
            assert!((rec.score - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn hand_computed_cosines() {
        // unit vectors at cosines 0.3 and 0.7 to g = e1
        let s = Scorer::CosineNormalized { standardize: false };
        let g = Tensor::row(&[1.0, 0.0]);
        let train = Tensor::from_rows(&[
            vec![0.3, (1.0f64 - 0.09).sqrt()],
            vec![0.7, (1.0f64 - 0.49).sqrt()],
        ])
        .unwrap();
        let m = best_matches(&g, &train, &s, Exec::Sequential).unwrap();
        assert_eq!(m[0].train_index, 1);
        assert!((m[0].score - 0.7).abs() < 1e-15);
        let orth = best_matches(&Tensor::row(&[0.0, 1.0]), &Tensor::row(&[5.0, 0.0]), &s, Exec::Sequential).unwrap();
        assert_eq!(orth[0].score, 0.0);
    }

    #[test]
    fn ties_go_to_lowest_index() {
        let s = Scorer::CosineNormalized { standardize: false };
        let train = Tensor::from_rows(&[vec![0.0, 1.0], vec![2.0, 0.0], vec![1.0, 0.0]]).unwrap();
        let m = best_matches(&Tensor::row(&[1.0, 0.0]), &train, &s, Exec::Sequential).unwrap();
        assert_eq!(m[0].train_index, 1);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let s = Scorer::default();
        assert!(best_matches(&Tensor::zeros(vec![1, 3]), &Tensor::zeros(vec![1, 4]), &s, Exec::Sequential).is_err());
        assert!(best_matches(&Tensor::zeros(vec![0, 3]), &Tensor::zeros(vec![1, 3]), &s, Exec::Sequential).is_err());
    }

    #[test]
    fn ams_and_ums_examples() {
        let r = rec(&[0.45, 0.55, 0.62, 0.30], &[0, 1, 2, 3]);
        assert_eq!(ams(&r, &mid(), 4).unwrap(), 0.25);
        let below = rec(&[0.1, 0.2], &[0, 1]);
        for t in Tier::standard() {
            assert_eq!(ams(&below, &t, 2).unwrap(), 0.0);
            assert_eq!(ums(&below, &t, 2).unwrap(), 0.0);
        }
        let r = rec(&[0.55; 4], &[2, 2, 7, 9]);
        assert_eq!(ums(&r, &mid(), 10).unwrap(), 0.3);
        let same = rec(&[0.52; 5], &[4; 5]);
        assert_eq!(ums(&same, &mid(), 5).unwrap(), 0.2);
        assert!(ams(&r, &mid(), 0).is_err());
        assert!(ums(&r, &mid(), 0).is_err());
    }

    #[test]
    fn boundaries() {
        let t = Tier::standard();
        assert!(t[1].contains(0.5) && !t[1].contains(0.6));
        assert!(t[2].contains(0.6) && t[2].contains(1.0));
        assert!(!t[0].contains(0.39999));
        assert!(Tier::new("bad", 0.6, 0.5, false).is_err());
    }

    #[test]
    fn report_csv_roundtrip() {
        let r = MemorizationReport::new(rec(&[0.45, 0.55, 0.62, 0.30], &[0, 1, 1, 3]), &Tier::standard(), 4.0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.csv");
        write_report_csv(&p, std::slice::from_ref(&r)).unwrap();
        let rows: Vec<ReportRow> = read_csv(&p).unwrap();
        assert_eq!(rows, report_rows(std::slice::from_ref(&r)));
        assert_eq!(rows.len(), 3);
        assert_eq!(rows[1].in_tier, 1);
        let text = std::fs::read_to_string(&p).unwrap();
        assert!(text.starts_with("lambda,tier,alpha,beta,ams,ums,in_tier,n_generated\n"));
        let q = dir.path().join("matches.csv");
        write_matches_csv(&q, &[r]).unwrap();
        assert_eq!(read_csv::<MatchRow>(&q).unwrap().len(), 4);
    }

    fn naive(records: &[MatchRecord], t: &Tier) -> (usize, usize) {
        let mut count = 0;
        let mut seen: Vec<usize> = Vec::new();
        for r in records {
            if r.score >= t.alpha && (r.score < t.beta || (t.closed && r.score <= t.beta)) {
                count += 1;
                if !seen.contains(&r.train_index) {
                    seen.push(r.train_index);
                }
            }
        }
        (count, seen.len())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn agrees_with_brute_force(n_gen in 1usize..200, n_train in 1usize..200, d in 2usize..6, seed in any::<u64>()) {
            let mut r = rng::seeded(seed);
            let g = Tensor::new(vec![n_gen, d], rng::normal_vec(&mut r, n_gen * d)).unwrap();
            let t = Tensor::new(vec![n_train, d], rng::normal_vec(&mut r, n_train * d)).unwrap();
            let s = Scorer::default();
            let fast = best_matches(&g, &t, &s, Exec::Parallel).unwrap();
            prop_assert_eq!(&fast, &best_matches(&g, &t, &s, Exec::Sequential).unwrap());
            for (i, rec) in fast.iter().enumerate() {
                let mut best = (0, f64::NEG_INFINITY);
                for j in 0..n_train {
                    let v = s.similarity(g.row_slice(i), t.row_slice(j));
                    if v > best.1 { best = (j, v); }
                }
                prop_assert_eq!(rec.train_index, best.0);
                prop_assert_eq!(rec.score, best.1);
            }
            let report = MemorizationReport::new(fast.clone(), &Tier::standard(), 0.0).unwrap();
            let mut total = 0.0;
            for ts in &report.tiers {
                let (c, u) = naive(&fast, &ts.tier);
                prop_assert_eq!(ts.in_tier, c);
                prop_assert_eq!(ts.unique, u);
                prop_assert!(ts.ums <= ts.ams && ts.ams <= 1.0);
                total += ts.ams;
            }
            let below = fast.iter().filter(|r| r.score < 0.4).count() as f64 / n_gen as f64;
            prop_assert!((total + below - 1.0).abs() < 1e-12);
        }

        #[test]
        fn ums_never_exceeds_ams(scores in prop::collection::vec(0.0f64..=1.0, 1..100), seed in any::<u64>()) {
            let idx: Vec<usize> = scores.iter().enumerate().map(|(i, _)| (i as u64 ^ seed) as usize % 7).collect();
            let r = rec(&scores, &idx);
            for t in Tier::standard() {
                let a = ams(&r, &t, r.len()).unwrap();
                let u = ums(&r, &t, r.len()).unwrap();
                prop_assert!(0.0 <= u && u <= a && a <= 1.0);
                let distinct: HashSet<usize> = r.iter().filter(|m| t.contains(m.score)).map(|m| m.train_index).collect();
                prop_assert!((u * r.len() as f64 - distinct.len() as f64).abs() < 1e-9);
            }
        }
    }
}
