use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use super::config::{hash_value, ExperimentConfig};
use super::data::{synth_dataset, Dataset};
use super::manifest::{Artifact, RunManifest, StageRecord, StageStatus};
use super::stats::{exceeds_band, MarginTest, Proportion};
use crate::classifier::{
    assign_labels, distill, label_samples, train_teacher, Classifier, DistillReport,
    LabelAssignment, PseudoDataset, TeacherReport,
};
use crate::container::{self, file_checksum, write_atomic};
use crate::diffusion::{
    guided_sample, train_score_net, GuidanceClassifier, GuidanceSpec, NoiseSchedule,
    SampleBatch, ScoreModel,
};
use crate::error::{Error, Result};
use crate::exec::Exec;
use crate::metrics::{best_matches, write_report_csv, MemorizationReport};
use crate::nn::{Checkpoint, MlpConfig, MlpParams, Role, Tensor};
use crate::rng::derive_seed;

/// Which guidance source drives extraction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Unguided sampling.
    Random,
    /// Guidance from the time-independent teacher.
    TimeIndependent,
    /// Guidance from the distilled time-dependent student.
    Side,
}

impl Variant {
    pub fn key(self) -> &'static str {
        match self {
            Variant::Random => "random",
            Variant::TimeIndependent => "ti",
            Variant::Side => "side",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Variant::Random => "Random",
            Variant::TimeIndependent => "TI",
            Variant::Side => "SIDE",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "random" => Ok(Variant::Random),
            "ti" | "time_independent" => Ok(Variant::TimeIndependent),
            "side" => Ok(Variant::Side),
            other => Err(Error::InvalidArgument(format!("unknown variant {other}"))),
        }
    }
}

pub fn lambda_key(lambda: f64) -> String {
    format!("{lambda}")
}

const DATA: &str = "data.bin";
const SCORE: &str = "checkpoints/score.ckpt";
const LABELS: &str = "labels.csv";
const TEACHER: &str = "checkpoints/teacher.ckpt";
const TEACHER_REPORT: &str = "checkpoints/teacher.json";
const PSEUDO: &str = "pseudo.bin";
const STUDENT: &str = "checkpoints/student.ckpt";
const STUDENT_REPORT: &str = "checkpoints/student.json";

fn samples_path(variant: Variant, lambda: f64) -> String {
    format!("samples/{}_l{}.bin", variant.key(), lambda_key(lambda))
}

#[derive(Serialize, Deserialize)]
struct PseudoHeader {
    n: usize,
    dim: usize,
    classes: usize,
}

fn save_pseudo(path: &Path, p: &PseudoDataset) -> Result<()> {
    container::save(
        path,
        "pseudo",
        &PseudoHeader {
            n: p.len(),
            dim: p.samples.cols(),
            classes: p.soft_labels.cols(),
        },
        &[p.samples.data(), p.soft_labels.data()],
    )
}

fn load_pseudo(path: &Path) -> Result<PseudoDataset> {
    let (h, mut arrays): (PseudoHeader, _) = container::load(path, "pseudo")?;
    let corrupt = |e: Error| Error::Corrupt {
        path: path.to_path_buf(),
        reason: e.to_string(),
    };
    let soft = Tensor::new(vec![h.n, h.classes], arrays.pop().unwrap_or_default()).map_err(corrupt)?;
    let samples = Tensor::new(vec![h.n, h.dim], arrays.pop().unwrap_or_default()).map_err(corrupt)?;
    PseudoDataset::new(samples, soft)
}

/// Staged, resumable experiment over one run directory.
///
/// Every stage is keyed by a fingerprint of its config inputs and the
/// checksums of its upstream artifacts. A stage whose fingerprint matches
/// the manifest and whose outputs still checksum-validate is skipped.
pub struct Pipeline {
    cfg: ExperimentConfig,
    dir: PathBuf,
    exec: Exec,
    manifest: RunManifest,
}

impl Pipeline {
    pub fn open(cfg: ExperimentConfig, dir: &Path, exec: Exec) -> Result<Self> {
        cfg.validate()?;
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut manifest = RunManifest::load_or_default(dir)?;
        manifest.config_hash = cfg.hash();
        let toml = cfg.to_toml()?;
        write_atomic(&dir.join("config.toml"), toml.as_bytes())?;
        Ok(Self {
            cfg,
            dir: dir.to_path_buf(),
            exec,
            manifest,
        })
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.cfg
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.join(rel)
    }

    fn seed(&self, label: &str) -> u64 {
        derive_seed(self.cfg.seed, label)
    }

    fn artifact_sums(&self, rels: &[&str]) -> Result<Vec<String>> {
        rels.iter().map(|r| file_checksum(&self.path(r))).collect()
    }

    /// Run `work` unless the stage is fresh. Returns whether it ran.
    fn stage<F>(
        &mut self,
        name: &str,
        inputs: serde_json::Value,
        upstream: &[&str],
        outputs: &[&str],
        work: F,
    ) -> Result<bool>
    where
        F: FnOnce(&Self) -> Result<()>,
    {
        let upstream_sums = self.artifact_sums(upstream)?;
        let fingerprint = hash_value(&json!({
            "stage": name,
            "inputs": inputs,
            "upstream": upstream_sums,
        }));
        if self.manifest.is_fresh(&self.dir, name, &fingerprint) {
            log::debug!("stage {name}: up to date");
            return Ok(false);
        }
        log::info!("stage {name}: running");
        let start = Instant::now();
        let result = work(self).and_then(|()| {
            outputs
                .iter()
                .map(|rel| {
                    Ok(Artifact {
                        path: PathBuf::from(rel),
                        checksum: file_checksum(&self.path(rel))?,
                    })
                })
                .collect::<Result<Vec<_>>>()
        });
        let seconds = start.elapsed().as_secs_f64();
        let (record, outcome) = match result {
            Ok(artifacts) => (
                StageRecord {
                    fingerprint,
                    status: StageStatus::Done,
                    artifacts,
                    seconds,
                    error: None,
                },
                Ok(true),
            ),
            Err(e) => (
                StageRecord {
                    fingerprint,
                    status: StageStatus::Failed,
                    artifacts: Vec::new(),
                    seconds,
                    error: Some(e.to_string()),
                },
                Err(Error::Stage {
                    stage: name.to_string(),
                    source: Box::new(e),
                }),
            ),
        };
        self.manifest.stages.insert(name.to_string(), record);
        self.manifest.save(&self.dir)?;
        outcome
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        let d = &self.cfg.diffusion;
        NoiseSchedule::new(d.steps, d.schedule, (d.beta_min, d.beta_max))
    }

    pub fn synth(&mut self) -> Result<Dataset> {
        let spec = self.cfg.dataset.clone();
        self.stage("synth", json!(spec), &[], &[DATA], |p| {
            synth_dataset(&p.cfg.dataset)?.save(&p.path(DATA))
        })?;
        Dataset::load(&self.path(DATA))
    }

    pub fn train_diffusion(&mut self) -> Result<ScoreModel> {
        let data = self.synth()?;
        let inputs = json!({"diffusion": self.cfg.diffusion, "seed": self.cfg.seed});
        self.stage("train_diffusion", inputs, &[DATA], &[SCORE], |p| {
            let d = &p.cfg.diffusion;
            let dim = data.data.cols();
            let config = MlpConfig {
                input_dim: dim,
                hidden_dim: d.net.hidden,
                output_dim: dim,
                blocks: d.net.blocks,
                activation: d.net.activation,
                time_embed_dim: d.net.time_embed_dim,
                time_input: true,
                time_modules: true,
            };
            let mut net = MlpParams::init(config, &mut crate::rng::seeded(p.seed("score_init")))?;
            let sched = p.schedule()?;
            let hist = train_score_net(&mut net, &data.data, &sched, &d.train, p.seed("score_train"), p.exec)?;
            log::info!(
                "diffusion loss {:.4} -> {:.4}",
                hist.first().copied().unwrap_or(f64::NAN),
                hist.last().copied().unwrap_or(f64::NAN)
            );
            let mut ckpt = Checkpoint::new(Role::ScoreNet, net, p.cfg.seed, hist.len() as u64);
            ckpt.meta.schedule_steps = Some(d.steps);
            ckpt.save(&p.path(SCORE))
        })?;
        ScoreModel::new(Checkpoint::load_role(&self.path(SCORE), Role::ScoreNet)?.net)
    }

    pub fn labels(&mut self) -> Result<LabelAssignment> {
        let data = self.synth()?;
        let inputs = json!(self.cfg.labels);
        self.stage("labels", inputs, &[DATA], &[LABELS], |p| {
            assign_labels(&data.data, Some(&data.labels), &p.cfg.labels)?.save(&p.path(LABELS))
        })?;
        LabelAssignment::load(&self.path(LABELS))
    }

    pub fn train_teacher(&mut self) -> Result<(Classifier, TeacherReport)> {
        let data = self.synth()?;
        let labels = self.labels()?;
        let inputs = json!({"teacher": self.cfg.teacher, "seed": self.cfg.seed});
        self.stage("train_teacher", inputs, &[DATA, LABELS], &[TEACHER, TEACHER_REPORT], |p| {
            let t = &p.cfg.teacher;
            let config = MlpConfig {
                input_dim: data.data.cols(),
                hidden_dim: t.net.hidden,
                output_dim: labels.num_classes(),
                blocks: t.net.blocks,
                activation: t.net.activation,
                time_embed_dim: 0,
                time_input: false,
                time_modules: false,
            };
            let net = MlpParams::init(config, &mut crate::rng::seeded(p.seed("teacher_init")))?;
            let (teacher, report) =
                train_teacher(net, &data.data, labels.labels(), &t.train, p.seed("teacher_train"), p.exec)?;
            log::info!(
                "teacher accuracy {:.3}, loss {:.4}",
                report.train_accuracy,
                report.final_loss
            );
            Checkpoint::new(Role::Teacher, teacher.net, p.cfg.seed, report.loss_history.len() as u64)
                .save(&p.path(TEACHER))?;
            write_atomic(&p.path(TEACHER_REPORT), serde_json::to_string_pretty(&report)?.as_bytes())
        })?;
        let teacher = Classifier::new(Checkpoint::load_role(&self.path(TEACHER), Role::Teacher)?.net)?;
        let text = std::fs::read_to_string(self.path(TEACHER_REPORT))
            .map_err(|e| Error::io(self.path(TEACHER_REPORT), e))?;
        Ok((teacher, serde_json::from_str(&text)?))
    }

    fn sampler_spec(&self) -> GuidanceSpec {
        let s = &self.cfg.sampler;
        GuidanceSpec {
            target_label: 0,
            lambda: 0.0,
            steps: s.steps,
            eta: s.eta,
            sampler: s.kind,
            clip_denoised: s.clip_denoised,
        }
    }

    pub fn pseudo(&mut self) -> Result<PseudoDataset> {
        let model = self.train_diffusion()?;
        let (teacher, _) = self.train_teacher()?;
        let inputs = json!({"pseudo": self.cfg.pseudo, "sampler": self.cfg.sampler, "seed": self.cfg.seed});
        self.stage("pseudo", inputs, &[SCORE, TEACHER], &[PSEUDO], |p| {
            let n = p.cfg.pseudo.synthetic_factor * p.cfg.dataset.n;
            let batch = guided_sample(
                &model,
                &p.schedule()?,
                &p.sampler_spec(),
                None,
                n,
                p.seed("pseudo"),
                p.exec,
            )?;
            save_pseudo(&p.path(PSEUDO), &label_samples(&teacher, batch.samples)?)
        })?;
        load_pseudo(&self.path(PSEUDO))
    }

    pub fn distill(&mut self) -> Result<(Classifier, DistillReport)> {
        let pseudo = self.pseudo()?;
        let (teacher, _) = self.train_teacher()?;
        let inputs = json!({
            "student": self.cfg.student,
            "steps": self.cfg.diffusion.steps,
            "schedule": self.cfg.diffusion.schedule,
            "beta": [self.cfg.diffusion.beta_min, self.cfg.diffusion.beta_max],
            "seed": self.cfg.seed,
        });
        self.stage("distill", inputs, &[PSEUDO, TEACHER], &[STUDENT, STUDENT_REPORT], |p| {
            let (student, report) =
                distill(&teacher, &pseudo, &p.schedule()?, &p.cfg.student, p.seed("distill"), p.exec)?;
            log::info!(
                "student held-out KL at t=1 {:.4}, agreement {:.3}",
                report.holdout_kl_t1,
                report.holdout_agreement_t1
            );
            let mut ckpt = Checkpoint::new(Role::Student, student.net, p.cfg.seed, report.loss_history.len() as u64);
            ckpt.meta.schedule_steps = Some(p.cfg.diffusion.steps);
            ckpt.save(&p.path(STUDENT))?;
            write_atomic(&p.path(STUDENT_REPORT), serde_json::to_string_pretty(&report)?.as_bytes())
        })?;
        let student = Classifier::new(Checkpoint::load_role(&self.path(STUDENT), Role::Student)?.net)?;
        let text = std::fs::read_to_string(self.path(STUDENT_REPORT))
            .map_err(|e| Error::io(self.path(STUDENT_REPORT), e))?;
        Ok((student, serde_json::from_str(&text)?))
    }

    /// Guided generations for `variant` at `lambda`. Every class receives an
    /// equal share of the `n_generated` chains, and chain seeds are shared
    /// across variants and guidance scales so comparisons use common noise.
    /// At `lambda = 0` every variant is the unguided baseline.
    pub fn extract(&mut self, variant: Variant, lambda: f64) -> Result<SampleBatch> {
        let variant = if lambda == 0.0 { Variant::Random } else { variant };
        if variant == Variant::Random && lambda != 0.0 {
            return Err(Error::InvalidArgument("the unguided baseline has lambda = 0".into()));
        }
        let model = self.train_diffusion()?;
        let labels = self.labels()?;
        let classifier = self.guide(variant)?;
        let guide_path = match variant {
            Variant::Random => None,
            Variant::TimeIndependent => Some(TEACHER),
            Variant::Side => Some(STUDENT),
        };
        let mut upstream = vec![SCORE, LABELS];
        upstream.extend(guide_path);
        let rel = samples_path(variant, lambda);
        let inputs = json!({
            "sampler": self.cfg.sampler,
            "n": self.cfg.extraction.n_generated,
            "lambda": lambda,
            "seed": self.cfg.seed,
        });
        let name = format!("extract/{}/{}", variant.key(), lambda_key(lambda));
        let score_sum = file_checksum(&self.path(SCORE))?;
        self.stage(&name, inputs, &upstream, &[rel.as_str()], |p| {
            let sched = p.schedule()?;
            let classes = labels.num_classes();
            let n = p.cfg.extraction.n_generated;
            let guide = classifier.as_ref().map(|c| c as &dyn GuidanceClassifier);
            let mut parts = Vec::with_capacity(classes);
            for c in 0..classes {
                let share = n / classes + usize::from(c < n % classes);
                if share == 0 {
                    continue;
                }
                let spec = GuidanceSpec {
                    target_label: c,
                    lambda,
                    ..p.sampler_spec()
                };
                let seed = p.seed(&format!("extract/{c}"));
                parts.push(guided_sample(&model, &sched, &spec, guide, share, seed, p.exec)?.samples);
            }
            let batch = SampleBatch {
                meta: crate::diffusion::SampleMeta {
                    seed: p.cfg.seed,
                    lambda,
                    steps: p.cfg.sampler.steps,
                    // one past the last class: the batch cycles over all of them
                    target_label: classes,
                    model_checksum: Some(score_sum.clone()),
                },
                samples: Tensor::vstack(&parts)?,
            };
            batch.save(&p.path(&rel))
        })?;
        SampleBatch::load(&self.path(&rel))
    }

    fn guide(&mut self, variant: Variant) -> Result<Option<Classifier>> {
        Ok(match variant {
            Variant::Random => None,
            Variant::TimeIndependent => Some(self.train_teacher()?.0),
            Variant::Side => Some(self.distill()?.0),
        })
    }

    /// Ad-hoc guided batch for a single target class, outside the manifest.
    pub fn sample_class(
        &mut self,
        variant: Variant,
        spec: &GuidanceSpec,
        n: usize,
        seed: u64,
    ) -> Result<SampleBatch> {
        let variant = if spec.lambda == 0.0 { Variant::Random } else { variant };
        let model = self.train_diffusion()?;
        let classes = self.labels()?.num_classes();
        if spec.target_label >= classes {
            return Err(Error::InvalidArgument(format!(
                "class {} out of range for {classes} classes",
                spec.target_label
            )));
        }
        let classifier = self.guide(variant)?;
        let guide = classifier.as_ref().map(|c| c as &dyn GuidanceClassifier);
        let mut batch = guided_sample(&model, &self.schedule()?, spec, guide, n, seed, self.exec)?;
        batch.meta.model_checksum = Some(file_checksum(&self.path(SCORE))?);
        Ok(batch)
    }

    pub fn sampler_defaults(&self) -> GuidanceSpec {
        self.sampler_spec()
    }

    /// Memorisation reports for `variant` at each guidance scale.
    pub fn evaluate(&mut self, variant: Variant, lambdas: &[f64]) -> Result<Vec<MemorizationReport>> {
        let data = self.synth()?;
        let tiers = self.cfg.tiers();
        let scorer = self.cfg.metrics.scorer;
        let mut reports = Vec::with_capacity(lambdas.len());
        for &lambda in lambdas {
            let batch = self.extract(variant, lambda)?;
            let records = best_matches(&batch.samples, &data.data, &scorer, self.exec)?;
            reports.push(MemorizationReport::new(records, &tiers, lambda)?);
        }
        Ok(reports)
    }
}

/// Tier-level averages over a set of guidance scales.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TierAverage {
    pub variant: Variant,
    pub lambdas: Vec<f64>,
    pub tier: String,
    pub ams: Proportion,
    pub ums: f64,
    pub in_tier: usize,
    pub n_generated: usize,
}

pub fn average_reports(variant: Variant, reports: &[MemorizationReport]) -> Vec<TierAverage> {
    let Some(first) = reports.first() else {
        return Vec::new();
    };
    first
        .tiers
        .iter()
        .enumerate()
        .map(|(k, t)| {
            let parts: Vec<Proportion> = reports
                .iter()
                .map(|r| Proportion::binomial(r.tiers[k].in_tier, r.n_generated))
                .collect();
            TierAverage {
                variant,
                lambdas: reports.iter().map(|r| r.lambda).collect(),
                tier: t.tier.name.clone(),
                ams: Proportion::average(&parts),
                ums: reports.iter().map(|r| r.tiers[k].ums).sum::<f64>() / reports.len() as f64,
                in_tier: reports.iter().map(|r| r.tiers[k].in_tier).sum(),
                n_generated: reports.iter().map(|r| r.n_generated).sum(),
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub config_hash: String,
    pub reports: Vec<MemorizationReport>,
    /// SIDE averaged over the window (or all positive scales).
    pub averaged: Vec<TierAverage>,
    pub baseline: Vec<TierAverage>,
}

/// Full SIDE pipeline over `lambda_set`, writing `reports/side.csv` and
/// `reports/summary.json`.
pub fn run_side(cfg: &ExperimentConfig, dir: &Path, exec: Exec) -> Result<(RunSummary, RunManifest)> {
    let mut p = Pipeline::open(cfg.clone(), dir, exec)?;
    let lambdas = cfg.extraction.lambda_set.clone();
    let reports = p.evaluate(Variant::Side, &lambdas)?;
    let window = cfg.window_lambdas();
    let in_window: Vec<MemorizationReport> = reports
        .iter()
        .filter(|r| window.contains(&r.lambda))
        .cloned()
        .collect();
    let base: Vec<MemorizationReport> = reports.iter().filter(|r| r.lambda == 0.0).cloned().collect();
    let averaged = if in_window.is_empty() {
        average_reports(Variant::Random, &base)
    } else {
        average_reports(Variant::Side, &in_window)
    };
    let summary = RunSummary {
        config_hash: cfg.hash(),
        averaged,
        baseline: average_reports(Variant::Random, &base),
        reports,
    };
    write_report_csv(&dir.join("reports/side.csv"), &summary.reports)?;
    let light = RunSummary {
        reports: Vec::new(),
        ..summary.clone()
    };
    write_atomic(&dir.join("reports/summary.json"), serde_json::to_string_pretty(&light)?.as_bytes())?;
    p.manifest.verify(dir)?;
    Ok((summary, p.manifest.clone()))
}

/// Best guidance scale per (tier, metric).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArgmaxRow {
    pub tier: String,
    pub metric: String,
    pub lambda: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepTable {
    pub variant: Variant,
    pub reports: Vec<MemorizationReport>,
    pub argmax: Vec<ArgmaxRow>,
}

impl SweepTable {
    /// Mid-tier-style query: AMS series for a named tier.
    pub fn ams_series(&self, tier: &str) -> Vec<(f64, f64)> {
        self.reports
            .iter()
            .filter_map(|r| r.tier(tier).map(|t| (r.lambda, t.ams)))
            .collect()
    }
}

/// Evaluate `variant` at every scale in `lambdas`; writes
/// `reports/sweep_<variant>.csv` and `reports/sweep_<variant>_argmax.csv`.
pub fn sweep_lambda(
    cfg: &ExperimentConfig,
    dir: &Path,
    exec: Exec,
    variant: Variant,
    lambdas: &[f64],
) -> Result<SweepTable> {
    if lambdas.is_empty() {
        return Err(Error::InvalidArgument("empty guidance-scale range".into()));
    }
    let mut p = Pipeline::open(cfg.clone(), dir, exec)?;
    let reports = p.evaluate(variant, lambdas)?;
    let mut argmax = Vec::new();
    for (k, t) in reports[0].tiers.iter().enumerate() {
        for metric in ["ams", "ums"] {
            let value = |r: &MemorizationReport| {
                if metric == "ams" {
                    r.tiers[k].ams
                } else {
                    r.tiers[k].ums
                }
            };
            // first maximum wins, so ties resolve to the smallest scale
            let best = reports
                .iter()
                .fold(None::<&MemorizationReport>, |b, r| match b {
                    Some(b) if value(b) >= value(r) => Some(b),
                    _ => Some(r),
                })
                .expect("non-empty");
            argmax.push(ArgmaxRow {
                tier: t.tier.name.clone(),
                metric: metric.to_string(),
                lambda: best.lambda,
                value: value(best),
            });
        }
    }
    let stem = format!("reports/sweep_{}", variant.key());
    write_report_csv(&dir.join(format!("{stem}.csv")), &reports)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &argmax {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(dir, e.into_error()))?;
    write_atomic(&dir.join(format!("{stem}_argmax.csv")), &bytes)?;
    Ok(SweepTable {
        variant,
        reports,
        argmax,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub variant: String,
    pub lambdas: String,
    pub tier: String,
    pub ams: f64,
    pub ams_se: f64,
    pub ums: f64,
    pub in_tier: usize,
    pub n_generated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareTable {
    pub rows: Vec<TierAverage>,
    /// Per tier: SIDE against the unguided baseline.
    pub side_vs_random: Vec<(String, MarginTest)>,
    /// Per tier: SIDE against time-independent guidance.
    pub side_vs_ti: Vec<(String, MarginTest)>,
}

impl CompareTable {
    pub fn get(&self, variant: Variant, tier: &str) -> Option<&TierAverage> {
        self.rows.iter().find(|r| r.variant == variant && r.tier == tier)
    }

    pub fn margin(&self, against: Variant, tier: &str) -> Option<MarginTest> {
        let list = match against {
            Variant::TimeIndependent => &self.side_vs_ti,
            _ => &self.side_vs_random,
        };
        list.iter().find(|(t, _)| t == tier).map(|(_, m)| *m)
    }
}

/// Random (unguided), time-independent guidance and SIDE, the guided
/// variants averaged over the window. Writes `reports/compare.csv`.
pub fn compare_variants(cfg: &ExperimentConfig, dir: &Path, exec: Exec) -> Result<CompareTable> {
    let mut p = Pipeline::open(cfg.clone(), dir, exec)?;
    let window = cfg.window_lambdas();
    if window.is_empty() {
        return Err(Error::Config("comparison needs a positive guidance scale".into()));
    }
    let random = average_reports(Variant::Random, &p.evaluate(Variant::Random, &[0.0])?);
    let ti = average_reports(Variant::TimeIndependent, &p.evaluate(Variant::TimeIndependent, &window)?);
    let side = average_reports(Variant::Side, &p.evaluate(Variant::Side, &window)?);
    let margins = |other: &[TierAverage]| {
        side.iter()
            .zip(other)
            .map(|(s, o)| (s.tier.clone(), exceeds_band(s.ams, o.ams)))
            .collect::<Vec<_>>()
    };
    let table = CompareTable {
        side_vs_random: margins(&random),
        side_vs_ti: margins(&ti),
        rows: random.into_iter().chain(ti).chain(side).collect(),
    };
    let rows: Vec<CompareRow> = table
        .rows
        .iter()
        .map(|r| CompareRow {
            variant: r.variant.label().to_string(),
            lambdas: r.lambdas.iter().map(|l| lambda_key(*l)).collect::<Vec<_>>().join(";"),
            tier: r.tier.clone(),
            ams: r.ams.estimate,
            ams_se: r.ams.std_error,
            ums: r.ums,
            in_tier: r.in_tier,
            n_generated: r.n_generated,
        })
        .collect();
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in &rows {
        w.serialize(row)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::io(dir, e.into_error()))?;
    write_atomic(&dir.join("reports/compare.csv"), &bytes)?;
    write_atomic(
        &dir.join("reports/compare.json"),
        serde_json::to_string_pretty(&table)?.as_bytes(),
    )?;
    Ok(table)
}
