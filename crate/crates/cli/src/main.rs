mod plot;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use sidelab::harness::{
    compare_variants, lambda_key, run_side, sweep_lambda, ExperimentConfig, Pipeline, Variant,
};
use sidelab::metrics::{read_csv, write_matches_csv, write_report_csv, ReportRow};
use sidelab::{Error, Exec};

#[derive(Parser)]
#[command(name = "sidelab", version, about = "Training-data extraction lab for diffusion models")]
struct Cli {
    /// Experiment config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the root seed of the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory; overrides `output_dir` from the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads. 1 runs every loop sequentially.
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct SampleArgs {
    /// Guidance scale.
    #[arg(long)]
    lambda: f64,
    /// Reverse steps; defaults to the config.
    #[arg(long)]
    steps: Option<usize>,
    /// Number of samples; defaults to `n_generated`.
    #[arg(long)]
    n: Option<usize>,
    /// Single target class. Without it the batch cycles over every class.
    #[arg(long)]
    class: Option<usize>,
    #[arg(long, default_value = "side")]
    variant: Variant,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic training set.
    Synth,
    /// Train the (deliberately overfit) score network.
    TrainDiffusion,
    /// Assign labels and train the time-independent teacher.
    TrainTeacher,
    /// Pseudo-label generations and distill the time-dependent student.
    Distill,
    /// Guided sampling at one scale.
    Extract(SampleArgs),
    /// AMS/UMS reports over the configured scales (the full pipeline).
    Evaluate {
        #[arg(long, default_value = "side")]
        variant: Variant,
        /// Also write per-sample best matches.
        #[arg(long)]
        matches: bool,
    },
    /// Evaluate every scale of a range, e.g. `0..=21` or `0,2,5`.
    Sweep {
        #[arg(long, default_value = "side")]
        variant: Variant,
        #[arg(long, default_value = "0..=21")]
        lambdas: String,
    },
    /// Random vs time-independent vs time-dependent guidance.
    Compare,
    /// Check the closed-form Gaussian identities against Monte Carlo.
    VerifyTheory {
        #[arg(long, default_value_t = 1_000_000)]
        samples: usize,
        #[arg(long, default_value_t = 7)]
        theory_seed: u64,
    },
    /// Render SVG plots from the report CSVs of a run directory.
    Report,
}

/// Failure classes that map onto exit codes.
enum Failure {
    Config(String),
    Stage(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Config(msg),
            other => Failure::Stage(other),
        }
    }
}

fn parse_lambdas(text: &str) -> Result<Vec<f64>, Failure> {
    let bad = || Failure::Config(format!("cannot parse guidance scales {text:?}"));
    if let Some((a, b)) = text.split_once("..") {
        let (b, inclusive) = match b.strip_prefix('=') {
            Some(b) => (b, true),
            None => (b, false),
        };
        let a: i64 = a.trim().parse().map_err(|_| bad())?;
        let b: i64 = b.trim().parse().map_err(|_| bad())?;
        let end = if inclusive { b + 1 } else { b };
        let v: Vec<f64> = (a..end).map(|x| x as f64).collect();
        return if v.is_empty() || a < 0 { Err(bad()) } else { Ok(v) };
    }
    text.split(',')
        .map(|s| s.trim().parse::<f64>().ok().filter(|l| *l >= 0.0).ok_or_else(bad))
        .collect()
}

fn load_config(cli: &Cli) -> Result<(ExperimentConfig, PathBuf), Failure> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Failure::Config("--config is required for this command".into()))?;
    let mut cfg = ExperimentConfig::load(path).map_err(|e| match e {
        Error::Config(m) => Failure::Config(m),
        other => Failure::Config(other.to_string()),
    })?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli
        .out
        .clone()
        .or_else(|| cfg.output_dir.clone())
        .ok_or_else(|| Failure::Config("no run directory: pass --out or set output_dir".into()))?;
    cfg.output_dir = None;
    cfg.validate()?;
    Ok((cfg, out))
}

fn print_reports(reports: &[sidelab::metrics::MemorizationReport]) {
    println!("{:>8} {:>6} {:>10} {:>10} {:>8}", "lambda", "tier", "ams", "ums", "count");
    for r in reports {
        for t in &r.tiers {
            println!(
                "{:>8} {:>6} {:>10.4} {:>10.4} {:>8}",
                lambda_key(r.lambda),
                t.tier.name,
                t.ams,
                t.ums,
                t.in_tier
            );
        }
    }
}

fn render_reports(dir: &Path) -> Result<usize, Failure> {
    let reports = dir.join("reports");
    let entries = std::fs::read_dir(&reports)
        .map_err(|e| Failure::Config(format!("{}: {e}", reports.display())))?;
    let mut written = 0;
    let mut paths: Vec<PathBuf> = entries.filter_map(|e| e.ok().map(|e| e.path())).collect();
    paths.sort();
    for path in paths {
        let stem = match path.file_stem().and_then(|s| s.to_str()) {
            Some(s) if path.extension().is_some_and(|e| e == "csv") => s.to_string(),
            _ => continue,
        };
        // only per-scale report tables carry these columns
        let Ok(rows) = read_csv::<ReportRow>(&path) else {
            continue;
        };
        let mut tiers: Vec<String> = Vec::new();
        for r in &rows {
            if !tiers.contains(&r.tier) {
                tiers.push(r.tier.clone());
            }
        }
        for (metric, pick) in [("ams", 0usize), ("ums", 1)] {
            let series: Vec<plot::Series> = tiers
                .iter()
                .map(|t| plot::Series {
                    name: t.clone(),
                    points: rows
                        .iter()
                        .filter(|r| &r.tier == t)
                        .map(|r| (r.lambda, if pick == 0 { r.ams } else { r.ums }))
                        .collect(),
                })
                .collect();
            let svg = plot::line_chart(
                &format!("{stem}: {}", metric.to_uppercase()),
                "guidance scale",
                metric,
                &series,
            );
            let target = reports.join(format!("{stem}_{metric}.svg"));
            std::fs::write(&target, svg).map_err(|e| Failure::Stage(Error::Io {
                path: target.clone(),
                source: e,
            }))?;
            written += 1;
        }
    }
    Ok(written)
}

fn run(cli: &Cli) -> Result<(), Failure> {
    let exec = match cli.threads {
        Some(0) => return Err(Failure::Config("--threads must be at least 1".into())),
        Some(1) => Exec::Sequential,
        Some(n) => {
            sidelab::exec::init_threads(n);
            Exec::Parallel
        }
        None => Exec::Parallel,
    };
    match &cli.command {
        Command::VerifyTheory {
            samples,
            theory_seed,
        } => {
            let checks = sidelab::gaussian::verify_identities(*theory_seed, *samples, exec)?;
            println!(
                "{:<40} {:>14} {:>14} {:>10} {:>9}  result",
                "identity", "observed", "expected", "error", "tol"
            );
            for c in &checks {
                println!(
                    "{:<40} {:>14.6e} {:>14.6e} {:>10.2e} {:>9.1e}  {}",
                    c.name,
                    c.observed,
                    c.expected,
                    c.error,
                    c.tolerance,
                    if c.passed { "pass" } else { "FAIL" }
                );
            }
            let failed = checks.iter().filter(|c| !c.passed).count();
            if failed > 0 {
                return Err(Failure::Stage(Error::InvalidArgument(format!(
                    "{failed} identities failed"
                ))));
            }
            return Ok(());
        }
        Command::Report => {
            let dir = match &cli.out {
                Some(d) => d.clone(),
                None => load_config(cli)?.1,
            };
            let n = render_reports(&dir)?;
            println!("wrote {n} plots under {}", dir.join("reports").display());
            return Ok(());
        }
        _ => {}
    }

    let (cfg, dir) = load_config(cli)?;
    match &cli.command {
        Command::Synth => {
            let ds = Pipeline::open(cfg, &dir, exec)?.synth()?;
            println!("{} points of dimension {}", ds.data.rows(), ds.data.cols());
        }
        Command::TrainDiffusion => {
            Pipeline::open(cfg, &dir, exec)?.train_diffusion()?;
            println!("score network ready");
        }
        Command::TrainTeacher => {
            let (_, report) = Pipeline::open(cfg, &dir, exec)?.train_teacher()?;
            println!(
                "teacher accuracy {:.4}, loss {:.4}",
                report.train_accuracy, report.final_loss
            );
        }
        Command::Distill => {
            let (_, report) = Pipeline::open(cfg, &dir, exec)?.distill()?;
            println!(
                "student KL at t=1 {:.4}, agreement {:.4}, within threshold {}",
                report.holdout_kl_t1, report.holdout_agreement_t1, report.within_threshold
            );
        }
        Command::Extract(a) => {
            let mut cfg = cfg;
            if let Some(s) = a.steps {
                cfg.sampler.steps = s;
            }
            if let Some(n) = a.n {
                cfg.extraction.n_generated = n;
            }
            let mut p = Pipeline::open(cfg, &dir, exec)?;
            let batch = match a.class {
                None => p.extract(a.variant, a.lambda)?,
                Some(class) => {
                    let spec = sidelab::diffusion::GuidanceSpec {
                        target_label: class,
                        lambda: a.lambda,
                        ..p.sampler_defaults()
                    };
                    let n = p.config().extraction.n_generated;
                    let seed = sidelab::rng::derive_seed(p.config().seed, &format!("extract/{class}"));
                    let batch = p.sample_class(a.variant, &spec, n, seed)?;
                    let path = dir.join(format!(
                        "samples/{}_l{}_c{class}.bin",
                        a.variant.key(),
                        lambda_key(a.lambda)
                    ));
                    batch.save(&path)?;
                    batch
                }
            };
            println!("{} samples at lambda {}", batch.samples.rows(), lambda_key(a.lambda));
        }
        Command::Evaluate { variant, matches } => {
            let lambdas = cfg.extraction.lambda_set.clone();
            if *variant == Variant::Side {
                let (summary, _) = run_side(&cfg, &dir, exec)?;
                print_reports(&summary.reports);
                if *matches {
                    write_matches_csv(&dir.join("reports/side_matches.csv"), &summary.reports)?;
                }
                for t in &summary.averaged {
                    println!(
                        "averaged {} tier: ams {:.4} (se {:.4}), ums {:.4}",
                        t.tier, t.ams.estimate, t.ams.std_error, t.ums
                    );
                }
            } else {
                let lambdas: Vec<f64> = if *variant == Variant::Random { vec![0.0] } else { lambdas };
                let reports = Pipeline::open(cfg, &dir, exec)?.evaluate(*variant, &lambdas)?;
                let stem = dir.join(format!("reports/{}", variant.key()));
                write_report_csv(&stem.with_extension("csv"), &reports)?;
                if *matches {
                    write_matches_csv(&dir.join(format!("reports/{}_matches.csv", variant.key())), &reports)?;
                }
                print_reports(&reports);
            }
        }
        Command::Sweep { variant, lambdas } => {
            let lambdas = parse_lambdas(lambdas)?;
            let table = sweep_lambda(&cfg, &dir, exec, *variant, &lambdas)?;
            print_reports(&table.reports);
            for a in &table.argmax {
                println!("argmax {} {}: lambda {} ({:.4})", a.tier, a.metric, lambda_key(a.lambda), a.value);
            }
        }
        Command::Compare => {
            let table = compare_variants(&cfg, &dir, exec)?;
            println!("{:>8} {:>6} {:>10} {:>10} {:>10}", "variant", "tier", "ams", "se", "ums");
            for r in &table.rows {
                println!(
                    "{:>8} {:>6} {:>10.4} {:>10.4} {:>10.4}",
                    r.variant.label(),
                    r.tier,
                    r.ams.estimate,
                    r.ams.std_error,
                    r.ums
                );
            }
            for (against, list) in [("Random", &table.side_vs_random), ("TI", &table.side_vs_ti)] {
                for (tier, m) in list {
                    println!(
                        "SIDE - {against} [{tier}]: {:+.4} vs band {:.4} -> {}",
                        m.difference,
                        m.band,
                        if m.exceeds { "exceeds" } else { "within noise" }
                    );
                }
            }
        }
        Command::VerifyTheory { .. } | Command::Report => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("config error: {msg}");
            ExitCode::from(2)
        }
        Err(Failure::Stage(e)) => {
            eprintln!("error: {e}");
            let mut src = std::error::Error::source(&e);
            while let Some(s) = src {
                eprintln!("  caused by: {s}");
                src = s.source();
            }
            ExitCode::from(3)
        }
    }
}
