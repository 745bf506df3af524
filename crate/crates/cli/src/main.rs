use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use vitstem::diagnostics::{BoundKnobs, TokenBoundConfig};
use vitstem::train::train_on;
use vitstem_cli::config::{parse_config, ExperimentConfig};
use vitstem_cli::convergence::convergence_from_files;
use vitstem_cli::profile::{profile, ProbeSource};
use vitstem_cli::sweep::run_sweep;
use vitstem_cli::verify::{self, all_hold, Predicate, Theorem1Params, Theorem2Params};

#[derive(Parser)]
#[command(
    name = "vitstem",
    version,
    about = "Stem ablations, verifiers and diversity profiles for a tiny ViT"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Replace the config's seed list with this one seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Override the dataset descriptor (`synth:<seed>:<n>:<classes>` or `cifar10:<path>`).
    #[arg(long)]
    dataset: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every row of an experiment grid.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Worker threads; rows run in parallel, results are order-independent.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Train the single run an experiment file describes.
    Train {
        #[command(flatten)]
        run: RunArgs,
    },
    #[command(subcommand)]
    Verify(VerifyCommand),
    /// Per-layer token cosine similarity of saved models on one batch.
    Profile {
        #[arg(long = "checkpoint", required = true)]
        checkpoints: Vec<PathBuf>,
        /// Dataset whose first validation images form the batch.
        #[arg(long, conflicts_with = "constant")]
        dataset: Option<String>,
        /// Use constant images with this pixel value instead.
        #[arg(long)]
        constant: Option<f64>,
        #[arg(long, default_value_t = 32)]
        batch: usize,
        #[arg(long, default_value = "profile")]
        out: PathBuf,
    },
    /// Accuracy-at-epoch table across run reports.
    Convergence {
        #[arg(required = true, num_args = 2..)]
        reports: Vec<PathBuf>,
        #[arg(long, value_delimiter = ',', default_values_t = [5usize, 20])]
        epochs: Vec<usize>,
        /// Also write the table to this CSV file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Subcommand)]
enum VerifyCommand {
    /// Rescaling invariance and the penalty inequality on random instances.
    Theorem1 {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 1000)]
        penalty_instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "verify")]
        out: PathBuf,
    },
    /// Token-matrix norm bounds and moment oracle.
    Theorem2 {
        /// `uniform:<half_width>` or `gaussian:<std>`.
        #[arg(long, default_value = "uniform:1")]
        dist: String,
        #[arg(long, default_value_t = 0.0, allow_negative_numbers = true)]
        alpha: f64,
        #[arg(long, default_value_t = 1.0)]
        beta: f64,
        #[arg(long, default_value_t = 50)]
        n: usize,
        #[arg(long, default_value_t = 256)]
        d: usize,
        #[arg(long, default_value_t = 0.5)]
        gamma: f64,
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[arg(long, default_value_t = 200_000)]
        samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "verify")]
        out: PathBuf,
    },
    /// Cosine-similarity bound for one matrix read from a text file.
    Bounds {
        #[arg(long)]
        matrix: PathBuf,
        #[arg(long, default_value = "verify")]
        out: PathBuf,
    },
}

fn load_run_config(a: &RunArgs) -> Result<ExperimentConfig> {
    let mut cfg = parse_config(&a.config)?;
    if let Some(s) = a.seed {
        cfg.seeds = vec![s];
    }
    if let Some(o) = &a.out {
        cfg.out_dir = o.clone();
    }
    if let Some(d) = &a.dataset {
        cfg.train.dataset = d.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_json<T: Serialize>(dir: &Path, name: &str, value: &T) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join(name);
    std::fs::write(&path, serde_json::to_string_pretty(value)?)?;
    Ok(path)
}

fn report_predicates(ps: &[Predicate]) -> bool {
    for p in ps {
        println!("{} {}: {}", if p.holds { "ok  " } else { "FAIL" }, p.name, p.detail);
    }
    all_hold(ps)
}

/// `Ok(true)` when everything requested succeeded.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Sweep { run, jobs } => {
            let cfg = load_run_config(&run)?;
            let out = run_sweep(&cfg, jobs)?;
            let s = &out.summary;
            println!(
                "{} runs ({} crashed, {} errored) → {}",
                s.runs,
                s.crashed,
                s.errored,
                out.out_dir.join("table.csv").display()
            );
            for g in &s.groups {
                let acc = g.mean_top1.map_or("crash".to_string(), |v| format!("{v:.4}"));
                println!("  {acc}  {}", g.point);
            }
            Ok(s.errored == 0)
        }
        Command::Train { run } => {
            let cfg = load_run_config(&run)?;
            let plan = cfg.plan()?;
            if plan.len() != 1 {
                bail!("the config plans {} runs; use `sweep` for grids", plan.len());
            }
            let spec = &plan[0];
            let ds = vitstem::train::load_dataset(&spec.train.dataset)?;
            let (model, report) = train_on(&ds, &spec.model, &spec.train)?;
            let path = write_json(&cfg.out_dir, "report.json", &report)?;
            model.save(&cfg.out_dir.join("model.json"))?;
            match report.final_top1 {
                Some(v) => println!("final top-1 {v:.4} → {}", path.display()),
                None => println!(
                    "diverged at step {:?}: {} → {}",
                    report.diverged_step,
                    report.divergence_reason.as_deref().unwrap_or("?"),
                    path.display()
                ),
            }
            Ok(true)
        }
        Command::Verify(v) => match v {
            VerifyCommand::Theorem1 {
                instances,
                penalty_instances,
                seed,
                out,
            } => {
                let rep = verify::theorem1(&Theorem1Params {
                    rescaling_instances: instances,
                    penalty_instances,
                    seed,
                    ..Default::default()
                })?;
                write_json(&out, "theorem1.json", &rep)?;
                Ok(report_predicates(&rep.predicates))
            }
            VerifyCommand::Theorem2 {
                dist,
                alpha,
                beta,
                n,
                d,
                gamma,
                trials,
                samples,
                seed,
                out,
            } => {
                let rep = verify::theorem2(&Theorem2Params {
                    bounds: TokenBoundConfig {
                        dist: verify::parse_dist(&dist)?,
                        alpha,
                        beta,
                        n,
                        d,
                        gamma,
                        trials,
                        seed,
                        knobs: BoundKnobs::default(),
                    },
                    moment_samples: samples,
                })?;
                write_json(&out, "theorem2.json", &rep)?;
                Ok(report_predicates(&rep.predicates))
            }
            VerifyCommand::Bounds { matrix, out } => {
                let rep = verify::bounds(&matrix)?;
                write_json(&out, "bounds.json", &rep)?;
                Ok(report_predicates(&rep.predicates))
            }
        },
        Command::Profile {
            checkpoints,
            dataset,
            constant,
            batch,
            out,
        } => {
            let source = match (dataset, constant) {
                (Some(d), None) => ProbeSource::Dataset(d),
                (None, Some(v)) => ProbeSource::Constant(v),
                _ => bail!("give exactly one of --dataset or --constant"),
            };
            let p = profile(&checkpoints, &source, batch)?;
            p.write(&out)?;
            for s in &p.series {
                let vals: Vec<String> = s.values.iter().map(|v| format!("{v:.3}")).collect();
                println!("{}: {}", s.label, vals.join(" "));
            }
            Ok(true)
        }
        Command::Convergence { reports, epochs, out } => {
            let table = convergence_from_files(&reports, &epochs)?;
            let csv = table.to_csv()?;
            print!("{csv}");
            if let Some(path) = out {
                std::fs::write(&path, &csv).with_context(|| format!("writing {}", path.display()))?;
            }
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
