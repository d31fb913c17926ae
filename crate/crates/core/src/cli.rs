//! Command-line entry point.
//!
//! Results go to stdout (JSON) or to files; progress goes to stderr. Exit
//! status is 0 on success, 1 for usage and configuration problems, 2 when a
//! run fails.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::{finite_diff_check, Tensor};
use crate::config::{DatasetSource, TrainConfig};
use crate::episodes::{Episode, Split};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{Architecture, ModelConfig};
use crate::objectives::{episode_terms, freeze_bandwidth, ObjectiveConfig, RegularizerMode};
use crate::rng;
use crate::schedules::{Schedule, ScheduleConfig};
use crate::trainer::{
    self, collapse_diagnostics, evaluate, latents_csv, metrics_csv, Checkpoint, CollapseSpec,
    EvalSpec,
};

/// Threshold on the max relative gradient error for `gradcheck` to succeed.
pub const GRADCHECK_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Parser)]
#[command(
    name = "mca-fewshot",
    version,
    about = "Amortized Bayesian few-shot classification"
)]
struct Cli {
    /// Run per-task work on one thread.
    #[arg(long, global = true)]
    sequential: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Meta-train and write checkpoint.json and metrics.csv.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on sampled tasks and print a JSON report.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 600)]
        tasks: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Weight samples per task; defaults to the checkpoint's setting.
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Write sampled per-class latents for a fixed class set and print
    /// collapse statistics.
    DumpLatents {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 50)]
        tasks: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long)]
        samples: Option<usize>,
    },
    /// Write the β schedule as step,beta CSV.
    PreviewSchedule {
        /// A training config or a bare schedule object.
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic and finite-difference gradients on a fixed episode.
    Gradcheck {
        #[arg(long)]
        config: PathBuf,
    },
}

/// Parses `argv` (including the program name), runs the command and returns
/// the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let exec = if cli.sequential {
        Execution::Sequential
    } else {
        Execution::default()
    };
    match dispatch(cli.command, exec) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_config() {
                1
            } else {
                2
            }
        }
    }
}

fn read_input(path: &Path) -> Result<String> {
    std::fs::read_to_string(path)
        .map_err(|e| Error::config(format!("cannot read {}: {e}", path.display())))
}

fn write_output(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents)
        .map_err(|e| Error::Evaluation(format!("cannot write {}: {e}", path.display())))
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let ck: Checkpoint = serde_json::from_str(&read_input(path)?)?;
    ck.config.validate()?;
    Ok(ck)
}

fn print_json<T: Serialize>(value: &T) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(value)?);
    Ok(())
}

fn dispatch(command: Command, exec: Execution) -> Result<()> {
    match command {
        Command::Train { config, out } => {
            let mut cfg = TrainConfig::from_json(&read_input(&config)?)?;
            if let DatasetSource::Fsds { path } = &mut cfg.dataset {
                if path.is_relative() {
                    *path = config.parent().unwrap_or(Path::new(".")).join(&*path);
                }
            }
            let dataset = cfg.dataset.load(None)?;
            cfg.check_dataset(&dataset)?;
            std::fs::create_dir_all(&out)?;
            let every = (cfg.optimizer.steps / 20).max(1);
            let outcome = trainer::train(&cfg, &dataset, exec, |row| {
                if row.step % every == 0 || row.val_accuracy.is_some() {
                    let val = row
                        .val_accuracy
                        .map(|a| format!(" val_acc {a:.4}"))
                        .unwrap_or_default();
                    eprintln!(
                        "step {} beta {:.3} nll {:.4} reg {:.4}{val}",
                        row.step, row.beta, row.nll, row.reg
                    );
                }
            })?;
            write_output(&out.join("metrics.csv"), &metrics_csv(&outcome.metrics))?;
            outcome.checkpoint.save(&out.join("checkpoint.json"))?;
            eprintln!("wrote {}", out.display());
            Ok(())
        }
        Command::Eval {
            checkpoint,
            tasks,
            seed,
            split,
            samples,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let (arch, params) = ck.restore()?;
            let dataset = ck.config.dataset.load(None)?;
            let ep = &ck.config.episode;
            let spec = EvalSpec {
                split,
                num_tasks: tasks,
                ways: ep.ways,
                shots: ep.shots,
                queries: ep.queries,
                samples: samples.unwrap_or(ck.config.objective.samples),
                seed,
            };
            print_json(&evaluate(&arch, &params, &dataset, &spec, exec)?)
        }
        Command::DumpLatents {
            checkpoint,
            tasks,
            out,
            seed,
            split,
            samples,
        } => {
            let ck = load_checkpoint(&checkpoint)?;
            let (arch, params) = ck.restore()?;
            let dataset = ck.config.dataset.load(None)?;
            let spec = CollapseSpec {
                split,
                num_tasks: tasks,
                shots: ck.config.episode.shots,
                queries: ck.config.episode.queries,
                samples: samples.unwrap_or(ck.config.objective.samples),
                seed,
            };
            let (mut report, latents) = collapse_diagnostics(&arch, &params, &dataset, &spec)?;
            write_output(&out, &latents_csv(&latents))?;
            report.latent_path = Some(out.display().to_string());
            print_json(&report)
        }
        Command::PreviewSchedule { config, out } => {
            let schedule = Schedule::new(parse_schedule(&read_input(&config)?)?)?;
            write_output(&out, &schedule.to_csv())
        }
        Command::Gradcheck { config } => {
            let cfg = TrainConfig::from_json(&read_input(&config)?)?;
            let report = gradcheck(&cfg.model, &cfg.objective, cfg.seed)?;
            print_json(&report)?;
            if report.max_rel_error < GRADCHECK_TOLERANCE {
                Ok(())
            } else {
                Err(Error::Evaluation(format!(
                    "max relative error {} is above {GRADCHECK_TOLERANCE}",
                    report.max_rel_error
                )))
            }
        }
    }
}

/// Accepts a full training config (uses its `schedule`) or a bare schedule.
fn parse_schedule(text: &str) -> Result<ScheduleConfig> {
    let value: serde_json::Value = serde_json::from_str(text)?;
    if value.get("kind").is_some() {
        let cfg: ScheduleConfig = serde_json::from_value(value)?;
        cfg.validate()?;
        Ok(cfg)
    } else {
        Ok(TrainConfig::from_json(text)?.schedule)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    /// Max relative error of the data term alone.
    pub nll: f64,
    /// Max relative error of `nll + reg` with the KL regularizer.
    pub kl: f64,
    /// Same with the MMD regularizer, bandwidth held at its resolved value.
    pub mmd: f64,
    pub max_rel_error: f64,
}

/// Fixed 2-way 1-shot episode with two queries per class and inputs drawn
/// from `seed`.
pub fn gradcheck_episode(input_dim: usize, seed: u64) -> Result<Episode> {
    use rand_distr::{Distribution, StandardNormal};
    let mut r = rng::stream(seed, &[0x6C]);
    let mut row = |c: usize| -> (Vec<f64>, usize) {
        let x = (0..input_dim)
            .map(|i| {
                let z: f64 = StandardNormal.sample(&mut r);
                z + if i % 2 == c { 1.5 } else { 0.0 }
            })
            .collect();
        (x, c)
    };
    let support = vec![row(0), row(1)];
    let query = vec![row(0), row(0), row(1), row(1)];
    Episode::from_parts(support, query, 2)
}

/// Finite-difference check of the data term and both regularized totals
/// (β = 1) on [`gradcheck_episode`], with `L = 2` weight samples.
pub fn gradcheck(
    model: &ModelConfig,
    objective: &ObjectiveConfig,
    seed: u64,
) -> Result<GradcheckReport> {
    let arch = Architecture::new(model.clone(), 2)?;
    let params = arch.init_params(&mut rng::stream(seed, &[0x6D]));
    let episode = gradcheck_episode(model.input_dim, seed)?;
    let noise_seed = rng::derive_seed(seed, &[0x6E]);
    let base = ObjectiveConfig {
        samples: 2,
        ..objective.clone()
    };

    let check = |cfg: ObjectiveConfig| -> Result<f64> {
        let loss = |g: &mut crate::autodiff::Graph, vars: &[crate::autodiff::Var]| {
            let bound = arch.wrap(vars)?;
            let terms =
                episode_terms(g, &bound, &episode, &cfg, &mut rng::stream(noise_seed, &[]))?;
            let nll = g.scale(terms.nll_sum, 1.0 / terms.num_queries as f64)?;
            match terms.reg {
                Some(reg) => g.add(nll, reg),
                None => Ok(nll),
            }
        };
        finite_diff_check(loss, &params, 1e-5)
    };
    let resolved_bandwidth = |cfg: &ObjectiveConfig| -> Result<Option<f64>> {
        let mut g = crate::autodiff::Graph::new();
        let bound = arch.bind(&mut g, &params)?;
        Ok(episode_terms(
            &mut g,
            &bound,
            &episode,
            cfg,
            &mut rng::stream(noise_seed, &[]),
        )?
        .bandwidth)
    };

    let nll = check(ObjectiveConfig {
        mode: RegularizerMode::None,
        ..base.clone()
    })?;
    let kl = check(ObjectiveConfig {
        mode: RegularizerMode::Kl,
        ..base.clone()
    })?;
    let mmd_cfg = ObjectiveConfig {
        mode: RegularizerMode::Mmd,
        ..base
    };
    let mmd = check(freeze_bandwidth(&mmd_cfg, resolved_bandwidth(&mmd_cfg)?))?;
    Ok(GradcheckReport {
        nll,
        kl,
        mmd,
        max_rel_error: nll.max(kl).max(mmd),
    })
}

/// Writes a checkpoint whose parameters are all zero, so every class gets
/// the same logits and predictions fall back to chance.
pub fn zero_checkpoint(config: &TrainConfig) -> Result<Checkpoint> {
    let arch = Architecture::new(config.model.clone(), config.episode.ways)?;
    let params: Vec<Tensor> = arch.zero_params();
    Checkpoint::new(config.clone(), 0, &arch, &params)
}
