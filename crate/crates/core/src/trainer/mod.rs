//! Episodic training loop, evaluation and diagnostics.

mod adam;
mod checkpoint;
mod diagnostics;
mod eval;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use checkpoint::{Checkpoint, NamedTensor};
pub use diagnostics::{
    collapse_diagnostics, latents_csv, mean_posterior_variance, posterior_dispersion,
    CollapseReport, CollapseSpec, LatentSample,
};
pub use eval::{accuracy, argmax, evaluate, summarize, EvalReport, EvalSpec};

use crate::config::TrainConfig;
use crate::episodes::{sample_episode, Dataset, Split};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::Architecture;
use crate::objectives::batch_loss;
use crate::rng;
use crate::schedules::Schedule;

const INIT_TAG: u64 = 1;
const EPISODE_TAG: u64 = 2;
const NOISE_TAG: u64 = 3;
const VAL_TAG: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub step: u64,
    pub beta: f64,
    pub nll: f64,
    pub reg: f64,
    pub total: f64,
    /// Meta-val accuracy, present on evaluation steps.
    pub val_accuracy: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub metrics: Vec<MetricsRow>,
}

/// `step,beta,nll,reg,total,val_accuracy`; the last column is empty on
/// steps without validation.
pub fn metrics_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from("step,beta,nll,reg,total,val_accuracy\n");
    for r in rows {
        let _ = write!(
            out,
            "{},{},{},{},{},",
            r.step, r.beta, r.nll, r.reg, r.total
        );
        if let Some(a) = r.val_accuracy {
            let _ = write!(out, "{a}");
        }
        out.push('\n');
    }
    out
}

/// Seed under which step `step` draws its episodes and weight noise.
pub fn batch_seed(run_seed: u64, step: u64) -> u64 {
    rng::derive_seed(run_seed, &[NOISE_TAG, step])
}

/// Runs `config.optimizer.steps` Adam updates on meta-train episodes.
///
/// `observe` sees every metrics row as it is produced. A non-finite loss or
/// gradient aborts the run with an error naming the step and batch seed.
pub fn train<F: FnMut(&MetricsRow)>(
    config: &TrainConfig,
    dataset: &Dataset,
    exec: Execution,
    mut observe: F,
) -> Result<TrainOutcome> {
    config.validate()?;
    config.check_dataset(dataset)?;
    let ep = &config.episode;
    let opt = &config.optimizer;
    let arch = Architecture::new(config.model.clone(), ep.ways)?;
    let schedule = Schedule::new(config.schedule.clone())?;
    let mut params = arch.init_params(&mut rng::stream(config.seed, &[INIT_TAG]));
    let mut adam = AdamState::new(&params, opt.lr);
    let val_spec = EvalSpec {
        split: Split::MetaVal,
        num_tasks: opt.eval_tasks,
        ways: ep.ways,
        shots: ep.shots,
        queries: ep.queries,
        samples: config.objective.samples,
        seed: rng::derive_seed(config.seed, &[VAL_TAG]),
    };
    let validate = opt.eval_interval > 0 && !dataset.classes_in(Split::MetaVal).is_empty();

    let mut metrics = Vec::with_capacity(opt.steps as usize);
    for step in 0..opt.steps {
        let mut r = rng::stream(config.seed, &[EPISODE_TAG, step]);
        let episodes = (0..opt.tasks_per_batch)
            .map(|_| {
                sample_episode(
                    dataset,
                    Split::MetaTrain,
                    ep.ways,
                    ep.shots,
                    ep.queries,
                    &mut r,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let beta = schedule.beta_at(step);
        let seed = batch_seed(config.seed, step);
        let abort = |detail: String| {
            Error::Evaluation(format!("step {step} (batch seed {seed}): {detail}"))
        };
        let (loss, grads) = batch_loss(
            &arch,
            &params,
            &episodes,
            beta,
            &config.objective,
            seed,
            exec,
            true,
        )
        .map_err(|e| abort(e.to_string()))?;
        let grads = grads.expect("gradients requested");
        if !grads.max_abs().is_finite() {
            return Err(abort("non-finite gradient".into()));
        }
        adam_step(&mut params, &grads, &mut adam)?;

        let val_accuracy = if validate && (step + 1) % opt.eval_interval == 0 {
            Some(evaluate(&arch, &params, dataset, &val_spec, exec)?.mean_accuracy)
        } else {
            None
        };
        let row = MetricsRow {
            step,
            beta,
            nll: loss.nll,
            reg: loss.reg,
            total: loss.total,
            val_accuracy,
        };
        observe(&row);
        metrics.push(row);
    }
    let checkpoint = Checkpoint::new(config.clone(), opt.steps, &arch, &params)?;
    Ok(TrainOutcome {
        checkpoint,
        metrics,
    })
}
