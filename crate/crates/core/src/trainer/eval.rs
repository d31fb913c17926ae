//! Few-shot accuracy over sampled test tasks.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::episodes::{sample_episode, Dataset, Split};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::Architecture;
use crate::objectives::predictive_distribution;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub split: Split,
    pub num_tasks: usize,
    pub ways: usize,
    pub shots: usize,
    pub queries: usize,
    /// Weight samples averaged in the predictive.
    pub samples: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: Split,
    pub num_tasks: usize,
    pub mean_accuracy: f64,
    /// Half-width of the normal 95% interval, `1.96 * sd / sqrt(n)` with the
    /// sample standard deviation.
    pub ci95: f64,
    pub per_task: Vec<f64>,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Fraction of queries whose most probable class matches the label.
pub fn accuracy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    if probs.rows() != labels.len() || labels.is_empty() {
        return Err(Error::shape(
            "accuracy",
            format!("{} rows for {} labels", probs.rows(), labels.len()),
        ));
    }
    let hits = labels
        .iter()
        .enumerate()
        .filter(|&(i, &y)| argmax(probs.row(i)) == y)
        .count();
    Ok(hits as f64 / labels.len() as f64)
}

/// Neumaier-compensated sum.
fn compensated_sum(values: impl Iterator<Item = f64>) -> f64 {
    let (mut sum, mut carry) = (0.0f64, 0.0);
    for v in values {
        let t = sum + v;
        carry += if sum.abs() >= v.abs() {
            (sum - t) + v
        } else {
            (v - t) + sum
        };
        sum = t;
    }
    sum + carry
}

/// Mean and 95% half-width of per-task accuracies. The mean is compensated
/// so that identical accuracies average to exactly that value.
pub fn summarize(per_task: &[f64]) -> (f64, f64) {
    let n = per_task.len() as f64;
    let mean = compensated_sum(per_task.iter().copied()) / n;
    if per_task.len() < 2 {
        return (mean, 0.0);
    }
    let var = per_task.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Task `t` is drawn, and its weights sampled, from a stream keyed by
/// `(seed, t)`, so the report does not depend on the execution strategy.
pub fn evaluate(
    arch: &Architecture,
    params: &[Tensor],
    dataset: &Dataset,
    spec: &EvalSpec,
    exec: Execution,
) -> Result<EvalReport> {
    if spec.num_tasks == 0 || spec.samples == 0 {
        return Err(Error::contract(
            "evaluation needs at least one task and one weight sample",
        ));
    }
    if spec.ways != arch.ways() {
        return Err(Error::contract(format!(
            "model is {}-way, evaluation asks for {}",
            arch.ways(),
            spec.ways
        )));
    }
    arch.check_params(params)?;
    let per_task = exec.try_map(spec.num_tasks, |t| {
        let mut r = rng::stream(spec.seed, &[t as u64]);
        let ep = sample_episode(
            dataset,
            spec.split,
            spec.ways,
            spec.shots,
            spec.queries,
            &mut r,
        )?;
        let (probs, _) = predictive_distribution(arch, params, &ep, spec.samples, &mut r)?;
        accuracy(&probs, &ep.query_y)
    })?;
    let (mean_accuracy, ci95) = summarize(&per_task);
    Ok(EvalReport {
        split: spec.split,
        num_tasks: spec.num_tasks,
        mean_accuracy,
        ci95,
        per_task,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn argmax_prefers_lowest_on_ties() {
        assert_eq!(argmax(&[0.2, 0.4, 0.4]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        assert_eq!(argmax(&[0.1, 0.2, 0.7]), 2);
    }

    #[test]
    fn accuracy_counts_hits() {
        let p = Tensor::from_rows(&[vec![0.9, 0.1], vec![0.3, 0.7], vec![0.6, 0.4]]).unwrap();
        assert_eq!(accuracy(&p, &[0, 1, 1]).unwrap(), 2.0 / 3.0);
    }

    #[test]
    fn summary_uses_sample_deviation() {
        let (m, ci) = summarize(&[0.0, 1.0]);
        assert_eq!(m, 0.5);
        let sd = 0.5f64.sqrt();
        assert!((ci - 1.96 * sd / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(summarize(&[0.4]), (0.4, 0.0));
        assert_eq!(summarize(&[0.2; 600]), (0.2, 0.0));
    }
}
