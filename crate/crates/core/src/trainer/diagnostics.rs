//! Posterior-collapse diagnostics.
//!
//! One class set is fixed and many tasks are drawn on it with fresh support
//! examples. If the amortized posterior ignores its input, the per-class
//! means barely move between tasks and the variances shrink toward the
//! floor; both statistics are reported.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor};
use crate::episodes::{sample_with_classes, Dataset, Split};
use crate::error::{Error, Result};
use crate::model::{sample_weights_value, Architecture, GaussianPosterior};
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseReport {
    pub split: Split,
    pub num_tasks: usize,
    /// Dataset class ids shared by every task.
    pub classes: Vec<usize>,
    pub mean_posterior_variance: f64,
    pub posterior_dispersion: f64,
    /// Where the latent samples were written, if anywhere.
    pub latent_path: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LatentSample {
    pub task: usize,
    pub class: usize,
    pub sample: usize,
    pub values: Vec<f64>,
}

/// Mean of every variance entry over tasks, classes and dimensions.
pub fn mean_posterior_variance(posteriors: &[GaussianPosterior]) -> f64 {
    let (sum, n) = posteriors.iter().fold((0.0, 0usize), |(s, n), p| {
        (s + p.sigma2.iter().sum::<f64>(), n + p.sigma2.len())
    });
    if n == 0 {
        0.0
    } else {
        sum / n as f64
    }
}

/// Mean over classes of the mean Euclidean distance between that class's
/// posterior means across all task pairs. Zero with fewer than two tasks.
pub fn posterior_dispersion(posteriors: &[GaussianPosterior]) -> f64 {
    let Some(first) = posteriors.first() else {
        return 0.0;
    };
    let t = posteriors.len();
    if t < 2 {
        return 0.0;
    }
    let mut total = 0.0;
    for c in 0..first.ways {
        let mut sum = 0.0;
        for a in 0..t {
            for b in a + 1..t {
                let (x, y) = (posteriors[a].class_mu(c), posteriors[b].class_mu(c));
                sum += x
                    .iter()
                    .zip(y)
                    .map(|(u, v)| (u - v).powi(2))
                    .sum::<f64>()
                    .sqrt();
            }
        }
        total += sum / (t * (t - 1) / 2) as f64;
    }
    total / first.ways as f64
}

/// `task,class,sample,dim_0,...` rows.
pub fn latents_csv(rows: &[LatentSample]) -> String {
    let dim = rows.first().map_or(0, |r| r.values.len());
    let mut out = String::from("task,class,sample");
    for d in 0..dim {
        let _ = write!(out, ",dim_{d}");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{}", r.task, r.class, r.sample);
        for v in &r.values {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollapseSpec {
    pub split: Split,
    pub num_tasks: usize,
    pub shots: usize,
    pub queries: usize,
    /// Latent draws per task written to the dump.
    pub samples: usize,
    pub seed: u64,
}

pub fn collapse_diagnostics(
    arch: &Architecture,
    params: &[Tensor],
    dataset: &Dataset,
    spec: &CollapseSpec,
) -> Result<(CollapseReport, Vec<LatentSample>)> {
    if spec.num_tasks == 0 {
        return Err(Error::contract("need at least one task"));
    }
    let ways = arch.ways();
    let pool = dataset.classes_in(spec.split);
    if pool.len() < ways {
        return Err(Error::contract(format!(
            "{:?} has {} classes, {ways} needed",
            spec.split,
            pool.len()
        )));
    }
    let mut pick = rng::stream(spec.seed, &[u64::MAX]);
    let classes: Vec<usize> = rand::seq::index::sample(&mut pick, pool.len(), ways)
        .into_iter()
        .map(|i| pool[i])
        .collect();

    let mut posteriors = Vec::with_capacity(spec.num_tasks);
    let mut latents = Vec::new();
    for task in 0..spec.num_tasks {
        let mut r = rng::stream(spec.seed, &[task as u64]);
        let ep = sample_with_classes(dataset, &classes, spec.shots, spec.queries, &mut r)?;
        let mut g = Graph::new();
        let model = arch.bind(&mut g, params)?;
        let (post, _) = model.context_posterior(&mut g, &ep)?;
        let post = post.to_value(&g);
        for (sample, phi) in sample_weights_value(&post, spec.samples, &mut r)?
            .into_iter()
            .enumerate()
        {
            for class in 0..ways {
                latents.push(LatentSample {
                    task,
                    class,
                    sample,
                    values: phi.row(class).to_vec(),
                });
            }
        }
        posteriors.push(post);
    }
    let report = CollapseReport {
        split: spec.split,
        num_tasks: spec.num_tasks,
        classes,
        mean_posterior_variance: mean_posterior_variance(&posteriors),
        posterior_dispersion: posterior_dispersion(&posteriors),
        latent_path: None,
    };
    Ok((report, latents))
}
