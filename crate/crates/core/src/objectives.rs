//! Monte-Carlo predictive likelihood and the β-weighted regularized
//! objectives built on it.
//!
//! For one episode with query set `Q`, the data term is
//! `-sum_j log( (1/L) sum_l softmax(decode(phi_l, h(x_j)))[y_j] )` with
//! `phi_l` drawn from the context posterior. The regularizer compares the
//! context posterior with a posterior that also sees the unlabeled query
//! features, either by closed-form KL or by MMD² over reparameterized draws.
//! A batch loss is `nll + beta * reg` where `nll` averages over every query
//! point in the batch and `reg` averages over tasks.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Graph, Tensor, Var};
use crate::divergences::{self, Bandwidth, KernelConfig, MmdEstimatorKind};
use crate::episodes::Episode;
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::model::{sample_weights, Architecture, Bound, GaussianPosterior, PosteriorVars};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RegularizerMode {
    None,
    Kl,
    Mmd,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObjectiveConfig {
    #[serde(default = "defaults::mode")]
    pub mode: RegularizerMode,
    /// Monte-Carlo weight samples `L` per task.
    #[serde(default = "defaults::samples")]
    pub samples: usize,
    /// Draws per side for the MMD regularizer.
    #[serde(default = "defaults::mmd_samples")]
    pub mmd_samples: usize,
    #[serde(default)]
    pub bandwidth: Bandwidth,
    #[serde(default)]
    pub estimator: MmdEstimatorKind,
    /// Weight of the pooled query features in the query-conditioned posterior.
    #[serde(default = "defaults::query_mix")]
    pub query_mix: f64,
}

mod defaults {
    use super::RegularizerMode;
    pub fn mode() -> RegularizerMode {
        RegularizerMode::Mmd
    }
    pub fn samples() -> usize {
        10
    }
    pub fn mmd_samples() -> usize {
        32
    }
    pub fn query_mix() -> f64 {
        0.5
    }
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            mode: defaults::mode(),
            samples: defaults::samples(),
            mmd_samples: defaults::mmd_samples(),
            bandwidth: Bandwidth::Median,
            estimator: MmdEstimatorKind::Biased,
            query_mix: defaults::query_mix(),
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples == 0 {
            return Err(Error::config("objective.samples must be at least 1"));
        }
        if self.mode == RegularizerMode::Mmd && self.mmd_samples < 2 {
            return Err(Error::config(
                "objective.mmd_samples must be at least 2 in mmd mode",
            ));
        }
        if !(0.0..=1.0).contains(&self.query_mix) {
            return Err(Error::config("objective.query_mix must lie in [0, 1]"));
        }
        KernelConfig {
            bandwidth: self.bandwidth,
        }
        .validate()
    }

    pub fn kernel(&self) -> KernelConfig {
        KernelConfig {
            bandwidth: self.bandwidth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskLoss {
    pub task: usize,
    /// Mean negative log predictive over the task's queries.
    pub nll: f64,
    pub reg: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub nll: f64,
    pub reg: f64,
    pub beta: f64,
    /// Always `nll + beta * reg`.
    pub total: f64,
    pub per_task: Vec<TaskLoss>,
}

/// Log of the Monte-Carlo predictive for each query, `[Q, 1]`.
///
/// `logits[l]` holds the `[Q, C]` logits under weight sample `l`. The result
/// is `logsumexp_l(log_softmax(logits_l)[y]) - log L`.
pub fn log_predictive(g: &mut Graph, logits: &[Var], labels: &[usize]) -> Result<Var> {
    let first = *logits
        .first()
        .ok_or_else(|| Error::contract("need at least one weight sample"))?;
    let (q, c) = match g.value(first).shape() {
        &[q, c] => (q, c),
        s => {
            return Err(Error::shape(
                "log_predictive",
                format!("expected [Q, C] logits, got {s:?}"),
            ))
        }
    };
    if labels.len() != q {
        return Err(Error::shape(
            "log_predictive",
            format!("{} labels for {q} queries", labels.len()),
        ));
    }
    if let Some(&y) = labels.iter().find(|&&y| y >= c) {
        return Err(Error::contract(format!("class index {y} outside 0..{c}")));
    }
    let mut onehot = Tensor::zeros(&[q, c]);
    for (i, &y) in labels.iter().enumerate() {
        onehot.data_mut()[i * c + y] = 1.0;
    }
    let onehot = g.constant(onehot);
    let per_sample = logits
        .iter()
        .map(|&z| {
            let picked = g.mul(z, onehot)?;
            let picked = g.sum_last(picked)?;
            let lse = g.log_sum_exp(z)?;
            g.sub(picked, lse)
        })
        .collect::<Result<Vec<_>>>()?;
    let stacked = g.concat_last(&per_sample)?;
    let lse = g.log_sum_exp(stacked)?;
    let log_l = g.constant(Tensor::full(&[q, 1], (logits.len() as f64).ln()));
    g.sub(lse, log_l)
}

/// Predictive log-probability of `labels` for query features `h_query`
/// (`[Q, d]`) under weight samples `phis` (each `[C, d]`). Returns `[Q, 1]`.
pub fn predictive_log_prob(
    g: &mut Graph,
    model: &Bound<'_>,
    phis: &[Var],
    h_query: Var,
    labels: &[usize],
) -> Result<Var> {
    let logits = phis
        .iter()
        .map(|&phi| model.decode_logits(g, phi, h_query))
        .collect::<Result<Vec<_>>>()?;
    log_predictive(g, &logits, labels)
}

/// `[S, C*d]` matrix of reparameterized draws, one flattened posterior
/// sample per row, using the given standard-normal noise.
fn draw_rows(g: &mut Graph, post: &PosteriorVars, eps: &Tensor) -> Result<Var> {
    let s = eps.rows();
    let flat = g.value(post.mu).numel();
    let mu = g.reshape(post.mu, &[1, flat])?;
    let log_var = g.log(post.sigma2)?;
    let half = g.scale(log_var, 0.5)?;
    let std = g.exp(half)?;
    let std = g.reshape(std, &[1, flat])?;
    let ones = g.constant(Tensor::full(&[s, 1], 1.0));
    let mu = g.matmul(ones, mu)?;
    let std = g.matmul(ones, std)?;
    let eps = g.constant(eps.clone());
    let noise = g.mul(std, eps)?;
    g.add(mu, noise)
}

/// Graph outputs for one episode.
#[derive(Debug, Clone)]
pub struct EpisodeTerms {
    /// Scalar `-sum_j log q(y_j | x_j)` over the episode's queries.
    pub nll_sum: Var,
    pub num_queries: usize,
    /// Scalar regularizer, absent in mode `none`.
    pub reg: Option<Var>,
    /// Bandwidth used by the MMD regularizer.
    pub bandwidth: Option<f64>,
    /// Context and query-conditioned posteriors.
    pub context: PosteriorVars,
    pub conditioned: Option<PosteriorVars>,
    /// MMD draws `(conditioned, context)`, each `[S, C*d]`.
    pub mmd_draws: Option<(Var, Var)>,
}

/// Builds the data term and (unless `mode` is `none`) the regularizer for
/// one episode. Noise for the predictive is drawn from `rng` before any
/// regularizer noise, so the data term does not depend on the mode.
pub fn episode_terms<R: Rng + ?Sized>(
    g: &mut Graph,
    model: &Bound<'_>,
    episode: &Episode,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<EpisodeTerms> {
    if episode.ways != model.arch().ways() {
        return Err(Error::contract(format!(
            "episode has {} ways, model expects {}",
            episode.ways,
            model.arch().ways()
        )));
    }
    let sx = g.constant(episode.support_x.clone());
    let qx = g.constant(episode.query_x.clone());
    let hs = model.encode(g, sx)?;
    let hq = model.encode(g, qx)?;
    let context_rep = model.aggregate_context(g, hs, &episode.support_y)?;
    let context = model.amortize(g, context_rep)?;

    let phis = sample_weights(g, &context, cfg.samples, rng)?;
    let logp = predictive_log_prob(g, model, &phis, hq, &episode.query_y)?;
    let total = g.sum(logp)?;
    let nll_sum = g.scale(total, -1.0)?;

    let mut terms = EpisodeTerms {
        nll_sum,
        num_queries: episode.num_queries(),
        reg: None,
        bandwidth: None,
        context,
        conditioned: None,
        mmd_draws: None,
    };
    if cfg.mode == RegularizerMode::None {
        return Ok(terms);
    }

    let full_rep = model.aggregate_with_queries(g, context_rep, hq, cfg.query_mix)?;
    let conditioned = model.amortize(g, full_rep)?;
    terms.conditioned = Some(conditioned);
    let reg = match cfg.mode {
        RegularizerMode::Kl => divergences::gaussian_kl(g, &conditioned, &context)?,
        RegularizerMode::Mmd => {
            let flat = g.value(context.mu).numel();
            let eps: Vec<f64> = (0..cfg.mmd_samples * flat)
                .map(|_| StandardNormal.sample(rng))
                .collect();
            let eps = Tensor::new(vec![cfg.mmd_samples, flat], eps)?;
            let x = draw_rows(g, &conditioned, &eps)?;
            let y = draw_rows(g, &context, &eps)?;
            let (mmd, sigma) =
                divergences::mmd2_with_kernel(g, x, y, &cfg.kernel(), cfg.estimator)?;
            terms.bandwidth = Some(sigma);
            terms.mmd_draws = Some((x, y));
            mmd
        }
        RegularizerMode::None => unreachable!(),
    };
    terms.reg = Some(reg);
    Ok(terms)
}

/// Regularizer value for a single episode. Mode `none` is a contract error:
/// callers skip the term instead.
pub fn regularizer<R: Rng + ?Sized>(
    arch: &Architecture,
    params: &[Tensor],
    episode: &Episode,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<f64> {
    if cfg.mode == RegularizerMode::None {
        return Err(Error::contract("regularizer requested with mode none"));
    }
    let mut g = Graph::new();
    let model = arch.bind(&mut g, params)?;
    let terms = episode_terms(&mut g, &model, episode, cfg, rng)?;
    Ok(g.value(terms.reg.expect("regularizer present")).data()[0])
}

struct TaskOutcome {
    nll_sum: f64,
    queries: usize,
    reg: f64,
    grads: Option<Gradients>,
}

fn task_outcome(
    arch: &Architecture,
    params: &[Tensor],
    episode: &Episode,
    cfg: &ObjectiveConfig,
    seed: u64,
    weights: (f64, f64),
    with_grad: bool,
) -> Result<TaskOutcome> {
    let mut g = Graph::new();
    let model = arch.bind(&mut g, params)?;
    let mut r = rng::stream(seed, &[]);
    let terms = episode_terms(&mut g, &model, episode, cfg, &mut r)?;
    let nll_sum = g.value(terms.nll_sum).data()[0];
    let reg = terms.reg.map_or(0.0, |v| g.value(v).data()[0]);
    if !nll_sum.is_finite() || !reg.is_finite() {
        return Err(Error::Evaluation(format!(
            "non-finite task loss (nll {nll_sum}, reg {reg}) for stream seed {seed}"
        )));
    }
    let grads = if with_grad {
        let (nll_w, reg_w) = weights;
        let mut loss = g.scale(terms.nll_sum, nll_w)?;
        if let Some(reg) = terms.reg {
            let weighted = g.scale(reg, reg_w)?;
            loss = g.add(loss, weighted)?;
        }
        Some(g.backward(loss)?)
    } else {
        None
    };
    Ok(TaskOutcome {
        nll_sum,
        queries: terms.num_queries,
        reg,
        grads,
    })
}

/// Loss (and optionally its gradient) over a batch of episodes.
///
/// Each episode uses its own noise stream derived from `seed` and its batch
/// position; per-task results are reduced in batch order, so the sequential
/// and parallel strategies agree bitwise.
#[allow(clippy::too_many_arguments)]
pub fn batch_loss(
    arch: &Architecture,
    params: &[Tensor],
    episodes: &[Episode],
    beta: f64,
    cfg: &ObjectiveConfig,
    seed: u64,
    exec: Execution,
    with_grad: bool,
) -> Result<(LossBreakdown, Option<Gradients>)> {
    if episodes.is_empty() {
        return Err(Error::contract("empty episode batch"));
    }
    if !(beta >= 0.0) {
        return Err(Error::contract(format!(
            "beta must be non-negative, got {beta}"
        )));
    }
    arch.check_params(params)?;
    let total_queries: usize = episodes.iter().map(Episode::num_queries).sum();
    let tasks = episodes.len();
    let weights = (1.0 / total_queries as f64, beta / tasks as f64);
    let outcomes = exec.try_map(tasks, |t| {
        task_outcome(
            arch,
            params,
            &episodes[t],
            cfg,
            rng::derive_seed(seed, &[t as u64]),
            weights,
            with_grad,
        )
    })?;

    let mut nll_sum = 0.0;
    let mut reg_sum = 0.0;
    let mut grads = with_grad.then(Gradients::default);
    let mut per_task = Vec::with_capacity(tasks);
    for (t, o) in outcomes.into_iter().enumerate() {
        nll_sum += o.nll_sum;
        reg_sum += o.reg;
        per_task.push(TaskLoss {
            task: t,
            nll: o.nll_sum / o.queries as f64,
            reg: o.reg,
        });
        if let (Some(acc), Some(g)) = (grads.as_mut(), o.grads.as_ref()) {
            acc.accumulate(g);
        }
    }
    let nll = nll_sum / total_queries as f64;
    let reg = if cfg.mode == RegularizerMode::None {
        0.0
    } else {
        reg_sum / tasks as f64
    };
    let breakdown = LossBreakdown {
        nll,
        reg,
        beta,
        total: nll + beta * reg,
        per_task,
    };
    Ok((breakdown, grads))
}

/// Mean negative log predictive over every query in the batch.
pub fn nll_loss<R: Rng + ?Sized>(
    arch: &Architecture,
    params: &[Tensor],
    episodes: &[Episode],
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<f64> {
    let data_only = ObjectiveConfig {
        mode: RegularizerMode::None,
        ..cfg.clone()
    };
    let seed = rng.random::<u64>();
    Ok(batch_loss(
        arch,
        params,
        episodes,
        0.0,
        &data_only,
        seed,
        Execution::default(),
        false,
    )?
    .0
    .nll)
}

/// `nll + beta * mean_task(reg)` with its breakdown and gradient.
pub fn total_loss<R: Rng + ?Sized>(
    arch: &Architecture,
    params: &[Tensor],
    episodes: &[Episode],
    beta: f64,
    cfg: &ObjectiveConfig,
    rng: &mut R,
) -> Result<(LossBreakdown, Gradients)> {
    let seed = rng.random::<u64>();
    let (b, g) = batch_loss(
        arch,
        params,
        episodes,
        beta,
        cfg,
        seed,
        Execution::default(),
        true,
    )?;
    Ok((b, g.expect("gradients requested")))
}

/// Monte-Carlo averaged class probabilities `[Q, C]` for an episode's queries.
pub fn predictive_distribution<R: Rng + ?Sized>(
    arch: &Architecture,
    params: &[Tensor],
    episode: &Episode,
    samples: usize,
    rng: &mut R,
) -> Result<(Tensor, GaussianPosterior)> {
    let mut g = Graph::new();
    let model = arch.bind(&mut g, params)?;
    let (post, _) = model.context_posterior(&mut g, episode)?;
    let qx = g.constant(episode.query_x.clone());
    let hq = model.encode(&mut g, qx)?;
    let phis = sample_weights(&mut g, &post, samples, rng)?;
    let (q, c) = (episode.num_queries(), episode.ways);
    let mut avg = vec![0.0; q * c];
    for phi in phis {
        let logits = model.decode_logits(&mut g, phi, hq)?;
        let p = g.softmax(logits)?;
        avg.iter_mut()
            .zip(g.value(p).data())
            .for_each(|(a, v)| *a += v / samples as f64);
    }
    Ok((Tensor::new(vec![q, c], avg)?, post.to_value(&g)))
}

/// Replaces a median bandwidth with the value it resolved to, so that a
/// finite-difference check sees the same stop-gradient bandwidth as the
/// analytic gradient.
pub fn freeze_bandwidth(cfg: &ObjectiveConfig, resolved: Option<f64>) -> ObjectiveConfig {
    match (cfg.bandwidth, resolved) {
        (Bandwidth::Median, Some(s)) => ObjectiveConfig {
            bandwidth: Bandwidth::Fixed(s),
            ..cfg.clone()
        },
        _ => cfg.clone(),
    }
}
