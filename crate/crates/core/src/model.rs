//! Encoder, support-set aggregation, amortized Gaussian posteriors,
//! reparameterized weight sampling and the two decoders.
//!
//! Shapes used throughout: `N` support rows, `Q` query rows, `C` ways,
//! `D` input dimension, `d` feature dimension.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, ParamId, Tensor, Var};
use crate::episodes::Episode;
use crate::error::{Error, Result};

/// Floor added to every posterior variance.
pub const SIGMA2_MIN: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecoderKind {
    /// Inner product `phi_c . h`.
    Linear,
    /// Shared MLP on `concat(phi_c, h)` producing one logit per class.
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    /// Pool encoder features per class.
    Prototype,
    /// Pool `r(concat(h, onehot(y)))` per class.
    LabelledR,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Mean,
    Sum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "defaults::input_dim")]
    pub input_dim: usize,
    #[serde(default = "defaults::encoder_widths")]
    pub encoder_widths: Vec<usize>,
    #[serde(default = "defaults::activation")]
    pub activation: Activation,
    #[serde(default = "defaults::feature_dim")]
    pub feature_dim: usize,
    #[serde(default = "defaults::decoder")]
    pub decoder: DecoderKind,
    /// Hidden widths of the MLP decoder.
    #[serde(default = "defaults::decoder_widths")]
    pub decoder_widths: Vec<usize>,
    #[serde(default = "defaults::aggregation")]
    pub aggregation: Aggregation,
    #[serde(default = "defaults::pooling")]
    pub pooling: Pooling,
    /// Hidden widths of the mean and variance heads (empty: affine heads).
    #[serde(default)]
    pub head_widths: Vec<usize>,
    /// Hidden widths of the label-conditioned `r` network (empty: affine).
    #[serde(default)]
    pub r_widths: Vec<usize>,
}

mod defaults {
    use super::*;
    pub fn input_dim() -> usize {
        16
    }
    pub fn encoder_widths() -> Vec<usize> {
        vec![64, 64]
    }
    pub fn activation() -> Activation {
        Activation::Tanh
    }
    pub fn feature_dim() -> usize {
        16
    }
    pub fn decoder() -> DecoderKind {
        DecoderKind::Linear
    }
    pub fn decoder_widths() -> Vec<usize> {
        vec![32]
    }
    pub fn aggregation() -> Aggregation {
        Aggregation::Prototype
    }
    pub fn pooling() -> Pooling {
        Pooling::Mean
    }
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            input_dim: defaults::input_dim(),
            encoder_widths: defaults::encoder_widths(),
            activation: defaults::activation(),
            feature_dim: defaults::feature_dim(),
            decoder: defaults::decoder(),
            decoder_widths: defaults::decoder_widths(),
            aggregation: defaults::aggregation(),
            pooling: defaults::pooling(),
            head_widths: Vec::new(),
            r_widths: Vec::new(),
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        let widths = self
            .encoder_widths
            .iter()
            .chain(&self.decoder_widths)
            .chain(&self.head_widths)
            .chain(&self.r_widths);
        if self.input_dim == 0 || self.feature_dim == 0 || widths.into_iter().any(|&w| w == 0) {
            return Err(Error::config(
                "model dimensions and layer widths must be positive",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
struct Layer {
    weight: ParamId,
    bias: ParamId,
}

/// Stack of affine layers. `hidden` applies between layers, `output` (if
/// any) after the last one.
#[derive(Debug, Clone, PartialEq)]
struct Mlp {
    layers: Vec<Layer>,
    hidden: Activation,
    output: Option<Activation>,
}

fn activate(g: &mut Graph, x: Var, act: Activation) -> Result<Var> {
    match act {
        Activation::Tanh => g.tanh(x),
        Activation::Relu => g.relu(x),
    }
}

impl Mlp {
    fn build(
        specs: &mut Vec<ParamSpec>,
        name: &str,
        sizes: &[usize],
        hidden: Activation,
        output: Option<Activation>,
    ) -> Self {
        let layers = sizes
            .windows(2)
            .enumerate()
            .map(|(i, w)| {
                specs.push(ParamSpec {
                    name: format!("{name}.{i}.weight"),
                    shape: vec![w[0], w[1]],
                });
                specs.push(ParamSpec {
                    name: format!("{name}.{i}.bias"),
                    shape: vec![w[1]],
                });
                Layer {
                    weight: specs.len() - 2,
                    bias: specs.len() - 1,
                }
            })
            .collect();
        Self {
            layers,
            hidden,
            output,
        }
    }

    fn forward(&self, g: &mut Graph, vars: &[Var], x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = g.matmul(h, vars[layer.weight])?;
            h = g.add_row(z, vars[layer.bias])?;
            let act = if i < last {
                Some(self.hidden)
            } else {
                self.output
            };
            if let Some(act) = act {
                h = activate(g, h, act)?;
            }
        }
        Ok(h)
    }
}

/// Parameter layout and wiring of the model for a fixed number of ways.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    config: ModelConfig,
    ways: usize,
    specs: Vec<ParamSpec>,
    encoder: Mlp,
    mean_head: Mlp,
    var_head: Mlp,
    r_net: Option<Mlp>,
    decoder: Option<Mlp>,
}

fn chain(input: usize, hidden: &[usize], output: usize) -> Vec<usize> {
    std::iter::once(input)
        .chain(hidden.iter().copied())
        .chain(std::iter::once(output))
        .collect()
}

impl Architecture {
    pub fn new(config: ModelConfig, ways: usize) -> Result<Self> {
        config.validate()?;
        if ways == 0 {
            return Err(Error::config("ways must be positive"));
        }
        let d = config.feature_dim;
        let act = config.activation;
        let mut specs = Vec::new();
        let encoder = Mlp::build(
            &mut specs,
            "encoder",
            &chain(config.input_dim, &config.encoder_widths, d),
            act,
            Some(act),
        );
        let mean_head = Mlp::build(
            &mut specs,
            "mean_head",
            &chain(d, &config.head_widths, d),
            act,
            None,
        );
        let var_head = Mlp::build(
            &mut specs,
            "var_head",
            &chain(d, &config.head_widths, d),
            act,
            None,
        );
        let r_net = (config.aggregation == Aggregation::LabelledR).then(|| {
            Mlp::build(
                &mut specs,
                "r_net",
                &chain(d + ways, &config.r_widths, d),
                act,
                None,
            )
        });
        let decoder = (config.decoder == DecoderKind::Mlp).then(|| {
            Mlp::build(
                &mut specs,
                "decoder",
                &chain(2 * d, &config.decoder_widths, 1),
                act,
                None,
            )
        });
        Ok(Self {
            config,
            ways,
            specs,
            encoder,
            mean_head,
            var_head,
            r_net,
            decoder,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn ways(&self) -> usize {
        self.ways
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn param_specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn check_params(&self, params: &[Tensor]) -> Result<()> {
        if params.len() != self.specs.len() {
            return Err(Error::contract(format!(
                "expected {} parameter tensors, got {}",
                self.specs.len(),
                params.len()
            )));
        }
        for (spec, t) in self.specs.iter().zip(params) {
            if t.shape() != spec.shape.as_slice() {
                return Err(Error::shape(
                    "params",
                    format!(
                        "{} has shape {:?}, expected {:?}",
                        spec.name,
                        t.shape(),
                        spec.shape
                    ),
                ));
            }
            if !t.is_finite() {
                return Err(Error::contract(format!(
                    "{} holds non-finite values",
                    spec.name
                )));
            }
        }
        Ok(())
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init_params<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<Tensor> {
        self.specs
            .iter()
            .map(|spec| match spec.shape.as_slice() {
                &[fan_in, fan_out] => {
                    let s = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    let data = (0..fan_in * fan_out)
                        .map(|_| rng.random_range(-s..=s))
                        .collect();
                    Tensor::from_parts(spec.shape.clone(), data)
                }
                shape => Tensor::zeros(shape),
            })
            .collect()
    }

    pub fn zero_params(&self) -> Vec<Tensor> {
        self.specs.iter().map(|s| Tensor::zeros(&s.shape)).collect()
    }

    /// Records every parameter as a trainable leaf.
    pub fn bind<'a>(&'a self, g: &mut Graph, params: &[Tensor]) -> Result<Bound<'a>> {
        self.check_params(params)?;
        let vars = params
            .iter()
            .enumerate()
            .map(|(i, t)| g.param(i, t.clone()))
            .collect();
        Ok(Bound { arch: self, vars })
    }

    /// Wraps variables that already live on the graph (e.g. from a gradient
    /// check closure).
    pub fn wrap<'a>(&'a self, vars: &[Var]) -> Result<Bound<'a>> {
        if vars.len() != self.specs.len() {
            return Err(Error::contract(format!(
                "expected {} parameter variables, got {}",
                self.specs.len(),
                vars.len()
            )));
        }
        Ok(Bound {
            arch: self,
            vars: vars.to_vec(),
        })
    }
}

/// Per-class diagonal Gaussian posterior over decoder weights, `[C, d]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianPosterior {
    pub ways: usize,
    pub dim: usize,
    pub mu: Vec<f64>,
    pub sigma2: Vec<f64>,
}

impl GaussianPosterior {
    pub fn new(ways: usize, dim: usize, mu: Vec<f64>, sigma2: Vec<f64>) -> Result<Self> {
        if mu.len() != ways * dim || sigma2.len() != ways * dim {
            return Err(Error::shape(
                "posterior",
                format!("{ways}x{dim} needs {} entries", ways * dim),
            ));
        }
        if let Some(v) = sigma2.iter().find(|&&v| !(v >= SIGMA2_MIN)) {
            return Err(Error::domain(
                "posterior",
                format!("variance {v} below floor {SIGMA2_MIN}"),
            ));
        }
        Ok(Self {
            ways,
            dim,
            mu,
            sigma2,
        })
    }

    pub fn class_mu(&self, c: usize) -> &[f64] {
        &self.mu[c * self.dim..(c + 1) * self.dim]
    }

    pub fn class_sigma2(&self, c: usize) -> &[f64] {
        &self.sigma2[c * self.dim..(c + 1) * self.dim]
    }

    pub fn to_constants(&self, g: &mut Graph) -> Result<PosteriorVars> {
        let shape = vec![self.ways, self.dim];
        Ok(PosteriorVars {
            mu: g.constant(Tensor::new(shape.clone(), self.mu.clone())?),
            sigma2: g.constant(Tensor::new(shape, self.sigma2.clone())?),
        })
    }
}

/// Graph handles to a posterior's mean and variance, both `[C, d]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorVars {
    pub mu: Var,
    pub sigma2: Var,
}

impl PosteriorVars {
    pub fn to_value(&self, g: &Graph) -> GaussianPosterior {
        let mu = g.value(self.mu);
        GaussianPosterior {
            ways: mu.rows(),
            dim: mu.last_dim(),
            mu: mu.data().to_vec(),
            sigma2: g.value(self.sigma2).data().to_vec(),
        }
    }
}

/// Mean (or sum) of a `[k, d]` block of features.
pub fn pool_prototype(features: &Tensor, mode: Pooling) -> Result<Vec<f64>> {
    if features.shape().len() != 2 {
        return Err(Error::shape(
            "pool_prototype",
            format!("expected [k, d], got {:?}", features.shape()),
        ));
    }
    let k = features.rows();
    let mut out = vec![0.0; features.last_dim()];
    for i in 0..k {
        out.iter_mut()
            .zip(features.row(i))
            .for_each(|(o, v)| *o += v);
    }
    if mode == Pooling::Mean {
        out.iter_mut().for_each(|o| *o /= k as f64);
    }
    Ok(out)
}

/// `[C, N]` matrix that pools support rows into class rows.
fn pooling_matrix(labels: &[usize], ways: usize, mode: Pooling) -> Result<Tensor> {
    let n = labels.len();
    let mut m = Tensor::zeros(&[ways, n]);
    for c in 0..ways {
        let members: Vec<usize> = (0..n).filter(|&i| labels[i] == c).collect();
        if members.is_empty() {
            return Err(Error::contract(format!(
                "class {c} has no support examples"
            )));
        }
        let w = match mode {
            Pooling::Mean => 1.0 / members.len() as f64,
            Pooling::Sum => 1.0,
        };
        for i in members {
            m.data_mut()[c * n + i] = w;
        }
    }
    Ok(m)
}

fn one_hot(labels: &[usize], ways: usize) -> Tensor {
    let mut t = Tensor::zeros(&[labels.len(), ways]);
    for (i, &y) in labels.iter().enumerate() {
        t.data_mut()[i * ways + y] = 1.0;
    }
    t
}

/// Parameters bound to a graph.
#[derive(Debug, Clone)]
pub struct Bound<'a> {
    arch: &'a Architecture,
    vars: Vec<Var>,
}

impl<'a> Bound<'a> {
    pub fn arch(&self) -> &'a Architecture {
        self.arch
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// `h_theta(x)` for a `[n, D]` batch.
    pub fn encode(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let shape = g.value(x).shape();
        if shape.len() != 2 || shape[1] != self.arch.config.input_dim {
            return Err(Error::shape(
                "encode",
                format!(
                    "expected [n, {}], got {:?}",
                    self.arch.config.input_dim, shape
                ),
            ));
        }
        self.arch.encoder.forward(g, &self.vars, x)
    }

    /// Per-row representation fed to pooling: the features themselves in
    /// prototype mode, `r(concat(h, label))` in labelled mode. `labels` of
    /// `None` marks unlabeled rows (zero label slot).
    fn representation(
        &self,
        g: &mut Graph,
        features: Var,
        labels: Option<&[usize]>,
    ) -> Result<Var> {
        match &self.arch.r_net {
            None => Ok(features),
            Some(r) => {
                let rows = g.value(features).rows();
                let slot = match labels {
                    Some(y) => one_hot(y, self.arch.ways),
                    None => Tensor::zeros(&[rows, self.arch.ways]),
                };
                let slot = g.constant(slot);
                let input = g.concat_last(&[features, slot])?;
                r.forward(g, &self.vars, input)
            }
        }
    }

    /// Pools encoded support rows into a `[C, d]` class representation.
    pub fn aggregate_context(
        &self,
        g: &mut Graph,
        support_features: Var,
        labels: &[usize],
    ) -> Result<Var> {
        if labels.iter().any(|&y| y >= self.arch.ways) {
            return Err(Error::contract(format!(
                "support label outside 0..{}",
                self.arch.ways
            )));
        }
        let reps = self.representation(g, support_features, Some(labels))?;
        let pool = g.constant(pooling_matrix(
            labels,
            self.arch.ways,
            self.arch.config.pooling,
        )?);
        g.matmul(pool, reps)
    }

    /// Context representation with unlabeled query features mixed in:
    /// `(1 - alpha) * ctx + alpha * mean_j repr(query_j)` for every class.
    pub fn aggregate_with_queries(
        &self,
        g: &mut Graph,
        context: Var,
        query_features: Var,
        alpha: f64,
    ) -> Result<Var> {
        let q = g.value(query_features).rows();
        let reps = self.representation(g, query_features, None)?;
        let avg = g.constant(Tensor::full(&[1, q], 1.0 / q as f64));
        let pooled = g.matmul(avg, reps)?;
        let spread = g.constant(Tensor::full(&[self.arch.ways, 1], 1.0));
        let pooled = g.matmul(spread, pooled)?;
        let keep = g.scale(context, 1.0 - alpha)?;
        let mix = g.scale(pooled, alpha)?;
        g.add(keep, mix)
    }

    /// Mean head and `softplus(raw) + SIGMA2_MIN` variance head.
    pub fn amortize(&self, g: &mut Graph, rep: Var) -> Result<PosteriorVars> {
        let mu = self.arch.mean_head.forward(g, &self.vars, rep)?;
        let raw = self.arch.var_head.forward(g, &self.vars, rep)?;
        let sigma2 = self.variance_from_raw(g, raw)?;
        Ok(PosteriorVars { mu, sigma2 })
    }

    fn variance_from_raw(&self, g: &mut Graph, raw: Var) -> Result<Var> {
        let sp = g.softplus(raw)?;
        let floor = g.constant(Tensor::full(g.value(raw).shape(), SIGMA2_MIN));
        g.add(sp, floor)
    }

    /// Class logits `[Q, C]` for query features `[Q, d]` given one weight
    /// sample `phi` of shape `[C, d]`.
    pub fn decode_logits(&self, g: &mut Graph, phi: Var, h_query: Var) -> Result<Var> {
        let (ps, hs) = (
            g.value(phi).shape().to_vec(),
            g.value(h_query).shape().to_vec(),
        );
        if ps.len() != 2 || hs.len() != 2 || ps[1] != hs[1] {
            return Err(Error::shape(
                "decode_logits",
                format!("phi {ps:?} vs queries {hs:?}"),
            ));
        }
        match &self.arch.decoder {
            None => {
                let pt = g.transpose(phi)?;
                g.matmul(h_query, pt)
            }
            Some(mlp) => {
                let (c, q) = (ps[0], hs[0]);
                let mut pick_q = Tensor::zeros(&[q * c, q]);
                let mut pick_c = Tensor::zeros(&[q * c, c]);
                for i in 0..q {
                    for j in 0..c {
                        pick_q.data_mut()[(i * c + j) * q + i] = 1.0;
                        pick_c.data_mut()[(i * c + j) * c + j] = 1.0;
                    }
                }
                let (pick_q, pick_c) = (g.constant(pick_q), g.constant(pick_c));
                let hq = g.matmul(pick_q, h_query)?;
                let pc = g.matmul(pick_c, phi)?;
                let input = g.concat_last(&[pc, hq])?;
                let out = mlp.forward(g, &self.vars, input)?;
                g.reshape(out, &[q, c])
            }
        }
    }

    /// Encodes the support set of `episode` and builds its context posterior.
    pub fn context_posterior(
        &self,
        g: &mut Graph,
        episode: &Episode,
    ) -> Result<(PosteriorVars, Var)> {
        let x = g.constant(episode.support_x.clone());
        let h = self.encode(g, x)?;
        let rep = self.aggregate_context(g, h, &episode.support_y)?;
        Ok((self.amortize(g, rep)?, rep))
    }
}

/// `phi_l = mu + sqrt(sigma2) * eps_l` for `l` in `0..samples`, each `[C, d]`.
/// Gradients flow to `mu` and `sigma2`.
pub fn sample_weights<R: Rng + ?Sized>(
    g: &mut Graph,
    post: &PosteriorVars,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<Var>> {
    if samples == 0 {
        return Err(Error::contract("need at least one weight sample"));
    }
    let shape = g.value(post.mu).shape().to_vec();
    let log_var = g.log(post.sigma2)?;
    let half = g.scale(log_var, 0.5)?;
    let std = g.exp(half)?;
    (0..samples)
        .map(|_| {
            let n = shape.iter().product();
            let eps: Vec<f64> = (0..n).map(|_| StandardNormal.sample(rng)).collect();
            let eps = g.constant(Tensor::new(shape.clone(), eps)?);
            let noise = g.mul(std, eps)?;
            g.add(post.mu, noise)
        })
        .collect()
}

/// Value-level [`sample_weights`].
pub fn sample_weights_value<R: Rng + ?Sized>(
    post: &GaussianPosterior,
    samples: usize,
    rng: &mut R,
) -> Result<Vec<Tensor>> {
    let mut g = Graph::new();
    let vars = post.to_constants(&mut g)?;
    let draws = sample_weights(&mut g, &vars, samples, rng)?;
    Ok(draws.into_iter().map(|v| g.value(v).clone()).collect())
}
