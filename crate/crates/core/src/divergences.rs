//! Closed-form Gaussian KL and kernel MMD² between posteriors.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{GaussianPosterior, PosteriorVars};

/// Smallest bandwidth the median heuristic will return.
pub const MIN_BANDWIDTH: f64 = 1e-6;

/// RBF bandwidth: an explicit σ, or the median pairwise distance of the
/// pooled samples (recomputed per call and excluded from differentiation).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum Bandwidth {
    #[default]
    Median,
    Fixed(f64),
}

impl Serialize for Bandwidth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            Bandwidth::Median => s.serialize_str("median"),
            Bandwidth::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Bandwidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Tag(String),
            Value(f64),
        }
        match Raw::deserialize(d)? {
            Raw::Tag(t) if t == "median" => Ok(Bandwidth::Median),
            Raw::Tag(t) => Err(serde::de::Error::custom(format!("unknown bandwidth {t:?}"))),
            Raw::Value(v) => Ok(Bandwidth::Fixed(v)),
        }
    }
}

/// Gaussian (RBF) kernel configuration.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct KernelConfig {
    pub bandwidth: Bandwidth,
}

impl KernelConfig {
    pub fn fixed(sigma: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.bandwidth {
            Bandwidth::Fixed(s) if !(s > 0.0 && s.is_finite()) => Err(Error::config(format!(
                "kernel bandwidth must be positive, got {s}"
            ))),
            _ => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MmdEstimatorKind {
    /// V-statistic, includes the diagonal terms; never negative.
    #[default]
    Biased,
    /// U-statistic, excludes the diagonal terms; needs two samples per side.
    Unbiased,
}

/// `exp(-|a - b|^2 / (2 sigma^2))`
pub fn rbf_kernel(a: &[f64], b: &[f64], sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) {
        return Err(Error::domain(
            "rbf_kernel",
            format!("bandwidth must be positive, got {sigma}"),
        ));
    }
    if a.len() != b.len() {
        return Err(Error::shape(
            "rbf_kernel",
            format!("lengths {} and {}", a.len(), b.len()),
        ));
    }
    let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
    Ok((-d2 / (2.0 * sigma * sigma)).exp())
}

/// Median pairwise Euclidean distance over the pooled rows of `x` and `y`,
/// floored at [`MIN_BANDWIDTH`].
pub fn median_heuristic(x: &Tensor, y: &Tensor) -> Result<f64> {
    if x.last_dim() != y.last_dim() {
        return Err(Error::shape(
            "median_heuristic",
            format!("{:?} vs {:?}", x.shape(), y.shape()),
        ));
    }
    let rows: Vec<&[f64]> = (0..x.rows())
        .map(|i| x.row(i))
        .chain((0..y.rows()).map(|i| y.row(i)))
        .collect();
    if rows.len() < 2 {
        return Err(Error::contract(
            "median heuristic needs at least two pooled samples",
        ));
    }
    let mut dists = Vec::with_capacity(rows.len() * (rows.len() - 1) / 2);
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d2: f64 = rows[i]
                .iter()
                .zip(rows[j])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            dists.push(d2.sqrt());
        }
    }
    dists.sort_by(f64::total_cmp);
    let n = dists.len();
    let median = if n % 2 == 1 {
        dists[n / 2]
    } else {
        0.5 * (dists[n / 2 - 1] + dists[n / 2])
    };
    Ok(median.max(MIN_BANDWIDTH))
}

/// `[n, m]` matrix of squared distances between rows of `a` and `b`.
fn squared_distances(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let (n, m) = (g.value(a).rows(), g.value(b).rows());
    let aa = g.mul(a, a)?;
    let na = g.sum_last(aa)?;
    let bb = g.mul(b, b)?;
    let nb = g.sum_last(bb)?;
    let ones_m = g.constant(Tensor::full(&[1, m], 1.0));
    let ones_n = g.constant(Tensor::full(&[1, n], 1.0));
    let rows_a = g.matmul(na, ones_m)?;
    let rows_b = g.matmul(nb, ones_n)?;
    let rows_b = g.transpose(rows_b)?;
    let bt = g.transpose(b)?;
    let cross = g.matmul(a, bt)?;
    let cross = g.scale(cross, 2.0)?;
    let sum = g.add(rows_a, rows_b)?;
    g.sub(sum, cross)
}

fn kernel_mean(g: &mut Graph, a: Var, b: Var, sigma: f64, drop_diagonal: bool) -> Result<Var> {
    let d2 = squared_distances(g, a, b)?;
    let scaled = g.scale(d2, -1.0 / (2.0 * sigma * sigma))?;
    let k = g.exp(scaled)?;
    if !drop_diagonal {
        return g.mean(k);
    }
    let n = g.value(a).rows();
    let mut mask = Tensor::full(&[n, n], 1.0);
    for i in 0..n {
        mask.data_mut()[i * n + i] = 0.0;
    }
    let mask = g.constant(mask);
    let off = g.mul(k, mask)?;
    let total = g.sum(off)?;
    g.scale(total, 1.0 / (n * (n - 1)) as f64)
}

/// MMD² between sample sets `x` (`[n, D]`) and `y` (`[m, D]`) with an RBF
/// kernel of bandwidth `sigma`. Differentiable in both sample sets.
pub fn mmd2(g: &mut Graph, x: Var, y: Var, sigma: f64, kind: MmdEstimatorKind) -> Result<Var> {
    if !(sigma > 0.0) {
        return Err(Error::domain(
            "mmd2",
            format!("bandwidth must be positive, got {sigma}"),
        ));
    }
    let (sx, sy) = (g.value(x).shape().to_vec(), g.value(y).shape().to_vec());
    if sx.len() != 2 || sy.len() != 2 || sx[1] != sy[1] {
        return Err(Error::shape("mmd2", format!("{sx:?} vs {sy:?}")));
    }
    let need = match kind {
        MmdEstimatorKind::Biased => 1,
        MmdEstimatorKind::Unbiased => 2,
    };
    if sx[0] < need || sy[0] < need {
        return Err(Error::contract(format!(
            "{kind:?} MMD needs at least {need} samples per side, got {} and {}",
            sx[0], sy[0]
        )));
    }
    let unbiased = kind == MmdEstimatorKind::Unbiased;
    let kxx = kernel_mean(g, x, x, sigma, unbiased)?;
    let kyy = kernel_mean(g, y, y, sigma, unbiased)?;
    let kxy = kernel_mean(g, x, y, sigma, false)?;
    let within = g.add(kxx, kyy)?;
    let cross = g.scale(kxy, 2.0)?;
    g.sub(within, cross)
}

/// Resolves the bandwidth from `kernel` (median heuristic on the current
/// values, not differentiated) and returns `(mmd2, sigma)`.
pub fn mmd2_with_kernel(
    g: &mut Graph,
    x: Var,
    y: Var,
    kernel: &KernelConfig,
    kind: MmdEstimatorKind,
) -> Result<(Var, f64)> {
    let sigma = match kernel.bandwidth {
        Bandwidth::Fixed(s) => s,
        Bandwidth::Median => median_heuristic(g.value(x), g.value(y))?,
    };
    Ok((mmd2(g, x, y, sigma, kind)?, sigma))
}

/// Value-level MMD² on plain sample matrices.
pub fn mmd2_value(
    x: &Tensor,
    y: &Tensor,
    kernel: &KernelConfig,
    kind: MmdEstimatorKind,
) -> Result<f64> {
    let mut g = Graph::new();
    let (xv, yv) = (g.constant(x.clone()), g.constant(y.clone()));
    let (out, _) = mmd2_with_kernel(&mut g, xv, yv, kernel, kind)?;
    Ok(g.value(out).data()[0])
}

/// `KL(q1 || q2)` summed over classes and dimensions of two diagonal
/// Gaussian posteriors.
pub fn gaussian_kl(g: &mut Graph, q1: &PosteriorVars, q2: &PosteriorVars) -> Result<Var> {
    let s1 = g.value(q1.mu).shape().to_vec();
    let s2 = g.value(q2.mu).shape().to_vec();
    if s1 != s2
        || g.value(q1.sigma2).shape() != s1.as_slice()
        || g.value(q2.sigma2).shape() != s2.as_slice()
    {
        return Err(Error::shape("gaussian_kl", format!("{s1:?} vs {s2:?}")));
    }
    let n = g.value(q1.mu).numel() as f64;
    let log1 = g.log(q1.sigma2)?;
    let log2 = g.log(q2.sigma2)?;
    let log_ratio = g.sub(log2, log1)?;
    let diff = g.sub(q1.mu, q2.mu)?;
    let diff2 = g.mul(diff, diff)?;
    let numer = g.add(q1.sigma2, diff2)?;
    let neg_log2 = g.scale(log2, -1.0)?;
    let inv2 = g.exp(neg_log2)?;
    let quad = g.mul(numer, inv2)?;
    let inner = g.add(log_ratio, quad)?;
    let total = g.sum(inner)?;
    let count = g.constant(Tensor::scalar(n));
    let centered = g.sub(total, count)?;
    g.scale(centered, 0.5)
}

/// Value-level [`gaussian_kl`].
pub fn gaussian_kl_value(q1: &GaussianPosterior, q2: &GaussianPosterior) -> Result<f64> {
    let mut g = Graph::new();
    let a = q1.to_constants(&mut g)?;
    let b = q2.to_constants(&mut g)?;
    let kl = gaussian_kl(&mut g, &a, &b)?;
    Ok(g.value(kl).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::finite_diff_check;
    use crate::rng;
    use rand::Rng;

    fn col(v: &[f64]) -> Tensor {
        Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap()
    }

    fn post(mu: &[f64], sigma2: &[f64]) -> GaussianPosterior {
        GaussianPosterior::new(1, mu.len(), mu.to_vec(), sigma2.to_vec()).unwrap()
    }

    #[test]
    fn rbf_reference_values() {
        assert_eq!(rbf_kernel(&[0.3, -1.0], &[0.3, -1.0], 0.7).unwrap(), 1.0);
        let k = rbf_kernel(&[0.0], &[2.0], 1.0).unwrap();
        assert!((k - (-2.0f64).exp()).abs() < 1e-15);
        assert!((k - 0.135335).abs() < 1e-6);
        assert!(rbf_kernel(&[0.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn rbf_is_symmetric() {
        let mut r = rng::stream(1, &[]);
        for _ in 0..50 {
            let a: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let b: Vec<f64> = (0..3).map(|_| r.random_range(-2.0..2.0)).collect();
            let s = r.random_range(0.1..3.0);
            assert_eq!(
                rbf_kernel(&a, &b, s).unwrap(),
                rbf_kernel(&b, &a, s).unwrap()
            );
        }
    }

    #[test]
    fn mmd_two_points() {
        let v = mmd2_value(
            &col(&[0.0]),
            &col(&[2.0]),
            &KernelConfig::fixed(1.0),
            MmdEstimatorKind::Biased,
        )
        .unwrap();
        assert!((v - (2.0 - 2.0 * (-2.0f64).exp())).abs() < 1e-12);
        assert!((v - 1.729329).abs() < 1e-6);
    }

    #[test]
    fn mmd_of_identical_sets_is_zero() {
        let x = col(&[0.1, -0.4, 1.3, 2.2]);
        let v = mmd2_value(&x, &x, &KernelConfig::fixed(0.8), MmdEstimatorKind::Biased).unwrap();
        assert!(v.abs() < 1e-12);
    }

    #[test]
    fn unbiased_needs_two_samples() {
        let r = mmd2_value(
            &col(&[0.0]),
            &col(&[1.0, 2.0]),
            &KernelConfig::fixed(1.0),
            MmdEstimatorKind::Unbiased,
        );
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn unbiased_can_go_negative() {
        // identical multisets: U-statistic is minus the off-diagonal cross terms
        let x = col(&[0.0, 1.0]);
        let v = mmd2_value(
            &x,
            &x,
            &KernelConfig::fixed(1.0),
            MmdEstimatorKind::Unbiased,
        )
        .unwrap();
        assert!(v < 0.0);
    }

    #[test]
    fn median_heuristic_cases() {
        assert_eq!(median_heuristic(&col(&[0.0]), &col(&[2.0])).unwrap(), 2.0);
        assert_eq!(
            median_heuristic(&col(&[0.0, 1.0]), &col(&[3.0])).unwrap(),
            2.0
        );
        assert_eq!(
            median_heuristic(&col(&[4.0, 4.0]), &col(&[4.0])).unwrap(),
            MIN_BANDWIDTH
        );
        assert!(median_heuristic(
            &col(&[4.0]),
            &Tensor::new(vec![1, 2], vec![0.0, 0.0]).unwrap()
        )
        .is_err());
    }

    #[test]
    fn kl_reference_values() {
        let a = post(&[1.0], &[1.0]);
        let b = post(&[0.0], &[1.0]);
        assert!((gaussian_kl_value(&a, &b).unwrap() - 0.5).abs() < 1e-15);
        assert_eq!(gaussian_kl_value(&a, &a).unwrap(), 0.0);
        let wide = post(&[0.0], &[4.0]);
        let expected = 0.5 * ((0.25f64).ln() + 4.0 - 1.0);
        assert!((gaussian_kl_value(&wide, &b).unwrap() - expected).abs() < 1e-15);
        assert!((expected - 0.806853).abs() < 1e-6);
    }

    #[test]
    fn kl_shape_mismatch() {
        let a = post(&[1.0], &[1.0]);
        let b = post(&[0.0, 0.0], &[1.0, 1.0]);
        assert!(matches!(
            gaussian_kl_value(&a, &b),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let mut r = rng::stream(11, &[]);
        let mut rand_t = |shape: &[usize], lo: f64, hi: f64| {
            let n = shape.iter().product();
            Tensor::new(
                shape.to_vec(),
                (0..n).map(|_| r.random_range(lo..hi)).collect(),
            )
            .unwrap()
        };
        let x = rand_t(&[4, 3], -2.0, 2.0);
        let y = rand_t(&[5, 3], -2.0, 2.0);
        for kind in [MmdEstimatorKind::Biased, MmdEstimatorKind::Unbiased] {
            let err = finite_diff_check(
                |g, p| mmd2(g, p[0], p[1], 1.3, kind),
                &[x.clone(), y.clone()],
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "{kind:?}: {err}");
        }
        let params = [
            rand_t(&[2, 3], -2.0, 2.0),
            rand_t(&[2, 3], 0.5, 2.0),
            rand_t(&[2, 3], -2.0, 2.0),
            rand_t(&[2, 3], 0.5, 2.0),
        ];
        let err = finite_diff_check(
            |g, p| {
                gaussian_kl(
                    g,
                    &PosteriorVars {
                        mu: p[0],
                        sigma2: p[1],
                    },
                    &PosteriorVars {
                        mu: p[2],
                        sigma2: p[3],
                    },
                )
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "kl: {err}");
    }
}
