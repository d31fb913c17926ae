use super::graph::{Gradients, Graph, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::exec::Execution;

fn evaluate<F>(f: &F, params: &[Tensor]) -> Result<(f64, Graph, Var)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params
        .iter()
        .enumerate()
        .map(|(i, t)| g.param(i, t.clone()))
        .collect();
    let loss = f(&mut g, &vars)?;
    let value = g
        .value(loss)
        .item()
        .ok_or_else(|| Error::contract("objective must return a scalar"))?;
    if value.is_nan() {
        return Err(Error::Evaluation("objective returned NaN".into()));
    }
    Ok((value, g, loss))
}

/// Reverse-mode gradient of `f` at `params`, keyed by position in `params`.
pub fn gradient<F>(f: &F, params: &[Tensor]) -> Result<(f64, Gradients)>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let (value, g, loss) = evaluate(f, params)?;
    Ok((value, g.backward(loss)?))
}

/// Compares reverse-mode gradients of `f` with central differences.
///
/// Returns `max |g_ad - g_fd| / max(1, |g_ad|, |g_fd|)` over every parameter
/// entry. `f` must be deterministic; seed any sampling inside it. Points where
/// `f` is not differentiable (e.g. `|w|` at 0) are not supported.
pub fn finite_diff_check<F>(f: F, params: &[Tensor], h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    finite_diff_check_with(f, params, h, Execution::default())
}

pub fn finite_diff_check_with<F>(f: F, params: &[Tensor], h: f64, exec: Execution) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Sync,
{
    if !(h > 0.0) {
        return Err(Error::contract(format!(
            "step size must be positive, got {h}"
        )));
    }
    let (_, grads) = gradient(&f, params)?;

    let coords: Vec<(usize, usize)> = params
        .iter()
        .enumerate()
        .flat_map(|(p, t)| (0..t.numel()).map(move |i| (p, i)))
        .collect();

    let errors = exec.try_map(coords.len(), |n| -> Result<f64> {
        let (p, i) = coords[n];
        let mut shifted = params.to_vec();
        let base = params[p].data()[i];
        shifted[p].data_mut()[i] = base + h;
        let (plus, _, _) = evaluate(&f, &shifted)?;
        shifted[p].data_mut()[i] = base - h;
        let (minus, _, _) = evaluate(&f, &shifted)?;
        let fd = (plus - minus) / (2.0 * h);
        let ad = grads.get(p).map_or(0.0, |t| t.data()[i]);
        Ok((ad - fd).abs() / 1.0_f64.max(ad.abs()).max(fd.abs()))
    })?;
    Ok(errors.into_iter().fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let err = finite_diff_check(
            |g, w| {
                let sq = g.mul(w[0], w[0])?;
                g.sum(sq)
            },
            &[Tensor::scalar(3.0)],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn rejects_bad_step() {
        let r = finite_diff_check(|g, w| g.sum(w[0]), &[Tensor::scalar(1.0)], 0.0);
        assert!(matches!(r, Err(Error::Contract(_))));
    }

    #[test]
    fn propagates_nan() {
        // log(w - 1) at w = 1 + h/2 goes out of domain on the minus side
        let r = finite_diff_check(
            |g, w| {
                let one = g.constant(Tensor::scalar(1.0));
                let d = g.sub(w[0], one)?;
                g.log(d)
            },
            &[Tensor::scalar(1.0 + 5e-6)],
            1e-5,
        );
        assert!(r.is_err());
    }

    #[test]
    fn detects_wrong_gradient() {
        // relu at the kink: analytic subgradient 0, central difference 0.5
        let err = finite_diff_check(
            |g, w| {
                let r = g.relu(w[0])?;
                g.sum(r)
            },
            &[Tensor::scalar(0.0)],
            1e-5,
        )
        .unwrap();
        assert!((err - 0.5).abs() < 1e-9);
    }
}
