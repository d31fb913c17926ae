use mca_fewshot::autodiff::{finite_diff_check, Graph, Primitive, Tensor, Var};
use mca_fewshot::rng;
use rand::Rng;

fn uniform(r: &mut impl Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| r.random_range(lo..hi)).collect(),
    )
    .unwrap()
}

/// Inputs for one trial of `prim`, drawn from [-2, 2] (log gets (0.05, 2)).
fn inputs(prim: &Primitive, r: &mut impl Rng) -> Vec<Tensor> {
    let (n, m, k) = (
        r.random_range(1..4),
        r.random_range(1..4),
        r.random_range(1..4),
    );
    match prim {
        Primitive::MatMul => vec![
            uniform(r, &[n, k], -2.0, 2.0),
            uniform(r, &[k, m], -2.0, 2.0),
        ],
        Primitive::Add | Primitive::Sub | Primitive::Mul => {
            vec![
                uniform(r, &[n, m], -2.0, 2.0),
                uniform(r, &[n, m], -2.0, 2.0),
            ]
        }
        Primitive::Log => vec![uniform(r, &[n, m], 0.05, 2.0)],
        Primitive::AddRow => vec![uniform(r, &[n, m], -2.0, 2.0), uniform(r, &[m], -2.0, 2.0)],
        Primitive::ConcatLast => vec![
            uniform(r, &[n, m], -2.0, 2.0),
            uniform(r, &[n, k], -2.0, 2.0),
        ],
        _ => vec![uniform(r, &[n, m], -2.0, 2.0)],
    }
}

/// Reduces an arbitrary output to a scalar with fixed random weights so
/// every output entry contributes a distinct amount.
fn scalarize(g: &mut Graph, y: Var, seed: u64) -> Var {
    let shape = g.value(y).shape().to_vec();
    if shape.is_empty() {
        return y;
    }
    let w = uniform(&mut rng::stream(seed, &[]), &shape, -1.0, 1.0);
    let w = g.constant(w);
    let p = g.mul(y, w).unwrap();
    g.sum(p).unwrap()
}

#[test]
fn every_primitive_matches_central_differences() {
    let prims = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale(-1.7),
        Primitive::Exp,
        Primitive::Log,
        Primitive::Tanh,
        Primitive::Relu,
        Primitive::Softplus,
        Primitive::Softmax,
        Primitive::LogSumExp,
        Primitive::Sum,
        Primitive::SumLast,
        Primitive::Mean,
        Primitive::ConcatLast,
        Primitive::AddRow,
        Primitive::Transpose,
    ];
    for (pi, prim) in prims.iter().enumerate() {
        let mut worst: f64 = 0.0;
        for trial in 0..100u64 {
            let mut r = rng::stream(pi as u64, &[trial]);
            let xs = inputs(prim, &mut r);
            let err = finite_diff_check(
                |g, vars| {
                    let y = g.apply(prim.clone(), vars)?;
                    Ok(scalarize(g, y, trial))
                },
                &xs,
                1e-5,
            )
            .unwrap();
            worst = worst.max(err);
        }
        assert!(worst < 1e-4, "{prim:?}: max relative error {worst}");
    }
}

#[test]
fn reshape_matches_central_differences() {
    for trial in 0..100u64 {
        let mut r = rng::stream(99, &[trial]);
        let (n, m) = (r.random_range(1..4), r.random_range(1..4));
        let x = uniform(&mut r, &[n, m], -2.0, 2.0);
        let err = finite_diff_check(
            |g, vars| {
                let y = g.reshape(vars[0], &[m, n])?;
                Ok(scalarize(g, y, trial))
            },
            &[x],
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4);
    }
}

#[test]
fn softmax_is_a_distribution() {
    for trial in 0..200u64 {
        let mut r = rng::stream(7, &[trial]);
        let scale = [1.0, 20.0, 300.0][trial as usize % 3];
        let x = uniform(&mut r, &[3, 6], -scale, scale);
        let mut g = Graph::new();
        let v = g.constant(x);
        let p = g.softmax(v).unwrap();
        for row in 0..3 {
            let row = g.value(p).row(row);
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(row.iter().all(|&q| (0.0..=1.0).contains(&q)));
            if scale == 1.0 {
                assert!(row.iter().all(|&q| q > 0.0 && q < 1.0));
            }
        }
    }
}

#[test]
fn log_sum_exp_agrees_with_naive_and_is_stable() {
    for trial in 0..200u64 {
        let mut r = rng::stream(8, &[trial]);
        let x = uniform(&mut r, &[1, 5], -20.0, 20.0);
        let naive = x.data().iter().map(|v| v.exp()).sum::<f64>().ln();
        let mut g = Graph::new();
        let v = g.constant(x);
        let l = g.log_sum_exp(v).unwrap();
        assert!((g.value(l).data()[0] - naive).abs() < 1e-10);
    }
    let mut g = Graph::new();
    let v = g.constant(Tensor::vector(vec![700.0, 699.0, -700.0]));
    let l = g.log_sum_exp(v).unwrap();
    let got = g.value(l).data()[0];
    assert!(got.is_finite());
    assert!((got - (700.0 + (1.0 + (-1f64).exp()).ln())).abs() < 1e-10);
}
