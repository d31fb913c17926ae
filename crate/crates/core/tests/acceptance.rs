//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any criterion fails.

use std::collections::HashSet;
use std::path::Path;
use std::time::{Duration, Instant};

use mca_fewshot::autodiff::Tensor;
use mca_fewshot::cli::{self, gradcheck, zero_checkpoint};
use mca_fewshot::config::TrainConfig;
use mca_fewshot::divergences::{gaussian_kl_value, mmd2_value, KernelConfig, MmdEstimatorKind};
use mca_fewshot::episodes::{
    generate_synthetic_dataset, load_dataset, parse_fsds, sample_episode, write_dataset, Dataset,
    Split, SyntheticSpec,
};
use mca_fewshot::exec::Execution;
use mca_fewshot::model::{GaussianPosterior, ModelConfig};
use mca_fewshot::objectives::{ObjectiveConfig, RegularizerMode};
use mca_fewshot::rng;
use mca_fewshot::schedules::{Schedule, ScheduleConfig, ScheduleKind};
use mca_fewshot::trainer::{
    collapse_diagnostics, evaluate, Checkpoint, CollapseSpec, EvalReport, EvalSpec,
};
use rand::Rng;
use rand_distr::{Distribution, Normal};

struct Outcome {
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &str, limit: Duration, elapsed: Duration, outcome: Outcome) -> bool {
    let in_time = elapsed < limit;
    let pass = outcome.pass && in_time;
    println!(
        "criterion {id} {name}: {} ({}; runtime {:.1} s, limit {} s)",
        if pass { "PASS" } else { "FAIL" },
        outcome.detail,
        elapsed.as_secs_f64(),
        limit.as_secs()
    );
    pass
}

fn timed<T>(f: impl FnOnce() -> T) -> (T, Duration) {
    let start = Instant::now();
    let out = f();
    (out, start.elapsed())
}

fn gradient_suite() -> Outcome {
    let model = ModelConfig {
        feature_dim: 3,
        ..ModelConfig::default()
    };
    let r = gradcheck(&model, &ObjectiveConfig::default(), 0).unwrap();
    Outcome {
        pass: r.max_rel_error < 1e-4,
        detail: format!(
            "nll {:.2e}, kl {:.2e}, mmd {:.2e}, bound 1e-4",
            r.nll, r.kl, r.mmd
        ),
    }
}

fn log_density(p: &GaussianPosterior, x: &[f64]) -> f64 {
    x.iter()
        .zip(p.mu.iter().zip(&p.sigma2))
        .map(|(x, (m, v))| -0.5 * ((2.0 * std::f64::consts::PI * v).ln() + (x - m).powi(2) / v))
        .sum()
}

fn divergence_oracles() -> Outcome {
    let mut worst_kl: f64 = 0.0;
    for pair in 0..20u64 {
        let mut r = rng::stream(200, &[pair]);
        let mut post = || {
            let mu = (0..4).map(|_| r.random_range(-1.0..1.0)).collect();
            let s2 = (0..4).map(|_| r.random_range(0.5..2.0)).collect();
            GaussianPosterior::new(2, 2, mu, s2).unwrap()
        };
        let (q1, q2) = (post(), post());
        let closed = gaussian_kl_value(&q1, &q2).unwrap();
        let n = 100_000;
        let mut acc = 0.0;
        let mut x = [0.0; 4];
        for _ in 0..n {
            for (i, xi) in x.iter_mut().enumerate() {
                *xi = Normal::new(q1.mu[i], q1.sigma2[i].sqrt())
                    .unwrap()
                    .sample(&mut r);
            }
            acc += log_density(&q1, &x) - log_density(&q2, &x);
        }
        worst_kl = worst_kl.max(((acc / n as f64) - closed).abs() / closed);
    }

    let col = |v: &[f64]| Tensor::new(vec![v.len(), 1], v.to_vec()).unwrap();
    let two_point = mmd2_value(
        &col(&[0.0]),
        &col(&[2.0]),
        &KernelConfig::fixed(1.0),
        MmdEstimatorKind::Biased,
    )
    .unwrap();
    let two_point_err = (two_point - (2.0 - 2.0 * (-2f64).exp())).abs();

    let mut r = rng::stream(201, &[]);
    let mut normal = |n: usize| {
        col(&(0..n)
            .map(|_| Normal::new(0.0, 1.0).unwrap().sample(&mut r))
            .collect::<Vec<_>>())
    };
    let (x, y) = (normal(2000), normal(2000));
    let unbiased =
        mmd2_value(&x, &y, &KernelConfig::default(), MmdEstimatorKind::Unbiased).unwrap();

    Outcome {
        pass: worst_kl <= 0.02 && two_point_err <= 1e-9 && unbiased.abs() <= 0.01,
        detail: format!(
            "KL worst rel. gap {worst_kl:.4} <= 0.02, two-point MMD err {two_point_err:.1e} <= 1e-9, null MMD {unbiased:.4} within 0.01"
        ),
    }
}

fn schedule_suite() -> Outcome {
    let cfg = ScheduleConfig {
        kind: ScheduleKind::Cyclical,
        beta_max: 1.0,
        total_steps: 1000,
        cycles: 4,
        ramp_ratio: 0.5,
    };
    let s = Schedule::new(cfg.clone()).unwrap();
    let starts_zero = [0, 250, 500, 750].iter().all(|&t| s.beta_at(t) == 0.0);
    let reaches_max = (0..4).all(|c| (c * 250..(c + 1) * 250).any(|t| s.beta_at(t) == 1.0));
    let in_range = (0..1000).all(|t| (0.0..=1.0).contains(&s.beta_at(t)));
    let one = Schedule::new(ScheduleConfig {
        cycles: 1,
        ..cfg.clone()
    })
    .unwrap();
    let mono = Schedule::new(ScheduleConfig {
        kind: ScheduleKind::Monotonic,
        cycles: 1,
        ..cfg
    })
    .unwrap();
    let coincide = (0..1000).all(|t| one.beta_at(t) == mono.beta_at(t));
    Outcome {
        pass: starts_zero && reaches_max && in_range && coincide,
        detail: format!(
            "zero at cycle starts {starts_zero}, beta_max in every cycle {reaches_max}, all in [0,1] {in_range}, one cycle == monotonic {coincide}"
        ),
    }
}

fn eval_spec(cfg: &TrainConfig, split: Split) -> EvalSpec {
    EvalSpec {
        split,
        num_tasks: 600,
        ways: cfg.episode.ways,
        shots: cfg.episode.shots,
        queries: cfg.episode.queries,
        samples: cfg.objective.samples,
        seed: 600,
    }
}

fn evaluate_checkpoint(ck: &Checkpoint, ds: &Dataset) -> EvalReport {
    let (arch, params) = ck.restore().unwrap();
    evaluate(
        &arch,
        &params,
        ds,
        &eval_spec(&ck.config, Split::MetaTest),
        Execution::Sequential,
    )
    .unwrap()
}

fn posterior_variance(ck: &Checkpoint, ds: &Dataset) -> f64 {
    let (arch, params) = ck.restore().unwrap();
    let spec = CollapseSpec {
        split: Split::MetaTest,
        num_tasks: 50,
        shots: ck.config.episode.shots,
        queries: ck.config.episode.queries,
        samples: 1,
        seed: 50,
    };
    collapse_diagnostics(&arch, &params, ds, &spec)
        .unwrap()
        .0
        .mean_posterior_variance
}

fn train_via_cli(config: &Path, out: &Path) -> Checkpoint {
    let code = cli::run([
        "mca-fewshot",
        "--sequential",
        "train",
        "--config",
        config.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code, 0, "training run failed");
    Checkpoint::load(&out.join("checkpoint.json")).unwrap()
}

fn sanity(ds: &Dataset, dir: &Path) -> Outcome {
    let cfg = TrainConfig::default();
    let zero = zero_checkpoint(&cfg).unwrap();
    let chance = evaluate_checkpoint(&zero, ds);
    let chance_ok = (chance.mean_accuracy - 0.2).abs() <= 3.0 * chance.ci95;

    let mut r = rng::stream(300, &[]);
    let mut episodes_ok = true;
    for i in 0..10_000 {
        let split = [Split::MetaTrain, Split::MetaVal, Split::MetaTest][i % 3];
        let ep = sample_episode(ds, split, 5, 1, 15, &mut r).unwrap();
        let s: HashSet<_> = ep.support_ids.iter().collect();
        let q: HashSet<_> = ep.query_ids.iter().collect();
        episodes_ok &= s.is_disjoint(&q) && s.len() == 5 && q.len() == 75;
        episodes_ok &= (0..5).all(|c| {
            ep.support_y.iter().filter(|&&y| y == c).count() == 1
                && ep.query_y.iter().filter(|&&y| y == c).count() == 15
        });
    }

    let mut bytes = b"FSDS".to_vec();
    for v in [1u32, 10, 6, 5, 4, 3] {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    bytes.extend((0..10 * 6 * 5 * 4 * 3).map(|_| r.random::<u8>()));
    let path = dir.join("roundtrip.fsds");
    write_dataset(&parse_fsds(&bytes).unwrap(), &path).unwrap();
    let reloaded = load_dataset(&path).unwrap();
    let mut rewrite = dir.join("roundtrip2.fsds");
    write_dataset(&reloaded, &rewrite).unwrap();
    let fsds_ok =
        std::fs::read(&path).unwrap() == bytes && std::fs::read(&rewrite).unwrap() == bytes;
    rewrite.pop();

    Outcome {
        pass: chance_ok && episodes_ok && fsds_ok,
        detail: format!(
            "zero-weight accuracy {:.4} +/- {:.4} vs 0.2 within 3 CI {chance_ok}, 10^4 episodes valid {episodes_ok}, FSDS bitwise round-trip {fsds_ok}",
            chance.mean_accuracy, chance.ci95
        ),
    }
}

fn main() {
    let dir = tempfile::tempdir().unwrap();
    let mut all = true;

    let (o, t) = timed(gradient_suite);
    all &= report(1, "gradient suite", Duration::from_secs(10), t, o);
    let (o, t) = timed(divergence_oracles);
    all &= report(2, "divergence oracles", Duration::from_secs(30), t, o);
    let (o, t) = timed(schedule_suite);
    all &= report(3, "schedule suite", Duration::from_secs(1), t, o);

    let ds = generate_synthetic_dataset(&SyntheticSpec::default()).unwrap();
    let (o, t) = timed(|| sanity(&ds, dir.path()));
    all &= report(
        6,
        "episodic and statistical sanity",
        Duration::from_secs(60),
        t,
        o,
    );

    // Default config: synthetic data, 5-way 1-shot, cyclical beta with MMD, 2000 steps.
    let regularized_cfg = dir.path().join("regularized.json");
    std::fs::write(&regularized_cfg, "{}").unwrap();
    let (reg_ck, reg_train_time) =
        timed(|| train_via_cli(&regularized_cfg, &dir.path().join("reg_a")));
    let (reg_eval, eval_time) = timed(|| evaluate_checkpoint(&reg_ck, &ds));
    all &= report(
        4,
        "learning check",
        Duration::from_secs(600),
        reg_train_time + eval_time,
        Outcome {
            pass: reg_eval.mean_accuracy >= 0.60,
            detail: format!(
                "meta-test accuracy {:.4} +/- {:.4} over 600 tasks, bound >= 0.60",
                reg_eval.mean_accuracy, reg_eval.ci95
            ),
        },
    );

    let (repeat_ck, repeat_time) =
        timed(|| train_via_cli(&regularized_cfg, &dir.path().join("reg_b")));
    let same = |name: &str| {
        std::fs::read(dir.path().join("reg_a").join(name)).unwrap()
            == std::fs::read(dir.path().join("reg_b").join(name)).unwrap()
    };
    let (metrics_same, ck_same) = (same("metrics.csv"), same("checkpoint.json"));
    all &= report(
        7,
        "determinism",
        Duration::from_secs(1200),
        reg_train_time + repeat_time,
        Outcome {
            pass: metrics_same && ck_same && repeat_ck == reg_ck,
            detail: format!("metrics.csv identical {metrics_same}, checkpoint identical {ck_same}"),
        },
    );

    let plain_cfg = dir.path().join("plain.json");
    std::fs::write(&plain_cfg, r#"{"objective": {"mode": "none"}}"#).unwrap();
    let (plain_ck, plain_time) = timed(|| train_via_cli(&plain_cfg, &dir.path().join("plain")));
    assert_eq!(plain_ck.config.objective.mode, RegularizerMode::None);
    let ((plain_eval, var_plain, var_reg), diag_time) = timed(|| {
        (
            evaluate_checkpoint(&plain_ck, &ds),
            posterior_variance(&plain_ck, &ds),
            posterior_variance(&reg_ck, &ds),
        )
    });
    let variance_ok = var_reg > var_plain;
    let accuracy_ok = reg_eval.mean_accuracy >= plain_eval.mean_accuracy - 0.02;
    all &= report(
        5,
        "anti-collapse reproduction",
        Duration::from_secs(1200),
        reg_train_time + eval_time + plain_time + diag_time,
        Outcome {
            pass: variance_ok && accuracy_ok,
            detail: format!(
                "mean posterior variance regularized {var_reg:.5} vs unregularized {var_plain:.5} (must be larger: {variance_ok}); accuracy {:.4} vs {:.4} - 0.02 ({accuracy_ok})",
                reg_eval.mean_accuracy, plain_eval.mean_accuracy
            ),
        },
    );

    if all {
        println!("acceptance: all criteria passed");
    } else {
        println!("acceptance: some criteria failed");
        std::process::exit(1);
    }
}
