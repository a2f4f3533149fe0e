use std::path::Path;
use std::time::{Duration, Instant};

use rand::Rng;

use unlearn_core::datasets::Dataset;
use unlearn_core::diffcore::{Architecture, Dense, Layer, Model, Target, Tensor};
use unlearn_core::landscape::{build_plane, loss_grid, pca_trajectory, Trajectory};
use unlearn_core::pipeline::{read_table, run_experiment, table_check, Experiment, ExperimentConfig, RunSummary};
use unlearn_core::poisons::em_perturb;
use unlearn_core::sal::{projected_ascent, sal_layer, sal_matrix, sal_oracle_2param, SalProbeConfig};
use unlearn_core::seed::rng_from;
use unlearn_core::unlearnability::{kmeans2_1d, unlearnable_distance};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn table_arithmetic() -> Outcome {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("data");
    let mut notes = Vec::new();
    let mut pass = true;
    for name in [
        "benchmark_cifar10.csv",
        "benchmark_cifar100.csv",
        "benchmark_imagenet100.csv",
    ] {
        let verdict = read_table(&dir.join(name)).and_then(|rows| table_check(&rows));
        match verdict {
            Ok(v) => {
                let worst = v.rows.iter().map(|r| r.delta.abs()).fold(0.0, f64::max);
                pass &= v.pass();
                notes.push(format!("{name}: max |delta| {worst:.4}, min {}", v.min_method));
            }
            Err(e) => {
                pass = false;
                notes.push(format!("{name}: {e}"));
            }
        }
    }
    outcome(pass, notes.join("; "))
}

fn toy_experiment() -> Experiment {
    Experiment::new(ExperimentConfig::default()).expect("default config is valid")
}

fn ud_self_identity() -> Outcome {
    let exp = toy_experiment();
    let prep = exp.prepare().unwrap();
    let rec = exp.train_on(&prep, &prep.train).unwrap();
    let sal = sal_matrix(&rec, &prep.train, &exp.probe_config(), "vanilla").unwrap();
    let t = Instant::now();
    match unlearnable_distance(&sal, &sal) {
        Ok(r) => outcome(
            r.ud == 1.0 && t.elapsed() < Duration::from_secs(1),
            format!("ud {} (lp {}), {:?} given matrices", r.ud, r.lp_clean, t.elapsed()),
        ),
        Err(e) => outcome(false, e.to_string()),
    }
}

fn random_model_and_batch(seed: u64) -> (Model, Tensor, Vec<usize>) {
    let mut rng = rng_from(seed);
    let input = rng.random_range(2..8);
    let classes = rng.random_range(2..6);
    let hidden: Vec<usize> = (0..rng.random_range(0..3)).map(|_| rng.random_range(2..7)).collect();
    let model = Architecture {
        input_dim: input,
        hidden,
        n_classes: classes,
    }
    .build(&mut rng)
    .unwrap();
    let n = rng.random_range(1..12);
    let x = Tensor::new(
        vec![n, input],
        (0..n * input).map(|_| rng.random_range(-1.5..1.5)).collect(),
    )
    .unwrap();
    let y = (0..n).map(|_| rng.random_range(0..classes)).collect();
    (model, x, y)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|a| a * a).sum::<f64>().sqrt()
}

fn gradient_exactness() -> Outcome {
    let trials = 120;
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let (model, x, y) = random_model_and_batch(9_000 + t);
        let target = Target::Labels(&y);
        let analytic = model.loss_and_grad(&x, target, false).unwrap().grads.flatten();
        let theta = model.flatten();
        let numeric: Vec<f64> = (0..theta.len())
            .map(|i| {
                let mut p = theta.clone();
                p[i] += h;
                let up = model.with_flat_params(&p).unwrap().loss(&x, target).unwrap();
                p[i] -= 2.0 * h;
                let down = model.with_flat_params(&p).unwrap().loss(&x, target).unwrap();
                (up - down) / (2.0 * h)
            })
            .collect();
        let diff: Vec<f64> = analytic.iter().zip(&numeric).map(|(a, n)| a - n).collect();
        let rel = norm(&diff) / norm(&analytic).max(norm(&numeric)).max(1e-12);
        worst = worst.max(rel);
    }
    outcome(
        worst < 1e-4,
        format!("{trials} trials, worst relative error {worst:.2e} (< 1e-4)"),
    )
}

fn two_param_model(seed: u64) -> (Model, Dataset) {
    let mut rng = rng_from(seed);
    let model = Model::new(vec![
        Layer::Dense(Dense::init(1, 1, &mut rng)),
        Layer::Dense(Dense::init(1, 3, &mut rng)),
    ])
    .unwrap();
    let n = 32;
    let x = Tensor::new(vec![n, 1], (0..n).map(|_| rng.random::<f64>()).collect()).unwrap();
    let y = (0..n).map(|_| rng.random_range(0..3)).collect();
    (model, Dataset::new(x, y, 3, seed).unwrap())
}

fn sal_oracle_agreement() -> Outcome {
    let cfg = SalProbeConfig::default();
    let trials = 60;
    let mut within = 0;
    let mut worst: f64 = 0.0;
    for t in 0..trials {
        let (model, data) = two_param_model(50_000 + t);
        let pga = sal_layer(&model, 0, &data, &cfg).unwrap().value;
        let oracle = sal_oracle_2param(&model, 0, &data, cfg.epsilon, 201).unwrap();
        let rel = (pga - oracle).abs() / oracle.max(1e-300);
        worst = worst.max(rel);
        if rel <= 0.05 {
            within += 1;
        }
    }
    let eps = cfg.epsilon;
    let quad = projected_ascent(1, &cfg, 1, |v| Ok((0.5 * v[0] * v[0], vec![v[0]])))
        .unwrap()
        .value;
    let quad_err = (quad - 0.5 * eps * eps).abs() / (0.5 * eps * eps);
    let g = [0.7, -1.3, 0.2, 2.1];
    let lin = projected_ascent(4, &cfg, 1, |v| {
        Ok((g.iter().zip(v).map(|(a, b)| a * b).sum(), g.to_vec()))
    })
    .unwrap()
    .value;
    let lin_err = (lin - eps * norm(&g)).abs() / (eps * norm(&g));
    outcome(
        within == trials && quad_err <= 0.01 && lin_err <= 0.01,
        format!(
            "{within}/{trials} within 5% (worst {worst:.2e}); quadratic err {quad_err:.2e}, linear err {lin_err:.2e} (<= 1%)"
        ),
    )
}

fn brute_force_sse(sorted: &[f64]) -> f64 {
    let sse = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|v| (v - m) * (v - m)).sum::<f64>()
    };
    (1..sorted.len())
        .map(|k| sse(&sorted[..k]) + sse(&sorted[k..]))
        .fold(f64::INFINITY, f64::min)
}

fn exact_two_means() -> Outcome {
    let mut rng = rng_from(77);
    let instances = 1200;
    let mut bad = 0;
    for _ in 0..instances {
        let n = rng.random_range(2..40);
        let scale = 10f64.powi(rng.random_range(-3..3));
        let mut v: Vec<f64> = (0..n).map(|_| rng.random::<f64>() * scale).collect();
        if rng.random_bool(0.2) {
            let k = rng.random_range(0..n);
            v[k] = v[0];
        }
        let got = kmeans2_1d(&v).unwrap();
        v.sort_by(f64::total_cmp);
        let want = brute_force_sse(&v);
        if (got.sse - want).abs() > 1e-9 * want.max(scale * scale * 1e-6) {
            bad += 1;
        }
    }
    outcome(bad == 0, format!("{instances} instances, {bad} SSE mismatches"))
}

fn toy_reproduction(s: &RunSummary, elapsed: Duration) -> Outcome {
    let acc = |m: &str| s.row(m).and_then(|r| r.test_acc).unwrap_or(f64::NAN);
    let ud = |m: &str| s.row(m).and_then(|r| r.ud).unwrap_or(f64::NAN);
    let (clean, ops) = (acc("vanilla"), acc("ops"));
    let (ud_ops, ud_tap) = (ud("ops"), ud("tap"));
    let pass = clean >= 0.70
        && clean - ops >= 0.30
        && ud_ops <= 0.6
        && ud_tap > ud_ops
        && s.failures() == 0
        && elapsed < Duration::from_secs(300);
    outcome(
        pass,
        format!(
            "clean acc {clean:.3}, OPS acc {ops:.3} (drop {:.3} >= 0.30), UD(OPS) {ud_ops:.3} <= 0.6, UD(TAP) {ud_tap:.3}, {elapsed:.1?} < 5 min",
            clean - ops
        ),
    )
}

fn em_property() -> Outcome {
    let exp = toy_experiment();
    let prep = exp.prepare().unwrap();
    let (poisoned, proxy) = em_perturb(&prep.train, &exp.cfg.model, &exp.cfg.em_config(), 11).unwrap();
    let labels = &prep.train.labels;
    let clean = proxy.per_sample_losses(&prep.train.features, labels).unwrap();
    let pois = proxy
        .per_sample_losses(&poisoned.materialize().features, labels)
        .unwrap();
    let ok = clean.iter().zip(&pois).filter(|(c, p)| p <= c).count();
    outcome(
        ok == clean.len(),
        format!("{ok}/{} samples with poisoned loss <= clean loss", clean.len()),
    )
}

fn pca_landscape() -> Outcome {
    let exp = toy_experiment();
    let prep = exp.prepare().unwrap();
    let rec = exp.train_on(&prep, &prep.train).unwrap();
    let traj = Trajectory::from_record(&rec, "vanilla").unwrap();
    let pca = pca_trajectory(&traj, 2).unwrap();
    let top2: f64 = pca.explained_variance.iter().take(2).sum();
    let mut ortho: f64 = 0.0;
    for (i, a) in pca.components.iter().enumerate() {
        for (j, b) in pca.components.iter().enumerate() {
            let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            ortho = ortho.max((dot - f64::from(u8::from(i == j))).abs());
        }
    }
    let plane = build_plane(&traj, (1, 2)).unwrap();
    let res = exp.cfg.landscape.res;
    let grid = loss_grid(&plane, &prep.init, &prep.train, res, exp.cfg.landscape.pad).unwrap();
    let c = res / 2;
    let anchor = prep
        .init
        .with_flat_params(&plane.anchor)
        .unwrap()
        .loss(&prep.train.features, Target::Labels(&prep.train.labels))
        .unwrap();
    let centre = grid.at(c, c);
    outcome(
        top2 > 0.90 && centre == anchor && ortho <= 1e-10,
        format!("PC1+PC2 {top2:.4} > 0.90, centre {centre} vs anchor {anchor}, orthonormality gap {ortho:.1e}"),
    )
}

fn parameter_cdf(s: &RunSummary) -> Outcome {
    let med = |m: &str| s.detail(m).and_then(|d| d.median_abs_param).unwrap_or(f64::NAN);
    let (clean, ops) = (med("vanilla"), med("ops"));
    outcome(clean >= ops, format!("median |param| clean {clean:.4} vs OPS {ops:.4}"))
}

fn report(id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) -> bool {
    let t = Instant::now();
    let o = f();
    let took = t.elapsed();
    let pass = o.pass && took < limit;
    println!(
        "[{}] {id:>2} {name}: {} ({took:.2?}, limit {limit:?})",
        if pass { "PASS" } else { "FAIL" },
        o.detail
    );
    pass
}

fn main() {
    let secs = Duration::from_secs;
    let mut all = true;
    all &= report(1, "table arithmetic", secs(1), table_arithmetic);
    all &= report(2, "UD self-identity", secs(60), ud_self_identity);
    all &= report(3, "gradient exactness", secs(30), gradient_exactness);
    all &= report(4, "SAL oracle agreement", secs(60), sal_oracle_agreement);
    all &= report(5, "exact 1-D 2-means", secs(10), exact_two_means);

    let dir = tempfile::tempdir().unwrap();
    let exp = toy_experiment();
    let t = Instant::now();
    let first = run_experiment(&exp, &dir.path().join("a")).unwrap();
    let first_time = t.elapsed();
    all &= report(6, "toy reproduction", secs(300), || {
        toy_reproduction(&first, first_time)
    });
    all &= report(7, "EM poison property", secs(120), em_property);
    all &= report(8, "PCA landscape", secs(60), pca_landscape);
    all &= report(9, "parameter CDF ordering", secs(1), || parameter_cdf(&first));
    all &= report(10, "determinism", secs(300), || {
        run_experiment(&exp, &dir.path().join("b")).unwrap();
        let a = std::fs::read(dir.path().join("a/bench.csv")).unwrap();
        let b = std::fs::read(dir.path().join("b/bench.csv")).unwrap();
        outcome(a == b, format!("bench.csv {} bytes, identical: {}", a.len(), a == b))
    });

    println!("acceptance: {}", if all { "all criteria pass" } else { "FAILURES" });
    if !all {
        std::process::exit(1);
    }
}
