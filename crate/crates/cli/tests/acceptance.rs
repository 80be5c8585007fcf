//! Acceptance suite: one PASS/FAIL line per criterion.
//!
//! Runs under `cargo test` and exits 0 either way so the report is always
//! printed in full; set `SYNDI_ACCEPTANCE_STRICT=1` to exit 1 on any FAIL.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use syndi::calibrate::{correct_linear, correct_logistic, fit_nuisance, EstimateSource, PopulationParameters};
use syndi::data::Dataset;
use syndi::estimate::{fit_direct, run_comparison, run_syndi, Method, PipelineConfig};
use syndi::exec::Parallelism;
use syndi::glm::{fit_glm, DesignMatrix, Term};
use syndi::impute::ImputationMethod;
use syndi::metrics::{auc, scaled_brier, sse, sse_sum};
use syndi::model::{expit, CoefficientSummary, Family, Payload, TargetModelSpec};
use syndi::simulate::{
    build_external_summaries, gen_population, run_replicates, HarnessConfig, Scenario, ScenarioId, SimulationOutput,
};

const SEED: u64 = 20_240_601;

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

struct Report {
    passed: usize,
    total: usize,
}

impl Report {
    fn run(&mut self, id: usize, name: &str, limit: Duration, f: impl FnOnce() -> Outcome) {
        let start = Instant::now();
        let o = f();
        let elapsed = start.elapsed();
        let in_time = elapsed <= limit;
        let pass = o.pass && in_time;
        self.total += 1;
        self.passed += usize::from(pass);
        println!(
            "{} #{id} {name} [{:.1} s, limit {} s{}] {}",
            if pass { "PASS" } else { "FAIL" },
            elapsed.as_secs_f64(),
            limit.as_secs(),
            if in_time { "" } else { ", over time" },
            o.detail
        );
    }
}

fn mins(m: u64) -> Duration {
    Duration::from_secs(60 * m)
}

fn prevalences() -> Outcome {
    let mut ok = true;
    let mut parts = Vec::new();
    for id in [ScenarioId::SimI, ScenarioId::SimII] {
        let s = Scenario::new(id);
        for (k, target) in s.prevalence.expect("stated prevalences").into_iter().enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(SEED + k as u64);
            let d = gen_population(&s, k, 1_000_000, &mut rng);
            let y = d.column_values("Y").unwrap();
            let p = y.iter().sum::<f64>() / y.len() as f64;
            ok &= (p - target).abs() <= 0.01;
            parts.push(format!("{id}/{k} {p:.4} vs {target}"));
        }
    }
    outcome(ok, parts.join(", "))
}

fn degenerate_equivalence() -> Outcome {
    let mut worst: f64 = 0.0;
    for (id, family) in [(ScenarioId::SimI, Family::Binomial), (ScenarioId::SimS1, Family::Gaussian)] {
        let s = Scenario::new(id);
        let mut rng = ChaCha8Rng::seed_from_u64(SEED);
        let internal = gen_population(&s, 0, 200, &mut rng);
        let target = TargetModelSpec::intercepts_only(family, "Y", &["X1", "X2"], &["B1", "B2"], &[]);
        let direct = fit_direct(&internal, &target).unwrap();
        for m in [1, 3, 10] {
            for seed in [1, 99] {
                let config = PipelineConfig {
                    seed,
                    m,
                    ..Default::default()
                };
                let fits = [
                    run_syndi(&internal, &[], &target, &config).unwrap(),
                    run_comparison(&internal, &[], &target, ImputationMethod::Fcs, &config).unwrap(),
                    run_comparison(&internal, &[], &target, ImputationMethod::Imb, &config).unwrap(),
                ];
                for f in &fits {
                    assert_eq!(f.names, direct.names);
                    let d = (&f.coefficients - &direct.coefficients).amax();
                    worst = worst.max(d);
                }
            }
        }
    }
    outcome(worst <= 1e-8, format!("max coefficient difference {worst:.2e}"))
}

fn newton_logistic(x: &DMatrix<f64>, y: &[f64], w: &[f64]) -> DVector<f64> {
    let mut beta = DVector::zeros(x.ncols());
    for _ in 0..100 {
        let eta = x * &beta;
        let mut grad = DVector::zeros(x.ncols());
        let mut hess = DMatrix::zeros(x.ncols(), x.ncols());
        for i in 0..x.nrows() {
            let mu = expit(eta[i]);
            let row = x.row(i).transpose();
            grad += &row * (w[i] * (y[i] - mu));
            hess += &row * row.transpose() * (w[i] * mu * (1.0 - mu));
        }
        let step = hess.lu().solve(&grad).expect("nonsingular Hessian");
        beta += &step;
        if step.amax() < 1e-13 {
            break;
        }
    }
    beta
}

fn glm_oracles() -> Outcome {
    let mut worst: f64 = 0.0;
    for instance in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(SEED + instance);
        let n = 150 + 10 * instance as usize;
        let p = 2 + (instance as usize % 4);
        let x = DMatrix::from_fn(n, p, |_, j| if j == 0 { 1.0 } else { rng.sample(StandardNormal) });
        let truth = DVector::from_fn(p, |j, _| 0.5 - 0.3 * j as f64);
        let eta = &x * &truth;
        let weights: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..2.0)).collect();
        let design = DesignMatrix {
            terms: (0..p).map(|j| Term::Main(format!("v{j}"))).collect(),
            names: (0..p).map(|j| format!("v{j}")).collect(),
            matrix: x.clone(),
        };

        let yb: Vec<f64> = eta.iter().map(|&e| f64::from(u8::from(rng.random::<f64>() < expit(e)))).collect();
        let fit = fit_glm(&design, &yb, Family::Binomial, Some(&weights)).unwrap();
        worst = worst.max((&fit.coefficients - newton_logistic(&x, &yb, &weights)).amax());

        let yg: Vec<f64> = eta.iter().map(|&e| e + rng.sample::<f64, _>(StandardNormal)).collect();
        let fit = fit_glm(&design, &yg, Family::Gaussian, Some(&weights)).unwrap();
        let sw = DVector::from_iterator(n, weights.iter().map(|w| w.sqrt()));
        let xw = DMatrix::from_fn(n, p, |i, j| x[(i, j)] * sw[i]);
        let yw = DVector::from_fn(n, |i, _| yg[i] * sw[i]);
        let ols = xw.svd(true, true).solve(&yw, 1e-14).unwrap();
        worst = worst.max((&fit.coefficients - ols).amax());
    }
    outcome(worst <= 1e-6, format!("max difference {worst:.2e} over 20 logistic and 20 weighted OLS instances"))
}

fn simi_config(r: usize) -> HarnessConfig {
    HarnessConfig {
        seed: SEED,
        replicates: 100,
        n: 200,
        m: 20,
        r,
        bootstrap: 0,
        ..Default::default()
    }
}

fn bias_recovery(out: &SimulationOutput) -> Outcome {
    let s = &out.summary;
    let mut ok = true;
    let mut parts = Vec::new();
    for c in s.coefficients.iter().filter(|c| c.method == Method::SynDi) {
        let b = c.bias.unwrap();
        ok &= b.abs() <= 0.15;
        parts.push(format!("{} {b:+.3}", c.coefficient));
    }
    let i2 = |m: Method| s.coefficient(m, "(Intercept):I2").unwrap().abs_bias.unwrap();
    let (syndi, fcs, imb) = (i2(Method::SynDi), i2(Method::Fcs), i2(Method::Imb));
    ok &= fcs >= 2.0 * syndi && imb >= 2.0 * syndi;
    outcome(
        ok,
        format!(
            "SynDI bias: {}; |bias| I2 offset SynDI {syndi:.3}, FCS {fcs:.3}, IMB {imb:.3}",
            parts.join(", ")
        ),
    )
}

fn efficiency(out: &SimulationOutput) -> Outcome {
    let s = &out.summary;
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["X1", "X2"] {
        let var = |m: Method| s.coefficient(m, name).unwrap().empirical_variance.unwrap();
        let ratio = var(Method::SynDi) / var(Method::Direct);
        ok &= ratio <= 0.7;
        parts.push(format!("{name} ratio {ratio:.3}"));
    }
    outcome(ok, parts.join(", "))
}

fn bootstrap_calibration() -> Outcome {
    let config = HarnessConfig {
        bootstrap: 100,
        methods: vec![Method::SynDi],
        ..simi_config(5)
    };
    let out = run_replicates(&Scenario::new(ScenarioId::SimI), &config, Parallelism::Rayon).unwrap();
    let mut ok = true;
    let mut parts = Vec::new();
    for name in ["X1", "X2", "B1"] {
        let c = out.summary.coefficient(Method::SynDi, name).unwrap();
        let sd = c.empirical_variance.unwrap().sqrt();
        let boot = c.mean_bootstrap_se.unwrap();
        let rel = boot / sd - 1.0;
        ok &= rel.abs() <= 0.25 && c.n_bootstrap == config.replicates;
        parts.push(format!("{name} boot SE {boot:.3} vs SD {sd:.3} ({:+.0}%)", 100.0 * rel));
    }
    outcome(ok, parts.join(", "))
}

/// (empirical variance of X1, its MC SE, mean bootstrap SE of X1, its MC SE).
fn r_run(r: usize) -> (f64, f64, f64, f64) {
    let config = HarnessConfig {
        bootstrap: 50,
        bootstrap_replicates: Some(20),
        methods: vec![Method::SynDi],
        ..simi_config(r)
    };
    let out = run_replicates(&Scenario::new(ScenarioId::SimI), &config, Parallelism::Rayon).unwrap();
    let c = out.summary.coefficient(Method::SynDi, "X1").unwrap();
    let boot: Vec<f64> = out
        .estimates
        .iter()
        .filter(|e| e.coefficient == "X1")
        .filter_map(|e| e.bootstrap_se)
        .collect();
    let mean = boot.iter().sum::<f64>() / boot.len() as f64;
    let var = boot.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (boot.len() as f64 - 1.0);
    (
        c.empirical_variance.unwrap(),
        c.mc_se_variance.unwrap(),
        mean,
        (var / boot.len() as f64).sqrt(),
    )
}

fn stability_in_r() -> Outcome {
    let (v1, se_v1, b1, se_b1) = r_run(1);
    let (v10, se_v10, b10, se_b10) = r_run(10);
    let var_ok = v10 <= v1 + 2.0 * se_v1.hypot(se_v10);
    let boot_ok = b10 <= b1 + 2.0 * se_b1.hypot(se_b10);
    outcome(
        var_ok && boot_ok,
        format!("Var(X1) r=1 {v1:.4}, r=10 {v10:.4}; mean bootstrap SE r=1 {b1:.3}, r=10 {b10:.3}"),
    )
}

fn simii_prediction() -> Outcome {
    let config = HarnessConfig {
        seed: SEED,
        replicates: 50,
        n_test: 2000,
        bootstrap: 0,
        ..Default::default()
    };
    let out = run_replicates(&Scenario::new(ScenarioId::SimII), &config, Parallelism::Rayon).unwrap();
    let s = &out.summary;
    let get = |m: Method, k: usize, metric: &str| s.metric(m, k, metric).unwrap().mean.unwrap();
    let sse2 = |m: Method| get(m, 2, "sse");
    let mut ok = sse2(Method::SynDi) <= sse2(Method::Fcs) && sse2(Method::SynDi) <= sse2(Method::Imb);
    let mut misses = Vec::new();
    for k in [1, 2] {
        for m in [Method::SynDi, Method::Fcs, Method::Imb] {
            let better = get(m, k, "auc") > get(Method::Direct, k, "auc")
                && get(m, k, "sse") < get(Method::Direct, k, "sse")
                && get(m, k, "scaled_brier") < get(Method::Direct, k, "scaled_brier");
            if !better {
                misses.push(format!("{m}/I{k}"));
            }
            ok &= better;
        }
    }
    outcome(
        ok,
        format!(
            "SSE I2 SynDI {:.4}, FCS {:.4}, IMB {:.4}, direct {:.4}; integration methods not beating direct: [{}]",
            sse2(Method::SynDi),
            sse2(Method::Fcs),
            sse2(Method::Imb),
            sse2(Method::Direct),
            misses.join(", ")
        ),
    )
}

fn bisect(mut lo: f64, mut hi: f64, f: impl Fn(f64) -> f64) -> f64 {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Draws of (X2, B1, P(B2 = 1)) given X1 = x under the SimI covariate law.
fn conditional_draws(x: f64, z: &[(f64, f64)]) -> Vec<(f64, f64, f64)> {
    // (X2, B1) | X1 = x ~ N(0.3x, [[0.91, 0.21], [0.21, 0.91]])
    let l11 = 0.91f64.sqrt();
    let l21 = 0.21 / l11;
    let l22 = (0.91 - l21 * l21).sqrt();
    z.iter()
        .map(|&(z1, z2)| {
            let x2 = 0.3 * x + l11 * z1;
            let b1 = 0.3 * x + l21 * z1 + l22 * z2;
            (x2, b1, expit(0.1 * x + 0.2 * x2 + 0.3 * b1))
        })
        .collect()
}

fn calibration_math() -> Outcome {
    let s = Scenario::new(ScenarioId::SimI);
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let internal: Dataset = gen_population(&s, 0, 1_000_000, &mut rng);
    let covariates = vec!["X1".to_string()];
    let omitted: Vec<String> = ["X2", "B1", "B2"].map(String::from).to_vec();
    let nuisance = fit_nuisance(&internal, &covariates, &omitted).unwrap();
    let params = |slopes: [f64; 4]| PopulationParameters {
        intercept: -1.0,
        slopes: ["X1", "X2", "B1", "B2"].iter().map(|n| n.to_string()).zip(slopes).collect(),
        sigma: 1.0,
        source: EstimateSource::Internal,
        bisection_iterations: 0,
    };

    // Identity: no omitted effects means the reduced coefficients carry over.
    let het = covariates.clone();
    let null = params([-1.0, 0.0, 0.0, 0.0]);
    let mut identity_err: f64 = 0.0;
    for (family, b0, b1) in [(Family::Binomial, 0.347, -1.15), (Family::Gaussian, -0.8, 2.3)] {
        let beta = CoefficientSummary {
            family,
            intercept: b0,
            slopes: [("X1".to_string(), b1)].into_iter().collect(),
            sigma: None,
        };
        for out in [
            correct_linear(&beta, &null, &nuisance, &het, true).unwrap(),
            correct_logistic(1, &beta, &null, &nuisance, &het, true).unwrap(),
        ] {
            identity_err = identity_err.max((out.intercept - b0).abs()).max((out.slopes["X1"] - b1).abs());
        }
    }

    // Oracle: the same relations evaluated by Monte Carlo integration over B | X.
    let externals = build_external_summaries(&s, SEED, 1_000_000, None).unwrap();
    let Payload::Coefficients(beta) = &externals[0].payload else {
        unreachable!("SimI external 1 is a coefficient summary")
    };
    let taylor = correct_logistic(1, beta, &params([-1.0; 4]), &nuisance, &het, true).unwrap();
    let (g_int, g_x) = (taylor.intercept, taylor.slopes["X1"]);

    let z: Vec<(f64, f64)> = (0..400_000)
        .map(|_| (rng.sample(StandardNormal), rng.sample(StandardNormal)))
        .collect();
    let at0 = conditional_draws(0.0, &z);
    let at1 = conditional_draws(1.0, &z);
    // μ₀ = expit(γ₀ − X2 − B1 − B2), B2 summed out.
    let moments = |g0: f64| -> (f64, f64) {
        let (mut m1, mut m2) = (0.0, 0.0);
        for &(x2, b1, p) in &at0 {
            let (a, b) = (expit(g0 - x2 - b1 - 1.0), expit(g0 - x2 - b1));
            m1 += p * a + (1.0 - p) * b;
            m2 += p * a * a + (1.0 - p) * b * b;
        }
        (m1 / at0.len() as f64, m2 / at0.len() as f64)
    };
    let target = expit(beta.intercept);
    let exact_int = bisect(-30.0, 30.0, |g| moments(g).0 - target);
    let (e, e2) = moments(exact_int);
    let factor = 1.0 - (e2 - e * e) / (e * (1.0 - e));
    let mean_b2 = |d: &[(f64, f64, f64)]| d.iter().map(|t| t.2).sum::<f64>() / d.len() as f64;
    let shift = 0.3 + 0.3 + (mean_b2(&at1) - mean_b2(&at0));
    let exact_x = beta.slopes["X1"] / factor + shift;

    let bound_int = (g_int - exact_int).abs();
    let bound_x = (g_x - exact_x).abs();
    let ok = identity_err <= 1e-12
        && (g_int - 1.0).abs() <= bound_int + 0.05
        && (g_x + 1.0).abs() <= bound_x + 0.05;
    outcome(
        ok,
        format!(
            "identity error {identity_err:.1e}; intercept {g_int:.3} (exact integration {exact_int:.3}, bound {:.3}); \
             X1 slope {g_x:.3} (exact integration {exact_x:.3}, bound {:.3})",
            bound_int + 0.05,
            bound_x + 0.05
        ),
    )
}

fn metric_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(SEED);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let y: Vec<f64> = (0..300).map(|_| f64::from(u8::from(rng.random::<f64>() < 0.3))).collect();
        let p: Vec<f64> = y
            .iter()
            .map(|v| ((0.2 * v + rng.random::<f64>()) * 10.0).round() / 10.0)
            .collect();
        let (mut num, mut pairs) = (0.0, 0.0);
        for i in 0..y.len() {
            for j in 0..y.len() {
                if y[i] == 1.0 && y[j] == 0.0 {
                    pairs += 1.0;
                    num += if p[i] > p[j] { 1.0 } else if p[i] == p[j] { 0.5 } else { 0.0 };
                }
            }
        }
        worst = worst.max((auc(&y, &p).unwrap() - num / pairs).abs());
    }
    let y = [0.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0];
    let mean = y.iter().sum::<f64>() / y.len() as f64;
    let bs = scaled_brier(&y, &[mean; 7]).unwrap();
    let sse_ok = sse(&[0.5, 0.25], &[0.25, 0.25]).unwrap() == 0.03125
        && sse_sum(&[0.5, 0.25, 1.0], &[0.25, 0.25, 0.5]).unwrap() == 0.3125
        && sse(&[0.1, 0.9], &[0.1, 0.9]).unwrap() == 0.0;
    outcome(
        worst <= 1e-12 && bs == 1.0 && sse_ok,
        format!("AUC vs pair count {worst:.1e}; scaled Brier at the mean {bs}; SSE hand cases {}", if sse_ok { "exact" } else { "off" }),
    )
}

fn data(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../data")
        .join(name)
        .display()
        .to_string()
}

fn run_cli(dir: &Path, threads: &str, args: &[String]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_syndi"))
        .current_dir(dir)
        .env_remove("SYNDI_THREADS")
        .arg("--threads")
        .arg(threads)
        .args(args)
        .status()
        .map(|s| s.success())
        .unwrap_or(false)
}

fn determinism() -> Outcome {
    let fit: Vec<String> = [
        "fit", "--internal", &data("internal_toy.csv"), "--schema", &data("schema.json"),
        "--external", &data("pcpthg.json"), "--external", &data("erspc.json"),
        "--m", "5", "--r", "3", "--bootstrap", "4", "--out", "fit.json",
    ]
    .map(String::from)
    .to_vec();
    let simulate: Vec<String> = [
        "simulate", "simI", "--replicates", "4", "--m", "4", "--bootstrap", "3", "--bootstrap-replicates", "2",
        "--n-external", "50000", "--out", "sim",
    ]
    .map(String::from)
    .to_vec();
    let dirs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    for (dir, threads) in dirs.iter().zip(["1", "4"]) {
        if !run_cli(dir.path(), threads, &fit) || !run_cli(dir.path(), threads, &simulate) {
            return outcome(false, "a command failed");
        }
    }
    let files: [PathBuf; 3] = ["fit.json", "sim/summary.json", "sim/replicates.csv"].map(PathBuf::from);
    let same: Vec<bool> = files
        .iter()
        .map(|f| std::fs::read(dirs[0].path().join(f)).unwrap() == std::fs::read(dirs[1].path().join(f)).unwrap())
        .collect();
    outcome(
        same.iter().all(|&b| b),
        format!("byte-identical across --threads 1 and 4: fit.json {}, summary.json {}, replicates.csv {}", same[0], same[1], same[2]),
    )
}

fn main() {
    let mut report = Report { passed: 0, total: 0 };
    report.run(1, "prevalence oracles", Duration::from_secs(30), prevalences);
    report.run(2, "degenerate equivalence", Duration::from_secs(5), degenerate_equivalence);
    report.run(3, "GLM oracles", Duration::from_secs(10), glm_oracles);

    let start = Instant::now();
    let simi = run_replicates(&Scenario::new(ScenarioId::SimI), &simi_config(5), Parallelism::Rayon).unwrap();
    let shared = start.elapsed();
    let with_shared = |mut o: Outcome| {
        o.detail = format!("(shared SimI run {:.1} s) {}", shared.as_secs_f64(), o.detail);
        o
    };
    report.run(4, "bias recovery", mins(10).saturating_sub(shared), || with_shared(bias_recovery(&simi)));
    report.run(5, "efficiency gain", mins(10).saturating_sub(shared), || with_shared(efficiency(&simi)));
    report.run(6, "bootstrap calibration", mins(30), bootstrap_calibration);
    report.run(7, "stability in r", mins(30), stability_in_r);
    report.run(8, "SimII prediction ordering", mins(20), simii_prediction);
    report.run(9, "calibration math", mins(2), calibration_math);
    report.run(10, "metric properties", Duration::from_secs(5), metric_properties);
    report.run(11, "determinism", mins(2), determinism);

    println!("{}/{} acceptance criteria passed", report.passed, report.total);
    if report.passed < report.total && std::env::var("SYNDI_ACCEPTANCE_STRICT").is_ok_and(|v| v == "1") {
        std::process::exit(1);
    }
}
