//! Acceptance criteria 1-9, one PASS/FAIL line each.
//!
//! Criteria 7 and 8 train the desk benchmark (about an hour and a half on one
//! core) and only run when `--include-ignored` or `--ignored` is passed:
//!
//! ```text
//! cargo test --release -p invbench --test acceptance -- --include-ignored
//! ```

mod common;

use std::path::Path;
use std::time::{Duration, Instant};

use invbench::bayes::{run_chain, McmcConfig};
use invbench::cwgan::{critic_loss_grads, gradient_penalty};
use invbench::eval::{dataset_size_sweep, diversity_study, diversity_targets, test_targets, AccuracyReport, DiversityRow};
use invbench::inn::{train_inn, InnConfig, InnModel};
use invbench::mmd::mmd;
use invbench::nn::{Activation, Mlp, Tape};
use invbench::ode::rk4;
use invbench::problem::{make_dataset, AnalyticModel, LabelModel, LabelVector, NormalizedDesign};
use invbench::profile::{cell_model_seed, Profile, Trained};
use invbench::seed::{derive_seed, rng_from_seed, streams};
use invbench::solver::{normal_matrix, Family, LabelScaler, Schedule};
use invbench::surrogate::{train_surrogates, SurrogateConfig};
use ndarray::{array, Array2};
use rand::Rng;

use common::{ok, read, tiny_profile, write_profile};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: String) -> Outcome {
    Outcome { pass, detail }
}

fn within(elapsed: Duration, limit_secs: u64) -> bool {
    elapsed.as_secs_f64() < limit_secs as f64
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-4)
}

fn fd_worst(mlp: &Mlp<f64>, grads: &[Array2<f64>], f: impl Fn(&Mlp<f64>) -> f64) -> f64 {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for (p, g) in grads.iter().enumerate() {
        for ((i, j), &analytic) in g.indexed_iter() {
            let mut plus = mlp.clone();
            plus.params_mut()[p][[i, j]] += h;
            let mut minus = mlp.clone();
            minus.params_mut()[p][[i, j]] -= h;
            worst = worst.max(rel_err(analytic, (f(&plus) - f(&minus)) / (2.0 * h)));
        }
    }
    worst
}

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let acts = [
        Activation::Linear,
        Activation::Relu,
        Activation::LeakyRelu(0.2),
        Activation::Selu,
        Activation::Sigmoid,
        Activation::Tanh,
        Activation::Softmax,
    ];
    let mut rng = rng_from_seed(101);
    let mut mlp_worst = 0.0f64;
    for _ in 0..100 {
        let mut dims = vec![rng.random_range(1..=5)];
        for _ in 0..rng.random_range(1..=3) {
            dims.push(rng.random_range(1..=7));
        }
        dims.push(rng.random_range(1..=4));
        let hidden = acts[rng.random_range(0..6)];
        let output = acts[rng.random_range(0..acts.len())];
        let mut mlp = Mlp::<f64>::new(&dims, hidden, output, &mut rng);
        // Nonzero biases keep ReLU units off their kinks.
        for (k, p) in mlp.params_mut().into_iter().enumerate() {
            if k % 2 == 1 {
                p.mapv_inplace(|_| rng.random_range(-0.5..0.5));
            }
        }
        let n = rng.random_range(1..=6);
        let x = normal_matrix::<f64, _>(n, dims[0], &mut rng);
        let w = normal_matrix::<f64, _>(n, *dims.last().unwrap(), &mut rng);
        let tape = Tape::new();
        let bound = mlp.bind(&tape, true);
        let loss = bound.forward(tape.constant(x.clone())).unwrap().mul(tape.constant(w.clone())).sum();
        let grads = bound.grads(&tape.backward(loss).unwrap());
        drop(bound);
        mlp_worst = mlp_worst.max(fd_worst(&mlp, &grads, |m| (m.predict(x.view()).unwrap() * &w).sum()));
    }
    let mut gp_worst = 0.0f64;
    for seed in 0..10 {
        let mut rng = rng_from_seed(200 + seed);
        let critic = Mlp::<f64>::new(&[17, 12, 12, 12, 1], Activation::LeakyRelu(0.2), Activation::Linear, &mut rng);
        let real = normal_matrix::<f64, _>(5, 14, &mut rng);
        let fake = normal_matrix::<f64, _>(5, 14, &mut rng);
        let y = normal_matrix::<f64, _>(5, 3, &mut rng);
        let eps: Vec<f64> = (0..5).map(|_| rng.random()).collect();
        let (_, grads) = critic_loss_grads(&critic, &real, &fake, &y, &eps, 10.0).unwrap();
        let err = fd_worst(&critic, &grads, |m| critic_loss_grads(m, &real, &fake, &y, &eps, 10.0).unwrap().0);
        let direct = invbench::cwgan::gradient_penalty_grads(&critic, &real, &fake, &y, &eps, 10.0).unwrap();
        let pen = fd_worst(&critic, &direct.1, |m| gradient_penalty(m, &real, &fake, &y, &eps, 10.0).unwrap());
        gp_worst = gp_worst.max(err).max(pen);
    }
    let t = start.elapsed();
    outcome(
        mlp_worst < 1e-4 && gp_worst < 1e-3 && within(t, 60),
        format!("MLP max rel err {mlp_worst:.2e}, penalty max rel err {gp_worst:.2e}, {:.1}s", t.as_secs_f64()),
    )
}

fn round_trip(model: &InnModel<f64>, x: &Array2<f64>) -> f64 {
    let back = model.inverse(model.forward(x.view()).unwrap().view()).unwrap();
    (&back - x).iter().fold(0.0f64, |m, v| m.max(v.abs()))
}

fn worst_logdet_err(model: &InnModel<f64>, x: &Array2<f64>) -> f64 {
    let h = 1e-6;
    let mut worst = 0.0f64;
    for k in 0..model.blocks.len() {
        let (_, logdet) = model.block_map(k, x.view()).unwrap();
        for i in 0..x.nrows() {
            let mut jac = nalgebra::DMatrix::<f64>::zeros(6, 6);
            for c in 0..6 {
                let mut plus = x.row(i).to_owned().insert_axis(ndarray::Axis(0));
                let mut minus = plus.clone();
                plus[[0, c]] += h;
                minus[[0, c]] -= h;
                let fp = model.block_map(k, plus.view()).unwrap().0;
                let fm = model.block_map(k, minus.view()).unwrap().0;
                for r in 0..6 {
                    jac[(r, c)] = (fp[[0, r]] - fm[[0, r]]) / (2.0 * h);
                }
            }
            let det = jac.determinant();
            worst = worst.max((logdet[[i, 0]].exp() - det).abs() / det.abs());
        }
    }
    worst
}

fn criterion_2() -> Outcome {
    let start = Instant::now();
    let fresh = InnModel::<f64>::new(InnConfig::default(), LabelScaler::identity(), &mut rng_from_seed(1));
    let x = normal_matrix::<f64, _>(1000, 6, &mut rng_from_seed(2));
    let fresh_err = round_trip(&fresh, &x);

    let data = make_dataset(1000, 0.0, 3).unwrap();
    let config = InnConfig {
        schedule: Schedule::scaled(5),
        ..Profile::desk().inn
    };
    let (trained, _) = train_inn::<f64>(&data, &config, 4).unwrap();
    let probes = data.design_matrix::<f64>();
    let trained_err = round_trip(&trained, &probes);

    let steep = InnModel::<f64>::new(
        InnConfig { head_init_scale: 1.0, ..InnConfig::default() },
        LabelScaler::identity(),
        &mut rng_from_seed(5),
    );
    let pts = normal_matrix::<f64, _>(10, 6, &mut rng_from_seed(6));
    let det_err = worst_logdet_err(&steep, &pts).max(worst_logdet_err(&trained, &probes.slice(ndarray::s![..10, ..]).to_owned()));
    let t = start.elapsed();
    outcome(
        fresh_err < 1e-8 && trained_err < 1e-8 && det_err < 1e-4 && within(t, 60),
        format!(
            "round trip fresh {fresh_err:.2e}, trained {trained_err:.2e}; log-det rel err {det_err:.2e}; {:.1}s",
            t.as_secs_f64()
        ),
    )
}

fn criterion_3() -> Outcome {
    let a = normal_matrix::<f64, _>(500, 6, &mut rng_from_seed(7));
    let self_dist = mmd(a.view(), a.view()).unwrap().abs();
    let two = mmd(array![[0.0f64]].view(), array![[1.0f64]].view()).unwrap();
    outcome(
        self_dist < 1e-12 && (two - 5.023).abs() < 1e-3,
        format!("MMD(A,A) = {self_dist:.2e}, two-point value {two:.6}"),
    )
}

fn criterion_4() -> Outcome {
    let z0 = array![[0.3f64, -1.2, 2.0]];
    let c = array![[0.7f64, -0.25, 1.5]];
    let constant = rk4(z0.clone(), 100, |x, _| Ok(Array2::from_shape_fn(x.dim(), |(_, j)| c[[0, j]]))).unwrap();
    let const_err = (&constant - &(&z0 + &c)).iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let linear = rk4(z0.clone(), 100, |x, _| Ok(x.clone())).unwrap();
    let lin_err = linear
        .iter()
        .zip(z0.iter())
        .map(|(a, b)| ((a - std::f64::consts::E * b) / (std::f64::consts::E * b)).abs())
        .fold(0.0f64, f64::max);
    let err = |steps| (rk4(array![[1.0f64]], steps, |x, _| Ok(x.clone())).unwrap()[[0, 0]] - std::f64::consts::E).abs();
    let ratios = [err(10) / err(20), err(20) / err(40)];
    outcome(
        const_err < 1e-12 && lin_err < 1e-6 && ratios.iter().all(|r| (8.0..=32.0).contains(r)),
        format!("constant {const_err:.1e}, linear rel err {lin_err:.2e}, halving ratios {:.2} {:.2}", ratios[0], ratios[1]),
    )
}

/// `U_M = a`, other labels zero.
struct LinearToy;

impl LabelModel for LinearToy {
    fn predict(&self, designs: &[NormalizedDesign]) -> invbench::Result<Vec<LabelVector>> {
        Ok(designs.iter().map(|d| LabelVector::new(d.0[0], 0.0, 0.0)).collect())
    }
}

fn criterion_5() -> Outcome {
    let start = Instant::now();
    let (y, sigma) = (0.2, 0.1);
    // Truncated normal on [0, 1] by Simpson quadrature.
    let simpson = |f: &dyn Fn(f64) -> f64| {
        let n = 20_000;
        let h = 1.0 / n as f64;
        let inner: f64 = (1..n).map(|i| f(i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
        (f(0.0) + f(1.0) + inner) * h / 3.0
    };
    let p = |a: f64| (-0.5 * ((a - y) / sigma).powi(2)).exp();
    let z = simpson(&p);
    let mean = simpson(&|a| a * p(a)) / z;
    let var = simpson(&|a| (a - mean).powi(2) * p(a)) / z;
    let config = McmcConfig {
        sigma2: [sigma * sigma, 1.0, 1.0],
        burn_in: 10_000,
        iterations: 110_000,
        ..McmcConfig::default()
    };
    let chain = run_chain(&LabelVector::new(y, 0.0, 0.0), &LinearToy, &config, 17).unwrap();
    let a: Vec<f64> = chain.trace.iter().map(|r| r.design.0[0]).collect();
    let m = a.iter().sum::<f64>() / a.len() as f64;
    let v = a.iter().map(|x| (x - m).powi(2)).sum::<f64>() / a.len() as f64;
    let t = start.elapsed();
    outcome(
        a.len() == 100_000 && (m - mean).abs() < 0.01 && ((v - var) / var).abs() < 0.1 && within(t, 120),
        format!(
            "{} samples, mean {m:.4} vs {mean:.4}, variance {v:.5} vs {var:.5}, {:.1}s",
            a.len(),
            t.as_secs_f64()
        ),
    )
}

fn criterion_6() -> Outcome {
    let start = Instant::now();
    let train = make_dataset(1000, 0.0, derive_seed(0, streams::DATASET, 1000)).unwrap();
    let test = make_dataset(295, 0.0, derive_seed(0, streams::SURROGATE_TEST, 0)).unwrap();
    let config = SurrogateConfig {
        steps: 10_000,
        batch_sizes: vec![32],
        ..SurrogateConfig::evaluation()
    };
    let set = train_surrogates::<f64>(&train, &test, &config, derive_seed(0, streams::SURROGATE, 0)).unwrap();
    let mae = set.meta.test_mae;
    let t = start.elapsed();
    outcome(
        mae[0] < 0.004 && mae[1] < 0.0004 && mae[2] < 0.02 && within(t, 300),
        format!("test MAE {:.2e} / {:.2e} / {:.2e}, {:.1}s", mae[0], mae[1], mae[2], t.as_secs_f64()),
    )
}

/// Desk-profile runs shared by criteria 7 and 8.
struct Benchmark {
    report: AccuracyReport,
    root: std::path::PathBuf,
    profile: Profile,
    train_time: Duration,
}

fn run_benchmark() -> Benchmark {
    let profile = Profile::desk();
    let root = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance-desk");
    let _ = std::fs::remove_dir_all(&root);
    let start = Instant::now();
    let targets = test_targets(profile.test_targets, profile.sigma, 0).unwrap();
    let mut cells = Vec::new();
    let plan: [(&[Family], &[usize]); 2] = [(&Family::ALL, &[5000]), (&[Family::Cfm], &[100, 10000])];
    for (families, sizes) in plan {
        let results =
            dataset_size_sweep(families, sizes, &[1, 2, 3], &profile, &targets, &AnalyticModel, 1, Some(&root)).unwrap();
        for (spec, r) in results {
            match r {
                Ok(c) => {
                    println!("    {} d={} seed={}: MAE {}", spec.model, spec.d, spec.seed, fmt3(&c.meta.mae));
                    cells.push(c);
                }
                Err(e) => println!("    {} d={} seed={}: failed: {e}", spec.model, spec.d, spec.seed),
            }
        }
    }
    let mut report = AccuracyReport::default();
    report.merge(cells).unwrap();
    report.export(&root).unwrap();
    Benchmark { report, root, profile, train_time: start.elapsed() }
}

fn criterion_7(bench: &Benchmark) -> Outcome {
    let med = bench.report.median_mae();
    let Some(cfm) = med.get(&(Family::Cfm, 5000)) else {
        return outcome(false, "no CFM result at d=5000".into());
    };
    let mut pass = true;
    let mut detail = Vec::new();
    for j in 0..3 {
        let mut line = format!("label {j}: cfm {:.2e}", cfm[j]);
        for other in [Family::Inn, Family::Cwgan, Family::Bayes] {
            match med.get(&(other, 5000)) {
                Some(m) => {
                    pass &= cfm[j] < m[j];
                    line.push_str(&format!(", {other} {:.2e}", m[j]));
                }
                None => pass = false,
            }
        }
        detail.push(line);
    }
    match (med.get(&(Family::Cfm, 100)), med.get(&(Family::Cfm, 10000))) {
        (Some(small), Some(large)) => {
            let trend = (0..3).all(|j| large[j] <= small[j]);
            pass &= trend;
            detail.push(format!("cfm d=100 {} -> d=10000 {}", fmt3(small), fmt3(large)));
        }
        _ => pass = false,
    }
    pass &= within(bench.train_time, 7200);
    detail.push(format!("{:.0}s", bench.train_time.as_secs_f64()));
    outcome(pass, detail.join("; "))
}

fn fmt3(v: &[f64; 3]) -> String {
    format!("({:.2e}, {:.2e}, {:.2e})", v[0], v[1], v[2])
}

fn diversity_rows(bench: &Benchmark, family: Family) -> invbench::Result<Vec<DiversityRow>> {
    let dir = bench.root.join("cells").join(invbench::eval::cell_dir_name(family, 5000, 1)).join("model");
    let trained = Trained::load(family, &dir)?;
    let seed = derive_seed(cell_model_seed(family, 5000, 1), streams::GENERATION, 1);
    diversity_study(trained.solver(), &diversity_targets(), bench.profile.diversity_samples, &AnalyticModel, seed)
}

fn criterion_8(bench: &Benchmark) -> Outcome {
    let start = Instant::now();
    let (cfm, bi) = match (diversity_rows(bench, Family::Cfm), diversity_rows(bench, Family::Bayes)) {
        (Ok(c), Ok(b)) => (c, b),
        (Err(e), _) | (_, Err(e)) => return outcome(false, format!("diversity study failed: {e}")),
    };
    let t = start.elapsed();
    let mut misses = 0;
    let mut worst_dp = 0.0f64;
    for r in &cfm {
        if (0..3).any(|j| (r.mean[j] - r.target.0[j]).abs() > 3.0 * r.std[j]) {
            misses += 1;
        }
        worst_dp = worst_dp.max(r.std[1]);
    }
    let avg = |rows: &[DiversityRow]| rows.iter().map(|r| r.std[0]).sum::<f64>() / rows.len() as f64;
    let (cfm_um, bi_um) = (avg(&cfm), avg(&bi));
    outcome(
        misses == 0 && worst_dp < 1e-3 && bi_um > cfm_um && within(t, 1800),
        format!(
            "cfm targets outside 3 sigma: {misses}/27, max cfm sigma_dp {worst_dp:.2e}, mean sigma_UM bi {bi_um:.2e} vs cfm {cfm_um:.2e}, {:.0}s",
            t.as_secs_f64()
        ),
    )
}

fn csv_files(root: &Path) -> Vec<std::path::PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|e| e == "csv") {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

fn criterion_9() -> Outcome {
    let start = Instant::now();
    let tmp = tempfile::tempdir().unwrap();
    let profile = write_profile(tmp.path(), &tiny_profile());
    let p = profile.to_str().unwrap();
    let mut compared = 0;
    let mut mismatches = Vec::new();
    let runs: Vec<std::path::PathBuf> = ["a", "b"].iter().map(|r| tmp.path().join(r)).collect();
    for run in &runs {
        let s = |sub: &str| run.join(sub).to_str().unwrap().to_string();
        let data = s("data.csv");
        ok(&["gen-data", "--n", "100", "--sigma", "0.01", "--seed", "5", "--out", &data]);
        for m in ["inn", "cfm", "cwgan", "bi"] {
            ok(&["train", "--model", m, "--data", &data, "--seed", "5", "--profile", p, "--out", &s(&format!("train/{m}"))]);
        }
        let common = ["--profile", p, "--models", "inn,cfm,cwgan,bi", "--seed", "5", "--jobs", "1"];
        let mut sweep = vec!["accuracy-sweep", "--out"];
        let sweep_dir = s("sweep");
        sweep.push(&sweep_dir);
        sweep.extend(common);
        ok(&sweep);
        let mut div = vec!["diversity", "--out"];
        let div_dir = s("diversity");
        div.push(&div_dir);
        div.extend(common);
        ok(&div);
        ok(&["report", "--input", &sweep_dir, "--out", &s("report")]);
    }
    let files = csv_files(&runs[0]);
    if files != csv_files(&runs[1]) {
        mismatches.push("file sets differ".to_string());
    }
    for f in &files {
        compared += 1;
        if read(&runs[0].join(f)) != read(&runs[1].join(f)) {
            mismatches.push(f.display().to_string());
        }
    }
    outcome(
        mismatches.is_empty() && compared > 20,
        format!(
            "{compared} CSV files compared across two runs of every subcommand, mismatches {mismatches:?}, {:.1}s",
            start.elapsed().as_secs_f64()
        ),
    )
}

fn report(n: usize, o: &Outcome) -> bool {
    println!("criterion {n}: {} ({})", if o.pass { "PASS" } else { "FAIL" }, o.detail);
    o.pass
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let long = args.iter().any(|a| a == "--include-ignored" || a == "--ignored");
    let mut all = true;
    let quick: [(usize, fn() -> Outcome); 7] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (9, criterion_9),
    ];
    for (n, f) in quick {
        all &= report(n, &f());
    }
    if long {
        let bench = run_benchmark();
        all &= report(7, &criterion_7(&bench));
        all &= report(8, &criterion_8(&bench));
    } else {
        println!("criterion 7: SKIP (desk benchmark; pass --include-ignored)");
        println!("criterion 8: SKIP (desk benchmark; pass --include-ignored)");
    }
    if !all {
        std::process::exit(1);
    }
}
