//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.
//!
//! Real-data runs read `configs/*.json` from the workspace. The data
//! directory defaults to `<workspace>/data` and can be moved with
//! `RLSLAB_DATA_DIR`; fetch it with `scripts/fetch_datasets.py`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rlslab::bigarray::{ooc_gram, ooc_matmul, ooc_xty, BigArray, MemoryBudget};
use rlslab::eval::{encode_one_vs_all, Labels};
use rlslab::experiment::{run_experiment, ExperimentConfig, RunReport};
use rlslab::kernels::{apply_feature_map, gaussian_kernel, linear_kernel, sample_feature_map};
use rlslab::modelsel::lambda_grid;
use rlslab::options::OptionsStore;
use rlslab::pipeline::{run_pipeline, Category, OptionsView, Pipeline, TaskDescriptor, TaskMode, TaskRegistry};
use rlslab::rls::{build_path, eig_call_count, loo_residuals, predict, solve_at, train_dual, train_primal};
use rlslab::tasks::keys;
use rlslab::{Error, Mat};

// Tolerances, one per criterion.
const BENCHMARK_TOL_PP: f64 = 2.5;
const LOO_TOL: f64 = 1e-8;
const LOO_BUDGET_SECS: f64 = 30.0;
const PATH_TOL: f64 = 1e-8;
const PRIMAL_DUAL_REL_TOL: f64 = 1e-8;
const RF_D10000_MAX_ERR: f64 = 0.02;
const OOC_TOL: f64 = 1e-10;
const GOLDEN_HEADER_LEN: usize = 32;

type Criterion = (&'static str, fn() -> Outcome);

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Outcome {
            pass,
            detail: detail.into(),
        }
    }
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn data_dir() -> PathBuf {
    std::env::var_os("RLSLAB_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| workspace_root().join("data"))
}

fn rand_mat(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.gen_range(-1.0..1.0))
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, t: usize) -> Mat {
    Mat::from_fn(n, t, |_, _| if rng.gen_bool(0.5) { 1.0 } else { -1.0 })
}

/// Dense solve with partial pivoting, kept separate from the library solvers.
fn oracle_solve(a: &Mat, b: &Mat) -> Mat {
    let n = a.rows();
    let m = b.cols();
    let mut aug: Vec<Vec<f64>> = (0..n)
        .map(|i| a.row(i).iter().chain(b.row(i)).copied().collect())
        .collect();
    for col in 0..n {
        let p = (col..n)
            .max_by(|&i, &j| aug[i][col].abs().total_cmp(&aug[j][col].abs()))
            .unwrap();
        aug.swap(col, p);
        let pivot = aug[col].clone();
        for (r, row) in aug.iter_mut().enumerate() {
            if r != col {
                let f = row[col] / pivot[col];
                if f != 0.0 {
                    for (v, p) in row[col..].iter_mut().zip(&pivot[col..]) {
                        *v -= f * p;
                    }
                }
            }
        }
    }
    Mat::from_fn(n, m, |i, j| aug[i][n + j] / aug[i][i])
}

fn naive_matmul_tn(a: &Mat, b: &Mat) -> Mat {
    Mat::from_fn(a.cols(), b.cols(), |i, j| {
        (0..a.rows()).map(|r| a[(r, i)] * b[(r, j)]).sum()
    })
}

fn naive_matmul(a: &Mat, b: &Mat) -> Mat {
    Mat::from_fn(a.rows(), b.cols(), |i, j| {
        (0..a.cols()).map(|k| a[(i, k)] * b[(k, j)]).sum()
    })
}

// 1. Benchmark accuracies and the pendigits timing order.
fn benchmark_accuracy() -> Outcome {
    let targets = [
        ("optdigits_linear", 92.3),
        ("optdigits_gaussian", 98.3),
        ("optdigits_rf500", 96.8),
        ("pendigits_linear", 82.24),
        ("pendigits_gaussian", 98.4),
        ("landsat_gaussian", 90.4),
    ];
    let registry = TaskRegistry::with_builtins();
    let run = |name: &str| -> Result<RunReport, String> {
        let cfg_path = workspace_root().join("configs").join(format!("{name}.json"));
        let mut cfg = ExperimentConfig::from_file(&cfg_path).map_err(|e| e.to_string())?;
        let file = cfg.dataset.path.file_name().unwrap().to_owned();
        cfg.dataset.path = data_dir().join(file);
        cfg.output = None;
        run_experiment(&cfg, &registry).map_err(|e| e.to_string())
    };
    let mut pass = true;
    let mut parts = Vec::new();
    let mut times = std::collections::BTreeMap::new();
    for (name, target) in targets {
        match run(name) {
            Ok(r) => {
                let acc = 100.0 * r.performance.accuracy;
                let ok = (acc - target).abs() <= BENCHMARK_TOL_PP;
                pass &= ok;
                println!(
                    "    {name:<20} accuracy {acc:6.2}% (target {target:5.2} ± {BENCHMARK_TOL_PP}) {:>9.3}s {}",
                    r.timing.total_seconds,
                    if ok { "ok" } else { "OUT OF TOLERANCE" }
                );
                parts.push(format!("{name}={acc:.2}"));
                times.insert(name.to_string(), r.timing.total_seconds);
            }
            Err(e) => {
                pass = false;
                println!("    {name:<20} error: {e}");
                parts.push(format!("{name}=error"));
            }
        }
    }
    match run("pendigits_rf500") {
        Ok(r) => {
            println!(
                "    {:<20} accuracy {:6.2}% (timing only) {:>9.3}s",
                "pendigits_rf500",
                100.0 * r.performance.accuracy,
                r.timing.total_seconds
            );
            times.insert("pendigits_rf500".into(), r.timing.total_seconds);
        }
        Err(e) => println!("    pendigits_rf500      error: {e}"),
    }
    let order = match (
        times.get("pendigits_linear"),
        times.get("pendigits_rf500"),
        times.get("pendigits_gaussian"),
    ) {
        (Some(l), Some(f), Some(g)) => {
            let ok = l < f && f < g;
            parts.push(format!(
                "pendigits time linear {l:.3}s < rf500 {f:.3}s < gaussian {g:.3}s: {ok}"
            ));
            ok
        }
        _ => {
            parts.push("pendigits timing unavailable".into());
            false
        }
    };
    Outcome::new(pass && order, parts.join(", "))
}

/// Residuals from retraining without each sample, with the shift `nλ` kept.
fn brute_force_loo(k: &Mat, y: &Mat, lambda: f64) -> Mat {
    let n = k.rows();
    let shift = n as f64 * lambda;
    let mut out = Mat::zeros(n, y.cols());
    for i in 0..n {
        let keep: Vec<usize> = (0..n).filter(|&j| j != i).collect();
        let mut a = k.select(&keep, &keep);
        for j in 0..n - 1 {
            let v = a[(j, j)] + shift;
            a.as_mut_slice()[j * (n - 1) + j] = v;
        }
        let c = oracle_solve(&a, &y.select_rows(&keep));
        let f = naive_matmul(&k.select(&[i], &keep), &c);
        for t in 0..y.cols() {
            out.as_mut_slice()[i * y.cols() + t] = y[(i, t)] - f[(0, t)];
        }
    }
    out
}

// 2. Closed-form LOO against retraining.
fn loo_closed_form() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let n = rng.gen_range(5..=40);
        let t = rng.gen_range(1..=3);
        let rank = rng.gen_range(1..=n);
        let g = rand_mat(&mut rng, n, rank);
        let k = linear_kernel(&g, &g).unwrap().scaled(1.0 / rank as f64);
        let y = random_labels(&mut rng, n, t);
        let lambdas: Vec<f64> = {
            let mut v: Vec<f64> = (0..5).map(|_| 10f64.powf(rng.gen_range(-3.0..0.5))).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let path = build_path(&k, &y, &lambdas).unwrap();
        for &l in &lambdas {
            let fast = loo_residuals(&path, &y, l).unwrap();
            worst = worst.max(fast.max_abs_diff(&brute_force_loo(&k, &y, l)));
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst <= LOO_TOL && secs < LOO_BUDGET_SECS,
        format!("max |Δ| = {worst:.2e} (tol {LOO_TOL:e}), {secs:.2}s (budget {LOO_BUDGET_SECS}s)"),
    )
}

// 3. Regularization path against per-λ training, one eigendecomposition.
fn regularization_path() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let n = 60;
    let x = rand_mat(&mut rng, n, 5);
    let k = gaussian_kernel(&x, &x, 1.0).unwrap();
    let y = random_labels(&mut rng, n, 3);
    let eig_max = {
        let probe = build_path(&k, &y, &[1.0]).unwrap();
        probe.max_eigenvalue()
    };
    let grid = lambda_grid(eig_max, n, 400).unwrap();
    let before = eig_call_count();
    let path = build_path(&k, &y, &grid).unwrap();
    let mut solutions = Vec::with_capacity(grid.len());
    for &l in &grid {
        solutions.push(solve_at(&path, l).unwrap());
    }
    let eigs = eig_call_count() - before;
    let mut worst: f64 = 0.0;
    for (c, &l) in solutions.iter().zip(&grid) {
        let direct = train_dual(&k, &y, l).unwrap();
        worst = worst.max(c.max_abs_diff(direct.coeffs().unwrap()));
    }
    Outcome::new(
        worst <= PATH_TOL && eigs == 1,
        format!("400-point grid, max |Δ| = {worst:.2e} (tol {PATH_TOL:e}), eigendecompositions = {eigs}"),
    )
}

// 4. Primal and dual predictions with the linear kernel.
fn primal_dual() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(2..=50);
        let d = rng.gen_range(1..=50);
        let t = rng.gen_range(1..=3);
        let x = rand_mat(&mut rng, n, d);
        let y = random_labels(&mut rng, n, t);
        let x_test = rand_mat(&mut rng, 10, d);
        let lambda = 10f64.powf(rng.gen_range(-3.0..0.0));
        let p = predict(&train_primal(&x, &y, lambda).unwrap(), &x_test).unwrap();
        let dual = train_dual(&linear_kernel(&x, &x).unwrap(), &y, lambda)
            .unwrap()
            .with_kernel(rlslab::kernels::KernelSpec::Linear, std::sync::Arc::new(x.clone()))
            .unwrap();
        let q = predict(&dual, &x_test).unwrap();
        worst = worst.max(p.max_abs_diff(&q) / p.max_abs().max(f64::MIN_POSITIVE));
    }
    Outcome::new(
        worst <= PRIMAL_DUAL_REL_TOL,
        format!("20 instances, max relative difference {worst:.2e} (tol {PRIMAL_DUAL_REL_TOL:e})"),
    )
}

// 5. Random feature approximation error versus D.
fn random_features() -> Outcome {
    let d = 5;
    let sigma = 1.0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let pts = Mat::from_fn(200, d, |_, _| {
        let z: f64 = StandardNormal.sample(&mut rng);
        0.5 * z
    });
    let a = pts.row_range(0, 100);
    let b = pts.row_range(100, 200);
    let exact: Vec<f64> = (0..100)
        .map(|i| {
            let s: f64 = a.row(i).iter().zip(b.row(i)).map(|(u, v)| (u - v) * (u - v)).sum();
            (-s / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let mean_err = |n_features: usize| -> f64 {
        let seeds = 20;
        let mut total = 0.0;
        for seed in 0..seeds {
            let fm = sample_feature_map(d, n_features, sigma, seed).unwrap();
            let za = apply_feature_map(&a, &fm).unwrap();
            let zb = apply_feature_map(&b, &fm).unwrap();
            let err: f64 = (0..100)
                .map(|i| {
                    let dot: f64 = za.row(i).iter().zip(zb.row(i)).map(|(u, v)| u * v).sum();
                    (dot - exact[i]).abs()
                })
                .sum::<f64>()
                / 100.0;
            total += err;
        }
        total / seeds as f64
    };
    let errs: Vec<f64> = [100, 400, 1600].iter().map(|&dd| mean_err(dd)).collect();
    let e10k = mean_err(10_000);
    let decreasing = errs.windows(2).all(|w| w[1] < w[0]);
    Outcome::new(
        decreasing && e10k < RF_D10000_MAX_ERR,
        format!(
            "mean error D=100: {:.4}, D=400: {:.4}, D=1600: {:.4}, D=10000: {e10k:.4} (limit {RF_D10000_MAX_ERR})",
            errs[0], errs[1], errs[2]
        ),
    )
}

// 6. Out-of-core products against in-core oracles.
fn out_of_core() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let shapes = [(5000, 64, 3), (1234, 17, 2), (311, 8, 5)];
    let mut worst: f64 = 0.0;
    let mut bitwise = true;
    let budget = MemoryBudget::default();
    for (si, &(n, d, t)) in shapes.iter().enumerate() {
        let x = rand_mat(&mut rng, n, d);
        let y = rand_mat(&mut rng, n, t);
        let b = rand_mat(&mut rng, d, t);
        let g_ref = naive_matmul_tn(&x, &x);
        let r_ref = naive_matmul_tn(&x, &y);
        let m_ref = naive_matmul(&x, &b);
        for chunk in [1, 97, n + 1] {
            let tag = format!("{si}_{chunk}");
            let bx = BigArray::from_mat(dir.path().join(format!("x{tag}.gba")), &x, chunk).unwrap();
            let by = BigArray::from_mat(dir.path().join(format!("y{tag}.gba")), &y, chunk).unwrap();
            worst = worst.max(ooc_gram(&bx, budget).unwrap().max_abs_diff(&g_ref));
            worst = worst.max(ooc_xty(&bx, &by, budget).unwrap().max_abs_diff(&r_ref));
            let mut outputs = Vec::new();
            for workers in [1, 2, 8] {
                let p = dir.path().join(format!("o{tag}_{workers}.gba"));
                let out = BigArray::create(&p, n, t, chunk).unwrap();
                ooc_matmul(&bx, &b, &out, workers).unwrap();
                worst = worst.max(out.to_mat().unwrap().max_abs_diff(&m_ref));
                drop(out);
                outputs.push(std::fs::read(&p).unwrap());
            }
            bitwise &= outputs.windows(2).all(|w| w[0] == w[1]);
        }
    }
    Outcome::new(
        worst <= OOC_TOL && bitwise,
        format!(
            "shapes up to 5000x64, chunks {{1, 97, n+1}}: max |Δ| = {worst:.2e} (tol {OOC_TOL:e}); matmul bitwise across workers {{1,2,8}}: {bitwise}"
        ),
    )
}

fn blobs(seed: u64, n_per: usize) -> (Mat, Labels, Mat, Labels) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [[-3.0, 0.0], [3.0, 0.0], [0.0, 4.0]];
    let mut draw = |count: usize| {
        let mut rows = Vec::new();
        let mut ids = Vec::new();
        for (c, center) in centers.iter().enumerate() {
            for _ in 0..count {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                rows.push(vec![center[0] + 0.4 * a, center[1] + 0.4 * b]);
                ids.push(c);
            }
        }
        (Mat::from_rows(&rows).unwrap(), Labels(ids))
    };
    let (x, l) = draw(n_per);
    let (xt, lt) = draw(n_per / 2);
    (x, l, xt, lt)
}

fn blob_store(seed: u64) -> OptionsStore {
    let (x, labels, x_test, labels_test) = blobs(seed, 30);
    let mut s = OptionsStore::new();
    s.insert(keys::Y, encode_one_vs_all(&labels, 3).unwrap()).unwrap();
    s.insert(keys::X, x).unwrap();
    s.insert(keys::LABELS, labels.0).unwrap();
    s.insert(keys::X_TEST, x_test).unwrap();
    s.insert(keys::LABELS_TEST, labels_test.0).unwrap();
    s.insert("opts.split.seed", seed).unwrap();
    s
}

fn six_tasks(kernel: &str, paramsel: &str, form: &str) -> Pipeline {
    Pipeline::new(
        "blobs",
        vec![
            TaskDescriptor::run(Category::Split, "holdout"),
            TaskDescriptor::run(Category::Kernel, kernel),
            TaskDescriptor::run(Category::Paramsel, paramsel),
            TaskDescriptor::run(Category::Rls, form),
            TaskDescriptor::run(Category::Pred, form),
            TaskDescriptor::run(Category::Perf, "accuracy"),
        ],
    )
}

// 7. Pipeline semantics.
fn pipeline_semantics() -> Outcome {
    let mut registry = TaskRegistry::with_builtins();
    let mut notes = Vec::new();

    // injection: run everything, then re-run with paramsel injected
    let full = run_pipeline(&six_tasks("gaussian", "holdout_dual", "dual"), &registry, blob_store(0)).unwrap();
    let mut seeded = blob_store(0);
    for cat in [Category::Split, Category::Kernel, Category::Paramsel] {
        let key = cat.result_key();
        seeded.insert(&key, full.store(&key).unwrap().clone()).unwrap();
    }
    let mut injected = six_tasks("gaussian", "holdout_dual", "dual");
    for t in injected.tasks.iter_mut().take(3) {
        t.mode = TaskMode::Inject;
    }
    let resumed = run_pipeline(&injected, &registry, seeded).unwrap();
    let injection_ok = resumed == full;
    notes.push(format!("injection equivalence (bitwise): {injection_ok}"));

    // read-only view
    registry
        .register(Category::Kernel, "misbehaving", &[], |v: &OptionsView| {
            let _ = v.try_insert("results.kernel.kind", "linear");
            let mut out = OptionsStore::new();
            out.insert("kind", "linear")?;
            Ok(out)
        })
        .unwrap();
    let read_only_ok = matches!(
        run_pipeline(&six_tasks("misbehaving", "holdout_primal", "primal"), &registry, blob_store(0)),
        Err(Error::Task { ref source, .. }) if matches!(**source, Error::ContractViolation(_))
    );
    notes.push(format!("read-only enforcement: {read_only_ok}"));

    // six categories on separable data, five noise seeds
    let mut accs = Vec::new();
    for seed in 0..5 {
        for (k, p, f) in [
            ("gaussian", "holdout_dual", "dual"),
            ("linear", "holdout_primal", "primal"),
        ] {
            let out = run_pipeline(&six_tasks(k, p, f), &registry, blob_store(seed)).unwrap();
            let again = run_pipeline(&six_tasks(k, p, f), &registry, blob_store(seed)).unwrap();
            let acc = out.f64("results.perf.accuracy").unwrap();
            accs.push(if out == again { acc } else { -1.0 });
        }
    }
    let blobs_ok = accs.iter().all(|&a| a == 1.0);
    notes.push(format!(
        "blob accuracies over 5 seeds x 2 pipelines all 1.0 and repeatable: {blobs_ok}"
    ));
    Outcome::new(injection_ok && read_only_ok && blobs_ok, notes.join("; "))
}

// 8. Golden bigarray bytes.
fn golden_bigarray() -> Outcome {
    #[rustfmt::skip]
    let expected: Vec<u8> = [
        vec![b'G', b'B', b'A', b'1'],
        vec![1, 0, 0, 0],
        vec![3, 0, 0, 0, 0, 0, 0, 0],
        vec![2, 0, 0, 0, 0, 0, 0, 0],
        vec![2, 0, 0, 0, 0, 0, 0, 0],
        // 1.0, 2.0, 3.0, 4.0, 5.0, 6.0 as little-endian IEEE-754
        vec![0, 0, 0, 0, 0, 0, 0xf0, 0x3f],
        vec![0, 0, 0, 0, 0, 0, 0x00, 0x40],
        vec![0, 0, 0, 0, 0, 0, 0x08, 0x40],
        vec![0, 0, 0, 0, 0, 0, 0x10, 0x40],
        vec![0, 0, 0, 0, 0, 0, 0x14, 0x40],
        vec![0, 0, 0, 0, 0, 0, 0x18, 0x40],
    ]
    .concat();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("golden.gba");
    let m = Mat::from_rows(&[[1.0, 2.0], [3.0, 4.0], [5.0, 6.0]]).unwrap();
    drop(BigArray::from_mat(&p, &m, 2).unwrap());
    let bytes = std::fs::read(&p).unwrap();
    let ok = bytes == expected && bytes.len() == GOLDEN_HEADER_LEN + 48;
    Outcome::new(
        ok,
        format!("{} bytes, header {:02x?}", bytes.len(), &bytes[..GOLDEN_HEADER_LEN]),
    )
}

fn main() -> ExitCode {
    let criteria: [Criterion; 8] = [
        ("1 benchmark accuracies and pendigits time order", benchmark_accuracy),
        ("2 closed-form leave-one-out", loo_closed_form),
        ("3 regularization path, single eigendecomposition", regularization_path),
        ("4 primal-dual agreement", primal_dual),
        ("5 random feature convergence", random_features),
        ("6 out-of-core fidelity", out_of_core),
        ("7 pipeline semantics", pipeline_semantics),
        ("8 golden bigarray bytes", golden_bigarray),
    ];
    let only: Option<String> = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failures = 0;
    for (name, check) in criteria {
        if let Some(filter) = &only {
            if !name.contains(filter.as_str()) {
                continue;
            }
        }
        let start = Instant::now();
        let outcome = std::panic::catch_unwind(check).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Outcome::new(false, format!("panicked: {msg}"))
        });
        if !outcome.pass {
            failures += 1;
        }
        println!(
            "{} criterion {name}: {} [{:.1}s]",
            if outcome.pass { "PASS" } else { "FAIL" },
            outcome.detail,
            start.elapsed().as_secs_f64()
        );
    }
    if failures == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failures} criterion/criteria failed");
        ExitCode::FAILURE
    }
}
