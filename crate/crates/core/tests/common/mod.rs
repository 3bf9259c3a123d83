#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use rlslab::eval::{encode_one_vs_all, Labels};
use rlslab::options::OptionsStore;
use rlslab::pipeline::{Category, Pipeline, TaskDescriptor};
use rlslab::tasks::keys;
use rlslab::Mat;

pub const CENTERS: [[f64; 2]; 3] = [[-3.0, 0.0], [3.0, 0.0], [0.0, 4.0]];

/// Three well separated Gaussian blobs, `n_per` points each.
pub fn blobs(seed: u64, n_per: usize) -> (Mat, Labels) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut ids = Vec::new();
    for (c, center) in CENTERS.iter().enumerate() {
        for _ in 0..n_per {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            rows.push(vec![center[0] + 0.4 * a, center[1] + 0.4 * b]);
            ids.push(c);
        }
    }
    (Mat::from_rows(&rows).unwrap(), Labels(ids))
}

pub fn blob_store(seed: u64) -> OptionsStore {
    let (x, labels) = blobs(seed, 30);
    let (x_test, labels_test) = blobs(seed + 1000, 15);
    let mut s = OptionsStore::new();
    s.insert(keys::Y, encode_one_vs_all(&labels, 3).unwrap()).unwrap();
    s.insert(keys::X, x).unwrap();
    s.insert(keys::LABELS, labels.0).unwrap();
    s.insert(keys::X_TEST, x_test).unwrap();
    s.insert(keys::LABELS_TEST, labels_test.0).unwrap();
    s.insert("opts.split.seed", seed).unwrap();
    s.insert("opts.kernel.seed", seed).unwrap();
    s
}

pub fn six_tasks(kernel: &str, paramsel: &str, form: &str) -> Pipeline {
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

/// Writes blobs as `x0,x1,label` CSV rows, training rows first.
pub fn write_blobs_csv(path: &std::path::Path, seed: u64) -> usize {
    let (x, l) = blobs(seed, 30);
    let (xt, lt) = blobs(seed + 1000, 15);
    let mut out = String::new();
    for (m, labels) in [(&x, &l), (&xt, &lt)] {
        for i in 0..m.rows() {
            out.push_str(&format!("{},{},{}\n", m[(i, 0)], m[(i, 1)], labels.0[i] + 1));
        }
    }
    std::fs::write(path, out).unwrap();
    x.rows()
}
