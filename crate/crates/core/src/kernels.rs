//! Kernel computation: linear and Gaussian kernels, bandwidth selection from
//! pairwise distances, and random Fourier features for the Gaussian kernel.

use std::f64::consts::TAU;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{matmul, matmul_nt, pairwise_sq_dists};
use crate::mat::Mat;

/// Default quantile of pairwise distances used as the Gaussian bandwidth.
pub const DEFAULT_SIGMA_QUANTILE: f64 = 0.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum KernelSpec {
    Linear,
    Gaussian { sigma: f64 },
}

impl KernelSpec {
    pub fn gaussian(sigma: f64) -> Result<Self> {
        check_sigma(sigma)?;
        Ok(KernelSpec::Gaussian { sigma })
    }

    pub fn name(&self) -> &'static str {
        match self {
            KernelSpec::Linear => "linear",
            KernelSpec::Gaussian { .. } => "gaussian",
        }
    }

    /// Kernel matrix between the rows of `x1` and `x2`.
    pub fn compute(&self, x1: &Mat, x2: &Mat) -> Result<Mat> {
        match *self {
            KernelSpec::Linear => linear_kernel(x1, x2),
            KernelSpec::Gaussian { sigma } => gaussian_kernel(x1, x2, sigma),
        }
    }
}

fn check_sigma(sigma: f64) -> Result<()> {
    if sigma.is_finite() && sigma > 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!("sigma must be finite and > 0, got {sigma}")))
    }
}

/// `x1 · x2ᵀ`
pub fn linear_kernel(x1: &Mat, x2: &Mat) -> Result<Mat> {
    matmul_nt(x1, x2)
}

/// `exp(-‖a - b‖² / (2σ²))` for every row pair.
pub fn gaussian_kernel(x1: &Mat, x2: &Mat, sigma: f64) -> Result<Mat> {
    check_sigma(sigma)?;
    let mut k = pairwise_sq_dists(x1, x2)?;
    let scale = -1.0 / (2.0 * sigma * sigma);
    k.as_mut_slice()
        .par_iter_mut()
        // keep entries strictly positive even when exp underflows
        .for_each(|v| *v = (*v * scale).exp().max(f64::MIN_POSITIVE));
    Ok(k)
}

/// Bandwidth from the `quantile`-th order statistic of the `n(n-1)/2`
/// Euclidean distances between distinct rows of `x`.
///
/// The order statistic is taken by nearest rank: the `⌈q·m⌉`-th smallest of the
/// `m` distances. If that distance is zero (heavily duplicated rows) the
/// smallest positive distance is returned instead.
pub fn sigma_from_distances(x: &Mat, quantile: f64) -> Result<f64> {
    if x.rows() < 2 {
        return Err(Error::Parameter(format!(
            "need at least 2 rows to estimate sigma, got {}",
            x.rows()
        )));
    }
    if !(quantile > 0.0 && quantile < 1.0) {
        return Err(Error::Parameter(format!("quantile must lie in (0, 1), got {quantile}")));
    }
    let mut dists = pair_distances(x);
    let m = dists.len();
    let rank = ((quantile * m as f64).ceil() as usize).clamp(1, m);
    let (_, &mut pick, _) = dists.select_nth_unstable_by(rank - 1, f64::total_cmp);
    if pick > 0.0 {
        return Ok(pick);
    }
    let smallest_positive = dists.iter().copied().filter(|&d| d > 0.0).fold(f64::INFINITY, f64::min);
    if smallest_positive.is_finite() {
        Ok(smallest_positive)
    } else {
        Err(Error::DegenerateData(
            "all rows are identical; sigma is undefined".into(),
        ))
    }
}

/// Upper-triangle distances in row-major pair order.
fn pair_distances(x: &Mat) -> Vec<f64> {
    let n = x.rows();
    (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let a = x.row(i);
            ((i + 1)..n).map(move |j| {
                a.iter()
                    .zip(x.row(j))
                    .map(|(p, q)| (p - q) * (p - q))
                    .sum::<f64>()
                    .sqrt()
            })
        })
        .collect()
}

/// Random Fourier feature map approximating a Gaussian kernel of width `sigma`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    /// `d x D` frequencies, entries `N(0, 1/σ²)`.
    pub omega: Mat,
    /// `D` phases in `[0, 2π)`.
    pub phases: Vec<f64>,
    pub sigma: f64,
    pub seed: u64,
}

impl FeatureMap {
    pub fn input_dim(&self) -> usize {
        self.omega.rows()
    }

    pub fn n_features(&self) -> usize {
        self.phases.len()
    }
}

/// Draws a feature map. Frequencies are drawn first (row-major), then phases,
/// from a ChaCha8 stream seeded with `seed`.
pub fn sample_feature_map(d: usize, n_features: usize, sigma: f64, seed: u64) -> Result<FeatureMap> {
    if d == 0 || n_features == 0 {
        return Err(Error::Parameter(format!(
            "feature map needs d >= 1 and D >= 1, got d={d}, D={n_features}"
        )));
    }
    check_sigma(sigma)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0 / sigma).map_err(|e| Error::Parameter(format!("frequency distribution: {e}")))?;
    let omega = Mat::from_fn(d, n_features, |_, _| normal.sample(&mut rng));
    let phases = (0..n_features).map(|_| rng.gen_range(0.0..TAU)).collect();
    Ok(FeatureMap {
        omega,
        phases,
        sigma,
        seed,
    })
}

/// `z = √(2/D) · cos(x·Ω + b)`.
pub fn apply_feature_map(x: &Mat, fm: &FeatureMap) -> Result<Mat> {
    if x.cols() != fm.input_dim() {
        return Err(Error::shape(
            "apply_feature_map",
            format!("input has {} columns, map expects {}", x.cols(), fm.input_dim()),
        ));
    }
    let mut z = matmul(x, &fm.omega)?;
    let amp = (2.0 / fm.n_features() as f64).sqrt();
    let d = fm.n_features();
    z.as_mut_slice().par_chunks_mut(d).for_each(|row| {
        for (v, &b) in row.iter_mut().zip(&fm.phases) {
            *v = amp * (*v + b).cos();
        }
    });
    Ok(z)
}
