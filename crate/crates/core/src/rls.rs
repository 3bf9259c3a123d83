//! Regularized least squares: primal and dual solvers, regularization paths
//! from a single eigendecomposition, and closed-form leave-one-out residuals.
//!
//! The regularizer enters the shifted system as `nλ`, `n` being the number of
//! training samples:
//!
//! * primal: `W = (XᵀX + nλI)⁻¹ XᵀY`  (`d x T`)
//! * dual:   `C = (K + nλI)⁻¹ Y`      (`n x T`)
//!
//! All solvers work on `n x T` label matrices, one column per output.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::kernels::{apply_feature_map, FeatureMap, KernelSpec};
use crate::linalg::{self, gram, matmul, matmul_tn, shifted_solve, sym_eig, xty, EigPair};
use crate::mat::Mat;

/// Threshold on `1 - S_ii` below which the leave-one-out formula is rejected.
pub const LEVERAGE_EPS: f64 = 1e-12;

#[derive(Clone, Debug)]
pub enum Solution {
    /// Weights over input features, or over random features when `features` is set.
    Primal { weights: Mat, features: Option<FeatureMap> },
    /// Coefficients over training samples.
    Dual {
        coeffs: Mat,
        kernel: KernelSpec,
        train_x: Option<Arc<Mat>>,
    },
}

/// A trained predictor.
#[derive(Clone, Debug)]
pub struct RlsModel {
    pub solution: Solution,
    /// Regularization parameter used at training time.
    pub lambda: f64,
    /// Set when each output column was trained with its own parameter.
    pub output_lambdas: Option<Vec<f64>>,
}

impl RlsModel {
    pub fn is_primal(&self) -> bool {
        matches!(self.solution, Solution::Primal { .. })
    }

    pub fn n_outputs(&self) -> usize {
        match &self.solution {
            Solution::Primal { weights, .. } => weights.cols(),
            Solution::Dual { coeffs, .. } => coeffs.cols(),
        }
    }

    /// Primal weights, if this is a primal model.
    pub fn weights(&self) -> Option<&Mat> {
        match &self.solution {
            Solution::Primal { weights, .. } => Some(weights),
            Solution::Dual { .. } => None,
        }
    }

    /// Dual coefficients, if this is a dual model.
    pub fn coeffs(&self) -> Option<&Mat> {
        match &self.solution {
            Solution::Dual { coeffs, .. } => Some(coeffs),
            Solution::Primal { .. } => None,
        }
    }

    /// Attaches the kernel and training inputs a dual model needs for prediction.
    pub fn with_kernel(mut self, spec: KernelSpec, x: Arc<Mat>) -> Result<Self> {
        match &mut self.solution {
            Solution::Dual {
                coeffs,
                kernel,
                train_x,
            } => {
                if x.rows() != coeffs.rows() {
                    return Err(Error::shape(
                        "RlsModel::with_kernel",
                        format!("{} training rows for {} coefficients", x.rows(), coeffs.rows()),
                    ));
                }
                *kernel = spec;
                *train_x = Some(x);
                Ok(self)
            }
            Solution::Primal { .. } => Err(Error::State("kernel attached to a primal model".into())),
        }
    }

    /// Marks a primal model as operating on random features of its input.
    pub fn with_features(mut self, fm: FeatureMap) -> Result<Self> {
        match &mut self.solution {
            Solution::Primal { weights, features } => {
                if fm.n_features() != weights.rows() {
                    return Err(Error::shape(
                        "RlsModel::with_features",
                        format!("{} features for {} weight rows", fm.n_features(), weights.rows()),
                    ));
                }
                *features = Some(fm);
                Ok(self)
            }
            Solution::Dual { .. } => Err(Error::State("feature map attached to a dual model".into())),
        }
    }
}

fn check_lambda(lambda: f64) -> Result<()> {
    if lambda.is_finite() && lambda >= 0.0 {
        Ok(())
    } else {
        Err(Error::Parameter(format!(
            "lambda must be finite and >= 0, got {lambda}"
        )))
    }
}

fn zero_lambda_hint(err: Error, lambda: f64) -> Error {
    if lambda > 0.0 {
        return err;
    }
    match err {
        Error::NotPositiveDefinite { .. } | Error::Numeric(_) => {
            Error::Numeric(format!("singular system at lambda = 0 ({err}); use lambda > 0"))
        }
        other => other,
    }
}

/// Primal training: `W = (XᵀX + nλI)⁻¹XᵀY`.
pub fn train_primal(x: &Mat, y: &Mat, lambda: f64) -> Result<RlsModel> {
    check_lambda(lambda)?;
    if x.rows() != y.rows() {
        return Err(Error::shape(
            "train_primal",
            format!("{} samples in x, {} in y", x.rows(), y.rows()),
        ));
    }
    let n = x.rows() as f64;
    let g = gram(x);
    let r = xty(x, y)?;
    let weights = shifted_solve(&g, &r, n * lambda).map_err(|e| zero_lambda_hint(e, lambda))?;
    Ok(RlsModel {
        solution: Solution::Primal {
            weights,
            features: None,
        },
        lambda,
        output_lambdas: None,
    })
}

/// Primal training with one regularization parameter per output column.
pub fn train_primal_per_output(x: &Mat, y: &Mat, lambdas: &[f64]) -> Result<RlsModel> {
    if lambdas.len() != y.cols() {
        return Err(Error::shape(
            "train_primal_per_output",
            format!("{} lambdas for {} outputs", lambdas.len(), y.cols()),
        ));
    }
    if x.rows() != y.rows() {
        return Err(Error::shape(
            "train_primal_per_output",
            format!("{} samples in x, {} in y", x.rows(), y.rows()),
        ));
    }
    let n = x.rows() as f64;
    let g = gram(x);
    let r = xty(x, y)?;
    let mut weights = Mat::zeros(x.cols(), y.cols());
    for (t, &lambda) in lambdas.iter().enumerate() {
        check_lambda(lambda)?;
        let col = Mat::column_vector(&r.column(t));
        let w = shifted_solve(&g, &col, n * lambda).map_err(|e| zero_lambda_hint(e, lambda))?;
        for i in 0..x.cols() {
            weights[(i, t)] = w[(i, 0)];
        }
    }
    Ok(RlsModel {
        solution: Solution::Primal {
            weights,
            features: None,
        },
        lambda: lambdas.iter().copied().fold(f64::NAN, f64::max),
        output_lambdas: Some(lambdas.to_vec()),
    })
}

/// Dual training: `C = (K + nλI)⁻¹Y`. The returned model carries a linear
/// kernel and no training inputs; attach them with [`RlsModel::with_kernel`].
pub fn train_dual(k: &Mat, y: &Mat, lambda: f64) -> Result<RlsModel> {
    check_lambda(lambda)?;
    if !k.is_square() || k.rows() != y.rows() {
        return Err(Error::shape(
            "train_dual",
            format!("kernel {:?}, labels {:?}", k.shape(), y.shape()),
        ));
    }
    let n = k.rows() as f64;
    let coeffs = shifted_solve(k, y, n * lambda).map_err(|e| zero_lambda_hint(e, lambda))?;
    Ok(RlsModel {
        solution: Solution::Dual {
            coeffs,
            kernel: KernelSpec::Linear,
            train_x: None,
        },
        lambda,
        output_lambdas: None,
    })
}

/// Dual training with one regularization parameter per output column.
pub fn train_dual_per_output(k: &Mat, y: &Mat, lambdas: &[f64]) -> Result<RlsModel> {
    if lambdas.len() != y.cols() || !k.is_square() || k.rows() != y.rows() {
        return Err(Error::shape(
            "train_dual_per_output",
            format!(
                "kernel {:?}, labels {:?}, {} lambdas",
                k.shape(),
                y.shape(),
                lambdas.len()
            ),
        ));
    }
    let n = k.rows();
    let mut coeffs = Mat::zeros(n, y.cols());
    for (t, &lambda) in lambdas.iter().enumerate() {
        check_lambda(lambda)?;
        let col = Mat::column_vector(&y.column(t));
        let c = shifted_solve(k, &col, n as f64 * lambda).map_err(|e| zero_lambda_hint(e, lambda))?;
        for i in 0..n {
            coeffs[(i, t)] = c[(i, 0)];
        }
    }
    Ok(RlsModel {
        solution: Solution::Dual {
            coeffs,
            kernel: KernelSpec::Linear,
            train_x: None,
        },
        lambda: lambdas.iter().copied().fold(f64::NAN, f64::max),
        output_lambdas: Some(lambdas.to_vec()),
    })
}

/// `m x T` scores for `x_test`.
pub fn predict(model: &RlsModel, x_test: &Mat) -> Result<Mat> {
    match &model.solution {
        Solution::Primal { weights, features } => {
            let mapped;
            let inputs = match features {
                Some(fm) => {
                    mapped = apply_feature_map(x_test, fm)?;
                    &mapped
                }
                None => x_test,
            };
            if inputs.cols() != weights.rows() {
                return Err(Error::shape(
                    "predict",
                    format!(
                        "test inputs have {} columns, model expects {}",
                        inputs.cols(),
                        weights.rows()
                    ),
                ));
            }
            matmul(inputs, weights)
        }
        Solution::Dual {
            coeffs,
            kernel,
            train_x,
        } => {
            let train_x = train_x
                .as_ref()
                .ok_or_else(|| Error::State("dual model has no training inputs attached".into()))?;
            if x_test.cols() != train_x.cols() {
                return Err(Error::shape(
                    "predict",
                    format!(
                        "test inputs have {} columns, model expects {}",
                        x_test.cols(),
                        train_x.cols()
                    ),
                ));
            }
            let k = kernel.compute(x_test, train_x)?;
            matmul(&k, coeffs)
        }
    }
}

/// Everything needed to evaluate the solution at any λ without refactoring.
#[derive(Clone, Debug)]
pub struct RegPath {
    pub eig: EigPair,
    /// `Qᵀ · rhs`, where `rhs` is `Y` (dual) or `XᵀY` (primal).
    pub qty: Mat,
    /// Ascending, strictly positive grid.
    pub lambdas: Vec<f64>,
    /// Sample count `n` used in the `nλ` shift.
    pub n_samples: usize,
    labels: Option<Mat>,
}

fn check_grid(lambdas: &[f64]) -> Result<()> {
    if lambdas.is_empty() {
        return Err(Error::Parameter("empty lambda grid".into()));
    }
    if lambdas.iter().any(|&l| !(l.is_finite() && l > 0.0)) {
        return Err(Error::Parameter("lambda grid values must be finite and > 0".into()));
    }
    if lambdas.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Parameter("lambda grid must be strictly increasing".into()));
    }
    Ok(())
}

/// Dual regularization path for kernel `k` and labels `y`: one eigendecomposition.
pub fn build_path(k: &Mat, y: &Mat, lambdas: &[f64]) -> Result<RegPath> {
    check_grid(lambdas)?;
    if !k.is_square() || k.rows() != y.rows() {
        return Err(Error::shape(
            "build_path",
            format!("kernel {:?}, labels {:?}", k.shape(), y.shape()),
        ));
    }
    RegPath::from_eig(sym_eig(k)?, y, lambdas.to_vec(), k.rows(), true)
}

/// Primal regularization path from `XᵀX` (`d x d`) and `XᵀY` (`d x T`).
pub fn build_primal_path(xtx: &Mat, xty: &Mat, n_samples: usize, lambdas: &[f64]) -> Result<RegPath> {
    check_grid(lambdas)?;
    if !xtx.is_square() || xtx.rows() != xty.rows() {
        return Err(Error::shape(
            "build_primal_path",
            format!("XᵀX {:?}, XᵀY {:?}", xtx.shape(), xty.shape()),
        ));
    }
    RegPath::from_eig(sym_eig(xtx)?, xty, lambdas.to_vec(), n_samples, false)
}

impl RegPath {
    /// Path from an existing eigendecomposition. `rhs` is `Y` for a dual path
    /// (kept for leave-one-out) and `XᵀY` for a primal one.
    pub fn from_eig(eig: EigPair, rhs: &Mat, lambdas: Vec<f64>, n_samples: usize, dual: bool) -> Result<Self> {
        check_grid(&lambdas)?;
        if eig.dim() != rhs.rows() {
            return Err(Error::shape(
                "RegPath::from_eig",
                format!("eigenbasis of size {}, rhs {:?}", eig.dim(), rhs.shape()),
            ));
        }
        let qty = matmul_tn(&eig.vectors, rhs)?;
        Ok(RegPath {
            eig,
            qty,
            lambdas,
            n_samples,
            labels: dual.then(|| rhs.clone()),
        })
    }

    fn inverse_shifted(&self, lambda: f64) -> Result<Vec<f64>> {
        if !(lambda.is_finite() && lambda > 0.0) {
            return Err(Error::Parameter(format!("lambda must be finite and > 0, got {lambda}")));
        }
        let shift = self.n_samples as f64 * lambda;
        self.eig
            .values
            .iter()
            .map(|&l| {
                let s = l + shift;
                if s > 0.0 {
                    Ok(1.0 / s)
                } else {
                    Err(Error::Numeric(format!(
                        "eigenvalue {l:e} + shift {shift:e} is not positive"
                    )))
                }
            })
            .collect()
    }

    /// `diag(1/(Λ + nλ)) · QᵀY`
    fn scaled_qty(&self, lambda: f64) -> Result<Mat> {
        let inv = self.inverse_shifted(lambda)?;
        let mut s = self.qty.clone();
        for (i, &f) in inv.iter().enumerate() {
            s.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        Ok(s)
    }

    /// `m · Q`, the projection used by [`RegPath::scores_at`].
    pub fn project(&self, m: &Mat) -> Result<Mat> {
        matmul(m, &self.eig.vectors)
    }

    /// Scores `A · solution(λ)` given `projected = A · Q`, in `O(m·n·T)`.
    pub fn scores_at(&self, projected: &Mat, lambda: f64) -> Result<Mat> {
        matmul(projected, &self.scaled_qty(lambda)?)
    }

    pub fn max_eigenvalue(&self) -> f64 {
        self.eig.max_value()
    }
}

/// `Q · diag(1/(Λᵢ + nλ)) · QᵀY`: coefficients (dual) or weights (primal) at `lambda`.
pub fn solve_at(path: &RegPath, lambda: f64) -> Result<Mat> {
    let scaled = path.scaled_qty(lambda)?;
    matmul(&path.eig.vectors, &scaled)
}

/// Exact leave-one-out residuals `(y_it − f_t(x_i)) / (1 − S_ii)` for a dual
/// path, with `S = K(K + nλI)⁻¹`.
///
/// The left-out model is the one trained on the remaining `n − 1` samples with
/// the same shift `nλ`. Since `y − f = nλ·C` and `1 − S_ii = nλ·[(K + nλI)⁻¹]_ii`,
/// the residual is evaluated as `C_it / [(K + nλI)⁻¹]_ii`, which avoids the
/// cancellation in `y − f` at small λ.
pub fn loo_residuals(path: &RegPath, y: &Mat, lambda: f64) -> Result<Mat> {
    let Some(labels) = &path.labels else {
        return Err(Error::State("leave-one-out residuals need a dual path".into()));
    };
    if y.shape() != labels.shape() {
        return Err(Error::shape(
            "loo_residuals",
            format!("labels {:?}, path built for {:?}", y.shape(), labels.shape()),
        ));
    }
    let inv = path.inverse_shifted(lambda)?;
    let q = &path.eig.vectors;
    let n = path.n_samples;
    let shift = n as f64 * lambda;
    let coeffs = if y == labels {
        solve_at(path, lambda)?
    } else {
        let mut s = matmul_tn(q, y)?;
        for (i, &f) in inv.iter().enumerate() {
            s.row_mut(i).iter_mut().for_each(|v| *v *= f);
        }
        matmul(q, &s)?
    };
    let mut out = coeffs;
    for i in 0..n {
        let g_ii: f64 = q.row(i).iter().zip(&inv).map(|(v, f)| v * v * f).sum();
        let margin = shift * g_ii;
        if margin.is_nan() || margin <= LEVERAGE_EPS {
            return Err(Error::DegenerateLeverage { index: i, margin });
        }
        out.row_mut(i).iter_mut().for_each(|v| *v /= g_ii);
    }
    Ok(out)
}

/// Leave-one-out predictions `y − residual`.
pub fn loo_predictions(path: &RegPath, y: &Mat, lambda: f64) -> Result<Mat> {
    let r = loo_residuals(path, y, lambda)?;
    y.sub(&r)
}

/// Number of eigendecompositions performed so far on this thread.
pub fn eig_call_count() -> usize {
    linalg::eig_call_count()
}
