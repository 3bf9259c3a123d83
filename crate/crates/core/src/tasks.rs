//! Built-in pipeline tasks.
//!
//! Inputs are read from `data.*` (training `x`, one-vs-all `y`, optional
//! `labels`, and `x_test` with `labels_test` or `y_test`) and from
//! `opts.<category>.*`. Each task's result lands under
//! `results.<category>`.
//!
//! | task | options | result keys |
//! |---|---|---|
//! | `split.holdout` | `fraction` (0.2), `seed` (0), `stratify` (true) | `train_idx`, `val_idx`, `seed`, `fraction` |
//! | `kernel.linear` | `materialize` (false) | `kind`, `K` when materialized |
//! | `kernel.gaussian` | `sigma` or `sigma_quantile` (0.5), `materialize` (true) | `kind`, `sigma`, `K` |
//! | `kernel.random_features` | `sigma` or `sigma_quantile`, `n_features` (500), `seed` (0) | `kind`, `sigma`, `n_features`, `seed`, `omega`, `phases`, `features` |
//! | `paramsel.holdout_primal`, `paramsel.holdout_dual`, `paramsel.loo_dual` | `n_lambdas` (400) or `lambdas`, `per_output` (false) | `best_lambda`, `lambdas`, `val_scores`, `method`, `output_lambdas` |
//! | `rls.primal`, `rls.dual` | | `kind`, `lambda`, `weights` or `coeffs` |
//! | `pred.primal`, `pred.dual` | | `scores` |
//! | `perf.accuracy` | | `accuracy`, `macro_accuracy`, `per_class_accuracy`, `confusion`, `n_test` |
//!
//! Missing LOO scores and classes without support are stored as NaN.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::eval::{decode_argmax, performance, Labels};
use crate::kernels::{apply_feature_map, sample_feature_map, sigma_from_distances, FeatureMap, KernelSpec};
use crate::linalg::matmul;
use crate::mat::Mat;
use crate::modelsel::{
    holdout_split, select_holdout, select_holdout_gram, select_loo_auto, GridSpec, ParamSelResult, SolverConfig,
    SolverMode, DEFAULT_HOLDOUT_FRACTION, DEFAULT_N_LAMBDAS,
};
use crate::options::OptionsStore;
use crate::pipeline::{Category, OptionsView, TaskRegistry};
use crate::rls::{train_dual, train_dual_per_output, train_primal, train_primal_per_output};

pub const DEFAULT_SIGMA_QUANTILE: f64 = 0.5;
pub const DEFAULT_N_FEATURES: usize = 500;

pub mod keys {
    pub const X: &str = "data.x";
    pub const Y: &str = "data.y";
    pub const LABELS: &str = "data.labels";
    pub const X_TEST: &str = "data.x_test";
    pub const Y_TEST: &str = "data.y_test";
    pub const LABELS_TEST: &str = "data.labels_test";
}

pub fn register_builtins(r: &mut TaskRegistry) -> Result<()> {
    use Category::*;
    r.register(Split, "holdout", &[], split_holdout)?;
    r.register(Kernel, "linear", &[], kernel_linear)?;
    r.register(Kernel, "gaussian", &[], kernel_gaussian)?;
    r.register(Kernel, "random_features", &[], kernel_random_features)?;
    r.register(Paramsel, "holdout_primal", &[Split, Kernel], paramsel_holdout_primal)?;
    r.register(Paramsel, "holdout_dual", &[Split, Kernel], paramsel_holdout_dual)?;
    r.register(Paramsel, "loo_dual", &[Kernel], paramsel_loo_dual)?;
    r.register(Rls, "primal", &[Kernel, Paramsel], rls_primal)?;
    r.register(Rls, "dual", &[Kernel, Paramsel], rls_dual)?;
    r.register(Pred, "primal", &[Kernel, Rls], pred_primal)?;
    r.register(Pred, "dual", &[Kernel, Rls], pred_dual)?;
    r.register(Perf, "accuracy", &[Pred], perf_accuracy)?;
    Ok(())
}

fn split_holdout(v: &OptionsView) -> Result<OptionsStore> {
    let n = v.mat(keys::X)?.rows();
    let fraction = v.f64_or("opts.split.fraction", DEFAULT_HOLDOUT_FRACTION)?;
    let seed = v.u64_or("opts.split.seed", 0)?;
    let labels = if v.bool_or("opts.split.stratify", true)? && v.contains(keys::LABELS) {
        Some(Labels(v.index_vec(keys::LABELS)?.to_vec()))
    } else {
        None
    };
    let split = holdout_split(n, fraction, seed, labels.as_ref())?;
    let mut out = OptionsStore::new();
    out.insert("train_idx", split.train_idx)?;
    out.insert("val_idx", split.val_idx)?;
    out.insert("seed", split.seed)?;
    out.insert("fraction", split.fraction)?;
    out.insert("stratified", split.stratified)?;
    Ok(out)
}

fn sigma_option(v: &OptionsView, x: &Mat) -> Result<f64> {
    if v.contains("opts.kernel.sigma") {
        let s = v.f64("opts.kernel.sigma")?;
        if !(s.is_finite() && s > 0.0) {
            return Err(Error::Parameter(format!("sigma must be finite and > 0, got {s}")));
        }
        Ok(s)
    } else {
        sigma_from_distances(x, v.f64_or("opts.kernel.sigma_quantile", DEFAULT_SIGMA_QUANTILE)?)
    }
}

fn kernel_linear(v: &OptionsView) -> Result<OptionsStore> {
    let mut out = OptionsStore::new();
    out.insert("kind", "linear")?;
    if v.bool_or("opts.kernel.materialize", false)? {
        let x = v.mat(keys::X)?;
        out.insert("K", KernelSpec::Linear.compute(&x, &x)?)?;
    }
    Ok(out)
}

fn kernel_gaussian(v: &OptionsView) -> Result<OptionsStore> {
    let x = v.mat(keys::X)?;
    let sigma = sigma_option(v, &x)?;
    let mut out = OptionsStore::new();
    out.insert("kind", "gaussian")?;
    out.insert("sigma", sigma)?;
    if v.bool_or("opts.kernel.materialize", true)? {
        out.insert("K", KernelSpec::Gaussian { sigma }.compute(&x, &x)?)?;
    }
    Ok(out)
}

fn kernel_random_features(v: &OptionsView) -> Result<OptionsStore> {
    let x = v.mat(keys::X)?;
    let sigma = sigma_option(v, &x)?;
    let n_features = v.usize_or("opts.kernel.n_features", DEFAULT_N_FEATURES)?;
    let seed = v.u64_or("opts.kernel.seed", 0)?;
    let fm = sample_feature_map(x.cols(), n_features, sigma, seed)?;
    let features = apply_feature_map(&x, &fm)?;
    let mut out = OptionsStore::new();
    out.insert("kind", "random_features")?;
    out.insert("sigma", sigma)?;
    out.insert("n_features", n_features)?;
    out.insert("seed", seed)?;
    out.insert("omega", fm.omega)?;
    out.insert("phases", fm.phases)?;
    out.insert("features", features)?;
    Ok(out)
}

fn kernel_kind(v: &OptionsView) -> Result<String> {
    Ok(v.str("results.kernel.kind")?.to_string())
}

fn kernel_spec(v: &OptionsView) -> Result<KernelSpec> {
    match kernel_kind(v)?.as_str() {
        "linear" => Ok(KernelSpec::Linear),
        "gaussian" => KernelSpec::gaussian(v.f64("results.kernel.sigma")?),
        other => Err(Error::Pipeline {
            category: "kernel".into(),
            detail: format!("kernel kind '{other}' has no dual form"),
        }),
    }
}

fn feature_map(v: &OptionsView) -> Result<FeatureMap> {
    Ok(FeatureMap {
        omega: v.mat("results.kernel.omega")?.as_ref().clone(),
        phases: v.float_vec("results.kernel.phases")?.to_vec(),
        sigma: v.f64("results.kernel.sigma")?,
        seed: v.u64_or("results.kernel.seed", 0)?,
    })
}

/// Training inputs of a primal model: raw features or random features.
fn primal_inputs(v: &OptionsView) -> Result<Arc<Mat>> {
    match kernel_kind(v)?.as_str() {
        "linear" => v.mat(keys::X),
        "random_features" => v.mat("results.kernel.features"),
        other => Err(Error::Pipeline {
            category: "kernel".into(),
            detail: format!("kernel kind '{other}' has no primal form; use a dual task"),
        }),
    }
}

fn training_kernel(v: &OptionsView) -> Result<Arc<Mat>> {
    if v.contains("results.kernel.K") {
        return v.mat("results.kernel.K");
    }
    let x = v.mat(keys::X)?;
    Ok(Arc::new(kernel_spec(v)?.compute(&x, &x)?))
}

fn grid_option(v: &OptionsView) -> Result<GridSpec> {
    if v.contains("opts.paramsel.lambdas") {
        Ok(GridSpec::Explicit(v.float_vec("opts.paramsel.lambdas")?.to_vec()))
    } else {
        Ok(GridSpec::Auto {
            n_lambdas: v.usize_or("opts.paramsel.n_lambdas", DEFAULT_N_LAMBDAS)?,
        })
    }
}

fn split_of(v: &OptionsView) -> Result<crate::modelsel::Split> {
    Ok(crate::modelsel::Split {
        train_idx: v.index_vec("results.split.train_idx")?.to_vec(),
        val_idx: v.index_vec("results.split.val_idx")?.to_vec(),
        seed: v.u64_or("results.split.seed", 0)?,
        fraction: v.f64_or("results.split.fraction", DEFAULT_HOLDOUT_FRACTION)?,
        stratified: v.bool_or("results.split.stratified", false)?,
    })
}

fn paramsel_store(r: ParamSelResult) -> Result<OptionsStore> {
    let mut out = OptionsStore::new();
    out.insert("best_lambda", r.best_lambda)?;
    out.insert("method", r.method.as_str())?;
    out.insert(
        "val_scores",
        r.val_scores.iter().map(|s| s.unwrap_or(f64::NAN)).collect::<Vec<f64>>(),
    )?;
    out.insert("lambdas", r.lambdas)?;
    if let Some(per) = r.output_lambdas {
        out.insert("output_lambdas", per)?;
    }
    Ok(out)
}

fn paramsel_holdout_primal(v: &OptionsView) -> Result<OptionsStore> {
    let x = primal_inputs(v)?;
    let y = v.mat(keys::Y)?;
    let config = SolverConfig {
        mode: SolverMode::Primal,
        grid: grid_option(v)?,
        per_output: v.bool_or("opts.paramsel.per_output", false)?,
    };
    paramsel_store(select_holdout(&x, &y, &split_of(v)?, &config)?)
}

fn paramsel_holdout_dual(v: &OptionsView) -> Result<OptionsStore> {
    let y = v.mat(keys::Y)?;
    let per_output = v.bool_or("opts.paramsel.per_output", false)?;
    let split = split_of(v)?;
    let r = if v.contains("results.kernel.K") {
        select_holdout_gram(&*v.mat("results.kernel.K")?, &y, &split, &grid_option(v)?, per_output)?
    } else {
        let config = SolverConfig {
            mode: SolverMode::Dual(kernel_spec(v)?),
            grid: grid_option(v)?,
            per_output,
        };
        select_holdout(&*v.mat(keys::X)?, &y, &split, &config)?
    };
    paramsel_store(r)
}

fn paramsel_loo_dual(v: &OptionsView) -> Result<OptionsStore> {
    let k = training_kernel(v)?;
    let y = v.mat(keys::Y)?;
    let per_output = v.bool_or("opts.paramsel.per_output", false)?;
    paramsel_store(select_loo_auto(&k, &y, &grid_option(v)?, per_output)?)
}

/// Per-output parameters when selection produced them and they were asked for.
fn output_lambdas(v: &OptionsView) -> Result<Option<Vec<f64>>> {
    if v.bool_or("opts.paramsel.per_output", false)? && v.contains("results.paramsel.output_lambdas") {
        Ok(Some(v.float_vec("results.paramsel.output_lambdas")?.to_vec()))
    } else {
        Ok(None)
    }
}

fn rls_primal(v: &OptionsView) -> Result<OptionsStore> {
    let x = primal_inputs(v)?;
    let y = v.mat(keys::Y)?;
    let lambda = v.f64("results.paramsel.best_lambda")?;
    let model = match output_lambdas(v)? {
        Some(per) => train_primal_per_output(&x, &y, &per)?,
        None => train_primal(&x, &y, lambda)?,
    };
    let mut out = OptionsStore::new();
    out.insert("kind", "primal")?;
    out.insert("lambda", lambda)?;
    if let Some(per) = &model.output_lambdas {
        out.insert("output_lambdas", per.clone())?;
    }
    out.insert("weights", model.weights().expect("primal model").clone())?;
    Ok(out)
}

fn rls_dual(v: &OptionsView) -> Result<OptionsStore> {
    let k = training_kernel(v)?;
    let y = v.mat(keys::Y)?;
    let lambda = v.f64("results.paramsel.best_lambda")?;
    let model = match output_lambdas(v)? {
        Some(per) => train_dual_per_output(&k, &y, &per)?,
        None => train_dual(&k, &y, lambda)?,
    };
    let mut out = OptionsStore::new();
    out.insert("kind", "dual")?;
    out.insert("lambda", lambda)?;
    if let Some(per) = &model.output_lambdas {
        out.insert("output_lambdas", per.clone())?;
    }
    out.insert("coeffs", model.coeffs().expect("dual model").clone())?;
    Ok(out)
}

fn pred_primal(v: &OptionsView) -> Result<OptionsStore> {
    let x_test = v.mat(keys::X_TEST)?;
    let w = v.mat("results.rls.weights")?;
    let inputs = match kernel_kind(v)?.as_str() {
        "random_features" => Arc::new(apply_feature_map(&x_test, &feature_map(v)?)?),
        _ => x_test,
    };
    let mut out = OptionsStore::new();
    out.insert("scores", matmul(&inputs, &w)?)?;
    Ok(out)
}

fn pred_dual(v: &OptionsView) -> Result<OptionsStore> {
    let x_test = v.mat(keys::X_TEST)?;
    let x = v.mat(keys::X)?;
    let c = v.mat("results.rls.coeffs")?;
    let k_test = kernel_spec(v)?.compute(&x_test, &x)?;
    let mut out = OptionsStore::new();
    out.insert("scores", matmul(&k_test, &c)?)?;
    Ok(out)
}

fn perf_accuracy(v: &OptionsView) -> Result<OptionsStore> {
    let scores = v.mat("results.pred.scores")?;
    let truth = if v.contains(keys::LABELS_TEST) {
        Labels(v.index_vec(keys::LABELS_TEST)?.to_vec())
    } else {
        decode_argmax(&*v.mat(keys::Y_TEST)?)
    };
    let n_classes = scores.cols().max(truth.n_classes());
    let report = performance(&decode_argmax(&scores), &truth, n_classes)?;
    let mut out = OptionsStore::new();
    out.insert("accuracy", report.accuracy)?;
    out.insert("macro_accuracy", report.macro_accuracy)?;
    out.insert(
        "per_class_accuracy",
        report
            .per_class_accuracy
            .iter()
            .map(|a| a.unwrap_or(f64::NAN))
            .collect::<Vec<f64>>(),
    )?;
    let confusion = Mat::from_fn(n_classes, n_classes, |t, p| report.confusion[t][p] as f64);
    out.insert("confusion", confusion)?;
    out.insert("n_test", truth.len())?;
    Ok(out)
}
