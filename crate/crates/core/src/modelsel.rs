//! Model selection: λ grids, hold-out splits and selection of the
//! regularization parameter by hold-out or leave-one-out accuracy.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{per_output_sign_accuracy, score_accuracy, Labels};
use crate::kernels::{apply_feature_map, FeatureMap, KernelSpec};
use crate::linalg::{gram, sym_eig, xty, EigPair};
use crate::mat::Mat;
use crate::rls::{loo_predictions, RegPath};

/// Grid size used when none is configured.
pub const DEFAULT_N_LAMBDAS: usize = 400;
/// Ratio between the smallest and largest grid value.
pub const GRID_RANGE: f64 = 1e-8;
pub const DEFAULT_HOLDOUT_FRACTION: f64 = 0.2;

/// Geometric grid of `n_lambdas` values from `GRID_RANGE · eig_max/n` up to
/// `eig_max/n`, ascending. A single-point grid is `[eig_max/n]`.
pub fn lambda_grid(eig_max: f64, n: usize, n_lambdas: usize) -> Result<Vec<f64>> {
    if !(eig_max.is_finite() && eig_max > 0.0) {
        return Err(Error::DegenerateData(format!(
            "largest eigenvalue must be positive to anchor the grid, got {eig_max}"
        )));
    }
    if n == 0 || n_lambdas == 0 {
        return Err(Error::Parameter(format!(
            "grid needs n >= 1 and n_lambdas >= 1, got n={n}, n_lambdas={n_lambdas}"
        )));
    }
    let hi = eig_max / n as f64;
    if n_lambdas == 1 {
        return Ok(vec![hi]);
    }
    let log_lo = (hi * GRID_RANGE).ln();
    let step = (hi.ln() - log_lo) / (n_lambdas - 1) as f64;
    let mut grid: Vec<f64> = (0..n_lambdas).map(|i| (log_lo + step * i as f64).exp()).collect();
    grid[n_lambdas - 1] = hi;
    Ok(grid)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Split {
    pub train_idx: Vec<usize>,
    pub val_idx: Vec<usize>,
    pub seed: u64,
    pub fraction: f64,
    pub stratified: bool,
}

fn ceil_count(count: usize, fraction: f64) -> usize {
    // guard against products like 50 * 0.2 landing a hair above an integer
    (count as f64 * fraction - 1e-9).ceil().max(0.0) as usize
}

/// Random hold-out split. Without labels, `⌈n·fraction⌉` indices are drawn
/// uniformly for validation. With labels, each class contributes
/// `⌈count·fraction⌉` validation samples, capped to leave one for training.
/// Both index lists are returned sorted.
pub fn holdout_split(n: usize, fraction: f64, seed: u64, labels: Option<&Labels>) -> Result<Split> {
    if n < 2 {
        return Err(Error::Parameter(format!("need at least 2 samples to split, got {n}")));
    }
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Parameter(format!(
            "hold-out fraction must lie in (0, 1), got {fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut val_idx = match labels {
        None => {
            let k = ceil_count(n, fraction);
            if k >= n {
                return Err(Error::Parameter(format!(
                    "fraction {fraction} leaves no training samples out of {n}"
                )));
            }
            let mut idx: Vec<usize> = (0..n).collect();
            idx.shuffle(&mut rng);
            idx.truncate(k.max(1));
            idx
        }
        Some(labels) => {
            if labels.len() != n {
                return Err(Error::shape(
                    "holdout_split",
                    format!("{} labels for {n} samples", labels.len()),
                ));
            }
            let n_classes = labels.n_classes();
            let mut members: Vec<Vec<usize>> = vec![Vec::new(); n_classes];
            for (i, &c) in labels.as_slice().iter().enumerate() {
                members[c].push(i);
            }
            let mut val = Vec::new();
            for (class, mut idx) in members.into_iter().enumerate() {
                if idx.is_empty() {
                    continue;
                }
                if idx.len() == 1 {
                    return Err(Error::Stratification { class, count: 1 });
                }
                let k = ceil_count(idx.len(), fraction).clamp(1, idx.len() - 1);
                idx.shuffle(&mut rng);
                val.extend_from_slice(&idx[..k]);
            }
            val
        }
    };
    val_idx.sort_unstable();
    let mut in_val = vec![false; n];
    for &i in &val_idx {
        in_val[i] = true;
    }
    let train_idx: Vec<usize> = (0..n).filter(|&i| !in_val[i]).collect();
    Ok(Split {
        train_idx,
        val_idx,
        seed,
        fraction,
        stratified: labels.is_some(),
    })
}

#[derive(Clone, Debug)]
pub enum SolverMode {
    /// Linear model on the raw inputs.
    Primal,
    /// Kernel model on the samples.
    Dual(KernelSpec),
    /// Linear model on random features.
    Features(FeatureMap),
}

#[derive(Clone, Debug, PartialEq)]
pub enum GridSpec {
    /// Geometric grid anchored on the training spectrum.
    Auto {
        n_lambdas: usize,
    },
    Explicit(Vec<f64>),
}

impl Default for GridSpec {
    fn default() -> Self {
        GridSpec::Auto {
            n_lambdas: DEFAULT_N_LAMBDAS,
        }
    }
}

impl GridSpec {
    fn resolve(&self, eig: &EigPair, n: usize) -> Result<Vec<f64>> {
        match self {
            GridSpec::Auto { n_lambdas } => lambda_grid(eig.max_value(), n, *n_lambdas),
            GridSpec::Explicit(v) => {
                if v.is_empty() {
                    return Err(Error::Parameter("empty lambda grid".into()));
                }
                Ok(v.clone())
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct SolverConfig {
    pub mode: SolverMode,
    pub grid: GridSpec,
    /// Also select one λ per output column.
    pub per_output: bool,
}

impl SolverConfig {
    pub fn new(mode: SolverMode) -> Self {
        SolverConfig {
            mode,
            grid: GridSpec::default(),
            per_output: false,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SelectionMethod {
    Holdout,
    Loo,
}

impl SelectionMethod {
    pub fn as_str(self) -> &'static str {
        match self {
            SelectionMethod::Holdout => "holdout",
            SelectionMethod::Loo => "loo",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSelResult {
    pub lambdas: Vec<f64>,
    /// Mean accuracy per grid value; `None` where the estimate is undefined.
    pub val_scores: Vec<Option<f64>>,
    pub best_lambda: f64,
    pub method: SelectionMethod,
    /// Per-output choice, when requested.
    pub output_lambdas: Option<Vec<f64>>,
}

impl ParamSelResult {
    pub fn best_score(&self) -> Option<f64> {
        self.val_scores.iter().flatten().copied().reduce(f64::max)
    }
}

/// Index of the best score; ties resolve to the later (larger λ) entry.
fn argmax_last(scores: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, s) in scores.iter().enumerate() {
        if let Some(s) = *s {
            if best.is_none_or(|(_, b)| s >= b) {
                best = Some((i, s));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn per_output_choice(lambdas: &[f64], per_lambda: &[Vec<f64>]) -> Vec<f64> {
    let t = per_lambda.first().map_or(0, Vec::len);
    (0..t)
        .map(|c| {
            let col: Vec<Option<f64>> = per_lambda.iter().map(|s| Some(s[c])).collect();
            lambdas[argmax_last(&col).expect("non-empty grid")]
        })
        .collect()
}

/// Hold-out selection: one path on the training part, every grid value scored
/// by mean accuracy on the validation part.
pub fn select_holdout(x: &Mat, y: &Mat, split: &Split, config: &SolverConfig) -> Result<ParamSelResult> {
    if x.rows() != y.rows() {
        return Err(Error::shape(
            "select_holdout",
            format!("{} samples in x, {} in y", x.rows(), y.rows()),
        ));
    }
    check_split(split, x.rows())?;
    let y_tr = y.select_rows(&split.train_idx);
    let y_va = y.select_rows(&split.val_idx);
    let n_tr = split.train_idx.len();

    let (path, projected) = match &config.mode {
        SolverMode::Dual(spec) => {
            let x_tr = x.select_rows(&split.train_idx);
            let x_va = x.select_rows(&split.val_idx);
            let k_tr = spec.compute(&x_tr, &x_tr)?;
            let k_va = spec.compute(&x_va, &x_tr)?;
            drop(x_tr);
            let eig = sym_eig(&k_tr)?;
            drop(k_tr);
            let grid = config.grid.resolve(&eig, n_tr)?;
            let path = RegPath::from_eig(eig, &y_tr, grid, n_tr, true)?;
            let projected = path.project(&k_va)?;
            (path, projected)
        }
        SolverMode::Primal | SolverMode::Features(_) => {
            let inputs;
            let x = match &config.mode {
                SolverMode::Features(fm) => {
                    inputs = apply_feature_map(x, fm)?;
                    &inputs
                }
                _ => x,
            };
            let x_tr = x.select_rows(&split.train_idx);
            let x_va = x.select_rows(&split.val_idx);
            let eig = sym_eig(&gram(&x_tr))?;
            let grid = config.grid.resolve(&eig, n_tr)?;
            let rhs = xty(&x_tr, &y_tr)?;
            let path = RegPath::from_eig(eig, &rhs, grid, n_tr, false)?;
            let projected = path.project(&x_va)?;
            (path, projected)
        }
    };

    evaluate_holdout(path, &projected, &y_va, config.per_output)
}

/// Hold-out selection from a precomputed kernel over all samples.
pub fn select_holdout_gram(
    k: &Mat,
    y: &Mat,
    split: &Split,
    grid: &GridSpec,
    per_output: bool,
) -> Result<ParamSelResult> {
    if !k.is_square() || k.rows() != y.rows() {
        return Err(Error::shape(
            "select_holdout_gram",
            format!("kernel {:?}, labels {:?}", k.shape(), y.shape()),
        ));
    }
    check_split(split, k.rows())?;
    let y_tr = y.select_rows(&split.train_idx);
    let y_va = y.select_rows(&split.val_idx);
    let n_tr = split.train_idx.len();
    let eig = sym_eig(&k.select(&split.train_idx, &split.train_idx))?;
    let lambdas = grid.resolve(&eig, n_tr)?;
    let path = RegPath::from_eig(eig, &y_tr, lambdas, n_tr, true)?;
    let projected = path.project(&k.select(&split.val_idx, &split.train_idx))?;
    evaluate_holdout(path, &projected, &y_va, per_output)
}

fn check_split(split: &Split, n: usize) -> Result<()> {
    if let Some(&bad) = split.train_idx.iter().chain(&split.val_idx).find(|&&i| i >= n) {
        return Err(Error::shape(
            "holdout",
            format!("split index {bad} out of range for {n} samples"),
        ));
    }
    if split.train_idx.is_empty() || split.val_idx.is_empty() {
        return Err(Error::Parameter("split has an empty partition".into()));
    }
    Ok(())
}

fn evaluate_holdout(path: RegPath, projected: &Mat, y_va: &Mat, per_output: bool) -> Result<ParamSelResult> {
    let evaluated: Vec<(f64, Vec<f64>)> = path
        .lambdas
        .par_iter()
        .map(|&l| {
            let scores = path.scores_at(projected, l)?;
            let acc = score_accuracy(&scores, y_va)?;
            let per = if per_output {
                per_output_sign_accuracy(&scores, y_va)?
            } else {
                Vec::new()
            };
            Ok((acc, per))
        })
        .collect::<Result<_>>()?;
    let val_scores: Vec<Option<f64>> = evaluated.iter().map(|(a, _)| Some(*a)).collect();
    let best = argmax_last(&val_scores).expect("grid is non-empty");
    let output_lambdas = per_output.then(|| {
        let per: Vec<Vec<f64>> = evaluated.into_iter().map(|(_, p)| p).collect();
        per_output_choice(&path.lambdas, &per)
    });
    Ok(ParamSelResult {
        best_lambda: path.lambdas[best],
        lambdas: path.lambdas,
        val_scores,
        method: SelectionMethod::Holdout,
        output_lambdas,
    })
}

/// Leave-one-out selection over `lambdas` from the full training kernel.
/// Grid values with degenerate leverage are reported as `None`.
pub fn select_loo(k: &Mat, y: &Mat, lambdas: &[f64]) -> Result<ParamSelResult> {
    let path = crate::rls::build_path(k, y, lambdas)?;
    select_loo_on_path(&path, y, false)
}

/// [`select_loo`] with the grid derived from the kernel spectrum.
pub fn select_loo_auto(k: &Mat, y: &Mat, grid: &GridSpec, per_output: bool) -> Result<ParamSelResult> {
    if !k.is_square() || k.rows() != y.rows() {
        return Err(Error::shape(
            "select_loo",
            format!("kernel {:?}, labels {:?}", k.shape(), y.shape()),
        ));
    }
    let eig = sym_eig(k)?;
    let lambdas = grid.resolve(&eig, k.rows())?;
    let path = RegPath::from_eig(eig, y, lambdas, k.rows(), true)?;
    select_loo_on_path(&path, y, per_output)
}

fn select_loo_on_path(path: &RegPath, y: &Mat, per_output: bool) -> Result<ParamSelResult> {
    let evaluated: Vec<Option<(f64, Vec<f64>)>> = path
        .lambdas
        .par_iter()
        .map(|&l| match loo_predictions(path, y, l) {
            Ok(pred) => {
                let acc = score_accuracy(&pred, y)?;
                let per = if per_output {
                    per_output_sign_accuracy(&pred, y)?
                } else {
                    Vec::new()
                };
                Ok(Some((acc, per)))
            }
            Err(Error::DegenerateLeverage { .. }) => Ok(None),
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let val_scores: Vec<Option<f64>> = evaluated.iter().map(|e| e.as_ref().map(|(a, _)| *a)).collect();
    let best = argmax_last(&val_scores)
        .ok_or_else(|| Error::Numeric("leave-one-out estimate is degenerate at every grid value".into()))?;
    let output_lambdas = if per_output {
        let lambdas: Vec<f64> = path
            .lambdas
            .iter()
            .zip(&evaluated)
            .filter_map(|(&l, e)| e.as_ref().map(|_| l))
            .collect();
        let per: Vec<Vec<f64>> = evaluated.into_iter().flatten().map(|(_, p)| p).collect();
        Some(per_output_choice(&lambdas, &per))
    } else {
        None
    };
    Ok(ParamSelResult {
        lambdas: path.lambdas.clone(),
        val_scores,
        best_lambda: path.lambdas[best],
        method: SelectionMethod::Loo,
        output_lambdas,
    })
}
