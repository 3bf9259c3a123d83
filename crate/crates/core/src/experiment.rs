//! Experiment configs and reports: load a dataset, preprocess, run a task
//! pipeline and summarize accuracy and per-stage timings.

use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::Value as Json;

use crate::error::{Error, Result};
use crate::eval::{encode_one_vs_all, Labels};
use crate::io::{read_dataset, DataFormat, LabelMap, RawDataset};
use crate::mat::Mat;
use crate::modelsel::holdout_split;
use crate::options::{OptionsStore, Value};
use crate::pipeline::{run_pipeline_timed, Category, Pipeline, StageTiming, TaskDescriptor, TaskRegistry};
use crate::tasks::keys;

pub const REPORT_VERSION: u64 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Training file, or the whole dataset when the test part is carved out.
    pub path: PathBuf,
    #[serde(default)]
    pub format: Option<DataFormat>,
    #[serde(default = "default_label_col")]
    pub label_col: isize,
    /// Separate test file.
    #[serde(default)]
    pub test_path: Option<PathBuf>,
    /// The first `train_rows` rows train, the rest test.
    #[serde(default)]
    pub train_rows: Option<usize>,
    /// Stratified random test fraction.
    #[serde(default)]
    pub test_fraction: Option<f64>,
}

fn default_label_col() -> isize {
    -1
}

fn default_true() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    #[serde(default)]
    pub name: String,
    pub dataset: DatasetConfig,
    /// Per-column zero mean and unit variance from the training part.
    #[serde(default = "default_true")]
    pub standardize: bool,
    /// Append a constant feature.
    #[serde(default)]
    pub bias: bool,
    pub pipeline: Vec<TaskDescriptor>,
    /// Task options, stored under `opts.*`.
    #[serde(default)]
    pub options: serde_json::Map<String, Json>,
    /// Pre-computed results, stored under `results.*`, for injected tasks.
    #[serde(default)]
    pub inject: serde_json::Map<String, Json>,
    /// Base seed for the data split and any task seed not set explicitly.
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Parses a config file; relative paths are resolved against its directory.
    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let resolve = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        resolve(&mut cfg.dataset.path);
        if let Some(p) = cfg.dataset.test_path.as_mut() {
            resolve(p);
        }
        if let Some(p) = cfg.output.as_mut() {
            resolve(p);
        }
        Ok(cfg)
    }

    pub fn pipeline(&self) -> Pipeline {
        Pipeline::new(&self.name, self.pipeline.clone())
    }

    /// Checks everything that does not need the data.
    pub fn validate(&self, registry: &TaskRegistry) -> Result<()> {
        let d = &self.dataset;
        let test_sources = [d.test_path.is_some(), d.train_rows.is_some(), d.test_fraction.is_some()];
        if test_sources.iter().filter(|&&b| b).count() != 1 {
            return Err(Error::Config(
                "dataset needs exactly one of test_path, train_rows or test_fraction".into(),
            ));
        }
        if d.format.is_none() {
            DataFormat::from_path(&d.path)?;
        }
        if self.pipeline.is_empty() {
            return Err(Error::Config("pipeline is empty".into()));
        }
        let seeded = self.base_store().map_err(as_config)?;
        self.pipeline().validate(registry, &seeded).map_err(as_config)
    }

    /// Options and injected results, before any data is added.
    fn base_store(&self) -> Result<OptionsStore> {
        let mut s = OptionsStore::new();
        insert_json_tree(&mut s, "opts", &self.options)?;
        insert_json_tree(&mut s, "results", &self.inject)?;
        for key in ["opts.split.seed", "opts.kernel.seed"] {
            if !s.contains(key) {
                s.insert(key, self.seed)?;
            }
        }
        Ok(s)
    }
}

fn as_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn json_to_value(j: &Json, path: &str) -> Result<Value> {
    Ok(match j {
        Json::Bool(b) => Value::Bool(*b),
        Json::Number(n) => match n.as_i64() {
            Some(i) => Value::Int(i),
            None => Value::Float(n.as_f64().expect("JSON numbers are finite")),
        },
        Json::String(s) => Value::Str(s.clone()),
        Json::Array(items) => Value::FloatVec(
            items
                .iter()
                .map(|v| {
                    v.as_f64()
                        .ok_or_else(|| Error::Config(format!("'{path}' must be an array of numbers")))
                })
                .collect::<Result<_>>()?,
        ),
        Json::Object(map) => {
            let mut s = OptionsStore::new();
            insert_json_tree(&mut s, "", map)?;
            Value::Store(s)
        }
        Json::Null => return Err(Error::Config(format!("'{path}' is null"))),
    })
}

fn insert_json_tree(s: &mut OptionsStore, prefix: &str, map: &serde_json::Map<String, Json>) -> Result<()> {
    for (k, v) in map {
        let path = if prefix.is_empty() {
            k.clone()
        } else {
            format!("{prefix}.{k}")
        };
        match v {
            Json::Object(inner) => insert_json_tree(s, &path, inner)?,
            other => s.insert(&path, json_to_value(other, &path)?)?,
        }
    }
    Ok(())
}

/// Per-column mean and scale from the training rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    /// Standard deviation, or 1 for constant columns.
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(x: &Mat) -> Self {
        let n = x.rows().max(1) as f64;
        let d = x.cols();
        let mut mean = vec![0.0; d];
        for row in x.row_iter() {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for row in x.row_iter() {
            for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        let scale = var
            .into_iter()
            .map(|s| {
                let sd = (s / n).sqrt();
                if sd > 0.0 {
                    sd
                } else {
                    1.0
                }
            })
            .collect();
        Standardizer { mean, scale }
    }

    pub fn apply(&self, x: &Mat) -> Mat {
        Mat::from_fn(x.rows(), x.cols(), |i, j| (x[(i, j)] - self.mean[j]) / self.scale[j])
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub path: PathBuf,
    pub n_train: usize,
    pub n_test: usize,
    pub d: usize,
    pub n_classes: usize,
    /// Raw label value of each class id.
    pub classes: Vec<i64>,
    pub test_source: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Performance {
    pub accuracy: f64,
    pub macro_accuracy: f64,
    /// `null` for classes absent from the test set.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[truth][pred]`
    pub confusion: Vec<Vec<u64>>,
    pub n_test: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Hyperparameters {
    pub lambda: Option<f64>,
    pub output_lambdas: Option<Vec<f64>>,
    pub selection_method: Option<String>,
    pub best_validation_score: Option<f64>,
    pub n_lambdas: Option<usize>,
    pub kernel: Option<String>,
    pub sigma: Option<f64>,
    pub n_features: Option<usize>,
    pub split_seed: Option<u64>,
    pub kernel_seed: Option<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stage {
    pub name: String,
    pub seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timing {
    /// Loading, preprocessing, then one entry per executed task.
    pub stages: Vec<Stage>,
    /// Sum of the task stages.
    pub pipeline_seconds: f64,
    /// Sum of all stages.
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub report_version: u64,
    pub name: String,
    pub pipeline: Vec<TaskDescriptor>,
    pub seed: u64,
    pub standardize: bool,
    pub bias: bool,
    pub dataset: DatasetSummary,
    pub hyperparameters: Hyperparameters,
    pub performance: Performance,
    pub timing: Timing,
}

impl RunReport {
    /// Copy with timing fields zeroed, for comparisons across runs.
    pub fn without_timing(&self) -> RunReport {
        let mut r = self.clone();
        for s in &mut r.timing.stages {
            s.seconds = 0.0;
        }
        r.timing.pipeline_seconds = 0.0;
        r.timing.total_seconds = 0.0;
        r
    }
}

/// Train/test data after preprocessing, as handed to the pipeline.
#[derive(Clone, Debug)]
pub struct PreparedData {
    pub x: Mat,
    pub labels: Labels,
    pub x_test: Mat,
    pub labels_test: Labels,
    pub label_map: LabelMap,
    pub test_source: String,
}

pub fn load_split(cfg: &ExperimentConfig) -> Result<(RawDataset, RawDataset, String)> {
    let d = &cfg.dataset;
    let format = match d.format {
        Some(f) => f,
        None => DataFormat::from_path(&d.path)?,
    };
    let full = read_dataset(&d.path, format, d.label_col)?;
    if let Some(test) = &d.test_path {
        let test_format = match d.format {
            Some(f) => f,
            None => DataFormat::from_path(test)?,
        };
        let test_set = read_dataset(test, test_format, d.label_col)?;
        if test_set.x.cols() != full.x.cols() {
            return Err(Error::shape(
                "load_split",
                format!("train has {} features, test {}", full.x.cols(), test_set.x.cols()),
            ));
        }
        return Ok((full, test_set, format!("file {}", test.display())));
    }
    let n = full.x.rows();
    let (train_idx, test_idx, source) = if let Some(k) = d.train_rows {
        if k == 0 || k >= n {
            return Err(Error::Config(format!("train_rows must lie in [1, {n}), got {k}")));
        }
        ((0..k).collect(), (k..n).collect(), format!("rows {k}..{n}"))
    } else {
        let fraction = d.test_fraction.expect("validated: one test source");
        let map = LabelMap::fit(&full.labels);
        let labels = map.apply(&full.labels)?;
        let s = holdout_split(n, fraction, cfg.seed, Some(&labels))?;
        let source = format!("stratified fraction {fraction} (seed {})", cfg.seed);
        (s.train_idx, s.val_idx, source)
    };
    let train: Vec<usize> = train_idx;
    let test: Vec<usize> = test_idx;
    Ok((full.select_rows(&train), full.select_rows(&test), source))
}

pub fn prepare(cfg: &ExperimentConfig) -> Result<PreparedData> {
    let (train, test, test_source) = load_split(cfg)?;
    preprocess(cfg, train, test, test_source)
}

/// Remaps labels with the training classes, then standardizes and appends
/// the bias column as configured.
pub fn preprocess(
    cfg: &ExperimentConfig,
    train: RawDataset,
    test: RawDataset,
    test_source: String,
) -> Result<PreparedData> {
    let label_map = LabelMap::fit(&train.labels);
    let labels = label_map.apply(&train.labels)?;
    let labels_test = label_map.apply(&test.labels)?;
    let (mut x, mut x_test) = (train.x, test.x);
    if cfg.standardize {
        let s = Standardizer::fit(&x);
        x = s.apply(&x);
        x_test = s.apply(&x_test);
    }
    if cfg.bias {
        x = x.with_constant_column(1.0);
        x_test = x_test.with_constant_column(1.0);
    }
    Ok(PreparedData {
        x,
        labels,
        x_test,
        labels_test,
        label_map,
        test_source,
    })
}

/// Store holding the data, options and injected results for a pipeline run.
pub fn build_store(cfg: &ExperimentConfig, data: &PreparedData) -> Result<OptionsStore> {
    let mut s = cfg.base_store()?;
    let t = data.label_map.n_classes();
    s.insert(keys::X, data.x.clone())?;
    s.insert(keys::Y, encode_one_vs_all(&data.labels, t)?)?;
    s.insert(keys::LABELS, data.labels.0.clone())?;
    s.insert(keys::X_TEST, data.x_test.clone())?;
    s.insert(keys::LABELS_TEST, data.labels_test.0.clone())?;
    Ok(s)
}

fn opt_f64(s: &OptionsStore, key: &str) -> Option<f64> {
    s.f64(key).ok()
}

fn hyperparameters(s: &OptionsStore) -> Hyperparameters {
    let finite_max = s
        .float_vec("results.paramsel.val_scores")
        .ok()
        .and_then(|v| v.iter().copied().filter(|x| x.is_finite()).reduce(f64::max));
    Hyperparameters {
        lambda: opt_f64(s, "results.rls.lambda").or_else(|| opt_f64(s, "results.paramsel.best_lambda")),
        output_lambdas: s.float_vec("results.rls.output_lambdas").ok().map(<[f64]>::to_vec),
        selection_method: s.str("results.paramsel.method").ok().map(String::from),
        best_validation_score: finite_max,
        n_lambdas: s.float_vec("results.paramsel.lambdas").ok().map(<[f64]>::len),
        kernel: s.str("results.kernel.kind").ok().map(String::from),
        sigma: opt_f64(s, "results.kernel.sigma"),
        n_features: s.usize("results.kernel.n_features").ok(),
        split_seed: s.i64("results.split.seed").ok().map(|v| v as u64),
        kernel_seed: s.i64("results.kernel.seed").ok().map(|v| v as u64),
    }
}

fn performance_from(s: &OptionsStore) -> Result<Performance> {
    let confusion = s.mat("results.perf.confusion")?;
    Ok(Performance {
        accuracy: s.f64("results.perf.accuracy")?,
        macro_accuracy: s.f64("results.perf.macro_accuracy")?,
        per_class_accuracy: s
            .float_vec("results.perf.per_class_accuracy")?
            .iter()
            .map(|&v| v.is_finite().then_some(v))
            .collect(),
        confusion: confusion
            .row_iter()
            .map(|r| r.iter().map(|&v| v as u64).collect())
            .collect(),
        n_test: s.usize("results.perf.n_test")?,
    })
}

/// Runs an experiment and returns its report together with the final store.
pub fn run_experiment_with_store(cfg: &ExperimentConfig, registry: &TaskRegistry) -> Result<(RunReport, OptionsStore)> {
    cfg.validate(registry)?;
    if !cfg.pipeline.iter().any(|t| t.category == Category::Perf) {
        return Err(Error::Config("pipeline needs a perf task to produce a report".into()));
    }
    let t0 = Instant::now();
    let (train, test, test_source) = load_split(cfg)?;
    let load_seconds = t0.elapsed().as_secs_f64();

    let t1 = Instant::now();
    let data = preprocess(cfg, train, test, test_source)?;
    let store = build_store(cfg, &data)?;
    let prep_seconds = t1.elapsed().as_secs_f64();

    let (store, task_timings) = run_pipeline_timed(&cfg.pipeline(), registry, store)?;
    let mut stages = vec![
        Stage {
            name: "load".into(),
            seconds: load_seconds,
        },
        Stage {
            name: "preprocess".into(),
            seconds: prep_seconds,
        },
    ];
    stages.extend(task_timings.iter().map(|t: &StageTiming| Stage {
        name: format!("{}.{}", t.category, t.impl_name),
        seconds: t.seconds,
    }));
    let pipeline_seconds = task_timings.iter().map(|t| t.seconds).sum();
    let total_seconds = stages.iter().map(|s| s.seconds).sum();
    let report = RunReport {
        report_version: REPORT_VERSION,
        name: cfg.name.clone(),
        pipeline: cfg.pipeline.clone(),
        seed: cfg.seed,
        standardize: cfg.standardize,
        bias: cfg.bias,
        dataset: DatasetSummary {
            path: cfg.dataset.path.clone(),
            n_train: data.x.rows(),
            n_test: data.x_test.rows(),
            d: data.x.cols(),
            n_classes: data.label_map.n_classes(),
            classes: data.label_map.values.clone(),
            test_source: data.test_source.clone(),
        },
        hyperparameters: hyperparameters(&store),
        performance: performance_from(&store)?,
        timing: Timing {
            stages,
            pipeline_seconds,
            total_seconds,
        },
    };
    Ok((report, store))
}

pub fn run_experiment(cfg: &ExperimentConfig, registry: &TaskRegistry) -> Result<RunReport> {
    run_experiment_with_store(cfg, registry).map(|(r, _)| r)
}

/// Loads the config at `path`, runs it and writes the report to `output`
/// (or the config's `output`). No report file is left behind on failure.
pub fn run_experiment_file(path: &Path, output: Option<&Path>, seed: Option<u64>) -> Result<RunReport> {
    let mut cfg = ExperimentConfig::from_file(path)?;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    let registry = TaskRegistry::with_builtins();
    let out = output.map(Path::to_path_buf).or_else(|| cfg.output.clone());
    cfg.validate(&registry)?;
    let report = run_experiment(&cfg, &registry);
    match (&report, out) {
        (Ok(r), Some(out)) => write_report(r, &out)?,
        (Err(_), Some(out)) => {
            let _ = std::fs::remove_file(out);
        }
        _ => {}
    }
    report
}

/// Writes pretty-printed JSON atomically via a temporary sibling file.
pub fn write_report(report: &RunReport, path: &Path) -> Result<()> {
    write_json_atomic(report, path)
}

pub fn write_json_atomic<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("json.partial");
    let text = serde_json::to_string_pretty(value).expect("report types serialize") + "\n";
    let res = std::fs::write(&tmp, text)
        .map_err(|e| Error::io(&tmp, e))
        .and_then(|_| std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e)));
    if res.is_err() {
        let _ = std::fs::remove_file(&tmp);
    }
    res
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn standardizer_moments() {
        let x = Mat::from_rows(&[[1.0, 5.0], [3.0, 5.0], [5.0, 5.0]]).unwrap();
        let s = Standardizer::fit(&x);
        assert_eq!(s.mean, vec![3.0, 5.0]);
        assert_eq!(s.scale[1], 1.0);
        let z = s.apply(&x);
        assert!((z.column(0).iter().map(|v| v * v).sum::<f64>() / 3.0 - 1.0).abs() < 1e-12);
        assert_eq!(z.column(1), vec![0.0; 3]);
    }

    #[test]
    fn config_requires_one_test_source() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"dataset": {"path": "a.csv"}, "pipeline": [{"category": "split", "impl": "holdout"}]}"#,
        )
        .unwrap();
        assert!(matches!(
            cfg.validate(&TaskRegistry::with_builtins()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn config_rejects_unknown_tasks_before_loading() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"dataset": {"path": "missing.csv", "train_rows": 5},
                "pipeline": [{"category": "kernel", "impl": "polynomial"}]}"#,
        )
        .unwrap();
        assert!(matches!(
            cfg.validate(&TaskRegistry::with_builtins()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn options_tree_types() {
        let cfg: ExperimentConfig = serde_json::from_str(
            r#"{"dataset": {"path": "a.csv", "train_rows": 5}, "pipeline": [],
                "options": {"kernel": {"sigma": 1.5, "n_features": 10}, "paramsel": {"lambdas": [0.1, 1]}},
                "seed": 4}"#,
        )
        .unwrap();
        let s = cfg.base_store().unwrap();
        assert_eq!(s.f64("opts.kernel.sigma").unwrap(), 1.5);
        assert_eq!(s.usize("opts.kernel.n_features").unwrap(), 10);
        assert_eq!(s.float_vec("opts.paramsel.lambdas").unwrap(), &[0.1, 1.0]);
        assert_eq!(s.usize("opts.split.seed").unwrap(), 4);
    }
}
