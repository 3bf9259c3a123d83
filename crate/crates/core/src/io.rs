//! Dataset loaders (dense CSV and sparse `label idx:val` text) and streaming
//! conversion to bigarray files.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bigarray::BigArray;
use crate::error::{Error, Result};
use crate::eval::Labels;
use crate::mat::Mat;

/// Maps raw integral label values to contiguous ids `0..T`, in ascending order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelMap {
    pub values: Vec<i64>,
}

impl LabelMap {
    pub fn fit(raw: &[i64]) -> Self {
        let set: BTreeSet<i64> = raw.iter().copied().collect();
        LabelMap {
            values: set.into_iter().collect(),
        }
    }

    pub fn n_classes(&self) -> usize {
        self.values.len()
    }

    pub fn apply(&self, raw: &[i64]) -> Result<Labels> {
        raw.iter()
            .map(|v| {
                self.values
                    .binary_search(v)
                    .map_err(|_| Error::Label(format!("label {v} was not seen in the training data")))
            })
            .collect::<Result<Vec<_>>>()
            .map(Labels)
    }
}

/// Features with raw integral labels, before remapping.
#[derive(Clone, Debug, PartialEq)]
pub struct RawDataset {
    pub x: Mat,
    pub labels: Vec<i64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub x: Mat,
    pub labels: Labels,
    pub label_map: LabelMap,
}

impl RawDataset {
    pub fn into_dataset(self) -> Dataset {
        let label_map = LabelMap::fit(&self.labels);
        let labels = label_map.apply(&self.labels).expect("map fitted on these labels");
        Dataset {
            x: self.x,
            labels,
            label_map,
        }
    }

    pub fn select_rows(&self, idx: &[usize]) -> RawDataset {
        RawDataset {
            x: self.x.select_rows(idx),
            labels: idx.iter().map(|&i| self.labels[i]).collect(),
        }
    }
}

fn parse_err(path: &Path, line: u64, detail: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        detail: detail.into(),
    }
}

fn parse_label(cell: &str, path: &Path, line: u64) -> Result<i64> {
    let v: f64 = cell
        .trim()
        .parse()
        .map_err(|_| parse_err(path, line, format!("label '{cell}' is not numeric")))?;
    if v.fract() != 0.0 || !v.is_finite() || v.abs() > 2f64.powi(53) {
        return Err(parse_err(path, line, format!("label '{cell}' is not an integer")));
    }
    Ok(v as i64)
}

fn resolve_label_col(label_col: isize, width: usize, path: &Path, line: u64) -> Result<usize> {
    let idx = if label_col < 0 {
        width as isize + label_col
    } else {
        label_col
    };
    if idx < 0 || idx as usize >= width {
        return Err(parse_err(
            path,
            line,
            format!("label column {label_col} out of range for {width} columns"),
        ));
    }
    Ok(idx as usize)
}

/// Streams the rows of a headerless numeric CSV as `(line, features, label)`.
fn for_each_csv_row(
    path: &Path,
    label_col: isize,
    mut f: impl FnMut(u64, &[f64], i64) -> Result<()>,
) -> Result<(usize, usize)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .trim(csv::Trim::All)
        .comment(Some(b'#'))
        .from_reader(BufReader::new(file));
    let mut width: Option<usize> = None;
    let mut label_idx = 0;
    let mut rows = 0;
    let mut features = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            parse_err(path, line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() == 1 && record[0].is_empty() {
            continue;
        }
        let w = *width.get_or_insert(record.len());
        if record.len() != w {
            return Err(parse_err(
                path,
                line,
                format!("row has {} fields, expected {w}", record.len()),
            ));
        }
        if rows == 0 {
            label_idx = resolve_label_col(label_col, w, path, line)?;
        }
        features.clear();
        let mut label = 0;
        for (j, cell) in record.iter().enumerate() {
            if j == label_idx {
                label = parse_label(cell, path, line)?;
            } else {
                let v: f64 = cell
                    .parse()
                    .map_err(|_| parse_err(path, line, format!("field {} ('{cell}') is not numeric", j + 1)))?;
                features.push(v);
            }
        }
        f(line, &features, label)?;
        rows += 1;
    }
    match width {
        Some(w) if rows > 0 => Ok((rows, w - 1)),
        _ => Err(parse_err(path, 1, "file contains no data rows")),
    }
}

/// Loads a headerless numeric CSV. `label_col` may be negative to count from
/// the end (`-1` is the last column). Lines starting with `#` are skipped.
pub fn read_dense_csv(path: impl AsRef<Path>, label_col: isize) -> Result<RawDataset> {
    let path = path.as_ref();
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let (rows, cols) = for_each_csv_row(path, label_col, |_, f, l| {
        data.extend_from_slice(f);
        labels.push(l);
        Ok(())
    })?;
    Ok(RawDataset {
        x: Mat::from_vec(rows, cols, data)?,
        labels,
    })
}

/// [`read_dense_csv`] with labels remapped to `0..T`.
pub fn load_dense_csv(path: impl AsRef<Path>, label_col: isize) -> Result<Dataset> {
    read_dense_csv(path, label_col).map(RawDataset::into_dataset)
}

/// One parsed line of sparse text: label and 1-based `(index, value)` pairs.
/// Label and `(index, value)` pairs of one sparse line.
type SparseRow = (i64, Vec<(usize, f64)>);

fn parse_sparse_line(text: &str, path: &Path, line: u64) -> Result<Option<SparseRow>> {
    let text = text.trim();
    if text.is_empty() || text.starts_with('#') {
        return Ok(None);
    }
    let mut tokens = text.split_whitespace();
    let label = parse_label(tokens.next().expect("non-empty line"), path, line)?;
    let mut entries = Vec::new();
    let mut last = 0usize;
    for tok in tokens {
        let (i, v) = tok
            .split_once(':')
            .ok_or_else(|| parse_err(path, line, format!("expected idx:val, got '{tok}'")))?;
        let i: usize = i
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad index in '{tok}'")))?;
        if i == 0 {
            return Err(parse_err(path, line, "indices are 1-based"));
        }
        if i <= last {
            return Err(parse_err(
                path,
                line,
                format!("index {i} is not strictly ascending (previous {last})"),
            ));
        }
        let v: f64 = v
            .parse()
            .map_err(|_| parse_err(path, line, format!("bad value in '{tok}'")))?;
        entries.push((i, v));
        last = i;
    }
    Ok(Some((label, entries)))
}

fn for_each_sparse_row(path: &Path, mut f: impl FnMut(u64, i64, &[(usize, f64)]) -> Result<()>) -> Result<usize> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut rows = 0;
    for (k, text) in BufReader::new(file).lines().enumerate() {
        let line = k as u64 + 1;
        let text = text.map_err(|e| Error::io(path, e))?;
        if let Some((label, entries)) = parse_sparse_line(&text, path, line)? {
            f(line, label, &entries)?;
            rows += 1;
        }
    }
    if rows == 0 {
        return Err(parse_err(path, 1, "file contains no data rows"));
    }
    Ok(rows)
}

/// Loads sparse `label idx:val ...` text into a dense matrix. The width is
/// `n_features` when given, otherwise the largest index seen.
pub fn read_sparse_text(path: impl AsRef<Path>, n_features: Option<usize>) -> Result<RawDataset> {
    let path = path.as_ref();
    let mut rows: Vec<Vec<(usize, f64)>> = Vec::new();
    let mut labels = Vec::new();
    let mut max_index = 0;
    for_each_sparse_row(path, |line, label, entries| {
        if let (Some(d), Some(&(i, _))) = (n_features, entries.last()) {
            if i > d {
                return Err(parse_err(path, line, format!("index {i} exceeds {d} features")));
            }
        }
        max_index = max_index.max(entries.last().map_or(0, |e| e.0));
        labels.push(label);
        rows.push(entries.to_vec());
        Ok(())
    })?;
    let d = n_features.unwrap_or(max_index);
    let mut x = Mat::zeros(rows.len(), d);
    for (r, entries) in rows.iter().enumerate() {
        let row = x.row_mut(r);
        for &(i, v) in entries {
            row[i - 1] = v;
        }
    }
    Ok(RawDataset { x, labels })
}

pub fn load_sparse_text(path: impl AsRef<Path>, n_features: Option<usize>) -> Result<Dataset> {
    read_sparse_text(path, n_features).map(RawDataset::into_dataset)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataFormat {
    Csv,
    Sparse,
}

impl DataFormat {
    /// `.csv` is dense; `.svm`, `.libsvm`, `.txt` and `.sparse` are sparse text.
    pub fn from_path(path: &Path) -> Result<Self> {
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(str::to_ascii_lowercase)
            .as_deref()
        {
            Some("csv") => Ok(DataFormat::Csv),
            Some("svm" | "libsvm" | "txt" | "sparse") => Ok(DataFormat::Sparse),
            _ => Err(Error::Config(format!(
                "cannot infer the format of {}; expected .csv or .svm/.libsvm/.txt",
                path.display()
            ))),
        }
    }
}

pub fn read_dataset(path: &Path, format: DataFormat, label_col: isize) -> Result<RawDataset> {
    match format {
        DataFormat::Csv => read_dense_csv(path, label_col),
        DataFormat::Sparse => read_sparse_text(path, None),
    }
}

/// Path of the label file written next to a converted bigarray.
pub fn labels_path(output: &Path) -> PathBuf {
    let stem = output
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    output.with_file_name(format!("{stem}.labels.gba"))
}

/// Streams `input` into a bigarray at `output`, holding at most one chunk in
/// memory. Raw label values go to [`labels_path`] as an `n x 1` bigarray.
pub fn convert_to_bigarray(
    input: &Path,
    output: &Path,
    chunk_rows: usize,
    format: DataFormat,
    label_col: isize,
) -> Result<(usize, usize)> {
    if chunk_rows == 0 {
        return Err(Error::Parameter("chunk_rows must be >= 1".into()));
    }
    // first pass: shape only
    let (rows, cols) = match format {
        DataFormat::Csv => for_each_csv_row(input, label_col, |_, _, _| Ok(()))?,
        DataFormat::Sparse => {
            let mut d = 0;
            let n = for_each_sparse_row(input, |_, _, e| {
                d = d.max(e.last().map_or(0, |x| x.0));
                Ok(())
            })?;
            (n, d)
        }
    };
    if cols == 0 {
        return Err(Error::Format {
            path: input.to_path_buf(),
            detail: "no feature columns".into(),
        });
    }
    let x = BigArray::create(output, rows, cols, chunk_rows)?;
    let y = BigArray::create(labels_path(output), rows, 1, chunk_rows)?;
    let mut buf: Vec<f64> = Vec::with_capacity(chunk_rows.min(rows) * cols);
    let mut lab: Vec<f64> = Vec::with_capacity(chunk_rows.min(rows));
    let mut chunk = 0;
    let mut flush = |buf: &mut Vec<f64>, lab: &mut Vec<f64>| -> Result<()> {
        let n = lab.len();
        x.write_chunk(chunk, &Mat::from_vec(n, cols, std::mem::take(buf))?)?;
        y.write_chunk(chunk, &Mat::from_vec(n, 1, std::mem::take(lab))?)?;
        chunk += 1;
        Ok(())
    };
    let mut push = |features: &[f64], label: i64, buf: &mut Vec<f64>, lab: &mut Vec<f64>| -> Result<()> {
        buf.extend_from_slice(features);
        lab.push(label as f64);
        if lab.len() == chunk_rows {
            flush(buf, lab)?;
        }
        Ok(())
    };
    match format {
        DataFormat::Csv => {
            for_each_csv_row(input, label_col, |_, f, l| push(f, l, &mut buf, &mut lab))?;
        }
        DataFormat::Sparse => {
            let mut dense = vec![0.0; cols];
            for_each_sparse_row(input, |_, l, entries| {
                dense.iter_mut().for_each(|v| *v = 0.0);
                for &(i, v) in entries {
                    dense[i - 1] = v;
                }
                push(&dense, l, &mut buf, &mut lab)
            })?;
        }
    }
    if !lab.is_empty() {
        flush(&mut buf, &mut lab)?;
    }
    Ok((rows, cols))
}
