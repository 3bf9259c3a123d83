//! One-vs-all label encoding, argmax decoding and accuracy statistics.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::mat::Mat;

/// Class ids in `[0, T)`, one per sample.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Labels(pub Vec<usize>);

impl Labels {
    pub fn new(ids: Vec<usize>) -> Self {
        Labels(ids)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.0
    }

    /// `max id + 1`, or 0 when empty.
    pub fn n_classes(&self) -> usize {
        self.0.iter().max().map_or(0, |&m| m + 1)
    }

    pub fn select(&self, idx: &[usize]) -> Labels {
        Labels(idx.iter().map(|&i| self.0[i]).collect())
    }
}

/// `n x T` matrix with `+1` at `(i, label_i)` and `-1` elsewhere.
pub fn encode_one_vs_all(labels: &Labels, n_classes: usize) -> Result<Mat> {
    let mut y = Mat::filled(labels.len(), n_classes, -1.0);
    for (i, &c) in labels.0.iter().enumerate() {
        if c >= n_classes {
            return Err(Error::Label(format!(
                "sample {i} has class {c}, but only {n_classes} classes exist"
            )));
        }
        y[(i, c)] = 1.0;
    }
    Ok(y)
}

/// Per-row argmax; ties go to the smallest index.
pub fn decode_argmax(scores: &Mat) -> Labels {
    Labels(
        scores
            .row_iter()
            .map(|row| {
                row.iter()
                    .enumerate()
                    .fold(
                        (0usize, f64::NEG_INFINITY),
                        |(bi, bv), (i, &v)| {
                            if v > bv {
                                (i, v)
                            } else {
                                (bi, bv)
                            }
                        },
                    )
                    .0
            })
            .collect(),
    )
}

/// Fraction of rows where decoded `scores` agree with decoded `targets`.
///
/// With several columns both sides are argmax-decoded; with a single column
/// the sign (`>= 0` vs `< 0`) is compared.
pub fn score_accuracy(scores: &Mat, targets: &Mat) -> Result<f64> {
    if scores.shape() != targets.shape() {
        return Err(Error::shape(
            "score_accuracy",
            format!("{:?} vs {:?}", scores.shape(), targets.shape()),
        ));
    }
    if scores.rows() == 0 {
        return Ok(0.0);
    }
    let hits = if scores.cols() == 1 {
        scores
            .as_slice()
            .iter()
            .zip(targets.as_slice())
            .filter(|(s, t)| (**s >= 0.0) == (**t >= 0.0))
            .count()
    } else {
        let p = decode_argmax(scores);
        let t = decode_argmax(targets);
        p.0.iter().zip(&t.0).filter(|(a, b)| a == b).count()
    };
    Ok(hits as f64 / scores.rows() as f64)
}

/// Per-column sign agreement, used for per-output model selection.
pub fn per_output_sign_accuracy(scores: &Mat, targets: &Mat) -> Result<Vec<f64>> {
    if scores.shape() != targets.shape() {
        return Err(Error::shape(
            "per_output_sign_accuracy",
            format!("{:?} vs {:?}", scores.shape(), targets.shape()),
        ));
    }
    let m = scores.rows().max(1) as f64;
    Ok((0..scores.cols())
        .map(|t| {
            (0..scores.rows())
                .filter(|&i| (scores[(i, t)] >= 0.0) == (targets[(i, t)] >= 0.0))
                .count() as f64
                / m
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerfReport {
    pub accuracy: f64,
    /// `None` for classes without support.
    pub per_class_accuracy: Vec<Option<f64>>,
    /// `confusion[truth][pred]`
    pub confusion: Vec<Vec<u64>>,
    /// Mean of the per-class accuracies over classes with support.
    pub macro_accuracy: f64,
}

pub fn performance(pred: &Labels, truth: &Labels, n_classes: usize) -> Result<PerfReport> {
    if pred.len() != truth.len() {
        return Err(Error::shape(
            "performance",
            format!("{} predictions for {} labels", pred.len(), truth.len()),
        ));
    }
    let mut confusion = vec![vec![0u64; n_classes]; n_classes];
    for (&p, &t) in pred.0.iter().zip(&truth.0) {
        if p >= n_classes || t >= n_classes {
            return Err(Error::Label(format!(
                "class id {} out of range for {n_classes} classes",
                p.max(t)
            )));
        }
        confusion[t][p] += 1;
    }
    let correct: u64 = (0..n_classes).map(|c| confusion[c][c]).sum();
    let accuracy = if truth.is_empty() {
        0.0
    } else {
        correct as f64 / truth.len() as f64
    };
    let per_class_accuracy: Vec<Option<f64>> = confusion
        .iter()
        .enumerate()
        .map(|(c, row)| {
            let support: u64 = row.iter().sum();
            (support > 0).then(|| row[c] as f64 / support as f64)
        })
        .collect();
    let supported: Vec<f64> = per_class_accuracy.iter().flatten().copied().collect();
    let macro_accuracy = if supported.is_empty() {
        0.0
    } else {
        supported.iter().sum::<f64>() / supported.len() as f64
    };
    Ok(PerfReport {
        accuracy,
        per_class_accuracy,
        confusion,
        macro_accuracy,
    })
}

/// Root mean squared error over all entries.
pub fn rmse(pred: &Mat, truth: &Mat) -> Result<f64> {
    let diff = pred.sub(truth)?;
    if diff.is_empty() {
        return Ok(0.0);
    }
    Ok((diff.as_slice().iter().map(|v| v * v).sum::<f64>() / diff.as_slice().len() as f64).sqrt())
}
