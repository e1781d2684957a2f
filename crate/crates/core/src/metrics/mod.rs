//! Confusion matrices and the accuracy statistics derived from them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("predictions ({preds}) and labels ({labels}) differ in length")]
    LengthMismatch { preds: usize, labels: usize },
    #[error("class id {id} outside 1..={classes}")]
    ClassOutOfRange { id: u16, classes: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("confusion matrix needs {expected} counts, got {actual}")]
    BadShape { expected: usize, actual: usize },
}

/// `C × C` counts indexed `(true, predicted)`, both 0-based.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn zeros(classes: usize) -> Self {
        ConfusionMatrix {
            classes,
            counts: vec![0; classes * classes],
        }
    }

    /// Row-major counts, `counts[t·C + p]`.
    pub fn from_counts(classes: usize, counts: Vec<u64>) -> Result<Self, MetricsError> {
        if counts.len() != classes * classes {
            return Err(MetricsError::BadShape {
                expected: classes * classes,
                actual: counts.len(),
            });
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn from_rows(rows: &[Vec<u64>]) -> Result<Self, MetricsError> {
        let classes = rows.len();
        let counts: Vec<u64> = rows.iter().flatten().copied().collect();
        if rows.iter().any(|r| r.len() != classes) {
            return Err(MetricsError::BadShape {
                expected: classes * classes,
                actual: counts.len(),
            });
        }
        Ok(ConfusionMatrix { classes, counts })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.classes).map(|c| self.get(c, c)).sum()
    }

    pub fn row_sum(&self, truth: usize) -> u64 {
        self.counts[truth * self.classes..(truth + 1) * self.classes].iter().sum()
    }

    pub fn col_sum(&self, pred: usize) -> u64 {
        (0..self.classes).map(|t| self.get(t, pred)).sum()
    }

    /// Element-wise sum, for combining shards.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if other.classes != self.classes {
            return Err(MetricsError::BadShape {
                expected: self.counts.len(),
                actual: other.counts.len(),
            });
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }
}

/// Tally 1-based predictions against 1-based labels.
pub fn confusion(preds: &[u16], labels: &[u16], classes: usize) -> Result<ConfusionMatrix, MetricsError> {
    if preds.len() != labels.len() {
        return Err(MetricsError::LengthMismatch {
            preds: preds.len(),
            labels: labels.len(),
        });
    }
    let check = |id: u16| {
        if id == 0 || id as usize > classes {
            Err(MetricsError::ClassOutOfRange { id, classes })
        } else {
            Ok(id as usize - 1)
        }
    };
    let mut cm = ConfusionMatrix::zeros(classes);
    for (&p, &t) in preds.iter().zip(labels) {
        let (p, t) = (check(p)?, check(t)?);
        cm.counts[t * classes + p] += 1;
    }
    Ok(cm)
}

fn nonempty(cm: &ConfusionMatrix) -> Result<u64, MetricsError> {
    match cm.total() {
        0 => Err(MetricsError::Empty),
        n => Ok(n),
    }
}

/// Overall accuracy, `trace / total`.
pub fn oa(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    Ok(cm.trace() as f64 / nonempty(cm)? as f64)
}

/// Recall per class; `None` for classes with no true samples.
pub fn per_class(cm: &ConfusionMatrix) -> Vec<Option<f64>> {
    (0..cm.classes())
        .map(|c| match cm.row_sum(c) {
            0 => None,
            n => Some(cm.get(c, c) as f64 / n as f64),
        })
        .collect()
}

/// Mean per-class accuracy over classes present in the evaluated set.
pub fn aa(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    nonempty(cm)?;
    let present: Vec<f64> = per_class(cm).into_iter().flatten().collect();
    Ok(present.iter().sum::<f64>() / present.len() as f64)
}

/// Cohen's kappa. When chance agreement is exactly 1 (a single nonzero row
/// and matching column) the ratio is undefined; it is then 1 for perfect
/// agreement and 0 otherwise.
pub fn kappa(cm: &ConfusionMatrix) -> Result<f64, MetricsError> {
    let n = nonempty(cm)? as u128;
    let chance: u128 = (0..cm.classes())
        .map(|c| cm.row_sum(c) as u128 * cm.col_sum(c) as u128)
        .sum();
    let trace = cm.trace() as u128;
    if chance == n * n {
        return Ok(if trace == n { 1.0 } else { 0.0 });
    }
    let n = n as f64;
    let p_o = trace as f64 / n;
    let p_e = chance as f64 / (n * n);
    Ok((p_o - p_e) / (1.0 - p_e))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub oa: f64,
    pub aa: f64,
    pub kappa: f64,
    pub per_class: Vec<Option<f64>>,
    pub n: u64,
    pub confusion: ConfusionMatrix,
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    Ok(MetricsReport {
        oa: oa(cm)?,
        aa: aa(cm)?,
        kappa: kappa(cm)?,
        per_class: per_class(cm),
        n: cm.total(),
        confusion: cm.clone(),
    })
}

impl MetricsReport {
    pub fn from_predictions(preds: &[u16], labels: &[u16], classes: usize) -> Result<Self, MetricsError> {
        report(&confusion(preds, labels, classes)?)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    /// Aligned two-column table, values as percentages with two decimals.
    pub fn to_table(&self) -> String {
        let mut rows = vec![
            ("OA".to_string(), pct(Some(self.oa))),
            ("AA".to_string(), pct(Some(self.aa))),
            ("Kappa".to_string(), pct(Some(self.kappa))),
        ];
        for (c, acc) in self.per_class.iter().enumerate() {
            rows.push((format!("class {}", c + 1), pct(*acc)));
        }
        rows.push(("samples".to_string(), self.n.to_string()));
        let left = rows.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
        let right = rows.iter().map(|(_, v)| v.len()).max().unwrap_or(0);
        let mut out = String::new();
        for (k, v) in rows {
            writeln!(out, "{k:<left$}  {v:>right$}").expect("write to string");
        }
        out
    }
}

fn pct(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{:.2}", 100.0 * v),
        None => "-".to_string(),
    }
}
