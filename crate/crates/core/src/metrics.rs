//! Accuracy matrix bookkeeping and the aggregate continual-learning metrics.
//!
//! Entry `(t, i)` is the accuracy on dataset `t` after training step `i`,
//! both 1-based. Rows are datasets in training order.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::inference::{Mode, PredictionRecord};

#[derive(Debug, Error, PartialEq)]
pub enum MetricError {
    #[error("cell ({t}, {i}) outside a {size}x{size} matrix")]
    OutOfRange { t: usize, i: usize, size: usize },
    #[error("accuracy {0} outside [0, 1]")]
    InvalidAccuracy(f64),
    #[error("accuracy matrix incomplete: cell ({t}, {i}) not recorded")]
    Incomplete { t: usize, i: usize },
    #[error("csv line {line}: {msg}")]
    Csv { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMatrix {
    pub tasks: usize,
    pub mode: Mode,
    pub dataset_names: Vec<String>,
    values: Vec<Option<f64>>,
}

impl AccuracyMatrix {
    pub fn new(tasks: usize, mode: Mode, dataset_names: Vec<String>) -> Self {
        assert_eq!(dataset_names.len(), tasks, "one name per dataset");
        Self {
            tasks,
            mode,
            dataset_names,
            values: vec![None; tasks * tasks],
        }
    }

    /// Matrix from fully populated rows, datasets named `1..=T`.
    pub fn from_rows(mode: Mode, rows: &[Vec<f64>]) -> Result<Self, MetricError> {
        let n = rows.len();
        let mut m = Self::new(n, mode, (1..=n).map(|t| t.to_string()).collect());
        for (t, row) in rows.iter().enumerate() {
            if row.len() != n {
                return Err(MetricError::OutOfRange {
                    t: t + 1,
                    i: row.len(),
                    size: n,
                });
            }
            for (i, v) in row.iter().enumerate() {
                m.record(t + 1, i + 1, *v)?;
            }
        }
        Ok(m)
    }

    fn index(&self, t: usize, i: usize) -> Result<usize, MetricError> {
        if t == 0 || i == 0 || t > self.tasks || i > self.tasks {
            return Err(MetricError::OutOfRange { t, i, size: self.tasks });
        }
        Ok((t - 1) * self.tasks + (i - 1))
    }

    pub fn record(&mut self, t: usize, i: usize, accuracy: f64) -> Result<(), MetricError> {
        let k = self.index(t, i)?;
        if !(0.0..=1.0).contains(&accuracy) {
            return Err(MetricError::InvalidAccuracy(accuracy));
        }
        self.values[k] = Some(accuracy);
        Ok(())
    }

    pub fn get(&self, t: usize, i: usize) -> Option<f64> {
        self.index(t, i).ok().and_then(|k| self.values[k])
    }

    pub fn first_missing(&self) -> Option<(usize, usize)> {
        self.values
            .iter()
            .position(Option::is_none)
            .map(|k| (k / self.tasks + 1, k % self.tasks + 1))
    }

    pub fn is_complete(&self) -> bool {
        self.first_missing().is_none()
    }

    pub fn rows(&self) -> Result<Vec<Vec<f64>>, MetricError> {
        if let Some((t, i)) = self.first_missing() {
            return Err(MetricError::Incomplete { t, i });
        }
        Ok(self
            .values
            .chunks(self.tasks)
            .map(|r| r.iter().map(|v| v.expect("complete")).collect())
            .collect())
    }

    /// Header `dataset,1,2,..,T`; one row per dataset; missing cells empty.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset");
        for i in 1..=self.tasks {
            let _ = write!(out, ",{i}");
        }
        out.push('\n');
        for t in 1..=self.tasks {
            out.push_str(&csv_field(&self.dataset_names[t - 1]));
            for i in 1..=self.tasks {
                out.push(',');
                if let Some(v) = self.get(t, i) {
                    let _ = write!(out, "{v}");
                }
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, mode: Mode) -> Result<Self, MetricError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let header = lines.next().ok_or(MetricError::Csv {
            line: 1,
            msg: "empty file".into(),
        })?;
        let tasks = header.split(',').count() - 1;
        let body: Vec<&str> = lines.collect();
        if body.len() != tasks {
            return Err(MetricError::Csv {
                line: body.len() + 2,
                msg: format!("expected {tasks} dataset rows, found {}", body.len()),
            });
        }
        let mut names = Vec::new();
        let mut cells = Vec::new();
        for (r, line) in body.iter().enumerate() {
            let parts: Vec<&str> = line.rsplitn(tasks + 1, ',').collect();
            if parts.len() != tasks + 1 {
                return Err(MetricError::Csv {
                    line: r + 2,
                    msg: "wrong number of columns".into(),
                });
            }
            names.push(parts[tasks].trim_matches('"').replace("\"\"", "\""));
            for (c, p) in parts[..tasks].iter().rev().enumerate() {
                if p.is_empty() {
                    continue;
                }
                let v: f64 = p.parse().map_err(|_| MetricError::Csv {
                    line: r + 2,
                    msg: format!("bad number {p:?}"),
                })?;
                cells.push((r + 1, c + 1, v));
            }
        }
        let mut m = Self::new(tasks, mode, names);
        for (t, i, v) in cells {
            m.record(t, i, v)?;
        }
        Ok(m)
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub dataset: String,
    pub avg: f64,
    pub last: f64,
    /// Absent for the first dataset.
    pub transfer: Option<f64>,
    pub forgetting: f64,
}

type MarkdownRow<'a> = (&'a str, Box<dyn Fn(&DatasetMetrics) -> Option<f64>>, Option<f64>);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mode: Mode,
    pub per_dataset: Vec<DatasetMetrics>,
    pub avg: f64,
    pub last: f64,
    /// Absent for a single-task stream.
    pub transfer: Option<f64>,
    pub forgetting: f64,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn compute_report(matrix: &AccuracyMatrix) -> Result<MetricReport, MetricError> {
    let rows = matrix.rows()?;
    let n = matrix.tasks;
    let per_dataset: Vec<DatasetMetrics> = rows
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let t = k + 1;
            DatasetMetrics {
                dataset: matrix.dataset_names[k].clone(),
                avg: mean(row),
                last: row[n - 1],
                transfer: (t >= 2).then(|| mean(&row[..t - 1])),
                forgetting: mean(&row[t - 1..]),
            }
        })
        .collect();
    let transfers: Vec<f64> = per_dataset.iter().filter_map(|d| d.transfer).collect();
    Ok(MetricReport {
        mode: matrix.mode,
        avg: mean(&per_dataset.iter().map(|d| d.avg).collect::<Vec<_>>()),
        last: mean(&per_dataset.iter().map(|d| d.last).collect::<Vec<_>>()),
        transfer: (!transfers.is_empty()).then(|| mean(&transfers)),
        forgetting: mean(&per_dataset.iter().map(|d| d.forgetting).collect::<Vec<_>>()),
        per_dataset,
    })
}

fn pct(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

impl MetricReport {
    /// Datasets as columns plus a mean column; one row per metric.
    pub fn to_markdown(&self, title: &str) -> String {
        let mut out = format!("### {title} ({})\n\n| Metric |", self.mode);
        for d in &self.per_dataset {
            let _ = write!(out, " {} |", d.dataset);
        }
        out.push_str(" Mean |\n|---|");
        for _ in 0..=self.per_dataset.len() {
            out.push_str("---|");
        }
        out.push('\n');
        let rows: [MarkdownRow; 4] = [
            ("Last", Box::new(|d| Some(d.last)), Some(self.last)),
            ("Forgetting", Box::new(|d| Some(d.forgetting)), Some(self.forgetting)),
            ("Avg", Box::new(|d| Some(d.avg)), Some(self.avg)),
            ("Transfer", Box::new(|d| d.transfer), self.transfer),
        ];
        for (name, f, agg) in rows {
            let _ = write!(out, "| {name} |");
            for d in &self.per_dataset {
                let _ = write!(out, " {} |", f(d).map(pct).unwrap_or_else(|| "-".into()));
            }
            let _ = writeln!(out, " {} |", agg.map(pct).unwrap_or_else(|| "-".into()));
        }
        out
    }
}

/// Rebuilds accuracy matrices (one per mode) from prediction log records.
/// `dataset_names[t-1]` names dataset `t`.
pub fn matrices_from_predictions(
    records: &[PredictionRecord],
    dataset_names: &[String],
) -> Result<BTreeMap<Mode, AccuracyMatrix>, MetricError> {
    let n = dataset_names.len();
    let mut counts: BTreeMap<(Mode, usize, usize), (usize, usize)> = BTreeMap::new();
    for r in records {
        if r.dataset == 0 || r.step == 0 || r.dataset > n || r.step > n {
            return Err(MetricError::OutOfRange {
                t: r.dataset,
                i: r.step,
                size: n,
            });
        }
        let c = counts.entry((r.mode, r.dataset, r.step)).or_default();
        c.0 += usize::from(r.predicted == r.true_label);
        c.1 += 1;
    }
    let mut out = BTreeMap::new();
    for ((mode, t, i), (hit, total)) in counts {
        out.entry(mode)
            .or_insert_with(|| AccuracyMatrix::new(n, mode, dataset_names.to_vec()))
            .record(t, i, hit as f64 / total as f64)?;
    }
    Ok(out)
}
