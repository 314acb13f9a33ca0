//! Metrics CSV, final reports and run comparisons.

use std::fmt;
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::RoundMetrics;

/// Column order of `metrics.csv`. `round` is 1-based; accuracies are
/// fractions in `[0, 1]`; absent values are empty fields.
pub const METRICS_HEADER: [&str; 6] = [
    "round",
    "lr",
    "mean_client_train_loss",
    "test_acc_sgd_line",
    "test_acc_swa_line",
    "lambda_max",
];

/// Rounds averaged for the final accuracy.
pub const FINAL_WINDOW: usize = 100;

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub fn metrics_record(m: &RoundMetrics) -> [String; 6] {
    [
        (m.round + 1).to_string(),
        m.lr.to_string(),
        m.mean_client_train_loss.to_string(),
        opt(m.test_acc_sgd),
        opt(m.test_acc_swa),
        opt(m.lambda_max),
    ]
}

pub fn write_metrics<W: Write>(out: W, rows: &[RoundMetrics], header: bool) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_writer(out);
    if header {
        w.write_record(METRICS_HEADER).map_err(csv_err)?;
    }
    for r in rows {
        w.write_record(metrics_record(r)).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Usage(format!("csv: {other:?}")),
    }
}

pub fn read_metrics<R: Read>(input: R) -> Result<Vec<RoundMetrics>> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header = r.headers().map_err(csv_err)?.clone();
    if header.iter().ne(METRICS_HEADER.iter().copied()) {
        return Err(Error::Usage(format!("unexpected metrics header {header:?}")));
    }
    let mut rows = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec.map_err(csv_err)?;
        let bad = |col: &str| Error::Usage(format!("metrics row {}: bad `{col}`", i + 1));
        let num = |j: usize| -> Result<Option<f64>> {
            let s = &rec[j];
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(|_| bad(METRICS_HEADER[j]))
            }
        };
        let round: usize = rec[0].parse().map_err(|_| bad("round"))?;
        if round == 0 {
            return Err(bad("round"));
        }
        rows.push(RoundMetrics {
            round: round - 1,
            lr: num(1)?.ok_or_else(|| bad("lr"))?,
            mean_client_train_loss: num(2)?.ok_or_else(|| bad("mean_client_train_loss"))?,
            test_acc_sgd: num(3)?,
            test_acc_swa: num(4)?,
            lambda_max: num(5)?,
        });
    }
    Ok(rows)
}

/// Summary written to `report.json`. Accuracies are percentages averaged
/// over the last `window` rounds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub name: String,
    pub seed: u64,
    pub rounds: usize,
    pub metric: String,
    pub window: usize,
    pub final_accuracy: Option<f64>,
    pub final_accuracy_sgd: Option<f64>,
    pub final_accuracy_swa: Option<f64>,
    pub final_lambda_max: Option<f64>,
    pub n_models: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Report over `rows` (one per round, in order).
pub fn summarize(name: &str, seed: u64, rows: &[RoundMetrics], n_models: usize) -> ExperimentReport {
    let window = rows.len().min(FINAL_WINDOW);
    let tail = &rows[rows.len() - window..];
    let pct = |f: fn(&RoundMetrics) -> Option<f64>| mean(tail.iter().filter_map(f)).map(|m| 100.0 * m);
    ExperimentReport {
        name: name.to_string(),
        seed,
        rounds: rows.len(),
        metric: "test_accuracy".into(),
        window,
        final_accuracy: pct(|r| r.headline_accuracy()),
        final_accuracy_sgd: pct(|r| r.test_acc_sgd),
        final_accuracy_swa: pct(|r| r.test_acc_swa),
        final_lambda_max: rows.iter().rev().find_map(|r| r.lambda_max),
        n_models,
    }
}

/// `(a − b, 100·(a − b)/b)`; the relative part is `None` when `b = 0`.
pub fn improvement(a: f64, b: f64) -> (f64, Option<f64>) {
    let d = a - b;
    (d, (b != 0.0).then(|| 100.0 * d / b))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub name: String,
    pub value: Option<f64>,
    pub absolute: Option<f64>,
    pub relative: Option<f64>,
}

/// Improvements of each run over the first one.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Comparison {
    pub metric: String,
    pub baseline: String,
    pub rows: Vec<ComparisonRow>,
}

pub fn compare_runs(reports: &[ExperimentReport]) -> Result<Comparison> {
    let base = match reports {
        [base, _, ..] => base,
        _ => return Err(Error::Usage("compare needs at least two reports".into())),
    };
    if let Some(r) = reports.iter().find(|r| r.metric != base.metric) {
        return Err(Error::Usage(format!(
            "report `{}` measures {}, baseline measures {}",
            r.name, r.metric, base.metric
        )));
    }
    let rows = reports
        .iter()
        .map(|r| {
            let (absolute, relative) = match (r.final_accuracy, base.final_accuracy) {
                (Some(a), Some(b)) => {
                    let (d, rel) = improvement(a, b);
                    (Some(d), rel)
                }
                _ => (None, None),
            };
            ComparisonRow {
                name: r.name.clone(),
                value: r.final_accuracy,
                absolute,
                relative,
            }
        })
        .collect();
    Ok(Comparison {
        metric: base.metric.clone(),
        baseline: base.name.clone(),
        rows,
    })
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let width = self.rows.iter().map(|r| r.name.len()).max().unwrap_or(0).max(3);
        writeln!(f, "{:<width$}  {:>9}  {:>9}  {:>10}", "run", self.metric, "abs", "rel")?;
        for r in &self.rows {
            let value = r.value.map(|v| format!("{v:.2}")).unwrap_or_else(|| "n/a".into());
            let abs = r.absolute.map(|v| format!("{v:+.2}")).unwrap_or_else(|| "n/a".into());
            let rel = match (r.absolute, r.relative) {
                (_, Some(v)) => format!("{v:+.2}%"),
                (Some(_), None) => "undefined".into(),
                (None, None) => "n/a".into(),
            };
            writeln!(f, "{:<width$}  {value:>9}  {abs:>9}  {rel:>10}", r.name)?;
        }
        Ok(())
    }
}
