//! Confusion matrices, precision/recall/F1 and report rendering.
//!
//! JSON report schema:
//!
//! ```text
//! {
//!   "partition": "train" | "test" | null,
//!   "samples": <count>,
//!   "accuracy": <0..1>,
//!   "per_class": [{"code", "class", "precision", "recall", "f1", "support"}; 3],
//!   "macro": {"precision", "recall", "f1"},
//!   "confusion": [[<count>; 3]; 3]        // rows true, columns predicted
//! }
//! ```

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{Partition, SurvivalClass};

const K: usize = 3;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error("{truth} true labels but {predicted} predictions")]
    Length { truth: usize, predicted: usize },
    #[error("class code {0} is outside 0..3")]
    Code(usize),
    #[error("no samples to score")]
    Empty,
}

pub type Result<T, E = EvalError> = std::result::Result<T, E>;

/// Counts indexed `[true][predicted]` by class code.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; K]; K],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..K).map(|c| self.counts[c][c]).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        self.counts[c].iter().sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        self.counts.iter().map(|r| r[c]).sum()
    }
}

pub fn confusion(truth: &[usize], predicted: &[usize]) -> Result<ConfusionMatrix> {
    if truth.len() != predicted.len() {
        return Err(EvalError::Length {
            truth: truth.len(),
            predicted: predicted.len(),
        });
    }
    let mut cm = ConfusionMatrix::default();
    for (&t, &p) in truth.iter().zip(predicted) {
        if t >= K || p >= K {
            return Err(EvalError::Code(t.max(p)));
        }
        cm.counts[t][p] += 1;
    }
    Ok(cm)
}

pub fn confusion_from_classes(
    truth: &[SurvivalClass],
    predicted: &[SurvivalClass],
) -> Result<ConfusionMatrix> {
    let codes = |v: &[SurvivalClass]| v.iter().map(|c| c.code()).collect::<Vec<_>>();
    confusion(&codes(truth), &codes(predicted))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub code: usize,
    pub class: SurvivalClass,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Samples whose true class this is.
    pub support: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MacroMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub partition: Option<Partition>,
    pub samples: u64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    #[serde(rename = "macro")]
    pub macro_avg: MacroMetrics,
    pub confusion: ConfusionMatrix,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and macro metrics; a zero denominator scores 0.
pub fn metrics(cm: &ConfusionMatrix, partition: Option<Partition>) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(EvalError::Empty);
    }
    let per_class: Vec<ClassMetrics> = SurvivalClass::ALL
        .iter()
        .map(|&class| {
            let c = class.code();
            let tp = cm.counts[c][c];
            let precision = ratio(tp, cm.col_sum(c));
            let recall = ratio(tp, cm.row_sum(c));
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            ClassMetrics {
                code: c,
                class,
                precision,
                recall,
                f1,
                support: cm.row_sum(c),
            }
        })
        .collect();
    let mean = |f: fn(&ClassMetrics) -> f64| per_class.iter().map(f).sum::<f64>() / K as f64;
    let macro_avg = MacroMetrics {
        precision: mean(|m| m.precision),
        recall: mean(|m| m.recall),
        f1: mean(|m| m.f1),
    };
    Ok(MetricsReport {
        partition,
        samples: total,
        accuracy: ratio(cm.trace(), total),
        per_class,
        macro_avg,
        confusion: *cm,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReportFormat {
    Text,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "text" => Ok(Self::Text),
            "json" => Ok(Self::Json),
            other => Err(format!("unknown report format `{other}` (text or json)")),
        }
    }
}

pub fn render_report(report: &MetricsReport, format: ReportFormat) -> String {
    match format {
        ReportFormat::Json => {
            serde_json::to_string_pretty(report).expect("report serializes") + "\n"
        }
        ReportFormat::Text => render_text(report),
    }
}

fn pct(x: f64) -> String {
    format!("{:.1}%", 100.0 * x)
}

fn render_text(r: &MetricsReport) -> String {
    let mut s = String::new();
    let part = r.partition.map(|p| format!(" ({p})")).unwrap_or_default();
    writeln!(s, "samples: {}{part}", r.samples).unwrap();
    writeln!(s, "accuracy: {}", pct(r.accuracy)).unwrap();
    writeln!(s).unwrap();
    writeln!(s, "confusion matrix (rows: true, columns: predicted)").unwrap();
    writeln!(s, "       {:>6}{:>6}{:>6}", 0, 1, 2).unwrap();
    for (c, row) in r.confusion.counts.iter().enumerate() {
        writeln!(s, "  {c:>3}  {:>6}{:>6}{:>6}", row[0], row[1], row[2]).unwrap();
    }
    let legend: Vec<String> = SurvivalClass::ALL
        .iter()
        .map(|c| format!("{} = {}", c.code(), c))
        .collect();
    writeln!(s, "  {}", legend.join(", ")).unwrap();
    writeln!(s).unwrap();
    writeln!(
        s,
        "{:<16}{:>10}{:>10}{:>10}{:>9}",
        "class", "precision", "recall", "f1", "support"
    )
    .unwrap();
    for m in &r.per_class {
        writeln!(
            s,
            "{:<16}{:>10}{:>10}{:>10}{:>9}",
            format!("{} {}", m.code, m.class),
            pct(m.precision),
            pct(m.recall),
            pct(m.f1),
            m.support
        )
        .unwrap();
    }
    writeln!(
        s,
        "{:<16}{:>10}{:>10}{:>10}{:>9}",
        "average",
        pct(r.macro_avg.precision),
        pct(r.macro_avg.recall),
        pct(r.macro_avg.f1),
        r.samples
    )
    .unwrap();
    s
}
