//! Accuracy, exact pairwise AUC, and Table-1 style aggregation.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::datamodel::{binarize_grade, Grade, Task};
use crate::error::{contract, MoonError, Result};
use crate::fusion::{ordinal_decode, task_score};

/// Percentage of matching entries.
pub fn accuracy(preds: &[bool], labels: &[bool]) -> Result<f64> {
    contract!(
        !preds.is_empty() && preds.len() == labels.len(),
        "accuracy needs equal non-empty lists, got {} and {}",
        preds.len(),
        labels.len()
    );
    let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
    Ok(100.0 * hits as f64 / preds.len() as f64)
}

/// Mann-Whitney AUC: the share of (positive, negative) pairs ranked
/// correctly, ties counting one half.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    contract!(
        scores.len() == labels.len(),
        "auc got {} scores for {} labels",
        scores.len(),
        labels.len()
    );
    contract!(scores.iter().all(|s| !s.is_nan()), "auc scores contain NaN");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(MoonError::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Walk groups of equal scores; twice the concordance count stays integral.
    let (mut twice, mut neg_below, mut i) = (0u128, 0u128, 0);
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let group_pos = order[i..j].iter().filter(|&&k| labels[k]).count() as u128;
        let group_neg = (j - i) as u128 - group_pos;
        twice += group_pos * (2 * neg_below + group_neg);
        neg_below += group_neg;
        i = j;
    }
    Ok(twice as f64 / (2 * pos * neg) as f64)
}

/// Accuracy (%) and AUC of one binary task.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskMetrics {
    pub acc: f64,
    pub auc: f64,
}

/// Metrics of one evaluation: both binary tasks plus 3-class accuracy.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub ge_g2: TaskMetrics,
    pub g3: TaskMetrics,
    pub acc3: f64,
}

impl MetricSet {
    pub fn task(&self, task: Task) -> TaskMetrics {
        match task {
            Task::AtLeastG2 => self.ge_g2,
            Task::G3 => self.g3,
        }
    }

    /// Mean of the two task AUCs.
    pub fn mean_auc(&self) -> f64 {
        0.5 * (self.ge_g2.auc + self.g3.auc)
    }

    fn values(&self) -> [f64; 5] {
        [self.ge_g2.acc, self.ge_g2.auc, self.g3.acc, self.g3.auc, self.acc3]
    }

    fn from_values(v: [f64; 5]) -> Self {
        Self {
            ge_g2: TaskMetrics { acc: v[0], auc: v[1] },
            g3: TaskMetrics { acc: v[2], auc: v[3] },
            acc3: v[4],
        }
    }
}

/// Scores threshold logits against true grades. Task accuracy uses the
/// ordinally decoded grade, binarized per task.
pub fn evaluate_logits(logits: &[[f64; 2]], grades: &[Grade]) -> Result<MetricSet> {
    contract!(
        !logits.is_empty() && logits.len() == grades.len(),
        "{} predictions for {} grades",
        logits.len(),
        grades.len()
    );
    let decoded: Vec<Grade> = logits.iter().map(|h| ordinal_decode(h)).collect();
    let per_task = |task: Task| -> Result<TaskMetrics> {
        let labels: Vec<bool> = grades.iter().map(|&g| binarize_grade(g, task)).collect();
        let preds: Vec<bool> = decoded.iter().map(|&g| binarize_grade(g, task)).collect();
        let scores: Vec<f64> = logits.iter().map(|h| task_score(h, task)).collect();
        Ok(TaskMetrics {
            acc: accuracy(&preds, &labels)?,
            auc: auc(&scores, &labels)?,
        })
    };
    let hits = decoded.iter().zip(grades).filter(|(a, b)| a == b).count();
    Ok(MetricSet {
        ge_g2: per_task(Task::AtLeastG2)?,
        g3: per_task(Task::G3)?,
        acc3: 100.0 * hits as f64 / grades.len() as f64,
    })
}

/// Unweighted mean and sample standard deviation over runs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean: MetricSet,
    pub std: MetricSet,
}

pub fn aggregate_cv(runs: &[MetricSet]) -> Result<Aggregate> {
    contract!(runs.len() >= 2, "aggregation needs at least 2 runs, got {}", runs.len());
    let n = runs.len() as f64;
    let mut mean = [0.0; 5];
    for r in runs {
        for (m, v) in mean.iter_mut().zip(r.values()) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut var = [0.0; 5];
    for r in runs {
        for ((s, v), m) in var.iter_mut().zip(r.values()).zip(mean) {
            *s += (v - m) * (v - m);
        }
    }
    let std = var.map(|s| (s / (n - 1.0)).sqrt());
    Ok(Aggregate {
        mean: MetricSet::from_values(mean),
        std: MetricSet::from_values(std),
    })
}

/// Ablation switches recorded with a report row.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AblationFlags {
    pub ori: bool,
    pub hfe: bool,
    pub cca: bool,
}

/// One method's results over folds or seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub label: String,
    pub strategy: Option<String>,
    pub flags: AblationFlags,
    pub runs: Vec<MetricSet>,
    pub mean: MetricSet,
    /// Absent with a single run.
    pub std: Option<MetricSet>,
}

impl ReportRow {
    pub fn new(label: String, strategy: Option<String>, flags: AblationFlags, runs: Vec<MetricSet>) -> Result<Self> {
        contract!(!runs.is_empty(), "report row `{}` has no runs", label);
        let (mean, std) = if runs.len() >= 2 {
            let agg = aggregate_cv(&runs)?;
            (agg.mean, Some(agg.std))
        } else {
            (runs[0], None)
        };
        Ok(Self {
            label,
            strategy,
            flags,
            runs,
            mean,
            std,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    /// What the runs are: folds of a cross-validation, or seeds of a
    /// fixed train/test split.
    pub protocol: String,
    pub rows: Vec<ReportRow>,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Aligned text table: one row per method, ACC (%) and AUC per task,
    /// standard deviations in percent as subscripts after `±`.
    pub fn to_table(&self) -> String {
        let cell = |mean: f64, std: Option<f64>, pct: bool| -> String {
            let (m, s) = if pct { (mean, std) } else { (mean, std.map(|s| s * 100.0)) };
            let m = if pct { format!("{m:.2}") } else { format!("{m:.3}") };
            match s {
                Some(s) => format!("{m}±{s:.2}"),
                None => m,
            }
        };
        let header = ["Method", "≥G2 ACC(%)", "≥G2 AUC", "G3 ACC(%)", "G3 AUC"];
        let mut lines: Vec<[String; 5]> = vec![header.map(String::from)];
        for row in &self.rows {
            let std = row.std;
            lines.push([
                row.label.clone(),
                cell(row.mean.ge_g2.acc, std.map(|s| s.ge_g2.acc), true),
                cell(row.mean.ge_g2.auc, std.map(|s| s.ge_g2.auc), false),
                cell(row.mean.g3.acc, std.map(|s| s.g3.acc), true),
                cell(row.mean.g3.auc, std.map(|s| s.g3.auc), false),
            ]);
        }
        let widths: Vec<usize> = (0..5)
            .map(|c| lines.iter().map(|l| l[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        if !self.protocol.is_empty() {
            let _ = writeln!(out, "{}", self.protocol);
        }
        for (i, l) in lines.iter().enumerate() {
            let cells: Vec<String> = l
                .iter()
                .zip(&widths)
                .map(|(s, &w)| format!("{s}{}", " ".repeat(w - s.chars().count())))
                .collect();
            let _ = writeln!(out, "{}", cells.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }
}
