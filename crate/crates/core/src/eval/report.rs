use std::fmt::{Display, Write as _};

use serde::{Deserialize, Serialize};

use super::{mean_confusion, Interp, PrCurve};
use crate::data::ClassSplit;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class: String,
    pub novel: bool,
    /// `None` when the class has no ground truth.
    pub ap: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub interp: Interp,
    pub per_class: Vec<ClassAp>,
    #[serde(rename = "mAP_all")]
    pub map_all: Option<f64>,
    #[serde(rename = "mAP_base")]
    pub map_base: Option<f64>,
    #[serde(rename = "mAP_novel")]
    pub map_novel: Option<f64>,
    /// Percent; `None` when no detection matched an object.
    pub mean_confusion: Option<f64>,
    /// Row and column names of the confusion matrices.
    pub labels: Vec<String>,
    /// Counts indexed `[gt][pred]`, see [`super::confusion_matrix`].
    pub confusion: Vec<Vec<u64>>,
    /// Class rows divided by their matched count (class columns only).
    pub confusion_by_matched: Vec<Vec<f64>>,
    /// Class rows divided by the class's ground-truth count (missed included).
    pub confusion_by_gt: Vec<Vec<f64>>,
    #[serde(skip)]
    pub curves: Vec<PrCurve>,
}

impl EvalReport {
    #[allow(clippy::too_many_arguments)]
    pub(super) fn new(
        split: &ClassSplit,
        per_class: Vec<Option<f64>>,
        map_all: Option<f64>,
        map_base: Option<f64>,
        map_novel: Option<f64>,
        confusion: Vec<Vec<u64>>,
        curves: Vec<PrCurve>,
        interp: Interp,
    ) -> Self {
        let c = split.num_classes();
        let mut labels: Vec<String> = split.class_names().into_iter().map(String::from).collect();
        labels.push("background-FP".into());
        labels.push("missed".into());
        let mut by_matched = vec![vec![0.0; c + 2]; c + 2];
        let mut by_gt = vec![vec![0.0; c + 2]; c + 2];
        for i in 0..c {
            let row = &confusion[i];
            let matched: u64 = row[..c].iter().sum();
            let total = matched + row[c + 1];
            for j in 0..c + 2 {
                if matched > 0 && j < c {
                    by_matched[i][j] = row[j] as f64 / matched as f64;
                }
                if total > 0 {
                    by_gt[i][j] = row[j] as f64 / total as f64;
                }
            }
        }
        Self {
            split: split.name.clone(),
            interp,
            per_class: per_class
                .into_iter()
                .enumerate()
                .map(|(k, ap)| ClassAp {
                    class: split.class_name(k).to_string(),
                    novel: split.is_novel(k),
                    ap,
                })
                .collect(),
            map_all,
            map_base,
            map_novel,
            mean_confusion: mean_confusion(&confusion),
            labels,
            confusion,
            confusion_by_matched: by_matched,
            confusion_by_gt: by_gt,
            curves,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Header row and column of labels, then one row per ground-truth label.
pub fn confusion_csv<T: Display>(labels: &[String], m: &[Vec<T>]) -> String {
    let mut s = String::from("gt\\pred");
    for l in labels {
        s.push(',');
        s.push_str(l);
    }
    s.push('\n');
    for (l, row) in labels.iter().zip(m) {
        s.push_str(l);
        for v in row {
            let _ = write!(s, ",{v}");
        }
        s.push('\n');
    }
    s
}

/// `class,rank,precision,recall` for every class with ground truth.
pub fn pr_points_csv(report: &EvalReport) -> String {
    let mut s = String::from("class,rank,precision,recall\n");
    for (ca, curve) in report.per_class.iter().zip(&report.curves) {
        for (i, (p, r)) in curve.precision.iter().zip(&curve.recall).enumerate() {
            let _ = writeln!(s, "{},{},{p},{r}", ca.class, i + 1);
        }
    }
    s
}
