//! Detection evaluation: IoU matching, per-class AP, mAP@50 split into base
//! and novel classes, confusion matrices and the mean-confusion statistic.

mod infer;
mod report;

use std::collections::HashMap;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::data::{BBox, ClassSplit, Dataset};

pub use crate::data::io::Detection;
pub use infer::{detect, detect_scene, nms, InferOptions};
pub use report::{confusion_csv, pr_points_csv, EvalReport};

/// IoU needed for a detection to count as a true positive.
pub const MATCH_IOU: f64 = 0.5;
/// Detections below this score are left out of the confusion matrix.
pub const CONFUSION_SCORE: f64 = 0.5;

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    a.iou(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Interp {
    /// Area under the precision envelope.
    #[default]
    AllPoint,
    /// Mean envelope precision at recall 0, 0.1, …, 1.
    #[serde(rename = "11point")]
    ElevenPoint,
}

impl std::str::FromStr for Interp {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "allpoint" => Ok(Self::AllPoint),
            "11point" => Ok(Self::ElevenPoint),
            _ => Err(format!("unknown interpolation {s:?}, expected allpoint or 11point")),
        }
    }
}

/// Indices of `dets` by descending score; equal scores keep input order.
pub fn rank(dets: &[Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.total_cmp(&dets[a].score));
    order
}

/// Greedy matching in score order. Each detection takes the highest-IoU
/// still-unmatched ground truth in its scene reaching `iou_thresh`; with
/// `class_aware` only same-class boxes qualify.
///
/// Returns, per detection, the index of its matched ground truth.
pub fn greedy_match(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64, class_aware: bool) -> Vec<Option<usize>> {
    let mut by_scene: HashMap<&str, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_scene.entry(g.scene_id.as_str()).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    let mut out = vec![None; dets.len()];
    for di in rank(dets) {
        let d = &dets[di];
        let mut best: Option<(f64, usize)> = None;
        for &gi in by_scene.get(d.scene_id.as_str()).map(Vec::as_slice).unwrap_or(&[]) {
            let g = &gts[gi];
            if taken[gi] || (class_aware && g.class_id != d.class_id) {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= iou_thresh && best.is_none_or(|(b, _)| o > b) {
                best = Some((o, gi));
            }
        }
        if let Some((_, gi)) = best {
            taken[gi] = true;
            out[di] = Some(gi);
        }
    }
    out
}

/// One annotated box.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    pub scene_id: String,
    pub class_id: usize,
    pub bbox: BBox,
}

pub fn ground_truth(dataset: &Dataset) -> Vec<GroundTruth> {
    dataset
        .scenes
        .iter()
        .flat_map(|s| {
            s.objects.iter().map(|o| GroundTruth {
                scene_id: s.scene_id.clone(),
                class_id: o.class_id,
                bbox: o.bbox,
            })
        })
        .collect()
}

/// Precision and recall after each detection in rank order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PrCurve {
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
}

impl PrCurve {
    /// `tp` holds true-positive flags in rank order.
    pub fn from_flags(tp: &[bool], num_gt: usize) -> Self {
        let mut c = PrCurve::default();
        let mut hits = 0usize;
        for (i, &t) in tp.iter().enumerate() {
            hits += t as usize;
            c.precision.push(hits as f64 / (i + 1) as f64);
            c.recall.push(hits as f64 / num_gt as f64);
        }
        c
    }

    pub fn ap(&self, interp: Interp) -> f64 {
        let n = self.precision.len();
        // Precision envelope: best precision at this rank or any later one.
        let mut env = self.precision.clone();
        for i in (0..n.saturating_sub(1)).rev() {
            env[i] = env[i].max(env[i + 1]);
        }
        match interp {
            Interp::AllPoint => {
                let mut ap = 0.0;
                let mut prev = 0.0;
                for i in 0..n {
                    if self.recall[i] > prev {
                        ap += (self.recall[i] - prev) * env[i];
                        prev = self.recall[i];
                    }
                }
                ap
            }
            Interp::ElevenPoint => {
                (0..=10)
                    .map(|t| {
                        let t = t as f64 / 10.0;
                        (0..n).find(|&i| self.recall[i] >= t - 1e-12).map_or(0.0, |i| env[i])
                    })
                    .sum::<f64>()
                    / 11.0
            }
        }
    }
}

/// AP of one class's detections against its ground truth, with the PR curve.
/// `None` when the class has no ground truth.
pub fn class_curve(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64) -> Option<PrCurve> {
    if gts.is_empty() {
        return None;
    }
    let matched = greedy_match(dets, gts, iou_thresh, true);
    let flags: Vec<bool> = rank(dets).into_iter().map(|i| matched[i].is_some()).collect();
    Some(PrCurve::from_flags(&flags, gts.len()))
}

pub fn average_precision(dets: &[Detection], gts: &[GroundTruth], iou_thresh: f64, interp: Interp) -> Option<f64> {
    class_curve(dets, gts, iou_thresh).map(|c| c.ap(interp))
}

/// `(C+2)×(C+2)` counts indexed `[gt][pred]`. Indices `0..C` are classes,
/// `C` is the background-FP row (detections matching no object) and `C+1`
/// the missed column (objects no detection matched). Row `C+1` and column
/// `C` stay zero and exist to keep the matrix square.
pub fn confusion_matrix(dets: &[Detection], gts: &[GroundTruth], num_classes: usize, score_thresh: f64) -> Vec<Vec<u64>> {
    let kept: Vec<Detection> = dets.iter().filter(|d| d.score >= score_thresh).cloned().collect();
    let matched = greedy_match(&kept, gts, MATCH_IOU, false);
    let mut m = vec![vec![0u64; num_classes + 2]; num_classes + 2];
    let mut hit = vec![false; gts.len()];
    for (d, g) in kept.iter().zip(&matched) {
        match g {
            Some(gi) => {
                hit[*gi] = true;
                m[gts[*gi].class_id][d.class_id] += 1;
            }
            None => m[num_classes][d.class_id] += 1,
        }
    }
    for (g, h) in gts.iter().zip(hit) {
        if !h {
            m[g.class_id][num_classes + 1] += 1;
        }
    }
    m
}

/// Mean over classes with at least one matched detection of the off-diagonal
/// share of that class's matches, in percent. Missed and background cells do
/// not count. `None` when nothing matched.
pub fn mean_confusion(m: &[Vec<u64>]) -> Option<f64> {
    let c = m.len() - 2;
    let mut shares = Vec::new();
    for (i, row) in m.iter().take(c).enumerate() {
        let matched: u64 = row[..c].iter().sum();
        if matched > 0 {
            shares.push((matched - row[i]) as f64 / matched as f64);
        }
    }
    if shares.is_empty() {
        return None;
    }
    Some(100.0 * shares.iter().sum::<f64>() / shares.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalOptions {
    pub iou_thresh: f64,
    pub interp: Interp,
    pub confusion_score: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            iou_thresh: MATCH_IOU,
            interp: Interp::AllPoint,
            confusion_score: CONFUSION_SCORE,
        }
    }
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn evaluate(dets: &[Detection], gts: &Dataset, split: &ClassSplit, opts: &EvalOptions) -> EvalReport {
    let c = split.num_classes();
    let gts = ground_truth(gts);
    let mut per_class = Vec::with_capacity(c);
    let mut curves = Vec::with_capacity(c);
    for k in 0..c {
        let d: Vec<Detection> = dets.iter().filter(|d| d.class_id == k).cloned().collect();
        let g: Vec<GroundTruth> = gts.iter().filter(|g| g.class_id == k).cloned().collect();
        let curve = class_curve(&d, &g, opts.iou_thresh);
        if curve.is_none() {
            warn!("class {} has no ground truth; left out of mAP", split.class_name(k));
        }
        per_class.push(curve.as_ref().map(|cv| cv.ap(opts.interp)));
        curves.push(curve.unwrap_or_default());
    }
    let confusion = confusion_matrix(dets, &gts, c, opts.confusion_score);
    let ap_of = |r: std::ops::Range<usize>| mean(r.filter_map(|k| per_class[k]));
    EvalReport::new(
        split,
        per_class.clone(),
        ap_of(0..c),
        ap_of(split.base_range()),
        ap_of(split.novel_range()),
        confusion,
        curves,
        opts.interp,
    )
}
