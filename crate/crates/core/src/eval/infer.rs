use rayon::prelude::*;

use super::{iou, Detection};
use crate::data::{BBox, Dataset};
use crate::model::{score_regions, HeadSwitches, ModelParams, Trainable};
use crate::rng;
use crate::tensor::{softmax, Tape, Tensor};
use crate::training::proposals::inference_proposals;
use crate::training::{Checkpoint, RegionCache, TrainError};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InferOptions {
    pub jitter_per_object: usize,
    pub background_per_scene: usize,
    /// Class probabilities below this produce no detection.
    pub score_threshold: f64,
    pub nms_iou: f64,
    pub seed: u64,
}

impl Default for InferOptions {
    fn default() -> Self {
        Self {
            jitter_per_object: 2,
            background_per_scene: 12,
            score_threshold: 0.05,
            nms_iou: 0.5,
            seed: 0,
        }
    }
}

/// Greedy NMS over one class's boxes in one scene. Returns kept indices in
/// descending score order; ties keep input order.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..boxes.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Detections for one scene. Proposals are drawn from a stream keyed on the
/// scene id, so the result does not depend on which other scenes are run.
pub fn detect_scene(
    params: &ModelParams,
    bank: &Tensor,
    num_base: usize,
    switches: &HeadSwitches,
    cache: &RegionCache<'_>,
    scene: usize,
    opts: &InferOptions,
) -> Result<Vec<Detection>, TrainError> {
    let s = cache.scene(scene);
    let mut r = rng::derived(opts.seed, &format!("proposals/{}", s.scene_id));
    let props = inference_proposals(s, opts.jitter_per_object, opts.background_per_scene, &mut r);
    if props.is_empty() {
        return Ok(Vec::new());
    }
    let tape = Tape::new();
    let bound = params.bind(&tape, &Trainable::Nothing);
    let out = score_regions(&bound, bank, num_base, &cache.inputs(scene, &props), switches)?;
    let logits = out.logits.value();
    let deltas = out.deltas.value();
    let classes = bank.dims2().0;

    let mut per_class: Vec<(Vec<BBox>, Vec<f64>)> = vec![(Vec::new(), Vec::new()); classes];
    for (i, p) in props.iter().enumerate() {
        let probs = softmax(logits.row(i));
        let d = deltas.row(i);
        let Some(refined) = p.apply_deltas([d[0], d[1], d[2], d[3]]).clip(s.width, s.height) else {
            continue;
        };
        for (c, &prob) in probs[..classes].iter().enumerate() {
            if prob >= opts.score_threshold {
                per_class[c].0.push(refined);
                per_class[c].1.push(prob);
            }
        }
    }
    let mut dets = Vec::new();
    for (c, (boxes, scores)) in per_class.iter().enumerate() {
        for k in nms(boxes, scores, opts.nms_iou) {
            dets.push(Detection {
                scene_id: s.scene_id.clone(),
                class_id: c,
                score: scores[k],
                bbox: boxes[k],
            });
        }
    }
    Ok(dets)
}

/// Runs the checkpoint over every scene, in parallel across scenes. Output
/// is in scene order regardless of scheduling.
pub fn detect(ckpt: &Checkpoint, dataset: &Dataset, opts: &InferOptions) -> Result<Vec<Detection>, TrainError> {
    let cache = RegionCache::new(dataset)?;
    let switches = ckpt.config.switches();
    let num_base = ckpt.split.num_base();
    let per_scene: Vec<Vec<Detection>> = (0..dataset.len())
        .into_par_iter()
        .map(|i| detect_scene(&ckpt.params, &ckpt.bank, num_base, &switches, &cache, i, opts))
        .collect::<Result<_, _>>()?;
    Ok(per_scene.into_iter().flatten().collect())
}
