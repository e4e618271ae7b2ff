//! Synthetic region proposals standing in for a region proposal network.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::data::{BBox, Scene};
use crate::rng::DetRng;

/// Regions with IoU at least this against a ground-truth box take its class.
pub const POSITIVE_IOU: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Proposal {
    pub bbox: BBox,
    /// Class of the best-overlapping ground truth, `None` for background.
    pub label: Option<usize>,
    /// The ground-truth box the label came from.
    pub target: Option<BBox>,
}

/// Best-overlapping ground-truth object when its IoU reaches [`POSITIVE_IOU`].
/// Ties go to the earlier object.
pub fn assign(region: &BBox, scene: &Scene) -> Option<(usize, BBox)> {
    let mut best: Option<(f64, usize, BBox)> = None;
    for o in &scene.objects {
        let iou = o.bbox.iou(region);
        if best.is_none_or(|(b, _, _)| iou > b) {
            best = Some((iou, o.class_id, o.bbox));
        }
    }
    best.filter(|(iou, _, _)| *iou >= POSITIVE_IOU).map(|(_, c, b)| (c, b))
}

fn clip(b: BBox, scene: &Scene) -> Option<BBox> {
    let x1 = b.x1.clamp(0.0, scene.width);
    let y1 = b.y1.clamp(0.0, scene.height);
    let x2 = b.x2.clamp(0.0, scene.width);
    let y2 = b.y2.clamp(0.0, scene.height);
    BBox::new(x1, y1, x2, y2)
}

/// A perturbed copy of `gt` with IoU ≥ [`POSITIVE_IOU`], clipped to the scene.
/// Falls back to `gt` itself after 20 rejected draws.
pub fn jitter(gt: &BBox, scene: &Scene, rng: &mut DetRng) -> BBox {
    let shift = Normal::new(0.0, 0.1).expect("valid sigma");
    let scale = Normal::new(0.0, 0.12).expect("valid sigma");
    for _ in 0..20 {
        let (cx, cy) = gt.center();
        let w = gt.width() * f64::exp(scale.sample(rng));
        let h = gt.height() * f64::exp(scale.sample(rng));
        let cx = cx + shift.sample(rng) * gt.width();
        let cy = cy + shift.sample(rng) * gt.height();
        let Some(b) = clip(BBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0).expect("positive side"), scene) else {
            continue;
        };
        if b.iou(gt) >= POSITIVE_IOU {
            return b;
        }
    }
    *gt
}

/// A box anywhere in the scene with sides between 10% and 50% of the extent.
pub fn random_box(scene: &Scene, rng: &mut DetRng) -> BBox {
    let w = rng.random_range(0.1..0.5) * scene.width;
    let h = rng.random_range(0.1..0.5) * scene.height;
    let x = rng.random_range(0.0..=(scene.width - w));
    let y = rng.random_range(0.0..=(scene.height - h));
    BBox::new(x, y, x + w, y + h).expect("positive side")
}

fn labelled(bbox: BBox, scene: &Scene) -> Proposal {
    let hit = assign(&bbox, scene);
    Proposal {
        bbox,
        label: hit.map(|h| h.0),
        target: hit.map(|h| h.1),
    }
}

/// Ground-truth boxes, `jitter_per_object` jittered copies of each and
/// `background` random boxes, all labelled by [`assign`].
pub fn training_proposals(scene: &Scene, jitter_per_object: usize, background: usize, rng: &mut DetRng) -> Vec<Proposal> {
    let mut out = Vec::with_capacity(scene.objects.len() * (1 + jitter_per_object) + background);
    for o in &scene.objects {
        out.push(labelled(o.bbox, scene));
        for _ in 0..jitter_per_object {
            out.push(labelled(jitter(&o.bbox, scene, rng), scene));
        }
    }
    for _ in 0..background {
        out.push(labelled(random_box(scene, rng), scene));
    }
    out
}

/// Detection-time proposals: jittered copies of the annotated boxes (never the
/// boxes themselves) plus random boxes. Labels are not attached.
pub fn inference_proposals(scene: &Scene, jitter_per_object: usize, background: usize, rng: &mut DetRng) -> Vec<BBox> {
    let mut out = Vec::new();
    for o in &scene.objects {
        for _ in 0..jitter_per_object.max(1) {
            out.push(jitter(&o.bbox, scene, rng));
        }
    }
    for _ in 0..background {
        out.push(random_box(scene, rng));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{AnnotatedObject, Payload};
    use crate::rng;

    fn scene() -> Scene {
        Scene {
            scene_id: "s".into(),
            width: 64.0,
            height: 64.0,
            objects: vec![
                AnnotatedObject {
                    class_id: 2,
                    bbox: BBox::new(2.0, 2.0, 20.0, 22.0).unwrap(),
                },
                AnnotatedObject {
                    class_id: 0,
                    bbox: BBox::new(30.0, 35.0, 55.0, 60.0).unwrap(),
                },
            ],
            payload: Payload::None,
        }
    }

    #[test]
    fn gt_boxes_label_themselves() {
        let s = scene();
        assert_eq!(assign(&s.objects[0].bbox, &s), Some((2, s.objects[0].bbox)));
        assert_eq!(assign(&BBox::new(40.0, 0.0, 60.0, 10.0).unwrap(), &s), None);
    }

    #[test]
    fn jitter_keeps_overlap_and_stays_inside() {
        let s = scene();
        let mut r = rng::seeded(0);
        for _ in 0..200 {
            for o in &s.objects {
                let j = jitter(&o.bbox, &s, &mut r);
                assert!(j.iou(&o.bbox) >= POSITIVE_IOU);
                assert!(j.x1 >= 0.0 && j.y1 >= 0.0 && j.x2 <= 64.0 && j.y2 <= 64.0);
            }
        }
    }

    #[test]
    fn training_proposals_are_labelled_consistently() {
        let s = scene();
        let mut r = rng::seeded(3);
        let props = training_proposals(&s, 3, 10, &mut r);
        assert_eq!(props.len(), 2 * 4 + 10);
        for p in &props {
            assert_eq!(p.label.zip(p.target), assign(&p.bbox, &s));
        }
        assert!(props[..8].iter().all(|p| p.label.is_some()));
    }

    #[test]
    fn inference_proposals_are_reproducible() {
        let s = scene();
        let mut r = rng::seeded(9);
        let props = inference_proposals(&s, 2, 5, &mut r);
        assert_eq!(props.len(), 9);
        let again = inference_proposals(&s, 2, 5, &mut rng::seeded(9));
        assert_eq!(props, again);
    }
}
