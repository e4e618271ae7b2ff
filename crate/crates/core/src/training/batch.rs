use crate::data::{pool_region, BBox, Canvas, ClassSplit, Dataset, Episode, Payload, Scene};
use crate::model::EpisodeBatch;
use crate::rng::DetRng;
use crate::tensor::Tensor;

use super::proposals::training_proposals;
use super::TrainError;

/// Backbone inputs for regions of a dataset's scenes. Patch scenes are
/// rendered once up front.
pub struct RegionCache<'d> {
    pub dataset: &'d Dataset,
    pub input_dim: usize,
    canvases: Vec<Option<Canvas>>,
}

impl<'d> RegionCache<'d> {
    pub fn new(dataset: &'d Dataset) -> Result<Self, TrainError> {
        let input_dim = dataset
            .input_dim()
            .ok_or_else(|| TrainError::Invalid("dataset carries neither patches nor features".into()))?;
        let canvases = dataset.scenes.iter().map(Canvas::render).collect();
        Ok(Self {
            dataset,
            input_dim,
            canvases,
        })
    }

    pub fn scene(&self, idx: usize) -> &'d Scene {
        &self.dataset.scenes[idx]
    }

    /// One input row per region, appended to `out`.
    pub fn extend_inputs(&self, scene: usize, regions: &[BBox], out: &mut Vec<f64>) {
        match (&self.canvases[scene], &self.dataset.scenes[scene].payload) {
            (Some(canvas), Payload::Patches { patch_dim, .. }) => {
                for r in regions {
                    out.extend(pool_region(canvas, r, *patch_dim));
                }
            }
            _ => {
                for row in self.dataset.scenes[scene].region_inputs(regions, self.input_dim) {
                    out.extend(row);
                }
            }
        }
    }

    pub fn inputs(&self, scene: usize, regions: &[BBox]) -> Tensor {
        let mut data = Vec::with_capacity(regions.len() * self.input_dim);
        self.extend_inputs(scene, regions, &mut data);
        Tensor::matrix(regions.len(), self.input_dim, data).expect("one row per region")
    }
}

/// Region-level tensors for one sampled episode.
///
/// Query proposals whose best ground truth belongs to a class outside the
/// episode are skipped: the episode has no support vector to score them
/// against, and calling them background would contradict other episodes.
pub fn episode_batch(
    cache: &RegionCache<'_>,
    split: &ClassSplit,
    episode: &Episode,
    jitter_per_object: usize,
    background_per_scene: usize,
    rng: &mut DetRng,
) -> EpisodeBatch {
    let d = cache.input_dim;
    let mut support = Vec::with_capacity(episode.support.len() * d);
    let mut support_labels = Vec::with_capacity(episode.support.len());
    for item in &episode.support {
        let bbox = cache.scene(item.scene).objects[item.object].bbox;
        cache.extend_inputs(item.scene, &[bbox], &mut support);
        support_labels.push(item.class_id);
    }

    let n = episode.classes.len();
    let mut query = Vec::new();
    let mut targets = Vec::new();
    let mut reg_rows = Vec::new();
    let mut reg = Vec::new();
    for &s in &episode.query {
        let props = training_proposals(cache.scene(s), jitter_per_object, background_per_scene, rng);
        let mut kept = Vec::with_capacity(props.len());
        for p in props {
            let target = match p.label {
                None => n,
                Some(c) => match episode.classes.iter().position(|&x| x == c) {
                    Some(local) => local,
                    None => continue,
                },
            };
            if let (Some(gt), true) = (p.target, target < n) {
                reg_rows.push(targets.len());
                reg.extend(gt.deltas_from(&p.bbox));
            }
            targets.push(target);
            kept.push(p.bbox);
        }
        cache.extend_inputs(s, &kept, &mut query);
    }
    let r = targets.len();
    EpisodeBatch {
        classes: episode.classes.clone(),
        num_base: split.num_base(),
        support_inputs: Tensor::matrix(episode.support.len(), d, support).expect("support rows"),
        support_labels,
        query_inputs: Tensor::matrix(r.max(1), d, if r == 0 { vec![0.0; d] } else { query }).expect("query rows"),
        query_targets: if r == 0 { vec![n] } else { targets },
        reg_targets: (!reg_rows.is_empty()).then(|| Tensor::matrix(reg_rows.len(), 4, reg).expect("four deltas")),
        reg_rows,
    }
}
