use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use super::{ClassSplit, DataError, Dataset};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Base,
    Adaptation,
}

impl Stage {
    pub fn as_str(self) -> &'static str {
        match self {
            Stage::Base => "base",
            Stage::Adaptation => "adaptation",
        }
    }
}

impl std::str::FromStr for Stage {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "base" => Ok(Stage::Base),
            "adaptation" | "adapt" => Ok(Stage::Adaptation),
            other => Err(format!("unknown stage {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub n_way: usize,
    pub k_shot: usize,
    pub n_query: usize,
    /// Minimum support-box side as a fraction of the scene extent.
    pub min_region_frac: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            n_way: 5,
            k_shot: 5,
            n_query: 6,
            min_region_frac: 0.1,
        }
    }
}

/// One support region: object `object` of scene `scene`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SupportItem {
    pub scene: usize,
    pub object: usize,
    pub class_id: usize,
}

/// An N-way K-shot task. Indices refer into the dataset it was sampled from.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Episode {
    pub stage: Stage,
    /// Sampled classes in ascending index order.
    pub classes: Vec<usize>,
    /// `K` consecutive entries per class, in `classes` order.
    pub support: Vec<SupportItem>,
    /// Query scene indices.
    pub query: Vec<usize>,
    pub k_shot: usize,
}

impl Episode {
    pub fn support_for(&self, class_id: usize) -> impl Iterator<Item = &SupportItem> {
        self.support.iter().filter(move |s| s.class_id == class_id)
    }
}

/// Draws an episode, deterministically in `seed`.
///
/// Base episodes draw classes from the base list only and never query scenes
/// that contain novel objects. Adaptation episodes include every novel class
/// when `n_way ≥ |novel|` and fill the remaining slots with base classes.
pub fn sample_episode(
    dataset: &Dataset,
    split: &ClassSplit,
    cfg: &SamplerConfig,
    stage: Stage,
    seed: u64,
) -> Result<Episode, DataError> {
    if cfg.n_query <= cfg.k_shot {
        return Err(DataError::InvalidConfig(format!(
            "query size Q={} must exceed K={}",
            cfg.n_query, cfg.k_shot
        )));
    }
    if cfg.k_shot == 0 || cfg.n_way == 0 {
        return Err(DataError::InvalidConfig("N and K must be positive".into()));
    }
    let mut rng = rng::seeded(seed);
    let base: Vec<usize> = split.base_range().collect();
    let novel: Vec<usize> = split.novel_range().collect();
    let pool_size = match stage {
        Stage::Base => base.len(),
        Stage::Adaptation => split.num_classes(),
    };
    if cfg.n_way > pool_size {
        return Err(DataError::InvalidConfig(format!(
            "N={} exceeds the {} classes available in the {} stage",
            cfg.n_way,
            pool_size,
            stage.as_str()
        )));
    }
    let mut classes: Vec<usize> = match stage {
        Stage::Base => pick(&base, cfg.n_way, &mut rng),
        Stage::Adaptation if cfg.n_way >= novel.len() => {
            let mut c = novel.clone();
            c.extend(pick(&base, cfg.n_way - novel.len(), &mut rng));
            c
        }
        Stage::Adaptation => pick(&(0..split.num_classes()).collect::<Vec<_>>(), cfg.n_way, &mut rng),
    };
    classes.sort_unstable();

    let scene_ok = |s: &super::Scene| match stage {
        Stage::Base => !s.objects.iter().any(|o| split.is_novel(o.class_id)),
        Stage::Adaptation => true,
    };

    let mut support = Vec::with_capacity(classes.len() * cfg.k_shot);
    for &c in &classes {
        let candidates: Vec<(usize, usize)> = dataset
            .scenes
            .iter()
            .enumerate()
            .flat_map(|(si, s)| {
                s.objects.iter().enumerate().filter_map(move |(oi, o)| {
                    let big = o.bbox.width() >= cfg.min_region_frac * s.width
                        && o.bbox.height() >= cfg.min_region_frac * s.height;
                    (o.class_id == c && big).then_some((si, oi))
                })
            })
            .collect();
        if candidates.len() < cfg.k_shot {
            return Err(DataError::InsufficientShots {
                class: split.class_name(c).to_string(),
                available: candidates.len(),
                needed: cfg.k_shot,
            });
        }
        let mut chosen: Vec<usize> = index::sample(&mut rng, candidates.len(), cfg.k_shot).into_vec();
        chosen.sort_unstable();
        support.extend(chosen.into_iter().map(|i| SupportItem {
            scene: candidates[i].0,
            object: candidates[i].1,
            class_id: c,
        }));
    }

    let mut eligible: Vec<usize> = dataset
        .scenes
        .iter()
        .enumerate()
        .filter(|(_, s)| scene_ok(s) && s.has_class_in(&classes))
        .map(|(i, _)| i)
        .collect();
    if eligible.is_empty() {
        return Err(DataError::InvalidConfig(format!(
            "no query scene contains any of the sampled classes in the {} stage",
            stage.as_str()
        )));
    }
    eligible.shuffle(&mut rng);
    eligible.truncate(cfg.n_query);
    eligible.sort_unstable();

    Ok(Episode {
        stage,
        classes,
        support,
        query: eligible,
        k_shot: cfg.k_shot,
    })
}

fn pick(from: &[usize], n: usize, rng: &mut rng::DetRng) -> Vec<usize> {
    index::sample(rng, from.len(), n.min(from.len()))
        .into_iter()
        .map(|i| from[i])
        .collect()
}
