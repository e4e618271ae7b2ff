//! Dataset model, annotation ingestion, the class-split registry and
//! episodic N-way K-shot sampling.

mod episode;
mod geometry;
pub mod io;
mod render;
mod splits;

use std::path::PathBuf;

use thiserror::Error;

use crate::arrays::ArrayFileError;

pub use episode::{sample_episode, Episode, SamplerConfig, Stage, SupportItem};
pub use geometry::BBox;
pub use render::{pool_region, Canvas};
pub use splits::{builtin_split, builtin_splits, ClassSplit};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("scene {scene_id}: {message}")]
    Validation { scene_id: String, message: String },
    #[error("class {class:?} has {available} usable instances, {needed} needed")]
    InsufficientShots {
        class: String,
        available: usize,
        needed: usize,
    },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    ArrayFile(#[from] ArrayFileError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnnotatedObject {
    /// Foreground index into the split's class layout.
    pub class_id: usize,
    pub bbox: BBox,
}

/// Per-object payload of a scene.
#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    /// Annotations only.
    None,
    /// Square pixel patches (`patch_dim²` values each) rendered into the boxes.
    Patches {
        patch_dim: usize,
        patches: Vec<Vec<f64>>,
    },
    /// Precomputed feature vectors, one per object.
    Features(Vec<Vec<f64>>),
}

impl Payload {
    pub fn kind(&self) -> &'static str {
        match self {
            Payload::None => "none",
            Payload::Patches { .. } => "patches",
            Payload::Features(_) => "features",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub scene_id: String,
    pub width: f64,
    pub height: f64,
    pub objects: Vec<AnnotatedObject>,
    pub payload: Payload,
}

impl Scene {
    pub fn validate(&self) -> Result<(), DataError> {
        let fail = |message: String| DataError::Validation {
            scene_id: self.scene_id.clone(),
            message,
        };
        if !(self.width > 0.0 && self.height > 0.0 && self.width.is_finite() && self.height.is_finite()) {
            return Err(fail(format!("bad extent {}x{}", self.width, self.height)));
        }
        for (i, o) in self.objects.iter().enumerate() {
            if !o.bbox.is_valid() {
                return Err(fail(format!("object {i}: invalid box {:?}", o.bbox.to_array())));
            }
            if !o.bbox.within(self.width, self.height) {
                return Err(fail(format!("object {i}: box {:?} outside extent", o.bbox.to_array())));
            }
        }
        let n = self.objects.len();
        match &self.payload {
            Payload::Patches { patch_dim, patches } => {
                if patches.len() != n || patches.iter().any(|p| p.len() != patch_dim * patch_dim) {
                    return Err(fail("patch payload does not match objects".into()));
                }
            }
            Payload::Features(f) => {
                if f.len() != n || f.windows(2).any(|w| w[0].len() != w[1].len()) {
                    return Err(fail("feature payload does not match objects".into()));
                }
            }
            Payload::None => {}
        }
        Ok(())
    }

    pub fn has_class_in(&self, classes: &[usize]) -> bool {
        self.objects.iter().any(|o| classes.contains(&o.class_id))
    }
}

/// Immutable collection of scenes sharing one split and payload kind.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Dataset {
    pub scenes: Vec<Scene>,
    /// Objects dropped at ingestion because their class is not in the split.
    pub dropped_objects: usize,
}

impl Dataset {
    pub fn new(scenes: Vec<Scene>) -> Self {
        Self {
            scenes,
            dropped_objects: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }

    /// Width of the per-region input vector, if the payload carries one.
    pub fn input_dim(&self) -> Option<usize> {
        self.scenes.iter().find_map(|s| match &s.payload {
            Payload::Patches { patch_dim, .. } => Some(patch_dim * patch_dim),
            Payload::Features(f) => f.first().map(|v| v.len()),
            Payload::None => None,
        })
    }

    pub fn validate(&self) -> Result<(), DataError> {
        let mut kind: Option<&str> = None;
        for s in &self.scenes {
            s.validate()?;
            if s.objects.is_empty() {
                continue;
            }
            let k = s.payload.kind();
            match kind {
                None => kind = Some(k),
                Some(prev) if prev != k => {
                    return Err(DataError::Validation {
                        scene_id: s.scene_id.clone(),
                        message: format!("payload kind {k} differs from {prev} used elsewhere"),
                    })
                }
                _ => {}
            }
        }
        Ok(())
    }

    /// Instance count per foreground class.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut counts = vec![0; num_classes];
        for o in self.scenes.iter().flat_map(|s| &s.objects) {
            if o.class_id < num_classes {
                counts[o.class_id] += 1;
            }
        }
        counts
    }
}
