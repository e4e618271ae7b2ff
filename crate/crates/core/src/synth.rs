//! Synthetic detection worlds with controllable base/novel confusability.
//!
//! Each class owns a unit-norm, non-negative template of `patch_dim²` pixel
//! intensities. Base templates live on disjoint pixel blocks, so they are
//! exactly orthogonal. A novel template starts from a fresh block of its own
//! and is mixed toward its paired base template by `confusability`.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::data::{AnnotatedObject, BBox, ClassSplit, Dataset, Payload, Scene};
use crate::rng::{self, DetRng};
use crate::tensor::cosine;

#[derive(Debug, Error, PartialEq)]
pub enum SynthError {
    #[error("invalid world spec: {0}")]
    InvalidSpec(String),
    #[error("patch_dim²={pixels} pixels cannot hold {num_base} orthogonal base templates")]
    CannotOrthogonalize { pixels: usize, num_base: usize },
    #[error("could not place {objects} objects in a {width}x{height} scene; use a larger extent or fewer objects")]
    Placement {
        objects: usize,
        width: f64,
        height: f64,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldSpec {
    pub num_base: usize,
    pub num_novel: usize,
    pub patch_dim: usize,
    /// Mixing weight of a novel template toward its paired base template.
    pub confusability: f64,
    pub noise_sigma: f64,
    pub scene_extent: (f64, f64),
    /// Inclusive object-count range per scene.
    pub objects_per_scene: (usize, usize),
    /// Inclusive box side range, in scene units.
    pub box_side: (f64, f64),
    pub rng_seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            num_base: 6,
            num_novel: 3,
            patch_dim: 6,
            confusability: 0.7,
            noise_sigma: 0.1,
            scene_extent: (64.0, 64.0),
            objects_per_scene: (1, 3),
            box_side: (14.0, 24.0),
            rng_seed: 0,
        }
    }
}

impl WorldSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::InvalidSpec(m.into()));
        if self.num_base < 2 {
            return bad("num_base must be at least 2");
        }
        if self.num_novel < 1 {
            return bad("num_novel must be at least 1");
        }
        if !(0.0..1.0).contains(&self.confusability) {
            return bad("confusability must lie in [0, 1)");
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return bad("noise_sigma must be a finite non-negative number");
        }
        if self.patch_dim == 0 {
            return bad("patch_dim must be positive");
        }
        let (lo, hi) = self.objects_per_scene;
        if lo == 0 || lo > hi {
            return bad("objects_per_scene must be a non-empty range starting at 1 or more");
        }
        let (smin, smax) = self.box_side;
        let (w, h) = self.scene_extent;
        if !(smin > 0.0 && smin <= smax && smax <= w.min(h)) {
            return bad("box_side must be a positive range that fits the scene extent");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassPrototype {
    pub class_id: usize,
    pub template: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct World {
    pub spec: WorldSpec,
    pub prototypes: Vec<ClassPrototype>,
    pub split: ClassSplit,
    /// For each novel class (in novel order), the base class it was mixed toward.
    pub pairing: Vec<usize>,
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn block_template(pixels: usize, block: &[usize], rng: &mut DetRng) -> Vec<f64> {
    let mut t = vec![0.0; pixels];
    for &p in block {
        t[p] = rng.random_range(0.5..1.0);
    }
    normalize(&mut t);
    t
}

pub fn build_world(spec: &WorldSpec) -> Result<World, SynthError> {
    spec.validate()?;
    let pixels = spec.patch_dim * spec.patch_dim;
    if pixels < spec.num_base {
        return Err(SynthError::CannotOrthogonalize {
            pixels,
            num_base: spec.num_base,
        });
    }
    let mut rng = rng::derived(spec.rng_seed, "world");
    let mut perm: Vec<usize> = (0..pixels).collect();
    perm.shuffle(&mut rng);

    let total = spec.num_base + spec.num_novel;
    let disjoint_novel = pixels >= total;
    let blocks = if disjoint_novel { total } else { spec.num_base };
    let size = pixels / blocks;
    let block = |i: usize| &perm[i * size..(i + 1) * size];

    let mut prototypes: Vec<ClassPrototype> = (0..spec.num_base)
        .map(|c| ClassPrototype {
            class_id: c,
            template: block_template(pixels, block(c), &mut rng),
        })
        .collect();

    let mut pairing = Vec::with_capacity(spec.num_novel);
    for j in 0..spec.num_novel {
        let fresh = if disjoint_novel {
            block_template(pixels, block(spec.num_base + j), &mut rng)
        } else {
            block_template(pixels, &perm, &mut rng)
        };
        // Most similar base template; ties resolved by rotating the start index.
        let mut best = j % spec.num_base;
        let mut best_cos = cosine(&fresh, &prototypes[best].template, 0.0);
        for step in 1..spec.num_base {
            let b = (j + step) % spec.num_base;
            let c = cosine(&fresh, &prototypes[b].template, 0.0);
            if c > best_cos {
                best = b;
                best_cos = c;
            }
        }
        let c = spec.confusability;
        let mut template: Vec<f64> = fresh
            .iter()
            .zip(&prototypes[best].template)
            .map(|(f, b)| (1.0 - c) * f + c * b)
            .collect();
        normalize(&mut template);
        pairing.push(best);
        prototypes.push(ClassPrototype {
            class_id: spec.num_base + j,
            template,
        });
    }

    let split = ClassSplit {
        name: "synth".into(),
        base_classes: (0..spec.num_base).map(|i| format!("base_{i:02}")).collect(),
        novel_classes: (0..spec.num_novel).map(|i| format!("novel_{i:02}")).collect(),
    };
    Ok(World {
        spec: spec.clone(),
        prototypes,
        split,
        pairing,
    })
}

/// Train and validation portions of a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedData {
    pub train: Dataset,
    pub val: Dataset,
}

struct SceneFactory<'w> {
    world: &'w World,
    rng: DetRng,
    noise: Normal<f64>,
}

impl SceneFactory<'_> {
    fn patch(&mut self, class_id: usize) -> Vec<f64> {
        let t = &self.world.prototypes[class_id].template;
        if self.world.spec.noise_sigma == 0.0 {
            return t.clone();
        }
        t.iter()
            .map(|v| (v + self.noise.sample(&mut self.rng)).clamp(0.0, 1.0))
            .collect()
    }

    fn place(&mut self, n: usize) -> Result<Vec<BBox>, SynthError> {
        let (w, h) = self.world.spec.scene_extent;
        let (smin, smax) = self.world.spec.box_side;
        let mut boxes: Vec<BBox> = Vec::with_capacity(n);
        let mut attempts = 0;
        while boxes.len() < n {
            attempts += 1;
            if attempts > 500 {
                return Err(SynthError::Placement {
                    objects: n,
                    width: w,
                    height: h,
                });
            }
            let bw = self.rng.random_range(smin..=smax).round();
            let bh = self.rng.random_range(smin..=smax).round();
            let x = self.rng.random_range(0.0..=(w - bw)).floor();
            let y = self.rng.random_range(0.0..=(h - bh)).floor();
            let b = BBox::new(x, y, x + bw, y + bh).expect("positive side");
            if boxes.iter().all(|o| o.iou(&b) <= 0.3) {
                boxes.push(b);
            }
        }
        Ok(boxes)
    }

    fn scene(&mut self, scene_id: String, classes: &[usize]) -> Result<Scene, SynthError> {
        let boxes = self.place(classes.len())?;
        let patches = classes.iter().map(|&c| self.patch(c)).collect();
        let (width, height) = self.world.spec.scene_extent;
        Ok(Scene {
            scene_id,
            width,
            height,
            objects: classes
                .iter()
                .zip(boxes)
                .map(|(&class_id, bbox)| AnnotatedObject { class_id, bbox })
                .collect(),
            payload: Payload::Patches {
                patch_dim: self.world.spec.patch_dim,
                patches,
            },
        })
    }

    fn extra_count(&mut self) -> usize {
        let (lo, hi) = self.world.spec.objects_per_scene;
        self.rng.random_range(lo..=hi) - 1
    }

    fn random_base(&mut self) -> usize {
        self.rng.random_range(0..self.world.spec.num_base)
    }

    /// Base-only scenes until every base class is in at least `target` of them.
    fn base_scenes(&mut self, prefix: &str, target: usize, out: &mut Vec<Scene>) -> Result<(), SynthError> {
        let nb = self.world.spec.num_base;
        let mut counts = vec![0usize; nb];
        while counts.iter().any(|&c| c < target) {
            let least = (0..nb).min_by_key(|&c| (counts[c], c)).expect("num_base ≥ 2");
            let mut classes = vec![least];
            for _ in 0..self.extra_count() {
                classes.push(self.random_base());
            }
            classes.shuffle(&mut self.rng);
            let mut seen = classes.clone();
            seen.sort_unstable();
            seen.dedup();
            for c in seen {
                counts[c] += 1;
            }
            let id = format!("{prefix}-{:06}", out.len());
            out.push(self.scene(id, &classes)?);
        }
        Ok(())
    }

    /// One novel object per scene plus random base clutter.
    fn novel_scenes(&mut self, prefix: &str, class_id: usize, count: usize, out: &mut Vec<Scene>) -> Result<(), SynthError> {
        for _ in 0..count {
            let mut classes = vec![class_id];
            for _ in 0..self.extra_count() {
                classes.push(self.random_base());
            }
            classes.shuffle(&mut self.rng);
            let id = format!("{prefix}-{:06}", out.len());
            out.push(self.scene(id, &classes)?);
        }
        Ok(())
    }
}

/// Base classes are abundant in train (each in `scenes_per_class_base` scenes
/// or more) and every novel class has exactly `shots_per_novel` train
/// instances. The validation portion holds a quarter as many base scenes (an
/// 80/20 scene split) and the same quarter of novel scenes per novel class,
/// at least five.
pub fn generate_dataset(
    world: &World,
    scenes_per_class_base: usize,
    shots_per_novel: usize,
    rng_seed: u64,
) -> Result<GeneratedData, SynthError> {
    if scenes_per_class_base == 0 || shots_per_novel == 0 {
        return Err(SynthError::InvalidSpec("scene and shot counts must be positive".into()));
    }
    let noise = Normal::new(0.0, world.spec.noise_sigma.max(f64::MIN_POSITIVE)).expect("finite sigma");
    let mut factory = SceneFactory {
        world,
        rng: rng::derived(rng_seed, "dataset"),
        noise,
    };
    let val_per_class = scenes_per_class_base.div_ceil(4);
    let novel: Vec<usize> = world.split.novel_range().collect();

    let mut train = Vec::new();
    factory.base_scenes("train", scenes_per_class_base, &mut train)?;
    for &c in &novel {
        factory.novel_scenes("train", c, shots_per_novel, &mut train)?;
    }

    let mut val = Vec::new();
    factory.base_scenes("val", val_per_class, &mut val)?;
    for &c in &novel {
        factory.novel_scenes("val", c, val_per_class.max(5), &mut val)?;
    }
    Ok(GeneratedData {
        train: Dataset::new(train),
        val: Dataset::new(val),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(confusability: f64) -> WorldSpec {
        WorldSpec {
            confusability,
            rng_seed: 9,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn base_templates_are_orthogonal_and_unit() {
        let w = build_world(&spec(0.5)).unwrap();
        for p in &w.prototypes {
            let n: f64 = p.template.iter().map(|x| x * x).sum();
            assert!((n - 1.0).abs() < 1e-12);
            assert!(p.template.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
        for i in 0..w.spec.num_base {
            for j in 0..i {
                let c = cosine(&w.prototypes[i].template, &w.prototypes[j].template, 0.0);
                assert!(c.abs() <= 0.15);
            }
        }
    }

    #[test]
    fn zero_confusability_keeps_novel_apart() {
        let w = build_world(&spec(0.0)).unwrap();
        for n in w.split.novel_range() {
            for b in w.split.base_range() {
                let c = cosine(&w.prototypes[n].template, &w.prototypes[b].template, 0.0);
                assert!(c.abs() <= 0.15, "novel {n} vs base {b}: {c}");
            }
        }
    }

    #[test]
    fn high_confusability_pairs_novel_with_base() {
        for seed in 0..10 {
            let w = build_world(&WorldSpec {
                confusability: 0.9,
                rng_seed: seed,
                ..WorldSpec::default()
            })
            .unwrap();
            for (j, &b) in w.pairing.iter().enumerate() {
                let n = w.split.num_base() + j;
                let c = cosine(&w.prototypes[n].template, &w.prototypes[b].template, 0.0);
                assert!(c >= 0.6, "seed {seed}: cos {c}");
            }
        }
    }

    #[test]
    fn world_is_deterministic() {
        assert_eq!(build_world(&spec(0.3)).unwrap(), build_world(&spec(0.3)).unwrap());
        let other = build_world(&WorldSpec {
            rng_seed: 10,
            ..spec(0.3)
        })
        .unwrap();
        assert_ne!(build_world(&spec(0.3)).unwrap().prototypes, other.prototypes);
    }

    #[test]
    fn too_small_patch_cannot_orthogonalize() {
        let err = build_world(&WorldSpec {
            patch_dim: 2,
            num_base: 5,
            ..WorldSpec::default()
        })
        .unwrap_err();
        assert_eq!(err, SynthError::CannotOrthogonalize { pixels: 4, num_base: 5 });
    }

    #[test]
    fn spec_validation() {
        assert!(build_world(&WorldSpec {
            confusability: 1.0,
            ..WorldSpec::default()
        })
        .is_err());
        assert!(build_world(&WorldSpec {
            num_base: 1,
            ..WorldSpec::default()
        })
        .is_err());
        assert!(build_world(&WorldSpec {
            noise_sigma: -0.1,
            ..WorldSpec::default()
        })
        .is_err());
    }

    #[test]
    fn novel_shot_counts_are_exact() {
        let w = build_world(&spec(0.7)).unwrap();
        let g = generate_dataset(&w, 12, 10, 3).unwrap();
        let counts = g.train.class_counts(w.split.num_classes());
        for n in w.split.novel_range() {
            assert_eq!(counts[n], 10);
        }
        for b in w.split.base_range() {
            let scenes = g.train.scenes.iter().filter(|s| s.has_class_in(&[b])).count();
            assert!(scenes >= 12);
        }
    }

    #[test]
    fn noiseless_patches_equal_templates() {
        let w = build_world(&WorldSpec {
            noise_sigma: 0.0,
            ..spec(0.7)
        })
        .unwrap();
        let g = generate_dataset(&w, 4, 2, 3).unwrap();
        for s in g.train.scenes.iter().chain(&g.val.scenes) {
            let Payload::Patches { patches, .. } = &s.payload else { panic!() };
            for (o, p) in s.objects.iter().zip(patches) {
                assert_eq!(p, &w.prototypes[o.class_id].template);
            }
        }
    }

    #[test]
    fn val_contains_all_classes_and_boxes_are_valid() {
        let w = build_world(&spec(0.7)).unwrap();
        let g = generate_dataset(&w, 8, 3, 4).unwrap();
        let counts = g.val.class_counts(w.split.num_classes());
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
        g.train.validate().unwrap();
        g.val.validate().unwrap();
        for s in g.train.scenes.iter().chain(&g.val.scenes) {
            for (i, a) in s.objects.iter().enumerate() {
                for b in &s.objects[..i] {
                    assert!(a.bbox.iou(&b.bbox) <= 0.3);
                }
            }
        }
    }

    #[test]
    fn generation_is_reproducible() {
        let w = build_world(&spec(0.7)).unwrap();
        assert_eq!(generate_dataset(&w, 6, 3, 11).unwrap(), generate_dataset(&w, 6, 3, 11).unwrap());
    }

    #[test]
    fn crowded_scene_reports_placement_error() {
        let w = build_world(&WorldSpec {
            scene_extent: (30.0, 30.0),
            box_side: (25.0, 30.0),
            objects_per_scene: (4, 4),
            ..spec(0.7)
        })
        .unwrap();
        assert!(matches!(generate_dataset(&w, 2, 1, 0), Err(SynthError::Placement { .. })));
    }
}
