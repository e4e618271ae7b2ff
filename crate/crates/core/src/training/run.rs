use std::fmt::Write as _;

use log::{debug, info};
use rand::seq::SliceRandom;
use serde::Serialize;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::batch::{episode_batch, RegionCache};
use super::checkpoint::Checkpoint;
use super::proposals::{assign, random_box};
use super::{TrainConfig, TrainError};
use crate::data::{sample_episode, ClassSplit, DataError, Dataset, Stage};
use crate::model::{encode, episode_losses, LossValues, ModelParams, Trainable};
use crate::rng::{self, DetRng};
use crate::tensor::{Tape, Tensor};

/// Mean loss terms over one epoch.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub losses: LossValues,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Loss of the first episode, before any update.
    pub initial: LossValues,
    pub epochs: Vec<EpochLog>,
}

/// Header plus one row per epoch.
pub fn loss_csv(log: &[EpochLog]) -> String {
    let mut s = String::from("epoch,ce,oc,meta,metric,reg,total\n");
    for e in log {
        let l = &e.losses;
        let _ = writeln!(s, "{},{},{},{},{},{},{}", e.epoch, l.ce, l.oc, l.meta, l.metric, l.reg, l.total);
    }
    s
}

fn add(acc: &mut LossValues, v: &LossValues) {
    acc.ce += v.ce;
    acc.oc += v.oc;
    acc.meta += v.meta;
    acc.metric += v.metric;
    acc.reg += v.reg;
    acc.total += v.total;
}

fn scaled(v: LossValues, k: f64) -> LossValues {
    LossValues {
        ce: v.ce * k,
        oc: v.oc * k,
        meta: v.meta * k,
        metric: v.metric * k,
        reg: v.reg * k,
        total: v.total * k,
    }
}

/// Episodic Adam training of `params` in place.
fn train_loop(
    params: &mut ModelParams,
    dataset: &Dataset,
    split: &ClassSplit,
    cfg: &TrainConfig,
) -> Result<(LossValues, Vec<EpochLog>), TrainError> {
    let cache = RegionCache::new(dataset)?;
    let sampler = cfg.sampler();
    let switches = cfg.switches();
    let adam = AdamConfig {
        lr: cfg.learning_rate,
        beta1: cfg.adam_beta1,
        beta2: cfg.adam_beta2,
        eps: cfg.adam_eps,
    };
    let mut state = AdamState::default();
    let mut rng = rng::derived(cfg.rng_seed, &format!("train-{}", cfg.stage.as_str()));
    let mut initial = None;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut acc = LossValues::default();
        for _ in 0..cfg.episodes_per_epoch {
            let episode = sample_episode(dataset, split, &sampler, cfg.stage, rand::Rng::random(&mut rng))?;
            let batch = episode_batch(&cache, split, &episode, cfg.jitter_per_object, cfg.background_per_scene, &mut rng);
            let tape = Tape::new();
            let bound = params.bind(&tape, &Trainable::All);
            let losses = episode_losses(&bound, &batch, &switches)?;
            let values = losses.values();
            if !values.total.is_finite() {
                return Err(TrainError::Diverged { epoch });
            }
            initial.get_or_insert(values);
            tape.backward(losses.total)?;
            let grads = bound.grads();
            drop(bound);
            adam_step(&mut params.tensors, &grads, &mut state, &adam)?;
            add(&mut acc, &values);
        }
        let mean = scaled(acc, 1.0 / cfg.episodes_per_epoch as f64);
        debug!("{} epoch {}: total {:.4}", cfg.stage.as_str(), epoch + 1, mean.total);
        log.push(EpochLog {
            epoch: epoch + 1,
            losses: mean,
        });
    }
    Ok((initial.expect("at least one episode"), log))
}

fn require_instances(dataset: &Dataset, split: &ClassSplit, classes: impl Iterator<Item = usize>, needed: usize) -> Result<(), DataError> {
    let counts = dataset.class_counts(split.num_classes());
    for c in classes {
        if counts[c] < needed {
            return Err(DataError::InsufficientShots {
                class: split.class_name(c).to_string(),
                available: counts[c],
                needed,
            });
        }
    }
    Ok(())
}

/// Mean encoded ground-truth region over up to `k` seeded instances of each class.
pub fn class_bank(
    params: &ModelParams,
    cache: &RegionCache<'_>,
    classes: &[usize],
    k: usize,
    rng: &mut DetRng,
) -> Result<Tensor, TrainError> {
    let d = params.config.feature_dim;
    let mut rows = Vec::with_capacity(classes.len() * d);
    let tape = Tape::new();
    let bound = params.bind(&tape, &Trainable::Nothing);
    for &c in classes {
        let mut inst: Vec<(usize, usize)> = cache
            .dataset
            .scenes
            .iter()
            .enumerate()
            .flat_map(|(si, s)| {
                s.objects
                    .iter()
                    .enumerate()
                    .filter(move |(_, o)| o.class_id == c)
                    .map(move |(oi, _)| (si, oi))
            })
            .collect();
        if inst.is_empty() {
            return Err(TrainError::Invalid(format!("class {c} has no instance to build its support vector from")));
        }
        inst.shuffle(rng);
        inst.truncate(k);
        let mut data = Vec::new();
        for &(si, oi) in &inst {
            cache.extend_inputs(si, &[cache.scene(si).objects[oi].bbox], &mut data);
        }
        let x = Tensor::matrix(inst.len(), cache.input_dim, data)?;
        let f = encode(&bound, tape.constant(x))?.value();
        for j in 0..d {
            rows.push((0..inst.len()).map(|i| f.get2(i, j)).sum::<f64>() / inst.len() as f64);
        }
    }
    Ok(Tensor::matrix(classes.len(), d, rows)?)
}

/// First training stage over base classes only.
pub fn train_base(dataset: &Dataset, split: &ClassSplit, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    if cfg.stage != Stage::Base {
        return Err(TrainError::Invalid("train_base needs stage=base".into()));
    }
    cfg.validate()?;
    require_instances(dataset, split, split.base_range(), cfg.k_shot)?;
    let input_dim = RegionCache::new(dataset)?.input_dim;
    let mut params = ModelParams::init(cfg.model_config(input_dim), cfg.rng_seed);
    info!("base training: {} epochs x {} episodes", cfg.epochs, cfg.episodes_per_epoch);
    let (initial, epochs) = train_loop(&mut params, dataset, split, cfg)?;
    let cache = RegionCache::new(dataset)?;
    let classes: Vec<usize> = split.base_range().collect();
    let bank = class_bank(&params, &cache, &classes, cfg.k_shot, &mut rng::derived(cfg.rng_seed, "bank"))?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            stage: Stage::Base,
            epoch: cfg.epochs,
            config: cfg.clone(),
            split: split.clone(),
            params,
            bank,
        },
        initial,
        epochs,
    })
}

/// Scenes that give every novel class exactly `k` instances and every base
/// class at least `k`, visited in seeded order.
pub fn few_shot_subset(dataset: &Dataset, split: &ClassSplit, k: usize, seed: u64) -> Result<Dataset, DataError> {
    require_instances(dataset, split, split.novel_range(), k)?;
    let c = split.num_classes();
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    order.shuffle(&mut rng::derived(seed, "few-shot-subset"));
    let mut counts = vec![0usize; c];
    let mut chosen = Vec::new();
    // Novel-bearing scenes first so their exact counts are not starved by clutter.
    order.sort_by_key(|&i| !dataset.scenes[i].objects.iter().any(|o| split.is_novel(o.class_id)));
    for i in order {
        let scene = &dataset.scenes[i];
        let mut add = vec![0usize; c];
        for o in &scene.objects {
            add[o.class_id] += 1;
        }
        let useful = (0..c).any(|j| add[j] > 0 && counts[j] < k);
        let overflows = split.novel_range().any(|j| counts[j] + add[j] > k);
        if useful && !overflows {
            for j in 0..c {
                counts[j] += add[j];
            }
            chosen.push(scene.clone());
        }
        if counts.iter().all(|&n| n >= k) {
            break;
        }
    }
    for j in 0..c {
        if counts[j] < k {
            return Err(DataError::InsufficientShots {
                class: split.class_name(j).to_string(),
                available: counts[j],
                needed: k,
            });
        }
    }
    Ok(Dataset::new(chosen))
}

/// Second stage: K-shot fine-tuning on base and novel classes, starting
/// from a base checkpoint. λ and the metric directions are created here.
pub fn adapt_few_shot(
    base: &Checkpoint,
    dataset: &Dataset,
    split: &ClassSplit,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    if cfg.stage != Stage::Adaptation {
        return Err(TrainError::Invalid("adapt_few_shot needs stage=adaptation".into()));
    }
    if base.stage != Stage::Base {
        return Err(TrainError::Invalid("the starting checkpoint must come from base training".into()));
    }
    if &base.split != split {
        return Err(TrainError::SplitMismatch {
            checkpoint: base.split.name.clone(),
            data: split.name.clone(),
        });
    }
    cfg.validate()?;
    let subset = few_shot_subset(dataset, split, cfg.k_shot, cfg.rng_seed)?;
    let cache = RegionCache::new(&subset)?;
    let mut params = base.params.clone();
    let all: Vec<usize> = (0..split.num_classes()).collect();
    let mut rng = rng::derived(cfg.rng_seed, "adapt-init");
    let warm = class_bank(&params, &cache, &all, cfg.k_shot, &mut rng)?;
    let bg = background_direction(&params, &cache, &mut rng)?;
    let d = params.config.feature_dim;
    let mut dirs = warm.into_data();
    dirs.extend(bg);
    params.add_adaptation_params(cfg.lambda0, Tensor::matrix(all.len() + 1, d, dirs)?);

    info!(
        "adaptation: {} scenes, {} epochs x {} episodes",
        subset.len(),
        cfg.epochs,
        cfg.episodes_per_epoch
    );
    let (initial, epochs) = train_loop(&mut params, &subset, split, cfg)?;
    let bank = class_bank(&params, &cache, &all, cfg.k_shot, &mut rng::derived(cfg.rng_seed, "bank"))?;
    Ok(TrainOutcome {
        checkpoint: Checkpoint {
            stage: Stage::Adaptation,
            epoch: cfg.epochs,
            config: cfg.clone(),
            split: split.clone(),
            params,
            bank,
        },
        initial,
        epochs,
    })
}

/// Mean encoded feature of random regions that match no object.
fn background_direction(params: &ModelParams, cache: &RegionCache<'_>, rng: &mut DetRng) -> Result<Vec<f64>, TrainError> {
    let tape = Tape::new();
    let bound = params.bind(&tape, &Trainable::Nothing);
    let mut data = Vec::new();
    let mut count = 0;
    for (si, scene) in cache.dataset.scenes.iter().enumerate() {
        let boxes: Vec<_> = (0..4)
            .map(|_| random_box(scene, rng))
            .filter(|b| assign(b, scene).is_none())
            .collect();
        count += boxes.len();
        cache.extend_inputs(si, &boxes, &mut data);
    }
    let d = params.config.feature_dim;
    if count == 0 {
        return Ok(vec![1.0; d]);
    }
    let f = encode(&bound, tape.constant(Tensor::matrix(count, cache.input_dim, data)?))?.value();
    Ok((0..d)
        .map(|j| (0..count).map(|i| f.get2(i, j)).sum::<f64>() / count as f64)
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{build_world, generate_dataset, WorldSpec};

    fn small() -> (crate::synth::World, crate::synth::GeneratedData) {
        let world = build_world(&WorldSpec::default()).unwrap();
        let data = generate_dataset(&world, 12, 5, 2).unwrap();
        (world, data)
    }

    fn quick_base() -> TrainConfig {
        TrainConfig {
            epochs: 2,
            episodes_per_epoch: 5,
            n_way: 3,
            k_shot: 3,
            n_query: 4,
            ..TrainConfig::base()
        }
    }

    fn quick_adapt() -> TrainConfig {
        TrainConfig {
            epochs: 1,
            episodes_per_epoch: 3,
            n_way: 5,
            k_shot: 5,
            n_query: 6,
            ..TrainConfig::adaptation()
        }
    }

    #[test]
    fn subset_has_exact_novel_counts() {
        let (world, data) = small();
        let sub = few_shot_subset(&data.train, &world.split, 5, 0).unwrap();
        let counts = sub.class_counts(world.split.num_classes());
        for n in world.split.novel_range() {
            assert_eq!(counts[n], 5);
        }
        for b in world.split.base_range() {
            assert!(counts[b] >= 5);
        }
        assert!(matches!(
            few_shot_subset(&data.train, &world.split, 6, 0),
            Err(DataError::InsufficientShots { available: 5, needed: 6, .. })
        ));
    }

    #[test]
    fn base_then_adapt_runs_and_is_deterministic() {
        let (world, data) = small();
        let a = train_base(&data.train, &world.split, &quick_base()).unwrap();
        let b = train_base(&data.train, &world.split, &quick_base()).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.epochs.len(), 2);
        assert!(!a.checkpoint.params.has_adaptation_params());
        assert_eq!(a.checkpoint.bank.dims2().0, world.split.num_base());
        assert_eq!(a.initial.metric, 0.0);

        let ad = adapt_few_shot(&a.checkpoint, &data.train, &world.split, &quick_adapt()).unwrap();
        assert!(ad.checkpoint.params.has_adaptation_params());
        assert_eq!(ad.checkpoint.bank.dims2().0, world.split.num_classes());
        assert!(ad.initial.metric > 0.0);
        assert_eq!(loss_csv(&ad.epochs).lines().count(), 2);
    }

    #[test]
    fn stage_mismatches_are_rejected() {
        let (world, data) = small();
        assert!(train_base(&data.train, &world.split, &quick_adapt()).is_err());
        let a = train_base(&data.train, &world.split, &quick_base()).unwrap();
        assert!(adapt_few_shot(&a.checkpoint, &data.train, &world.split, &quick_base()).is_err());
        let ad = adapt_few_shot(&a.checkpoint, &data.train, &world.split, &quick_adapt()).unwrap();
        assert!(adapt_few_shot(&ad.checkpoint, &data.train, &world.split, &quick_adapt()).is_err());
    }

    #[test]
    fn unit_lambda_matches_disabled_excite_on_first_step() {
        let (world, data) = small();
        let base = train_base(&data.train, &world.split, &quick_base()).unwrap().checkpoint;
        let on = TrainConfig {
            lambda0: 1.0,
            ..quick_adapt()
        };
        let off = TrainConfig {
            enable_se: false,
            ..on.clone()
        };
        let a = adapt_few_shot(&base, &data.train, &world.split, &on).unwrap();
        let b = adapt_few_shot(&base, &data.train, &world.split, &off).unwrap();
        assert!((a.initial.total - b.initial.total).abs() < 1e-12);
    }

    #[test]
    fn missing_base_class_is_reported() {
        let (world, mut data) = small();
        data.train.scenes.retain(|s| !s.objects.iter().any(|o| o.class_id == 0));
        let err = train_base(&data.train, &world.split, &quick_base()).unwrap_err();
        assert!(matches!(err, TrainError::Data(DataError::InsufficientShots { available: 0, .. })), "{err}");
    }
}
