use mgml::model::ModelParams;
use mgml::synth::{build_world, generate_dataset, WorldSpec};
use mgml::training::{adapt_few_shot, train_base, TrainConfig};

fn small(seed: u64, epochs: usize) -> TrainConfig {
    TrainConfig {
        rng_seed: seed,
        epochs,
        episodes_per_epoch: 20,
        ..TrainConfig::base()
    }
}

#[test]
fn first_epoch_lowers_the_loss_for_every_seed() {
    for seed in 0..5 {
        let world = build_world(&WorldSpec { rng_seed: seed, ..WorldSpec::default() }).unwrap();
        let data = generate_dataset(&world, 15, 10, seed).unwrap();
        let out = train_base(&data.train, &world.split, &small(seed, 1)).unwrap();
        let first = out.epochs[0].losses.total;
        assert!(first < out.initial.total, "seed {seed}: {first} vs {}", out.initial.total);
    }
}

#[test]
fn every_base_parameter_moves() {
    let world = build_world(&WorldSpec::default()).unwrap();
    let data = generate_dataset(&world, 15, 10, 0).unwrap();
    let cfg = small(0, 1);
    let out = train_base(&data.train, &world.split, &cfg).unwrap();
    let input_dim = data.train.input_dim().unwrap();
    let init = ModelParams::init(cfg.model_config(input_dim), cfg.rng_seed);
    for (name, t) in &out.checkpoint.params.tensors {
        let before = init.get(name).unwrap_or_else(|| panic!("{name} not in init"));
        assert_ne!(t.data(), before.data(), "{name} never changed");
    }
}

#[test]
fn adaptation_updates_lambda_and_lowers_the_loss() {
    let world = build_world(&WorldSpec::default()).unwrap();
    let data = generate_dataset(&world, 15, 10, 0).unwrap();
    let base = train_base(&data.train, &world.split, &small(0, 2)).unwrap();
    let cfg = TrainConfig {
        epochs: 3,
        episodes_per_epoch: 20,
        ..TrainConfig::adaptation()
    };
    let out = adapt_few_shot(&base.checkpoint, &data.train, &world.split, &cfg).unwrap();
    assert!(out.checkpoint.params.has_adaptation_params());
    let last = out.epochs.last().unwrap().losses.total;
    assert!(last < out.initial.total, "{last} vs {}", out.initial.total);
    let lambda = out.checkpoint.params.get(mgml::model::params::SE_LAMBDA).unwrap();
    assert!(lambda.data().iter().any(|&l| (l - cfg.lambda0).abs() > 1e-9));
    assert_eq!(out.checkpoint.bank.shape()[0], world.split.num_classes());
}
