//! Synthetic world, base training, K-shot adaptation and evaluation in one go.

use std::time::Instant;

use mgml::eval::{detect, evaluate, EvalOptions, InferOptions};
use mgml::synth::{build_world, generate_dataset, WorldSpec};
use mgml::training::{adapt_few_shot, train_base, TrainConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let world = build_world(&WorldSpec { rng_seed: seed, ..WorldSpec::default() })?;
    let data = generate_dataset(&world, 40, 10, seed)?;
    println!("train {} scenes, val {} scenes", data.train.len(), data.val.len());

    let t = Instant::now();
    let base_cfg = TrainConfig { rng_seed: seed, ..TrainConfig::base() };
    let base = train_base(&data.train, &world.split, &base_cfg)?;
    println!("base: {:.1?}, first {:.3} last {:.3}", t.elapsed(), base.initial.total, base.epochs.last().unwrap().losses.total);

    let t = Instant::now();
    let cfg = TrainConfig { rng_seed: seed, ..TrainConfig::adaptation() };
    let adapted = adapt_few_shot(&base.checkpoint, &data.train, &world.split, &cfg)?;
    println!("adapt: {:.1?}, first {:.3} last {:.3}", t.elapsed(), adapted.initial.total, adapted.epochs.last().unwrap().losses.total);

    let t = Instant::now();
    let dets = detect(&adapted.checkpoint, &data.val, &InferOptions { seed, ..InferOptions::default() })?;
    let report = evaluate(&dets, &data.val, &world.split, &EvalOptions::default());
    println!("eval: {:.1?}, {} detections", t.elapsed(), dets.len());
    println!(
        "mAP base {:.3} novel {:.3}, mean confusion {:?}",
        report.map_base.unwrap_or(f64::NAN),
        report.map_novel.unwrap_or(f64::NAN),
        report.mean_confusion
    );
    for c in &report.per_class {
        println!("  {:>10} {:.3}", c.class, c.ap.unwrap_or(f64::NAN));
    }
    Ok(())
}
