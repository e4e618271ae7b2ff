//! Samples base-stage and adaptation-stage N-way K-shot episodes.

use mgml::data::{sample_episode, SamplerConfig, Stage};
use mgml::synth::{build_world, generate_dataset, WorldSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let world = build_world(&WorldSpec::default())?;
    let data = generate_dataset(&world, 20, 10, 0)?;
    let cfg = SamplerConfig {
        n_way: 5,
        k_shot: 3,
        n_query: 4,
        ..SamplerConfig::default()
    };
    for stage in [Stage::Base, Stage::Adaptation] {
        let ep = sample_episode(&data.train, &world.split, &cfg, stage, 1)?;
        let names: Vec<&str> = ep.classes.iter().map(|&c| world.split.class_name(c)).collect();
        println!("{}: classes {names:?}", stage.as_str());
        for &c in &ep.classes {
            let shots: Vec<String> = ep.support_for(c).map(|s| format!("{}#{}", s.scene, s.object)).collect();
            println!("  {:>9}: {}", world.split.class_name(c), shots.join(" "));
        }
        println!("  query scenes {:?}", ep.query);
    }
    Ok(())
}
