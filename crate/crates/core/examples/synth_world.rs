//! Shows how confusability pulls novel templates toward their paired base class.

use mgml::synth::{build_world, generate_dataset, WorldSpec};
use mgml::tensor::{cosine, COSINE_EPS};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    for confusability in [0.0, 0.5, 0.9] {
        let world = build_world(&WorldSpec { confusability, ..WorldSpec::default() })?;
        let split = &world.split;
        let cos: Vec<String> = split
            .novel_range()
            .zip(&world.pairing)
            .map(|(n, &b)| {
                let c = cosine(&world.prototypes[n].template, &world.prototypes[b].template, COSINE_EPS);
                format!("{}~{} {c:.2}", split.class_name(n), split.class_name(b))
            })
            .collect();
        println!("confusability {confusability}: {}", cos.join(", "));
    }

    let world = build_world(&WorldSpec::default())?;
    let data = generate_dataset(&world, 20, 10, 0)?;
    let n = world.split.num_classes();
    println!("train instances per class {:?}", data.train.class_counts(n));
    println!("val instances per class   {:?}", data.val.class_counts(n));
    Ok(())
}
