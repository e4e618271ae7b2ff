//! Component ablation and λ₀ sweep over five seeds on the synthetic world.

use std::time::Instant;

use mgml::training::{component_grid, lambda_grid, run_ablation, AblationSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seeds: Vec<u64> = (0..5).collect();
    let t = Instant::now();
    let table = run_ablation(&AblationSpec::new(component_grid(0.5, 2.0), seeds.clone()))?;
    print!("{}", table.to_csv());
    println!("components: {:.1?}", t.elapsed());

    let t = Instant::now();
    let sweep = run_ablation(&AblationSpec::new(lambda_grid(&[1.0, 1.5, 2.0, 2.5]), seeds))?;
    print!("{}", sweep.to_csv());
    println!("lambda sweep: {:.1?}", t.elapsed());
    Ok(())
}
