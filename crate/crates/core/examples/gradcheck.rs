//! Finite-difference checks of every loss term on the toy model.

use mgml::gradcheck::{run_suites, standard_suites};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let report = run_suites(&standard_suites(), 20)?;
    print!("{}", report.table());
    if !report.all_passed() {
        std::process::exit(1);
    }
    Ok(())
}
