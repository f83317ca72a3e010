//! The reproduction suite at smoke-test size. Verdicts at this size carry no
//! meaning; `nofrost repro` runs the desk-scale recipe.
//!
//!     cargo run --release -p nofrost-harness --example repro_quick

use nofrost_harness::repro::{run_suite, Recipe, Zoo};

fn main() -> nofrost_harness::Result<()> {
    let zoo = Zoo::new(Recipe::quick())?;
    let all = run_suite(&zoo, None, &mut |c| println!("{}", c.line()))?;
    println!("{} of {} passed", all.iter().filter(|c| c.pass).count(), all.len());
    Ok(())
}
