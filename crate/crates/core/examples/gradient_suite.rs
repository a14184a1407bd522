//! Finite-difference check of every primitive, loss and the training pipeline.
//!
//! cargo run --release --example gradient_suite -- [trials]

use grounding::gradsuite::{format_table, full_suite};

fn main() -> grounding::Result<()> {
    let trials = std::env::args().nth(1).map_or(100, |s| s.parse().expect("trials"));
    let rows = full_suite(trials, 1)?;
    print!("{}", format_table(&rows));
    if rows.iter().any(|r| !r.passed()) {
        std::process::exit(1);
    }
    Ok(())
}
