//! Runs ablation rows on the reference synthetic benchmark.
//!
//! Usage: `cargo run --release --example ablation -- [row ...]` (all rows when
//! none are named).

use camp::ablation::{run_grid, select, table4};
use camp::data::{generate_synthetic, SyntheticSpec};
use camp::training::TrainConfig;
use camp::ModelConfig;

fn main() -> camp::Result<()> {
    let names: Vec<String> = std::env::args().skip(1).collect();
    let grid = table4(&ModelConfig::desk(), &TrainConfig::desk());
    let rows = if names.is_empty() {
        grid
    } else {
        select(&grid, &names.iter().map(String::as_str).collect::<Vec<_>>())?
    };
    let data = generate_synthetic::<f32>(&SyntheticSpec::default())?;
    let result = run_grid(&rows, &[0, 1, 2], &data.train, &data.val, &data.test, |r| {
        println!(
            "{:16} seed {} epochs {:2} rsum {:.3} r1 {:.2}/{:.2}",
            r.variant, r.seed, r.epochs, r.test.rsum, r.test.caption_retrieval.r1, r.test.image_retrieval.r1
        )
    })?;
    for r in result {
        println!("{:16} mean rsum {:.3}", r.name, r.mean_rsum);
    }
    Ok(())
}
