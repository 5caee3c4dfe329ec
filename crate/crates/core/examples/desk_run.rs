//! Trains CAMP on the reference synthetic benchmark and prints test recalls.
//!
//! Usage: `cargo run --release --example desk_run -- [seed] [lr1] [lr2]`

use std::time::Instant;

use camp::data::{generate_synthetic, SyntheticSpec};
use camp::evaluation::{evaluate, gate_means};
use camp::training::{TrainConfig, Trainer};
use camp::ModelConfig;

fn main() -> camp::Result<()> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let seed: u64 = args.first().and_then(|s| s.parse().ok()).unwrap_or(0);
    let mut cfg = TrainConfig {
        seed,
        ..TrainConfig::desk()
    };
    if let Some(lr) = args.get(1).and_then(|s| s.parse().ok()) {
        cfg.lr_phase1 = lr;
    }
    if let Some(lr) = args.get(2).and_then(|s| s.parse().ok()) {
        cfg.lr_phase2 = lr;
    }
    let data = generate_synthetic::<f32>(&SyntheticSpec::default())?;
    let model = ModelConfig::desk();
    let start = Instant::now();
    let mut trainer = Trainer::new(model.clone(), cfg)?;
    let fit = trainer.fit(&data.train, &data.val, |s| {
        println!(
            "epoch {:2} loss {:.4} lr {:.0e} val rsum {:.3} gates {:.3}/{:.3}",
            s.epoch,
            s.loss,
            s.lr,
            s.val_rsum.unwrap_or(f64::NAN),
            s.mean_pos_gate.unwrap_or(f64::NAN),
            s.mean_neg_gate.unwrap_or(f64::NAN)
        )
    })?;
    let best = fit.best.expect("at least one epoch");
    let report = evaluate(&data.test, &best.params, &model, 1)?;
    let gates = gate_means(&data.test, &best.params, &model)?;
    println!("{}", serde_json::to_string(&report).expect("report serializes"));
    println!(
        "gate means: positive {:?}, negative {:?}",
        gates.positive, gates.negative
    );
    println!("elapsed {:.1}s", start.elapsed().as_secs_f64());
    Ok(())
}
