//! Runs the two stages separately to show the target updates: the
//! temperature schedule, pruning after each round, and validation per epoch.
//!
//! ```text
//! cargo run --release --example progressive_following
//! ```

use mixtfsl::data::{generate, SynthSpec};
use mixtfsl::trainer::{init_model, initial_training, progressive_following, BaseSet, TrainConfig, TrainReport};

fn main() -> mixtfsl::Result<()> {
    let data = generate(&SynthSpec::default())?;
    let base = BaseSet::from_dataset(&data.splits.base)?;
    let cfg = TrainConfig::default();
    let (encoder, bank) = init_model(&cfg, &base)?;
    let mut report = TrainReport::default();

    let s1 = initial_training(encoder, bank, &base, &data.splits.val, &cfg, &mut report)?;
    println!("stage 1: {} epochs, best val acc {:.3}", report.epochs.len(), 1.0 - s1.best_error);
    let s2 = progressive_following(s1, &base, &data.splits.val, &cfg, &mut report)?;

    for e in report.epochs.iter().filter(|e| e.stage == 2) {
        println!(
            "epoch {:>3} round {} tau {:.4} loss {:.4} val {:.3} live {}{}",
            e.epoch,
            e.round,
            e.tau,
            e.loss,
            e.val_accuracy,
            e.live_components,
            if e.improved { "  *" } else { "" }
        );
    }
    println!("tau schedule {:?}", report.tau_schedule);
    println!("final best val acc {:.3}, live components {}", 1.0 - s2.best_error, s2.bank.live_count());
    Ok(())
}
