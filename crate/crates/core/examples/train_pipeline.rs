//! Both training stages on the default synthetic benchmark, then few-shot
//! evaluation on the novel classes.
//!
//! ```text
//! cargo run --release --example train_pipeline
//! ```

use mixtfsl::data::{generate, SynthSpec};
use mixtfsl::episodes::{evaluate, EpisodeShape, Protocol};
use mixtfsl::trainer::{full_pipeline, TrainConfig};

fn main() -> mixtfsl::Result<()> {
    let data = generate(&SynthSpec::default())?;
    let cfg = TrainConfig::default();
    let (model, report) = full_pipeline(&cfg, &data.splits)?;

    println!("validation accuracy: initial {:.3}, after stage 1 {:.3}, final {:.3}",
        report.initial_val_accuracy, report.stage1_best_val_accuracy, report.best_val_accuracy);
    println!("epochs run: {}  best epochs: {:?}", report.epochs.len(), report.best_epochs);
    for u in &report.target_updates {
        println!("round {} ended at epoch {}: tau -> {:.4}, pruned {} components", u.round, u.epoch, u.tau_after, u.pruned.len());
    }
    println!("live components per class: {:?}", report.live_per_class);

    for k_shot in [1, 5] {
        let shape = EpisodeShape { k_shot, ..EpisodeShape::default() };
        let r = evaluate(&model.encoder, &data.splits.novel, &Protocol::default(), shape, 600, cfg.seed)?;
        println!("novel 5-way {k_shot}-shot: {:.2} ± {:.2}%", 100.0 * r.mean, 100.0 * r.ci95);
    }

    let path = std::env::temp_dir().join("mixtfsl-example-model.bin");
    model.save(&path)?;
    println!("model written to {}", path.display());
    Ok(())
}
