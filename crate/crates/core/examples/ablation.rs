//! Assignment loss only, initial stage only, and the full pipeline, side by
//! side: surviving components, mode purity and novel accuracy.
//!
//! ```text
//! cargo run --release --example ablation -- 3     # number of seeds
//! ```

use mixtfsl::analysis::{assignments, mean_class_purity, median};
use mixtfsl::data::{generate, SynthSpec};
use mixtfsl::episodes::{evaluate, EpisodeShape, Protocol};
use mixtfsl::trainer::{full_pipeline, BaseSet, TrainConfig};

fn main() -> mixtfsl::Result<()> {
    let seeds: u64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2);
    println!("{:>4} {:<12} {:>7} {:>7} {:>8} {:>7} {:>16}", "seed", "variant", "val", "median", "frac>=2", "purity", "novel 1-shot");
    for seed in 0..seeds {
        let data = generate(&SynthSpec { seed, ..SynthSpec::default() })?;
        let base = BaseSet::from_dataset(&data.splits.base)?;
        for (name, ablate_diversity, stage1_only) in
            [("L_a only", true, false), ("stage 1", false, true), ("full", false, false)]
        {
            let cfg = TrainConfig { seed, ablate_diversity, stage1_only, ..TrainConfig::default() };
            let (model, report) = full_pipeline(&cfg, &data.splits)?;
            let pseudo = assignments(&model.encoder, &model.bank, &base.inputs, &base.classes)?;
            let purity = mean_class_purity(&pseudo, &base.classes, &base.modes, base.num_classes());
            let lpc = &report.live_per_class;
            let frac = lpc.iter().filter(|&&c| c >= 2).count() as f64 / lpc.len() as f64;
            let r = evaluate(&model.encoder, &data.splits.novel, &Protocol::default(), EpisodeShape::default(), 200, seed)?;
            println!(
                "{seed:>4} {name:<12} {:>7.3} {:>7} {:>8.2} {purity:>7.3} {:>8.2} ± {:.2}",
                report.best_val_accuracy,
                median(lpc),
                frac,
                100.0 * r.mean,
                100.0 * r.ci95
            );
        }
    }
    Ok(())
}
