//! Generates the synthetic multimodal benchmark and writes it as feature CSVs.
//!
//! ```text
//! cargo run --release --example synth_benchmark -- /tmp/mixtfsl-data
//! ```

use std::path::PathBuf;

use mixtfsl::data::{generate, load_features, write_features, SynthSpec};

fn main() -> mixtfsl::Result<()> {
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "synth-data".into()));
    std::fs::create_dir_all(&out)?;
    let spec = SynthSpec::default();
    let data = generate(&spec)?;

    for d in data.splits.all() {
        let path = out.join(format!("{}.csv", d.split.as_str()));
        write_features(&path, &[d])?;
        println!(
            "{:<5} {:>5} samples  {:>2} classes  -> {}",
            d.split.as_str(),
            d.len(),
            d.classes().len(),
            path.display()
        );
    }

    let modes: Vec<usize> = data.mode_means.iter().map(|m| m.len()).collect();
    println!("modes per class: {modes:?}");

    // files read back to the same splits
    let back = load_features(&out.join("base.csv"))?;
    assert_eq!(back.base, data.splits.base);
    Ok(())
}
