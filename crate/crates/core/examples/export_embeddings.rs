//! Trains a small run through the command layer and exports base-sample
//! embeddings plus live components for external 2-D projection.
//!
//! ```text
//! cargo run --release --example export_embeddings -- /tmp/mixtfsl-run
//! ```

use std::path::PathBuf;

use mixtfsl::run::{cmd_export_embeddings, cmd_train, RunConfig};

fn main() -> mixtfsl::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "mixtfsl-run".into());
    let cfg = RunConfig::load(None, &[format!("output_dir={:?}", PathBuf::from(&dir).display().to_string())])?;
    let out = cmd_train(&cfg)?;
    println!("trained: live components per class {:?}", out.report.live_per_class);

    let path = cmd_export_embeddings(&cfg, &cfg.model_path())?;
    let text = std::fs::read_to_string(&path)?;
    let samples = text.lines().filter(|l| l.starts_with("sample,")).count();
    let components = text.lines().filter(|l| l.starts_with("component,")).count();
    println!("{}: {samples} sample rows, {components} component rows", path.display());
    println!("header: {}", text.lines().next().unwrap_or_default());
    Ok(())
}
