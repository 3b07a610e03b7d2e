//! Few-shot evaluation of a frozen encoder: nearest centroid against the
//! fitted linear head, 1-shot and 5-shot, on raw features and after training.
//!
//! ```text
//! cargo run --release --example evaluate_protocols
//! ```

use mixtfsl::data::{generate, SynthSpec};
use mixtfsl::encoder::{DenseLayer, EncoderParams};
use mixtfsl::episodes::{evaluate, EpisodeShape, HeadConfig, Protocol};
use mixtfsl::trainer::{full_pipeline, TrainConfig};
use mixtfsl::Tensor;

fn report(name: &str, encoder: &EncoderParams, data: &mixtfsl::data::SynthData) -> mixtfsl::Result<()> {
    let protocols = [
        ("nearest centroid", Protocol::NearestCentroid),
        ("linear head", Protocol::LinearHead(HeadConfig::default())),
    ];
    for (pname, protocol) in &protocols {
        for k_shot in [1, 5] {
            let shape = EpisodeShape { k_shot, ..EpisodeShape::default() };
            let r = evaluate(encoder, &data.splits.novel, protocol, shape, 600, 0)?;
            println!("{name:<8} {pname:<17} {k_shot}-shot  {:.2} ± {:.2}%", 100.0 * r.mean, 100.0 * r.ci95);
        }
    }
    Ok(())
}

fn main() -> mixtfsl::Result<()> {
    let data = generate(&SynthSpec::default())?;
    let d = data.splits.dim();
    let identity = EncoderParams::from_layers(
        vec![d, d],
        vec![DenseLayer { weight: Tensor::identity(d), bias: Tensor::zeros(&[d]) }],
    )?;
    report("raw", &identity, &data)?;
    let (model, _) = full_pipeline(&TrainConfig::default(), &data.splits)?;
    report("trained", &model.encoder, &data)?;
    Ok(())
}
