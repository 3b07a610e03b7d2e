//! How temperature and angular margin shape the scorer.
//!
//! ```text
//! cargo run --release --example margin_softmax
//! ```

use mixtfsl::losses::{margin_softmax_prob, MarginSoftmaxParams};

fn main() -> mixtfsl::Result<()> {
    // an embedding at 30 degrees from the target and 50 degrees from a rival
    let deg = |d: f64| d.to_radians();
    let z = [1.0, 0.0];
    let target = [deg(30.0).cos(), deg(30.0).sin()];
    let rival = [deg(50.0).cos(), -deg(50.0).sin()];
    let candidates: [&[f64]; 2] = [&target, &rival];

    println!("{:>6} {:>8} {:>10}", "tau", "margin", "p(target)");
    for tau in [1.0, 0.2, 0.05] {
        for margin in [-0.02, 0.0, 0.2] {
            let p = margin_softmax_prob(&z, &candidates, 0, &MarginSoftmaxParams { tau, margin, gamma: 0.8 })?;
            println!("{tau:>6} {margin:>8} {p:>10.5}");
        }
    }

    // only directions matter
    let p = MarginSoftmaxParams::default();
    let a = margin_softmax_prob(&z, &candidates, 0, &p)?;
    let b = margin_softmax_prob(&[250.0, 0.0], &candidates, 0, &p)?;
    println!("scaled embedding gives the same probability: {a:.12} vs {b:.12}");
    Ok(())
}
