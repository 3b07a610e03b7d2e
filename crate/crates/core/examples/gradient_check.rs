//! Checks tape gradients of the initial-stage loss against central
//! differences on a small random problem.
//!
//! ```text
//! cargo run --release --example gradient_check
//! ```

use mixtfsl::autodiff::Tape;
use mixtfsl::bank::init_bank;
use mixtfsl::encoder::init_encoder;
use mixtfsl::losses::{assign_nearest, margin_nll, MarginSoftmaxParams};
use mixtfsl::seed::rng_for;
use mixtfsl::Tensor;
use rand::Rng;

fn main() -> mixtfsl::Result<()> {
    let rng = &mut rng_for(7, "example/gradcheck");
    let encoder = init_encoder(&[4, 6, 5], rng)?;
    let bank = init_bank(3, 2, 5, rng)?;
    let x = Tensor::matrix(6, 4, (0..24).map(|_| rng.random_range(-2.0..2.0)).collect())?;
    let classes = [0, 1, 2, 0, 1, 2];
    let params = MarginSoftmaxParams { tau: 0.2, ..Default::default() };

    // Loss of the embeddings against the bank with pseudo-labels held fixed,
    // as a function of the first-layer weights only.
    let pseudo = assign_nearest(&encoder.embed(&x)?, &classes, &bank)?;
    let live = bank.live_indices();
    let targets: Vec<usize> = pseudo.iter().map(|j| live.iter().position(|l| l == j).unwrap()).collect();
    let loss_and_grad = |w0: &Tensor| -> mixtfsl::Result<(f64, Tensor)> {
        let mut enc = encoder.clone();
        enc.layers[0].weight = w0.clone();
        let mut tape = Tape::new();
        let bound = enc.bind(&mut tape);
        let xv = tape.leaf(x.clone());
        let z = enc.forward(&mut tape, &bound, xv)?;
        let u = tape.leaf(bank.components().clone());
        let loss = margin_nll(&mut tape, z, u, &targets, &params)?;
        let g = tape.backward(loss)?.get(bound.layers[0].0);
        Ok((tape.value(loss).item(), g))
    };

    let w0 = encoder.layers[0].weight.clone();
    let (loss, grad) = loss_and_grad(&w0)?;
    println!("loss {loss:.6}");
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for i in 0..w0.len() {
        let mut plus = w0.clone();
        plus.data_mut()[i] += h;
        let mut minus = w0.clone();
        minus.data_mut()[i] -= h;
        let fd = (loss_and_grad(&plus)?.0 - loss_and_grad(&minus)?.0) / (2.0 * h);
        let a = grad.data()[i];
        let rel = (a - fd).abs() / a.abs().max(fd.abs()).max(1e-3);
        worst = worst.max(rel);
    }
    println!("{} weights checked, worst relative error {worst:.2e}", w0.len());
    Ok(())
}
