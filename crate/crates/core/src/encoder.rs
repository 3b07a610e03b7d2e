//! Fully connected feature extractor.
//!
//! Widths `[D, h1, ..., M]` give `len - 1` dense layers with ReLU between
//! them and a linear output. A single width `[D]` is the identity map.

use rand::Rng as _;

use crate::autodiff::{Tape, Var};
use crate::bank::MixtureBank;
use crate::error::{Error, Result};
use crate::seed::Rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct DenseLayer {
    /// `in × out`
    pub weight: Tensor,
    /// `[out]`
    pub bias: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    widths: Vec<usize>,
    pub layers: Vec<DenseLayer>,
}

/// Leaf handles for one encoder bound to a tape.
#[derive(Clone, Debug)]
pub struct BoundEncoder {
    pub layers: Vec<(Var, Var)>,
}

/// Xavier/Glorot uniform bound.
pub fn xavier_bound(fan_in: usize, fan_out: usize) -> f64 {
    (6.0 / (fan_in + fan_out) as f64).sqrt()
}

pub fn init_encoder(widths: &[usize], rng: &mut Rng) -> Result<EncoderParams> {
    if widths.is_empty() {
        return Err(Error::Config("encoder widths must not be empty".into()));
    }
    if widths.contains(&0) {
        return Err(Error::Config(format!("zero width in encoder widths {widths:?}")));
    }
    let layers = widths
        .windows(2)
        .map(|w| {
            let (fan_in, fan_out) = (w[0], w[1]);
            let a = xavier_bound(fan_in, fan_out);
            let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..=a)).collect();
            DenseLayer {
                weight: Tensor::matrix(fan_in, fan_out, data).expect("sized"),
                bias: Tensor::zeros(&[fan_out]),
            }
        })
        .collect();
    Ok(EncoderParams {
        widths: widths.to_vec(),
        layers,
    })
}

impl EncoderParams {
    /// Rebuilds params from raw layers, checking that shapes chain.
    pub fn from_layers(widths: Vec<usize>, layers: Vec<DenseLayer>) -> Result<Self> {
        if widths.is_empty() || widths.contains(&0) || layers.len() + 1 != widths.len() {
            return Err(Error::ModelFormat(format!(
                "widths {widths:?} do not match {} layers",
                layers.len()
            )));
        }
        for (l, w) in layers.iter().zip(widths.windows(2)) {
            if l.weight.shape() != [w[0], w[1]] || l.bias.shape() != [w[1]] {
                return Err(Error::ModelFormat(format!(
                    "layer shape {:?}/{:?} does not chain {} -> {}",
                    l.weight.shape(),
                    l.bias.shape(),
                    w[0],
                    w[1]
                )));
            }
        }
        Ok(Self { widths, layers })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("non-empty")
    }

    pub fn num_params(&self) -> usize {
        self.layers.iter().map(|l| l.weight.len() + l.bias.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.layers.iter().all(|l| l.weight.is_finite() && l.bias.is_finite())
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.layers
            .iter_mut()
            .flat_map(|l| [&mut l.weight, &mut l.bias])
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.layers.iter().flat_map(|l| [&l.weight, &l.bias])
    }

    fn check_width(&self, batch: &Tensor) -> Result<()> {
        if batch.rank() != 2 || batch.cols() != self.input_dim() {
            return Err(Error::Shape {
                op: "encoder",
                left: batch.shape().to_vec(),
                right: vec![self.input_dim()],
            });
        }
        Ok(())
    }

    /// Registers every weight and bias as a tape leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundEncoder {
        BoundEncoder {
            layers: self
                .layers
                .iter()
                .map(|l| (tape.leaf(l.weight.clone()), tape.leaf(l.bias.clone())))
                .collect(),
        }
    }

    /// Differentiable forward pass of a `B×D` batch already on `tape`.
    pub fn forward(&self, tape: &mut Tape, bound: &BoundEncoder, batch: Var) -> Result<Var> {
        self.check_width(tape.value(batch))?;
        let mut h = batch;
        let last = bound.layers.len().saturating_sub(1);
        for (i, &(w, b)) in bound.layers.iter().enumerate() {
            let lin = tape.matmul(h, w)?;
            h = tape.add_row(lin, b)?;
            if i < last {
                h = tape.relu(h);
            }
        }
        Ok(h)
    }

    /// Tape-free forward pass for evaluation.
    pub fn embed(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_width(batch)?;
        let mut h = batch.clone();
        let last = self.layers.len().saturating_sub(1);
        for (i, l) in self.layers.iter().enumerate() {
            h = h.matmul(&l.weight)?;
            let c = h.cols();
            for (j, x) in h.data_mut().iter_mut().enumerate() {
                *x += l.bias.data()[j % c];
                if i < last && *x < 0.0 {
                    *x = 0.0;
                }
            }
        }
        Ok(h)
    }

    pub fn embed_one(&self, x: &[f64]) -> Result<Vec<f64>> {
        let t = Tensor::matrix(1, x.len(), x.to_vec())?;
        Ok(self.embed(&t)?.into_data())
    }
}

/// Frozen copy of an encoder and its mixture, used as the assignment target.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetSnapshot {
    encoder: EncoderParams,
    bank: MixtureBank,
}

impl TargetSnapshot {
    pub fn encoder(&self) -> &EncoderParams {
        &self.encoder
    }

    pub fn bank(&self) -> &MixtureBank {
        &self.bank
    }

    pub fn snapshot(&self) -> TargetSnapshot {
        self.clone()
    }
}

pub fn snapshot(encoder: &EncoderParams, bank: &MixtureBank) -> TargetSnapshot {
    TargetSnapshot {
        encoder: encoder.clone(),
        bank: bank.clone(),
    }
}
