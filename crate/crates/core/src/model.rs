//! Trained model and its on-disk container.
//!
//! # Layout (version 1, all integers and floats little-endian)
//!
//! | field            | encoding                                        |
//! |------------------|-------------------------------------------------|
//! | magic            | 8 bytes `MIXTFSL\0`                             |
//! | version          | `u32` = 1                                       |
//! | widths           | `u32` count, then `u64` per width               |
//! | layers           | per layer: weight `in×out` `f64` row-major, bias `out` `f64` |
//! | scorer           | `tau`, `margin`, `gamma` as `f64`               |
//! | bank header      | `u64` classes, `u64` per-class size, `u64` slots `K`, `u64` dim |
//! | component class  | `K × u64`                                       |
//! | liveness         | `K × u8` (0 dead, 1 live)                       |
//! | components       | `K × dim` `f64` row-major                       |
//! | class labels     | `classes × i64` (dataset label of each bank class) |
//!
//! Nothing follows the last field; trailing bytes are an error.

use std::path::Path;

use crate::bank::MixtureBank;
use crate::encoder::{DenseLayer, EncoderParams};
use crate::error::{Error, Result};
use crate::losses::MarginSoftmaxParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MIXTFSL\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub encoder: EncoderParams,
    pub bank: MixtureBank,
    pub scorer: MarginSoftmaxParams,
    /// Dataset label of each bank class.
    pub class_labels: Vec<i64>,
}

impl Model {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let widths = self.encoder.widths();
        out.extend_from_slice(&(widths.len() as u32).to_le_bytes());
        for &w in widths {
            out.extend_from_slice(&(w as u64).to_le_bytes());
        }
        let put = |out: &mut Vec<u8>, xs: &[f64]| xs.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
        for l in &self.encoder.layers {
            put(&mut out, l.weight.data());
            put(&mut out, l.bias.data());
        }
        put(&mut out, &[self.scorer.tau, self.scorer.margin, self.scorer.gamma]);
        let b = &self.bank;
        for v in [b.num_classes(), b.per_class(), b.len(), b.dim()] {
            out.extend_from_slice(&(v as u64).to_le_bytes());
        }
        for &k in b.classes() {
            out.extend_from_slice(&(k as u64).to_le_bytes());
        }
        out.extend(b.liveness().iter().map(|&l| l as u8));
        put(&mut out, b.components().data());
        for &l in &self.class_labels {
            out.extend_from_slice(&l.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::ModelFormat("bad magic".into()));
        }
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::ModelFormat(format!("unsupported version {version}")));
        }
        let n_widths = r.u32()? as usize;
        let widths = (0..n_widths).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        if widths.is_empty() || widths.contains(&0) {
            return Err(Error::ModelFormat(format!("invalid widths {widths:?}")));
        }
        let mut layers = Vec::new();
        for w in widths.windows(2) {
            let weight = Tensor::matrix(w[0], w[1], r.f64s(w[0] * w[1])?)?;
            let bias = Tensor::vector(r.f64s(w[1])?);
            layers.push(DenseLayer { weight, bias });
        }
        let encoder = EncoderParams::from_layers(widths, layers)?;
        let s = r.f64s(3)?;
        let scorer = MarginSoftmaxParams {
            tau: s[0],
            margin: s[1],
            gamma: s[2],
        };
        scorer.validate().map_err(|e| Error::ModelFormat(e.to_string()))?;

        let num_classes = r.usize()?;
        let _per_class = r.usize()?;
        let slots = r.usize()?;
        let dim = r.usize()?;
        let class_of = (0..slots).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
        let live = r.take(slots)?.iter().map(|&b| b != 0).collect();
        let components = Tensor::matrix(slots, dim, r.f64s(slots * dim)?)?;
        let mut bank = MixtureBank::from_components(components, class_of, num_classes)
            .map_err(|e| Error::ModelFormat(e.to_string()))?;
        bank.set_liveness(live)?;
        let class_labels = (0..num_classes)
            .map(|_| Ok(r.u64()? as i64))
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::ModelFormat(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        if dim != encoder.output_dim() {
            return Err(Error::ModelFormat(format!(
                "bank dim {dim} does not match encoder output {}",
                encoder.output_dim()
            )));
        }
        Ok(Self {
            encoder,
            bank,
            scorer,
            class_labels,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::ModelFormat(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::ModelFormat("size overflow".into()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::ModelFormat("size overflow".into()))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bank::init_bank;
    use crate::encoder::init_encoder;
    use crate::seed::rng_for;

    fn model() -> Model {
        let encoder = init_encoder(&[4, 6, 3], &mut rng_for(1, "enc")).unwrap();
        let mut bank = init_bank(2, 3, 3, &mut rng_for(1, "bank")).unwrap();
        bank.kill(&[1, 4]);
        Model {
            encoder,
            bank,
            scorer: MarginSoftmaxParams::default(),
            class_labels: vec![7, -2],
        }
    }

    #[test]
    fn round_trip_preserves_everything() {
        let m = model();
        let back = Model::from_bytes(&m.to_bytes()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_bytes(), m.to_bytes());
    }

    #[test]
    fn corrupt_inputs_rejected() {
        let bytes = model().to_bytes();
        assert!(Model::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(Model::from_bytes(&extra).is_err());
        let mut bad_magic = bytes.clone();
        bad_magic[0] = b'X';
        assert!(Model::from_bytes(&bad_magic).is_err());
        let mut bad_version = bytes;
        bad_version[8] = 9;
        assert!(Model::from_bytes(&bad_version).is_err());
    }
}
