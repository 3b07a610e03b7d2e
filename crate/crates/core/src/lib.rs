//! Mixture-based feature space learning for few-shot classification.
//!
//! An encoder and a bank of learnable per-class mixture components are
//! trained jointly on base classes. Each class keeps several components, so
//! a class made of several modes is not squeezed onto one prototype. The
//! frozen encoder is then evaluated on novel classes with a linear head
//! fitted per episode.
//!
//! * [`autodiff`], [`optim`]: reverse-mode tape and Adam.
//! * [`encoder`]: the MLP feature extractor and frozen target snapshots.
//! * [`bank`]: mixture components, nearest-component queries, pruning.
//! * [`losses`]: margin softmax and the assignment, diversity, and
//!   progressive objectives.
//! * [`trainer`]: the two training stages and the full pipeline.
//! * [`episodes`]: N-way K-shot evaluation with confidence intervals.
//! * [`data`]: synthetic multimodal benchmark and the feature CSV format.
//! * [`run`]: config-driven commands behind the `mixtfsl` binary.

pub mod analysis;
pub mod autodiff;
pub mod bank;
pub mod data;
pub mod encoder;
pub mod episodes;
pub mod error;
pub mod losses;
pub mod model;
pub mod optim;
pub mod run;
pub mod seed;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use model::Model;
pub use tensor::Tensor;
