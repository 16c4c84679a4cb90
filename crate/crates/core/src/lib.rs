//! Adversarial reprogramming at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: dense `f64` tensors with a reverse-mode tape.
//! - [`datasets`]: IDX ingestion, synthetic target domains, padding and batching.
//! - [`models`]: the CWNet family, SGD training, prediction and accuracy.
//! - [`reprogram`]: frame masks, class maps, the masked program and its
//!   sign-gradient optimizer.
//! - [`diagnostics`]: domain alignment, reprogramming accuracy, gradient
//!   alignment, first-order loss predictors and confusion matrices.
//! - [`stats`]: correlation coefficients and permutation tests.

pub mod datasets;
pub mod diagnostics;
pub mod error;
pub mod models;
pub mod reprogram;
pub(crate) mod rng;
pub mod stats;
pub mod tensor;

pub use datasets::{LabeledDataset, PadSpec};
pub use diagnostics::MetricsRecord;
pub use error::{Error, Result};
pub use models::{InputModel, Network, TrainConfig};
pub use reprogram::{ClassMap, Mask, Program, ReprogramConfig};
pub use stats::{CorrelationMethod, CorrelationResult};
pub use tensor::{Tape, Tensor, Var};
