//! Adaptive-rate deep joint source-channel coding for image transmission over
//! an AWGN channel.
//!
//! A single model picks, per image, how many of its selective feature groups
//! to transmit. The decision comes from a small policy network conditioned on
//! the channel SNR and the image features, trained end to end through a
//! straight-through Gumbel-Softmax estimator.

pub mod channel;
pub mod checkpoint;
pub mod codec;
pub mod config;
pub mod data;
pub mod error;
pub mod eval;
pub mod model;
pub mod nn;
pub mod optim;
pub mod plot;
pub mod policy;
pub mod scalar;
pub mod tensor;
pub mod training;

pub use channel::{GroupLayout, SnrDb};
pub use checkpoint::Checkpoint;
pub use config::{DecisionMode, ExperimentConfig};
pub use data::{Dataset, DatasetName, DatasetSpec, Split};
pub use error::{Error, Result};
pub use model::{JsccModel, ModelKind};
pub use scalar::Scalar;
pub use tensor::Tensor;
