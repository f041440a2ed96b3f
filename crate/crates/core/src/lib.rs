//! Parameter-efficient fine-tuning as transformations of frozen weights.
//!
//! Tuners fall into three families: reconstruction (rescale or re-weight the
//! existing subspace of `W`), extension (add a low-rank term) and combination
//! (both at once). Each family is a module; [`tuner`] dispatches over them and
//! [`model`] and [`train`] run them inside a small MLP.

pub mod activation;
pub mod combination;
pub mod error;
pub mod extension;
pub mod gradcheck;
pub mod linalg;
pub mod model;
pub mod mpc;
pub mod reconstruction;
pub mod train;
pub mod tuner;

pub use activation::Activation;
pub use error::{Error, Result};
pub use linalg::{Matrix, SvdFactors};
pub use model::{Layer, Model};
pub use mpc::{RegularizerKind, RegularizerSpec};
pub use train::{Dataset, Loss, Optimizer, TrainConfig, TrainTrace};
pub use tuner::{Method, Trainable, TunerConfig, TunerState};
