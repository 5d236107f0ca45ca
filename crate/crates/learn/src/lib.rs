//! A small convolutional corrector for motion-corrupted mGRE data, trained
//! either against clean complex images or through the mono-exponential
//! forward model, on top of a minimal reverse-mode gradient tape.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod infer;
pub mod loss;
pub mod model;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use model::{Arch, CorrectorModel, Layer};
pub use tape::{Tape, Var};
pub use tensor::Tensor;
pub use train::{train, Dataset, History, TrainConfig};
