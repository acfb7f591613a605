//! Baby-sound classification: audio loading, spectrograms, a small CNN,
//! training, inference and alerting.

pub mod alert;
pub mod error;
pub mod model;
pub mod nn;
pub mod optim;
pub mod rng;
pub mod spectro;
pub mod synth;
pub mod tensor;
pub mod train;
pub mod watch;
pub mod wav_io;

pub use error::{Error, Result};
pub use model::{Model, Prediction};
