//! Core algorithms for a hybrid CTC/attention sequence recognizer trained
//! with siamese dropout-consistency regularization.
//!
//! Everything in this crate is pure computation over heap-allocated tensors:
//! a reverse-mode autodiff tape, the encoder-decoder model, exact CTC loss
//! and decoding, the twin-pass KL training objective, Adam with warmup,
//! synthetic data generation, and error-rate metrics. There is no IO and no
//! threading here; the companion CLI crate owns files, logs, and
//! parallelism.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod ctc;
pub mod error;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod params;
pub mod rng;
pub mod siamese;
pub mod synth;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use params::{GradMap, Params};
pub use rng::Rng;
pub use tape::{KlDirection, NodeId, Tape};
pub use tensor::Tensor;
