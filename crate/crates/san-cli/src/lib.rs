//! IO, file formats, and the command-line harness around `san-core`:
//! dataset and checkpoint serialization, the JSON run configuration, the
//! training loop, the evaluation harness, and gradient checking.

pub mod config;
pub mod datagen;
pub mod errors;
pub mod evalrun;
pub mod formats;
pub mod gradcheckcmd;
pub mod train;
