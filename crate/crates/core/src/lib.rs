//! Sliding-window post-training quantization for a small Llama-style
//! language model.
//!
//! The crate is organised bottom-up: [`numkit`] is the tensor/autodiff
//! substrate, [`quantizer`] the uniform affine quantizer, [`transforms`] the
//! learnable channel scales and low-rank deltas, [`schedule`] the window
//! plan, [`tinymodel`] the model under quantization, [`calibrate`] the
//! window-by-window engine, [`evalprobe`] perplexity and layer sensitivity,
//! and [`packio`] all on-disk formats.

pub mod ablation;
pub mod calibrate;
pub mod evalprobe;
pub mod numkit;
pub mod packio;
pub mod quantizer;
pub mod schedule;
pub mod tinymodel;
pub mod transforms;

use numkit::TensorError;
use quantizer::QuantError;
use schedule::ScheduleError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Quant(#[from] QuantError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error(transparent)]
    Format(#[from] packio::FormatError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
    #[error("{0}")]
    Contract(String),
    #[error("training diverged: {0}")]
    Diverged(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn contract(msg: impl Into<String>) -> Error {
    Error::Contract(msg.into())
}

#[cfg(test)]
mod oracle_imports {
    pub use crate::numkit::{Tape, Tensor, Var};
}

#[cfg(test)]
#[path = "../tests/common/oracles.rs"]
mod testutil;
