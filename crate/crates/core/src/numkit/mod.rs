//! Dense tensors, a reverse-mode tape and AdamW.

mod adamw;
mod tape;
mod tensor;

pub use adamw::{adamw_step, AdamWConfig, AdamWState, LinearDecay};
pub use tape::{AttnLayout, BinOp, Rhs, RopeTable, Tape, Var};
pub use tensor::{matmul_into, Tensor};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum TensorError {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("division by zero in {op}")]
    DivideByZero { op: &'static str },
    #[error("non-finite value from {op} at flat index {index}")]
    NonFinite { op: &'static str, index: usize },
    #[error("{0}")]
    Contract(String),
}

#[cfg(test)]
mod tests;
