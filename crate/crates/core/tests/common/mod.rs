#![allow(dead_code)]

pub mod oracle_imports {
    pub use sliderquant::numkit::{Tape, Tensor, Var};
}

pub mod oracles;
