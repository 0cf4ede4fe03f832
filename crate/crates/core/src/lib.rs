//! Self-referential weight matrix (SRWM) sequence learner for few-shot
//! classification, with bootstrapped (self-distilled) training.

pub mod episodes;
pub mod error;
pub mod fwtn;
pub mod harness;
pub mod numerics;
pub mod objective;
pub mod rng;
pub mod srwm;
pub mod trainer;

pub use error::{Error, Result};
