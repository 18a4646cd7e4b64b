//! Layer-wise dynamic test-time adaptation for small decoder-only language
//! models.
//!
//! A frozen transformer is adapted per prompt through LoRA factors on its
//! query and value projections. A small hypernetwork ([`scalenet`]) predicts
//! a learning-rate multiplier for every adapter block at every adaptation
//! step, and is itself trained by unrolling the adaptation loop with a
//! first-order meta-gradient ([`meta`]).

pub mod checkpoint;
pub mod data;
pub mod diagnostics;
pub mod error;
pub mod eval;
pub mod lm;
pub mod lora;
pub mod meta;
pub mod optim;
pub mod real;
pub mod scalenet;
pub mod seed;
pub mod tensor;
pub mod tta;

pub use error::{Error, Result};
pub use real::{Dtype, Real};
pub use tensor::{Graph, Tensor, Var};
