pub mod autograd;
pub mod bridge;
pub mod checkpoint;
pub mod combined;
pub mod compare;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod optim;
pub mod tensor;
pub mod train;
pub mod transformer;

pub use autograd::{AttentionMask, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use tensor::{Param, ParamId, ParamKind, ParamStore, Tensor};
