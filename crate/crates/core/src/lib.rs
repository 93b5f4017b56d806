mod bytes;
pub mod data;
pub mod error;
pub mod model;
pub mod numerics;
pub mod train;

pub use error::{Error, Result};
pub use numerics::{AdamW, Graph, ParamId, ParamStore, Tensor, Var};
