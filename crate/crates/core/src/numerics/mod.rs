//! Dense tensors, a recording autodiff graph, and AdamW.

mod gemm;
pub mod gradcheck;
mod graph;
mod optim;
mod params;
mod tensor;

pub use graph::{Graph, Var, NORM_EPS};
pub use optim::{AdamW, Moments};
pub use params::{ParamId, ParamStore, Parameter};
pub use tensor::Tensor;

