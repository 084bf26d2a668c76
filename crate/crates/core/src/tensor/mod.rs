//! Dense tensors, the recorded-operation graph and the Adam optimizer.

mod dense;
mod graph;
pub mod kernels;
mod optim;
mod params;

pub use dense::{l1_distance, Tensor};
pub use graph::{Gradients, Graph, PoolKind, Var, BCE_CLAMP, COSINE_EPS, SOBEL_EPS};
pub use optim::{adam_update, Adam, AdamConfig};
pub use params::{Bound, GradSet, Param, ParamId, ParamStore};

pub(crate) use graph::cosine;
