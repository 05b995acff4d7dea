//! Reverse-mode automatic differentiation over dense tensors.

mod graph;
pub mod gradcheck;
mod kernels;
mod layers;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{check_fn, grad_check, relative_error};
pub use graph::{BnStats, Graph, Mode, Var};
pub use layers::{Layer, LayerSpec, BN_EPS, BN_MOMENTUM};
pub use optim::{OptimizerConfig, OptimizerKind, OptimizerState};
pub use params::{Param, ParamId, ParamStore};
pub use tensor::Tensor;
