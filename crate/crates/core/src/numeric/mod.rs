//! Tensors, differentiable operators, reverse-mode gradients and
//! receptive-field arithmetic.

pub mod container;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod receptive;
pub mod registry;
pub mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Gradients, Graph, NormConfig, RunningStats, Var};
pub use kernels::ConvParams;
pub use receptive::{compute_receptive_field, receptive_window, LayerSpec, Window};
pub use tensor::{Float, Tensor};
