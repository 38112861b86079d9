//! Dense tensors, reverse-mode differentiation and gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod init;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_sampled};
pub use graph::{Grads, Graph, Var};
pub use tensor::{cross_entropy, softmax_masked, Mask, Tensor};
