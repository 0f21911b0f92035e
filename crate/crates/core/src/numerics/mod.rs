//! Dense tensors, reverse-mode differentiation, seeded randomness,
//! gradient checking, checkpoints and optimization.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_fn, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use optim::{Adam, AdamConfig, Bound, ParamStore};
pub use rng::Rng;
pub use tensor::{DType, Scalar, Tensor};
