//! Dense tensors, reverse-mode differentiation, the Adam optimizer,
//! finite-difference gradient checking and the checkpoint container.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
mod kernels;
pub mod optim;
pub mod tensor;

pub use checkpoint::Checkpoint;
pub use gradcheck::{check_gradients, GradCheckReport};
pub use graph::{sigmoid, Conv2dSpec, Grads, Graph, Var};
pub use optim::{Adam, AdamConfig};
pub use tensor::{ParamId, ParamStore, Tensor};
