//! Dense tensors, kernels, seeded randomness and the reverse-mode tape.

pub mod gradcheck;
pub mod kernels;
pub mod math;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use gradcheck::{finite_difference_gradient, relative_error};
pub use kernels::{gelu, layer_norm, linear, log_softmax, matmul, softmax};
pub use rng::RngStream;
pub use tape::{GradTape, Gradients, Var};
pub use tensor::Tensor;
