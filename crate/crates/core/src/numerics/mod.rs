//! Tensor math with reverse-mode gradients, the HSIC estimator, Adam, and
//! finite-difference verification.

pub mod gradcheck;
pub mod graph;
pub mod hsic;
pub mod ops;
pub mod optim;
pub mod tensor;

pub use gradcheck::{gradcheck, GradcheckReport};
pub use graph::{Gradients, Graph, Var};
pub use hsic::Kernel;
pub use optim::Adam;
pub use tensor::Tensor;
