//! Dense numeric substrate: tensors, layers, losses, optimizer and a
//! finite-difference gradient checker.

pub mod combine;
pub mod gradcheck;
pub mod loss;
pub mod network;
pub mod optim;
pub mod tensor;

pub use combine::{mean, weighted_sum};
pub use gradcheck::finite_difference_check;
pub use loss::{softmax_cross_entropy, softmax_kl, softmax_rows};
pub use network::{mlp_specs, ActivationKind, ForwardCache, Layer, LayerSpec, Mode, Network};
pub use optim::{sgd_step, OptimizerState};
pub use tensor::Tensor2;

#[cfg(test)]
mod tests;
