//! Simulation of contribution-aware multimodal federated learning under
//! missing sensing modalities.
//!
//! Nodes train a multimodal classifier together with a label-conditioned
//! latent generator that stands in for absent modality features. The server
//! aggregates generators with clustered Shapley weights and models with
//! contribution-aware weights.
//!
//! Layout:
//! - [`numeric`]: dense tensors, layers with analytic gradients, losses, SGD.
//! - [`synthdata`]: synthetic multimodal data, node partitions, missingness masks.
//! - [`models`]: per-modality encoders, fusion head, conditional generator.
//! - [`node`]: local coupled training of model and generator.
//! - [`generator_agg`]: k-means, exact Shapley values, weighted generator aggregation.
//! - [`model_agg`]: local/global contributions, aggregation weights, global update.
//! - [`orchestrator`]: round loop, metrics and output files.

pub mod error;
pub mod exec;
pub mod generator_agg;
pub mod model_agg;
pub mod models;
pub mod node;
pub mod numeric;
pub mod orchestrator;
pub mod seed;
pub mod selftest;
pub mod synthdata;
pub mod textio;

pub use error::{Error, Result};
