//! Clustered generator model for unsupervised clustering.
//!
//! A generator `G(z, y)` maps a continuous style latent `z` and a discrete
//! cluster label `y` to data space. Learning alternates Langevin/Gibbs
//! inference of `(z_i, y_i)` per example with ascent steps on the generator
//! parameters; the inferred `y_i` are the cluster assignments.

pub mod cli;
pub mod data;
pub mod error;
pub mod infer;
pub mod learn;
pub mod metrics;
pub mod model;
pub mod netcore;
pub mod pixelwise;
pub mod rng;

pub use error::{Error, Result};
pub use infer::{gibbs_sweep, infer_y, langevin_infer_z, langevin_step, posterior_y, InferenceConfig, YMode};
pub use learn::{fit, train_iteration, BatchSize, ClusteredGenerator, LatentModel, MetricsLog, TrainConfig, TrainState};
pub use metrics::{clustering_accuracy, hungarian};
pub use model::{grad_theta_log_joint, grad_z_log_joint, log_joint, synthesize, LatentState, ModelConfig};
pub use netcore::{Architecture, GeneratorNet, Mlp, Tensor};
