//! Desk-scale laboratory for studying whether collaborative image
//! classification can be simultaneously private (DP-SGD with an RDP
//! accountant), robust (adversarial training and attack evaluation) and
//! scalable (static int8 post-training quantization).
//!
//! Subsystems:
//! - [`nn`]: deterministic tensor/layer engine for small residual CNNs with
//!   group normalization
//! - [`data`]: IDX ingestion, synthetic shape datasets, splits and client
//!   partitions
//! - [`dp`]: DP-SGD primitives and the subsampled-Gaussian RDP accountant
//! - [`attack`]: FGSM, PGD and FAB crafting plus poisoned dataset
//!   generation
//! - [`quant`]: static int8 post-training quantization with fake-quant
//!   inference
//! - [`fed`]: simulated federated averaging with a train-time adversary
//! - [`harness`]: configuration, evaluation, reporting and the pipeline

pub mod attack;
pub mod checkpoint;
pub mod data;
pub mod dp;
pub mod error;
pub mod fed;
pub mod harness;
pub mod nn;
pub mod quant;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;
