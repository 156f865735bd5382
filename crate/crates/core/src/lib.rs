//! Federated learning simulation with progressive Fourier aggregation on the
//! server and deputy-enhanced transfer on the clients.
//!
//! The crate is organised bottom-up:
//!
//! - [`numerics`]: 2-D DFT and amplitude/phase maps.
//! - [`aggregate`]: PFA and FedAvg server aggregation, threshold schedule.
//! - [`model`]: a small trainable network with manual backpropagation.
//! - [`det`]: the client-side deputy/personalized model state machine.
//! - [`data`]: synthetic heterogeneous client datasets.
//! - [`metrics`]: macro F1 and one-vs-rest macro AUC.
//! - [`experiment`]: the communication loop, checkpoints, logs and reports.

pub mod aggregate;
pub mod checksum;
pub mod data;
pub mod det;
pub mod error;
pub mod experiment;
pub mod metrics;
pub mod model;
pub mod numerics;
pub mod parallel;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{NamedTensorMap, Tensor};
