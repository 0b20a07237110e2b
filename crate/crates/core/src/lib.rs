//! Contrastive federated learning over vertically partitioned tabular silos.
//!
//! Each silo holds a column slice of a conceptual global table, linked to the
//! others only through a shared row index. Silos pretrain an encoder/decoder
//! with a contrastive objective on their own zero-filled rows, a server
//! averages the parameters (FedAvg), and the frozen global encoder is then
//! evaluated per silo with a softmax-regression probe.

pub mod error;
pub mod math;
pub mod dataset;
pub mod silo;
pub mod augment;
pub mod experiment;
pub mod federation;
pub mod loss;
pub mod model;
pub mod probe;
pub mod wire;

pub use error::{Error, Result};
