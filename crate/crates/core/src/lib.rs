//! Simulator for semi-supervised multi-modal federated learning.
//!
//! Clients hold unlabelled multi-modal sequences and train their encoders
//! with a temporal contrastive objective whose soft targets are temporal
//! IoU scores between cross-modal windows. The server aggregates encoders
//! (FedAvg, FedOpt, or similarity-guided weighting on a small labelled
//! proxy set), trains the task head on that proxy set, and evaluates.

pub mod aggregate;
pub mod cli;
pub mod contrastive;
pub mod error;
pub mod federation;
pub mod model;
pub mod numerics;
pub mod partition;
pub mod rng;
pub mod synthdata;

pub use error::{Error, Result};
