//! Federated averaging under concept drift.
//!
//! The crate is organised bottom-up:
//!
//! * [`model`]: a small feed-forward softmax classifier trained with minibatch SGD.
//! * [`drift`]: the confidence window and the beta-distribution CUSUM change detector.
//! * [`memory`]: per-client long-term rehearsal memory with the class-balance rule.
//! * [`data`]: synthetic drifting streams, delimited dataset loading and client partitioning.
//! * [`fed`]: synchronous FedAvg, the asynchronous drift-aware variant and the metrics log.
//!
//! Everything is deterministic given the seeds passed in; no operation reads
//! wall-clock time or global entropy.

pub mod data;
pub mod drift;
pub mod error;
pub mod fed;
pub mod memory;
pub mod model;
pub mod seed;

pub use data::LabeledInstance;
pub use error::{Error, Result};
