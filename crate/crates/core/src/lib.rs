//! Federated-learning simulator built around a layered robust aggregator.
//!
//! Clients train small dense networks on partitioned data, malicious clients
//! poison their data or updates, and the server combines local models with one
//! of several aggregation rules. Per-round main-task accuracy and attack
//! success rate are reported.

pub mod aggregation;
pub mod attacks;
pub mod clustering;
pub mod config;
pub mod data;
pub mod error;
pub mod model;
pub mod orchestrator;
pub mod report;
pub mod seed;
pub mod training;

pub use error::{Error, Result};
