//! Differentially private federated learning: RDP accounting for Poisson
//! and fixed-size subsampling, data partitioning, DP-SGD, FedAvg
//! orchestration and a practitioner recommendation engine.

pub mod accountant;
pub mod dpsgd;
pub mod federation;
pub mod partition;
pub mod practitioner;
pub mod rng;
