//! Oracles shared by the integration tests and the acceptance suite.
#![allow(dead_code)]

pub mod experiments;
pub mod gradcheck;
pub mod infonce;
pub mod kmeans;
pub mod metrics;
pub mod quant;
pub mod search;
pub mod stats;
