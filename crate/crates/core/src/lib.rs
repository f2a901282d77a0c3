//! Statistical model checking for black-box discrete-event simulators.

pub mod analysis;
pub mod blackbox;
pub mod campaign;
pub mod cli;
pub mod conformance;
pub mod engine;
pub mod models;
pub mod quatex;
pub mod rng;
pub mod stats;
