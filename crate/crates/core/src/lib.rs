//! Desk-scale laboratory for mobile-application fingerprinting from 5G
//! downlink control information (DCI).
//!
//! The pipeline runs entirely on synthetic data:
//!
//! * [`synth`] generates per-application DCI traces,
//! * [`capture`] thins them the way a lossy over-the-air sniffer would,
//! * [`features`] turns captured traces into fixed-length instance windows,
//! * [`cnn`] trains and runs a 1D convolutional classifier on those windows,
//! * [`metrics`] scores it,
//! * [`attacks`] scans whole cells and hunts for a target RNTI,
//! * [`cli`] exposes every stage as a subcommand.

pub mod attacks;
pub mod capture;
pub mod cli;
pub mod cnn;
pub mod corpus;
pub mod dci;
pub mod error;
pub mod features;
pub mod metrics;
pub mod rng;
pub mod synth;

pub use error::{Error, Result};
