//! Dual-branch body/boundary fusion network for ultrasound lesion segmentation.
//!
//! The crate covers the whole pipeline: label decomposition ([`labelgen`]),
//! the network ([`network`]), the composite objective ([`losses`]),
//! evaluation ([`metrics`]), data handling ([`data`]) and the training
//! harness ([`train`]).

pub mod data;
pub mod error;
pub mod labelgen;
pub mod losses;
pub mod metrics;
pub mod network;
pub mod ops;
pub mod plot;
pub mod train;

pub use error::{Error, Result};
pub use labelgen::{BinaryMask, DistanceMetric, LabelSet};
