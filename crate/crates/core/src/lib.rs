//! Distributed Lion with low-bit, norm-scaled update quantization and several
//! majority-vote aggregation strategies.

pub mod bench;
pub mod collectives;
pub mod costmodel;
pub mod error;
pub mod experiment;
pub mod optimizer;
pub mod params;
pub mod quant;
pub mod selftest;
pub mod workloads;

pub use error::{Error, Result};
