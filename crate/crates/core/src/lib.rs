//! Conditional compatibility learning for contextual anomaly detection at
//! desk scale: a synthetic subject/context world, frozen toy encoders with
//! branch adapters, text-pair refinement, text-conditioned branch fusion,
//! scoring and metrics.

pub mod crm;
pub mod csr;
pub mod diffcore;
pub mod encoders;
pub mod error;
pub mod objective;
pub mod scoring;
pub mod seeds;
pub mod textref;
pub mod worldgen;

pub use error::{Error, Result};
