//! Desk-scale toolkit for outlier-weighed layerwise sampling (OWS).
//!
//! Fine-tunes small trainable networks by sampling a subset of blocks each
//! period and updating them with low-rank projected Adam, alongside the
//! uniform/decreasing/reversed/BI/RM sampling baselines and an analytic
//! memory accountant for comparing methods.

pub mod checkpoint;
pub mod data;
pub mod error;
pub mod linalg;
pub mod memory;
pub mod model;
pub mod optimizer;
pub mod outlier;
pub mod rng;
pub mod sampling;
pub mod trainer;

pub use error::{Error, Result};
pub use linalg::{column_l2_norms, matmul, truncated_svd, Matrix, TruncatedSvd};
