//! Two-stage camera-space hand mesh recovery.
//!
//! The pipeline predicts a root-relative mesh with a coarse-to-fine spectral
//! graph decoder and recovers the absolute root depth by classifying it into
//! adaptively sized depth bins. Everything runs on a small f64 autodiff core.

pub mod depthhead;
pub mod encoder2d;
pub mod error;
pub mod gcn;
pub mod harness;
pub mod losses;
pub mod meshgraph;
pub mod tensor;

pub use error::{Error, Result};
