//! Hierarchical consensus network for unsupervised multiview feature learning.
//!
//! Per-view autoencoders are trained jointly under three consensus objectives
//! (classifying, coding, global) plus reconstruction. The learned latent
//! features of all views are concatenated and clustered with k-means.

pub mod augment;
pub mod checkpoint;
pub mod consensus;
pub mod data;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod model;
pub mod nn;
pub mod numerics;
pub mod rng;
pub mod trainer;

pub use error::{HcnError, Result};
pub use numerics::DenseMatrix;
