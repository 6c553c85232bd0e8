//! Drop-feature augmentation.
//!
//! A mask keeps feature `j` with probability `1 − rho`. Dropped features are
//! zero-filled rather than removed so the encoder input width stays `d_v`;
//! kept features are not rescaled.

use rand::Rng;

use crate::error::{HcnError, Result};
use crate::numerics::DenseMatrix;

#[derive(Debug, Clone, PartialEq)]
pub struct DropMask {
    keep: Vec<bool>,
    rho: f64,
}

impl DropMask {
    /// Mask that keeps every feature.
    pub fn keep_all(d: usize) -> Self {
        DropMask {
            keep: vec![true; d],
            rho: 0.0,
        }
    }

    pub fn from_bits(keep: Vec<bool>, rho: f64) -> Self {
        DropMask { keep, rho }
    }

    pub fn len(&self) -> usize {
        self.keep.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keep.is_empty()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn bits(&self) -> &[bool] {
        &self.keep
    }

    pub fn kept(&self) -> usize {
        self.keep.iter().filter(|&&k| k).count()
    }
}

/// Draws `m_j ~ Bernoulli(1 − rho)` independently for `j < d`.
pub fn sample_mask<R: Rng + ?Sized>(d: usize, rho: f64, rng: &mut R) -> Result<DropMask> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(HcnError::InvalidArgument(format!(
            "drop rate must lie in [0, 1], got {rho}"
        )));
    }
    let keep = (0..d).map(|_| rng.random::<f64>() >= rho).collect();
    Ok(DropMask { keep, rho })
}

/// Zeroes the columns whose mask bit is 0.
pub fn apply_mask(x: &DenseMatrix, mask: &DropMask) -> Result<DenseMatrix> {
    if x.cols() != mask.len() {
        return Err(HcnError::ShapeMismatch {
            op: "apply_mask",
            left: x.shape(),
            right: (1, mask.len()),
        });
    }
    let mut out = x.clone();
    if mask.kept() == mask.len() {
        return Ok(out);
    }
    for r in 0..out.rows() {
        for (v, &k) in out.row_mut(r).iter_mut().zip(&mask.keep) {
            if !k {
                *v = 0.0;
            }
        }
    }
    Ok(out)
}
