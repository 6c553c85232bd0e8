//! Clustering accuracy, normalized mutual information and adjusted Rand index.
//!
//! Labels are nonnegative integers used directly as contingency indices.

use serde::{Deserialize, Serialize};

use super::hungarian::hungarian;
use crate::error::{HcnError, Result};
use crate::numerics::DenseMatrix;

/// `counts[p][t]` = number of samples with predicted cluster `p` and true class `t`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Contingency {
    pub counts: Vec<Vec<usize>>,
    pub n: usize,
}

impl Contingency {
    pub fn new(pred: &[usize], truth: &[usize]) -> Result<Self> {
        if pred.len() != truth.len() {
            return Err(HcnError::InvalidArgument(format!(
                "{} predicted labels vs {} true labels",
                pred.len(),
                truth.len()
            )));
        }
        if pred.is_empty() {
            return Err(HcnError::InvalidArgument("no labels to compare".into()));
        }
        let rows = pred.iter().max().unwrap() + 1;
        let cols = truth.iter().max().unwrap() + 1;
        let mut counts = vec![vec![0; cols]; rows];
        for (&p, &t) in pred.iter().zip(truth) {
            counts[p][t] += 1;
        }
        Ok(Contingency { counts, n: pred.len() })
    }

    pub fn pred_sizes(&self) -> Vec<usize> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn true_sizes(&self) -> Vec<usize> {
        let cols = self.counts[0].len();
        (0..cols).map(|t| self.counts.iter().map(|r| r[t]).sum()).collect()
    }
}

/// Best matched fraction over one-to-one cluster-to-class maps.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let c = Contingency::new(pred, truth)?;
    let k = c.counts.len().max(c.counts[0].len());
    let mut cost = DenseMatrix::zeros(k, k);
    for (p, row) in c.counts.iter().enumerate() {
        for (t, &count) in row.iter().enumerate() {
            cost.set(p, t, -(count as f64));
        }
    }
    let assignment = hungarian(&cost)?;
    let matched: f64 = assignment.iter().enumerate().map(|(p, &t)| -cost.get(p, t)).sum();
    Ok(matched / c.n as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NmiNorm {
    /// `I / √(H_pred · H_true)`
    #[default]
    Geometric,
    /// `2I / (H_pred + H_true)`
    Arithmetic,
}

fn entropy_of_counts(sizes: &[usize], n: f64) -> f64 {
    sizes
        .iter()
        .filter(|&&s| s > 0)
        .map(|&s| {
            let p = s as f64 / n;
            -p * p.ln()
        })
        .sum()
}

pub fn nmi(pred: &[usize], truth: &[usize]) -> Result<f64> {
    nmi_with(pred, truth, NmiNorm::Geometric)
}

pub fn nmi_with(pred: &[usize], truth: &[usize], norm: NmiNorm) -> Result<f64> {
    let c = Contingency::new(pred, truth)?;
    let n = c.n as f64;
    let a = c.pred_sizes();
    let b = c.true_sizes();
    let h_pred = entropy_of_counts(&a, n);
    let h_true = entropy_of_counts(&b, n);
    if h_pred == 0.0 || h_true == 0.0 {
        return Ok(if h_pred == 0.0 && h_true == 0.0 { 1.0 } else { 0.0 });
    }
    let mut mi = 0.0;
    for (p, row) in c.counts.iter().enumerate() {
        for (t, &count) in row.iter().enumerate() {
            if count > 0 {
                let nij = count as f64;
                mi += nij / n * (n * nij / (a[p] as f64 * b[t] as f64)).ln();
            }
        }
    }
    let denom = match norm {
        NmiNorm::Geometric => (h_pred * h_true).sqrt(),
        NmiNorm::Arithmetic => 0.5 * (h_pred + h_true),
    };
    Ok((mi / denom).clamp(0.0, 1.0))
}

fn pairs(k: usize) -> f64 {
    let k = k as f64;
    k * (k - 1.0) / 2.0
}

/// `(Index − Expected) / (Max − Expected)` over pair counts.
pub fn ari(pred: &[usize], truth: &[usize]) -> Result<f64> {
    let c = Contingency::new(pred, truth)?;
    let index: f64 = c.counts.iter().flatten().map(|&x| pairs(x)).sum();
    let sum_a: f64 = c.pred_sizes().into_iter().map(pairs).sum();
    let sum_b: f64 = c.true_sizes().into_iter().map(pairs).sum();
    let total = pairs(c.n);
    if total == 0.0 {
        return Ok(1.0);
    }
    let expected = sum_a * sum_b / total;
    let max = 0.5 * (sum_a + sum_b);
    if max == expected {
        // both partitions trivial (all-in-one or all-singletons) and therefore equal
        return Ok(1.0);
    }
    Ok((index - expected) / (max - expected))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_cases() {
        assert_eq!(accuracy(&[0, 1, 2, 1], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[2, 0, 1, 0], &[0, 1, 2, 1]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 1, 1, 1], &[0, 0, 1, 2]).unwrap(), 0.5);
        assert!(accuracy(&[0, 1], &[0]).is_err());
    }

    #[test]
    fn nmi_cases() {
        assert!((nmi(&[0, 0, 1, 1], &[1, 1, 0, 0]).unwrap() - 1.0).abs() < 1e-15);
        assert_eq!(nmi(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(nmi(&[0, 0, 0], &[0, 0, 0]).unwrap(), 1.0);
        assert_eq!(nmi(&[0, 0, 0], &[0, 1, 0]).unwrap(), 0.0);
        let g = nmi_with(&[0, 0, 1, 2], &[0, 1, 1, 1], NmiNorm::Geometric).unwrap();
        let a = nmi_with(&[0, 0, 1, 2], &[0, 1, 1, 1], NmiNorm::Arithmetic).unwrap();
        assert!(a > 0.0 && g > 0.0 && a != g);
    }

    #[test]
    fn ari_cases() {
        // pairs: same-same 0; a = b = 2; expected 2·2/6; max 2
        assert!((ari(&[0, 1, 0, 1], &[0, 0, 1, 1]).unwrap() + 0.5).abs() < 1e-15);
        assert_eq!(ari(&[3, 3, 5, 5], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 0, 0, 0], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(ari(&[0, 0], &[1, 1]).unwrap(), 1.0);
        assert_eq!(ari(&[0, 1, 2], &[2, 1, 0]).unwrap(), 1.0);
    }

    #[test]
    fn contingency_margins() {
        let c = Contingency::new(&[0, 2, 2, 1], &[1, 1, 0, 0]).unwrap();
        assert_eq!(c.pred_sizes(), vec![1, 1, 2]);
        assert_eq!(c.true_sizes(), vec![2, 2]);
    }
}
