//! Feature fusion, k-means clustering and clustering metrics.

mod hungarian;
mod kmeans;
mod metrics;

pub use hungarian::hungarian;
pub use kmeans::{kmeans, kmeans_single, KMeansRun, MAX_ITERATIONS};
pub use metrics::{accuracy, ari, nmi, nmi_with, Contingency, NmiNorm};

use serde::{Deserialize, Serialize};

use crate::data::MultiviewDataset;
use crate::error::{HcnError, Result};
use crate::model::HcnModel;
use crate::numerics::DenseMatrix;

pub const DEFAULT_RESTARTS: usize = 10;

/// Horizontal concatenation `[Z^(1), …, Z^(n_v)]`.
pub fn fuse_features(blocks: &[DenseMatrix]) -> Result<DenseMatrix> {
    let refs: Vec<&DenseMatrix> = blocks.iter().collect();
    DenseMatrix::hconcat(&refs)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusteringReport {
    pub dataset: String,
    pub acc: f64,
    pub nmi: f64,
    pub ari: f64,
    pub labels: Vec<usize>,
    pub contingency: Vec<Vec<usize>>,
    pub inertia: f64,
    pub seed: u64,
}

impl ClusteringReport {
    pub const CSV_HEADER: &'static str = "dataset,seed,acc,nmi,ari,inertia";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.dataset, self.seed, self.acc, self.nmi, self.ari, self.inertia
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Clusters `features` into as many groups as `truth` has classes and scores the result.
pub fn cluster_and_score(
    dataset: &str,
    features: &DenseMatrix,
    truth: &[usize],
    restarts: usize,
    seed: u64,
) -> Result<ClusteringReport> {
    let k = truth.iter().max().map_or(0, |m| m + 1);
    let run = kmeans(features, k, restarts, seed)?;
    let contingency = Contingency::new(&run.labels, truth)?;
    Ok(ClusteringReport {
        dataset: dataset.to_string(),
        acc: accuracy(&run.labels, truth)?,
        nmi: nmi(&run.labels, truth)?,
        ari: ari(&run.labels, truth)?,
        labels: run.labels,
        contingency: contingency.counts,
        inertia: run.inertia,
        seed,
    })
}

fn truth(dataset: &MultiviewDataset) -> Result<&[usize]> {
    dataset.labels().ok_or_else(|| HcnError::MissingLabels(dataset.name.clone()))
}

/// Encodes every view of the full dataset without augmentation, fuses and clusters.
pub fn evaluate(model: &HcnModel, dataset: &MultiviewDataset, restarts: usize, seed: u64) -> Result<ClusteringReport> {
    let truth = truth(dataset)?;
    let fused = fuse_features(&model.encode_all(dataset.views())?)?;
    cluster_and_score(&dataset.name, &fused, truth, restarts, seed)
}

/// Baseline: clusters the concatenated normalized input views directly.
pub fn evaluate_raw(dataset: &MultiviewDataset, restarts: usize, seed: u64) -> Result<ClusteringReport> {
    let truth = truth(dataset)?;
    let fused = fuse_features(dataset.views())?;
    cluster_and_score(&dataset.name, &fused, truth, restarts, seed)
}

/// Mean and population standard deviation of `values`.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}
