//! k-means with k-means++ seeding and Lloyd iterations.

use rand::Rng;
use rayon::prelude::*;

use crate::error::{HcnError, Result};
use crate::numerics::DenseMatrix;
use crate::rng::{stream_rng, Stream};

pub const MAX_ITERATIONS: usize = 300;

#[derive(Debug, Clone, PartialEq)]
pub struct KMeansRun {
    pub labels: Vec<usize>,
    pub centroids: DenseMatrix,
    pub inertia: f64,
    /// Inertia after each assignment step.
    pub inertia_trace: Vec<f64>,
    pub restart: usize,
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn check(x: &DenseMatrix, k: usize) -> Result<()> {
    if k < 1 || k > x.rows() {
        return Err(HcnError::InvalidArgument(format!(
            "k must lie in 1..={}, got {k}",
            x.rows()
        )));
    }
    if !x.is_finite() {
        return Err(HcnError::NonFinite("k-means input".into()));
    }
    Ok(())
}

fn plus_plus<R: Rng>(x: &DenseMatrix, k: usize, rng: &mut R) -> DenseMatrix {
    let n = x.rows();
    let mut centroids = DenseMatrix::zeros(k, x.cols());
    let first = rng.random_range(0..n);
    centroids.row_mut(0).copy_from_slice(x.row(first));
    let mut nearest: Vec<f64> = (0..n).map(|i| sq_dist(x.row(i), x.row(first))).collect();
    for c in 1..k {
        let total: f64 = nearest.iter().sum();
        let pick = if total > 0.0 {
            let mut target = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &d) in nearest.iter().enumerate() {
                if target < d {
                    chosen = i;
                    break;
                }
                target -= d;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        centroids.row_mut(c).copy_from_slice(x.row(pick));
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(sq_dist(x.row(i), x.row(pick)));
        }
    }
    centroids
}

/// Nearest centroid per row (ties to the lower index) and the summed squared distance.
fn assign(x: &DenseMatrix, centroids: &DenseMatrix, labels: &mut [usize]) -> f64 {
    let mut inertia = 0.0;
    for (i, label) in labels.iter_mut().enumerate() {
        let mut best = (0, f64::INFINITY);
        for c in 0..centroids.rows() {
            let d = sq_dist(x.row(i), centroids.row(c));
            if d < best.1 {
                best = (c, d);
            }
        }
        *label = best.0;
        inertia += best.1;
    }
    inertia
}

fn update(x: &DenseMatrix, labels: &mut [usize], centroids: &mut DenseMatrix) {
    let k = centroids.rows();
    let mut sums = DenseMatrix::zeros(k, x.cols());
    let mut sizes = vec![0usize; k];
    for (i, &l) in labels.iter().enumerate() {
        sizes[l] += 1;
        for (s, v) in sums.row_mut(l).iter_mut().zip(x.row(i)) {
            *s += v;
        }
    }
    for c in 0..k {
        if sizes[c] > 0 {
            let inv = 1.0 / sizes[c] as f64;
            for (dst, s) in centroids.row_mut(c).iter_mut().zip(sums.row(c)) {
                *dst = s * inv;
            }
        }
    }
    // an empty cluster takes over the point farthest from its own centroid
    for c in 0..k {
        if sizes[c] > 0 {
            continue;
        }
        let mut far = None;
        let mut far_d = -1.0;
        for (i, &l) in labels.iter().enumerate() {
            if sizes[l] > 1 {
                let d = sq_dist(x.row(i), centroids.row(l));
                if d > far_d {
                    far_d = d;
                    far = Some(i);
                }
            }
        }
        let Some(i) = far else { continue };
        let old = labels[i];
        labels[i] = c;
        sizes[old] -= 1;
        sizes[c] = 1;
        centroids.row_mut(c).copy_from_slice(x.row(i));
        let inv = 1.0 / sizes[old] as f64;
        let mut mean = vec![0.0; x.cols()];
        for (p, &l) in labels.iter().enumerate() {
            if l == old {
                for (m, v) in mean.iter_mut().zip(x.row(p)) {
                    *m += v * inv;
                }
            }
        }
        centroids.row_mut(old).copy_from_slice(&mean);
    }
}

/// One k-means++ seeded Lloyd run on the restart's own random stream.
pub fn kmeans_single(x: &DenseMatrix, k: usize, seed: u64, restart: usize) -> Result<KMeansRun> {
    check(x, k)?;
    let mut rng = stream_rng(seed, Stream::KMeans, restart as u64);
    let mut centroids = plus_plus(x, k, &mut rng);
    let mut labels = vec![usize::MAX; x.rows()];
    let mut next = vec![0; x.rows()];
    let mut trace = Vec::new();
    for _ in 0..MAX_ITERATIONS {
        let inertia = assign(x, &centroids, &mut next);
        trace.push(inertia);
        if next == labels {
            break;
        }
        labels.copy_from_slice(&next);
        update(x, &mut labels, &mut centroids);
        next.copy_from_slice(&labels);
    }
    let inertia = assign(x, &centroids, &mut labels);
    Ok(KMeansRun {
        labels,
        centroids,
        inertia,
        inertia_trace: trace,
        restart,
    })
}

/// Best of `restarts` runs by inertia; ties go to the lowest restart index.
pub fn kmeans(x: &DenseMatrix, k: usize, restarts: usize, seed: u64) -> Result<KMeansRun> {
    check(x, k)?;
    let runs: Vec<KMeansRun> = (0..restarts.max(1))
        .into_par_iter()
        .map(|r| kmeans_single(x, k, seed, r))
        .collect::<Result<_>>()?;
    let mut best = None::<KMeansRun>;
    for run in runs {
        if best.as_ref().is_none_or(|b| run.inertia < b.inertia) {
            best = Some(run);
        }
    }
    Ok(best.unwrap())
}
