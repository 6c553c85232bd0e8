//! Minimum-cost assignment on a square cost matrix (shortest augmenting
//! paths with row/column potentials, O(K³)).

use crate::error::{HcnError, Result};
use crate::numerics::DenseMatrix;

/// Returns `σ` with `σ[i]` the column assigned to row `i`, minimizing `Σ cost[i][σ(i)]`.
pub fn hungarian(cost: &DenseMatrix) -> Result<Vec<usize>> {
    let (n, m) = cost.shape();
    if n != m {
        return Err(HcnError::ShapeMismatch {
            op: "hungarian",
            left: (n, m),
            right: (m, n),
        });
    }
    if !cost.is_finite() {
        return Err(HcnError::NonFinite("assignment cost".into()));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    // 1-based arrays; index 0 is the virtual root of each augmenting search.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut min_to = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let reduced = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if reduced < min_to[j] {
                    min_to[j] = reduced;
                    way[j] = j0;
                }
                if min_to[j] < delta {
                    delta = min_to[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    min_to[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    Ok(assignment)
}
