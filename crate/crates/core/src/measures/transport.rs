use alloc::vec;
use alloc::vec::Vec;

use super::{EmpiricalMeasure, MeasureError, WEIGHT_TOLERANCE};

/// Largest atom count for which the assignment solver is used in d > 1.
pub const MAX_ASSIGNMENT_ATOMS: usize = 64;

/// Exact W2 distance.
///
/// One dimension uses the monotone coupling for arbitrary weights. In higher
/// dimension the distance is exact when one side is a single atom, or when
/// both sides are uniform with the same atom count (at most
/// [`MAX_ASSIGNMENT_ATOMS`]), where an optimal permutation exists.
pub fn w2_distance(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64, MeasureError> {
    w2_squared(a, b).map(libm::sqrt)
}

pub fn w2_squared(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> Result<f64, MeasureError> {
    if a.dim() != b.dim() {
        return Err(MeasureError::DimensionMismatch { left: a.dim(), right: b.dim() });
    }
    if a.dim() == 1 {
        return Ok(quantile_cost(a, b));
    }
    if a.len() == 1 {
        return Ok(dirac_cost(a.point(0), b));
    }
    if b.len() == 1 {
        return Ok(dirac_cost(b.point(0), a));
    }
    if a.len() != b.len() || !is_uniform(a) || !is_uniform(b) {
        return Err(MeasureError::NotExactlyComputable(
            "dimension > 1 requires equal-count uniform weights",
        ));
    }
    if a.len() > MAX_ASSIGNMENT_ATOMS {
        return Err(MeasureError::NotExactlyComputable("too many atoms for exact assignment"));
    }
    let n = a.len();
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            cost[i * n + j] = sq_dist(a.point(i), b.point(j));
        }
    }
    let perm = assignment(&cost, n);
    let total: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    Ok(total / n as f64)
}

fn sq_dist(x: &[f64], y: &[f64]) -> f64 {
    x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum()
}

fn dirac_cost(x: &[f64], nu: &EmpiricalMeasure) -> f64 {
    nu.atoms().map(|(y, w)| w * sq_dist(x, y)).sum()
}

fn is_uniform(nu: &EmpiricalMeasure) -> bool {
    let w = 1.0 / nu.len() as f64;
    nu.weights().iter().all(|&v| (v - w).abs() <= WEIGHT_TOLERANCE)
}

fn sorted_atoms(nu: &EmpiricalMeasure) -> Vec<(f64, f64)> {
    let mut v: Vec<(f64, f64)> = nu.atoms().map(|(x, w)| (x[0], w)).collect();
    v.sort_by(|p, q| p.0.total_cmp(&q.0));
    v
}

/// Cost of the monotone coupling: sweep both sorted atom lists, moving the
/// overlap of the current cumulative-weight cells.
fn quantile_cost(a: &EmpiricalMeasure, b: &EmpiricalMeasure) -> f64 {
    let xa = sorted_atoms(a);
    let xb = sorted_atoms(b);
    let (mut i, mut j) = (0, 0);
    let (mut ra, mut rb) = (xa[0].1, xb[0].1);
    let mut total = 0.0;
    loop {
        let m = ra.min(rb);
        let d = xa[i].0 - xb[j].0;
        total += m * d * d;
        ra -= m;
        rb -= m;
        // Advance whichever side was exhausted; rounding leaves tiny residue
        // on the other side, which is dropped once a list ends.
        if ra <= rb {
            i += 1;
            if i == xa.len() {
                break;
            }
            ra += xa[i].1;
        } else {
            j += 1;
            if j == xb.len() {
                break;
            }
            rb += xb[j].1;
        }
    }
    total
}

/// Minimum-cost perfect assignment on a dense `n x n` cost matrix using the
/// shortest augmenting path method with potentials. Returns `perm[row] = col`.
pub(crate) fn assignment(cost: &[f64], n: usize) -> Vec<usize> {
    let inf = f64::INFINITY;
    // 1-based arrays with a virtual column 0.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
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
    let mut perm = vec![0; n];
    for j in 1..=n {
        perm[owner[j] - 1] = j - 1;
    }
    perm
}
