//! Small numerical helpers: normal-equation least squares, Gauss-Legendre
//! quadrature and the Kolmogorov-Smirnov test.

use alloc::vec;
use alloc::vec::Vec;


/// A column whose squared distance to the span of the earlier columns,
/// relative to its own norm, is below this floor is treated as dependent and
/// gets coefficient 0.
pub const PIVOT_FLOOR: f64 = 1e-11;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum LinalgError {
    #[error("{rows} rows cannot determine {dim} coefficients")]
    Underdetermined { rows: usize, dim: usize },
    #[error("non-finite entry in normal equations")]
    NonFinite,
}

/// Accumulated `X^T X` and `X^T Y` for a multi-response least-squares fit.
#[derive(Debug, Clone)]
pub struct NormalEquations {
    dim: usize,
    nrhs: usize,
    gram: Vec<f64>,
    cross: Vec<f64>,
    rows: usize,
}

#[derive(Debug, Clone)]
pub struct LsFit {
    /// Coefficients, `dim x nrhs` row-major.
    pub coef: Vec<f64>,
    /// Columns dropped as linearly dependent.
    pub dropped: Vec<usize>,
}

impl LsFit {
    pub fn rank_deficient(&self) -> bool {
        !self.dropped.is_empty()
    }
}

impl NormalEquations {
    pub fn new(dim: usize, nrhs: usize) -> Self {
        Self { dim, nrhs, gram: vec![0.0; dim * dim], cross: vec![0.0; dim * nrhs], rows: 0 }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn add_row(&mut self, x: &[f64], y: &[f64]) {
        let d = self.dim;
        for i in 0..d {
            let xi = x[i];
            if xi == 0.0 {
                continue;
            }
            let row = &mut self.gram[i * d + i..(i + 1) * d];
            for (g, xj) in row.iter_mut().zip(&x[i..d]) {
                *g += xi * xj;
            }
            let c = &mut self.cross[i * self.nrhs..(i + 1) * self.nrhs];
            for (cr, yr) in c.iter_mut().zip(y) {
                *cr += xi * yr;
            }
        }
        self.rows += 1;
    }

    /// Adds another partial accumulation (used for fixed-order chunked sums).
    pub fn merge(&mut self, other: &NormalEquations) {
        for (a, b) in self.gram.iter_mut().zip(&other.gram) {
            *a += b;
        }
        for (a, b) in self.cross.iter_mut().zip(&other.cross) {
            *a += b;
        }
        self.rows += other.rows;
    }

    pub fn solve(&self) -> Result<LsFit, LinalgError> {
        let d = self.dim;
        if self.rows < d {
            return Err(LinalgError::Underdetermined { rows: self.rows, dim: d });
        }
        if self.gram.iter().chain(&self.cross).any(|v| !v.is_finite()) {
            return Err(LinalgError::NonFinite);
        }
        let diag: Vec<f64> = (0..d).map(|i| self.gram[i * d + i]).collect();
        let scale: Vec<f64> = diag.iter().map(|&v| if v > 0.0 { 1.0 / libm::sqrt(v) } else { 0.0 }).collect();
        // Cholesky of the Jacobi-scaled Gram matrix, skipping dependent columns.
        let mut l = vec![0.0; d * d];
        let mut keep = vec![false; d];
        let mut dropped = Vec::new();
        for j in 0..d {
            if diag[j] <= 0.0 {
                continue;
            }
            let g = |a: usize, b: usize| {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                self.gram[lo * d + hi] * scale[a] * scale[b]
            };
            let mut pivot = g(j, j);
            for k in 0..j {
                pivot -= l[j * d + k] * l[j * d + k];
            }
            if pivot < PIVOT_FLOOR {
                dropped.push(j);
                continue;
            }
            let ljj = libm::sqrt(pivot);
            l[j * d + j] = ljj;
            keep[j] = true;
            for i in j + 1..d {
                if diag[i] <= 0.0 {
                    continue;
                }
                let mut v = g(i, j);
                for k in 0..j {
                    v -= l[i * d + k] * l[j * d + k];
                }
                l[i * d + j] = v / ljj;
            }
        }
        let mut coef = vec![0.0; d * self.nrhs];
        let mut w = vec![0.0; d];
        for r in 0..self.nrhs {
            for i in 0..d {
                if !keep[i] {
                    w[i] = 0.0;
                    continue;
                }
                let mut v = self.cross[i * self.nrhs + r] * scale[i];
                for k in 0..i {
                    v -= l[i * d + k] * w[k];
                }
                w[i] = v / l[i * d + i];
            }
            for i in (0..d).rev() {
                if !keep[i] {
                    w[i] = 0.0;
                    continue;
                }
                let mut v = w[i];
                for k in i + 1..d {
                    v -= l[k * d + i] * w[k];
                }
                w[i] = v / l[i * d + i];
            }
            for i in 0..d {
                coef[i * self.nrhs + r] = w[i] * scale[i];
            }
        }
        Ok(LsFit { coef, dropped })
    }
}

const GL_NODES: [f64; 5] =
    [-0.906_179_845_938_664, -0.538_469_310_105_683_1, 0.0, 0.538_469_310_105_683_1, 0.906_179_845_938_664];
const GL_WEIGHTS: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Five-point Gauss-Legendre rule on `[a, b]`, exact for degree <= 9.
pub fn gauss_legendre(a: f64, b: f64, mut f: impl FnMut(f64) -> f64) -> f64 {
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    GL_NODES.iter().zip(GL_WEIGHTS.iter()).map(|(x, w)| w * f(mid + half * x)).sum::<f64>() * half
}

/// Sup distance between the empirical CDF of `samples` and `cdf`.
pub fn ks_statistic(samples: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut s = samples.to_vec();
    s.sort_by(|a, b| a.total_cmp(b));
    let n = s.len() as f64;
    let mut d = 0.0f64;
    for (i, &x) in s.iter().enumerate() {
        let f = cdf(x);
        d = d.max((i as f64 + 1.0) / n - f).max(f - i as f64 / n);
    }
    d
}

/// Asymptotic Kolmogorov p-value with the small-sample correction
/// `lambda = (sqrt(n) + 0.12 + 0.11/sqrt(n)) D`.
pub fn ks_pvalue(n: usize, d: f64) -> f64 {
    if n == 0 {
        return 1.0;
    }
    let sn = libm::sqrt(n as f64);
    let lambda = (sn + 0.12 + 0.11 / sn) * d;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = libm::exp(-2.0 * kf * kf * lambda * lambda);
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Sample mean and standard error of the mean.
pub fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
    (mean, libm::sqrt(var / n as f64))
}

/// Eigenvalues of a symmetric `n x n` matrix (row-major) by cyclic Jacobi
/// rotations, in ascending order.
pub fn symmetric_eigenvalues(a: &[f64], n: usize) -> Vec<f64> {
    let mut m = a.to_vec();
    for _sweep in 0..100 {
        let off: f64 = (0..n).flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j))).map(|(i, j)| m[i * n + j] * m[i * n + j]).sum();
        let scale: f64 = m.iter().map(|v| v * v).sum();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = m[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (m[q * n + q] - m[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (m[k * n + p], m[k * n + q]);
                    m[k * n + p] = c * akp - s * akq;
                    m[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (m[p * n + k], m[q * n + k]);
                    m[p * n + k] = c * apk - s * aqk;
                    m[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut ev: Vec<f64> = (0..n).map(|i| m[i * n + i]).collect();
    ev.sort_by(|a, b| a.total_cmp(b));
    ev
}

/// Smallest singular value of an `rows x cols` matrix (row-major).
pub fn smallest_singular_value(a: &[f64], rows: usize, cols: usize) -> f64 {
    // Gram matrix of the smaller side.
    let (k, gram) = if rows <= cols {
        let mut g = vec![0.0; rows * rows];
        for i in 0..rows {
            for j in 0..rows {
                g[i * rows + j] = (0..cols).map(|c| a[i * cols + c] * a[j * cols + c]).sum();
            }
        }
        (rows, g)
    } else {
        let mut g = vec![0.0; cols * cols];
        for i in 0..cols {
            for j in 0..cols {
                g[i * cols + j] = (0..rows).map(|r| a[r * cols + i] * a[r * cols + j]).sum();
            }
        }
        (cols, g)
    };
    match symmetric_eigenvalues(&gram, k).first() {
        Some(&v) => libm::sqrt(v.max(0.0)),
        None => 0.0,
    }
}
