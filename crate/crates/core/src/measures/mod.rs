//! Finite empirical probability measures on R^d, exact Wasserstein-2
//! distances and the scalar functionals used by intensity kernels.

mod flow;
mod transport;

use alloc::sync::Arc;
use alloc::vec::Vec;
use core::fmt;

pub use flow::{EnvironmentPath, EnvironmentSpec, Side};
pub use transport::{w2_distance, w2_squared};

/// Absolute tolerance on the total mass of an empirical measure.
pub const WEIGHT_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeasureError {
    #[error("dimension mismatch: {left} vs {right}")]
    DimensionMismatch { left: usize, right: usize },
    #[error("measure has no atoms")]
    Empty,
    #[error("point buffer of length {len} is not a multiple of dimension {dim}")]
    RaggedPoints { len: usize, dim: usize },
    #[error("atom {index} has non-positive or non-finite weight {weight}")]
    BadWeight { index: usize, weight: f64 },
    #[error("weights sum to {total}, expected 1 within {WEIGHT_TOLERANCE}")]
    Unnormalized { total: f64 },
    #[error("atom {index} has a non-finite coordinate")]
    NonFinitePoint { index: usize },
    #[error("W2 not exactly computable: {0}")]
    NotExactlyComputable(&'static str),
    #[error("truncation radius must be positive, got {0}")]
    NonPositiveRadius(f64),
    #[error("coordinate {coord} out of range for dimension {dim}")]
    BadCoordinate { coord: usize, dim: usize },
    #[error("time {t} outside [0, {horizon}]")]
    TimeOutOfRange { t: f64, horizon: f64 },
    #[error("invalid environment path: {0}")]
    InvalidPath(&'static str),
}

/// A probability measure with finitely many weighted atoms.
///
/// Points are stored row-major: atom `i` occupies `points[i*dim..(i+1)*dim]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    dim: usize,
    points: Vec<f64>,
    weights: Vec<f64>,
}

impl EmpiricalMeasure {
    pub fn new(dim: usize, points: Vec<f64>, weights: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(MeasureError::RaggedPoints { len: points.len(), dim });
        }
        let count = points.len() / dim;
        if count == 0 {
            return Err(MeasureError::Empty);
        }
        if weights.len() != count {
            return Err(MeasureError::DimensionMismatch { left: count, right: weights.len() });
        }
        for (index, &w) in weights.iter().enumerate() {
            if !(w > 0.0) || !w.is_finite() {
                return Err(MeasureError::BadWeight { index, weight: w });
            }
        }
        for index in 0..count {
            if points[index * dim..(index + 1) * dim].iter().any(|x| !x.is_finite()) {
                return Err(MeasureError::NonFinitePoint { index });
            }
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > WEIGHT_TOLERANCE {
            return Err(MeasureError::Unnormalized { total });
        }
        Ok(Self { dim, points, weights })
    }

    /// Equal weights `1/count` on the given points.
    pub fn uniform(dim: usize, points: Vec<f64>) -> Result<Self, MeasureError> {
        if dim == 0 || points.len() % dim != 0 {
            return Err(MeasureError::RaggedPoints { len: points.len(), dim });
        }
        let count = points.len() / dim;
        if count == 0 {
            return Err(MeasureError::Empty);
        }
        let w = 1.0 / count as f64;
        Self::new(dim, points, alloc::vec![w; count])
    }

    pub fn dirac(point: &[f64]) -> Result<Self, MeasureError> {
        Self::new(point.len(), point.to_vec(), alloc::vec![1.0])
    }

    /// Normalises arbitrary positive weights before validating.
    pub fn from_unnormalized(
        dim: usize,
        points: Vec<f64>,
        mut weights: Vec<f64>,
    ) -> Result<Self, MeasureError> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(MeasureError::Unnormalized { total });
        }
        for w in &mut weights {
            *w /= total;
        }
        Self::new(dim, points, weights)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }

    pub fn is_empty(&self) -> bool {
        self.weights.is_empty()
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.points[i * self.dim..(i + 1) * self.dim]
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn atoms(&self) -> impl Iterator<Item = (&[f64], f64)> + '_ {
        self.points.chunks_exact(self.dim).zip(self.weights.iter().copied())
    }

    /// Mean of coordinate `i`.
    pub fn mean_coord(&self, i: usize) -> f64 {
        self.atoms().map(|(x, w)| w * x[i]).sum()
    }

    pub fn mean(&self) -> Vec<f64> {
        let mut m = alloc::vec![0.0; self.dim];
        for (x, w) in self.atoms() {
            for (mi, xi) in m.iter_mut().zip(x) {
                *mi += w * xi;
            }
        }
        m
    }

    pub fn second_moment(&self) -> f64 {
        self.atoms().map(|(x, w)| w * norm_sq(x)).sum()
    }

    /// Largest Euclidean norm among the atoms.
    pub fn support_radius(&self) -> f64 {
        self.points
            .chunks_exact(self.dim)
            .map(|x| libm::sqrt(norm_sq(x)))
            .fold(0.0, f64::max)
    }

    /// Translates every atom by `shift`.
    pub fn translated(&self, shift: &[f64]) -> Result<Self, MeasureError> {
        if shift.len() != self.dim {
            return Err(MeasureError::DimensionMismatch { left: self.dim, right: shift.len() });
        }
        let mut points = self.points.clone();
        for x in points.chunks_exact_mut(self.dim) {
            for (xi, si) in x.iter_mut().zip(shift) {
                *xi += si;
            }
        }
        Self::new(self.dim, points, self.weights.clone())
    }
}

pub(crate) fn norm_sq(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum()
}

/// A caller-supplied test function integrated against the measure.
#[derive(Clone)]
pub struct LinearFunctional {
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
    lipschitz: f64,
}

impl LinearFunctional {
    pub fn new(f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static, lipschitz: f64) -> Self {
        Self { f: Arc::new(f), lipschitz }
    }

    pub fn lipschitz(&self) -> f64 {
        self.lipschitz
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.f)(x)
    }
}

impl fmt::Debug for LinearFunctional {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("LinearFunctional").field("lipschitz", &self.lipschitz).finish()
    }
}

/// Scalar summaries nu -> R.
#[derive(Debug, Clone)]
pub enum Functional {
    /// Mean of one coordinate (coordinate 0 in one dimension).
    Mean { coord: usize },
    /// Integral of |x|^2 over the open ball of radius `radius` at the origin.
    TruncatedSecondMoment { radius: f64 },
    /// Integral of a test function with a declared Lipschitz constant.
    Linear(LinearFunctional),
}

impl Functional {
    pub fn mean() -> Self {
        Functional::Mean { coord: 0 }
    }

    pub fn truncated_second_moment(radius: f64) -> Self {
        Functional::TruncatedSecondMoment { radius }
    }

    /// Lipschitz constant with respect to W2 on measures supported in the
    /// ball of radius `support_radius`.
    ///
    /// `v_r` is only locally Lipschitz; on measures supported in `B_R(0)` the
    /// integrand `x -> |x|^2 1{|x|<r}` is not continuous at `|x| = r`, so the
    /// constant `2R` is a declared model constant rather than a theorem. It
    /// is exact when `R < r`.
    pub fn lipschitz(&self, support_radius: f64) -> f64 {
        match self {
            Functional::Mean { .. } => 1.0,
            Functional::TruncatedSecondMoment { .. } => 2.0 * support_radius,
            Functional::Linear(l) => l.lipschitz,
        }
    }
}

pub fn measure_functional(nu: &EmpiricalMeasure, kind: &Functional) -> Result<f64, MeasureError> {
    match kind {
        Functional::Mean { coord } => {
            if *coord >= nu.dim {
                return Err(MeasureError::BadCoordinate { coord: *coord, dim: nu.dim });
            }
            Ok(nu.atoms().map(|(x, w)| w * x[*coord]).sum())
        }
        Functional::TruncatedSecondMoment { radius } => {
            if !(*radius > 0.0) {
                return Err(MeasureError::NonPositiveRadius(*radius));
            }
            let r2 = radius * radius;
            Ok(nu
                .atoms()
                .map(|(x, w)| {
                    let s = norm_sq(x);
                    if s < r2 {
                        w * s
                    } else {
                        0.0
                    }
                })
                .sum())
        }
        Functional::Linear(l) => Ok(nu.atoms().map(|(x, w)| w * l.eval(x)).sum()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    #[test]
    fn rejects_bad_weights() {
        assert!(matches!(
            EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.5, 0.4]),
            Err(MeasureError::Unnormalized { .. })
        ));
        assert!(matches!(
            EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![1.0, 0.0]),
            Err(MeasureError::BadWeight { index: 1, .. })
        ));
        assert!(EmpiricalMeasure::new(1, vec![0.0, 1.0], vec![0.5, 0.5 + 5e-13]).is_ok());
    }

    #[test]
    fn truncated_second_moment_uses_open_ball() {
        let inside = EmpiricalMeasure::dirac(&[0.5]).unwrap();
        let edge = EmpiricalMeasure::dirac(&[1.0]).unwrap();
        let f = Functional::truncated_second_moment(1.0);
        assert_eq!(measure_functional(&inside, &f).unwrap(), 0.25);
        assert_eq!(measure_functional(&edge, &f).unwrap(), 0.0);
        assert!(matches!(
            measure_functional(&inside, &Functional::truncated_second_moment(0.0)),
            Err(MeasureError::NonPositiveRadius(_))
        ));
    }

    #[test]
    fn two_atom_mean() {
        let nu = EmpiricalMeasure::new(1, vec![1.0, 3.0], vec![0.5, 0.5]).unwrap();
        assert_eq!(measure_functional(&nu, &Functional::mean()).unwrap(), 2.0);
    }

    #[test]
    fn linear_functional_integrates() {
        let nu = EmpiricalMeasure::new(1, vec![1.0, 3.0], vec![0.25, 0.75]).unwrap();
        let sq = Functional::Linear(LinearFunctional::new(|x| x[0] * x[0], 6.0));
        assert_eq!(measure_functional(&nu, &sq).unwrap(), 0.25 + 0.75 * 9.0);
    }
}
