//! Step-function environment flows `t -> mu_t` and their generators.

use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::{w2_squared, EmpiricalMeasure, MeasureError};

/// Which one-sided value to read at a time point.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    /// `mu_t`, the value at the largest breakpoint `<= t`.
    Right,
    /// `mu_{t-}`, the value at the largest breakpoint `< t` (`mu_{0-} = mu_0`).
    Left,
}

/// Right-continuous step flow of empirical measures on `[0, T]`.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentPath {
    horizon: f64,
    breakpoints: Vec<f64>,
    values: Vec<EmpiricalMeasure>,
}

impl EnvironmentPath {
    pub fn new(
        horizon: f64,
        breakpoints: Vec<f64>,
        values: Vec<EmpiricalMeasure>,
    ) -> Result<Self, MeasureError> {
        if !(horizon > 0.0) || !horizon.is_finite() {
            return Err(MeasureError::InvalidPath("horizon must be positive and finite"));
        }
        if breakpoints.is_empty() || breakpoints.len() != values.len() {
            return Err(MeasureError::InvalidPath("need one measure per breakpoint"));
        }
        if breakpoints[0] != 0.0 {
            return Err(MeasureError::InvalidPath("first breakpoint must be 0"));
        }
        if breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(MeasureError::InvalidPath("breakpoints must be strictly increasing"));
        }
        if *breakpoints.last().unwrap() > horizon {
            return Err(MeasureError::InvalidPath("breakpoint beyond horizon"));
        }
        let dim = values[0].dim();
        if let Some(v) = values.iter().find(|v| v.dim() != dim) {
            return Err(MeasureError::DimensionMismatch { left: dim, right: v.dim() });
        }
        Ok(Self { horizon, breakpoints, values })
    }

    pub fn constant(horizon: f64, nu: EmpiricalMeasure) -> Result<Self, MeasureError> {
        Self::new(horizon, alloc::vec![0.0], alloc::vec![nu])
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn dim(&self) -> usize {
        self.values[0].dim()
    }

    pub fn breakpoints(&self) -> &[f64] {
        &self.breakpoints
    }

    pub fn values(&self) -> &[EmpiricalMeasure] {
        &self.values
    }

    pub fn initial(&self) -> &EmpiricalMeasure {
        &self.values[0]
    }

    pub fn is_constant(&self) -> bool {
        self.values.len() == 1
    }

    /// Index of the breakpoint whose value is in force at `t` from `side`.
    pub fn index_at(&self, t: f64, side: Side) -> Result<usize, MeasureError> {
        if !(0.0..=self.horizon).contains(&t) {
            return Err(MeasureError::TimeOutOfRange { t, horizon: self.horizon });
        }
        let count = match side {
            Side::Right => self.breakpoints.partition_point(|&b| b <= t),
            Side::Left => self.breakpoints.partition_point(|&b| b < t),
        };
        Ok(count.saturating_sub(1))
    }

    pub fn at(&self, t: f64, side: Side) -> Result<&EmpiricalMeasure, MeasureError> {
        self.index_at(t, side).map(|i| &self.values[i])
    }

    /// `sup_t W2(mu_t, reference)^2`, finite for every step flow.
    pub fn sup_w2_sq(&self, reference: &EmpiricalMeasure) -> Result<f64, MeasureError> {
        let mut best = 0.0f64;
        for v in &self.values {
            best = best.max(w2_squared(v, reference)?);
        }
        Ok(best)
    }
}

/// Recipe for an environment flow; random variants draw from the
/// environment substream only.
#[derive(Debug, Clone)]
pub enum EnvironmentSpec {
    Constant(EmpiricalMeasure),
    /// Deterministic steps; `times[0]` must be 0.
    Steps { times: Vec<f64>, measures: Vec<EmpiricalMeasure> },
    /// Every atom moves by the same Gaussian increment at each of `steps`
    /// equally spaced breakpoints (a common-noise shift of the whole cloud).
    CommonShock { initial: EmpiricalMeasure, steps: usize, drift: f64, volatility: f64 },
    /// Each atom follows its own discretized Ornstein-Uhlenbeck walk
    /// `x <- x - kappa x h + s sqrt(h) xi` between `steps` breakpoints.
    ParticleCloud { initial: EmpiricalMeasure, steps: usize, reversion: f64, volatility: f64 },
}

impl EnvironmentSpec {
    pub fn initial(&self) -> &EmpiricalMeasure {
        match self {
            EnvironmentSpec::Constant(nu) => nu,
            EnvironmentSpec::Steps { measures, .. } => &measures[0],
            EnvironmentSpec::CommonShock { initial, .. }
            | EnvironmentSpec::ParticleCloud { initial, .. } => initial,
        }
    }

    pub fn is_deterministic(&self) -> bool {
        match self {
            EnvironmentSpec::Constant(_) | EnvironmentSpec::Steps { .. } => true,
            EnvironmentSpec::CommonShock { volatility, .. }
            | EnvironmentSpec::ParticleCloud { volatility, .. } => *volatility == 0.0,
        }
    }

    pub fn sample<R: Rng + ?Sized>(
        &self,
        horizon: f64,
        rng: &mut R,
    ) -> Result<EnvironmentPath, MeasureError> {
        match self {
            EnvironmentSpec::Constant(nu) => EnvironmentPath::constant(horizon, nu.clone()),
            EnvironmentSpec::Steps { times, measures } => {
                EnvironmentPath::new(horizon, times.clone(), measures.clone())
            }
            EnvironmentSpec::CommonShock { initial, steps, drift, volatility } => {
                let (times, h) = uniform_breaks(horizon, *steps)?;
                let mut values = Vec::with_capacity(times.len());
                values.push(initial.clone());
                let dim = initial.dim();
                for _ in 1..times.len() {
                    let prev = values.last().unwrap();
                    let shift: Vec<f64> = (0..dim)
                        .map(|_| {
                            let z: f64 = StandardNormal.sample(rng);
                            drift * h + volatility * libm::sqrt(h) * z
                        })
                        .collect();
                    let next = prev.translated(&shift)?;
                    values.push(next);
                }
                EnvironmentPath::new(horizon, times, values)
            }
            EnvironmentSpec::ParticleCloud { initial, steps, reversion, volatility } => {
                let (times, h) = uniform_breaks(horizon, *steps)?;
                let mut values = Vec::with_capacity(times.len());
                values.push(initial.clone());
                for _ in 1..times.len() {
                    let prev = values.last().unwrap();
                    let points: Vec<f64> = prev
                        .points()
                        .iter()
                        .map(|&x| {
                            let z: f64 = StandardNormal.sample(rng);
                            x - reversion * x * h + volatility * libm::sqrt(h) * z
                        })
                        .collect();
                    values.push(EmpiricalMeasure::new(prev.dim(), points, prev.weights().to_vec())?);
                }
                EnvironmentPath::new(horizon, times, values)
            }
        }
    }
}

fn uniform_breaks(horizon: f64, steps: usize) -> Result<(Vec<f64>, f64), MeasureError> {
    if steps == 0 {
        return Err(MeasureError::InvalidPath("random environment needs at least one step"));
    }
    let h = horizon / steps as f64;
    Ok(((0..steps).map(|i| i as f64 * h).collect(), h))
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn two_step() -> EnvironmentPath {
        let a = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        let b = EmpiricalMeasure::dirac(&[1.0]).unwrap();
        EnvironmentPath::new(1.0, vec![0.0, 0.5], vec![a, b]).unwrap()
    }

    #[test]
    fn cadlag_evaluation() {
        let env = two_step();
        assert_eq!(env.at(0.5, Side::Left).unwrap().point(0), &[0.0]);
        assert_eq!(env.at(0.5, Side::Right).unwrap().point(0), &[1.0]);
        assert_eq!(env.at(0.0, Side::Left).unwrap().point(0), &[0.0]);
        assert_eq!(env.at(1.0, Side::Left).unwrap().point(0), &[1.0]);
        assert!(matches!(env.at(1.5, Side::Right), Err(MeasureError::TimeOutOfRange { .. })));
    }

    #[test]
    fn rejects_unsorted_breakpoints() {
        let a = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        let r = EnvironmentPath::new(1.0, vec![0.0, 0.5, 0.5], vec![a.clone(), a.clone(), a]);
        assert!(r.is_err());
    }

    #[test]
    fn sup_bound_is_max_over_values() {
        let env = two_step();
        let reference = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        assert_eq!(env.sup_w2_sq(&reference).unwrap(), 1.0);
    }
}
