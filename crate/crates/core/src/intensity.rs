//! Intensity kernels: additive kernels `psi0(t) + psi1(mu_{t-}) + sum psi2(t - tau)`
//! with a finite mark law, and environment-dependent regime generators.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;
use core::fmt;

use crate::math::gauss_legendre;
use crate::measures::{measure_functional, EmpiricalMeasure, EnvironmentPath, Functional, MeasureError, Side};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum IntensityError {
    #[error("missing declared bound for {0}")]
    MissingBound(&'static str),
    #[error("invalid kernel: {0}")]
    BadKernel(&'static str),
    #[error("intensity {value} is negative at t = {t}")]
    NegativeIntensity { t: f64, value: f64 },
    #[error("state {state} outside 0..{states}")]
    StateOutOfRange { state: usize, states: usize },
    #[error("rate Q[{i}][{j}] = {value} is negative or non-finite")]
    BadRate { i: usize, j: usize, value: f64 },
    #[error("row {i} has total rate {total} above the declared bound {bound}")]
    RowBoundExceeded { i: usize, total: f64, bound: f64 },
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

/// Deterministic baseline `psi0(t)`.
#[derive(Clone)]
pub enum Baseline {
    Constant(f64),
    /// `values[k]` on `[breaks[k], breaks[k+1])`, with `breaks[0] = 0`.
    PiecewiseConstant { breaks: Vec<f64>, values: Vec<f64> },
    /// Arbitrary function with an optional declared upper bound.
    Custom { f: Arc<dyn Fn(f64) -> f64 + Send + Sync>, bound: Option<f64> },
}

impl fmt::Debug for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::Constant(c) => f.debug_tuple("Constant").field(c).finish(),
            Baseline::PiecewiseConstant { breaks, values } => f
                .debug_struct("PiecewiseConstant")
                .field("breaks", breaks)
                .field("values", values)
                .finish(),
            Baseline::Custom { bound, .. } => f.debug_struct("Custom").field("bound", bound).finish(),
        }
    }
}

/// Sub-intervals per unit time for integrating a custom baseline.
const CUSTOM_QUADRATURE_DENSITY: f64 = 256.0;

impl Baseline {
    pub fn value(&self, t: f64) -> f64 {
        match self {
            Baseline::Constant(c) => *c,
            Baseline::PiecewiseConstant { breaks, values } => {
                let k = breaks.partition_point(|&b| b <= t).saturating_sub(1);
                values[k]
            }
            Baseline::Custom { f, .. } => f(t),
        }
    }

    /// Upper bound of the baseline on `(from, to]`.
    pub fn bound_on(&self, from: f64, to: f64) -> Result<f64, IntensityError> {
        match self {
            Baseline::Constant(c) => Ok(*c),
            Baseline::PiecewiseConstant { breaks, values } => {
                let lo = breaks.partition_point(|&b| b <= from).saturating_sub(1);
                let hi = breaks.partition_point(|&b| b <= to).saturating_sub(1);
                Ok(values[lo..=hi].iter().copied().fold(0.0, f64::max))
            }
            Baseline::Custom { bound, .. } => bound.ok_or(IntensityError::MissingBound("psi0")),
        }
    }

    pub fn integral(&self, a: f64, b: f64) -> f64 {
        if b <= a {
            return 0.0;
        }
        match self {
            Baseline::Constant(c) => c * (b - a),
            Baseline::PiecewiseConstant { breaks, values } => {
                let mut total = 0.0;
                for k in 0..values.len() {
                    let lo = breaks[k].max(a);
                    let hi = breaks.get(k + 1).copied().unwrap_or(f64::INFINITY).min(b);
                    if hi > lo {
                        total += values[k] * (hi - lo);
                    }
                }
                total
            }
            Baseline::Custom { f, .. } => {
                let pieces = libm::ceil((b - a) * CUSTOM_QUADRATURE_DENSITY).max(1.0) as usize;
                let h = (b - a) / pieces as f64;
                (0..pieces)
                    .map(|i| gauss_legendre(a + i as f64 * h, a + (i + 1) as f64 * h, |s| f(s)))
                    .sum()
            }
        }
    }

    fn validate(&self) -> Result<(), IntensityError> {
        match self {
            Baseline::Constant(c) if !(*c >= 0.0) || !c.is_finite() => {
                Err(IntensityError::BadKernel("baseline must be non-negative"))
            }
            Baseline::PiecewiseConstant { breaks, values } => {
                if breaks.is_empty() || breaks.len() != values.len() || breaks[0] != 0.0 {
                    return Err(IntensityError::BadKernel("piecewise baseline needs breaks starting at 0"));
                }
                if breaks.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(IntensityError::BadKernel("baseline breaks must increase"));
                }
                if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(IntensityError::BadKernel("baseline must be non-negative"));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }
}

/// Environment term `psi1(nu) = scale * F(nu)` with a declared upper bound
/// over reachable environments.
#[derive(Debug, Clone)]
pub struct EnvironmentTerm {
    pub functional: Functional,
    pub scale: f64,
    pub bound: Option<f64>,
}

impl EnvironmentTerm {
    pub fn value(&self, nu: &EmpiricalMeasure) -> Result<f64, MeasureError> {
        Ok(self.scale * measure_functional(nu, &self.functional)?)
    }

    /// Lipschitz constant in W2 for environments supported in `B_R(0)`.
    pub fn lipschitz(&self, support_radius: f64) -> f64 {
        self.scale.abs() * self.functional.lipschitz(support_radius)
    }
}

/// Non-increasing, non-negative self-excitation lag kernel `psi2`.
#[derive(Debug, Clone, PartialEq)]
pub enum LagKernel {
    /// `scale * exp(-rate * u)`.
    Exponential { scale: f64, rate: f64 },
    /// `values[k]` on `[edges[k-1], edges[k])` (with `edges[-1] = 0`), zero
    /// beyond the last edge.
    PiecewiseConstant { edges: Vec<f64>, values: Vec<f64> },
}

impl LagKernel {
    pub fn value(&self, u: f64) -> f64 {
        if u < 0.0 {
            return 0.0;
        }
        match self {
            LagKernel::Exponential { scale, rate } => scale * libm::exp(-rate * u),
            LagKernel::PiecewiseConstant { edges, values } => {
                let k = edges.partition_point(|&e| e <= u);
                values.get(k).copied().unwrap_or(0.0)
            }
        }
    }

    /// `int_0^u psi2(s) ds`.
    pub fn cumulative(&self, u: f64) -> f64 {
        if u <= 0.0 {
            return 0.0;
        }
        match self {
            LagKernel::Exponential { scale, rate } => {
                if *rate == 0.0 {
                    scale * u
                } else {
                    scale * -libm::expm1(-rate * u) / rate
                }
            }
            LagKernel::PiecewiseConstant { edges, values } => {
                let mut total = 0.0;
                let mut lo = 0.0;
                for (e, v) in edges.iter().zip(values) {
                    let hi = e.min(u);
                    if hi > lo {
                        total += v * (hi - lo);
                    }
                    if *e >= u {
                        break;
                    }
                    lo = *e;
                }
                total
            }
        }
    }

    pub fn at_zero(&self) -> f64 {
        self.value(0.0)
    }

    /// `int_0^inf psi2`, the branching ratio of a Hawkes process.
    pub fn total_mass(&self) -> f64 {
        match self {
            LagKernel::Exponential { scale, rate } => {
                if *rate > 0.0 {
                    scale / rate
                } else if *scale == 0.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            LagKernel::PiecewiseConstant { edges, .. } => self.cumulative(*edges.last().unwrap_or(&0.0)),
        }
    }

    /// Largest lag with a non-zero value, if finite.
    fn support_end(&self) -> Option<f64> {
        match self {
            LagKernel::Exponential { .. } => None,
            LagKernel::PiecewiseConstant { edges, .. } => edges.last().copied(),
        }
    }

    fn validate(&self) -> Result<(), IntensityError> {
        match self {
            LagKernel::Exponential { scale, rate } => {
                if !(*scale >= 0.0) || !(*rate >= 0.0) || !scale.is_finite() || !rate.is_finite() {
                    return Err(IntensityError::BadKernel("exponential lag kernel needs scale, rate >= 0"));
                }
            }
            LagKernel::PiecewiseConstant { edges, values } => {
                if edges.is_empty() || edges.len() != values.len() || !(edges[0] > 0.0) {
                    return Err(IntensityError::BadKernel("lag table needs positive increasing edges"));
                }
                if edges.windows(2).any(|w| !(w[0] < w[1])) {
                    return Err(IntensityError::BadKernel("lag table edges must increase"));
                }
                if values.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
                    return Err(IntensityError::BadKernel("lag kernel must be non-negative"));
                }
                if values.windows(2).any(|w| w[1] > w[0]) {
                    return Err(IntensityError::BadKernel("lag kernel must be non-increasing"));
                }
            }
        }
        Ok(())
    }
}

/// Finite mark law `Q` on cells with real mark values.
#[derive(Debug, Clone, PartialEq)]
pub struct MarkLaw {
    values: Vec<f64>,
    probs: Vec<f64>,
}

impl MarkLaw {
    pub fn new(values: Vec<f64>, probs: Vec<f64>) -> Result<Self, IntensityError> {
        if values.is_empty() || values.len() != probs.len() {
            return Err(IntensityError::BadKernel("mark law needs one probability per mark"));
        }
        if probs.iter().any(|p| !(*p >= 0.0)) {
            return Err(IntensityError::BadKernel("mark probabilities must be non-negative"));
        }
        let total: f64 = probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(IntensityError::BadKernel("mark probabilities must sum to 1"));
        }
        Ok(Self { values, probs })
    }

    /// The unmarked case: a single mark with value 1.
    pub fn unmarked() -> Self {
        Self { values: vec![1.0], probs: vec![1.0] }
    }

    pub fn cells(&self) -> usize {
        self.values.len()
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    /// Cell selected by a uniform draw `u` in `[0, 1)`.
    pub fn cell_for(&self, u: f64) -> usize {
        let mut acc = 0.0;
        for (k, p) in self.probs.iter().enumerate() {
            acc += p;
            if u < acc {
                return k;
            }
        }
        // Rounding can leave `acc` slightly below 1; fall back to the last
        // cell with positive mass.
        self.probs.iter().rposition(|&p| p > 0.0).unwrap_or(0)
    }
}

/// Additive intensity kernel `K(t, dr) = lambda_t Q(dr)`.
#[derive(Debug, Clone)]
pub struct AdditiveKernel {
    pub baseline: Baseline,
    pub environment: Option<EnvironmentTerm>,
    pub excitation: Option<LagKernel>,
    pub marks: MarkLaw,
}

impl AdditiveKernel {
    pub fn constant(rate: f64) -> Self {
        Self { baseline: Baseline::Constant(rate), environment: None, excitation: None, marks: MarkLaw::unmarked() }
    }

    pub fn hawkes(base: f64, lag: LagKernel) -> Self {
        Self { baseline: Baseline::Constant(base), environment: None, excitation: Some(lag), marks: MarkLaw::unmarked() }
    }

    pub fn validate(&self) -> Result<(), IntensityError> {
        self.baseline.validate()?;
        if let Some(lag) = &self.excitation {
            lag.validate()?;
        }
        if let Some(env) = &self.environment {
            if !env.scale.is_finite() {
                return Err(IntensityError::BadKernel("environment scale must be finite"));
            }
        }
        Ok(())
    }

    fn excitation_sum(&self, t: f64, history: &[f64], inclusive: bool) -> f64 {
        let Some(lag) = &self.excitation else { return 0.0 };
        let end = if inclusive {
            history.partition_point(|&tau| tau <= t)
        } else {
            history.partition_point(|&tau| tau < t)
        };
        let cutoff = lag.support_end();
        let mut total = 0.0;
        for &tau in history[..end].iter().rev() {
            let u = t - tau;
            if cutoff.is_some_and(|c| u >= c) {
                break;
            }
            total += lag.value(u);
        }
        total
    }

    /// `lambda_t` using events strictly before `t` and the left limit
    /// `mu_{t-}`. `history` holds this channel's event times, sorted.
    pub fn eval_intensity(&self, t: f64, history: &[f64], env: &EnvironmentPath) -> Result<f64, IntensityError> {
        let mut lambda = self.baseline.value(t);
        if let Some(term) = &self.environment {
            lambda += term.value(env.at(t, Side::Left)?)?;
        }
        Ok(lambda + self.excitation_sum(t, history, false))
    }

    /// Right limit `lambda_{t+}`: events at `t` are included and the
    /// environment is read from the right. This is the value used on the
    /// step that starts at `t`.
    pub fn intensity_after(&self, t: f64, history: &[f64], env: &EnvironmentPath) -> Result<f64, IntensityError> {
        let mut lambda = self.baseline.value(t);
        if let Some(term) = &self.environment {
            lambda += term.value(env.at(t, Side::Right)?)?;
        }
        Ok(lambda + self.excitation_sum(t, history, true))
    }

    /// Majorant of `lambda_s` on `(t_from, t_to]` for the history frozen at
    /// `t_from`, valid for every admissible environment.
    pub fn dominating_rate(&self, history: &[f64], t_from: f64, t_to: f64) -> Result<f64, IntensityError> {
        if !(t_from < t_to) {
            return Err(IntensityError::BadKernel("dominating window must have t_from < t_to"));
        }
        let mut bound = self.baseline.bound_on(t_from, t_to)?;
        if let Some(term) = &self.environment {
            bound += term.bound.ok_or(IntensityError::MissingBound("psi1"))?;
        }
        Ok(bound + self.excitation_sum(t_from, history, true))
    }

    /// `int_a^b lambda_s ds` along one realized path.
    pub fn compensator(&self, a: f64, b: f64, history: &[f64], env: &EnvironmentPath) -> Result<f64, IntensityError> {
        if b <= a {
            return Ok(0.0);
        }
        let mut total = self.baseline.integral(a, b);
        if let Some(term) = &self.environment {
            let bps = env.breakpoints();
            let first = env.index_at(a, Side::Right)?;
            let mut lo = a;
            for k in first..bps.len() {
                let hi = bps.get(k + 1).copied().unwrap_or(f64::INFINITY).min(b);
                if hi > lo {
                    total += term.value(&env.values()[k])? * (hi - lo);
                }
                if hi >= b {
                    break;
                }
                lo = hi;
            }
        }
        if let Some(lag) = &self.excitation {
            let end = history.partition_point(|&tau| tau < b);
            for &tau in &history[..end] {
                let start = a.max(tau);
                total += lag.cumulative(b - tau) - lag.cumulative(start - tau);
            }
        }
        Ok(total)
    }
}

/// Off-diagonal rate law `nu -> Q(nu)`, stored as a full row-major matrix
/// whose diagonal is ignored.
#[derive(Clone)]
pub enum RateLaw {
    Constant(Vec<f64>),
    /// `Q(nu) = base + slope * F(nu)` entrywise on the off-diagonal.
    Affine { base: Vec<f64>, slope: Vec<f64>, functional: Functional },
    Custom(Arc<dyn Fn(&EmpiricalMeasure) -> Vec<f64> + Send + Sync>),
}

impl fmt::Debug for RateLaw {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RateLaw::Constant(q) => f.debug_tuple("Constant").field(q).finish(),
            RateLaw::Affine { base, slope, functional } => f
                .debug_struct("Affine")
                .field("base", base)
                .field("slope", slope)
                .field("functional", functional)
                .finish(),
            RateLaw::Custom(_) => f.write_str("Custom"),
        }
    }
}

/// Generator of a finite-state chain driven by the environment.
///
/// States are numbered `0..states`.
#[derive(Debug, Clone)]
pub struct RegimeKernel {
    states: usize,
    law: RateLaw,
    h0: f64,
    lipschitz: Option<Vec<f64>>,
}

/// A left-closed, right-open interval `[lo, hi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Interval {
    pub lo: f64,
    pub hi: f64,
}

impl Interval {
    pub fn contains(&self, r: f64) -> bool {
        self.lo <= r && r < self.hi
    }

    pub fn len(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn is_empty(&self) -> bool {
        !(self.hi > self.lo)
    }
}

impl RegimeKernel {
    pub fn new(states: usize, law: RateLaw, h0: f64) -> Result<Self, IntensityError> {
        if states == 0 {
            return Err(IntensityError::BadKernel("at least one state required"));
        }
        if !(h0 >= 0.0) || !h0.is_finite() {
            return Err(IntensityError::BadKernel("H0 must be a finite non-negative bound"));
        }
        let n2 = states * states;
        let sizes_ok = match &law {
            RateLaw::Constant(q) => q.len() == n2,
            RateLaw::Affine { base, slope, .. } => base.len() == n2 && slope.len() == n2,
            RateLaw::Custom(_) => true,
        };
        if !sizes_ok {
            return Err(IntensityError::BadKernel("rate matrix must be states x states"));
        }
        Ok(Self { states, law, h0, lipschitz: None })
    }

    /// Declares per-entry Lipschitz constants in W2.
    pub fn with_lipschitz(mut self, lipschitz: Vec<f64>) -> Self {
        self.lipschitz = Some(lipschitz);
        self
    }

    pub fn states(&self) -> usize {
        self.states
    }

    pub fn h0(&self) -> f64 {
        self.h0
    }

    pub fn lipschitz(&self) -> Option<&[f64]> {
        self.lipschitz.as_deref()
    }

    /// Conservative generator: validated off-diagonal rates with the
    /// diagonal set to minus the row sum.
    pub fn rates(&self, nu: &EmpiricalMeasure) -> Result<Vec<f64>, IntensityError> {
        let n = self.states;
        let mut q = match &self.law {
            RateLaw::Constant(q) => q.clone(),
            RateLaw::Affine { base, slope, functional } => {
                let v = measure_functional(nu, functional)?;
                base.iter().zip(slope).map(|(b, s)| b + s * v).collect()
            }
            RateLaw::Custom(f) => {
                let q = f(nu);
                if q.len() != n * n {
                    return Err(IntensityError::BadKernel("custom rate law returned wrong size"));
                }
                q
            }
        };
        for i in 0..n {
            let mut row = 0.0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let v = q[i * n + j];
                if !(v >= 0.0) || !v.is_finite() {
                    return Err(IntensityError::BadRate { i, j, value: v });
                }
                row += v;
            }
            q[i * n + i] = -row;
        }
        Ok(q)
    }

    /// Total exit rate of each state, checked against `H0`.
    pub fn exit_rates(&self, nu: &EmpiricalMeasure) -> Result<Vec<f64>, IntensityError> {
        let q = self.rates(nu)?;
        let n = self.states;
        (0..n)
            .map(|i| {
                let total = -q[i * n + i];
                if total > self.h0 {
                    Err(IntensityError::RowBoundExceeded { i, total, bound: self.h0 })
                } else {
                    Ok(total)
                }
            })
            .collect()
    }

    /// Whether the off-diagonal support graph is strongly connected.
    pub fn is_irreducible(&self, nu: &EmpiricalMeasure) -> Result<bool, IntensityError> {
        let q = self.rates(nu)?;
        let n = self.states;
        let reach = |forward: bool| {
            let mut seen = vec![false; n];
            let mut stack = vec![0usize];
            seen[0] = true;
            while let Some(i) = stack.pop() {
                for j in 0..n {
                    let rate = if forward { q[i * n + j] } else { q[j * n + i] };
                    if i != j && rate > 0.0 && !seen[j] {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
            seen.into_iter().all(|s| s)
        };
        Ok(reach(true) && reach(false))
    }

    /// Upper end of the lexicographic layout: every interval lies in
    /// `[0, states * H0)`.
    pub fn candidate_span(&self) -> f64 {
        self.states as f64 * self.h0
    }

    /// Intervals `Gamma^{(i,j)}(nu)` for `j != i`. Off-diagonal pairs are laid
    /// out consecutively in row-major order, so the offset of `(i, j)` is the
    /// total rate of all off-diagonal pairs preceding it.
    pub fn partition_intervals(&self, nu: &EmpiricalMeasure, i: usize) -> Result<Vec<(usize, Interval)>, IntensityError> {
        let n = self.states;
        if i >= n {
            return Err(IntensityError::StateOutOfRange { state: i, states: n });
        }
        let q = self.rates(nu)?;
        let mut offset = 0.0;
        for row in 0..i {
            for j in 0..n {
                if j != row {
                    offset += q[row * n + j];
                }
            }
        }
        let mut out = Vec::with_capacity(n.saturating_sub(1));
        for j in 0..n {
            if j == i {
                continue;
            }
            let len = q[i * n + j];
            out.push((j, Interval { lo: offset, hi: offset + len }));
            offset += len;
        }
        Ok(out)
    }

    /// Displacement `j - i` if `r` lies in `Gamma^{(i,j)}(nu)`, else 0.
    pub fn q_jump(&self, nu: &EmpiricalMeasure, i: usize, r: f64) -> Result<i64, IntensityError> {
        Ok(self
            .partition_intervals(nu, i)?
            .into_iter()
            .find(|(_, iv)| iv.contains(r))
            .map_or(0, |(j, _)| j as i64 - i as i64))
    }
}

/// One channel of the driving point process.
#[derive(Debug, Clone)]
pub enum ChannelKernel {
    Additive(AdditiveKernel),
    /// Transitions of a regime chain, marked by the destination state.
    Regime { kernel: RegimeKernel, initial: usize },
}

impl ChannelKernel {
    /// Number of mark cells; regime channels have one cell per state.
    pub fn cells(&self) -> usize {
        match self {
            ChannelKernel::Additive(k) => k.marks.cells(),
            ChannelKernel::Regime { kernel, .. } => kernel.states(),
        }
    }

    pub fn mark_value(&self, cell: usize) -> f64 {
        match self {
            ChannelKernel::Additive(k) => k.marks.values()[cell],
            ChannelKernel::Regime { .. } => cell as f64,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dirac_env(x: f64) -> EnvironmentPath {
        EnvironmentPath::constant(1.0, EmpiricalMeasure::dirac(&[x]).unwrap()).unwrap()
    }

    #[test]
    fn constant_and_environment_terms() {
        let env = dirac_env(0.5);
        let k = AdditiveKernel::constant(3.0);
        assert_eq!(k.eval_intensity(0.3, &[], &env).unwrap(), 3.0);
        let k = AdditiveKernel {
            baseline: Baseline::Constant(1.0),
            environment: Some(EnvironmentTerm {
                functional: Functional::truncated_second_moment(1.0),
                scale: 1.0,
                bound: Some(1.0),
            }),
            excitation: None,
            marks: MarkLaw::unmarked(),
        };
        assert_eq!(k.eval_intensity(0.3, &[], &env).unwrap(), 1.25);
    }

    #[test]
    fn hand_sum_of_two_lags() {
        let env = dirac_env(0.0);
        let k = AdditiveKernel::hawkes(0.0, LagKernel::Exponential { scale: 1.0, rate: 1.0 });
        let got = k.eval_intensity(1.0, &[0.5, 0.7], &env).unwrap();
        let want = libm::exp(-0.5) + libm::exp(-0.3);
        assert!((got - want).abs() < 1e-15);
    }

    #[test]
    fn piecewise_lag_integrals() {
        let lag = LagKernel::PiecewiseConstant { edges: vec![1.0, 3.0], values: vec![2.0, 0.5] };
        assert_eq!(lag.value(0.0), 2.0);
        assert_eq!(lag.value(1.0), 0.5);
        assert_eq!(lag.value(3.0), 0.0);
        assert_eq!(lag.cumulative(2.0), 2.5);
        assert_eq!(lag.total_mass(), 3.0);
        let bad = LagKernel::PiecewiseConstant { edges: vec![1.0, 2.0], values: vec![0.5, 1.0] };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn majorant_requires_declared_bound() {
        let k = AdditiveKernel {
            baseline: Baseline::Constant(1.0),
            environment: Some(EnvironmentTerm { functional: Functional::mean(), scale: 1.0, bound: None }),
            excitation: None,
            marks: MarkLaw::unmarked(),
        };
        assert_eq!(k.dominating_rate(&[], 0.0, 1.0), Err(IntensityError::MissingBound("psi1")));
    }

    #[test]
    fn two_state_intervals() {
        let rk = RegimeKernel::new(2, RateLaw::Constant(vec![0.0, 1.0, 2.0, 0.0]), 2.0).unwrap();
        let nu = EmpiricalMeasure::dirac(&[0.0]).unwrap();
        assert_eq!(rk.partition_intervals(&nu, 0).unwrap(), vec![(1, Interval { lo: 0.0, hi: 1.0 })]);
        assert_eq!(rk.partition_intervals(&nu, 1).unwrap(), vec![(0, Interval { lo: 1.0, hi: 3.0 })]);
        assert_eq!(rk.q_jump(&nu, 0, 0.5).unwrap(), 1);
        assert_eq!(rk.q_jump(&nu, 1, 0.5).unwrap(), 0);
        assert_eq!(rk.q_jump(&nu, 1, 2.0).unwrap(), -1);
        assert_eq!(rk.q_jump(&nu, 0, 10.0).unwrap(), 0);
        assert!(matches!(rk.partition_intervals(&nu, 2), Err(IntensityError::StateOutOfRange { .. })));
    }
}
