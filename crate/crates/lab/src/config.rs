//! Run configuration: a TOML file naming one experiment, resolved against
//! per-kind defaults so the stored copy spells out every number used.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use fbsde_core::backward_bsde::{BasisSpec, Feature};
use fbsde_core::coupled::ContinuationConfig;
use fbsde_core::intensity::{AdditiveKernel, LagKernel};
use fbsde_core::models::LqParams;

use crate::error::LabError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    SimulatePointproc,
    SimulateRegime,
    SolveForward,
    SolveBackward,
    SolveCoupled,
    VerifyMonotonicity,
    VerifyDuality,
    ReproduceLq,
}

impl ExperimentKind {
    pub fn name(self) -> &'static str {
        match self {
            ExperimentKind::SimulatePointproc => "simulate-pointproc",
            ExperimentKind::SimulateRegime => "simulate-regime",
            ExperimentKind::SolveForward => "solve-forward",
            ExperimentKind::SolveBackward => "solve-backward",
            ExperimentKind::SolveCoupled => "solve-coupled",
            ExperimentKind::VerifyMonotonicity => "verify-monotonicity",
            ExperimentKind::VerifyDuality => "verify-duality",
            ExperimentKind::ReproduceLq => "reproduce-lq",
        }
    }

    fn default_model(self) -> ModelSpec {
        match self {
            ExperimentKind::SimulatePointproc => ModelSpec::Poisson(PoissonSpec::default()),
            ExperimentKind::SimulateRegime => ModelSpec::Regime(RegimeSpec::default()),
            ExperimentKind::SolveForward | ExperimentKind::SolveBackward => ModelSpec::Ou(OuSpec::default()),
            ExperimentKind::VerifyDuality => ModelSpec::ConstantDuality(ConstantDualitySpec::default()),
            ExperimentKind::SolveCoupled | ExperimentKind::VerifyMonotonicity | ExperimentKind::ReproduceLq => {
                ModelSpec::Lq(LqSpec::default())
            }
        }
    }

    fn accepts(self, model: &ModelSpec) -> bool {
        use ModelSpec as M;
        match self {
            ExperimentKind::SimulatePointproc => matches!(model, M::Poisson(_) | M::Hawkes(_)),
            ExperimentKind::SimulateRegime => matches!(model, M::Regime(_)),
            ExperimentKind::SolveForward | ExperimentKind::SolveBackward => matches!(model, M::Ou(_)),
            ExperimentKind::SolveCoupled => matches!(model, M::Lq(_) | M::OneDirectional(_)),
            ExperimentKind::VerifyMonotonicity | ExperimentKind::ReproduceLq => matches!(model, M::Lq(_)),
            ExperimentKind::VerifyDuality => matches!(model, M::ConstantDuality(_) | M::Lq(_)),
        }
    }
}

/// Scalar linear model with constant intensity `rate` and environment `δ_0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LqSpec {
    pub b: f64,
    pub f2: f64,
    pub f: f64,
    pub f1: f64,
    pub g: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub x0: f64,
    pub rate: f64,
}

impl Default for LqSpec {
    fn default() -> Self {
        Self { b: -2.0, f2: 1.0, f: 1.0, f1: 2.0, g: 1.0, sigma: 0.2, gamma: 0.1, x0: 1.0, rate: 1.0 }
    }
}

impl LqSpec {
    pub fn params(&self) -> LqParams {
        let mut p = LqParams::new(self.b, self.f2, self.f, self.f1, self.g, self.sigma, self.gamma);
        p.intensity = AdditiveKernel::constant(self.rate);
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PoissonSpec {
    pub rate: f64,
}

impl Default for PoissonSpec {
    fn default() -> Self {
        Self { rate: 2.0 }
    }
}

/// Self-exciting lag kernel: `scale e^{-decay u}` or a non-increasing
/// step table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum LagSpec {
    Exponential { scale: f64, decay: f64 },
    /// `values[k]` on `[edges[k-1], edges[k])`, zero past the last edge.
    Table { edges: Vec<f64>, values: Vec<f64> },
}

impl LagSpec {
    pub fn kernel(&self) -> LagKernel {
        match self {
            LagSpec::Exponential { scale, decay } => LagKernel::Exponential { scale: *scale, rate: *decay },
            LagSpec::Table { edges, values } => LagKernel::PiecewiseConstant { edges: edges.clone(), values: values.clone() },
        }
    }
}

/// Hawkes channel `base + sum psi(t - tau)`; rates are measured after
/// `burn_in`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HawkesSpec {
    pub base: f64,
    pub lag: LagSpec,
    pub burn_in: f64,
}

impl Default for HawkesSpec {
    fn default() -> Self {
        Self { base: 1.0, lag: LagSpec::Exponential { scale: 0.5, decay: 1.0 }, burn_in: 50.0 }
    }
}

/// Constant generator given by its off-diagonal rates, row-major
/// (`states x states`, diagonal ignored).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RegimeSpec {
    pub rates: Vec<f64>,
    /// Draw the initial state from the stationary law instead of `initial`.
    pub stationary_start: bool,
    pub initial: usize,
}

impl Default for RegimeSpec {
    fn default() -> Self {
        Self { rates: vec![0.0, 1.0, 2.0, 0.0], stationary_start: true, initial: 0 }
    }
}

impl RegimeSpec {
    pub fn states(&self) -> usize {
        (self.rates.len() as f64).sqrt().round() as usize
    }
}

/// `dX = kappa (theta - X) dt + sigma dW + jump dN~` with Poisson `rate`;
/// the backward experiment discounts `X_T` at `discount`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OuSpec {
    pub kappa: f64,
    pub theta: f64,
    pub sigma: f64,
    pub jump: f64,
    pub rate: f64,
    pub x0: f64,
    pub discount: f64,
}

impl Default for OuSpec {
    fn default() -> Self {
        Self { kappa: 1.0, theta: 0.5, sigma: 0.5, jump: 0.2, rate: 1.0, x0: 1.0, discount: 0.05 }
    }
}

/// A model whose forward leg ignores `(Y, Z, U)`: drift `0.5 (0.2 - x)`,
/// diffusion `0.3 + 0.05 sin x`, jump `0.1 r`, driver
/// `cos x - 0.5 y + 0.1 z`, terminal `x^2 / 2`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OneDirectionalSpec {
    pub x0: f64,
    pub rate: f64,
}

impl Default for OneDirectionalSpec {
    fn default() -> Self {
        Self { x0: 0.4, rate: 1.0 }
    }
}

/// Legs `B = 0`, `Sigma = sigma`, `F = 0`, `zeta = z W_T`, for which both
/// sides of the duality identity equal `T sigma z`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConstantDualitySpec {
    pub sigma: f64,
    pub z: f64,
}

impl Default for ConstantDualitySpec {
    fn default() -> Self {
        Self { sigma: 0.4, z: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ModelSpec {
    Lq(LqSpec),
    Poisson(PoissonSpec),
    Hawkes(HawkesSpec),
    Regime(RegimeSpec),
    Ou(OuSpec),
    OneDirectional(OneDirectionalSpec),
    ConstantDuality(ConstantDualitySpec),
}

impl ModelSpec {
    pub fn name(&self) -> &'static str {
        match self {
            ModelSpec::Lq(_) => "lq",
            ModelSpec::Poisson(_) => "poisson",
            ModelSpec::Hawkes(_) => "hawkes",
            ModelSpec::Regime(_) => "regime",
            ModelSpec::Ou(_) => "ou",
            ModelSpec::OneDirectional(_) => "one-directional",
            ModelSpec::ConstantDuality(_) => "constant-duality",
        }
    }

    /// Number of Brownian components and jump slots of the model's noise.
    fn noise_dims(&self) -> (usize, usize) {
        match self {
            ModelSpec::Lq(_) | ModelSpec::Ou(_) | ModelSpec::OneDirectional(_) => (1, 1),
            ModelSpec::ConstantDuality(_) => (1, 0),
            ModelSpec::Poisson(_) | ModelSpec::Hawkes(_) => (0, 1),
            ModelSpec::Regime(r) => (0, r.states()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SolverConfig {
    pub epsilon: f64,
    pub epsilon_min: f64,
    pub tolerance: f64,
    pub inner_tolerance: f64,
    pub max_iterations: usize,
    pub inner_max_iterations: usize,
    /// Cross-Picard sweeps per outer iteration; 0 iterates the inner loop to
    /// `inner_tolerance`.
    pub inner_sweeps: usize,
    pub divergence_window: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        let c = ContinuationConfig::new(BasisSpec::polynomial(Vec::new(), 0));
        Self {
            epsilon: c.epsilon,
            epsilon_min: c.epsilon_min,
            tolerance: c.tolerance,
            inner_tolerance: c.inner_tolerance(),
            max_iterations: c.max_iterations,
            inner_max_iterations: c.inner_max_iterations,
            inner_sweeps: c.inner_sweeps.unwrap_or(0),
            divergence_window: c.divergence_window,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckConfig {
    /// Sampled tuples for the monotonicity verifier.
    pub tuples: usize,
    /// Multiplier of the largest grid step in the duality slack.
    pub duality_slack: f64,
    /// Rescaled interarrivals pooled for the KS diagnostic.
    pub ks_events: usize,
    /// Sampled `(nu, i)` pairs for the interval-partition identities.
    pub partition_samples: usize,
    /// Also run the sign-flipped instance, which must be flagged.
    pub negative_control: bool,
}

impl Default for CheckConfig {
    fn default() -> Self {
        Self { tuples: 10_000, duality_slack: 1.0, ks_events: 1000, partition_samples: 1000, negative_control: true }
    }
}

/// Fully resolved configuration of one run.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    /// Where run directories go; not part of the canonical form, since it
    /// cannot change any result.
    #[serde(skip)]
    pub output_dir: String,
    /// Worker threads for per-path simulation loops.
    pub threads: usize,
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub basis_degree: usize,
    /// Paths written out in full.
    pub emit_paths: usize,
    pub solver: SolverConfig,
    pub checks: CheckConfig,
    pub model: ModelSpec,
}

/// The file as written by a user: everything but `kind` and `seed` may be
/// omitted.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConfigFile {
    kind: Option<ExperimentKind>,
    seed: Option<i64>,
    output_dir: Option<String>,
    threads: Option<usize>,
    horizon: Option<f64>,
    steps: Option<usize>,
    paths: Option<usize>,
    basis_degree: Option<usize>,
    emit_paths: Option<usize>,
    solver: Option<SolverFile>,
    checks: Option<CheckFile>,
    model: Option<ModelSpec>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct SolverFile {
    epsilon: Option<f64>,
    epsilon_min: Option<f64>,
    tolerance: Option<f64>,
    inner_tolerance: Option<f64>,
    max_iterations: Option<usize>,
    inner_max_iterations: Option<usize>,
    inner_sweeps: Option<usize>,
    divergence_window: Option<usize>,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckFile {
    tuples: Option<usize>,
    duality_slack: Option<f64>,
    ks_events: Option<usize>,
    partition_samples: Option<usize>,
    negative_control: Option<bool>,
}

/// Per-kind grid defaults `(horizon, steps, paths, basis_degree)`.
fn grid_defaults(kind: ExperimentKind, model: &ModelSpec) -> (f64, usize, usize, usize) {
    match (kind, model) {
        (ExperimentKind::SimulatePointproc, ModelSpec::Hawkes(_)) => (250.0, 10, 400, 1),
        (ExperimentKind::SimulatePointproc, _) => (1.0, 10, 100_000, 1),
        (ExperimentKind::SimulateRegime, _) => (50.0, 10, 10_000, 1),
        (ExperimentKind::SolveForward, _) => (1.0, 100, 10_000, 1),
        (ExperimentKind::SolveBackward, _) => (1.0, 50, 10_000, 2),
        (ExperimentKind::SolveCoupled, _) => (1.0, 50, 2000, 2),
        (ExperimentKind::VerifyMonotonicity, _) => (1.0, 50, 100, 2),
        (ExperimentKind::VerifyDuality, ModelSpec::Lq(_)) => (1.0, 50, 2000, 2),
        (ExperimentKind::VerifyDuality, _) => (1.0, 20, 10_000, 1),
        (ExperimentKind::ReproduceLq, _) => (1.0, 50, 10_000, 2),
    }
}

impl RunConfig {
    /// Parses, fills defaults and validates.
    pub fn from_toml(text: &str) -> Result<Self, LabError> {
        let file: ConfigFile = toml::from_str(text).map_err(|e| LabError::Parse(e.message().to_string()))?;
        let kind = file.kind.ok_or_else(|| LabError::config("kind", "required"))?;
        let seed = file.seed.ok_or_else(|| LabError::config("seed", "required; runs have no entropy default"))?;
        if seed < 0 {
            return Err(LabError::config("seed", "must be non-negative"));
        }
        let model = file.model.unwrap_or_else(|| kind.default_model());
        let (horizon, steps, paths, degree) = grid_defaults(kind, &model);
        let s = file.solver.unwrap_or_default();
        let d = SolverConfig::default();
        let tolerance = s.tolerance.unwrap_or(d.tolerance);
        let solver = SolverConfig {
            epsilon: s.epsilon.unwrap_or(d.epsilon),
            epsilon_min: s.epsilon_min.unwrap_or(d.epsilon_min),
            tolerance,
            inner_tolerance: s.inner_tolerance.unwrap_or(tolerance / 10.0),
            max_iterations: s.max_iterations.unwrap_or(d.max_iterations),
            inner_max_iterations: s.inner_max_iterations.unwrap_or(d.inner_max_iterations),
            inner_sweeps: s.inner_sweeps.unwrap_or(d.inner_sweeps),
            divergence_window: s.divergence_window.unwrap_or(d.divergence_window),
        };
        let c = file.checks.unwrap_or_default();
        let dc = CheckConfig::default();
        let checks = CheckConfig {
            tuples: c.tuples.unwrap_or(dc.tuples),
            duality_slack: c.duality_slack.unwrap_or(dc.duality_slack),
            ks_events: c.ks_events.unwrap_or(dc.ks_events),
            partition_samples: c.partition_samples.unwrap_or(dc.partition_samples),
            negative_control: c.negative_control.unwrap_or(dc.negative_control),
        };
        let cfg = RunConfig {
            kind,
            seed: seed as u64,
            output_dir: file.output_dir.unwrap_or_else(|| "runs".to_string()),
            threads: file.threads.unwrap_or(1),
            horizon: file.horizon.unwrap_or(horizon),
            steps: file.steps.unwrap_or(steps),
            paths: file.paths.unwrap_or(paths),
            basis_degree: file.basis_degree.unwrap_or(degree),
            emit_paths: file.emit_paths.unwrap_or(16),
            solver,
            checks,
            model,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Canonical text: every field in declaration order.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("resolved configs serialize")
    }

    /// SHA-256 of the canonical text, so comments, key order and omitted
    /// defaults do not change it.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    /// Regression basis on the forward state.
    pub fn basis(&self) -> BasisSpec {
        BasisSpec::polynomial(vec![Feature::State(0)], self.basis_degree)
    }

    /// Columns of the joint regression `[phi, phi dW, phi dN~]`.
    pub fn regression_dimension(&self) -> usize {
        let (k, slots) = self.model.noise_dims();
        self.basis().dimension(0) * (1 + k + slots)
    }

    pub fn continuation(&self) -> ContinuationConfig {
        let s = &self.solver;
        let mut c = ContinuationConfig::new(self.basis());
        c.epsilon = s.epsilon;
        c.epsilon_min = s.epsilon_min;
        c.tolerance = s.tolerance;
        c.inner_tolerance = Some(s.inner_tolerance);
        c.max_iterations = s.max_iterations;
        c.inner_max_iterations = s.inner_max_iterations;
        c.inner_sweeps = if s.inner_sweeps == 0 { None } else { Some(s.inner_sweeps) };
        c.divergence_window = s.divergence_window;
        c
    }

    pub fn validate(&self) -> Result<(), LabError> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(LabError::config(field, format!("must be positive and finite, got {v}")))
            }
        };
        if self.seed > i64::MAX as u64 {
            return Err(LabError::config("seed", "must fit in a signed 64-bit integer"));
        }
        if self.threads == 0 {
            return Err(LabError::config("threads", "must be at least 1"));
        }
        positive("horizon", self.horizon)?;
        if self.steps < 2 {
            return Err(LabError::config("steps", format!("N >= 2 required, got {}", self.steps)));
        }
        let dim = self.regression_dimension();
        if self.paths < dim.max(2) {
            return Err(LabError::config(
                "paths",
                format!("P >= basis dimension required: P = {} < {} regression columns", self.paths, dim.max(2)),
            ));
        }
        let s = &self.solver;
        if !(s.epsilon > 0.0 && s.epsilon <= 1.0) {
            return Err(LabError::config("solver.epsilon", "must lie in (0, 1]"));
        }
        if !(s.epsilon_min > 0.0 && s.epsilon_min <= s.epsilon) {
            return Err(LabError::config("solver.epsilon_min", "must lie in (0, epsilon]"));
        }
        positive("solver.tolerance", s.tolerance)?;
        positive("solver.inner_tolerance", s.inner_tolerance)?;
        if s.max_iterations == 0 || s.inner_max_iterations == 0 {
            return Err(LabError::config("solver.max_iterations", "iteration caps must be at least 1"));
        }
        if s.divergence_window == 0 {
            return Err(LabError::config("solver.divergence_window", "must be at least 1"));
        }
        if self.checks.ks_events == 0 {
            return Err(LabError::config("checks.ks_events", "must be at least 1"));
        }
        if !self.checks.duality_slack.is_finite() || self.checks.duality_slack < 0.0 {
            return Err(LabError::config("checks.duality_slack", "must be finite and non-negative"));
        }
        if !self.kind.accepts(&self.model) {
            return Err(LabError::config(
                "model.type",
                format!("{} does not run on model {}", self.kind.name(), self.model.name()),
            ));
        }
        self.validate_model()
    }

    fn validate_model(&self) -> Result<(), LabError> {
        let nonneg = |field: &str, v: f64| {
            if v >= 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(LabError::config(field, format!("must be non-negative and finite, got {v}")))
            }
        };
        match &self.model {
            ModelSpec::Lq(m) => {
                positive_rate(m.rate)?;
                if !m.x0.is_finite() {
                    return Err(LabError::config("model.x0", "must be finite"));
                }
                m.params().validate().map_err(|e| LabError::config("model", e.to_string()))
            }
            ModelSpec::Poisson(m) => nonneg("model.rate", m.rate),
            ModelSpec::Hawkes(m) => {
                nonneg("model.base", m.base)?;
                let lag = m.lag.kernel();
                AdditiveKernel::hawkes(m.base, lag.clone())
                    .validate()
                    .map_err(|e| LabError::config("model.lag", e.to_string()))?;
                if !(lag.total_mass() < 1.0) {
                    return Err(LabError::config("model.lag", "branching ratio (total lag mass) must be below 1"));
                }
                if !(m.burn_in >= 0.0 && m.burn_in < self.horizon) {
                    return Err(LabError::config("model.burn_in", "must lie in [0, horizon)"));
                }
                Ok(())
            }
            ModelSpec::Regime(m) => {
                let n = m.states();
                if n < 2 || n * n != m.rates.len() {
                    return Err(LabError::config("model.rates", "need a square matrix with at least two states"));
                }
                for (idx, &q) in m.rates.iter().enumerate() {
                    if idx / n != idx % n {
                        nonneg("model.rates", q)?;
                    }
                }
                if m.initial >= n {
                    return Err(LabError::config("model.initial", format!("state {} outside 0..{n}", m.initial)));
                }
                Ok(())
            }
            ModelSpec::Ou(m) => {
                for (field, v) in [("model.kappa", m.kappa), ("model.sigma", m.sigma), ("model.rate", m.rate)] {
                    nonneg(field, v)?;
                }
                if m.kappa == 0.0 {
                    return Err(LabError::config("model.kappa", "must be positive"));
                }
                for (field, v) in [("model.theta", m.theta), ("model.jump", m.jump), ("model.x0", m.x0), ("model.discount", m.discount)] {
                    if !v.is_finite() {
                        return Err(LabError::config(field, "must be finite"));
                    }
                }
                Ok(())
            }
            ModelSpec::OneDirectional(m) => {
                nonneg("model.rate", m.rate)?;
                if !m.x0.is_finite() {
                    return Err(LabError::config("model.x0", "must be finite"));
                }
                Ok(())
            }
            ModelSpec::ConstantDuality(m) => {
                if !m.sigma.is_finite() || !m.z.is_finite() {
                    return Err(LabError::config("model", "sigma and z must be finite"));
                }
                Ok(())
            }
        }
    }
}

fn positive_rate(rate: f64) -> Result<(), LabError> {
    if rate > 0.0 && rate.is_finite() {
        Ok(())
    } else {
        Err(LabError::config("model.rate", format!("must be positive, got {rate}")))
    }
}
