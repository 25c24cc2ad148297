//! Model builders: the one-dimensional linear system with its Riccati
//! oracle, Hamiltonian adjoint systems and environment-driven regime chains.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::backward_bsde::{ClosureDriver, LipschitzProfile};
use crate::bundle::PathBundle;
use crate::coupled::{ClosureTerminal, CoupledSolution, FbsdeModel, Monotonicity};
use crate::forward_sde::{simulate_forward_full, ClosureForward, ForwardError, ForwardLipschitz};
use crate::intensity::{AdditiveKernel, Baseline, RegimeKernel};
use crate::measures::{EmpiricalMeasure, EnvironmentPath, EnvironmentSpec};
use crate::pointproc::{thin_regime, PointProcessError};
use crate::backward_bsde::BackwardSolution;
use crate::process::GridProcess;

/// Threshold above which the Riccati solution counts as blown up.
pub const RICCATI_BLOWUP: f64 = 1e6;
/// RK4 substeps per grid interval.
pub const RICCATI_SUBSTEPS: usize = 16;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ModelError {
    #[error("parameter constraint violated: {0}")]
    Constraint(&'static str),
    #[error("Riccati solution exceeds {RICCATI_BLOWUP} in magnitude at t = {t}")]
    RiccatiBlowUp { t: f64 },
    #[error("no closed-form reference: {0}")]
    NoReference(&'static str),
    #[error("intensity may vanish: {0}")]
    ZeroIntensity(&'static str),
    #[error("supplied derivative of {name} differs from finite differences (relative error {error})")]
    DerivativeMismatch { name: &'static str, error: f64 },
    #[error(transparent)]
    Forward(#[from] ForwardError),
    #[error(transparent)]
    PointProcess(#[from] PointProcessError),
}

/// Parameters of the scalar linear system
/// `dX = {b^(X - m) - Y/f2} dt + sigma dW + gamma dN~`,
/// `-dY = {f^(X - m) + b^ Y} dt - Z dW - U dN~ - dM`, `Y_T = g (X_T - m)`,
/// with `m` the mean of the environment.
#[derive(Debug, Clone)]
pub struct LqParams {
    pub b: f64,
    pub f: f64,
    pub sigma: f64,
    pub gamma: f64,
    pub f1: f64,
    pub f2: f64,
    pub g: f64,
    pub intensity: AdditiveKernel,
    pub environment: EnvironmentSpec,
}

impl LqParams {
    pub fn new(b: f64, f2: f64, f: f64, f1: f64, g: f64, sigma: f64, gamma: f64) -> Self {
        Self {
            b,
            f,
            sigma,
            gamma,
            f1,
            f2,
            g,
            intensity: AdditiveKernel::constant(1.0),
            environment: EnvironmentSpec::Constant(EmpiricalMeasure::dirac(&[0.0]).expect("one-dimensional dirac")),
        }
    }

    pub fn b_hat(&self) -> f64 {
        self.b - self.f / self.f2
    }

    pub fn f_hat(&self) -> f64 {
        self.f1 / 2.0 - self.f * self.f / self.f2
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let all = [self.b, self.f, self.sigma, self.gamma, self.f1, self.f2, self.g];
        if all.iter().any(|v| !v.is_finite()) {
            return Err(ModelError::Constraint("parameters must be finite"));
        }
        if !(self.f1 > 0.0 && self.f2 > 0.0 && self.g > 0.0) {
            return Err(ModelError::Constraint("f1 > 0, f2 > 0 and g > 0"));
        }
        if self.b == 0.0 || self.f == 0.0 || self.sigma == 0.0 || self.gamma == 0.0 {
            return Err(ModelError::Constraint("b, f, sigma and gamma must be nonzero"));
        }
        if (self.b.abs() * self.f2 - 2.0).abs() > 1e-12 {
            return Err(ModelError::Constraint("|b| f2 = 2"));
        }
        if self.f1 * self.f2 <= self.f * self.f / 2.0 + 1.0 {
            return Err(ModelError::Constraint("f1 f2 > f^2 / 2 + 1"));
        }
        self.intensity.validate().map_err(|_| ModelError::Constraint("intensity kernel is invalid"))?;
        Ok(())
    }

    /// Monotonicity constants obtained by expanding the bilinear form with
    /// `G = 1`: the form equals `-f^ dx^2 - dy^2 / f2`, so `beta1 = f^`
    /// (clamped at 0), `beta2 = 0` and `beta3 = g`.
    pub fn monotonicity(&self) -> Monotonicity {
        Monotonicity { beta1: self.f_hat().max(0.0), beta2: 0.0, beta3: self.g }
    }

    /// Jump coefficient evaluated on a mark value; the marks scale `gamma`
    /// linearly (unmarked channels carry the mark 1).
    fn jump_size(&self, mark: f64) -> f64 {
        self.gamma * mark
    }
}

fn env_mean(nu: &EmpiricalMeasure) -> f64 {
    nu.mean_coord(0)
}

fn first(v: &[f64]) -> f64 {
    v.first().copied().unwrap_or(0.0)
}

/// The linear model with `G = 1`.
pub fn build_lq_model(p: &LqParams) -> Result<FbsdeModel, ModelError> {
    p.validate()?;
    let (bh, fh, f2, sigma, g) = (p.b_hat(), p.f_hat(), p.f2, p.sigma, p.g);
    let q = p.clone();
    let forward = ClosureForward::new(1, 1)
        .drift(move |e, out| out[0] = bh * (e.x[0] - env_mean(e.env)) - first(e.y) / f2)
        .diffusion(move |_, out| out[0] = sigma)
        .jump(move |_, _, mark, out| out[0] = q.jump_size(mark))
        .with_lipschitz(ForwardLipschitz { x: bh.abs(), y: 1.0 / f2, z: 0.0, u: 0.0 });
    let driver = ClosureDriver::new(1, move |e, out| out[0] = fh * (e.x[0] - env_mean(e.env)) + bh * first(e.y))
        .with_profile(LipschitzProfile { k_y: bh * bh, k_z: 0.0, k_u: 0.0, k0: fh * fh });
    let terminal = ClosureTerminal::new(1, move |nu, x, out| out[0] = g * (x[0] - env_mean(nu)));
    Ok(FbsdeModel {
        d: 1,
        n: 1,
        k: 1,
        g: vec![1.0],
        c_g: Some(1.0),
        forward: Arc::new(forward),
        driver: Arc::new(driver),
        terminal: Arc::new(terminal),
        betas: p.monotonicity(),
        constants: None,
        case: None,
    })
}

/// `p_t` on the grid with the linear predictors `Y = p X`, `Z = p sigma`,
/// `U = p gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiReference {
    pub times: Vec<f64>,
    pub p: Vec<f64>,
    pub sigma: f64,
    pub gamma: f64,
}

impl RiccatiReference {
    pub fn y(&self, m: usize, x: f64) -> f64 {
        self.p[m] * x
    }

    pub fn z(&self, m: usize) -> f64 {
        self.p[m] * self.sigma
    }

    /// Jump integrand for a jump of size `gamma * mark`.
    pub fn u(&self, m: usize, mark: f64) -> f64 {
        self.p[m] * self.gamma * mark
    }
}

/// Right-hand side of `dp/dt = -2 b^ p + p^2 / f2 - f^`.
pub fn riccati_rhs(p: &LqParams, v: f64) -> f64 {
    -2.0 * p.b_hat() * v + v * v / p.f2 - p.f_hat()
}

/// Integrates the Riccati equation backward from `p_T = g` with RK4.
/// The environment must be deterministic with mean zero. Only finiteness
/// and `f2 > 0` are required, so parameters outside the standing window
/// (`g = 0`, `g < 0`) can be integrated too.
pub fn riccati_reference(p: &LqParams, grid: &[f64]) -> Result<RiccatiReference, ModelError> {
    let all = [p.b, p.f, p.sigma, p.gamma, p.f1, p.f2, p.g];
    if all.iter().any(|v| !v.is_finite()) || !(p.f2 > 0.0) {
        return Err(ModelError::Constraint("finite parameters with f2 > 0"));
    }
    let zero_mean = |nu: &EmpiricalMeasure| env_mean(nu).abs() < 1e-14;
    let ok = match &p.environment {
        EnvironmentSpec::Constant(nu) => zero_mean(nu),
        EnvironmentSpec::Steps { measures, .. } => measures.iter().all(zero_mean),
        _ => false,
    };
    if !ok {
        return Err(ModelError::NoReference("environment must be deterministic with mean zero"));
    }
    riccati_path(p, grid)
}

fn riccati_path(p: &LqParams, grid: &[f64]) -> Result<RiccatiReference, ModelError> {
    if grid.len() < 2 || grid.windows(2).any(|w| !(w[0] < w[1])) {
        return Err(ModelError::Constraint("grid must be increasing with at least two nodes"));
    }
    let n = grid.len() - 1;
    let mut values = vec![0.0; n + 1];
    values[n] = p.g;
    let mut v = p.g;
    for m in (0..n).rev() {
        let h = (grid[m + 1] - grid[m]) / RICCATI_SUBSTEPS as f64;
        for s in 0..RICCATI_SUBSTEPS {
            // Backward in time: dv/d(-t) = -rhs.
            let k1 = -riccati_rhs(p, v);
            let k2 = -riccati_rhs(p, v + 0.5 * h * k1);
            let k3 = -riccati_rhs(p, v + 0.5 * h * k2);
            let k4 = -riccati_rhs(p, v + h * k3);
            v += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
            if !(v.abs() <= RICCATI_BLOWUP) {
                return Err(ModelError::RiccatiBlowUp { t: grid[m + 1] - (s + 1) as f64 * h });
            }
        }
        values[m] = v;
    }
    Ok(RiccatiReference { times: grid.to_vec(), p: values, sigma: p.sigma, gamma: p.gamma })
}

/// Closed form of the Riccati solution at `t` when `f^ = 0`. With
/// `dp/dt = a p + c p^2`, `v = 1/p` solves `dv/dt = -a v - c`, so
/// `v_t = (1/g + c/a) e^{a (T - t)} - c/a` (`1/g + c (T - t)` when `a = 0`).
pub fn riccati_closed_form(p: &LqParams, horizon: f64, t: f64) -> Option<f64> {
    if p.f_hat() != 0.0 {
        return None;
    }
    let a = -2.0 * p.b_hat();
    let c = 1.0 / p.f2;
    let tau = horizon - t;
    let inv = if a == 0.0 {
        1.0 / p.g + c * tau
    } else {
        (1.0 / p.g + c / a) * libm::exp(a * tau) - c / a
    };
    Some(1.0 / inv)
}

/// Initial iterate from the linear ansatz: `X` under the feedback drift
/// `b^ X - p X / f2`, then `Y = p X`, `Z = p sigma`, `U = p gamma mark`.
pub fn riccati_guess(p: &LqParams, reference: &RiccatiReference, bundle: &PathBundle) -> Result<CoupledSolution, ModelError> {
    let (bh, f2, sigma, g) = (p.b_hat(), p.f2, p.sigma, p.gamma);
    let pv = reference.p.clone();
    let coef = ClosureForward::new(1, 1)
        .drift(move |e, out| out[0] = (bh - pv[e.step] / f2) * (e.x[0] - env_mean(e.env)))
        .diffusion(move |_, out| out[0] = sigma)
        .jump(move |_, _, mark, out| out[0] = g * mark);
    let (x, sub) = simulate_forward_full(&coef, bundle, None, None)?;
    let (pn, steps, slots) = (bundle.n_paths(), bundle.steps(), bundle.slots());
    let mut backward = BackwardSolution::zeros(pn, steps, 1, 1, slots);
    for path in 0..pn {
        for m in 0..=steps {
            backward.y.at_mut(path, m)[0] = reference.y(m, x.at(path, m)[0]);
        }
        for m in 0..steps {
            backward.cond.at_mut(path, m)[0] = reference.y(m, x.at(path, m)[0]);
            backward.z.at_mut(path, m)[0] = reference.z(m + 1);
            for s in 0..slots {
                backward.u.at_mut(path, m)[s] = reference.u(m + 1, bundle.layout.mark(s));
            }
        }
    }
    Ok(CoupledSolution { x, sub, backward })
}

/// Exact residual of the linear ansatz along a simulated forward path:
/// `Y_{m} - Y_{m+1} - (f^ X_m + b^ Y_m) dt + Z dW + U dN~`, for
/// `Y = p X`. Returns the maximum absolute residual per step.
pub fn riccati_residual(p: &LqParams, reference: &RiccatiReference, x: &GridProcess, bundle: &PathBundle) -> f64 {
    let (bh, fh) = (p.b_hat(), p.f_hat());
    let slots = bundle.slots();
    let mut worst = 0.0f64;
    for path in 0..bundle.n_paths() {
        let data = &bundle.paths[path];
        for m in 0..bundle.steps() {
            let dt = bundle.dt(m);
            let (x0, x1) = (x.at(path, m)[0], x.at(path, m + 1)[0]);
            let (y0, y1) = (reference.y(m, x0), reference.y(m + 1, x1));
            let mut r = y0 - y1 - (fh * x0 + bh * y0) * dt + reference.z(m + 1) * data.dw[m];
            for s in 0..slots {
                let i = m * slots + s;
                r += reference.u(m + 1, bundle.layout.mark(s)) * (data.dn[i] - data.comp[i]);
            }
            worst = worst.max(r.abs());
        }
    }
    worst
}

/// Relative gaps between a computed solution and the Riccati predictors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiccatiErrors {
    /// `max_t ||Y_t - p_t X_t||_2 / max_t ||Y_t||_2`.
    pub y: f64,
    /// `||Z - p sigma|| / ||p sigma||` in `L^2(dt x P)`.
    pub z: f64,
    /// `||U - p gamma mark|| / ||p gamma mark||` in `L^2(lambda dt x P)`.
    pub u: f64,
    /// `E |M_T|^2 / max_t E |Y_t|^2`.
    pub m: f64,
}

/// Compares `(Y, Z, U, M)` with `(p X, p sigma, p gamma, 0)` along the
/// solution's own `X`. Z and U on a step pair with `p` at its right node.
pub fn riccati_errors(reference: &RiccatiReference, sol: &CoupledSolution, bundle: &PathBundle) -> RiccatiErrors {
    let (pn, steps, slots) = (bundle.n_paths(), bundle.steps(), bundle.slots());
    let pf = pn as f64;
    let (mut gap_max, mut y_max) = (0.0f64, 0.0f64);
    for m in 0..=steps {
        let (mut gap, mut yy) = (0.0, 0.0);
        for p in 0..pn {
            let y = sol.backward.y.at(p, m)[0];
            let e = y - reference.y(m, sol.x.at(p, m)[0]);
            gap += e * e;
            yy += y * y;
        }
        gap_max = gap_max.max(gap / pf);
        y_max = y_max.max(yy / pf);
    }
    let (mut ez, mut nz, mut eu, mut nu) = (0.0, 0.0, 0.0, 0.0);
    let mut mt = 0.0;
    for p in 0..pn {
        let masses = &bundle.paths[p].masses;
        let mut mart = 0.0;
        for m in 0..steps {
            let dt = bundle.dt(m);
            let (z, zr) = (sol.backward.z.at(p, m)[0], reference.z(m + 1));
            ez += (z - zr) * (z - zr) * dt;
            nz += zr * zr * dt;
            let u = sol.backward.u.at(p, m);
            for s in 0..slots {
                let w = masses[m * slots + s] * dt;
                let ur = reference.u(m + 1, bundle.layout.mark(s));
                eu += (u[s] - ur) * (u[s] - ur) * w;
                nu += ur * ur * w;
            }
            mart += sol.backward.dm.at(p, m)[0];
        }
        mt += mart * mart;
    }
    let ratio = |a: f64, b: f64| if b > 0.0 { libm::sqrt(a / b) } else { libm::sqrt(a) };
    RiccatiErrors {
        y: ratio(gap_max, y_max),
        z: ratio(ez, nz),
        u: ratio(eu, nu),
        m: if y_max > 0.0 { mt / pf / y_max } else { mt / pf },
    }
}

/// Scalar coefficient `(t, nu, x) -> value` of a Hamiltonian system.
pub type ScalarFn = Arc<dyn Fn(f64, &EmpiricalMeasure, f64) -> f64 + Send + Sync>;

/// A coefficient with an optional analytic `x`-derivative.
#[derive(Clone)]
pub struct Coefficient {
    pub value: ScalarFn,
    pub derivative: Option<ScalarFn>,
}

impl Coefficient {
    pub fn new(value: impl Fn(f64, &EmpiricalMeasure, f64) -> f64 + Send + Sync + 'static) -> Self {
        Self { value: Arc::new(value), derivative: None }
    }

    pub fn with_derivative(mut self, d: impl Fn(f64, &EmpiricalMeasure, f64) -> f64 + Send + Sync + 'static) -> Self {
        self.derivative = Some(Arc::new(d));
        self
    }

    pub fn constant(c: f64) -> Self {
        Self::new(move |_, _, _| c).with_derivative(|_, _, _| 0.0)
    }

    pub fn eval(&self, t: f64, nu: &EmpiricalMeasure, x: f64) -> f64 {
        (self.value)(t, nu, x)
    }

    /// Supplied derivative, or a central difference with step `1e-6 (1 + |x|)`.
    pub fn dx(&self, t: f64, nu: &EmpiricalMeasure, x: f64) -> f64 {
        match &self.derivative {
            Some(d) => d(t, nu, x),
            None => central_difference(|v| (self.value)(t, nu, v), x),
        }
    }
}

pub fn central_difference(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    let h = 1e-6 * (1.0 + x.abs());
    (f(x + h) - f(x - h)) / (2.0 * h)
}

/// Scalar Hamiltonian `H = f + y b + z sigma + u lambda gamma - c y^2 / 2`
/// with terminal cost `g`. The quadratic term in `y` (coefficient
/// `y_quadratic`, usually 0) arises when an optimal control has been
/// substituted into the Hamiltonian.
#[derive(Clone)]
pub struct HamiltonianSpec {
    pub b: Coefficient,
    pub sigma: Coefficient,
    pub f: Coefficient,
    pub gamma: Coefficient,
    /// `g(nu, x)` passed as `(T, nu, x)`.
    pub g: Coefficient,
    pub y_quadratic: f64,
    pub betas: Monotonicity,
}

/// Point at which the Hamiltonian and its gradient are evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct HamiltonianPoint {
    pub t: f64,
    pub env: EmpiricalMeasure,
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub u: f64,
    pub lambda: f64,
}

impl HamiltonianSpec {
    pub fn value(&self, p: &HamiltonianPoint) -> f64 {
        let (t, nu, x) = (p.t, &p.env, p.x);
        self.f.eval(t, nu, x) + p.y * self.b.eval(t, nu, x) + p.z * self.sigma.eval(t, nu, x)
            + p.u * p.lambda * self.gamma.eval(t, nu, x)
            - 0.5 * self.y_quadratic * p.y * p.y
    }

    /// `(d_x H, d_y H, d_z H, d_u H)`.
    pub fn gradient(&self, p: &HamiltonianPoint) -> [f64; 4] {
        let (t, nu, x) = (p.t, &p.env, p.x);
        [
            self.f.dx(t, nu, x) + p.y * self.b.dx(t, nu, x) + p.z * self.sigma.dx(t, nu, x)
                + p.u * p.lambda * self.gamma.dx(t, nu, x),
            self.b.eval(t, nu, x) - self.y_quadratic * p.y,
            self.sigma.eval(t, nu, x),
            p.lambda * self.gamma.eval(t, nu, x),
        ]
    }

    /// Largest relative gap `|a - fd| / max(1, |fd|)` between each supplied
    /// derivative and its central difference on the given points.
    pub fn derivative_errors(&self, points: &[(f64, EmpiricalMeasure, f64)]) -> [(&'static str, f64); 5] {
        let mut out = [("b", 0.0), ("sigma", 0.0), ("f", 0.0), ("gamma", 0.0), ("g", 0.0)];
        let coefs = [&self.b, &self.sigma, &self.f, &self.gamma, &self.g];
        for (slot, c) in out.iter_mut().zip(coefs) {
            if c.derivative.is_none() {
                continue;
            }
            for (t, nu, x) in points {
                let fd = central_difference(|v| c.eval(*t, nu, v), *x);
                let err = (c.dx(*t, nu, *x) - fd).abs() / fd.abs().max(1.0);
                slot.1 = f64::max(slot.1, err);
            }
        }
        out
    }
}

/// Lower bound of the intensity of an additive kernel (environment and
/// excitation terms are non-negative, so the baseline floor is a bound).
fn intensity_floor(k: &AdditiveKernel) -> Result<f64, ModelError> {
    match &k.baseline {
        Baseline::Constant(c) => Ok(*c),
        Baseline::PiecewiseConstant { values, .. } => Ok(values.iter().copied().fold(f64::INFINITY, f64::min)),
        Baseline::Custom { .. } => Err(ModelError::ZeroIntensity("cannot bound a custom baseline from below")),
    }
}

/// Adjoint system of a scalar Hamiltonian: forward `(d_y H, d_z H,
/// d_u H / lambda)`, driver `d_x H`, terminal `d_x g`, with `G = 1`.
/// Supplied derivatives are checked against central differences at
/// `probes` (relative tolerance `1e-5`).
pub fn build_hamiltonian_fbsde(
    spec: &HamiltonianSpec,
    intensity: &AdditiveKernel,
    probes: &[(f64, EmpiricalMeasure, f64)],
) -> Result<FbsdeModel, ModelError> {
    if !(intensity_floor(intensity)? > 0.0) {
        return Err(ModelError::ZeroIntensity("baseline intensity must be positive"));
    }
    for (name, error) in spec.derivative_errors(probes) {
        if !(error <= 1e-5) {
            return Err(ModelError::DerivativeMismatch { name, error });
        }
    }
    let (b, s, gm) = (spec.b.clone(), spec.sigma.clone(), spec.gamma.clone());
    let c = spec.y_quadratic;
    // `d_u H / lambda = gamma`; the marks scale the jump linearly.
    let forward = ClosureForward::new(1, 1)
        .drift(move |e, out| out[0] = b.eval(e.t, e.env, e.x[0]) - c * first(e.y))
        .diffusion(move |e, out| out[0] = s.eval(e.t, e.env, e.x[0]))
        .jump(move |e, _, mark, out| out[0] = mark * gm.eval(e.t, e.env, e.x[0]));
    let h = spec.clone();
    let driver = ClosureDriver::new(1, move |e, out| {
        let (t, nu, x) = (e.t, e.env, e.x[0]);
        let mut v = h.f.dx(t, nu, x) + first(e.y) * h.b.dx(t, nu, x) + first(e.z) * h.sigma.dx(t, nu, x);
        let dg = h.gamma.dx(t, nu, x);
        for (u, lambda) in e.u.iter().zip(e.masses) {
            v += u * lambda * dg;
        }
        out[0] = v;
    });
    let g = spec.g.clone();
    let terminal = ClosureTerminal::new(1, move |nu, x, out| out[0] = g.dx(0.0, nu, x[0]));
    Ok(FbsdeModel {
        d: 1,
        n: 1,
        k: 1,
        g: vec![1.0],
        c_g: Some(1.0),
        forward: Arc::new(forward),
        driver: Arc::new(driver),
        terminal: Arc::new(terminal),
        betas: spec.betas,
        constants: None,
        case: None,
    })
}

/// Hamiltonian whose adjoint system is the linear model.
pub fn lq_hamiltonian(p: &LqParams) -> HamiltonianSpec {
    let (bh, fh, g, sigma, gamma) = (p.b_hat(), p.f_hat(), p.g, p.sigma, p.gamma);
    HamiltonianSpec {
        b: Coefficient::new(move |_, nu, x| bh * (x - env_mean(nu))).with_derivative(move |_, _, _| bh),
        sigma: Coefficient::constant(sigma),
        f: Coefficient::new(move |_, nu, x| 0.5 * fh * (x - env_mean(nu)) * (x - env_mean(nu)))
            .with_derivative(move |_, nu, x| fh * (x - env_mean(nu))),
        gamma: Coefficient::constant(gamma),
        g: Coefficient::new(move |_, nu, x| 0.5 * g * (x - env_mean(nu)) * (x - env_mean(nu)))
            .with_derivative(move |_, nu, x| g * (x - env_mean(nu))),
        y_quadratic: 1.0 / p.f2,
        betas: p.monotonicity(),
    }
}

/// Piecewise-constant regime path: `states[i]` holds on
/// `[times[i], times[i+1])`, with `times[0] = 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePath {
    pub horizon: f64,
    pub times: Vec<f64>,
    pub states: Vec<usize>,
}

impl RegimePath {
    pub fn state_at(&self, t: f64) -> usize {
        let k = self.times.partition_point(|&s| s <= t).saturating_sub(1);
        self.states[k]
    }

    pub fn transitions(&self) -> usize {
        self.times.len() - 1
    }

    /// Time spent in `state` over `[0, T]`.
    pub fn occupation(&self, state: usize) -> f64 {
        (0..self.states.len())
            .filter(|&i| self.states[i] == state)
            .map(|i| self.times.get(i + 1).copied().unwrap_or(self.horizon) - self.times[i])
            .sum()
    }

    /// Completed holding periods in `state` (the censored last one is
    /// excluded).
    pub fn holding_times(&self, state: usize) -> Vec<f64> {
        (0..self.states.len().saturating_sub(1))
            .filter(|&i| self.states[i] == state)
            .map(|i| self.times[i + 1] - self.times[i])
            .collect()
    }

    /// `counts[i * states + j]` transitions `i -> j`.
    pub fn transition_counts(&self, states: usize) -> Vec<usize> {
        let mut c = vec![0; states * states];
        for w in self.states.windows(2) {
            c[w[0] * states + w[1]] += 1;
        }
        c
    }

    /// Number of transitions in each `[breaks[k], breaks[k+1])`.
    pub fn jumps_per_segment(&self, breaks: &[f64]) -> Vec<usize> {
        let mut out = vec![0; breaks.len().saturating_sub(1)];
        for &t in &self.times[1..] {
            if let Some(k) = (0..out.len()).find(|&k| breaks[k] <= t && t < breaks[k + 1]) {
                out[k] += 1;
            }
        }
        out
    }
}

/// Simulates the chain by thinning a uniform candidate stream against
/// the dominating rate.
pub fn simulate_regime_chain<R: Rng + ?Sized>(
    kernel: &RegimeKernel,
    env: &EnvironmentPath,
    xi0: usize,
    horizon: f64,
    rng: &mut R,
) -> Result<RegimePath, ModelError> {
    let events = thin_regime(kernel, xi0, 0, env, horizon, rng)?;
    let mut times = Vec::with_capacity(events.len() + 1);
    let mut states = Vec::with_capacity(events.len() + 1);
    times.push(0.0);
    states.push(xi0);
    for e in events {
        times.push(e.time);
        states.push(e.cell);
    }
    Ok(RegimePath { horizon, times, states })
}
