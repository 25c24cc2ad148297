//! Fully coupled forward-backward systems: the G-monotonicity verifier, the
//! Itô duality check, the decoupled base systems and the continuation solver.
//!
//! Case `d < n` freezes the forward leg into the backward one through `G X`;
//! case `d >= n` feeds `G^T (Y, Z, U)` back into the forward leg. The solver
//! walks `alpha` from 0 to 1; at each `alpha_0` it iterates the map
//! `w -> S_{alpha_0}(eps * shift(w))`, where `S_{alpha_0}` solves the
//! `alpha_0`-system with the given offsets by cross-Picard sweeps (forward
//! with frozen `(Y, Z, U)`, then backward with the new `X`).

use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use crate::backward_bsde::{lsmc_solve, BackwardError, BackwardSolution, BasisSpec, Driver};
use crate::bundle::PathBundle;
use crate::forward_sde::{
    simulate_forward_full, ForwardCoefficients, ForwardError, FrozenInputs, PathOffsets, SubPath,
};
use crate::math::{mean_and_se, smallest_singular_value};
use crate::measures::{EmpiricalMeasure, Side};
use crate::pointproc::jump_inner;
use crate::process::{EvalPoint, GridProcess};
use crate::rng::{substream, Purpose};

/// Smallest singular value below which `G` counts as rank deficient.
pub const RANK_FLOOR: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum CoupledError {
    #[error("invalid model: {0}")]
    Model(&'static str),
    #[error("G is rank deficient (smallest singular value {0})")]
    RankDeficient(f64),
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("forward solve failed: {0}")]
    Forward(#[from] ForwardError),
    #[error("backward solve failed: {0}")]
    Backward(#[from] BackwardError),
    #[error("continuation step underflow at alpha = {alpha}: eps = {epsilon} < eps_min")]
    StepUnderflow { alpha: f64, epsilon: f64 },
    #[error("inner Picard iteration at alpha = {alpha} did not converge in {iterations} sweeps (last distance {distance})")]
    InnerDivergence { alpha: f64, iterations: usize, distance: f64 },
}

/// Terminal map `g(nu, x)`; `nu` is the environment at `T-`.
pub trait Terminal: Send + Sync {
    fn output_dim(&self) -> usize;
    fn eval(&self, env: &EmpiricalMeasure, x: &[f64], out: &mut [f64]);
}

type TerminalFn = dyn Fn(&EmpiricalMeasure, &[f64], &mut [f64]) + Send + Sync;

#[derive(Clone)]
pub struct ClosureTerminal {
    n: usize,
    f: Arc<TerminalFn>,
}

impl ClosureTerminal {
    pub fn new(n: usize, f: impl Fn(&EmpiricalMeasure, &[f64], &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { n, f: Arc::new(f) }
    }
}

impl Terminal for ClosureTerminal {
    fn output_dim(&self) -> usize {
        self.n
    }

    fn eval(&self, env: &EmpiricalMeasure, x: &[f64], out: &mut [f64]) {
        (self.f)(env, x, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Monotonicity {
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

/// Which decoupled base system the continuation starts from.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Case {
    /// Forward leg is pure offsets; the backward leg sees `G X`.
    DLtN,
    /// Backward leg is pure offsets; the forward leg sees `G^T (Y, Z, U)`.
    DGeN,
}

/// Constants entering the theoretical continuation step `1 / (8 c)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepConstants {
    /// Joint Lipschitz constant of the coefficients.
    pub c_k: f64,
    /// A priori constant of the backward leg.
    pub c_fgg: f64,
}

#[derive(Clone)]
pub struct FbsdeModel {
    pub d: usize,
    pub n: usize,
    pub k: usize,
    /// `n x d`, row-major.
    pub g: Vec<f64>,
    /// `(x . G x) = c_G |x|^2` when `d = n`.
    pub c_g: Option<f64>,
    pub forward: Arc<dyn ForwardCoefficients>,
    pub driver: Arc<dyn Driver>,
    pub terminal: Arc<dyn Terminal>,
    pub betas: Monotonicity,
    pub constants: Option<StepConstants>,
    /// Overrides the case dispatch.
    pub case: Option<Case>,
}

impl FbsdeModel {
    /// Checks dimensions and the rank of `G`; returns warnings for declared
    /// constants that fall outside the contraction hypotheses.
    pub fn validate(&self) -> Result<Vec<String>, CoupledError> {
        if self.forward.state_dim() != self.d || self.forward.brownian_dim() != self.k {
            return Err(CoupledError::Model("forward coefficients have the wrong dimensions"));
        }
        if self.driver.output_dim() != self.n || self.terminal.output_dim() != self.n {
            return Err(CoupledError::Model("driver or terminal has the wrong output dimension"));
        }
        if self.g.len() != self.n * self.d {
            return Err(CoupledError::Model("G must be n x d"));
        }
        let b = self.betas;
        if !(b.beta1 >= 0.0 && b.beta2 >= 0.0 && b.beta3 >= 0.0) {
            return Err(CoupledError::Model("monotonicity constants must be non-negative"));
        }
        let smin = smallest_singular_value(&self.g, self.n, self.d);
        if smin <= RANK_FLOOR {
            return Err(CoupledError::RankDeficient(smin));
        }
        let mut warnings = Vec::new();
        if b.beta1 + b.beta2 <= 0.0 {
            warnings.push(String::from("beta1 + beta2 > 0 does not hold"));
        }
        if b.beta2 + b.beta3 <= 0.0 {
            warnings.push(String::from("beta2 + beta3 > 0 does not hold"));
        }
        if self.d < self.n && !(b.beta1 > 0.0 && b.beta3 > 0.0) {
            warnings.push(String::from("d < n expects beta1 > 0 and beta3 > 0"));
        }
        if self.d >= self.n && b.beta2 <= 0.0 {
            warnings.push(String::from("d >= n expects beta2 > 0"));
        }
        Ok(warnings)
    }

    pub fn case(&self) -> Case {
        if let Some(c) = self.case {
            return c;
        }
        match self.d.cmp(&self.n) {
            core::cmp::Ordering::Less => Case::DLtN,
            core::cmp::Ordering::Greater => Case::DGeN,
            core::cmp::Ordering::Equal if self.betas.beta2 > 0.0 => Case::DGeN,
            core::cmp::Ordering::Equal => Case::DLtN,
        }
    }

    /// `G x`.
    pub fn g_x(&self, x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate().take(self.n) {
            *o = (0..self.d).map(|i| self.g[j * self.d + i] * x[i]).sum();
        }
    }

    /// `G^T y` for a stack of `cols`-column blocks: `y` is `n x cols`,
    /// the output `d x cols`.
    pub fn gt_y(&self, y: &[f64], cols: usize, out: &mut [f64]) {
        for i in 0..self.d {
            for c in 0..cols {
                out[i * cols + c] = (0..self.n).map(|j| self.g[j * self.d + i] * y[j * cols + c]).sum();
            }
        }
    }

    /// `out += w G x`.
    pub fn add_g_x(&self, w: f64, x: &[f64], out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate().take(self.n) {
            *o += w * (0..self.d).map(|i| self.g[j * self.d + i] * x[i]).sum::<f64>();
        }
    }

    /// `out += w G^T y` on `cols`-column blocks.
    pub fn add_gt_y(&self, w: f64, y: &[f64], cols: usize, out: &mut [f64]) {
        for i in 0..self.d {
            for c in 0..cols {
                out[i * cols + c] += w * (0..self.n).map(|j| self.g[j * self.d + i] * y[j * cols + c]).sum::<f64>();
            }
        }
    }

    /// Theoretical step `1 / (8 c)` when the constants are declared and the
    /// step is positive.
    pub fn theoretical_epsilon(&self) -> Option<f64> {
        let c = self.constants?;
        let c_g = self.c_g?;
        let b = self.betas;
        let m = 1.0f64.min(b.beta1).min(b.beta3);
        if m <= 0.0 || c_g <= 0.0 {
            return None;
        }
        let cbar = (c.c_fgg + 1.0) * c.c_k.max(c_g).max(b.beta1 * c_g) / (2.0 * c_g * m);
        Some(1.0 / (8.0 * cbar))
    }
}

/// One point `(x, y, z, u)`; `z` is `n x k`, `u` slot-major `n` per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct StatePoint {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub z: Vec<f64>,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityTuple {
    pub t: f64,
    pub env: EmpiricalMeasure,
    pub masses: Vec<f64>,
    /// Mark of each slot (1 for unmarked channels).
    pub marks: Vec<f64>,
    pub regime: Vec<usize>,
    pub p: StatePoint,
    pub q: StatePoint,
}

/// Box sampler for monotonicity tuples.
#[derive(Debug, Clone)]
pub struct TupleSampler {
    pub horizon: f64,
    pub envs: Vec<EmpiricalMeasure>,
    pub masses: Vec<Vec<f64>>,
    pub regimes: Vec<Vec<usize>>,
    /// Slot marks; empty means every slot carries the mark 1.
    pub marks: Vec<f64>,
    pub radius: f64,
}

impl TupleSampler {
    pub fn sample(&self, model: &FbsdeModel, count: usize, seed: u64) -> Vec<MonotonicityTuple> {
        let mut rng = substream(seed, 0, Purpose::Probe);
        let slots = self.masses.first().map_or(0, |m| m.len());
        let r = self.radius;
        let point = |rng: &mut rand_chacha::ChaCha12Rng| StatePoint {
            x: (0..model.d).map(|_| rng.random_range(-r..r)).collect(),
            y: (0..model.n).map(|_| rng.random_range(-r..r)).collect(),
            z: (0..model.n * model.k).map(|_| rng.random_range(-r..r)).collect(),
            u: (0..model.n * slots).map(|_| rng.random_range(-r..r)).collect(),
        };
        (0..count)
            .map(|_| {
                let t = rng.random_range(0.0..self.horizon);
                let env = self.envs[rng.random_range(0..self.envs.len())].clone();
                let masses = self.masses[rng.random_range(0..self.masses.len())].clone();
                let regime = if self.regimes.is_empty() {
                    Vec::new()
                } else {
                    self.regimes[rng.random_range(0..self.regimes.len())].clone()
                };
                let p = point(&mut rng);
                let q = point(&mut rng);
                let marks = if self.marks.is_empty() { vec![1.0; slots] } else { self.marks.clone() };
                MonotonicityTuple { t, env, masses, marks, regime, p, q }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub tuples: usize,
    pub violations: usize,
    pub terminal_violations: usize,
    /// Minimum of `rhs - lhs` over the operator inequality.
    pub worst_slack: f64,
    /// Minimum of `delta g . G delta x - beta3 |G delta x|^2`.
    pub worst_terminal_slack: f64,
    /// Tuple with the most negative slack, if any violates.
    pub violating: Option<MonotonicityTuple>,
}

impl MonotonicityReport {
    pub fn holds(&self) -> bool {
        self.violations == 0 && self.terminal_violations == 0
    }
}

struct Coefs {
    b: Vec<f64>,
    sigma: Vec<f64>,
    gamma: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
}

fn coefs_at(model: &FbsdeModel, tu: &MonotonicityTuple, s: &StatePoint) -> Coefs {
    let slots = tu.masses.len();
    let (d, n, k) = (model.d, model.n, model.k);
    let p = EvalPoint {
        t: tu.t,
        path: 0,
        step: 0,
        env: &tu.env,
        masses: &tu.masses,
        regime: &tu.regime,
        x: &s.x,
        y: &s.y,
        z: &s.z,
        u: &s.u,
    };
    let mut c = Coefs { b: vec![0.0; d], sigma: vec![0.0; d * k], gamma: vec![0.0; d * slots], f: vec![0.0; n], g: vec![0.0; n] };
    model.forward.drift(&p, &mut c.b);
    model.forward.diffusion(&p, &mut c.sigma);
    let mut g = vec![0.0; d];
    for sl in 0..slots {
        model.forward.jump(&p, sl, tu.marks.get(sl).copied().unwrap_or(1.0), &mut g);
        c.gamma[sl * d..(sl + 1) * d].copy_from_slice(&g);
    }
    model.driver.eval(&p, &mut c.f);
    model.terminal.eval(&tu.env, &s.x, &mut c.g);
    c
}

fn diff(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x - y).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Slack of the operator and terminal inequalities at one tuple
/// (non-negative when they hold).
pub fn monotonicity_slack(model: &FbsdeModel, tu: &MonotonicityTuple) -> (f64, f64) {
    let (d, n, k) = (model.d, model.n, model.k);
    let slots = tu.masses.len();
    let cp = coefs_at(model, tu, &tu.p);
    let cq = coefs_at(model, tu, &tu.q);
    let (dx, dy, dz, du) = (diff(&tu.p.x, &tu.q.x), diff(&tu.p.y, &tu.q.y), diff(&tu.p.z, &tu.q.z), diff(&tu.p.u, &tu.q.u));
    let (db, dsig, dgam, df, dg) =
        (diff(&cp.b, &cq.b), diff(&cp.sigma, &cq.sigma), diff(&cp.gamma, &cq.gamma), diff(&cp.f, &cq.f), diff(&cp.g, &cq.g));
    // delta A . delta(x, y, z, u), with A = (-G^T f, G b, G sigma, G gamma).
    let mut gt_df = vec![0.0; d];
    model.gt_y(&df, 1, &mut gt_df);
    let mut g_db = vec![0.0; n];
    model.g_x(&db, &mut g_db);
    let mut g_dsig = vec![0.0; n * k];
    for c in 0..k {
        let col: Vec<f64> = (0..d).map(|r| dsig[r * k + c]).collect();
        let mut out = vec![0.0; n];
        model.g_x(&col, &mut out);
        for j in 0..n {
            g_dsig[j * k + c] = out[j];
        }
    }
    let mut g_dgam = vec![0.0; n * slots];
    for s in 0..slots {
        model.g_x(&dgam[s * d..(s + 1) * d], &mut g_dgam[s * n..(s + 1) * n]);
    }
    let lhs = -dot(&gt_df, &dx) + dot(&g_db, &dy) + dot(&g_dsig, &dz) + jump_inner(&g_dgam, &du, n, &tu.masses).unwrap_or(f64::NAN);
    let mut g_dx = vec![0.0; n];
    model.g_x(&dx, &mut g_dx);
    let mut gt_dy = vec![0.0; d];
    model.gt_y(&dy, 1, &mut gt_dy);
    let mut gt_dz = vec![0.0; d * k];
    model.gt_y(&dz, k, &mut gt_dz);
    let mut gt_du = vec![0.0; d * slots];
    for s in 0..slots {
        let mut o = vec![0.0; d];
        model.gt_y(&du[s * n..(s + 1) * n], 1, &mut o);
        gt_du[s * d..(s + 1) * d].copy_from_slice(&o);
    }
    let b = model.betas;
    let rhs = -b.beta1 * dot(&g_dx, &g_dx)
        - b.beta2 * (dot(&gt_dy, &gt_dy) + dot(&gt_dz, &gt_dz) + jump_inner(&gt_du, &gt_du, d, &tu.masses).unwrap_or(f64::NAN));
    let term = dot(&dg, &g_dx) - b.beta3 * dot(&g_dx, &g_dx);
    (rhs - lhs, term)
}

/// Evaluates both inequalities on every tuple. A negative slack beyond
/// relative rounding counts as a violation.
pub fn check_g_monotonicity(model: &FbsdeModel, tuples: &[MonotonicityTuple]) -> MonotonicityReport {
    let mut r = MonotonicityReport {
        tuples: tuples.len(),
        violations: 0,
        terminal_violations: 0,
        worst_slack: f64::INFINITY,
        worst_terminal_slack: f64::INFINITY,
        violating: None,
    };
    let mut worst_violation = 0.0;
    for tu in tuples {
        let (s, t) = monotonicity_slack(model, tu);
        let scale = 1.0 + sq_norm(&tu.p) + sq_norm(&tu.q);
        let tol = 1e-10 * scale;
        if s < -tol || s.is_nan() {
            r.violations += 1;
        }
        if t < -tol || t.is_nan() {
            r.terminal_violations += 1;
        }
        let worst = s.min(t);
        if worst < -tol && worst < worst_violation {
            worst_violation = worst;
            r.violating = Some(tu.clone());
        }
        r.worst_slack = r.worst_slack.min(s);
        r.worst_terminal_slack = r.worst_terminal_slack.min(t);
    }
    r
}

fn sq_norm(p: &StatePoint) -> f64 {
    [&p.x, &p.y, &p.z, &p.u].iter().flat_map(|v| v.iter()).map(|v| v * v).sum()
}

/// Additive offsets `(B, F, Sigma, Gamma, zeta)` on the grid. `gamma` is
/// slot-major with `d` entries per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct Offsets {
    pub b: GridProcess,
    pub f: GridProcess,
    pub sigma: GridProcess,
    pub gamma: GridProcess,
    pub zeta: GridProcess,
}

impl Offsets {
    pub fn zeros(model: &FbsdeModel, bundle: &PathBundle) -> Self {
        let (p, n_steps) = (bundle.n_paths(), bundle.steps());
        Self {
            b: GridProcess::zeros(p, n_steps, model.d),
            f: GridProcess::zeros(p, n_steps, model.n),
            sigma: GridProcess::zeros(p, n_steps, model.d * model.k),
            gamma: GridProcess::zeros(p, n_steps, model.d * bundle.slots()),
            zeta: GridProcess::zeros(p, 1, model.n),
        }
    }

    /// Sub-grid forward offsets, constant over each grid step.
    pub fn path_offsets(&self, bundle: &PathBundle) -> Vec<PathOffsets> {
        let d = self.b.dim();
        let k = bundle.brownian_dim();
        let slots = bundle.slots();
        (0..bundle.n_paths())
            .map(|p| {
                let data = &bundle.paths[p];
                let mut o = PathOffsets::zeros(data, d, k);
                for i in 0..data.sub_intervals() {
                    let m = data.sub_step[i];
                    o.drift[i * d..(i + 1) * d].copy_from_slice(self.b.at(p, m));
                    o.diffusion[i * d * k..(i + 1) * d * k].copy_from_slice(self.sigma.at(p, m));
                    let gam = self.gamma.at(p, m);
                    for s in 0..slots {
                        let mass = data.sub_masses[i * slots + s];
                        for r in 0..d {
                            o.compensator[i * d + r] += gam[s * d + r] * mass;
                        }
                    }
                    let lo = data.jump_offsets[i];
                    for (j, &s) in data.jumps_after(i).iter().enumerate() {
                        o.jumps[(lo + j) * d..(lo + j + 1) * d].copy_from_slice(&gam[s * d..(s + 1) * d]);
                    }
                }
                o
            })
            .collect()
    }
}

/// Weights of the couplings in the base systems: driver `+ driver_x G X`,
/// terminal `+ terminal_x G X_T`, forward `+ feedback G^T (Y, Z, U)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BaseWeights {
    pub driver_x: f64,
    pub terminal_x: f64,
    pub feedback: f64,
}

impl Default for BaseWeights {
    fn default() -> Self {
        Self { driver_x: 1.0, terminal_x: 1.0, feedback: 1.0 }
    }
}

/// `(X, Y, Z, U, M)` with the forward sub-grid paths.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSolution {
    pub x: GridProcess,
    pub sub: Vec<SubPath>,
    pub backward: BackwardSolution,
}

impl CoupledSolution {
    pub fn zeros(model: &FbsdeModel, bundle: &PathBundle) -> Self {
        let sub = bundle
            .paths
            .iter()
            .map(|d| SubPath {
                dim: model.d,
                start: vec![0.0; (d.sub_intervals() + 1) * model.d],
                pre: vec![0.0; d.sub_intervals() * model.d],
            })
            .collect();
        Self {
            x: GridProcess::zeros(bundle.n_paths(), bundle.steps() + 1, model.d),
            sub,
            backward: BackwardSolution::zeros(bundle.n_paths(), bundle.steps(), model.n, model.k, bundle.slots()),
        }
    }
}

/// Squared components of the discrete `||.||_*` norm of `(X, Y, Z, U, M, X_T)`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StarComponents {
    pub x_sup: f64,
    pub y_sup: f64,
    pub z: f64,
    pub u: f64,
    pub m: f64,
    pub x_t: f64,
}

impl StarComponents {
    /// Sum of the component norms.
    pub fn norm(&self) -> f64 {
        [self.x_sup, self.y_sup, self.z, self.u, self.m, self.x_t].iter().map(|v| libm::sqrt(*v)).sum()
    }
}

/// Norm components of `a - b` (or of `a` when `b` is `None`).
pub fn star_components(a: &CoupledSolution, b: Option<&CoupledSolution>, bundle: &PathBundle) -> StarComponents {
    match b {
        Some(b) => star_triple(a, b, bundle)[0],
        None => star_triple(a, a, bundle)[1],
    }
}

/// Components of `a - b`, `a` and `b` in one pass.
fn star_triple(a: &CoupledSolution, b: &CoupledSolution, bundle: &PathBundle) -> [StarComponents; 3] {
    let steps = bundle.steps();
    let slots = bundle.slots();
    let n = a.backward.output_dim();
    let pf = bundle.n_paths() as f64;
    let mut c = [StarComponents::default(); 3];
    // Squared norms of `u - v`, `u` and `v`.
    let sq3 = |u: &[f64], v: &[f64]| {
        let mut r = [0.0; 3];
        for (p, q) in u.iter().zip(v) {
            r[0] += (p - q) * (p - q);
            r[1] += p * p;
            r[2] += q * q;
        }
        r
    };
    for p in 0..bundle.n_paths() {
        let mut xs = [0.0f64; 3];
        let mut ys = [0.0f64; 3];
        for m in 0..=steps {
            let sx = sq3(a.x.at(p, m), b.x.at(p, m));
            let sy = sq3(a.backward.y.at(p, m), b.backward.y.at(p, m));
            for i in 0..3 {
                xs[i] = xs[i].max(sx[i]);
                ys[i] = ys[i].max(sy[i]);
            }
        }
        let xt = sq3(a.x.at(p, steps), b.x.at(p, steps));
        let mut z = [0.0; 3];
        let mut u = [0.0; 3];
        let mut mm = [0.0; 3];
        let masses = &bundle.paths[p].masses;
        for m in 0..steps {
            let dt = bundle.dt(m);
            let sz = sq3(a.backward.z.at(p, m), b.backward.z.at(p, m));
            let sm = sq3(a.backward.dm.at(p, m), b.backward.dm.at(p, m));
            let (ua, ub) = (a.backward.u.at(p, m), b.backward.u.at(p, m));
            for s in 0..slots {
                let w = masses[m * slots + s] * dt;
                if w == 0.0 {
                    continue;
                }
                let su = sq3(&ua[s * n..(s + 1) * n], &ub[s * n..(s + 1) * n]);
                for i in 0..3 {
                    u[i] += w * su[i];
                }
            }
            for i in 0..3 {
                z[i] += sz[i] * dt;
                mm[i] += sm[i];
            }
        }
        for i in 0..3 {
            c[i].x_sup += xs[i] / pf;
            c[i].y_sup += ys[i] / pf;
            c[i].x_t += xt[i] / pf;
            c[i].z += z[i] / pf;
            c[i].u += u[i] / pf;
            c[i].m += mm[i] / pf;
        }
    }
    c
}

/// Relative distance `||a - b||_* / max(||a||_*, ||b||_*)`.
pub fn relative_distance(a: &CoupledSolution, b: &CoupledSolution, bundle: &PathBundle) -> f64 {
    let [d, na, nb] = star_triple(a, b, bundle);
    let d = d.norm();
    let s = na.norm().max(nb.norm());
    if s > 0.0 {
        d / s
    } else {
        d
    }
}

/// Forward coefficient `alpha (b, sigma, gamma) + w G^T (y, z, u)`.
struct AlphaForward<'a> {
    model: &'a FbsdeModel,
    alpha: f64,
    feedback: f64,
}

impl ForwardCoefficients for AlphaForward<'_> {
    fn state_dim(&self) -> usize {
        self.model.d
    }

    fn brownian_dim(&self) -> usize {
        self.model.k
    }

    fn drift(&self, p: &EvalPoint, out: &mut [f64]) {
        scaled(self.alpha, out, |o| self.model.forward.drift(p, o));
        if self.feedback != 0.0 {
            self.model.add_gt_y(self.feedback, p.y, 1, out);
        }
    }

    fn diffusion(&self, p: &EvalPoint, out: &mut [f64]) {
        scaled(self.alpha, out, |o| self.model.forward.diffusion(p, o));
        if self.feedback != 0.0 {
            self.model.add_gt_y(self.feedback, p.z, self.model.k, out);
        }
    }

    fn jump(&self, p: &EvalPoint, slot: usize, mark: f64, out: &mut [f64]) {
        scaled(self.alpha, out, |o| self.model.forward.jump(p, slot, mark, o));
        if self.feedback != 0.0 {
            let n = self.model.n;
            self.model.add_gt_y(self.feedback, &p.u[slot * n..(slot + 1) * n], 1, out);
        }
    }
}

fn scaled(alpha: f64, out: &mut [f64], f: impl FnOnce(&mut [f64])) {
    if alpha == 0.0 {
        out.fill(0.0);
    } else {
        f(out);
        if alpha != 1.0 {
            out.iter_mut().for_each(|v| *v *= alpha);
        }
    }
}

/// Driver `alpha f + F + w G x`.
struct AlphaDriver<'a> {
    model: &'a FbsdeModel,
    alpha: f64,
    driver_x: f64,
    offset: &'a GridProcess,
}

impl Driver for AlphaDriver<'_> {
    fn output_dim(&self) -> usize {
        self.model.n
    }

    fn eval(&self, p: &EvalPoint, out: &mut [f64]) {
        scaled(self.alpha, out, |o| self.model.driver.eval(p, o));
        let off = self.offset.at(p.path, p.step);
        out.iter_mut().zip(off).for_each(|(o, v)| *o += v);
        if self.driver_x != 0.0 {
            self.model.add_g_x(self.driver_x, p.x, out);
        }
    }
}

/// `alpha g(X_T) + zeta + w G X_T` per path.
fn alpha_terminal(
    model: &FbsdeModel,
    alpha: f64,
    terminal_x: f64,
    zeta: &GridProcess,
    x: &GridProcess,
    bundle: &PathBundle,
) -> Result<GridProcess, CoupledError> {
    let n = model.n;
    let steps = bundle.steps();
    let mut out = GridProcess::zeros(bundle.n_paths(), 1, n);
    let mut gv = vec![0.0; n];
    let mut gx = vec![0.0; n];
    for p in 0..bundle.n_paths() {
        let xt = x.at(p, steps);
        if alpha != 0.0 {
            let env = bundle.paths[p].env.at(bundle.horizon(), Side::Left).map_err(|_| CoupledError::Dimension("environment at T"))?;
            model.terminal.eval(env, xt, &mut gv);
        } else {
            gv.fill(0.0);
        }
        model.g_x(xt, &mut gx);
        let z = zeta.at(p, 0);
        for (j, o) in out.at_mut(p, 0).iter_mut().enumerate() {
            *o = alpha * gv[j] + z[j] + terminal_x * gx[j];
        }
    }
    Ok(out)
}

/// Offsets of the `alpha`-system: sub-grid forward terms plus the grid
/// driver offset and terminal offset.
struct SystemOffsets {
    forward: Vec<PathOffsets>,
    f: GridProcess,
    zeta: GridProcess,
}

/// One forward pass of the `alpha`-system.
fn forward_pass(
    model: &FbsdeModel,
    alpha: f64,
    feedback: f64,
    offs: &SystemOffsets,
    frozen: Option<&BackwardSolution>,
    bundle: &PathBundle,
) -> Result<(GridProcess, Vec<SubPath>), CoupledError> {
    let coef = AlphaForward { model, alpha, feedback };
    let fz = frozen.map(|b| FrozenInputs { y: &b.y, z: &b.z, u: &b.u });
    Ok(simulate_forward_full(&coef, bundle, fz, Some(&offs.forward))?)
}

#[allow(clippy::too_many_arguments)]
fn backward_pass(
    model: &FbsdeModel,
    alpha: f64,
    w: BaseWeights,
    offs: &SystemOffsets,
    x: &GridProcess,
    bundle: &PathBundle,
    basis: &BasisSpec,
) -> Result<BackwardSolution, CoupledError> {
    let driver = AlphaDriver { model, alpha, driver_x: w.driver_x, offset: &offs.f };
    let zeta = alpha_terminal(model, alpha, w.terminal_x, &offs.zeta, x, bundle)?;
    Ok(lsmc_solve(&driver, &zeta, bundle, Some(x), basis)?)
}

/// Solves the decoupled base system with offsets; `case` picks which leg
/// is solved first.
pub fn solve_decoupled_base(
    model: &FbsdeModel,
    offsets: &Offsets,
    bundle: &PathBundle,
    case: Case,
    basis: &BasisSpec,
    weights: BaseWeights,
) -> Result<CoupledSolution, CoupledError> {
    let offs = SystemOffsets { forward: offsets.path_offsets(bundle), f: offsets.f.clone(), zeta: offsets.zeta.clone() };
    base_solve(model, &offs, bundle, case, basis, weights)
}

fn base_solve(
    model: &FbsdeModel,
    offs: &SystemOffsets,
    bundle: &PathBundle,
    case: Case,
    basis: &BasisSpec,
    weights: BaseWeights,
) -> Result<CoupledSolution, CoupledError> {
    match case {
        Case::DLtN => {
            let (x, sub) = forward_pass(model, 0.0, 0.0, offs, None, bundle)?;
            let backward = backward_pass(model, 0.0, weights, offs, &x, bundle, basis)?;
            Ok(CoupledSolution { x, sub, backward })
        }
        Case::DGeN => {
            let x0 = GridProcess::zeros(bundle.n_paths(), bundle.steps() + 1, model.d);
            let w = BaseWeights { driver_x: 0.0, terminal_x: 0.0, ..weights };
            let backward = backward_pass(model, 0.0, w, offs, &x0, bundle, basis)?;
            let (x, sub) = forward_pass(model, 0.0, weights.feedback, offs, Some(&backward), bundle)?;
            Ok(CoupledSolution { x, sub, backward })
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ContinuationConfig {
    pub basis: BasisSpec,
    /// Relative `||.||_*` tolerance of the outer fixed-point loop.
    pub tolerance: f64,
    /// Tolerance of the inner cross-Picard loop (defaults to `tolerance / 10`).
    pub inner_tolerance: Option<f64>,
    pub epsilon: f64,
    pub epsilon_min: f64,
    pub max_iterations: usize,
    pub inner_max_iterations: usize,
    /// Cross-Picard sweeps per outer iteration; `None` iterates the inner
    /// loop to `inner_tolerance`. Either way the outer fixed point solves
    /// the `alpha_0`-system with its own shifted offsets.
    pub inner_sweeps: Option<usize>,
    /// Consecutive distance increases that count as divergence.
    pub divergence_window: usize,
}

impl ContinuationConfig {
    pub fn new(basis: BasisSpec) -> Self {
        Self {
            basis,
            tolerance: 1e-6,
            inner_tolerance: None,
            epsilon: 0.125,
            epsilon_min: 1e-3,
            max_iterations: 60,
            inner_max_iterations: 200,
            inner_sweeps: Some(1),
            divergence_window: 3,
        }
    }

    pub fn inner_tolerance(&self) -> f64 {
        self.inner_tolerance.unwrap_or(self.tolerance / 10.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub alpha: f64,
    pub epsilon: f64,
    pub accepted: bool,
    /// Outer iterate distances.
    pub distances: Vec<f64>,
    /// Inner sweeps summed over the outer iterations.
    pub inner_sweeps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverReport {
    pub case: Case,
    pub steps: Vec<StepRecord>,
    pub warnings: Vec<String>,
    pub theoretical_epsilon: Option<f64>,
    /// `||.||_*` of the returned solution.
    pub final_norm: f64,
    /// Distance between the last fixed point and the returned solution.
    pub final_adjustment: f64,
}

impl SolverReport {
    pub fn outer_iterations(&self) -> usize {
        self.steps.iter().map(|s| s.distances.len()).sum()
    }

    pub fn inner_sweeps(&self) -> usize {
        self.steps.iter().map(|s| s.inner_sweeps).sum()
    }

    /// Largest ratio of consecutive distances over the tail of each
    /// accepted step (the empirical contraction factor).
    pub fn contraction_ratios(&self) -> Vec<f64> {
        self.steps
            .iter()
            .filter(|s| s.accepted && s.distances.len() >= 3)
            .map(|s| {
                let d = &s.distances;
                let tail = &d[d.len() / 2..];
                tail.windows(2).map(|w| w[1] / w[0]).fold(0.0, f64::max)
            })
            .collect()
    }
}

/// Weights of the `alpha`-system's own couplings.
fn alpha_weights(model: &FbsdeModel, case: Case, alpha: f64) -> (BaseWeights, f64) {
    let b = model.betas;
    match case {
        Case::DLtN => (BaseWeights { driver_x: (1.0 - alpha) * b.beta1, terminal_x: 1.0 - alpha, feedback: 0.0 }, 0.0),
        Case::DGeN => (BaseWeights { driver_x: 0.0, terminal_x: 0.0, feedback: -(1.0 - alpha) * b.beta2 }, -(1.0 - alpha) * b.beta2),
    }
}

/// Solves the `alpha`-system with the given offsets, returning the solution
/// and the number of sweeps.
#[allow(clippy::too_many_arguments)]
fn solve_alpha(
    model: &FbsdeModel,
    case: Case,
    alpha: f64,
    offs: &SystemOffsets,
    bundle: &PathBundle,
    cfg: &ContinuationConfig,
    warm: &CoupledSolution,
) -> Result<(CoupledSolution, usize), CoupledError> {
    let (weights, feedback) = alpha_weights(model, case, alpha);
    if alpha == 0.0 {
        let w = BaseWeights { feedback, ..weights };
        return Ok((base_solve(model, offs, bundle, case, &cfg.basis, w)?, 1));
    }
    let tol = cfg.inner_tolerance();
    let cap = cfg.inner_sweeps.unwrap_or(cfg.inner_max_iterations).max(1);
    let sweep = |frozen: &CoupledSolution| -> Result<CoupledSolution, CoupledError> {
        let (x, sub) = forward_pass(model, alpha, feedback, offs, Some(&frozen.backward), bundle)?;
        let backward = backward_pass(model, alpha, weights, offs, &x, bundle, &cfg.basis)?;
        Ok(CoupledSolution { x, sub, backward })
    };
    let mut prev = sweep(warm)?;
    let mut last = relative_distance(&prev, warm, bundle);
    if cfg.inner_sweeps.is_some() && cap == 1 || cfg.inner_sweeps.is_none() && last < tol {
        return Ok((prev, 1));
    }
    for count in 2..=cap {
        let next = sweep(&prev)?;
        if cfg.inner_sweeps.is_some() {
            if count == cap {
                return Ok((next, count));
            }
        } else {
            last = relative_distance(&next, &prev, bundle);
            if last < tol {
                return Ok((next, count));
            }
        }
        prev = next;
    }
    Err(CoupledError::InnerDivergence { alpha, iterations: cfg.inner_max_iterations, distance: last })
}

/// Offsets `eps * shift(w)` built from the frozen iterate.
fn shift_offsets(model: &FbsdeModel, case: Case, eps: f64, w: &CoupledSolution, bundle: &PathBundle) -> Result<SystemOffsets, CoupledError> {
    let (d, n, k) = (model.d, model.n, model.k);
    let slots = bundle.slots();
    let n_reg = bundle.regime_channels.len();
    let steps = bundle.steps();
    let beta2 = if case == Case::DGeN { model.betas.beta2 } else { 0.0 };
    let beta1 = if case == Case::DLtN { model.betas.beta1 } else { 0.0 };
    let mut forward = Vec::with_capacity(bundle.n_paths());
    let mut f = GridProcess::zeros(bundle.n_paths(), steps, n);
    let mut zeta = GridProcess::zeros(bundle.n_paths(), 1, n);
    let (mut b, mut sig, mut gam) = (vec![0.0; d], vec![0.0; d * k], vec![0.0; d]);
    let mut fb = vec![0.0; n];
    let mut gx = vec![0.0; n];
    for p in 0..bundle.n_paths() {
        let data = &bundle.paths[p];
        let sp = &w.sub[p];
        let values = data.env.values();
        let mut o = PathOffsets::zeros(data, d, k);
        for i in 0..data.sub_intervals() {
            let m = data.sub_step[i];
            let (y, z, u) = (w.backward.y.at(p, m), w.backward.z.at(p, m), w.backward.u.at(p, m));
            let masses = &data.sub_masses[i * slots..(i + 1) * slots];
            let point = EvalPoint {
                t: data.sub_times[i],
                path: p,
                step: m,
                env: &values[data.sub_env[i]],
                masses,
                regime: &data.sub_regime[i * n_reg..(i + 1) * n_reg],
                x: sp.start_at(i),
                y,
                z,
                u,
            };
            model.forward.drift(&point, &mut b);
            model.forward.diffusion(&point, &mut sig);
            if beta2 != 0.0 {
                model.add_gt_y(beta2, y, 1, &mut b);
                model.add_gt_y(beta2, z, k, &mut sig);
            }
            for r in 0..d {
                o.drift[i * d + r] = eps * b[r];
            }
            for (r, v) in sig.iter().enumerate() {
                o.diffusion[i * d * k + r] = eps * v;
            }
            for (s, &mass) in masses.iter().enumerate() {
                if mass == 0.0 {
                    continue;
                }
                shifted_jump(model, &point, bundle, s, beta2, &mut gam);
                for r in 0..d {
                    o.compensator[i * d + r] += eps * gam[r] * mass;
                }
            }
            let lo = data.jump_offsets[i];
            let jumps = data.jumps_after(i);
            if !jumps.is_empty() {
                let jp = EvalPoint { t: data.sub_times[i + 1], x: sp.pre_at(i), ..point };
                for (j, &s) in jumps.iter().enumerate() {
                    shifted_jump(model, &jp, bundle, s, beta2, &mut gam);
                    for r in 0..d {
                        o.jumps[(lo + j) * d + r] = eps * gam[r];
                    }
                }
            }
        }
        forward.push(o);
        for m in 0..steps {
            let t = bundle.grid[m];
            let env = data.env.at(t, Side::Right).map_err(|_| CoupledError::Dimension("environment on grid"))?;
            let x = w.x.at(p, m);
            let point = EvalPoint {
                t,
                path: p,
                step: m,
                env,
                masses: &data.masses[m * slots..(m + 1) * slots],
                regime: &data.regime[m * n_reg..(m + 1) * n_reg],
                x,
                y: w.backward.cond.at(p, m),
                z: w.backward.z.at(p, m),
                u: w.backward.u.at(p, m),
            };
            model.driver.eval(&point, &mut fb);
            model.g_x(x, &mut gx);
            for (j, v) in f.at_mut(p, m).iter_mut().enumerate() {
                *v = eps * (fb[j] - beta1 * gx[j]);
            }
        }
        let xt = w.x.at(p, steps);
        let env = data.env.at(bundle.horizon(), Side::Left).map_err(|_| CoupledError::Dimension("environment at T"))?;
        model.terminal.eval(env, xt, &mut fb);
        model.g_x(xt, &mut gx);
        let subtract = if case == Case::DLtN { 1.0 } else { 0.0 };
        for (j, v) in zeta.at_mut(p, 0).iter_mut().enumerate() {
            *v = eps * (fb[j] - subtract * gx[j]);
        }
    }
    Ok(SystemOffsets { forward, f, zeta })
}

fn shifted_jump(model: &FbsdeModel, p: &EvalPoint, bundle: &PathBundle, slot: usize, beta2: f64, out: &mut [f64]) {
    model.forward.jump(p, slot, bundle.layout.mark(slot), out);
    if beta2 != 0.0 {
        let n = model.n;
        model.add_gt_y(beta2, &p.u[slot * n..(slot + 1) * n], 1, out);
    }
}

/// Method of continuation from `alpha = 0` to `alpha = 1`. `guess` is the
/// initial iterate (zero when `None`).
pub fn continuation_solve(
    model: &FbsdeModel,
    bundle: &PathBundle,
    cfg: &ContinuationConfig,
    guess: Option<&CoupledSolution>,
) -> Result<(CoupledSolution, SolverReport), CoupledError> {
    let mut warnings = model.validate()?;
    if bundle.brownian_dim() != model.k || bundle.spec.state_dim != model.d {
        return Err(CoupledError::Dimension("bundle dimensions differ from the model"));
    }
    let case = model.case();
    let theoretical_epsilon = model.theoretical_epsilon();
    if theoretical_epsilon.is_none() {
        warnings.push(String::from("theoretical continuation step unavailable"));
    }
    let mut current = match guess {
        Some(g) => g.clone(),
        None => CoupledSolution::zeros(model, bundle),
    };
    let mut steps = Vec::new();
    let mut alpha = 0.0f64;
    let mut eps = cfg.epsilon;
    while alpha < 1.0 {
        // Snap to 1 when the remainder is within rounding of a full step.
        let e = if 1.0 - alpha - eps <= 1e-12 { 1.0 - alpha } else { eps };
        let mut iterate = current.clone();
        let mut record = StepRecord { alpha, epsilon: e, accepted: false, distances: Vec::new(), inner_sweeps: 0 };
        let mut rising = 0;
        for _ in 0..cfg.max_iterations {
            let offs = shift_offsets(model, case, e, &iterate, bundle)?;
            let (next, sweeps) = solve_alpha(model, case, alpha, &offs, bundle, cfg, &iterate)?;
            record.inner_sweeps += sweeps;
            let dist = relative_distance(&next, &iterate, bundle);
            rising = match record.distances.last() {
                Some(&last) if dist > last => rising + 1,
                _ => 0,
            };
            record.distances.push(dist);
            iterate = next;
            if dist < cfg.tolerance {
                record.accepted = true;
                break;
            }
            if rising >= cfg.divergence_window {
                break;
            }
        }
        let accepted = record.accepted;
        steps.push(record);
        if accepted {
            current = iterate;
            alpha = if e >= 1.0 - alpha { 1.0 } else { alpha + e };
        } else {
            eps /= 2.0;
            if eps < cfg.epsilon_min {
                return Err(CoupledError::StepUnderflow { alpha, epsilon: eps });
            }
            warnings.push(format!("halved eps to {eps} at alpha = {alpha}"));
        }
    }
    // One sweep of the full system from the fixed point, so that the terminal
    // condition holds exactly.
    let zero = SystemOffsets {
        forward: bundle.paths.iter().map(|d| PathOffsets::zeros(d, model.d, model.k)).collect(),
        f: GridProcess::zeros(bundle.n_paths(), bundle.steps(), model.n),
        zeta: GridProcess::zeros(bundle.n_paths(), 1, model.n),
    };
    let (x, sub) = forward_pass(model, 1.0, 0.0, &zero, Some(&current.backward), bundle)?;
    let w = BaseWeights { driver_x: 0.0, terminal_x: 0.0, feedback: 0.0 };
    let backward = backward_pass(model, 1.0, w, &zero, &x, bundle, &cfg.basis)?;
    let out = CoupledSolution { x, sub, backward };
    let final_adjustment = relative_distance(&out, &current, bundle);
    let final_norm = star_components(&out, None, bundle).norm();
    Ok((out, SolverReport { case, steps, warnings, theoretical_epsilon, final_norm, final_adjustment }))
}

/// Sequential solve of a one-directionally coupled model: forward once
/// with the model coefficients, then backward once.
pub fn sequential_solve(model: &FbsdeModel, bundle: &PathBundle, basis: &BasisSpec) -> Result<CoupledSolution, CoupledError> {
    let (x, sub) = simulate_forward_full(model.forward.as_ref(), bundle, None, None)?;
    let zeta = alpha_terminal(model, 1.0, 0.0, &GridProcess::zeros(bundle.n_paths(), 1, model.n), &x, bundle)?;
    let backward = lsmc_solve(model.driver.as_ref(), &zeta, bundle, Some(&x), basis)?;
    Ok(CoupledSolution { x, sub, backward })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    /// `||delta(X, Y, Z, U, M)||_*`.
    pub discrepancy: f64,
    pub relative: f64,
    /// `10 x` the Picard tolerance.
    pub bound: f64,
    pub reports: [SolverReport; 2],
}

impl ProbeReport {
    pub fn passed(&self) -> bool {
        self.relative <= self.bound
    }
}

/// Runs the continuation solver from two initial iterates on the same noise.
pub fn uniqueness_probe(
    model: &FbsdeModel,
    bundle: &PathBundle,
    cfg: &ContinuationConfig,
    guesses: [Option<&CoupledSolution>; 2],
) -> Result<ProbeReport, CoupledError> {
    let (a, ra) = continuation_solve(model, bundle, cfg, guesses[0])?;
    let (b, rb) = continuation_solve(model, bundle, cfg, guesses[1])?;
    let discrepancy = star_components(&a, Some(&b), bundle).norm();
    Ok(ProbeReport { discrepancy, relative: relative_distance(&a, &b, bundle), bound: 10.0 * cfg.tolerance, reports: [ra, rb] })
}

/// Forward legs `(B, Sigma, Gamma)` on grid steps.
#[derive(Debug, Clone, Copy)]
pub struct ForwardLegs<'a> {
    pub b: &'a GridProcess,
    pub sigma: &'a GridProcess,
    pub gamma: &'a GridProcess,
}

/// Backward legs `(F, zeta)`.
#[derive(Debug, Clone, Copy)]
pub struct BackwardLegs<'a> {
    pub f: &'a GridProcess,
    pub zeta: &'a GridProcess,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualityReport {
    pub lhs: f64,
    pub rhs: f64,
    /// Standard error of the per-path difference.
    pub se: f64,
    pub slack: f64,
    pub passed: bool,
}

struct OffsetDriver<'a> {
    f: &'a GridProcess,
}

impl Driver for OffsetDriver<'_> {
    fn output_dim(&self) -> usize {
        self.f.dim()
    }

    fn eval(&self, p: &EvalPoint, out: &mut [f64]) {
        out.copy_from_slice(self.f.at(p.path, p.step));
    }
}

/// Builds `X` from the forward legs on the grid and `(Y, Z, U, M)` from the
/// backward legs by regression, then compares both sides of the duality
/// identity path by path. `g` is `n x d`; `slack_c` multiplies the largest
/// grid step.
pub fn ito_duality_check(
    fwd: ForwardLegs,
    bwd: BackwardLegs,
    g: &[f64],
    bundle: &PathBundle,
    basis: &BasisSpec,
    slack_c: f64,
) -> Result<DualityReport, CoupledError> {
    let (pn, steps, k, slots) = (bundle.n_paths(), bundle.steps(), bundle.brownian_dim(), bundle.slots());
    let d = fwd.b.dim();
    let n = bwd.f.dim();
    let shapes_ok = fwd.b.paths() == pn
        && fwd.b.nodes() == steps
        && fwd.sigma.dim() == d * k
        && fwd.gamma.dim() == d * slots
        && fwd.sigma.nodes() == steps
        && fwd.gamma.nodes() == steps
        && bwd.f.paths() == pn
        && bwd.f.nodes() == steps
        && bwd.zeta.paths() == pn
        && bwd.zeta.dim() == n
        && g.len() == n * d;
    if !shapes_ok {
        return Err(CoupledError::Dimension("legs do not match the bundle"));
    }
    let mut x = GridProcess::zeros(pn, steps + 1, d);
    for p in 0..pn {
        let data = &bundle.paths[p];
        x.at_mut(p, 0).copy_from_slice(&data.x0);
        for m in 0..steps {
            let dt = bundle.dt(m);
            let mut next = x.at(p, m).to_vec();
            let (b, sig, gam) = (fwd.b.at(p, m), fwd.sigma.at(p, m), fwd.gamma.at(p, m));
            for r in 0..d {
                next[r] += b[r] * dt;
                for c in 0..k {
                    next[r] += sig[r * k + c] * data.dw[m * k + c];
                }
                for s in 0..slots {
                    let idx = m * slots + s;
                    next[r] += gam[s * d + r] * (data.dn[idx] - data.comp[idx]);
                }
            }
            x.at_mut(p, m + 1).copy_from_slice(&next);
        }
    }
    let sol = lsmc_solve(&OffsetDriver { f: bwd.f }, bwd.zeta, bundle, Some(&x), basis)?;
    let pair = |xv: &[f64], yv: &[f64]| -> f64 {
        (0..n).map(|j| yv[j] * (0..d).map(|i| g[j * d + i] * xv[i]).sum::<f64>()).sum()
    };
    let mut lhs_v = Vec::with_capacity(pn);
    let mut rhs_v = Vec::with_capacity(pn);
    let mut diffs = Vec::with_capacity(pn);
    for p in 0..pn {
        let lhs = pair(x.at(p, steps), sol.y.at(p, steps)) - pair(x.at(p, 0), sol.y.at(p, 0));
        let mut rhs = 0.0;
        let masses_all = &bundle.paths[p].masses;
        for m in 0..steps {
            let dt = bundle.dt(m);
            let (xm, ym) = (x.at(p, m), sol.y.at(p, m));
            let mut v = -pair(xm, bwd.f.at(p, m)) + pair(fwd.b.at(p, m), ym);
            let (sig, z) = (fwd.sigma.at(p, m), sol.z.at(p, m));
            for j in 0..n {
                for c in 0..k {
                    let gs: f64 = (0..d).map(|i| g[j * d + i] * sig[i * k + c]).sum();
                    v += gs * z[j * k + c];
                }
            }
            let gam = fwd.gamma.at(p, m);
            let mut ggam = vec![0.0; n * slots];
            for s in 0..slots {
                for j in 0..n {
                    ggam[s * n + j] = (0..d).map(|i| g[j * d + i] * gam[s * d + i]).sum();
                }
            }
            v += jump_inner(&ggam, sol.u.at(p, m), n, &masses_all[m * slots..(m + 1) * slots]).unwrap_or(f64::NAN);
            rhs += v * dt;
        }
        lhs_v.push(lhs);
        rhs_v.push(rhs);
        diffs.push(lhs - rhs);
    }
    let pf = pn as f64;
    let lhs = lhs_v.iter().sum::<f64>() / pf;
    let rhs = rhs_v.iter().sum::<f64>() / pf;
    let (_, se) = mean_and_se(&diffs);
    let dt_max = (0..steps).map(|m| bundle.dt(m)).fold(0.0, f64::max);
    let slack = slack_c * dt_max;
    let passed = (lhs - rhs).abs() <= 3.0 * se + slack;
    Ok(DualityReport { lhs, rhs, se, slack, passed })
}

/// Evaluates the model coefficients along a solution on the grid, giving
/// the legs `(B, Sigma, Gamma)` and `F` with `zeta = g(X_T)`.
pub fn solution_legs(
    model: &FbsdeModel,
    sol: &CoupledSolution,
    bundle: &PathBundle,
) -> Result<(GridProcess, GridProcess, GridProcess, GridProcess, GridProcess), CoupledError> {
    let (pn, steps, k, slots) = (bundle.n_paths(), bundle.steps(), model.k, bundle.slots());
    let (d, n) = (model.d, model.n);
    let mut b = GridProcess::zeros(pn, steps, d);
    let mut sig = GridProcess::zeros(pn, steps, d * k);
    let mut gam = GridProcess::zeros(pn, steps, d * slots);
    let mut f = GridProcess::zeros(pn, steps, n);
    let n_reg = bundle.regime_channels.len();
    let mut gbuf = vec![0.0; d];
    for p in 0..pn {
        let data = &bundle.paths[p];
        for m in 0..steps {
            let t = bundle.grid[m];
            let env = data.env.at(t, Side::Right).map_err(|_| CoupledError::Dimension("environment on grid"))?;
            let point = EvalPoint {
                t,
                path: p,
                step: m,
                env,
                masses: &data.masses[m * slots..(m + 1) * slots],
                regime: &data.regime[m * n_reg..(m + 1) * n_reg],
                x: sol.x.at(p, m),
                y: sol.backward.y.at(p, m),
                z: sol.backward.z.at(p, m),
                u: sol.backward.u.at(p, m),
            };
            model.forward.drift(&point, b.at_mut(p, m));
            model.forward.diffusion(&point, sig.at_mut(p, m));
            for s in 0..slots {
                model.forward.jump(&point, s, bundle.layout.mark(s), &mut gbuf);
                gam.at_mut(p, m)[s * d..(s + 1) * d].copy_from_slice(&gbuf);
            }
            model.driver.eval(&point, f.at_mut(p, m));
        }
    }
    let zeta = alpha_terminal(model, 1.0, 0.0, &GridProcess::zeros(pn, 1, n), &sol.x, bundle)?;
    Ok((b, sig, gam, f, zeta))
}
