//! Least-squares Monte Carlo for BSDEs driven by `W` and the compensated
//! point process, with a residual orthogonal martingale `M`, plus the
//! exponentially weighted solution norms.
//!
//! At each grid step the next value `Y_{m+1}` is regressed jointly on
//! `[phi, phi dW_c, phi dN~_s]`, where `phi` is the polynomial basis at
//! `t_m`. The three coefficient blocks give `E_m[Y_{m+1}]`, `Z_m` and
//! `U_m`, and the regression residual is the increment of `M`.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::bundle::PathBundle;
use crate::math::{mean_and_se, LinalgError, NormalEquations};
use crate::pointproc::jump_inner;
use crate::process::{EvalPoint, GridProcess};

/// Steps whose frozen kernel mass times step length is below this value get
/// `U = 0` on that path.
pub const DEGENERATE_RATE: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BackwardError {
    #[error("regression at grid step {step}: {source}")]
    Regression { step: usize, source: LinalgError },
    #[error("{paths} paths cannot fit a basis of dimension {dim}")]
    TooFewPaths { paths: usize, dim: usize },
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("non-finite value at grid step {step}")]
    NonFinite { step: usize },
    #[error("norm sandwich violated: {lower} <= {value} <= {upper} fails")]
    NormSandwich { lower: f64, value: f64, upper: f64 },
    #[error("gap increased from {prev} to {next} at shrink level {level}")]
    GapNotShrinking { level: usize, prev: f64, next: f64 },
}

/// Constant Lipschitz profile `(K_y, K^W, K^lambda, K^0)` of a driver.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipschitzProfile {
    pub k_y: f64,
    pub k_z: f64,
    pub k_u: f64,
    pub k0: f64,
}

impl LipschitzProfile {
    /// `alpha^2 = max{sqrt(K_y), K^W, K^lambda}`.
    pub fn alpha_sq(&self) -> f64 {
        libm::sqrt(self.k_y).max(self.k_z).max(self.k_u)
    }
}

/// Driver `f(t, nu, x, y, z, u)` of the backward equation.
pub trait Driver: Send + Sync {
    fn output_dim(&self) -> usize;
    fn eval(&self, p: &EvalPoint, out: &mut [f64]);
    fn profile(&self) -> Option<LipschitzProfile> {
        None
    }
}

type DriverFn = dyn Fn(&EvalPoint, &mut [f64]) + Send + Sync;

#[derive(Clone)]
pub struct ClosureDriver {
    n: usize,
    f: Option<Arc<DriverFn>>,
    profile: Option<LipschitzProfile>,
}

impl ClosureDriver {
    pub fn new(n: usize, f: impl Fn(&EvalPoint, &mut [f64]) + Send + Sync + 'static) -> Self {
        Self { n, f: Some(Arc::new(f)), profile: None }
    }

    pub fn zero(n: usize) -> Self {
        Self { n, f: None, profile: None }
    }

    pub fn with_profile(mut self, p: LipschitzProfile) -> Self {
        self.profile = Some(p);
        self
    }
}

impl Driver for ClosureDriver {
    fn output_dim(&self) -> usize {
        self.n
    }

    fn eval(&self, p: &EvalPoint, out: &mut [f64]) {
        match &self.f {
            Some(f) => f(p, out),
            None => out.fill(0.0),
        }
    }

    fn profile(&self) -> Option<LipschitzProfile> {
        self.profile
    }
}

/// Regression feature at a grid node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Feature {
    /// Component of the forward state.
    State(usize),
    /// Component of `W_t`.
    Brownian(usize),
    /// `N_t` of a channel.
    Counting(usize),
    /// Total kernel mass of a channel on the step starting at `t`.
    Intensity(usize),
    /// Cached environment functional (index into the bundle's list).
    Environment(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct BasisSpec {
    pub features: Vec<Feature>,
    /// Total polynomial degree.
    pub degree: usize,
    /// Multiply every monomial by the indicator of each state of the first
    /// regime channel.
    pub regime_interaction: bool,
}

impl BasisSpec {
    pub fn polynomial(features: Vec<Feature>, degree: usize) -> Self {
        Self { features, degree, regime_interaction: false }
    }

    /// Exponent vectors of all monomials of total degree `<= degree`, constant first.
    pub fn monomials(&self) -> Vec<Vec<u32>> {
        let f = self.features.len();
        let mut out = vec![vec![0u32; f]];
        for total in 1..=self.degree as u32 {
            let mut cur = vec![0u32; f];
            gen_monomials(0, total, &mut cur, &mut out);
        }
        out
    }

    /// Number of base functions `phi` (before the `dW`, `dN~` products).
    pub fn dimension(&self, regime_states: usize) -> usize {
        let m = self.monomials().len();
        if self.regime_interaction && regime_states > 0 {
            m * regime_states
        } else {
            m
        }
    }
}

fn gen_monomials(pos: usize, left: u32, cur: &mut Vec<u32>, out: &mut Vec<Vec<u32>>) {
    if pos == cur.len() {
        return;
    }
    if pos == cur.len() - 1 {
        cur[pos] = left;
        out.push(cur.clone());
        cur[pos] = 0;
        return;
    }
    for e in (0..=left).rev() {
        cur[pos] = e;
        if e == left {
            let mut full = cur.clone();
            for v in full.iter_mut().skip(pos + 1) {
                *v = 0;
            }
            out.push(full);
        } else {
            gen_monomials(pos + 1, left - e, cur, out);
        }
    }
    cur[pos] = 0;
}

/// `(Y, Z, U, M)` on the grid. `z` is `n x k` row-major per step; `u` is
/// slot-major with `n` entries per slot.
#[derive(Debug, Clone, PartialEq)]
pub struct BackwardSolution {
    pub y: GridProcess,
    pub z: GridProcess,
    pub u: GridProcess,
    /// Increments of `M` over each grid step.
    pub dm: GridProcess,
    /// `E[Y_{m+1} | F_{t_m}]` per step: the `y` argument the explicit
    /// scheme passes to the driver.
    pub cond: GridProcess,
    /// Steps where dependent regression columns were dropped.
    pub deficient_steps: Vec<usize>,
}

impl BackwardSolution {
    pub fn zeros(paths: usize, steps: usize, n: usize, k: usize, slots: usize) -> Self {
        Self {
            y: GridProcess::zeros(paths, steps + 1, n),
            z: GridProcess::zeros(paths, steps, n * k),
            u: GridProcess::zeros(paths, steps, n * slots),
            dm: GridProcess::zeros(paths, steps, n),
            cond: GridProcess::zeros(paths, steps, n),
            deficient_steps: Vec::new(),
        }
    }

    pub fn output_dim(&self) -> usize {
        self.y.dim()
    }

    /// `M_{t_m}` with `M_0 = 0`.
    pub fn martingale(&self) -> GridProcess {
        let (p, steps, n) = (self.dm.paths(), self.dm.nodes(), self.dm.dim());
        let mut m = GridProcess::zeros(p, steps + 1, n);
        for path in 0..p {
            for s in 0..steps {
                let inc: Vec<f64> = self.dm.at(path, s).to_vec();
                let prev: Vec<f64> = m.at(path, s).to_vec();
                for (c, v) in m.at_mut(path, s + 1).iter_mut().enumerate() {
                    *v = prev[c] + inc[c];
                }
            }
        }
        m
    }

    pub fn minus(&self, other: &BackwardSolution) -> BackwardSolution {
        BackwardSolution {
            y: self.y.minus(&other.y),
            z: self.z.minus(&other.z),
            u: self.u.minus(&other.u),
            dm: self.dm.minus(&other.dm),
            cond: self.cond.minus(&other.cond),
            deficient_steps: Vec::new(),
        }
    }
}

/// Values of one feature on one path at node `m`.
fn feature_value(f: Feature, bundle: &PathBundle, x: Option<&GridProcess>, p: usize, m: usize) -> f64 {
    let nm = &bundle.by_node;
    match f {
        Feature::State(i) => x.map_or(0.0, |x| x.at(p, m)[i]),
        Feature::Brownian(c) => nm.w(m, p)[c],
        Feature::Counting(j) => nm.counts(m, p)[j],
        Feature::Intensity(j) => {
            let masses = nm.masses(m.min(bundle.steps() - 1), p);
            bundle.layout.channel_slots(j).map(|s| masses[s]).sum()
        }
        Feature::Environment(i) => nm.env_features(m, p)[i],
    }
}

/// Evaluates the base functions `phi` of every path at node `m`.
struct BasisValues {
    /// `paths x dim`.
    values: Vec<f64>,
    dim: usize,
}

fn basis_values(
    basis: &BasisSpec,
    monomials: &[Vec<u32>],
    bundle: &PathBundle,
    x: Option<&GridProcess>,
    m: usize,
) -> BasisValues {
    let p = bundle.n_paths();
    let regime_states = regime_states(bundle);
    let interact = basis.regime_interaction && regime_states > 0;
    let dim = if interact { monomials.len() * regime_states } else { monomials.len() };
    let mut values = vec![0.0; p * dim];
    let mut feats = vec![0.0; basis.features.len()];
    for path in 0..p {
        for (i, f) in basis.features.iter().enumerate() {
            feats[i] = feature_value(*f, bundle, x, path, m);
        }
        let row = &mut values[path * dim..(path + 1) * dim];
        let state = if interact { bundle.by_node.regime(m, path)[0] } else { 0 };
        for (b, mono) in monomials.iter().enumerate() {
            let mut v = 1.0;
            for (e, fv) in mono.iter().zip(&feats) {
                for _ in 0..*e {
                    v *= fv;
                }
            }
            if interact {
                row[state * monomials.len() + b] = v;
            } else {
                row[b] = v;
            }
        }
    }
    BasisValues { values, dim }
}

fn regime_states(bundle: &PathBundle) -> usize {
    match bundle.regime_channels.first() {
        Some(&j) => bundle.spec.channels[j].cells(),
        None => 0,
    }
}

/// Base functions kept at a step: the first non-zero constant column and
/// every non-constant column. Constant duplicates would make the Gram
/// matrix exactly singular.
fn active_columns(b: &BasisValues, paths: usize) -> Vec<usize> {
    let mut keep = Vec::new();
    let mut have_constant = false;
    for c in 0..b.dim {
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in 0..paths {
            let v = b.values[p * b.dim + c];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        let scale = 1.0 + lo.abs().max(hi.abs());
        if hi - lo > 1e-12 * scale {
            keep.push(c);
        } else if hi != 0.0 && !have_constant {
            have_constant = true;
            keep.push(c);
        }
    }
    keep
}

/// Least-squares Monte Carlo solve.
///
/// `terminal` holds `zeta` per path (`paths x 1 x n`); `x` supplies the
/// forward state for `State` features and for the driver.
pub fn lsmc_solve(
    driver: &dyn Driver,
    terminal: &GridProcess,
    bundle: &PathBundle,
    x: Option<&GridProcess>,
    basis: &BasisSpec,
) -> Result<BackwardSolution, BackwardError> {
    let n = driver.output_dim();
    let p = bundle.n_paths();
    let steps = bundle.steps();
    let k = bundle.brownian_dim();
    let slots = bundle.slots();
    if terminal.paths() != p || terminal.dim() != n || terminal.nodes() != 1 {
        return Err(BackwardError::Dimension("terminal must be paths x 1 x n"));
    }
    if let Some(x) = x {
        if x.paths() != p || x.nodes() != steps + 1 {
            return Err(BackwardError::Dimension("forward state shape differs from bundle"));
        }
    }
    if basis.features.iter().any(|f| matches!(f, Feature::State(_))) && x.is_none() {
        return Err(BackwardError::Dimension("state features need a forward path"));
    }
    let monomials = basis.monomials();
    let full_dim = basis.dimension(regime_states(bundle)) * (1 + k + slots);
    if p < full_dim {
        return Err(BackwardError::TooFewPaths { paths: p, dim: full_dim });
    }
    let mut sol = BackwardSolution::zeros(p, steps, n, k, slots);
    for path in 0..p {
        sol.y.at_mut(path, steps).copy_from_slice(terminal.at(path, 0));
    }
    let empty_x: Vec<f64> = Vec::new();
    let mut fbuf = vec![0.0; n];
    let mut cond = vec![0.0; n];
    let mut zbuf = vec![0.0; n * k];
    let mut ubuf = vec![0.0; n * slots];
    for m in (0..steps).rev() {
        let dt = bundle.dt(m);
        let phi = basis_values(basis, &monomials, bundle, x, m);
        let active = active_columns(&phi, p);
        let a = active.len();
        // Jump slots whose increments vary across paths.
        let jump_slots: Vec<usize> = (0..slots)
            .filter(|&s| {
                let first = jump_increment(bundle, 0, m, s);
                (0..p).any(|path| jump_increment(bundle, path, m, s) != first)
            })
            .collect();
        let blocks = 1 + k + jump_slots.len();
        let dim = a * blocks;
        let mut ne = NormalEquations::new(dim, n);
        let mut row = vec![0.0; dim];
        for path in 0..p {
            design_row(&phi, &active, bundle, path, m, &jump_slots, &mut row);
            ne.add_row(&row, sol.y.at(path, m + 1));
        }
        let fit = ne.solve().map_err(|source| BackwardError::Regression { step: m, source })?;
        if fit.rank_deficient() {
            sol.deficient_steps.push(m);
        }
        let coef = &fit.coef;
        let nm = &bundle.by_node;
        let t_m = bundle.grid[m];
        for path in 0..p {
            let data = &bundle.paths[path];
            let masses = nm.masses(m, path);
            let row = &phi.values[path * phi.dim..(path + 1) * phi.dim];
            let block = |bi: usize, comp: usize| -> f64 {
                active.iter().enumerate().map(|(q, &c)| row[c] * coef[(bi * a + q) * n + comp]).sum()
            };
            for (c, v) in cond.iter_mut().enumerate() {
                *v = block(0, c);
            }
            for i in 0..n {
                for c in 0..k {
                    zbuf[i * k + c] = block(1 + c, i);
                }
            }
            ubuf.fill(0.0);
            for (js, &s) in jump_slots.iter().enumerate() {
                if masses[s] * dt < DEGENERATE_RATE {
                    continue;
                }
                for i in 0..n {
                    ubuf[s * n + i] = block(1 + k + js, i);
                }
            }
            let xm: &[f64] = match x {
                Some(x) => x.at(path, m),
                None => &empty_x,
            };
            let point = EvalPoint {
                t: t_m,
                path,
                step: m,
                env: &data.env.values()[nm.env_index(m, path)],
                masses,
                regime: nm.regime(m, path),
                x: xm,
                y: &cond,
                z: &zbuf,
                u: &ubuf,
            };
            driver.eval(&point, &mut fbuf);
            sol.z.at_mut(path, m).copy_from_slice(&zbuf);
            sol.u.at_mut(path, m).copy_from_slice(&ubuf);
            sol.cond.at_mut(path, m).copy_from_slice(&cond);
            let dw = nm.dw(m, path);
            let jumps = nm.jump(m, path);
            let mut finite = true;
            for i in 0..n {
                let next = sol.y.at(path, m + 1)[i];
                let y = cond[i] + fbuf[i] * dt;
                finite &= y.is_finite();
                sol.y.at_mut(path, m)[i] = y;
                let mut r = next - cond[i];
                for c in 0..k {
                    r -= zbuf[i * k + c] * dw[c];
                }
                for s in 0..slots {
                    r -= ubuf[s * n + i] * jumps[s];
                }
                sol.dm.at_mut(path, m)[i] = r;
            }
            if !finite {
                return Err(BackwardError::NonFinite { step: m });
            }
        }
    }
    Ok(sol)
}

/// Compensated increment `dN - compensator` of one slot over grid step `m`.
pub fn jump_increment(bundle: &PathBundle, path: usize, m: usize, slot: usize) -> f64 {
    bundle.by_node.jump(m, path)[slot]
}

fn design_row(
    phi: &BasisValues,
    active: &[usize],
    bundle: &PathBundle,
    path: usize,
    m: usize,
    jump_slots: &[usize],
    row: &mut [f64],
) {
    let a = active.len();
    let k = bundle.brownian_dim();
    let nm = &bundle.by_node;
    let (dws, jumps, masses) = (nm.dw(m, path), nm.jump(m, path), nm.masses(m, path));
    let dt = bundle.dt(m);
    let base = &phi.values[path * phi.dim..(path + 1) * phi.dim];
    for (q, &c) in active.iter().enumerate() {
        row[q] = base[c];
    }
    for (c, &dw) in dws.iter().enumerate().take(k) {
        for q in 0..a {
            row[(1 + c) * a + q] = row[q] * dw;
        }
    }
    for (js, &s) in jump_slots.iter().enumerate() {
        let live = masses[s] * dt >= DEGENERATE_RATE;
        let dn = if live { jumps[s] } else { 0.0 };
        for q in 0..a {
            row[(1 + k + js) * a + q] = row[q] * dn;
        }
    }
}

/// Weight process for the exponentially weighted norms.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedNormParams {
    /// `alpha^2` on each grid step.
    pub alpha_sq: Vec<f64>,
    pub beta: f64,
}

impl WeightedNormParams {
    pub fn constant(alpha_sq: f64, steps: usize, beta: f64) -> Self {
        Self { alpha_sq: vec![alpha_sq; steps], beta }
    }

    pub fn from_profile(profile: &LipschitzProfile, steps: usize, beta: Option<f64>) -> Self {
        let a = profile.alpha_sq();
        let beta = beta.unwrap_or(if a > 0.0 { 2.0 / a } else { 0.0 });
        Self::constant(a, steps, beta)
    }

    /// `A_{t_m} = sum_{j < m} alpha_j^2 dt_j`.
    pub fn cumulative(&self, grid: &[f64]) -> Vec<f64> {
        let mut a = vec![0.0; grid.len()];
        for m in 0..grid.len() - 1 {
            a[m + 1] = a[m] + self.alpha_sq[m] * (grid[m + 1] - grid[m]);
        }
        a
    }

    pub fn k_lower(&self) -> f64 {
        self.alpha_sq.iter().copied().fold(f64::INFINITY, f64::min)
    }

    pub fn k_upper(&self) -> f64 {
        self.alpha_sq.iter().copied().fold(0.0, f64::max)
    }
}

/// Squared norm components (Monte Carlo means over paths).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NormComponents {
    pub y_sup: f64,
    pub z: f64,
    pub u: f64,
    pub m: f64,
}

impl NormComponents {
    pub fn total(&self) -> f64 {
        self.y_sup + self.z + self.u + self.m
    }
}

/// Per-path contributions to the weighted norm.
pub fn weighted_norm_per_path(sol: &BackwardSolution, bundle: &PathBundle, params: &WeightedNormParams) -> Vec<NormComponents> {
    let a = params.cumulative(&bundle.grid);
    let steps = bundle.steps();
    let n = sol.output_dim();
    let slots = bundle.slots();
    (0..bundle.n_paths())
        .map(|p| {
            let mut c = NormComponents::default();
            for m in 0..=steps {
                let w = libm::exp(params.beta * a[m]);
                let y2: f64 = sol.y.at(p, m).iter().map(|v| v * v).sum();
                c.y_sup = c.y_sup.max(w * y2);
            }
            for m in 0..steps {
                let dt = bundle.dt(m);
                let w = libm::exp(params.beta * a[m]);
                let z2: f64 = sol.z.at(p, m).iter().map(|v| v * v).sum();
                let masses = &bundle.paths[p].masses[m * slots..(m + 1) * slots];
                let u = sol.u.at(p, m);
                let u2 = jump_inner(u, u, n, masses).unwrap_or(f64::NAN);
                c.z += w * z2 * dt;
                c.u += w * u2 * dt;
                let w_end = libm::exp(params.beta * a[m + 1]);
                let m2: f64 = sol.dm.at(p, m).iter().map(|v| v * v).sum();
                c.m += w_end * m2;
            }
            c
        })
        .collect()
}

pub fn weighted_norm(sol: &BackwardSolution, bundle: &PathBundle, params: &WeightedNormParams) -> NormComponents {
    let per = weighted_norm_per_path(sol, bundle, params);
    let pf = per.len() as f64;
    let mut c = NormComponents::default();
    for v in &per {
        c.y_sup += v.y_sup / pf;
        c.z += v.z / pf;
        c.u += v.u / pf;
        c.m += v.m / pf;
    }
    c
}

/// `(lower, value, upper)` with `lower = ||.||_*^2` and
/// `upper = exp(beta K^* T) lower`; fails when the computed value leaves the
/// sandwich.
pub fn norm_equivalence_check(
    sol: &BackwardSolution,
    bundle: &PathBundle,
    params: &WeightedNormParams,
) -> Result<(f64, f64, f64), BackwardError> {
    let plain = WeightedNormParams { beta: 0.0, ..params.clone() };
    let lower = weighted_norm(sol, bundle, &plain).total();
    let value = weighted_norm(sol, bundle, params).total();
    let upper = libm::exp(params.beta * params.k_upper() * bundle.horizon()) * lower;
    // Relative rounding slack only: the inequalities hold term by term.
    let slack = 1e-12 * upper.abs();
    if value < lower - slack || value > upper + slack {
        return Err(BackwardError::NormSandwich { lower, value, upper });
    }
    Ok((lower, value, upper))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GapReport {
    /// `||delta(Y, Z, U, M)||_*^2`.
    pub gap_sq: f64,
    pub gap_se: f64,
    /// `E|delta zeta|^2`.
    pub dzeta_sq: f64,
    /// `E int |delta f(Y', Z', U')| dt` along the second solution.
    pub df_integral: f64,
}

/// Stability data between two solves on the same bundle.
#[allow(clippy::too_many_arguments)]
pub fn apriori_gap_check(
    sol1: &BackwardSolution,
    sol2: &BackwardSolution,
    driver1: &dyn Driver,
    driver2: &dyn Driver,
    zeta1: &GridProcess,
    zeta2: &GridProcess,
    bundle: &PathBundle,
    x: Option<&GridProcess>,
) -> Result<GapReport, BackwardError> {
    if !sol1.y.same_shape(&sol2.y) || !zeta1.same_shape(zeta2) {
        return Err(BackwardError::Dimension("solutions must share a bundle"));
    }
    let diff = sol1.minus(sol2);
    let plain = WeightedNormParams::constant(0.0, bundle.steps(), 0.0);
    let per: Vec<f64> = weighted_norm_per_path(&diff, bundle, &plain).iter().map(|c| c.total()).collect();
    let (gap_sq, gap_se) = mean_and_se(&per);
    let p = bundle.n_paths();
    let dzeta_sq = (0..p)
        .map(|path| zeta1.at(path, 0).iter().zip(zeta2.at(path, 0)).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
        .sum::<f64>()
        / p as f64;
    let n = sol2.output_dim();
    let slots = bundle.slots();
    let n_reg = bundle.regime_channels.len();
    let (mut f1, mut f2) = (vec![0.0; n], vec![0.0; n]);
    let empty: Vec<f64> = Vec::new();
    let mut df = 0.0;
    for path in 0..p {
        let data = &bundle.paths[path];
        for m in 0..bundle.steps() {
            let t = bundle.grid[m];
            let env = data.env.at(t, crate::measures::Side::Right).map_err(|_| BackwardError::NonFinite { step: m })?;
            let point = EvalPoint {
                t,
                path,
                step: m,
                env,
                masses: &data.masses[m * slots..(m + 1) * slots],
                regime: &data.regime[m * n_reg..(m + 1) * n_reg],
                x: x.map_or(&empty[..], |x| x.at(path, m)),
                y: sol2.y.at(path, m),
                z: sol2.z.at(path, m),
                u: sol2.u.at(path, m),
            };
            driver1.eval(&point, &mut f1);
            driver2.eval(&point, &mut f2);
            let d: f64 = f1.iter().zip(&f2).map(|(a, b)| (a - b) * (a - b)).sum();
            df += libm::sqrt(d) * bundle.dt(m);
        }
    }
    Ok(GapReport { gap_sq, gap_se, dzeta_sq, df_integral: df / p as f64 })
}

/// Checks that gaps along a shrinking input family do not increase beyond
/// three combined standard errors.
pub fn check_shrinking_family(reports: &[GapReport]) -> Result<(), BackwardError> {
    for (level, w) in reports.windows(2).enumerate() {
        let tol = 3.0 * libm::sqrt(w[0].gap_se * w[0].gap_se + w[1].gap_se * w[1].gap_se);
        if w[1].gap_sq > w[0].gap_sq + tol {
            return Err(BackwardError::GapNotShrinking { level: level + 1, prev: w[0].gap_sq, next: w[1].gap_sq });
        }
    }
    Ok(())
}
