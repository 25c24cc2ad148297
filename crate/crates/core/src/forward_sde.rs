//! Euler-Maruyama for jump-diffusions in a fixed environment, with event
//! times inserted into the grid.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use crate::bundle::{PathBundle, PathData};
use crate::process::{EvalPoint, GridProcess};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum ForwardError {
    #[error("non-finite state on path {path} in grid step {step} (t = {time})")]
    NonFinite { path: usize, step: usize, time: f64 },
    #[error("dimension mismatch: {0}")]
    Dimension(&'static str),
    #[error("need at least two paths for sample statistics")]
    TooFewPaths,
}

/// Declared Lipschitz constants of the forward coefficients.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForwardLipschitz {
    pub x: f64,
    pub y: f64,
    pub z: f64,
    pub u: f64,
}

/// Coefficients `(b, sigma, gamma)` of the forward equation.
pub trait ForwardCoefficients: Send + Sync {
    fn state_dim(&self) -> usize;
    fn brownian_dim(&self) -> usize;
    /// `b`, length `d`.
    fn drift(&self, p: &EvalPoint, out: &mut [f64]);
    /// `sigma`, `d x k` row-major.
    fn diffusion(&self, p: &EvalPoint, out: &mut [f64]);
    /// Jump size `gamma` for mark cell `slot`, length `d`.
    fn jump(&self, p: &EvalPoint, slot: usize, mark: f64, out: &mut [f64]);
    fn lipschitz(&self) -> Option<ForwardLipschitz> {
        None
    }
}

type DriftFn = dyn Fn(&EvalPoint, &mut [f64]) + Send + Sync;
type JumpFn = dyn Fn(&EvalPoint, usize, f64, &mut [f64]) + Send + Sync;

/// Forward coefficients given by closures; unset coefficients are zero.
#[derive(Clone)]
pub struct ClosureForward {
    d: usize,
    k: usize,
    drift: Option<Arc<DriftFn>>,
    diffusion: Option<Arc<DriftFn>>,
    jump: Option<Arc<JumpFn>>,
    lipschitz: Option<ForwardLipschitz>,
}

impl ClosureForward {
    pub fn new(d: usize, k: usize) -> Self {
        Self { d, k, drift: None, diffusion: None, jump: None, lipschitz: None }
    }

    pub fn drift(mut self, f: impl Fn(&EvalPoint, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.drift = Some(Arc::new(f));
        self
    }

    pub fn diffusion(mut self, f: impl Fn(&EvalPoint, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.diffusion = Some(Arc::new(f));
        self
    }

    pub fn jump(mut self, f: impl Fn(&EvalPoint, usize, f64, &mut [f64]) + Send + Sync + 'static) -> Self {
        self.jump = Some(Arc::new(f));
        self
    }

    pub fn with_lipschitz(mut self, l: ForwardLipschitz) -> Self {
        self.lipschitz = Some(l);
        self
    }
}

impl ForwardCoefficients for ClosureForward {
    fn state_dim(&self) -> usize {
        self.d
    }

    fn brownian_dim(&self) -> usize {
        self.k
    }

    fn drift(&self, p: &EvalPoint, out: &mut [f64]) {
        match &self.drift {
            Some(f) => f(p, out),
            None => out.fill(0.0),
        }
    }

    fn diffusion(&self, p: &EvalPoint, out: &mut [f64]) {
        match &self.diffusion {
            Some(f) => f(p, out),
            None => out.fill(0.0),
        }
    }

    fn jump(&self, p: &EvalPoint, slot: usize, mark: f64, out: &mut [f64]) {
        match &self.jump {
            Some(f) => f(p, slot, mark, out),
            None => out.fill(0.0),
        }
    }

    fn lipschitz(&self) -> Option<ForwardLipschitz> {
        self.lipschitz
    }
}

/// Backward-side grid functions fed into coupled forward coefficients:
/// `y` on grid nodes, `z` and `u` on grid steps.
#[derive(Debug, Clone, Copy)]
pub struct FrozenInputs<'a> {
    pub y: &'a GridProcess,
    pub z: &'a GridProcess,
    pub u: &'a GridProcess,
}

/// Additive forward terms given per sub-interval of one path: drift and
/// diffusion frozen over each sub-interval, the compensator drift
/// `sum_s gamma_s K_s` and one jump size per recorded event.
#[derive(Debug, Clone, PartialEq)]
pub struct PathOffsets {
    /// `K x d`.
    pub drift: Vec<f64>,
    /// `K x d x k`.
    pub diffusion: Vec<f64>,
    /// `K x d`.
    pub compensator: Vec<f64>,
    /// One `d`-vector per entry of `PathData::jump_slots`.
    pub jumps: Vec<f64>,
}

impl PathOffsets {
    pub fn zeros(data: &PathData, d: usize, k: usize) -> Self {
        let sub = data.sub_intervals();
        Self {
            drift: vec![0.0; sub * d],
            diffusion: vec![0.0; sub * d * k],
            compensator: vec![0.0; sub * d],
            jumps: vec![0.0; data.jump_slots.len() * d],
        }
    }
}

/// Forward state on the sub-grid of one path: `start[i]` at node `s_i`
/// (after jumps) and `pre[i]` at `s_{i+1}-` (before the jumps at that node).
#[derive(Debug, Clone, PartialEq)]
pub struct SubPath {
    pub dim: usize,
    pub start: Vec<f64>,
    pub pre: Vec<f64>,
}

impl SubPath {
    pub fn start_at(&self, i: usize) -> &[f64] {
        &self.start[i * self.dim..(i + 1) * self.dim]
    }

    pub fn pre_at(&self, i: usize) -> &[f64] {
        &self.pre[i * self.dim..(i + 1) * self.dim]
    }

    /// Values at the uniform grid nodes, `(N + 1) x d`.
    pub fn grid_values(&self, data: &PathData, steps: usize) -> Vec<f64> {
        let d = self.dim;
        let mut out = vec![0.0; (steps + 1) * d];
        out[..d].copy_from_slice(self.start_at(0));
        let k = data.sub_intervals();
        for i in 0..k {
            let m = data.sub_step[i];
            if i + 1 == k || data.sub_step[i + 1] != m {
                out[(m + 1) * d..(m + 2) * d].copy_from_slice(self.start_at(i + 1));
            }
        }
        out
    }
}

/// One Euler path on its sub-grid.
pub fn euler_path(
    coef: &dyn ForwardCoefficients,
    bundle: &PathBundle,
    path: usize,
    frozen: Option<FrozenInputs>,
    offsets: Option<&PathOffsets>,
) -> Result<SubPath, ForwardError> {
    let d = coef.state_dim();
    let k = bundle.brownian_dim();
    if coef.brownian_dim() != k {
        return Err(ForwardError::Dimension("Brownian dimension differs from bundle"));
    }
    let data = &bundle.paths[path];
    if data.x0.len() != d {
        return Err(ForwardError::Dimension("initial state dimension"));
    }
    let slots = bundle.slots();
    let n_reg = bundle.regime_channels.len();
    let sub = data.sub_intervals();
    let mut start = Vec::with_capacity((sub + 1) * d);
    let mut pre = Vec::with_capacity(sub * d);
    let mut x = data.x0.clone();
    let mut next = x.clone();
    let mut before = x.clone();
    start.extend_from_slice(&x);
    let (mut b, mut sig, mut g) = (vec![0.0; d], vec![0.0; d * k], vec![0.0; d]);
    let empty: [f64; 0] = [];
    let values = data.env.values();
    for i in 0..sub {
        let m = data.sub_step[i];
        let t0 = data.sub_times[i];
        let h = data.sub_times[i + 1] - t0;
        let (y, z, u) = match &frozen {
            Some(f) => (f.y.at(path, m), f.z.at(path, m), f.u.at(path, m)),
            None => (&empty[..], &empty[..], &empty[..]),
        };
        let masses = &data.sub_masses[i * slots..(i + 1) * slots];
        let point = EvalPoint {
            t: t0,
            path,
            step: m,
            env: &values[data.sub_env[i]],
            masses,
            regime: &data.sub_regime[i * n_reg..(i + 1) * n_reg],
            x: &x,
            y,
            z,
            u,
        };
        coef.drift(&point, &mut b);
        coef.diffusion(&point, &mut sig);
        let dw = &data.sub_dw[i * k..(i + 1) * k];
        next.copy_from_slice(&x);
        for r in 0..d {
            let mut inc = b[r] * h;
            for c in 0..k {
                inc += sig[r * k + c] * dw[c];
            }
            next[r] += inc;
        }
        for (s, &mass) in masses.iter().enumerate() {
            if mass == 0.0 {
                continue;
            }
            coef.jump(&point, s, bundle.layout.mark(s), &mut g);
            for r in 0..d {
                next[r] -= g[r] * mass * h;
            }
        }
        if let Some(o) = offsets {
            for r in 0..d {
                let mut inc = (o.drift[i * d + r] - o.compensator[i * d + r]) * h;
                for c in 0..k {
                    inc += o.diffusion[(i * d + r) * k + c] * dw[c];
                }
                next[r] += inc;
            }
        }
        pre.extend_from_slice(&next);
        let lo = data.jump_offsets[i];
        let jumps = data.jumps_after(i);
        if !jumps.is_empty() {
            before.copy_from_slice(&next);
            let t1 = data.sub_times[i + 1];
            let jp = EvalPoint { t: t1, x: &before, ..point };
            for (j, &s) in jumps.iter().enumerate() {
                coef.jump(&jp, s, bundle.layout.mark(s), &mut g);
                for r in 0..d {
                    next[r] += g[r];
                }
                if let Some(o) = offsets {
                    for r in 0..d {
                        next[r] += o.jumps[(lo + j) * d + r];
                    }
                }
            }
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(ForwardError::NonFinite { path, step: m, time: t0 });
        }
        core::mem::swap(&mut x, &mut next);
        start.extend_from_slice(&x);
    }
    Ok(SubPath { dim: d, start, pre })
}

/// One Euler path; returns the states at the uniform grid nodes (right
/// values, after any jump at the node).
pub fn euler_simulate(
    coef: &dyn ForwardCoefficients,
    bundle: &PathBundle,
    path: usize,
    frozen: Option<FrozenInputs>,
) -> Result<Vec<f64>, ForwardError> {
    let sp = euler_path(coef, bundle, path, frozen, None)?;
    Ok(sp.grid_values(&bundle.paths[path], bundle.steps()))
}

/// All paths of the bundle.
pub fn simulate_forward(
    coef: &dyn ForwardCoefficients,
    bundle: &PathBundle,
    frozen: Option<FrozenInputs>,
) -> Result<GridProcess, ForwardError> {
    Ok(simulate_forward_full(coef, bundle, frozen, None)?.0)
}

/// All paths, also returning the sub-grid paths.
pub fn simulate_forward_full(
    coef: &dyn ForwardCoefficients,
    bundle: &PathBundle,
    frozen: Option<FrozenInputs>,
    offsets: Option<&[PathOffsets]>,
) -> Result<(GridProcess, Vec<SubPath>), ForwardError> {
    let d = coef.state_dim();
    let nodes = bundle.steps() + 1;
    if offsets.is_some_and(|o| o.len() != bundle.n_paths()) {
        return Err(ForwardError::Dimension("one offset set per path"));
    }
    let mut x = GridProcess::zeros(bundle.n_paths(), nodes, d);
    let mut subs = Vec::with_capacity(bundle.n_paths());
    for p in 0..bundle.n_paths() {
        let sp = euler_path(coef, bundle, p, frozen, offsets.map(|o| &o[p]))?;
        let values = sp.grid_values(&bundle.paths[p], bundle.steps());
        for (m, v) in values.chunks_exact(x.dim()).enumerate() {
            x.at_mut(p, m).copy_from_slice(v);
        }
        subs.push(sp);
    }
    Ok((x, subs))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MomentReport {
    /// Per node and component.
    pub mean: Vec<f64>,
    /// Unbiased sample variance per node and component.
    pub variance: Vec<f64>,
    /// `E|X_t|^2` per node.
    pub second_moment: Vec<f64>,
    /// `E[sup_t |X_t|^2]` over grid nodes.
    pub sup_second_moment: f64,
    pub dim: usize,
    pub paths: usize,
}

impl MomentReport {
    pub fn mean_at(&self, node: usize) -> &[f64] {
        &self.mean[node * self.dim..(node + 1) * self.dim]
    }

    /// Standard error of the mean of one component.
    pub fn mean_se(&self, node: usize, comp: usize) -> f64 {
        libm::sqrt(self.variance[node * self.dim + comp] / self.paths as f64)
    }
}

pub fn moment_report(x: &GridProcess) -> Result<MomentReport, ForwardError> {
    let (p, nodes, d) = (x.paths(), x.nodes(), x.dim());
    if p < 2 {
        return Err(ForwardError::TooFewPaths);
    }
    let mut mean = vec![0.0; nodes * d];
    let mut second = vec![0.0; nodes];
    let mut sup = 0.0;
    for path in 0..p {
        let mut best = 0.0f64;
        for m in 0..nodes {
            let v = x.at(path, m);
            let sq: f64 = v.iter().map(|a| a * a).sum();
            second[m] += sq;
            best = best.max(sq);
            for c in 0..d {
                mean[m * d + c] += v[c];
            }
        }
        sup += best;
    }
    let pf = p as f64;
    mean.iter_mut().for_each(|v| *v /= pf);
    second.iter_mut().for_each(|v| *v /= pf);
    let mut variance = vec![0.0; nodes * d];
    for path in 0..p {
        for m in 0..nodes {
            let v = x.at(path, m);
            for c in 0..d {
                let e = v[c] - mean[m * d + c];
                variance[m * d + c] += e * e;
            }
        }
    }
    variance.iter_mut().for_each(|v| *v /= pf - 1.0);
    Ok(MomentReport { mean, variance, second_moment: second, sup_second_moment: sup / pf, dim: d, paths: p })
}
