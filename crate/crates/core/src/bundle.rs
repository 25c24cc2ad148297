//! Per-path noise shared by the forward and backward solvers.
//!
//! Each path carries a sub-grid formed by the uniform grid, its event times
//! and its environment breakpoints. Brownian values are drawn on the uniform
//! grid first and then filled in at the extra nodes by Brownian bridges, so
//! the uniform-grid increments do not depend on the events.

use alloc::sync::Arc;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::intensity::ChannelKernel;
use crate::measures::{measure_functional, EnvironmentPath, EnvironmentSpec, Functional, MeasureError, Side};
use crate::pointproc::{
    intensity_masses_after, regime_state_after, simulate_channels, EventLog, MarkedEvent, PointProcessError, SlotLayout,
};
use crate::rng::{substream, Purpose};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum BundleError {
    #[error("invalid bundle spec: {0}")]
    InvalidSpec(&'static str),
    #[error(transparent)]
    Measure(#[from] MeasureError),
    #[error(transparent)]
    PointProcess(#[from] PointProcessError),
}

#[derive(Debug, Clone, PartialEq)]
pub enum InitialState {
    Fixed(Vec<f64>),
    /// `X_0` drawn from the initial environment `mu_0`.
    FromEnvironment,
}

#[derive(Debug, Clone)]
pub struct BundleSpec {
    pub horizon: f64,
    pub steps: usize,
    pub paths: usize,
    pub seed: u64,
    pub brownian_dim: usize,
    pub state_dim: usize,
    pub initial: InitialState,
    pub environment: EnvironmentSpec,
    pub channels: Vec<ChannelKernel>,
    /// Environment functionals cached on the grid for regression features.
    pub env_features: Vec<Functional>,
}

impl BundleSpec {
    pub fn validate(&self) -> Result<(), BundleError> {
        if !(self.horizon > 0.0) || !self.horizon.is_finite() {
            return Err(BundleError::InvalidSpec("horizon must be positive"));
        }
        if self.steps < 1 {
            return Err(BundleError::InvalidSpec("need at least one grid step"));
        }
        if self.paths < 1 {
            return Err(BundleError::InvalidSpec("need at least one path"));
        }
        if self.state_dim == 0 {
            return Err(BundleError::InvalidSpec("state dimension must be positive"));
        }
        match &self.initial {
            InitialState::Fixed(x) if x.len() != self.state_dim => {
                Err(BundleError::InvalidSpec("initial state has wrong dimension"))
            }
            InitialState::FromEnvironment if self.environment.initial().dim() != self.state_dim => {
                Err(BundleError::InvalidSpec("environment dimension differs from state dimension"))
            }
            _ => Ok(()),
        }
    }

    /// Uniform grid `t_m = T m / N`.
    pub fn grid(&self) -> Vec<f64> {
        let n = self.steps;
        (0..=n).map(|m| if m == n { self.horizon } else { self.horizon * m as f64 / n as f64 }).collect()
    }

    pub fn regime_channels(&self) -> Vec<usize> {
        self.channels
            .iter()
            .enumerate()
            .filter(|(_, c)| matches!(c, ChannelKernel::Regime { .. }))
            .map(|(j, _)| j)
            .collect()
    }
}

/// Noise and derived quantities of one path.
///
/// Sub-grid arrays are indexed by sub-interval `i` (between nodes
/// `sub_times[i]` and `sub_times[i+1]`); grid arrays by grid step `m` or grid
/// node `m`. Multi-component entries are row-major with the component last.
#[derive(Debug, Clone, PartialEq)]
pub struct PathData {
    pub env: Arc<EnvironmentPath>,
    pub log: EventLog,
    pub x0: Vec<f64>,
    pub sub_times: Vec<f64>,
    /// Grid step containing each sub-interval.
    pub sub_step: Vec<usize>,
    /// Index of the environment value in force on each sub-interval.
    pub sub_env: Vec<usize>,
    /// Brownian increments, `k` per sub-interval.
    pub sub_dw: Vec<f64>,
    /// Kernel masses `K(s_i+, slot)` frozen over each sub-interval (the
    /// left-endpoint value, known at `s_i`).
    pub sub_masses: Vec<f64>,
    /// Regime states in force on each sub-interval, one per regime channel.
    pub sub_regime: Vec<usize>,
    /// Jumps at node `sub_times[i+1]` are `jump_slots[jump_offsets[i]..jump_offsets[i+1]]`.
    pub jump_offsets: Vec<usize>,
    pub jump_slots: Vec<usize>,
    /// Grid increments `W_{t_{m+1}} - W_{t_m}`.
    pub dw: Vec<f64>,
    /// `W_{t_m}`.
    pub w: Vec<f64>,
    /// Event counts per slot on `(t_m, t_{m+1}]`.
    pub dn: Vec<f64>,
    /// Left-endpoint compensator per slot on the grid step (sum over sub-intervals).
    pub comp: Vec<f64>,
    /// Kernel masses `K(t_m+, slot)` frozen over the grid step, per slot.
    pub masses: Vec<f64>,
    /// `N_{t_m}` per channel.
    pub counts: Vec<f64>,
    /// Regime states at `t_m` (right value), one per regime channel.
    pub regime: Vec<usize>,
    /// Cached environment functionals of `mu_{t_m}`.
    pub env_features: Vec<f64>,
}

impl PathData {
    pub fn sub_intervals(&self) -> usize {
        self.sub_step.len()
    }

    pub fn jumps_after(&self, i: usize) -> &[usize] {
        &self.jump_slots[self.jump_offsets[i]..self.jump_offsets[i + 1]]
    }
}

/// Node-major copies of the grid-level path data: entry `(m, path)` of
/// every path is contiguous in `m`, matching the backward sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMajor {
    paths: usize,
    k: usize,
    slots: usize,
    channels: usize,
    regimes: usize,
    features: usize,
    dw: Vec<f64>,
    w: Vec<f64>,
    jump: Vec<f64>,
    masses: Vec<f64>,
    counts: Vec<f64>,
    regime: Vec<usize>,
    env_index: Vec<usize>,
    env_features: Vec<f64>,
}

impl NodeMajor {
    fn new(grid: &[f64], paths: &[PathData], k: usize, slots: usize, channels: usize, regimes: usize, features: usize) -> Result<Self, BundleError> {
        let steps = grid.len() - 1;
        let p = paths.len();
        let mut n = Self {
            paths: p,
            k,
            slots,
            channels,
            regimes,
            features,
            dw: Vec::with_capacity(steps * p * k),
            w: Vec::with_capacity((steps + 1) * p * k),
            jump: Vec::with_capacity(steps * p * slots),
            masses: Vec::with_capacity(steps * p * slots),
            counts: Vec::with_capacity((steps + 1) * p * channels),
            regime: Vec::with_capacity((steps + 1) * p * regimes),
            env_index: Vec::with_capacity(steps * p),
            env_features: Vec::with_capacity((steps + 1) * p * features),
        };
        for m in 0..=steps {
            for d in paths {
                n.w.extend_from_slice(&d.w[m * k..(m + 1) * k]);
                n.counts.extend_from_slice(&d.counts[m * channels..(m + 1) * channels]);
                n.regime.extend_from_slice(&d.regime[m * regimes..(m + 1) * regimes]);
                n.env_features.extend_from_slice(&d.env_features[m * features..(m + 1) * features]);
                if m == steps {
                    continue;
                }
                n.dw.extend_from_slice(&d.dw[m * k..(m + 1) * k]);
                for s in 0..slots {
                    let i = m * slots + s;
                    n.jump.push(d.dn[i] - d.comp[i]);
                }
                n.masses.extend_from_slice(&d.masses[m * slots..(m + 1) * slots]);
                let idx = d.env.index_at(grid[m], Side::Right).map_err(BundleError::Measure)?;
                n.env_index.push(idx);
            }
        }
        Ok(n)
    }

    pub fn dw(&self, m: usize, path: usize) -> &[f64] {
        let o = (m * self.paths + path) * self.k;
        &self.dw[o..o + self.k]
    }

    pub fn w(&self, m: usize, path: usize) -> &[f64] {
        let o = (m * self.paths + path) * self.k;
        &self.w[o..o + self.k]
    }

    /// Compensated increments `dN - compensator` per slot on step `m`.
    pub fn jump(&self, m: usize, path: usize) -> &[f64] {
        let o = (m * self.paths + path) * self.slots;
        &self.jump[o..o + self.slots]
    }

    pub fn masses(&self, m: usize, path: usize) -> &[f64] {
        let o = (m * self.paths + path) * self.slots;
        &self.masses[o..o + self.slots]
    }

    pub fn counts(&self, m: usize, path: usize) -> &[f64] {
        let o = (m * self.paths + path) * self.channels;
        &self.counts[o..o + self.channels]
    }

    pub fn regime(&self, m: usize, path: usize) -> &[usize] {
        let o = (m * self.paths + path) * self.regimes;
        &self.regime[o..o + self.regimes]
    }

    /// Index into the path's environment values in force at `t_m`.
    pub fn env_index(&self, m: usize, path: usize) -> usize {
        self.env_index[m * self.paths + path]
    }

    pub fn env_features(&self, m: usize, path: usize) -> &[f64] {
        let o = (m * self.paths + path) * self.features;
        &self.env_features[o..o + self.features]
    }
}

#[derive(Debug, Clone)]
pub struct PathBundle {
    pub spec: BundleSpec,
    pub grid: Vec<f64>,
    pub layout: SlotLayout,
    pub regime_channels: Vec<usize>,
    pub paths: Vec<PathData>,
    pub by_node: NodeMajor,
}

impl PathBundle {
    /// Simulates every path sequentially.
    pub fn build(spec: BundleSpec) -> Result<Self, BundleError> {
        spec.validate()?;
        let shared = shared_environment(&spec)?;
        let paths = (0..spec.paths)
            .map(|p| simulate_path_with(&spec, p, shared.as_ref()))
            .collect::<Result<Vec<_>, _>>()?;
        Self::from_paths(spec, paths)
    }

    /// Assembles a bundle from separately simulated paths (for example
    /// produced in parallel by [`simulate_path`]).
    pub fn from_paths(spec: BundleSpec, paths: Vec<PathData>) -> Result<Self, BundleError> {
        spec.validate()?;
        if paths.len() != spec.paths {
            return Err(BundleError::InvalidSpec("path count differs from spec"));
        }
        let grid = spec.grid();
        let layout = SlotLayout::from_kernels(&spec.channels);
        let regime_channels = spec.regime_channels();
        let by_node = NodeMajor::new(
            &grid,
            &paths,
            spec.brownian_dim,
            layout.slots(),
            spec.channels.len(),
            regime_channels.len(),
            spec.env_features.len(),
        )?;
        Ok(Self { grid, layout, regime_channels, spec, paths, by_node })
    }

    pub fn n_paths(&self) -> usize {
        self.paths.len()
    }

    pub fn steps(&self) -> usize {
        self.grid.len() - 1
    }

    pub fn dt(&self, m: usize) -> f64 {
        self.grid[m + 1] - self.grid[m]
    }

    pub fn brownian_dim(&self) -> usize {
        self.spec.brownian_dim
    }

    pub fn slots(&self) -> usize {
        self.layout.slots()
    }

    pub fn horizon(&self) -> f64 {
        self.spec.horizon
    }
}

fn shared_environment(spec: &BundleSpec) -> Result<Option<Arc<EnvironmentPath>>, BundleError> {
    if spec.environment.is_deterministic() {
        let mut rng = substream(spec.seed, 0, Purpose::Environment);
        Ok(Some(Arc::new(spec.environment.sample(spec.horizon, &mut rng)?)))
    } else {
        Ok(None)
    }
}

/// Simulates path `index` from its own substreams.
pub fn simulate_path(spec: &BundleSpec, index: usize) -> Result<PathData, BundleError> {
    spec.validate()?;
    let shared = shared_environment(spec)?;
    simulate_path_with(spec, index, shared.as_ref())
}

fn simulate_path_with(
    spec: &BundleSpec,
    index: usize,
    shared: Option<&Arc<EnvironmentPath>>,
) -> Result<PathData, BundleError> {
    let p = index as u64;
    let env = match shared {
        Some(e) => Arc::clone(e),
        None => {
            let mut rng = substream(spec.seed, p, Purpose::Environment);
            Arc::new(spec.environment.sample(spec.horizon, &mut rng)?)
        }
    };
    let x0 = match &spec.initial {
        InitialState::Fixed(x) => x.clone(),
        InitialState::FromEnvironment => {
            let mut rng = substream(spec.seed, p, Purpose::InitialState);
            let nu = env.initial();
            let cell = crate::intensity::MarkLaw::new(vec![0.0; nu.len()], nu.weights().to_vec())
                .map_err(|_| BundleError::InvalidSpec("initial environment weights"))?
                .cell_for(rng.random());
            nu.point(cell).to_vec()
        }
    };
    let log = simulate_channels(&spec.channels, &env, spec.horizon, spec.seed, p)?;
    let layout = SlotLayout::from_kernels(&spec.channels);
    let grid = spec.grid();
    let n = spec.steps;
    let k = spec.brownian_dim;
    let slots = layout.slots();
    let regimes = spec.regime_channels();
    let channel_events: Vec<_> = (0..spec.channels.len()).map(|j| log.channel_events(j)).collect();

    // Sub-grid nodes with their grid step.
    let mut nodes: Vec<f64> = grid.clone();
    nodes.extend(log.events().iter().map(|e| e.time));
    nodes.extend(env.breakpoints().iter().copied());
    nodes.sort_by(|a, b| a.total_cmp(b));
    nodes.dedup();
    let sub = nodes.len() - 1;
    let mut sub_step = Vec::with_capacity(sub);
    for i in 0..sub {
        let m = grid.partition_point(|&g| g <= nodes[i]).saturating_sub(1).min(n - 1);
        sub_step.push(m);
    }

    // Brownian values on the grid, then bridges at interior sub-nodes.
    let mut rng = substream(spec.seed, p, Purpose::Wiener);
    let mut w = vec![0.0; (n + 1) * k];
    let mut dw = vec![0.0; n * k];
    for m in 0..n {
        let sd = libm::sqrt(grid[m + 1] - grid[m]);
        for c in 0..k {
            let z: f64 = StandardNormal.sample(&mut rng);
            dw[m * k + c] = sd * z;
            w[(m + 1) * k + c] = w[m * k + c] + sd * z;
        }
    }
    let mut node_w = vec![0.0; (sub + 1) * k];
    {
        let mut i = 0;
        for m in 0..=n {
            // Advance to the node equal to grid[m].
            while nodes[i] < grid[m] {
                i += 1;
            }
            node_w[i * k..(i + 1) * k].copy_from_slice(&w[m * k..(m + 1) * k]);
        }
        let mut start = 0;
        for m in 0..n {
            let mut end = start;
            while nodes[end] < grid[m + 1] {
                end += 1;
            }
            let t_end = nodes[end];
            for j in start + 1..end {
                let (s_prev, s) = (nodes[j - 1], nodes[j]);
                let frac = (s - s_prev) / (t_end - s_prev);
                let var = (s - s_prev) * (t_end - s) / (t_end - s_prev);
                for c in 0..k {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    let prev = node_w[(j - 1) * k + c];
                    let target = node_w[end * k + c];
                    node_w[j * k + c] = prev + frac * (target - prev) + libm::sqrt(var) * z;
                }
            }
            start = end;
        }
    }
    let mut sub_dw = vec![0.0; sub * k];
    for i in 0..sub {
        for c in 0..k {
            sub_dw[i * k + c] = node_w[(i + 1) * k + c] - node_w[i * k + c];
        }
    }
    let mut sub_env = Vec::with_capacity(sub);
    let mut sub_masses = vec![0.0; sub * slots];
    let mut sub_regime = vec![0usize; sub * regimes.len()];
    for i in 0..sub {
        let s = nodes[i];
        sub_env.push(env.index_at(s, Side::Right)?);
        for (j, kern) in spec.channels.iter().enumerate() {
            let masses = intensity_masses_after(kern, &channel_events[j], s, &env)?;
            for (c, mval) in masses.into_iter().enumerate() {
                sub_masses[i * slots + layout.slot(j, c)] = mval;
            }
        }
        for (r, &j) in regimes.iter().enumerate() {
            sub_regime[i * regimes.len() + r] = regime_after(&spec.channels[j], &channel_events[j], s);
        }
    }
    let mut jump_offsets = Vec::with_capacity(sub + 1);
    let mut jump_slots = Vec::new();
    jump_offsets.push(0);
    {
        let evs = log.events();
        let mut e = 0;
        for i in 0..sub {
            let end = nodes[i + 1];
            while e < evs.len() && evs[e].time <= end {
                jump_slots.push(layout.slot(evs[e].channel, evs[e].cell));
                e += 1;
            }
            jump_offsets.push(jump_slots.len());
        }
    }

    let mut dn = vec![0.0; n * slots];
    let mut comp = vec![0.0; n * slots];
    for i in 0..sub {
        let m = sub_step[i];
        let h = nodes[i + 1] - nodes[i];
        for s in 0..slots {
            comp[m * slots + s] += sub_masses[i * slots + s] * h;
        }
        for &s in &jump_slots[jump_offsets[i]..jump_offsets[i + 1]] {
            dn[m * slots + s] += 1.0;
        }
    }
    let mut masses = vec![0.0; n * slots];
    for m in 0..n {
        for (j, kern) in spec.channels.iter().enumerate() {
            let ms = intensity_masses_after(kern, &channel_events[j], grid[m], &env)?;
            for (c, mval) in ms.into_iter().enumerate() {
                masses[m * slots + layout.slot(j, c)] = mval;
            }
        }
    }
    let channels = spec.channels.len();
    let mut counts = vec![0.0; (n + 1) * channels];
    let mut regime = vec![0usize; (n + 1) * regimes.len()];
    let mut env_features = vec![0.0; (n + 1) * spec.env_features.len()];
    for m in 0..=n {
        for j in 0..channels {
            counts[m * channels + j] = channel_events[j].iter().filter(|e| e.time <= grid[m]).count() as f64;
        }
        for (r, &j) in regimes.iter().enumerate() {
            regime[m * regimes.len() + r] = regime_after(&spec.channels[j], &channel_events[j], grid[m]);
        }
        let nu = env.at(grid[m], Side::Right)?;
        for (f, func) in spec.env_features.iter().enumerate() {
            env_features[m * spec.env_features.len() + f] = measure_functional(nu, func)?;
        }
    }
    Ok(PathData {
        env,
        log,
        x0,
        sub_times: nodes,
        sub_step,
        sub_env,
        sub_dw,
        sub_masses,
        sub_regime,
        jump_offsets,
        jump_slots,
        dw,
        w,
        dn,
        comp,
        masses,
        counts,
        regime,
        env_features,
    })
}

fn regime_after(kern: &ChannelKernel, events: &[MarkedEvent], t: f64) -> usize {
    match kern {
        ChannelKernel::Regime { initial, .. } => regime_state_after(*initial, events, t),
        ChannelKernel::Additive(_) => 0,
    }
}
