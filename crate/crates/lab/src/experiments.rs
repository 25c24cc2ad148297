//! The experiments behind `run`: each turns a resolved config into result
//! tables and pass/fail checks.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;
use rayon::prelude::*;

use fbsde_core::backward_bsde::{
    jump_increment, lsmc_solve, norm_equivalence_check, BackwardSolution, BasisSpec, ClosureDriver, Feature,
    WeightedNormParams,
};
use fbsde_core::bundle::{BundleSpec, InitialState, PathBundle};
use fbsde_core::coupled::{
    check_g_monotonicity, continuation_solve, ito_duality_check, monotonicity_slack, relative_distance, sequential_solve,
    solution_legs, BackwardLegs, ClosureTerminal, CoupledSolution, FbsdeModel, ForwardLegs, Monotonicity,
    MonotonicityTuple, SolverReport, StatePoint, TupleSampler,
};
use fbsde_core::forward_sde::{moment_report, simulate_forward, ClosureForward};
use fbsde_core::intensity::{AdditiveKernel, ChannelKernel, RateLaw, RegimeKernel};
use fbsde_core::math::{ks_pvalue, ks_statistic, mean_and_se, NormalEquations};
use fbsde_core::measures::{EmpiricalMeasure, EnvironmentPath, EnvironmentSpec};
use fbsde_core::models::{
    build_lq_model, riccati_closed_form, riccati_errors, riccati_reference, simulate_regime_chain, LqParams,
    RiccatiReference,
};
use fbsde_core::pointproc::{additive_cumulative, simulate_channels, time_rescale_diagnostic};
use fbsde_core::process::GridProcess;
use fbsde_core::rng::{substream, Purpose};

use crate::config::{
    ConstantDualitySpec, ExperimentKind, HawkesSpec, LqSpec, ModelSpec, OneDirectionalSpec, OuSpec, PoissonSpec,
    RegimeSpec, RunConfig,
};
use crate::error::{solver, LabError};

/// One emitted tensor: a CSV file with a one-line header.
#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub name: String,
    pub header: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

impl Table {
    pub fn new(name: &str, header: &[&str]) -> Self {
        Self { name: name.to_string(), header: header.iter().map(|s| s.to_string()).collect(), rows: Vec::new() }
    }

    pub fn push(&mut self, row: Vec<f64>) {
        debug_assert_eq!(row.len(), self.header.len());
        self.rows.push(row);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: String,
    pub passed: bool,
    pub values: BTreeMap<String, f64>,
}

impl Check {
    pub fn new(name: &str, passed: bool) -> Self {
        Self { name: name.to_string(), passed, values: BTreeMap::new() }
    }

    pub fn with(mut self, key: &str, v: f64) -> Self {
        self.values.insert(key.to_string(), v);
        self
    }

    /// `|value - target| <= tol`.
    pub fn within(name: &str, value: f64, target: f64, tol: f64) -> Self {
        Check::new(name, (value - target).abs() <= tol).with("value", value).with("target", target).with("tolerance", tol)
    }

    /// `value <= bound`.
    pub fn at_most(name: &str, value: f64, bound: f64) -> Self {
        Check::new(name, value <= bound).with("value", value).with("bound", bound)
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Outcome {
    pub tables: Vec<Table>,
    pub checks: Vec<Check>,
    pub notes: Vec<String>,
}

impl Outcome {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Runs the experiment named by `cfg` on a pool of `cfg.threads` workers.
pub fn run_experiment(cfg: &RunConfig) -> Result<Outcome, LabError> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| LabError::config("threads", e.to_string()))?;
    pool.install(|| dispatch(cfg))
}

fn dispatch(cfg: &RunConfig) -> Result<Outcome, LabError> {
    match (cfg.kind, &cfg.model) {
        (ExperimentKind::SimulatePointproc, ModelSpec::Poisson(m)) => poisson_experiment(cfg, m),
        (ExperimentKind::SimulatePointproc, ModelSpec::Hawkes(m)) => hawkes_experiment(cfg, m),
        (ExperimentKind::SimulateRegime, ModelSpec::Regime(m)) => regime_experiment(cfg, m),
        (ExperimentKind::SolveForward, ModelSpec::Ou(m)) => forward_experiment(cfg, m),
        (ExperimentKind::SolveBackward, ModelSpec::Ou(m)) => backward_experiment(cfg, m),
        (ExperimentKind::SolveCoupled, ModelSpec::Lq(m)) => coupled_lq_experiment(cfg, m, false),
        (ExperimentKind::SolveCoupled, ModelSpec::OneDirectional(m)) => one_directional_experiment(cfg, m),
        (ExperimentKind::VerifyMonotonicity, ModelSpec::Lq(m)) => monotonicity_experiment(cfg, m),
        (ExperimentKind::VerifyDuality, ModelSpec::ConstantDuality(m)) => constant_duality_experiment(cfg, m),
        (ExperimentKind::VerifyDuality, ModelSpec::Lq(m)) => lq_duality_experiment(cfg, m),
        (ExperimentKind::ReproduceLq, ModelSpec::Lq(m)) => coupled_lq_experiment(cfg, m, true),
        (kind, model) => Err(LabError::config("model.type", format!("{} does not run on model {}", kind.name(), model.name()))),
    }
}

fn dirac(x: f64) -> EmpiricalMeasure {
    EmpiricalMeasure::dirac(&[x]).expect("one-dimensional dirac")
}

fn constant_env(horizon: f64) -> Result<EnvironmentPath, LabError> {
    EnvironmentPath::constant(horizon, dirac(0.0)).map_err(solver("measures", "environment"))
}

/// Bundle with one Brownian component, state dimension 1, environment
/// `delta_0` and the given channels.
pub fn scalar_bundle(cfg: &RunConfig, x0: f64, channels: Vec<ChannelKernel>) -> Result<PathBundle, LabError> {
    PathBundle::build(BundleSpec {
        horizon: cfg.horizon,
        steps: cfg.steps,
        paths: cfg.paths,
        seed: cfg.seed,
        brownian_dim: 1,
        state_dim: 1,
        initial: InitialState::Fixed(vec![x0]),
        environment: EnvironmentSpec::Constant(dirac(0.0)),
        channels,
        env_features: Vec::new(),
    })
    .map_err(solver("pointproc", "path bundle"))
}

fn emitted(cfg: &RunConfig, total: usize) -> usize {
    cfg.emit_paths.min(total)
}

/// Rescaled interarrivals of one path and the compensator left after its
/// last event.
struct Rescaled {
    gaps: Vec<f64>,
    tail: f64,
}

fn rescale(kernel: &AdditiveKernel, times: &[f64], env: &EnvironmentPath, horizon: f64) -> Result<Rescaled, LabError> {
    let cumulative = additive_cumulative(kernel, times, env);
    let r = time_rescale_diagnostic(times, &cumulative).map_err(solver("pointproc", "time rescaling"))?;
    let tail = cumulative(horizon) - times.last().map_or(0.0, |&t| cumulative(t));
    Ok(Rescaled { gaps: r.interarrivals, tail })
}

/// Joins rescaled paths end to end, carrying the censored tail of each path
/// into the first gap of the next, and tests the first `wanted` gaps against
/// Exp(1). Each rescaled path is a unit Poisson process up to its total
/// compensator, so the joined sequence is one as well.
fn pooled_ks<'a>(name: &str, paths: impl Iterator<Item = &'a Rescaled>, wanted: usize) -> Check {
    let mut s = Vec::with_capacity(wanted);
    let mut carry = 0.0;
    for r in paths {
        if s.len() >= wanted {
            break;
        }
        match r.gaps.split_first() {
            Some((first, rest)) => {
                s.push(carry + first);
                s.extend_from_slice(rest);
                carry = r.tail;
            }
            None => carry += r.tail,
        }
    }
    s.truncate(wanted);
    let d = ks_statistic(&s, |x| if x <= 0.0 { 0.0 } else { -(-x).exp_m1() });
    let p = ks_pvalue(s.len(), d);
    Check::new(name, s.len() >= wanted && p > 0.01).with("events", s.len() as f64).with("ks_statistic", d).with("p_value", p)
}

fn event_table(cfg: &RunConfig, kernels: &[ChannelKernel], env: &EnvironmentPath) -> Result<Table, LabError> {
    let mut t = Table::new("events", &["path", "time", "channel", "cell", "mark"]);
    for p in 0..emitted(cfg, cfg.paths) {
        let log = simulate_channels(kernels, env, cfg.horizon, cfg.seed, p as u64).map_err(solver("pointproc", "thinning"))?;
        for e in log.events() {
            t.push(vec![p as f64, e.time, e.channel as f64, e.cell as f64, e.mark]);
        }
    }
    Ok(t)
}

fn poisson_experiment(cfg: &RunConfig, m: &PoissonSpec) -> Result<Outcome, LabError> {
    let kernel = AdditiveKernel::constant(m.rate);
    let kernels = vec![ChannelKernel::Additive(kernel.clone())];
    let env = constant_env(cfg.horizon)?;
    let per_path: Vec<(f64, Rescaled)> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let log = simulate_channels(&kernels, &env, cfg.horizon, cfg.seed, p as u64).map_err(solver("pointproc", "thinning"))?;
            let times = log.channel_times(0);
            Ok((times.len() as f64, rescale(&kernel, &times, &env, cfg.horizon)?))
        })
        .collect::<Result<_, LabError>>()?;
    let mut counts = Table::new("counts", &["path", "count"]);
    for (p, (c, _)) in per_path.iter().enumerate() {
        counts.push(vec![p as f64, *c]);
    }
    let values: Vec<f64> = per_path.iter().map(|(c, _)| *c).collect();
    let (mean, se) = mean_and_se(&values);
    let target = m.rate * cfg.horizon;
    let checks = vec![
        Check::within("mean count", mean, target, 3.0 * se).with("se", se),
        pooled_ks("time-rescaling KS", per_path.iter().map(|(_, r)| r), cfg.checks.ks_events),
    ];
    Ok(Outcome { tables: vec![counts, event_table(cfg, &kernels, &env)?], checks, notes: Vec::new() })
}

fn hawkes_experiment(cfg: &RunConfig, m: &HawkesSpec) -> Result<Outcome, LabError> {
    let lag = m.lag.kernel();
    let branching = lag.total_mass();
    let kernel = AdditiveKernel::hawkes(m.base, lag);
    let kernels = vec![ChannelKernel::Additive(kernel.clone())];
    let env = constant_env(cfg.horizon)?;
    let window = cfg.horizon - m.burn_in;
    let per_path: Vec<(f64, f64, Rescaled)> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let log = simulate_channels(&kernels, &env, cfg.horizon, cfg.seed, p as u64).map_err(solver("pointproc", "thinning"))?;
            let times = log.channel_times(0);
            let late = times.iter().filter(|&&t| t > m.burn_in).count() as f64;
            Ok((times.len() as f64, late, rescale(&kernel, &times, &env, cfg.horizon)?))
        })
        .collect::<Result<_, LabError>>()?;
    let mut counts = Table::new("counts", &["path", "count", "count_after_burn_in"]);
    for (p, (c, late, _)) in per_path.iter().enumerate() {
        counts.push(vec![p as f64, *c, *late]);
    }
    let rates: Vec<f64> = per_path.iter().map(|(_, late, _)| late / window).collect();
    let (rate, se) = mean_and_se(&rates);
    let target = m.base / (1.0 - branching);
    let checks = vec![
        Check::within("long-run rate", rate, target, 3.0 * se).with("se", se).with("branching_ratio", branching),
        pooled_ks("time-rescaling KS", per_path.iter().map(|(_, _, r)| r), cfg.checks.ks_events),
    ];
    let notes = vec![format!("rate measured on ({}, {}] after the burn-in", m.burn_in, cfg.horizon)];
    Ok(Outcome { tables: vec![counts, event_table(cfg, &kernels, &env)?], checks, notes })
}

/// Off-diagonal rates with the diagonal replaced by minus the row sums.
fn generator(spec: &RegimeSpec) -> Vec<f64> {
    let n = spec.states();
    let mut q = spec.rates.clone();
    for i in 0..n {
        q[i * n + i] = -(0..n).filter(|&j| j != i).map(|j| spec.rates[i * n + j]).sum::<f64>();
    }
    q
}

/// Stationary law: least-squares solution of `pi Q = 0`, `sum pi = 1`.
pub fn stationary_law(q: &[f64], n: usize) -> Result<Vec<f64>, LabError> {
    let mut ne = NormalEquations::new(n, 1);
    for j in 0..n {
        let col: Vec<f64> = (0..n).map(|i| q[i * n + j]).collect();
        ne.add_row(&col, &[0.0]);
    }
    ne.add_row(&vec![1.0; n], &[1.0]);
    let fit = ne.solve().map_err(solver("models", "stationary law"))?;
    if fit.rank_deficient() {
        return Err(LabError::Solver { module: "models", stage: "stationary law", message: "chain is not irreducible".into() });
    }
    Ok(fit.coef)
}

fn regime_experiment(cfg: &RunConfig, m: &RegimeSpec) -> Result<Outcome, LabError> {
    let n = m.states();
    let q = generator(m);
    let exit: Vec<f64> = (0..n).map(|i| -q[i * n + i]).collect();
    let h0 = exit.iter().copied().fold(0.0, f64::max);
    let kernel = RegimeKernel::new(n, RateLaw::Constant(m.rates.clone()), h0).map_err(solver("intensity", "regime kernel"))?;
    let pi = if m.stationary_start { Some(stationary_law(&q, n)?) } else { None };
    let env = constant_env(cfg.horizon)?;
    let paths: Vec<_> = (0..cfg.paths)
        .into_par_iter()
        .map(|p| {
            let start = match &pi {
                Some(pi) => {
                    let u: f64 = substream(cfg.seed, p as u64, Purpose::InitialState).random();
                    let mut acc = 0.0;
                    pi.iter().position(|&w| { acc += w; u < acc }).unwrap_or(n - 1)
                }
                None => m.initial,
            };
            let mut rng = substream(cfg.seed, p as u64, Purpose::Regime);
            simulate_regime_chain(&kernel, &env, start, cfg.horizon, &mut rng).map_err(solver("models", "regime chain"))
        })
        .collect::<Result<_, LabError>>()?;

    let mut header = vec!["path".to_string()];
    header.extend((0..n).map(|s| format!("occupation_{s}")));
    header.push("transitions".to_string());
    let mut occ = Table { name: "occupation".into(), header, rows: Vec::new() };
    let mut holds = Vec::new();
    for (p, path) in paths.iter().enumerate() {
        let mut row = vec![p as f64];
        row.extend((0..n).map(|s| path.occupation(s) / cfg.horizon));
        row.push(path.transitions() as f64);
        occ.push(row);
        if holds.len() < cfg.checks.ks_events {
            holds.extend(path.holding_times(0));
        }
    }
    let mut chain = Table::new("chain", &["path", "time", "state"]);
    for (p, path) in paths.iter().take(emitted(cfg, cfg.paths)).enumerate() {
        for (t, s) in path.times.iter().zip(&path.states) {
            chain.push(vec![p as f64, *t, *s as f64]);
        }
    }

    let mut checks = Vec::new();
    if let Some(pi) = &pi {
        for (s, &target) in pi.iter().enumerate() {
            let fractions: Vec<f64> = occ.rows.iter().map(|r| r[1 + s]).collect();
            let (mean, se) = mean_and_se(&fractions);
            checks.push(Check::within(&format!("occupation of state {s}"), mean, target, 3.0 * se).with("se", se));
        }
    }
    holds.truncate(cfg.checks.ks_events);
    let d = ks_statistic(&holds, |t| if t <= 0.0 { 0.0 } else { -(-exit[0] * t).exp_m1() });
    let pv = ks_pvalue(holds.len(), d);
    checks.push(
        Check::new("holding-time KS in state 0", holds.len() == cfg.checks.ks_events && pv > 0.01)
            .with("samples", holds.len() as f64)
            .with("ks_statistic", d)
            .with("p_value", pv),
    );
    checks.push(partition_check(&kernel, cfg)?);
    let mut notes = Vec::new();
    if pi.is_none() {
        notes.push("fixed initial state: occupation not compared with the stationary law".into());
    }
    Ok(Outcome { tables: vec![occ, chain], checks, notes })
}

/// Disjointness and total mass of the interval partition on sampled
/// `(nu, i)`.
fn partition_check(kernel: &RegimeKernel, cfg: &RunConfig) -> Result<Check, LabError> {
    let n = kernel.states();
    let span = kernel.candidate_span();
    let mut rng = substream(cfg.seed, 0, Purpose::Probe);
    let (mut overlap, mut mass_err, mut outside) = (0.0f64, 0.0f64, 0usize);
    for _ in 0..cfg.checks.partition_samples {
        let atoms = rng.random_range(1..=3);
        let pts: Vec<f64> = (0..atoms).map(|_| rng.random_range(-2.0..2.0)).collect();
        let nu = EmpiricalMeasure::uniform(1, pts).map_err(solver("measures", "probe measure"))?;
        let i = rng.random_range(0..n);
        let parts = kernel.partition_intervals(&nu, i).map_err(solver("intensity", "partition"))?;
        let exit = kernel.exit_rates(&nu).map_err(solver("intensity", "exit rates"))?[i];
        let mut sorted: Vec<_> = parts.iter().map(|(_, iv)| *iv).collect();
        sorted.sort_by(|a, b| a.lo.total_cmp(&b.lo));
        for w in sorted.windows(2) {
            overlap = overlap.max(w[0].hi - w[1].lo);
        }
        outside += sorted.iter().filter(|iv| iv.lo < 0.0 || iv.hi > span + 1e-12).count();
        let total: f64 = sorted.iter().map(|iv| iv.len()).sum();
        mass_err = mass_err.max((total - exit).abs());
    }
    Ok(Check::new("interval partition", overlap <= 1e-12 && mass_err <= 1e-12 && outside == 0)
        .with("samples", cfg.checks.partition_samples as f64)
        .with("max_overlap", overlap.max(0.0))
        .with("max_mass_error", mass_err)
        .with("outside_span", outside as f64))
}

fn ou_coefficients(m: &OuSpec) -> ClosureForward {
    let (kappa, theta, sigma, jump) = (m.kappa, m.theta, m.sigma, m.jump);
    ClosureForward::new(1, 1)
        .drift(move |e, o| o[0] = kappa * (theta - e.x[0]))
        .diffusion(move |_, o| o[0] = sigma)
        .jump(move |_, _, mark, o| o[0] = jump * mark)
}

fn ou_bundle(cfg: &RunConfig, m: &OuSpec) -> Result<PathBundle, LabError> {
    scalar_bundle(cfg, m.x0, vec![ChannelKernel::Additive(AdditiveKernel::constant(m.rate))])
}

/// Closed-form mean and variance of the compensated-jump OU at `t`.
fn ou_moments(m: &OuSpec, t: f64) -> (f64, f64) {
    let mean = m.theta + (m.x0 - m.theta) * (-m.kappa * t).exp();
    let var = (m.sigma * m.sigma + m.jump * m.jump * m.rate) * (-(-2.0 * m.kappa * t).exp_m1()) / (2.0 * m.kappa);
    (mean, var)
}

fn forward_experiment(cfg: &RunConfig, m: &OuSpec) -> Result<Outcome, LabError> {
    let b = ou_bundle(cfg, m)?;
    let x = simulate_forward(&ou_coefficients(m), &b, None).map_err(solver("forward_sde", "euler"))?;
    let r = moment_report(&x).map_err(solver("forward_sde", "moments"))?;
    let mut moments = Table::new("moments", &["t", "mean", "variance", "mean_exact", "variance_exact"]);
    for (node, &t) in b.grid.iter().enumerate() {
        let (me, ve) = ou_moments(m, t);
        moments.push(vec![t, r.mean_at(node)[0], r.variance[node], me, ve]);
    }
    let n = b.steps();
    let dt = cfg.horizon / n as f64;
    let (me, ve) = ou_moments(m, cfg.horizon);
    let mean_se = r.mean_se(n, 0);
    let sq: Vec<f64> = (0..b.n_paths()).map(|p| (x.at(p, n)[0] - r.mean_at(n)[0]).powi(2)).collect();
    let (_, var_se) = mean_and_se(&sq);
    let checks = vec![
        Check::within("terminal mean", r.mean_at(n)[0], me, (3.0 * mean_se).max(2.0 * dt * me.abs())).with("se", mean_se),
        Check::within("terminal variance", r.variance[n], ve, (3.0 * var_se).max(2.0 * dt * ve.abs())).with("se", var_se),
    ];
    Ok(Outcome { tables: vec![moments, path_table(cfg, &b, &x)], checks, notes: Vec::new() })
}

fn path_table(cfg: &RunConfig, b: &PathBundle, x: &GridProcess) -> Table {
    let mut t = Table::new("paths", &["path", "t", "x"]);
    for p in 0..emitted(cfg, b.n_paths()) {
        for (m, &time) in b.grid.iter().enumerate() {
            t.push(vec![p as f64, time, x.at(p, m)[0]]);
        }
    }
    t
}

fn terminal_from(b: &PathBundle, f: impl Fn(usize) -> f64) -> GridProcess {
    GridProcess::from_vec(b.n_paths(), 1, 1, (0..b.n_paths()).map(f).collect()).expect("one value per path")
}

/// Per-step orthogonality of the residual martingale: mean increment and
/// covariations with `dW` and every `dN~` slot within 3 SE of zero.
pub fn orthogonality_check(sol: &BackwardSolution, b: &PathBundle) -> Check {
    let pn = b.n_paths();
    let (mut worst, mut failures) = (0.0f64, 0usize);
    let mut tested = 0usize;
    for m in 0..b.steps() {
        let dm: Vec<f64> = (0..pn).map(|p| sol.dm.at(p, m)[0]).collect();
        let mut series = vec![dm.clone()];
        series.push((0..pn).map(|p| dm[p] * b.paths[p].dw[m * b.brownian_dim()]).collect());
        for s in 0..b.slots() {
            series.push((0..pn).map(|p| dm[p] * jump_increment(b, p, m, s)).collect());
        }
        for v in &series {
            let (mean, se) = mean_and_se(v);
            tested += 1;
            let ratio = if se > 0.0 { mean.abs() / se } else if mean.abs() <= 1e-12 { 0.0 } else { f64::INFINITY };
            worst = worst.max(ratio);
            if mean.abs() > 3.0 * se + 1e-12 {
                failures += 1;
            }
        }
    }
    Check::new("martingale orthogonality", failures == 0)
        .with("statistics", tested as f64)
        .with("failures", failures as f64)
        .with("worst_mean_over_se", worst)
}

fn max_dev(g: &GridProcess, target: impl Fn(usize, usize) -> f64, nodes: usize) -> f64 {
    let mut worst = 0.0f64;
    for p in 0..g.paths() {
        for m in 0..nodes {
            worst = worst.max((g.at(p, m)[0] - target(p, m)).abs());
        }
    }
    worst
}

/// The three closed-form regression cases on the bundle's own noise.
pub fn trivial_backward_checks(b: &PathBundle, x: Option<&GridProcess>, basis: &BasisSpec) -> Result<Vec<Check>, LabError> {
    let n = b.steps();
    let mut checks = Vec::new();
    let c = 1.5;
    let s = lsmc_solve(&ClosureDriver::zero(1), &terminal_from(b, |_| c), b, x, basis).map_err(solver("backward_bsde", "lsmc"))?;
    let err = max_dev(&s.y, |_, _| c, n + 1).max(s.z.max_abs()).max(s.u.max_abs()).max(s.dm.max_abs());
    checks.push(Check::at_most("constant terminal", err, 1e-10));

    let one = ClosureDriver::new(1, |_, o| o[0] = 1.0);
    let s = lsmc_solve(&one, &terminal_from(b, |_| 0.0), b, x, basis).map_err(solver("backward_bsde", "lsmc"))?;
    let t = b.horizon();
    checks.push(Check::at_most("unit driver", max_dev(&s.y, |_, m| t - b.grid[m], n + 1), 1e-10));

    let bm = BasisSpec::polynomial(vec![Feature::Brownian(0)], 1);
    let k = b.brownian_dim();
    let zeta = terminal_from(b, |p| b.paths[p].w[n * k]);
    let s = lsmc_solve(&ClosureDriver::zero(1), &zeta, b, None, &bm).map_err(solver("backward_bsde", "lsmc"))?;
    let err = max_dev(&s.y, |p, m| b.paths[p].w[m * k], n + 1)
        .max(max_dev(&s.z, |_, _| 1.0, n))
        .max(s.u.max_abs())
        .max(s.dm.max_abs());
    checks.push(Check::at_most("Brownian terminal", err, 1e-10));
    Ok(checks)
}

fn backward_experiment(cfg: &RunConfig, m: &OuSpec) -> Result<Outcome, LabError> {
    let b = ou_bundle(cfg, m)?;
    let x = simulate_forward(&ou_coefficients(m), &b, None).map_err(solver("forward_sde", "euler"))?;
    let n = b.steps();
    let r = m.discount;
    let driver = ClosureDriver::new(1, move |e, o| o[0] = -r * e.y[0]);
    let zeta = terminal_from(&b, |p| x.at(p, n)[0]);
    let basis = cfg.basis();
    let sol = lsmc_solve(&driver, &zeta, &b, Some(&x), &basis).map_err(solver("backward_bsde", "lsmc"))?;

    let dt = cfg.horizon / n as f64;
    let (ex, _) = ou_moments(m, cfg.horizon);
    let y0: Vec<f64> = (0..b.n_paths()).map(|p| sol.y.at(p, 0)[0]).collect();
    let (y0m, _) = mean_and_se(&y0);
    let (_, xt_se) = mean_and_se(zeta.data());
    let scheme = (1.0 - r * dt).powi(n as i32);
    let exact = (-r * cfg.horizon).exp();
    let tol = 3.0 * xt_se * scheme + (scheme - exact).abs() * ex.abs() + 2.0 * dt * ex.abs();

    let alpha_sq = if r > 0.0 { r.sqrt() } else { 1.0 };
    let params = WeightedNormParams::constant(alpha_sq, n, 2.0 / alpha_sq);
    let mut notes = Vec::new();
    let sandwich = match norm_equivalence_check(&sol, &b, &params) {
        Ok((lo, v, hi)) => Check::new("norm equivalence", true).with("lower", lo).with("value", v).with("upper", hi),
        Err(e) => {
            notes.push(e.to_string());
            Check::new("norm equivalence", false).with("beta", params.beta)
        }
    };

    let mut checks = vec![
        Check::within("discounted terminal mean", y0m, exact * ex, tol).with("se", xt_se * scheme),
        orthogonality_check(&sol, &b),
        sandwich,
    ];
    checks.extend(trivial_backward_checks(&b, Some(&x), &basis)?);

    let mut table = Table::new("solution", &["path", "t", "y", "z", "u", "dm"]);
    for p in 0..emitted(cfg, b.n_paths()) {
        for (mm, &t) in b.grid.iter().enumerate() {
            let (z, u, dm) = if mm < n { (sol.z.at(p, mm)[0], sol.u.at(p, mm)[0], sol.dm.at(p, mm)[0]) } else { (0.0, 0.0, 0.0) };
            table.push(vec![p as f64, t, sol.y.at(p, mm)[0], z, u, dm]);
        }
    }
    if !sol.deficient_steps.is_empty() {
        notes.push(format!("dependent regression columns dropped at steps {:?}", sol.deficient_steps));
    }
    Ok(Outcome { tables: vec![table], checks, notes })
}

/// The LQ instance with its model, bundle and Riccati reference.
pub struct LqSetup {
    pub params: LqParams,
    pub model: FbsdeModel,
    pub bundle: PathBundle,
    pub reference: RiccatiReference,
}

pub fn lq_setup(cfg: &RunConfig, m: &LqSpec) -> Result<LqSetup, LabError> {
    let params = m.params();
    let model = build_lq_model(&params).map_err(solver("models", "lq model"))?;
    let bundle = scalar_bundle(cfg, m.x0, vec![ChannelKernel::Additive(params.intensity.clone())])?;
    let reference = riccati_reference(&params, &bundle.grid).map_err(solver("models", "riccati reference"))?;
    Ok(LqSetup { params, model, bundle, reference })
}

pub fn solve_lq(cfg: &RunConfig, s: &LqSetup, guess: Option<&CoupledSolution>) -> Result<(CoupledSolution, SolverReport), LabError> {
    continuation_solve(&s.model, &s.bundle, &cfg.continuation(), guess).map_err(solver("coupled_solver", "continuation"))
}

/// Riccati comparison, exact terminal condition and observed contraction.
pub fn lq_checks(s: &LqSetup, sol: &CoupledSolution, report: &SolverReport) -> Vec<Check> {
    let e = riccati_errors(&s.reference, sol, &s.bundle);
    let n = s.bundle.steps();
    let g = s.params.g;
    let mut terminal = 0.0f64;
    for p in 0..s.bundle.n_paths() {
        let want = g * sol.x.at(p, n)[0];
        terminal = terminal.max((sol.backward.y.at(p, n)[0] - want).abs() / (1.0 + want.abs()));
    }
    let ratios = report.contraction_ratios();
    let worst = ratios.iter().copied().fold(0.0, f64::max);
    vec![
        Check::at_most("Y vs p X (relative)", e.y, 0.05),
        Check::at_most("Z vs p sigma (relative)", e.z, 0.10),
        Check::at_most("U vs p gamma (relative)", e.u, 0.10),
        Check::at_most("E|M_T|^2 / max E|Y|^2", e.m, 0.01),
        Check::at_most("terminal condition", terminal, 1e-12),
        Check::new("observed contraction", !ratios.is_empty() && worst < 1.0)
            .with("worst_ratio", worst)
            .with("steps", ratios.len() as f64),
    ]
}

/// Per-step records and every iterate distance of a continuation run.
pub fn solver_tables(report: &SolverReport) -> Vec<Table> {
    let mut it = Table::new("iterations", &["step", "iteration", "distance"]);
    for (i, r) in report.steps.iter().enumerate() {
        for (j, &d) in r.distances.iter().enumerate() {
            it.push(vec![i as f64, j as f64, d]);
        }
    }
    vec![steps_table(report), it]
}

fn solver_notes(report: &SolverReport) -> Vec<String> {
    let mut notes = vec![format!(
        "case {:?}: {} outer iterations, {} inner sweeps, final norm {:e}, final adjustment {:e}",
        report.case,
        report.outer_iterations(),
        report.inner_sweeps(),
        report.final_norm,
        report.final_adjustment
    )];
    if let Some(e) = report.theoretical_epsilon {
        notes.push(format!("theoretical continuation step {e:e}"));
    }
    notes.extend(report.warnings.iter().cloned());
    notes
}

pub fn steps_table(report: &SolverReport) -> Table {
    let mut t = Table::new("steps", &["step", "alpha", "epsilon", "accepted", "iterations", "inner_sweeps", "last_distance"]);
    for (i, r) in report.steps.iter().enumerate() {
        t.push(vec![
            i as f64,
            r.alpha,
            r.epsilon,
            if r.accepted { 1.0 } else { 0.0 },
            r.distances.len() as f64,
            r.inner_sweeps as f64,
            r.distances.last().copied().unwrap_or(0.0),
        ]);
    }
    t
}

fn moments_table(b: &PathBundle, sol: &CoupledSolution, s: Option<&LqSetup>) -> Table {
    let mut t = Table::new("moments", &["t", "mean_x", "mean_y", "second_moment_y", "p"]);
    let pf = b.n_paths() as f64;
    for (m, &time) in b.grid.iter().enumerate() {
        let (mut mx, mut my, mut yy) = (0.0, 0.0, 0.0);
        for p in 0..b.n_paths() {
            let y = sol.backward.y.at(p, m)[0];
            mx += sol.x.at(p, m)[0] / pf;
            my += y / pf;
            yy += y * y / pf;
        }
        t.push(vec![time, mx, my, yy, s.map_or(f64::NAN, |s| s.reference.p[m])]);
    }
    t
}

/// Relative agreement of the stepped Riccati solution with the closed form.
pub fn riccati_table(s: &LqSetup, horizon: f64) -> (Table, Option<Check>) {
    let mut t = Table::new("riccati", &["t", "p_rk4", "p_closed"]);
    let mut worst: Option<f64> = None;
    for (m, &time) in s.reference.times.iter().enumerate() {
        let c = riccati_closed_form(&s.params, horizon, time);
        let p = s.reference.p[m];
        if let Some(c) = c {
            let err = (p - c).abs() / c.abs().max(1e-300);
            worst = Some(worst.unwrap_or(0.0).max(err));
        }
        t.push(vec![time, p, c.unwrap_or(f64::NAN)]);
    }
    (t, worst.map(|w| Check::at_most("riccati stepper vs closed form", w, 1e-8)))
}

fn coupled_lq_experiment(cfg: &RunConfig, m: &LqSpec, reproduce: bool) -> Result<Outcome, LabError> {
    let s = lq_setup(cfg, m)?;
    let mut checks = Vec::new();
    let mut tables = Vec::new();
    let mut notes = Vec::new();
    if reproduce {
        let (t, c) = riccati_table(&s, cfg.horizon);
        tables.push(t);
        match c {
            Some(c) => checks.push(c),
            None => notes.push("no closed form for this instance: only the stepped Riccati solution is reported".into()),
        }
    }
    let (sol, report) = solve_lq(cfg, &s, None)?;
    checks.extend(lq_checks(&s, &sol, &report));
    tables.extend(solver_tables(&report));
    tables.push(moments_table(&s.bundle, &sol, Some(&s)));
    notes.extend(solver_notes(&report));
    Ok(Outcome { tables, checks, notes })
}

/// A model whose forward leg ignores `(Y, Z, U)`.
pub fn one_directional_model() -> FbsdeModel {
    FbsdeModel {
        d: 1,
        n: 1,
        k: 1,
        g: vec![1.0],
        c_g: Some(1.0),
        forward: Arc::new(
            ClosureForward::new(1, 1)
                .drift(|e, o| o[0] = 0.5 * (0.2 - e.x[0]))
                .diffusion(|e, o| o[0] = 0.3 + 0.05 * e.x[0].sin())
                .jump(|_, _, mark, o| o[0] = 0.1 * mark),
        ),
        driver: Arc::new(ClosureDriver::new(1, |e, o| o[0] = e.x[0].cos() - 0.5 * e.y[0] + 0.1 * e.z[0])),
        terminal: Arc::new(ClosureTerminal::new(1, |_, x, o| o[0] = 0.5 * x[0] * x[0])),
        betas: Monotonicity { beta1: 1.0, beta2: 0.0, beta3: 1.0 },
        constants: None,
        case: None,
    }
}

fn one_directional_experiment(cfg: &RunConfig, m: &OneDirectionalSpec) -> Result<Outcome, LabError> {
    let model = one_directional_model();
    let b = scalar_bundle(cfg, m.x0, vec![ChannelKernel::Additive(AdditiveKernel::constant(m.rate))])?;
    let cc = cfg.continuation();
    let seq = sequential_solve(&model, &b, &cc.basis).map_err(solver("coupled_solver", "sequential solve"))?;
    let (sol, report) =
        continuation_solve(&model, &b, &cc, None).map_err(solver("coupled_solver", "continuation"))?;
    let gap = relative_distance(&sol, &seq, &b);
    let checks = vec![
        Check::at_most("continuation vs sequential", gap, cfg.solver.tolerance),
        Check::new("all steps accepted", report.steps.iter().all(|s| s.accepted)).with("steps", report.steps.len() as f64),
    ];
    let mut tables = solver_tables(&report);
    tables.push(moments_table(&b, &sol, None));
    Ok(Outcome { tables, checks, notes: solver_notes(&report) })
}

/// Tuple sampler over a few point environments and intensity levels.
pub fn lq_sampler(horizon: f64) -> TupleSampler {
    TupleSampler {
        horizon,
        envs: vec![dirac(0.0), dirac(-0.7), dirac(1.3)],
        masses: vec![vec![1.0], vec![0.4], vec![2.5]],
        regimes: Vec::new(),
        marks: Vec::new(),
        radius: 3.0,
    }
}

/// The instance with `f^ = 3/4` and its driver rebuilt with `-f^`.
pub fn sign_flipped_models() -> Result<(FbsdeModel, FbsdeModel), LabError> {
    let p = LqParams::new(-2.0, 1.0, 0.5, 2.0, 1.0, 0.2, 0.1);
    let model = build_lq_model(&p).map_err(solver("models", "lq model"))?;
    let (fh, bh) = (p.f_hat(), p.b_hat());
    let mut flipped = model.clone();
    flipped.driver = Arc::new(ClosureDriver::new(1, move |e, o| o[0] = -fh * (e.x[0] - e.env.mean_coord(0)) + bh * e.y[0]));
    Ok((model, flipped))
}

/// Perturbation along `dx = 1` at `delta_0` with unit mass and mark.
pub fn hand_tuple() -> MonotonicityTuple {
    let zero = StatePoint { x: vec![0.0], y: vec![0.0], z: vec![0.0], u: vec![0.0] };
    MonotonicityTuple {
        t: 0.5,
        env: dirac(0.0),
        masses: vec![1.0],
        marks: vec![1.0],
        regime: Vec::new(),
        p: StatePoint { x: vec![1.0], ..zero.clone() },
        q: zero,
    }
}

pub fn monotonicity_checks(cfg: &RunConfig, m: &LqSpec) -> Result<Vec<Check>, LabError> {
    let model = build_lq_model(&m.params()).map_err(solver("models", "lq model"))?;
    let sampler = lq_sampler(cfg.horizon);
    let r = check_g_monotonicity(&model, &sampler.sample(&model, cfg.checks.tuples, cfg.seed));
    let mut checks = vec![Check::new("declared constants hold", r.holds())
        .with("tuples", r.tuples as f64)
        .with("violations", r.violations as f64)
        .with("terminal_violations", r.terminal_violations as f64)
        .with("worst_slack", r.worst_slack)
        .with("worst_terminal_slack", r.worst_terminal_slack)];
    if cfg.checks.negative_control {
        let (base, flipped) = sign_flipped_models()?;
        let tu = hand_tuple();
        let (s_base, _) = monotonicity_slack(&base, &tu);
        let (s_flip, _) = monotonicity_slack(&flipped, &tu);
        let hand = check_g_monotonicity(&flipped, std::slice::from_ref(&tu));
        checks.push(
            Check::new("sign-flipped instance flagged", hand.violations == 1 && s_flip < 0.0 && s_base >= -1e-12)
                .with("slack_flipped", s_flip)
                .with("slack_original", s_base),
        );
        let sampled = check_g_monotonicity(&flipped, &sampler.sample(&flipped, cfg.checks.tuples, cfg.seed));
        checks.push(
            Check::new("sign-flipped instance caught by sampling", sampled.violations > 0)
                .with("violations", sampled.violations as f64),
        );
    }
    Ok(checks)
}

fn monotonicity_experiment(cfg: &RunConfig, m: &LqSpec) -> Result<Outcome, LabError> {
    let checks = monotonicity_checks(cfg, m)?;
    let mut t = Table::new("slacks", &["tuple", "operator_slack", "terminal_slack"]);
    let model = build_lq_model(&m.params()).map_err(solver("models", "lq model"))?;
    for (i, tu) in lq_sampler(cfg.horizon).sample(&model, cfg.checks.tuples, cfg.seed).iter().take(cfg.emit_paths).enumerate() {
        let (s, st) = monotonicity_slack(&model, tu);
        t.push(vec![i as f64, s, st]);
    }
    Ok(Outcome { tables: vec![t], checks, notes: Vec::new() })
}

pub fn constant_duality_checks(cfg: &RunConfig, m: &ConstantDualitySpec) -> Result<Vec<Check>, LabError> {
    let b = scalar_bundle(cfg, 0.0, Vec::new())?;
    let (pn, n) = (b.n_paths(), b.steps());
    let sig = GridProcess::from_vec(pn, n, 1, vec![m.sigma; pn * n]).expect("shape");
    let zero = GridProcess::zeros(pn, n, 1);
    let gam = GridProcess::zeros(pn, n, 0);
    let zeta = terminal_from(&b, |p| m.z * b.paths[p].w[n]);
    let basis = BasisSpec::polynomial(vec![Feature::Brownian(0)], cfg.basis_degree);
    let d = ito_duality_check(
        ForwardLegs { b: &zero, sigma: &sig, gamma: &gam },
        BackwardLegs { f: &zero, zeta: &zeta },
        &[1.0],
        &b,
        &basis,
        cfg.checks.duality_slack,
    )
    .map_err(solver("coupled_solver", "duality"))?;
    let closed = cfg.horizon * m.sigma * m.z;
    Ok(vec![
        duality_check("constant-coefficient duality", &d).with("closed_form", closed),
        Check::within("regressed side equals T sigma z", d.rhs, closed, 1e-10 * (1.0 + closed.abs())),
        Check::within("simulated side near T sigma z", d.lhs, closed, 3.0 * d.se + d.slack),
    ])
}

fn duality_check(name: &str, d: &fbsde_core::coupled::DualityReport) -> Check {
    Check::new(name, d.passed).with("lhs", d.lhs).with("rhs", d.rhs).with("se", d.se).with("slack", d.slack)
}

/// Duality on a solved LQ instance.
pub fn solved_duality_check(cfg: &RunConfig, s: &LqSetup, sol: &CoupledSolution) -> Result<Check, LabError> {
    let (bb, sig, gam, f, zeta) = solution_legs(&s.model, sol, &s.bundle).map_err(solver("coupled_solver", "solution legs"))?;
    let d = ito_duality_check(
        ForwardLegs { b: &bb, sigma: &sig, gamma: &gam },
        BackwardLegs { f: &f, zeta: &zeta },
        &s.model.g,
        &s.bundle,
        &cfg.basis(),
        cfg.checks.duality_slack,
    )
    .map_err(solver("coupled_solver", "duality"))?;
    Ok(duality_check("solved LQ duality", &d))
}

fn constant_duality_experiment(cfg: &RunConfig, m: &ConstantDualitySpec) -> Result<Outcome, LabError> {
    Ok(Outcome { tables: Vec::new(), checks: constant_duality_checks(cfg, m)?, notes: Vec::new() })
}

fn lq_duality_experiment(cfg: &RunConfig, m: &LqSpec) -> Result<Outcome, LabError> {
    let s = lq_setup(cfg, m)?;
    let (sol, report) = solve_lq(cfg, &s, None)?;
    let checks = vec![solved_duality_check(cfg, &s, &sol)?];
    Ok(Outcome { tables: solver_tables(&report), checks, notes: solver_notes(&report) })
}
