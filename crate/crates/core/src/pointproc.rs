//! Marked point processes with environment-dependent intensity: thinning
//! simulation, jump integrals, the intensity-weighted norm of jump
//! integrands and time-rescaling diagnostics.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::intensity::{AdditiveKernel, Baseline, ChannelKernel, IntensityError, RegimeKernel};
use crate::math::{gauss_legendre, ks_pvalue, ks_statistic};
use crate::measures::{EnvironmentPath, MeasureError, Side};
use crate::rng::{substream, Purpose};

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum PointProcessError {
    #[error("intensity {value} exceeds the majorant {bound} at t = {t}")]
    MajorantViolated { t: f64, value: f64, bound: f64 },
    #[error("declared rate bound violated at t = {t}: {source}")]
    RateBound { t: f64, source: IntensityError },
    #[error("invalid event log: {0}")]
    InvalidLog(&'static str),
    #[error("compensator decreases between events {index} and {next}", next = index + 1)]
    NonMonotoneCompensator { index: usize },
    #[error("negative kernel mass {mass} in slot {slot}")]
    NegativeMass { slot: usize, mass: f64 },
    #[error("integrand and mass layouts disagree")]
    LayoutMismatch,
    #[error(transparent)]
    Intensity(#[from] IntensityError),
    #[error(transparent)]
    Measure(#[from] MeasureError),
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MarkedEvent {
    pub time: f64,
    pub channel: usize,
    /// Index of the mark cell in the channel's mark law.
    pub cell: usize,
    /// Numeric mark value of that cell.
    pub mark: f64,
}

/// Events of all channels on `(0, T]`, sorted by time then channel.
#[derive(Debug, Clone, PartialEq)]
pub struct EventLog {
    horizon: f64,
    channels: usize,
    events: Vec<MarkedEvent>,
}

impl EventLog {
    pub fn new(horizon: f64, channels: usize, mut events: Vec<MarkedEvent>) -> Result<Self, PointProcessError> {
        events.sort_by(|a, b| a.time.total_cmp(&b.time).then(a.channel.cmp(&b.channel)));
        let mut last = vec![0.0f64; channels];
        for e in &events {
            if e.channel >= channels {
                return Err(PointProcessError::InvalidLog("channel index out of range"));
            }
            if !(e.time > 0.0) || e.time > horizon {
                return Err(PointProcessError::InvalidLog("event time outside (0, T]"));
            }
            if !(e.time > last[e.channel]) {
                return Err(PointProcessError::InvalidLog("event times must increase within a channel"));
            }
            last[e.channel] = e.time;
        }
        Ok(Self { horizon, channels, events })
    }

    pub fn empty(horizon: f64, channels: usize) -> Self {
        Self { horizon, channels, events: Vec::new() }
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn events(&self) -> &[MarkedEvent] {
        &self.events
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    pub fn channel_events(&self, channel: usize) -> Vec<MarkedEvent> {
        self.events.iter().filter(|e| e.channel == channel).copied().collect()
    }

    pub fn channel_times(&self, channel: usize) -> Vec<f64> {
        self.events.iter().filter(|e| e.channel == channel).map(|e| e.time).collect()
    }

    /// `N_t` of one channel: events with time `<= t`.
    pub fn count_until(&self, channel: usize, t: f64) -> usize {
        self.events.iter().filter(|e| e.channel == channel && e.time <= t).count()
    }
}

/// Flat indexing of `(channel, cell)` pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SlotLayout {
    offsets: Vec<usize>,
    channel_of: Vec<usize>,
    marks: Vec<f64>,
}

impl SlotLayout {
    pub fn from_kernels(kernels: &[ChannelKernel]) -> Self {
        let mut offsets = Vec::with_capacity(kernels.len() + 1);
        let mut channel_of = Vec::new();
        let mut marks = Vec::new();
        offsets.push(0);
        for (j, k) in kernels.iter().enumerate() {
            for c in 0..k.cells() {
                channel_of.push(j);
                marks.push(k.mark_value(c));
            }
            offsets.push(channel_of.len());
        }
        Self { offsets, channel_of, marks }
    }

    /// Unmarked channels with one cell each.
    pub fn unmarked(channels: usize) -> Self {
        Self { offsets: (0..=channels).collect(), channel_of: (0..channels).collect(), marks: vec![1.0; channels] }
    }

    pub fn slots(&self) -> usize {
        self.channel_of.len()
    }

    pub fn channels(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn slot(&self, channel: usize, cell: usize) -> usize {
        self.offsets[channel] + cell
    }

    pub fn channel_of(&self, slot: usize) -> usize {
        self.channel_of[slot]
    }

    pub fn channel_slots(&self, channel: usize) -> core::ops::Range<usize> {
        self.offsets[channel]..self.offsets[channel + 1]
    }

    pub fn mark(&self, slot: usize) -> f64 {
        self.marks[slot]
    }
}

/// Window end for majorant refresh: the next environment breakpoint (or
/// baseline break) after `t`, capped at the horizon.
fn next_window_end(t: f64, horizon: f64, env: &EnvironmentPath, baseline: Option<&Baseline>) -> f64 {
    let mut end = horizon;
    let bps = env.breakpoints();
    let k = bps.partition_point(|&b| b <= t);
    if let Some(&b) = bps.get(k) {
        end = end.min(b);
    }
    if let Some(Baseline::PiecewiseConstant { breaks, .. }) = baseline {
        let k = breaks.partition_point(|&b| b <= t);
        if let Some(&b) = breaks.get(k) {
            end = end.min(b);
        }
    }
    end
}

/// Relative slack tolerated when comparing an evaluated intensity with its
/// majorant (both are sums of the same floating-point terms).
const MAJORANT_SLACK: f64 = 1e-12;

fn thin_additive<R: Rng + ?Sized>(
    kernel: &AdditiveKernel,
    channel: usize,
    env: &EnvironmentPath,
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<MarkedEvent>, PointProcessError> {
    let mut history: Vec<f64> = Vec::new();
    let mut events = Vec::new();
    let mut t = 0.0;
    while t < horizon {
        let window_end = next_window_end(t, horizon, env, Some(&kernel.baseline));
        let bound = kernel.dominating_rate(&history, t, window_end)?;
        if !(bound > 0.0) {
            t = window_end;
            continue;
        }
        let e: f64 = Exp1.sample(rng);
        let s = t + e / bound;
        if s > window_end {
            t = window_end;
            continue;
        }
        let lambda = kernel.eval_intensity(s, &history, env)?;
        if lambda < 0.0 {
            return Err(IntensityError::NegativeIntensity { t: s, value: lambda }.into());
        }
        if lambda > bound * (1.0 + MAJORANT_SLACK) {
            return Err(PointProcessError::MajorantViolated { t: s, value: lambda, bound });
        }
        let u: f64 = rng.random();
        if u * bound < lambda {
            let cell = kernel.marks.cell_for(rng.random());
            history.push(s);
            events.push(MarkedEvent { time: s, channel, cell, mark: kernel.marks.values()[cell] });
        }
        t = s;
    }
    Ok(events)
}

/// Regime transitions by thinning a uniform candidate stream on
/// `[0, states * H0)`: a candidate `(s, r)` moves the chain by
/// `q(mu_{s-}, xi_{s-}, r)`.
pub fn thin_regime<R: Rng + ?Sized>(
    kernel: &RegimeKernel,
    initial: usize,
    channel: usize,
    env: &EnvironmentPath,
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<MarkedEvent>, PointProcessError> {
    if initial >= kernel.states() {
        return Err(IntensityError::StateOutOfRange { state: initial, states: kernel.states() }.into());
    }
    let span = kernel.candidate_span();
    let mut events = Vec::new();
    let mut state = initial;
    if !(span > 0.0) {
        for nu in env.values() {
            kernel.exit_rates(nu).map_err(|source| PointProcessError::RateBound { t: 0.0, source })?;
        }
        return Ok(events);
    }
    let mut t = 0.0;
    while t < horizon {
        let window_end = next_window_end(t, horizon, env, None);
        let e: f64 = Exp1.sample(rng);
        let s = t + e / span;
        if s > window_end {
            t = window_end;
            continue;
        }
        let r = rng.random::<f64>() * span;
        let nu = env.at(s, Side::Left)?;
        kernel.exit_rates(nu).map_err(|source| PointProcessError::RateBound { t: s, source })?;
        let jump = kernel.q_jump(nu, state, r)?;
        if jump != 0 {
            state = (state as i64 + jump) as usize;
            events.push(MarkedEvent { time: s, channel, cell: state, mark: state as f64 });
        }
        t = s;
    }
    Ok(events)
}

/// Events of one channel, drawn from `rng`.
pub fn simulate_thinning<R: Rng + ?Sized>(
    kernel: &ChannelKernel,
    channel: usize,
    env: &EnvironmentPath,
    horizon: f64,
    rng: &mut R,
) -> Result<Vec<MarkedEvent>, PointProcessError> {
    match kernel {
        ChannelKernel::Additive(k) => thin_additive(k, channel, env, horizon, rng),
        ChannelKernel::Regime { kernel, initial } => thin_regime(kernel, *initial, channel, env, horizon, rng),
    }
}

/// All channels of one path, each from its own substream, merged by time
/// with ties ordered by channel index.
pub fn simulate_channels(
    kernels: &[ChannelKernel],
    env: &EnvironmentPath,
    horizon: f64,
    seed: u64,
    path: u64,
) -> Result<EventLog, PointProcessError> {
    let mut events = Vec::new();
    for (j, k) in kernels.iter().enumerate() {
        let mut rng = substream(seed, path, Purpose::Channel(j as u32));
        events.extend(simulate_thinning(k, j, env, horizon, &mut rng)?);
    }
    EventLog::new(horizon, kernels.len(), events)
}

/// Regime state just before `t`, given the channel's own events.
pub fn regime_state_before(initial: usize, channel_events: &[MarkedEvent], t: f64) -> usize {
    let k = channel_events.partition_point(|e| e.time < t);
    if k == 0 {
        initial
    } else {
        channel_events[k - 1].cell
    }
}

/// Predictable kernel masses `K(t, cell)` of one channel, using events
/// strictly before `t` and `mu_{t-}`.
pub fn intensity_masses(
    kernel: &ChannelKernel,
    channel_events: &[MarkedEvent],
    t: f64,
    env: &EnvironmentPath,
) -> Result<Vec<f64>, PointProcessError> {
    match kernel {
        ChannelKernel::Additive(k) => {
            let times: Vec<f64> = channel_events.iter().map(|e| e.time).collect();
            let lambda = k.eval_intensity(t, &times, env)?;
            Ok(k.marks.probs().iter().map(|p| p * lambda).collect())
        }
        ChannelKernel::Regime { kernel, initial } => regime_masses(kernel, *initial, channel_events, t, env),
    }
}

/// Right limits `K(t+, cell)` of one channel: events at `t` are included and
/// the environment is read from the right.
pub fn intensity_masses_after(
    kernel: &ChannelKernel,
    channel_events: &[MarkedEvent],
    t: f64,
    env: &EnvironmentPath,
) -> Result<Vec<f64>, PointProcessError> {
    match kernel {
        ChannelKernel::Additive(k) => {
            let times: Vec<f64> = channel_events.iter().map(|e| e.time).collect();
            let lambda = k.intensity_after(t, &times, env)?;
            Ok(k.marks.probs().iter().map(|p| p * lambda).collect())
        }
        ChannelKernel::Regime { kernel, initial } => {
            let state = regime_state_after(*initial, channel_events, t);
            let q = kernel.rates(env.at(t, Side::Right)?)?;
            let n = kernel.states();
            Ok((0..n).map(|j| if j == state { 0.0 } else { q[state * n + j] }).collect())
        }
    }
}

/// Regime state at `t`, including a transition at `t` itself.
pub fn regime_state_after(initial: usize, channel_events: &[MarkedEvent], t: f64) -> usize {
    let k = channel_events.partition_point(|e| e.time <= t);
    if k == 0 {
        initial
    } else {
        channel_events[k - 1].cell
    }
}

fn regime_masses(
    kernel: &RegimeKernel,
    initial: usize,
    channel_events: &[MarkedEvent],
    t: f64,
    env: &EnvironmentPath,
) -> Result<Vec<f64>, PointProcessError> {
    let state = regime_state_before(initial, channel_events, t);
    let q = kernel.rates(env.at(t, Side::Left)?)?;
    let n = kernel.states();
    Ok((0..n).map(|j| if j == state { 0.0 } else { q[state * n + j] }).collect())
}

/// `int_a^b K(s, cell) ds` of one channel along a realized path.
pub fn compensator_masses(
    kernel: &ChannelKernel,
    channel_events: &[MarkedEvent],
    a: f64,
    b: f64,
    env: &EnvironmentPath,
) -> Result<Vec<f64>, PointProcessError> {
    match kernel {
        ChannelKernel::Additive(k) => {
            let times: Vec<f64> = channel_events.iter().map(|e| e.time).collect();
            let total = k.compensator(a, b, &times, env)?;
            Ok(k.marks.probs().iter().map(|p| p * total).collect())
        }
        ChannelKernel::Regime { kernel, initial } => {
            let n = kernel.states();
            let mut out = vec![0.0; n];
            if b <= a {
                return Ok(out);
            }
            // The integrand is constant between events and breakpoints.
            let mut cuts: Vec<f64> = channel_events.iter().map(|e| e.time).filter(|&s| s > a && s < b).collect();
            cuts.extend(env.breakpoints().iter().copied().filter(|&s| s > a && s < b));
            cuts.push(a);
            cuts.push(b);
            cuts.sort_by(|x, y| x.total_cmp(y));
            cuts.dedup();
            for w in cuts.windows(2) {
                let mid = 0.5 * (w[0] + w[1]);
                let masses = regime_masses(kernel, *initial, channel_events, mid, env)?;
                for (o, m) in out.iter_mut().zip(masses) {
                    *o += m * (w[1] - w[0]);
                }
            }
            Ok(out)
        }
    }
}

/// `t -> sum_{events <= t} u(tau, slot, mark)`, optionally minus the
/// compensator `int_0^t sum_slot u(s, slot, mark) K(s, slot) ds`, evaluated
/// at `times`. The compensator integral uses five-point Gauss-Legendre on
/// the pieces between consecutive events, evaluation times and `breaks`.
pub fn integrate_against(
    u: &dyn Fn(f64, usize, f64) -> f64,
    log: &EventLog,
    layout: &SlotLayout,
    kernel_masses: Option<&dyn Fn(f64) -> Vec<f64>>,
    times: &[f64],
    breaks: &[f64],
) -> Vec<f64> {
    let mut cuts: Vec<f64> = vec![0.0];
    cuts.extend(log.events().iter().map(|e| e.time));
    cuts.extend(times.iter().copied());
    cuts.extend(breaks.iter().copied().filter(|&b| b > 0.0 && b < log.horizon()));
    cuts.sort_by(|a, b| a.total_cmp(b));
    cuts.dedup();
    let mut out = Vec::with_capacity(times.len());
    for &t in times {
        let mut total: f64 = log
            .events()
            .iter()
            .filter(|e| e.time <= t)
            .map(|e| u(e.time, layout.slot(e.channel, e.cell), e.mark))
            .sum();
        if let Some(masses) = kernel_masses {
            for w in cuts.windows(2) {
                if w[0] >= t {
                    break;
                }
                let hi = w[1].min(t);
                total -= gauss_legendre(w[0], hi, |s| {
                    let k = masses(s);
                    k.iter().enumerate().map(|(slot, m)| m * u(s, slot, layout.mark(slot))).sum()
                });
            }
        }
        out.push(total);
    }
    out
}

/// Inner product `sum_slot K(slot) <u(slot), v(slot)>` for integrands stored
/// slot-major with `rows` entries per slot.
pub fn jump_inner(u: &[f64], v: &[f64], rows: usize, masses: &[f64]) -> Result<f64, PointProcessError> {
    if u.len() != rows * masses.len() || v.len() != u.len() {
        return Err(PointProcessError::LayoutMismatch);
    }
    let mut total = 0.0;
    for (slot, &m) in masses.iter().enumerate() {
        if m < 0.0 {
            return Err(PointProcessError::NegativeMass { slot, mass: m });
        }
        let a = &u[slot * rows..(slot + 1) * rows];
        let b = &v[slot * rows..(slot + 1) * rows];
        total += m * a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
    }
    Ok(total)
}

/// `(int tr(u diag(K) u^T))^{1/2}`.
pub fn random_norm(u: &[f64], rows: usize, masses: &[f64]) -> Result<f64, PointProcessError> {
    jump_inner(u, u, rows, masses).map(libm::sqrt)
}

#[derive(Debug, Clone, PartialEq)]
pub struct RescaleReport {
    pub interarrivals: Vec<f64>,
    pub ks_statistic: f64,
    pub p_value: f64,
}

/// Time-changed interarrivals `Lambda(tau_i) - Lambda(tau_{i-1})` and their
/// KS distance from Exp(1).
pub fn time_rescale_diagnostic(
    times: &[f64],
    cumulative: &dyn Fn(f64) -> f64,
) -> Result<RescaleReport, PointProcessError> {
    let mut prev = cumulative(0.0);
    let mut interarrivals = Vec::with_capacity(times.len());
    for (index, &t) in times.iter().enumerate() {
        let c = cumulative(t);
        if c < prev {
            return Err(PointProcessError::NonMonotoneCompensator { index });
        }
        interarrivals.push(c - prev);
        prev = c;
    }
    let d = ks_statistic(&interarrivals, |x| if x <= 0.0 { 0.0 } else { -libm::expm1(-x) });
    Ok(RescaleReport { p_value: ks_pvalue(interarrivals.len(), d), ks_statistic: d, interarrivals })
}

/// Realized cumulative intensity `Lambda(t)` of an additive channel.
pub fn additive_cumulative<'a>(
    kernel: &'a AdditiveKernel,
    times: &'a [f64],
    env: &'a EnvironmentPath,
) -> impl Fn(f64) -> f64 + 'a {
    move |t| kernel.compensator(0.0, t, times, env).unwrap_or(f64::NAN)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::intensity::{LagKernel, RateLaw};
    use crate::measures::EmpiricalMeasure;

    fn env() -> EnvironmentPath {
        EnvironmentPath::constant(1.0, EmpiricalMeasure::dirac(&[0.0]).unwrap()).unwrap()
    }

    #[test]
    fn zero_intensity_gives_empty_log() {
        let log = simulate_channels(&[ChannelKernel::Additive(AdditiveKernel::constant(0.0))], &env(), 1.0, 1, 0).unwrap();
        assert!(log.is_empty());
    }

    #[test]
    fn log_rejects_non_increasing_channel_times() {
        let e = MarkedEvent { time: 0.5, channel: 0, cell: 0, mark: 1.0 };
        assert!(EventLog::new(1.0, 1, vec![e, e]).is_err());
        assert!(EventLog::new(1.0, 2, vec![e, MarkedEvent { channel: 1, ..e }]).is_ok());
    }

    #[test]
    fn understated_bound_is_a_hard_failure() {
        let k = AdditiveKernel {
            baseline: Baseline::Custom { f: alloc::sync::Arc::new(|_| 5.0), bound: Some(1.0) },
            environment: None,
            excitation: None,
            marks: crate::intensity::MarkLaw::unmarked(),
        };
        let long = EnvironmentPath::constant(50.0, EmpiricalMeasure::dirac(&[0.0]).unwrap()).unwrap();
        let r = simulate_channels(&[ChannelKernel::Additive(k)], &long, 50.0, 3, 0);
        assert!(matches!(r, Err(PointProcessError::MajorantViolated { .. })));
    }

    #[test]
    fn marked_sum_is_direct() {
        let log = EventLog::new(
            1.0,
            1,
            vec![
                MarkedEvent { time: 0.2, channel: 0, cell: 0, mark: 2.0 },
                MarkedEvent { time: 0.6, channel: 0, cell: 1, mark: 5.0 },
            ],
        )
        .unwrap();
        let layout = SlotLayout { offsets: vec![0, 2], channel_of: vec![0, 0], marks: vec![2.0, 5.0] };
        let path = integrate_against(&|_, _, r| r, &log, &layout, None, &[0.1, 0.2, 0.5, 0.6, 1.0], &[]);
        assert_eq!(path, vec![0.0, 2.0, 2.0, 7.0, 7.0]);
    }

    #[test]
    fn regime_compensator_integrates_state_rates() {
        let rk = RegimeKernel::new(2, RateLaw::Constant(vec![0.0, 1.0, 2.0, 0.0]), 2.0).unwrap();
        let ck = ChannelKernel::Regime { kernel: rk, initial: 0 };
        let evs = vec![MarkedEvent { time: 0.25, channel: 0, cell: 1, mark: 1.0 }];
        let c = compensator_masses(&ck, &evs, 0.0, 1.0, &env()).unwrap();
        // Rate 1 to state 1 for 0.25, then rate 2 to state 0 for 0.75.
        assert!((c[1] - 0.25).abs() < 1e-15);
        assert!((c[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn hawkes_compensator_matches_quadrature() {
        let k = AdditiveKernel::hawkes(0.7, LagKernel::Exponential { scale: 0.5, rate: 1.3 });
        let times = [0.1, 0.35, 0.8];
        let e = env();
        let exact = k.compensator(0.2, 0.9, &times, &e).unwrap();
        let mut cuts = vec![0.2, 0.35, 0.8, 0.9];
        cuts.dedup();
        let quad: f64 = cuts
            .windows(2)
            .map(|w| gauss_legendre(w[0], w[1], |s| k.eval_intensity(s, &times, &e).unwrap()))
            .sum();
        assert!((exact - quad).abs() < 1e-10);
    }
}
