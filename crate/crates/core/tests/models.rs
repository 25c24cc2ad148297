mod common;

use common::{spec, with_channels};
use fbsde_core::backward_bsde::{BasisSpec, Feature};
use fbsde_core::bundle::PathBundle;
use fbsde_core::coupled::{sequential_solve, FbsdeModel};
use fbsde_core::intensity::{AdditiveKernel, ChannelKernel, RateLaw, RegimeKernel};
use fbsde_core::math::{ks_pvalue, ks_statistic, mean_and_se};
use fbsde_core::measures::{EmpiricalMeasure, EnvironmentPath, EnvironmentSpec, Functional};
use fbsde_core::models::{
    build_hamiltonian_fbsde, build_lq_model, central_difference, lq_hamiltonian, riccati_closed_form, riccati_guess,
    riccati_reference, riccati_residual, simulate_regime_chain, Coefficient, HamiltonianPoint, HamiltonianSpec, LqParams,
    ModelError,
};
use fbsde_core::coupled::Monotonicity;
use fbsde_core::process::EvalPoint;
use fbsde_core::rng::{substream, Purpose};
use proptest::prelude::*;
use rand::Rng;

fn instance() -> LqParams {
    LqParams::new(-2.0, 1.0, 1.0, 2.0, 1.0, 0.2, 0.1)
}

fn grid(n: usize) -> Vec<f64> {
    (0..=n).map(|m| m as f64 / n as f64).collect()
}

/// `p(0)` for `dp/dt = 6 p + p^2`, `p(1) = 1`: separating variables,
/// `ln(p / (p + 6)) = 6 t + c`, so `p(0) / (p(0) + 6) = e^{-6} / 7`.
fn instance_p0() -> f64 {
    let r = (-6.0f64).exp() / 7.0;
    6.0 * r / (1.0 - r)
}

#[test]
fn instance_arithmetic_and_constraints() {
    let p = instance();
    assert!(p.validate().is_ok());
    assert_eq!(p.b_hat(), -3.0);
    assert_eq!(p.f_hat(), 0.0);
    let m = p.monotonicity();
    assert_eq!((m.beta1, m.beta2, m.beta3), (0.0, 0.0, 1.0));

    let q = LqParams::new(1.0, 2.0, 1.0, 1.0, 1.0, 0.2, 0.1);
    assert!(q.validate().is_ok());
    assert_eq!(q.b_hat(), 0.5);
}

#[test]
fn constraint_violations_are_named() {
    let cases = [
        (LqParams::new(-1.0, 1.0, 1.0, 2.0, 1.0, 0.2, 0.1), "|b| f2 = 2"),
        (LqParams::new(-2.0, 1.0, 1.0, 1.5, 1.0, 0.2, 0.1), "f1 f2 > f^2 / 2 + 1"),
        (LqParams::new(-2.0, 1.0, 1.0, 2.0, 0.0, 0.2, 0.1), "f1 > 0, f2 > 0 and g > 0"),
        (LqParams::new(-2.0, 1.0, 1.0, 2.0, 1.0, 0.2, 0.0), "b, f, sigma and gamma must be nonzero"),
    ];
    for (p, name) in cases {
        match build_lq_model(&p) {
            Err(ModelError::Constraint(s)) => assert_eq!(s, name),
            other => panic!("expected rejection {name}, got {:?}", other.err()),
        }
    }
}

#[test]
fn riccati_stepper_matches_separable_closed_form() {
    let p = instance();
    let r = riccati_reference(&p, &grid(50)).unwrap();
    let oracle = instance_p0();
    assert!((r.p[0] - oracle).abs() <= 1e-8 * oracle.max(1e-300), "rk4 {} vs {}", r.p[0], oracle);
    assert!((riccati_closed_form(&p, 1.0, 0.0).unwrap() - oracle).abs() <= 1e-12);
    assert_eq!(r.p[50], 1.0);
    for (m, t) in r.times.iter().enumerate() {
        let c = riccati_closed_form(&p, 1.0, *t).unwrap();
        assert!((r.p[m] - c).abs() <= 1e-8 * c, "node {m}");
    }
    assert_eq!(r.z(3), r.p[3] * 0.2);
    assert_eq!(r.u(3, 2.0), r.p[3] * 0.1 * 2.0);
}

#[test]
fn zero_terminal_gives_zero_riccati_path() {
    let mut p = instance();
    p.g = 0.0;
    let r = riccati_reference(&p, &grid(20)).unwrap();
    assert!(r.p.iter().all(|&v| v == 0.0));
    assert_eq!(riccati_closed_form(&p, 1.0, 0.3), Some(0.0));
}

#[test]
fn riccati_blow_up_is_detected() {
    // b^ = f^ = 0, f2 = 1: p = g / (1 + g (T - t)) explodes at T - t = 0.1.
    let p = LqParams::new(1.0, 1.0, 1.0, 2.0, -10.0, 0.2, 0.1);
    assert_eq!(p.b_hat(), 0.0);
    assert_eq!(p.f_hat(), 0.0);
    match riccati_reference(&p, &grid(100)) {
        Err(ModelError::RiccatiBlowUp { t }) => assert!((t - 0.9).abs() < 0.01, "t = {t}"),
        other => panic!("expected blow-up, got {other:?}"),
    }
}

#[test]
fn riccati_rejects_random_environment() {
    let mut p = instance();
    p.environment = EnvironmentSpec::Constant(EmpiricalMeasure::dirac(&[0.5]).unwrap());
    assert!(matches!(riccati_reference(&p, &grid(10)), Err(ModelError::NoReference(_))));
}

fn lq_bundle(steps: usize, paths: usize, seed: u64) -> PathBundle {
    PathBundle::build(with_channels(spec(1.0, steps, paths, seed, 1.0), vec![ChannelKernel::Additive(AdditiveKernel::constant(1.0))]))
        .unwrap()
}

#[test]
fn ansatz_residual_is_small_and_shrinks_with_the_step() {
    let p = instance();
    let mut res = Vec::new();
    for steps in [25, 50, 100] {
        let b = lq_bundle(steps, 200, 9);
        let r = riccati_reference(&p, &b.grid).unwrap();
        let guess = riccati_guess(&p, &r, &b).unwrap();
        let worst = riccati_residual(&p, &r, &guess.x, &b);
        let dt = 1.0 / steps as f64;
        // Declared C = 1 (|p| <= g = 1 and |X| stays well below 10 here).
        assert!(worst <= dt, "residual {worst} at dt {dt}");
        res.push(worst);
    }
    // First order: a jump inside a step moves the sub-grid drift by O(dt).
    assert!(res[1] < 0.6 * res[0] && res[2] < 0.6 * res[1], "{res:?}");
}

fn eval_point<'a>(env: &'a EmpiricalMeasure, masses: &'a [f64], x: &'a [f64], y: &'a [f64], z: &'a [f64], u: &'a [f64], t: f64) -> EvalPoint<'a> {
    EvalPoint { t, path: 0, step: 0, env, masses, regime: &[], x, y, z, u }
}

/// Evaluates every coefficient of a scalar model at one point.
fn coefficients(m: &FbsdeModel, e: &EvalPoint) -> [f64; 6] {
    let mut o = [0.0; 6];
    m.forward.drift(e, &mut o[0..1]);
    m.forward.diffusion(e, &mut o[1..2]);
    m.forward.jump(e, 0, 1.7, &mut o[2..3]);
    m.driver.eval(e, &mut o[3..4]);
    m.terminal.eval(e.env, e.x, &mut o[4..5]);
    o[5] = m.g[0];
    o
}

#[test]
fn lq_hamiltonian_reproduces_lq_model() {
    let p = instance();
    let lq = build_lq_model(&p).unwrap();
    let h = build_hamiltonian_fbsde(&lq_hamiltonian(&p), &p.intensity, &[]).unwrap();
    assert_eq!(lq.betas, h.betas);
    let mut rng = substream(3, 0, Purpose::Probe);
    for _ in 0..1000 {
        let env = EmpiricalMeasure::dirac(&[rng.random_range(-2.0..2.0)]).unwrap();
        let masses = [rng.random_range(0.1..3.0)];
        let x = [rng.random_range(-3.0..3.0)];
        let y = [rng.random_range(-3.0..3.0)];
        let z = [rng.random_range(-3.0..3.0)];
        let u = [rng.random_range(-3.0..3.0)];
        let e = eval_point(&env, &masses, &x, &y, &z, &u, rng.random_range(0.0..1.0));
        let (a, b) = (coefficients(&lq, &e), coefficients(&h, &e));
        for i in 0..6 {
            assert!((a[i] - b[i]).abs() <= 1e-10 * (1.0 + a[i].abs()), "coefficient {i}: {} vs {}", a[i], b[i]);
        }
    }
}

fn mean(nu: &EmpiricalMeasure) -> f64 {
    nu.mean_coord(0)
}

fn nonlinear_spec() -> HamiltonianSpec {
    HamiltonianSpec {
        b: Coefficient::new(|t, nu, x| x.sin() + 0.5 * mean(nu) + t).with_derivative(|_, _, x| x.cos()),
        sigma: Coefficient::new(|_, _, x| 0.3 + 0.1 * x.cos()).with_derivative(|_, _, x| -0.1 * x.sin()),
        f: Coefficient::new(|_, nu, x| x * x * x / 3.0 - mean(nu) * x).with_derivative(|_, nu, x| x * x - mean(nu)),
        gamma: Coefficient::new(|_, _, x| 0.2 * (-x * x).exp()).with_derivative(|_, _, x| -0.4 * x * (-x * x).exp()),
        g: Coefficient::new(|_, nu, x| 0.5 * x * x + x * mean(nu)).with_derivative(|_, nu, x| x + mean(nu)),
        y_quadratic: 0.7,
        betas: Monotonicity::default(),
    }
}

#[test]
fn hamiltonian_gradient_matches_finite_differences() {
    let h = nonlinear_spec();
    let mut rng = substream(4, 0, Purpose::Probe);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let pt = HamiltonianPoint {
            t: rng.random_range(0.0..1.0),
            env: EmpiricalMeasure::dirac(&[rng.random_range(-1.0..1.0)]).unwrap(),
            x: rng.random_range(-3.0..3.0),
            y: rng.random_range(-3.0..3.0),
            z: rng.random_range(-3.0..3.0),
            u: rng.random_range(-3.0..3.0),
            lambda: rng.random_range(0.1..3.0),
        };
        let grad = h.gradient(&pt);
        let fd = [
            central_difference(|v| h.value(&HamiltonianPoint { x: v, ..pt.clone() }), pt.x),
            central_difference(|v| h.value(&HamiltonianPoint { y: v, ..pt.clone() }), pt.y),
            central_difference(|v| h.value(&HamiltonianPoint { z: v, ..pt.clone() }), pt.z),
            central_difference(|v| h.value(&HamiltonianPoint { u: v, ..pt.clone() }), pt.u),
        ];
        for i in 0..4 {
            worst = worst.max((grad[i] - fd[i]).abs() / fd[i].abs().max(1.0));
        }
    }
    assert!(worst <= 1e-5, "worst relative error {worst}");
}

#[test]
fn hamiltonian_builder_checks_derivatives_and_intensity() {
    let probes: Vec<_> = (0..20).map(|i| (0.5, EmpiricalMeasure::dirac(&[0.1]).unwrap(), -2.0 + 0.2 * i as f64)).collect();
    let good = nonlinear_spec();
    assert!(build_hamiltonian_fbsde(&good, &AdditiveKernel::constant(1.0), &probes).is_ok());

    let mut bad = nonlinear_spec();
    bad.sigma = Coefficient::new(|_, _, x| 0.3 + 0.1 * x.cos()).with_derivative(|_, _, x| 0.1 * x.sin());
    match build_hamiltonian_fbsde(&bad, &AdditiveKernel::constant(1.0), &probes) {
        Err(ModelError::DerivativeMismatch { name, .. }) => assert_eq!(name, "sigma"),
        other => panic!("expected mismatch, got {:?}", other.err()),
    }
    assert!(matches!(
        build_hamiltonian_fbsde(&good, &AdditiveKernel::constant(0.0), &probes),
        Err(ModelError::ZeroIntensity(_))
    ));
}

#[test]
fn x_free_hamiltonian_gives_conditional_expectation_of_terminal_gradient() {
    let spec_h = HamiltonianSpec {
        b: Coefficient::constant(1.0),
        sigma: Coefficient::constant(0.3),
        f: Coefficient::constant(0.0),
        gamma: Coefficient::constant(0.1),
        g: Coefficient::new(|_, _, x| 0.5 * x * x).with_derivative(|_, _, x| x),
        y_quadratic: 0.0,
        betas: Monotonicity { beta1: 0.0, beta2: 0.0, beta3: 1.0 },
    };
    let model = build_hamiltonian_fbsde(&spec_h, &AdditiveKernel::constant(1.0), &[]).unwrap();
    let env = EmpiricalMeasure::dirac(&[0.0]).unwrap();
    let mut rng = substream(5, 0, Purpose::Probe);
    for _ in 0..100 {
        let (x, y, z, u) = ([rng.random_range(-3.0..3.0)], [rng.random_range(-3.0..3.0)], [rng.random_range(-3.0..3.0)], [1.0]);
        let e = eval_point(&env, &[1.0], &x, &y, &z, &u, 0.5);
        let mut out = [1.0];
        model.driver.eval(&e, &mut out);
        assert_eq!(out[0], 0.0);
    }
    // Y_t = E_t[X_T] = X_t + (T - t), so dY = sigma dW + gamma dN~. The
    // increment lies in the span of the joint regression, which recovers
    // it exactly.
    let b = lq_bundle(20, 2000, 6);
    let basis = BasisSpec::polynomial(vec![Feature::State(0)], 1);
    let sol = sequential_solve(&model, &b, &basis).unwrap();
    for p in (0..b.n_paths()).step_by(37) {
        for m in 0..=20 {
            let want = sol.x.at(p, m)[0] + 1.0 - b.grid[m];
            assert!((sol.backward.y.at(p, m)[0] - want).abs() < 1e-8, "path {p} node {m}");
        }
        for m in 0..20 {
            assert!((sol.backward.z.at(p, m)[0] - 0.3).abs() < 1e-8);
            assert!((sol.backward.u.at(p, m)[0] - 0.1).abs() < 1e-8);
        }
    }
}

fn two_state(q12: f64, q21: f64) -> RegimeKernel {
    RegimeKernel::new(2, RateLaw::Constant(vec![0.0, q12, q21, 0.0]), q12.max(q21).max(1e-9)).unwrap()
}

fn dirac_path(horizon: f64) -> EnvironmentPath {
    EnvironmentPath::constant(horizon, EmpiricalMeasure::dirac(&[0.0]).unwrap()).unwrap()
}

#[test]
fn absorbing_chain_stays_put() {
    let rk = RegimeKernel::new(2, RateLaw::Constant(vec![0.0; 4]), 1.0).unwrap();
    let mut rng = substream(1, 0, Purpose::Regime);
    let path = simulate_regime_chain(&rk, &dirac_path(10.0), 1, 10.0, &mut rng).unwrap();
    assert_eq!(path.transitions(), 0);
    assert_eq!(path.state_at(7.3), 1);
    assert_eq!(path.occupation(1), 10.0);
}

#[test]
fn two_state_chain_occupation_holding_times_and_generator() {
    let rk = two_state(1.0, 2.0);
    let env = dirac_path(50.0);
    let mut fractions = Vec::new();
    let mut holds = Vec::new();
    let (mut jumps01, mut occ0) = (0usize, 0.0);
    for rep in 0..1000 {
        let mut rng = substream(11, rep, Purpose::Regime);
        let path = simulate_regime_chain(&rk, &env, 0, 50.0, &mut rng).unwrap();
        fractions.push(path.occupation(0) / 50.0);
        if holds.len() < 1000 {
            holds.extend(path.holding_times(0));
        }
        jumps01 += path.transition_counts(2)[1];
        occ0 += path.occupation(0);
        let total: f64 = path.occupation(0) + path.occupation(1);
        assert!((total - 50.0).abs() < 1e-9);
    }
    let (m, se) = mean_and_se(&fractions);
    assert!((m - 2.0 / 3.0).abs() <= 3.0 * se, "occupation {m} +- {se}");
    holds.truncate(1000);
    let d = ks_statistic(&holds, |t| 1.0 - (-t).exp());
    assert!(ks_pvalue(holds.len(), d) > 0.01, "KS D = {d}");
    let rate = jumps01 as f64 / occ0;
    let rate_se = (jumps01 as f64).sqrt() / occ0;
    assert!((rate - 1.0).abs() <= 3.0 * rate_se, "generator {rate} +- {rate_se}");
}

#[test]
fn environment_driven_chain_matches_segment_hazards() {
    // Both off-diagonal rates equal m(nu), so the jump rate is m(nu) in
    // either state: mean 1 on [0, 1), mean 3 on [1, 2).
    let law = RateLaw::Affine { base: vec![0.0; 4], slope: vec![0.0, 1.0, 1.0, 0.0], functional: Functional::mean() };
    let rk = RegimeKernel::new(2, law, 3.0).unwrap();
    let env = EnvironmentPath::new(
        2.0,
        vec![0.0, 1.0],
        vec![EmpiricalMeasure::dirac(&[1.0]).unwrap(), EmpiricalMeasure::dirac(&[3.0]).unwrap()],
    )
    .unwrap();
    let (mut a, mut b) = (Vec::new(), Vec::new());
    for rep in 0..2000 {
        let mut rng = substream(12, rep, Purpose::Regime);
        let path = simulate_regime_chain(&rk, &env, 0, 2.0, &mut rng).unwrap();
        let c = path.jumps_per_segment(&[0.0, 1.0, 2.0]);
        a.push(c[0] as f64);
        b.push(c[1] as f64);
    }
    let (ma, sa) = mean_and_se(&a);
    let (mb, sb) = mean_and_se(&b);
    assert!((ma - 1.0).abs() <= 3.0 * sa, "segment 1: {ma} +- {sa}");
    assert!((mb - 3.0).abs() <= 3.0 * sb, "segment 2: {mb} +- {sb}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn closed_form_agrees_with_rk4(bh in -3.0f64..3.0, f2 in 0.5f64..4.0, g in 0.1f64..3.0) {
        // f = 1 and f1 = 2 / f2 make f^ = 0; b adjusts b^.
        let p = LqParams::new(bh + 1.0 / f2, f2, 1.0, 2.0 / f2, g, 0.2, 0.1);
        prop_assume!(p.f_hat() == 0.0);
        let r = riccati_reference(&p, &grid(50)).unwrap();
        for (m, t) in r.times.iter().enumerate() {
            let c = riccati_closed_form(&p, 1.0, *t).unwrap();
            prop_assert!((r.p[m] - c).abs() <= 1e-8 * c.abs().max(1e-3), "node {} rk4 {} closed {}", m, r.p[m], c);
        }
    }

    #[test]
    fn regime_paths_partition_the_horizon(q12 in 0.1f64..3.0, q21 in 0.1f64..3.0, seed in 0u64..1000) {
        let rk = two_state(q12, q21);
        let mut rng = substream(seed, 0, Purpose::Regime);
        let path = simulate_regime_chain(&rk, &dirac_path(5.0), 0, 5.0, &mut rng).unwrap();
        prop_assert!(path.times.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(path.states.windows(2).all(|w| w[0] != w[1]));
        prop_assert!((path.occupation(0) + path.occupation(1) - 5.0).abs() < 1e-12);
    }
}
