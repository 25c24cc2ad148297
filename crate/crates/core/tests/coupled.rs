mod common;

use std::sync::Arc;

use common::{spec, with_channels};
use fbsde_core::backward_bsde::{BasisSpec, ClosureDriver, Feature};
use fbsde_core::bundle::PathBundle;
use fbsde_core::coupled::{
    check_g_monotonicity, continuation_solve, ito_duality_check, monotonicity_slack, relative_distance, sequential_solve,
    solution_legs, solve_decoupled_base, star_components, uniqueness_probe, BackwardLegs, BaseWeights, Case, ClosureTerminal,
    ContinuationConfig, CoupledError, CoupledSolution, FbsdeModel, ForwardLegs, Monotonicity, MonotonicityTuple, Offsets,
    StatePoint, TupleSampler,
};
use fbsde_core::forward_sde::ClosureForward;
use fbsde_core::intensity::{AdditiveKernel, ChannelKernel};
use fbsde_core::math::mean_and_se;
use fbsde_core::measures::EmpiricalMeasure;
use fbsde_core::models::{build_lq_model, riccati_errors, riccati_guess, riccati_reference, LqParams};
use fbsde_core::process::GridProcess;
use proptest::prelude::*;

fn dirac(x: f64) -> EmpiricalMeasure {
    EmpiricalMeasure::dirac(&[x]).unwrap()
}

fn sampler() -> TupleSampler {
    TupleSampler {
        horizon: 1.0,
        envs: vec![dirac(0.0), dirac(-0.7), dirac(1.3)],
        masses: vec![vec![1.0], vec![0.4], vec![2.5]],
        regimes: Vec::new(),
        marks: Vec::new(),
        radius: 3.0,
    }
}

fn instance() -> LqParams {
    LqParams::new(-2.0, 1.0, 1.0, 2.0, 1.0, 0.2, 0.1)
}

fn lq_bundle(paths: usize, seed: u64, x0: f64) -> PathBundle {
    PathBundle::build(with_channels(spec(1.0, 50, paths, seed, x0), vec![ChannelKernel::Additive(AdditiveKernel::constant(1.0))]))
        .unwrap()
}

fn lq_config() -> ContinuationConfig {
    ContinuationConfig::new(BasisSpec::polynomial(vec![Feature::State(0)], 2))
}

/// Model with no coefficients on `d = n = k = 1`.
fn zero_model() -> FbsdeModel {
    FbsdeModel {
        d: 1,
        n: 1,
        k: 1,
        g: vec![1.0],
        c_g: Some(1.0),
        forward: Arc::new(ClosureForward::new(1, 1)),
        driver: Arc::new(ClosureDriver::zero(1)),
        terminal: Arc::new(ClosureTerminal::new(1, |_, _, o| o[0] = 0.0)),
        betas: Monotonicity { beta1: 1.0, beta2: 0.0, beta3: 1.0 },
        constants: None,
        case: None,
    }
}

fn point(x: f64, y: f64, z: f64, u: f64) -> StatePoint {
    StatePoint { x: vec![x], y: vec![y], z: vec![z], u: vec![u] }
}

#[test]
fn lq_declared_constants_hold_on_ten_thousand_tuples() {
    let model = build_lq_model(&instance()).unwrap();
    let tuples = sampler().sample(&model, 10_000, 7);
    let r = check_g_monotonicity(&model, &tuples);
    assert_eq!(r.tuples, 10_000);
    assert!(r.holds(), "{} operator and {} terminal violations", r.violations, r.terminal_violations);
    assert!(r.violating.is_none());
}

#[test]
fn displayed_beta1_is_violated_by_the_lq_instance() {
    let mut model = build_lq_model(&instance()).unwrap();
    model.betas.beta1 = 2.0;
    let r = check_g_monotonicity(&model, &sampler().sample(&model, 1000, 8));
    assert!(r.violations > 0);
    assert!(r.violating.is_some());
}

#[test]
fn standing_constraints_do_not_imply_monotonicity() {
    // |b| f2 = 2 and f1 f2 = 4.01 > f^2 / 2 + 1 = 3, but f^ = 2.005 - 4 < 0,
    // so the form -f^ dx^2 - dy^2 / f2 is positive along dx.
    let p = LqParams::new(-4.0, 0.5, 2.0f64.sqrt(), 4.01, 0.1, 0.2, 0.1);
    assert!(p.validate().is_ok());
    assert!(p.f_hat() < 0.0);
    let model = build_lq_model(&p).unwrap();
    assert_eq!(model.betas.beta1, 0.0);
    assert!(check_g_monotonicity(&model, &sampler().sample(&model, 1000, 11)).violations > 0);
}

/// Instance with `f^ = 3/4`, whose driver is rebuilt with `-f^`.
fn flipped_model() -> (FbsdeModel, FbsdeModel) {
    let p = LqParams::new(-2.0, 1.0, 0.5, 2.0, 1.0, 0.2, 0.1);
    let model = build_lq_model(&p).unwrap();
    assert_eq!(model.betas.beta1, 0.75);
    let (fh, bh) = (p.f_hat(), p.b_hat());
    let mut flipped = model.clone();
    flipped.driver = Arc::new(ClosureDriver::new(1, move |e, o| o[0] = -fh * (e.x[0] - e.env.mean_coord(0)) + bh * e.y[0]));
    (model, flipped)
}

#[test]
fn sign_flipped_instance_is_caught_along_the_hand_built_direction() {
    let (model, flipped) = flipped_model();
    let tu = MonotonicityTuple {
        t: 0.5,
        env: dirac(0.0),
        masses: vec![1.0],
        marks: vec![1.0],
        regime: Vec::new(),
        p: point(1.0, 0.0, 0.0, 0.0),
        q: point(0.0, 0.0, 0.0, 0.0),
    };
    // Original: -delta f delta x = -f^ = -3/4 equals -beta1 |dx|^2, slack 0.
    let (s, _) = monotonicity_slack(&model, &tu);
    assert!(s.abs() < 1e-14);
    // Flipped: -delta f delta x = +3/4 against the bound -3/4.
    let (s, _) = monotonicity_slack(&flipped, &tu);
    assert!((s + 1.5).abs() < 1e-14, "slack {s}");
    let r = check_g_monotonicity(&flipped, std::slice::from_ref(&tu));
    assert_eq!(r.violations, 1);
    assert_eq!(r.violating.as_ref(), Some(&tu));
    assert!(check_g_monotonicity(&model, &sampler().sample(&model, 2000, 9)).holds());
    assert!(check_g_monotonicity(&flipped, &sampler().sample(&flipped, 2000, 9)).violations > 0);
}

#[test]
fn constant_coefficients_are_trivially_monotone() {
    let model = FbsdeModel {
        forward: Arc::new(
            ClosureForward::new(1, 1)
                .drift(|_, o| o[0] = 0.3)
                .diffusion(|_, o| o[0] = 0.2)
                .jump(|_, _, _, o| o[0] = 0.1),
        ),
        driver: Arc::new(ClosureDriver::new(1, |_, o| o[0] = -1.0)),
        terminal: Arc::new(ClosureTerminal::new(1, |_, x, o| o[0] = x[0])),
        betas: Monotonicity { beta1: 0.0, beta2: 0.0, beta3: 1.0 },
        ..zero_model()
    };
    let tuples = sampler().sample(&model, 1000, 10);
    for tu in &tuples {
        let (s, t) = monotonicity_slack(&model, tu);
        assert_eq!(s, 0.0);
        assert!(t.abs() < 1e-12);
    }
    assert!(check_g_monotonicity(&model, &tuples).holds());
}

#[test]
fn model_validation_rejects_bad_g_and_warns_on_cases() {
    let mut m = zero_model();
    m.g = vec![0.0];
    assert!(matches!(m.validate(), Err(CoupledError::RankDeficient(_))));
    let mut m = zero_model();
    m.betas.beta1 = -1.0;
    assert!(matches!(m.validate(), Err(CoupledError::Model(_))));
    let w = zero_model().validate().unwrap();
    assert!(w.iter().any(|s| s.contains("beta2 > 0")));
    assert_eq!(zero_model().case(), Case::DLtN);
    let mut m = zero_model();
    m.betas.beta2 = 1.0;
    assert_eq!(m.case(), Case::DGeN);
}

fn plain_bundle(paths: usize, steps: usize, seed: u64, x0: f64) -> PathBundle {
    PathBundle::build(spec(1.0, steps, paths, seed, x0)).unwrap()
}

#[test]
fn zero_offsets_give_zero_base_solution() {
    let model = zero_model();
    let b = plain_bundle(50, 10, 1, 0.0);
    let basis = BasisSpec::polynomial(vec![Feature::State(0)], 1);
    for case in [Case::DLtN, Case::DGeN] {
        let sol = solve_decoupled_base(&model, &Offsets::zeros(&model, &b), &b, case, &basis, BaseWeights::default()).unwrap();
        assert_eq!(star_components(&sol, None, &b).norm(), 0.0);
    }
}

#[test]
fn case_i_base_with_unit_drift_offset() {
    let model = zero_model();
    let steps = 20;
    let b = plain_bundle(50, steps, 2, 0.0);
    let mut offs = Offsets::zeros(&model, &b);
    for p in 0..b.n_paths() {
        for m in 0..steps {
            offs.b.at_mut(p, m)[0] = 1.0;
        }
    }
    let basis = BasisSpec::polynomial(vec![Feature::State(0)], 1);
    let sol = solve_decoupled_base(&model, &offs, &b, Case::DLtN, &basis, BaseWeights::default()).unwrap();
    let dt = 1.0 / steps as f64;
    for p in 0..b.n_paths() {
        for m in 0..=steps {
            let t = b.grid[m];
            assert!((sol.x.at(p, m)[0] - t).abs() < 1e-12);
            // Explicit scheme: Y_m = Y_{m+1} + X_m dt, so Y_m = T + sum_{j >= m} t_j dt.
            let discrete = 1.0 + (m..steps).map(|j| b.grid[j] * dt).sum::<f64>();
            let y = sol.backward.y.at(p, m)[0];
            assert!((y - discrete).abs() < 1e-10, "node {m}: {y} vs {discrete}");
            assert!((y - (1.0 + (1.0 - t * t) / 2.0)).abs() <= dt);
        }
    }
    assert!(sol.backward.z.max_abs() < 1e-10 && sol.backward.dm.max_abs() < 1e-10);
}

#[test]
fn case_ii_base_with_unit_driver_offset() {
    let model = zero_model();
    let steps = 20;
    let b = plain_bundle(50, steps, 3, 0.25);
    let mut offs = Offsets::zeros(&model, &b);
    for p in 0..b.n_paths() {
        for m in 0..steps {
            offs.f.at_mut(p, m)[0] = 1.0;
        }
    }
    let basis = BasisSpec::polynomial(vec![Feature::State(0)], 1);
    let sol = solve_decoupled_base(&model, &offs, &b, Case::DGeN, &basis, BaseWeights::default()).unwrap();
    let dt = 1.0 / steps as f64;
    for p in 0..b.n_paths() {
        let mut x = 0.25;
        for m in 0..=steps {
            let y_exact = 1.0 - b.grid[m];
            assert!((sol.backward.y.at(p, m)[0] - y_exact).abs() < 1e-10);
            assert!((sol.x.at(p, m)[0] - x).abs() < 1e-10, "node {m}");
            x += y_exact * dt;
        }
    }
}

#[test]
fn zero_model_is_solved_in_one_step() {
    let model = zero_model();
    let b = plain_bundle(100, 10, 4, 0.0);
    let mut cfg = ContinuationConfig::new(BasisSpec::polynomial(vec![Feature::State(0)], 1));
    cfg.epsilon = 1.0;
    let (sol, rep) = continuation_solve(&model, &b, &cfg, None).unwrap();
    assert_eq!(rep.steps.len(), 1);
    assert_eq!(rep.outer_iterations(), 1);
    assert_eq!(star_components(&sol, None, &b).norm(), 0.0);
}

/// `f` and `g` depend on `X`; the forward leg ignores `(Y, Z, U)`.
fn one_directional_model() -> FbsdeModel {
    FbsdeModel {
        forward: Arc::new(
            ClosureForward::new(1, 1)
                .drift(|e, o| o[0] = 0.5 * (0.2 - e.x[0]))
                .diffusion(|e, o| o[0] = 0.3 + 0.05 * e.x[0].sin())
                .jump(|_, _, mark, o| o[0] = 0.1 * mark),
        ),
        driver: Arc::new(ClosureDriver::new(1, |e, o| o[0] = e.x[0].cos() - 0.5 * e.y[0] + 0.1 * e.z[0])),
        terminal: Arc::new(ClosureTerminal::new(1, |_, x, o| o[0] = 0.5 * x[0] * x[0])),
        ..zero_model()
    }
}

#[test]
fn one_directional_coupling_matches_sequential_solve() {
    let model = one_directional_model();
    let b = lq_bundle(2000, 5, 0.4);
    let cfg = lq_config();
    let seq = sequential_solve(&model, &b, &cfg.basis).unwrap();
    let (sol, rep) = continuation_solve(&model, &b, &cfg, None).unwrap();
    let gap = relative_distance(&sol, &seq, &b);
    assert!(gap <= cfg.tolerance, "gap {gap}");
    assert!(rep.steps.iter().all(|s| s.accepted));
    // Arbitrary guesses agree as well.
    let junk = seq.clone();
    let probe = uniqueness_probe(&model, &b, &cfg, [None, Some(&junk)]).unwrap();
    assert!(probe.passed(), "discrepancy {}", probe.relative);
}

#[test]
fn identical_guesses_give_zero_discrepancy() {
    let model = one_directional_model();
    let b = lq_bundle(300, 6, 0.4);
    let probe = uniqueness_probe(&model, &b, &lq_config(), [None, None]).unwrap();
    assert_eq!(probe.discrepancy, 0.0);
}

#[test]
fn lq_solution_matches_riccati_and_is_consistent() {
    let p = instance();
    let model = build_lq_model(&p).unwrap();
    let b = lq_bundle(2000, 42, 1.0);
    let cfg = lq_config();
    let (sol, rep) = continuation_solve(&model, &b, &cfg, None).unwrap();
    assert_eq!(rep.case, Case::DLtN);
    let r = riccati_reference(&p, &b.grid).unwrap();
    let e = riccati_errors(&r, &sol, &b);
    assert!(e.y <= 0.05, "Y error {}", e.y);
    assert!(e.z <= 0.10 && e.u <= 0.10, "Z {} U {}", e.z, e.u);
    assert!(e.m <= 0.01, "M {}", e.m);

    // Terminal consistency: Y_T = g (X_T - m) with m = 0, exactly.
    for q in 0..b.n_paths() {
        assert_eq!(sol.backward.y.at(q, 50)[0], sol.x.at(q, 50)[0]);
    }
    // Contraction is observable on every accepted step.
    let ratios = rep.contraction_ratios();
    assert!(!ratios.is_empty() && ratios.iter().all(|&c| c < 1.0), "{ratios:?}");

    // Duality on the solved instance.
    let (bb, sig, gam, f, zeta) = solution_legs(&model, &sol, &b).unwrap();
    let d = ito_duality_check(
        ForwardLegs { b: &bb, sigma: &sig, gamma: &gam },
        BackwardLegs { f: &f, zeta: &zeta },
        &model.g,
        &b,
        &cfg.basis,
        1.0,
    )
    .unwrap();
    assert!(d.passed, "{d:?}");
}

#[test]
fn uniqueness_from_zero_and_riccati_guesses() {
    let p = instance();
    let model = build_lq_model(&p).unwrap();
    let b = lq_bundle(1000, 43, 1.0);
    let r = riccati_reference(&p, &b.grid).unwrap();
    let guess = riccati_guess(&p, &r, &b).unwrap();
    let probe = uniqueness_probe(&model, &b, &lq_config(), [None, Some(&guess)]).unwrap();
    assert!(probe.passed(), "relative discrepancy {} > {}", probe.relative, probe.bound);
}

#[test]
fn epsilon_schedule_does_not_change_the_solution() {
    let model = build_lq_model(&instance()).unwrap();
    let b = lq_bundle(1000, 44, 1.0);
    let mut a = lq_config();
    a.epsilon = 0.25;
    let mut c = lq_config();
    c.epsilon = 0.1;
    let (sa, _) = continuation_solve(&model, &b, &a, None).unwrap();
    let (sc, rc) = continuation_solve(&model, &b, &c, None).unwrap();
    assert_eq!(rc.steps.iter().filter(|s| s.accepted).count(), 10);
    let gap = relative_distance(&sa, &sc, &b);
    assert!(gap <= 10.0 * a.tolerance, "gap {gap}");
}

#[test]
fn converged_inner_loop_reaches_the_same_fixed_point() {
    let model = build_lq_model(&instance()).unwrap();
    let b = lq_bundle(300, 45, 1.0);
    let fast = lq_config();
    let mut full = lq_config();
    full.inner_sweeps = None;
    let (sf, _) = continuation_solve(&model, &b, &fast, None).unwrap();
    let (sl, rl) = continuation_solve(&model, &b, &full, None).unwrap();
    assert!(rl.inner_sweeps() > rl.outer_iterations());
    assert!(relative_distance(&sf, &sl, &b) <= 10.0 * fast.tolerance);
}

#[test]
fn step_underflow_is_reported() {
    let model = build_lq_model(&instance()).unwrap();
    let b = lq_bundle(200, 46, 1.0);
    let mut cfg = lq_config();
    cfg.max_iterations = 1;
    cfg.epsilon = 0.5;
    cfg.epsilon_min = 0.2;
    assert!(matches!(continuation_solve(&model, &b, &cfg, None), Err(CoupledError::StepUnderflow { .. })));
}

fn zeros(b: &PathBundle, dim: usize) -> GridProcess {
    GridProcess::zeros(b.n_paths(), b.steps(), dim)
}

#[test]
fn duality_of_zero_legs() {
    let b = lq_bundle(200, 47, 0.0);
    let (z1, zg) = (zeros(&b, 1), zeros(&b, 1));
    let zeta = GridProcess::zeros(b.n_paths(), 1, 1);
    let basis = BasisSpec::polynomial(vec![Feature::State(0)], 1);
    let d = ito_duality_check(
        ForwardLegs { b: &z1, sigma: &z1, gamma: &zg },
        BackwardLegs { f: &z1, zeta: &zeta },
        &[1.0],
        &b,
        &basis,
        0.0,
    )
    .unwrap();
    assert_eq!((d.lhs, d.rhs), (0.0, 0.0));
    assert!(d.passed);
    let short = GridProcess::zeros(b.n_paths() - 1, b.steps(), 1);
    let r = ito_duality_check(
        ForwardLegs { b: &short, sigma: &z1, gamma: &zg },
        BackwardLegs { f: &z1, zeta: &zeta },
        &[1.0],
        &b,
        &basis,
        0.0,
    );
    assert!(matches!(r, Err(CoupledError::Dimension(_))));
}

#[test]
fn duality_of_constant_brownian_legs_is_t_sigma_z() {
    // X = Sigma W, Y = z W (from zeta = z W_T, F = 0): both sides equal
    // T Sigma z in expectation.
    let (sigma, z) = (0.4, 1.5);
    let b = PathBundle::build(spec(1.0, 20, 10_000, 48, 0.0)).unwrap();
    let mut sig = zeros(&b, 1);
    for p in 0..b.n_paths() {
        for m in 0..20 {
            sig.at_mut(p, m)[0] = sigma;
        }
    }
    let zeta = GridProcess::from_vec(b.n_paths(), 1, 1, b.paths.iter().map(|d| z * d.w[20]).collect()).unwrap();
    let (zero, gam) = (zeros(&b, 1), zeros(&b, 0));
    let basis = BasisSpec::polynomial(vec![Feature::Brownian(0)], 1);
    let d = ito_duality_check(
        ForwardLegs { b: &zero, sigma: &sig, gamma: &gam },
        BackwardLegs { f: &zero, zeta: &zeta },
        &[1.0],
        &b,
        &basis,
        0.0,
    )
    .unwrap();
    assert!((d.rhs - sigma * z).abs() < 1e-10, "rhs {}", d.rhs);
    let w2: Vec<f64> = b.paths.iter().map(|d| sigma * z * d.w[20] * d.w[20]).collect();
    let (_, se) = mean_and_se(&w2);
    assert!((d.lhs - sigma * z).abs() <= 3.0 * se, "lhs {} +- {se}", d.lhs);
    assert!(d.passed, "{d:?}");
}

#[test]
fn duality_of_the_difference_of_two_solved_instances() {
    let model = build_lq_model(&instance()).unwrap();
    let cfg = lq_config();
    let (b1, b2) = (lq_bundle(1000, 49, 1.0), lq_bundle(1000, 49, 1.5));
    let (s1, _) = continuation_solve(&model, &b1, &cfg, None).unwrap();
    let (s2, _) = continuation_solve(&model, &b2, &cfg, None).unwrap();
    let l1 = solution_legs(&model, &s1, &b1).unwrap();
    let l2 = solution_legs(&model, &s2, &b2).unwrap();
    let (db, ds, dg, df, dz) = (l1.0.minus(&l2.0), l1.1.minus(&l2.1), l1.2.minus(&l2.2), l1.3.minus(&l2.3), l1.4.minus(&l2.4));
    // Same noise, initial state x0_1 - x0_2.
    let bd = lq_bundle(1000, 49, -0.5);
    let d = ito_duality_check(
        ForwardLegs { b: &db, sigma: &ds, gamma: &dg },
        BackwardLegs { f: &df, zeta: &dz },
        &model.g,
        &bd,
        &cfg.basis,
        1.0,
    )
    .unwrap();
    assert!(d.passed, "{d:?}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn valid_lq_parameters_satisfy_their_declared_constants(
        f2 in 0.5f64..4.0,
        sign in prop::bool::ANY,
        f in 0.1f64..2.0,
        extra in 0.01f64..2.0,
        g in 0.1f64..3.0,
    ) {
        let b = if sign { 2.0 / f2 } else { -2.0 / f2 };
        let f1 = (f * f / 2.0 + 1.0) / f2 + extra;
        let p = LqParams::new(b, f2, f, f1, g, 0.2, 0.1);
        // The standing constraints allow f^ < 0, where no beta1 >= 0 is valid.
        prop_assume!(p.validate().is_ok() && p.f_hat() >= 0.0);
        let model = build_lq_model(&p).unwrap();
        let r = check_g_monotonicity(&model, &sampler().sample(&model, 200, 1));
        prop_assert!(r.holds(), "worst {} / {}", r.worst_slack, r.worst_terminal_slack);
    }

    #[test]
    fn g_and_its_transpose_are_adjoint(
        g in prop::collection::vec(-2.0f64..2.0, 6),
        x in prop::collection::vec(-2.0f64..2.0, 3),
        y in prop::collection::vec(-2.0f64..2.0, 2),
    ) {
        let model = FbsdeModel { d: 3, n: 2, g, ..zero_model() };
        let mut gx = vec![0.0; 2];
        model.g_x(&x, &mut gx);
        let mut gty = vec![0.0; 3];
        model.gt_y(&y, 1, &mut gty);
        let lhs: f64 = gx.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&gty).map(|(a, b)| a * b).sum();
        prop_assert!((lhs - rhs).abs() < 1e-12);
    }
}

#[test]
fn zero_solution_has_zero_norm() {
    let model = zero_model();
    let b = plain_bundle(10, 5, 1, 0.0);
    let s = CoupledSolution::zeros(&model, &b);
    assert_eq!(relative_distance(&s, &s, &b), 0.0);
}
