mod common;

use common::{spec, with_channels};
use fbsde_core::backward_bsde::{
    apriori_gap_check, check_shrinking_family, jump_increment, lsmc_solve, norm_equivalence_check, weighted_norm,
    BackwardError, BackwardSolution, BasisSpec, ClosureDriver, Feature, WeightedNormParams,
};
use fbsde_core::bundle::PathBundle;
use fbsde_core::forward_sde::{simulate_forward, ClosureForward};
use fbsde_core::intensity::{AdditiveKernel, ChannelKernel};
use fbsde_core::math::mean_and_se;
use fbsde_core::process::GridProcess;

fn poisson_bundle(paths: usize, seed: u64) -> PathBundle {
    PathBundle::build(with_channels(spec(1.0, 20, paths, seed, 0.5), vec![ChannelKernel::Additive(AdditiveKernel::constant(2.0))])).unwrap()
}

fn terminal(b: &PathBundle, f: impl Fn(usize) -> f64) -> GridProcess {
    GridProcess::from_vec(b.n_paths(), 1, 1, (0..b.n_paths()).map(f).collect()).unwrap()
}

fn max_abs(g: &GridProcess) -> f64 {
    g.max_abs()
}

#[test]
fn constant_terminal_gives_constant_solution() {
    let b = poisson_bundle(500, 1);
    let basis = BasisSpec::polynomial(vec![Feature::Brownian(0), Feature::Counting(0)], 2);
    let sol = lsmc_solve(&ClosureDriver::zero(1), &terminal(&b, |_| 3.0), &b, None, &basis).unwrap();
    let err = sol.y.data().iter().fold(0.0f64, |a, v| a.max((v - 3.0).abs()));
    assert!(err < 1e-10, "err {err} dropped at {:?}", sol.deficient_steps);
    assert!(max_abs(&sol.z) < 1e-10 && max_abs(&sol.u) < 1e-10 && max_abs(&sol.dm) < 1e-10);
    assert!(sol.martingale().at(0, 0).iter().all(|&v| v == 0.0));
}

#[test]
fn unit_driver_gives_time_to_maturity() {
    let b = poisson_bundle(300, 2);
    let basis = BasisSpec::polynomial(vec![Feature::Brownian(0)], 2);
    let sol = lsmc_solve(&ClosureDriver::new(1, |_, out| out[0] = 1.0), &terminal(&b, |_| 0.0), &b, None, &basis).unwrap();
    for p in 0..b.n_paths() {
        for (m, t) in b.grid.iter().enumerate() {
            assert!((sol.y.at(p, m)[0] - (1.0 - t)).abs() < 1e-10);
        }
    }
}

#[test]
fn brownian_terminal_is_represented_exactly() {
    let b = poisson_bundle(400, 3);
    let n = b.steps();
    let basis = BasisSpec::polynomial(vec![Feature::Brownian(0)], 1);
    let zeta = terminal(&b, |p| b.paths[p].w[n]);
    let sol = lsmc_solve(&ClosureDriver::zero(1), &zeta, &b, None, &basis).unwrap();
    for p in 0..b.n_paths() {
        for m in 0..n {
            assert!((sol.y.at(p, m)[0] - b.paths[p].w[m]).abs() < 1e-10);
            assert!((sol.z.at(p, m)[0] - 1.0).abs() < 1e-10);
        }
    }
    assert!(max_abs(&sol.u) < 1e-10 && max_abs(&sol.dm) < 1e-10);
}

#[test]
fn counting_terminal_has_unit_jump_integrand() {
    // zeta = N_T with rate 2 gives Y_t = N_t + 2 (T - t), U = 1, Z = 0.
    let b = poisson_bundle(600, 4);
    let n = b.steps();
    let basis = BasisSpec::polynomial(vec![Feature::Counting(0)], 1);
    let zeta = terminal(&b, |p| b.paths[p].counts[n]);
    let sol = lsmc_solve(&ClosureDriver::zero(1), &zeta, &b, None, &basis).unwrap();
    for p in 0..b.n_paths() {
        for (m, t) in b.grid.iter().enumerate().take(n) {
            let expect = b.paths[p].counts[m] + 2.0 * (1.0 - t);
            assert!((sol.y.at(p, m)[0] - expect).abs() < 1e-9);
            assert!((sol.u.at(p, m)[0] - 1.0).abs() < 1e-9);
            assert!(sol.z.at(p, m)[0].abs() < 1e-9);
        }
    }
}

fn ou_setup(paths: usize, seed: u64) -> (PathBundle, GridProcess) {
    let b = PathBundle::build(with_channels(spec(1.0, 10, paths, seed, 0.5), vec![ChannelKernel::Additive(AdditiveKernel::constant(1.5))])).unwrap();
    let coef = ClosureForward::new(1, 1)
        .drift(|p, out| out[0] = -p.x[0])
        .diffusion(|_, out| out[0] = 0.4)
        .jump(|_, _, _, out| out[0] = 0.3);
    let x = simulate_forward(&coef, &b, None).unwrap();
    (b, x)
}

fn nonlinear_driver() -> ClosureDriver {
    ClosureDriver::new(1, |p, out| out[0] = -0.5 * p.y[0] + 0.2 * p.x[0] + 0.1 * p.z[0] - 0.3 * p.u[0])
}

fn ou_solve(basis: &BasisSpec, b: &PathBundle, x: &GridProcess) -> BackwardSolution {
    let n = b.steps();
    let zeta = terminal(b, |p| x.at(p, n)[0].powi(2) + x.at(p, n)[0].cos());
    lsmc_solve(&nonlinear_driver(), &zeta, b, Some(x), basis).unwrap()
}

#[test]
fn martingale_part_is_orthogonal_and_centred() {
    let (b, x) = ou_setup(4000, 5);
    let basis = BasisSpec::polynomial(vec![Feature::State(0), Feature::Counting(0)], 2);
    let sol = ou_solve(&basis, &b, &x);
    for m in 0..b.steps() {
        let dm: Vec<f64> = (0..b.n_paths()).map(|p| sol.dm.at(p, m)[0]).collect();
        let (mean, se) = mean_and_se(&dm);
        assert!(mean.abs() <= 3.0 * se + 1e-12, "step {m}: mean {mean} se {se}");
        let cov_w: Vec<f64> = (0..b.n_paths()).map(|p| dm[p] * b.paths[p].dw[m]).collect();
        let (c, se) = mean_and_se(&cov_w);
        assert!(c.abs() <= 3.0 * se + 1e-12);
        let cov_n: Vec<f64> = (0..b.n_paths()).map(|p| dm[p] * jump_increment(&b, p, m, 0)).collect();
        let (c, se) = mean_and_se(&cov_n);
        assert!(c.abs() <= 3.0 * se + 1e-12);
        // Residual orthogonal to the basis (normal equations).
        let ortho: f64 = (0..b.n_paths()).map(|p| dm[p] * x.at(p, m)[0]).sum::<f64>() / b.n_paths() as f64;
        assert!(ortho.abs() < 1e-10, "{ortho}");
    }
}

#[test]
fn reruns_are_identical_and_feature_order_is_irrelevant() {
    let (b, x) = ou_setup(2000, 6);
    let basis = BasisSpec::polynomial(vec![Feature::State(0), Feature::Counting(0)], 2);
    let a = ou_solve(&basis, &b, &x);
    assert_eq!(a, ou_solve(&basis, &b, &x));
    let permuted = BasisSpec::polynomial(vec![Feature::Counting(0), Feature::State(0)], 2);
    let c = ou_solve(&permuted, &b, &x);
    let d = a.minus(&c);
    assert!(d.y.max_abs() < 1e-8 && d.z.max_abs() < 1e-8 && d.u.max_abs() < 1e-8);
}

#[test]
fn higher_degree_reduces_residual_martingale() {
    let (b, x) = ou_setup(3000, 7);
    let params = WeightedNormParams::constant(1.0, b.steps(), 0.0);
    let m0 = weighted_norm(&ou_solve(&BasisSpec::polynomial(vec![Feature::State(0)], 0), &b, &x), &b, &params).m;
    let m2 = weighted_norm(&ou_solve(&BasisSpec::polynomial(vec![Feature::State(0)], 2), &b, &x), &b, &params).m;
    assert!(m2 <= m0, "{m2} > {m0}");
}

#[test]
fn too_few_paths_is_an_error() {
    let b = poisson_bundle(5, 8);
    let basis = BasisSpec::polynomial(vec![Feature::Brownian(0)], 2);
    let r = lsmc_solve(&ClosureDriver::zero(1), &terminal(&b, |_| 1.0), &b, None, &basis);
    assert!(matches!(r, Err(BackwardError::TooFewPaths { .. })));
}

fn constant_solution(b: &PathBundle, c: f64) -> BackwardSolution {
    let mut s = BackwardSolution::zeros(b.n_paths(), b.steps(), 1, 1, b.slots());
    s.y = GridProcess::from_vec(b.n_paths(), b.steps() + 1, 1, vec![c; b.n_paths() * (b.steps() + 1)]).unwrap();
    s
}

#[test]
fn weighted_norm_examples() {
    let b = poisson_bundle(10, 9);
    let zero = BackwardSolution::zeros(10, b.steps(), 1, 1, 1);
    let p = WeightedNormParams::constant(0.7, b.steps(), 1.3);
    assert_eq!(weighted_norm(&zero, &b, &p).total(), 0.0);
    assert_eq!(norm_equivalence_check(&zero, &b, &p).unwrap(), (0.0, 0.0, 0.0));

    let c = constant_solution(&b, 2.0);
    let v = weighted_norm(&c, &b, &p).total();
    let expect = 4.0 * (1.3f64 * 0.7 * 1.0).exp();
    assert!((v - expect).abs() < 1e-12 * expect);

    let (b2, x) = ou_setup(500, 10);
    let sol = ou_solve(&BasisSpec::polynomial(vec![Feature::State(0)], 2), &b2, &x);
    let flat = WeightedNormParams::constant(0.7, b2.steps(), 0.0);
    let (lo, v, hi) = norm_equivalence_check(&sol, &b2, &flat).unwrap();
    assert!(lo == v && v == hi);
    let (lo, v, hi) = norm_equivalence_check(&sol, &b2, &WeightedNormParams::constant(0.7, b2.steps(), 1.0)).unwrap();
    assert!(lo <= v && v <= hi && lo > 0.0);
}

#[test]
fn gap_is_zero_for_identical_inputs_and_linear_in_shift() {
    let b = poisson_bundle(200, 11);
    let basis = BasisSpec::polynomial(vec![Feature::Brownian(0)], 1);
    let f = ClosureDriver::new(1, |_, out| out[0] = 0.5);
    let z1 = terminal(&b, |p| b.paths[p].w[b.steps()]);
    let s1 = lsmc_solve(&f, &z1, &b, None, &basis).unwrap();
    let r = apriori_gap_check(&s1, &s1, &f, &f, &z1, &z1, &b, None).unwrap();
    assert_eq!((r.gap_sq, r.dzeta_sq, r.df_integral), (0.0, 0.0, 0.0));
    for eps in [0.1, 0.05] {
        let z2 = terminal(&b, |p| b.paths[p].w[b.steps()] + eps);
        let s2 = lsmc_solve(&f, &z2, &b, None, &basis).unwrap();
        let r = apriori_gap_check(&s1, &s2, &f, &f, &z1, &z2, &b, None).unwrap();
        // delta Y is the constant eps, so only the sup term contributes.
        assert!((r.gap_sq.sqrt() - eps).abs() < 1e-9, "{}", r.gap_sq);
        assert!((r.dzeta_sq - eps * eps).abs() < 1e-12);
    }
}

#[test]
fn gap_shrinks_along_perturbed_driver_family() {
    let (b, x) = ou_setup(1500, 12);
    let basis = BasisSpec::polynomial(vec![Feature::State(0), Feature::Counting(0)], 2);
    let base = ou_solve(&basis, &b, &x);
    let n = b.steps();
    let zeta = terminal(&b, |p| x.at(p, n)[0].powi(2) + x.at(p, n)[0].cos());
    let f1 = nonlinear_driver();
    let mut reports = Vec::new();
    for level in 0..4 {
        let eps = 0.4 / 2f64.powi(level);
        let f2 = ClosureDriver::new(1, move |p, out| {
            out[0] = -(0.5 + eps) * p.y[0] + 0.2 * p.x[0] + 0.1 * p.z[0] - 0.3 * p.u[0]
        });
        let s2 = lsmc_solve(&f2, &zeta, &b, Some(&x), &basis).unwrap();
        reports.push(apriori_gap_check(&base, &s2, &f1, &f2, &zeta, &zeta, &b, Some(&x)).unwrap());
    }
    check_shrinking_family(&reports).unwrap();
    assert!(reports[3].gap_sq < reports[0].gap_sq / 10.0);
}
