//! The acceptance suite: nine criteria at fixed seeds and full scale, each
//! with a wall-time budget that is part of its verdict.

use std::time::Instant;

use fbsde_core::coupled::relative_distance;
use fbsde_core::models::riccati_guess;

use crate::config::{ModelSpec, RunConfig};
use crate::error::{solver, LabError};
use crate::experiments::{
    constant_duality_checks, lq_checks, lq_setup, monotonicity_checks, riccati_table, run_experiment, solve_lq,
    solved_duality_check, Check, LqSetup,
};
use crate::output::{check_line, run, MANIFEST_FILE};
use crate::replay::{replay, Verdict};

#[derive(Debug, Clone)]
pub struct CriterionResult {
    pub number: usize,
    pub name: &'static str,
    pub checks: Vec<Check>,
    pub seconds: f64,
    pub budget: Option<f64>,
    pub notes: Vec<String>,
    pub error: Option<String>,
}

impl CriterionResult {
    pub fn within_budget(&self) -> bool {
        self.budget.is_none_or(|b| self.seconds <= b)
    }

    pub fn passed(&self) -> bool {
        self.error.is_none() && !self.checks.is_empty() && self.checks.iter().all(|c| c.passed) && self.within_budget()
    }

    /// One table row: verdict, number, name, time against budget.
    pub fn line(&self) -> String {
        let budget = self.budget.map_or(String::from("no budget"), |b| format!("budget {b:.0} s"));
        format!(
            "{} {}. {:<34} {:>7.2} s ({budget}){}",
            if self.passed() { "PASS" } else { "FAIL" },
            self.number,
            self.name,
            self.seconds,
            if self.within_budget() { "" } else { "  OVER BUDGET" }
        )
    }

    /// The row followed by every check and note, indented.
    pub fn details(&self) -> String {
        let mut s = self.line();
        for c in &self.checks {
            s.push_str(&format!("\n      {}", check_line(c)));
        }
        for n in &self.notes {
            s.push_str(&format!("\n      note: {n}"));
        }
        if let Some(e) = &self.error {
            s.push_str(&format!("\n      error: {e}"));
        }
        s
    }
}

pub const SEED: u64 = 42;

fn config(text: &str) -> Result<RunConfig, LabError> {
    RunConfig::from_toml(&format!("seed = {SEED}\n{text}"))
}

/// The full-scale LQ solve shared by criteria 1, 4 and 8.
struct Shared {
    cfg: RunConfig,
    setup: LqSetup,
    solution: fbsde_core::coupled::CoupledSolution,
    seconds: f64,
}

fn timed<T>(f: impl FnOnce() -> Result<T, LabError>) -> (Result<T, LabError>, f64) {
    let start = Instant::now();
    let r = f();
    (r, start.elapsed().as_secs_f64())
}

fn result(number: usize, name: &'static str, budget: Option<f64>, outcome: Result<Vec<Check>, LabError>, seconds: f64) -> CriterionResult {
    let (checks, error) = match outcome {
        Ok(c) => (c, None),
        Err(e) => (Vec::new(), Some(e.to_string())),
    };
    CriterionResult { number, name, checks, seconds, budget, notes: Vec::new(), error }
}

fn criterion_1(shared: &mut Option<Shared>) -> CriterionResult {
    let (out, secs) = timed(|| {
        let cfg = config("kind = \"reproduce-lq\"\nhorizon = 1.0\nsteps = 50\npaths = 10000\n")?;
        let ModelSpec::Lq(m) = &cfg.model else { unreachable!("reproduce-lq defaults to the LQ model") };
        let setup = lq_setup(&cfg, m)?;
        let (_, cross) = riccati_table(&setup, cfg.horizon);
        let (solution, report) = solve_lq(&cfg, &setup, None)?;
        let mut checks: Vec<Check> = cross.into_iter().collect();
        checks.extend(lq_checks(&setup, &solution, &report));
        Ok((checks, Shared { cfg, setup, solution, seconds: 0.0 }))
    });
    match out {
        Ok((checks, mut s)) => {
            s.seconds = secs;
            *shared = Some(s);
            result(1, "LQ Riccati reproduction", Some(60.0), Ok(checks), secs)
        }
        Err(e) => result(1, "LQ Riccati reproduction", Some(60.0), Err(e), secs),
    }
}

fn experiment_checks(text: &str, keep: &[&str]) -> Result<Vec<Check>, LabError> {
    let cfg = config(text)?;
    let out = run_experiment(&cfg)?;
    Ok(out
        .checks
        .into_iter()
        .filter(|c| keep.is_empty() || keep.iter().any(|k| c.name.starts_with(k)))
        .map(|mut c| {
            c.name = format!("{}: {}", cfg.model.name(), c.name);
            c
        })
        .collect())
}

fn missing_shared() -> LabError {
    LabError::Solver { module: "acceptance", stage: "shared LQ solve", message: "criterion 1 did not produce a solution".into() }
}

fn shared_note(s: &Option<Shared>) -> Vec<String> {
    s.as_ref()
        .map(|s| vec![format!("reuses the criterion 1 solution ({:.2} s, counted there)", s.seconds)])
        .unwrap_or_default()
}

/// Runs every criterion in order, reporting each as soon as it finishes.
pub fn run_acceptance(mut progress: impl FnMut(&CriterionResult)) -> Vec<CriterionResult> {
    let mut out = Vec::new();
    let mut push = |r: CriterionResult, out: &mut Vec<CriterionResult>| {
        progress(&r);
        out.push(r);
    };
    let mut shared = None;
    push(criterion_1(&mut shared), &mut out);

    let (c, t) = timed(|| experiment_checks("kind = \"solve-coupled\"\n[model]\ntype = \"one-directional\"\n", &[]));
    push(result(2, "Decoupled oracle equivalence", Some(30.0), c, t), &mut out);

    let (c, t) = timed(|| {
        let cfg = config("kind = \"verify-monotonicity\"\n[checks]\ntuples = 10000\n")?;
        let ModelSpec::Lq(m) = &cfg.model else { unreachable!("verify-monotonicity defaults to the LQ model") };
        monotonicity_checks(&cfg, m)
    });
    push(result(3, "G-monotonicity verifier", Some(5.0), c, t), &mut out);

    let (c, t) = timed(|| {
        let cfg = config("kind = \"verify-duality\"\npaths = 10000\n")?;
        let ModelSpec::ConstantDuality(m) = &cfg.model else { unreachable!("verify-duality defaults to the constant case") };
        let mut checks = constant_duality_checks(&cfg, m)?;
        let s = shared.as_ref().ok_or_else(missing_shared)?;
        checks.push(solved_duality_check(&s.cfg, &s.setup, &s.solution)?);
        Ok(checks)
    });
    let mut r = result(4, "Ito duality", Some(30.0), c, t);
    r.notes = shared_note(&shared);
    push(r, &mut out);

    let (c, t) = timed(|| {
        let mut checks = experiment_checks("kind = \"simulate-pointproc\"\npaths = 100000\n[model]\ntype = \"poisson\"\nrate = 2.0\n", &[])?;
        checks.extend(experiment_checks("kind = \"simulate-pointproc\"\n[model]\ntype = \"hawkes\"\n", &[])?);
        Ok(checks)
    });
    push(result(5, "Point-process law", Some(60.0), c, t), &mut out);

    let (c, t) = timed(|| experiment_checks("kind = \"simulate-regime\"\n[model]\ntype = \"regime\"\nrates = [0.0, 1.0, 2.0, 0.0]\n", &[]));
    push(result(6, "Regime chain", Some(30.0), c, t), &mut out);

    let (c, t) = timed(|| {
        experiment_checks(
            "kind = \"solve-backward\"\n",
            &["martingale orthogonality", "norm equivalence", "constant terminal", "unit driver", "Brownian terminal"],
        )
    });
    push(result(7, "BSDE decomposition", Some(30.0), c, t), &mut out);

    let (c, t) = timed(|| {
        let s = shared.as_ref().ok_or_else(missing_shared)?;
        let guess = riccati_guess(&s.setup.params, &s.setup.reference, &s.setup.bundle).map_err(solver("models", "riccati guess"))?;
        let (other, _) = solve_lq(&s.cfg, &s.setup, Some(&guess))?;
        let rel = relative_distance(&s.solution, &other, &s.setup.bundle);
        Ok(vec![Check::at_most("zero vs Riccati-ansatz guess", rel, 10.0 * s.cfg.solver.tolerance)])
    });
    let mut r = result(8, "Uniqueness probe", Some(120.0), c, t);
    r.notes = shared_note(&shared);
    push(r, &mut out);

    let (c, t) = timed(determinism_checks);
    push(result(9, "Determinism", None, c, t), &mut out);
    out
}

/// Small runs of every experiment kind, each replayed from its manifest.
pub fn determinism_configs() -> Vec<String> {
    [
        "kind = \"simulate-pointproc\"\npaths = 400\nthreads = 4\n",
        "kind = \"simulate-pointproc\"\nhorizon = 30.0\npaths = 20\n[model]\ntype = \"hawkes\"\nburn_in = 5.0\n",
        "kind = \"simulate-regime\"\npaths = 200\nthreads = 3\n",
        "kind = \"solve-forward\"\nsteps = 20\npaths = 300\n",
        "kind = \"solve-backward\"\nsteps = 10\npaths = 300\n",
        "kind = \"solve-coupled\"\nsteps = 10\npaths = 200\n",
        "kind = \"solve-coupled\"\nsteps = 10\npaths = 200\n[model]\ntype = \"one-directional\"\n",
        "kind = \"verify-monotonicity\"\n[checks]\ntuples = 500\n",
        "kind = \"verify-duality\"\npaths = 500\n",
        "kind = \"reproduce-lq\"\nsteps = 10\npaths = 200\n",
    ]
    .iter()
    .map(|s| format!("seed = 7\n{s}"))
    .collect()
}

fn determinism_checks() -> Result<Vec<Check>, LabError> {
    let dir = tempfile::tempdir().map_err(|e| LabError::io(std::env::temp_dir(), e))?;
    let mut checks = Vec::new();
    for text in determinism_configs() {
        let mut cfg = RunConfig::from_toml(&text)?;
        cfg.output_dir = dir.path().to_string_lossy().into_owned();
        let rec = run(&cfg)?;
        let rep = replay(&rec.dir.join(MANIFEST_FILE))?;
        let differing = match &rep.verdict {
            Verdict::Identical => 0,
            Verdict::Differs { files } => files.len().max(1),
        };
        checks.push(
            Check::new(&format!("replay {} ({})", cfg.kind.name(), cfg.model.name()), rep.identical() && !rep.config_changed)
                .with("files", rec.manifest.files.len() as f64)
                .with("differing", differing as f64),
        );
    }
    Ok(checks)
}
