//! Config validation, run directories, replay and the binary's exit codes.

use std::fs;
use std::path::Path;
use std::process::Command;

use fbsde_lab::output::{CONFIG_FILE, MANIFEST_FILE};
use fbsde_lab::{replay, run, LabError, RunConfig, Verdict};

const SMALL: &str = "seed = 3\nkind = \"simulate-pointproc\"\npaths = 1500\n";

fn config_in(text: &str, dir: &Path) -> RunConfig {
    let mut cfg = RunConfig::from_toml(text).unwrap();
    cfg.output_dir = dir.to_string_lossy().into_owned();
    cfg
}

fn field(e: LabError) -> (String, String) {
    match e {
        LabError::Config { field, message } => (field, message),
        other => panic!("expected a config error, got {other}"),
    }
}

#[test]
fn too_few_paths_for_the_basis_is_rejected() {
    let (f, m) = field(RunConfig::from_toml("seed = 1\nkind = \"solve-coupled\"\npaths = 5\n").unwrap_err());
    assert_eq!(f, "paths");
    assert!(m.contains("basis dimension"), "{m}");
}

#[test]
fn seed_is_required() {
    let (f, _) = field(RunConfig::from_toml("kind = \"solve-forward\"\n").unwrap_err());
    assert_eq!(f, "seed");
}

#[test]
fn unknown_fields_and_values_are_rejected() {
    assert!(matches!(RunConfig::from_toml("seed = 1\nkind = \"solve-forward\"\npath = 10\n"), Err(LabError::Parse(_))));
    assert!(matches!(RunConfig::from_toml("seed = 1\nkind = \"solve-sideways\"\n"), Err(LabError::Parse(_))));
    assert!(matches!(RunConfig::from_toml("seed = 1\nkind = \"solve-forward\"\n[solver]\nepsilon = 0.5\nfoo = 1\n"), Err(LabError::Parse(_))));
}

#[test]
fn out_of_range_values_name_their_field() {
    let cases = [
        ("seed = -1\nkind = \"solve-forward\"\n", "seed"),
        ("seed = 1\nkind = \"solve-forward\"\nsteps = 1\n", "steps"),
        ("seed = 1\nkind = \"solve-forward\"\nthreads = 0\n", "threads"),
        ("seed = 1\nkind = \"solve-coupled\"\n[solver]\nepsilon = 1.5\n", "solver.epsilon"),
        ("seed = 1\nkind = \"solve-forward\"\n[model]\ntype = \"poisson\"\n", "model.type"),
    ];
    for (text, want) in cases {
        let (f, _) = field(RunConfig::from_toml(text).unwrap_err());
        assert_eq!(f, want, "{text}");
    }
}

#[test]
fn supercritical_hawkes_is_rejected() {
    let text = "seed = 1\nkind = \"simulate-pointproc\"\n[model]\ntype = \"hawkes\"\n[model.lag]\nkind = \"exponential\"\nscale = 1.5\ndecay = 1.0\n";
    let (f, _) = field(RunConfig::from_toml(text).unwrap_err());
    assert!(f.starts_with("model"), "{f}");
}

#[test]
fn digest_ignores_comments_order_and_explicit_defaults() {
    let a = RunConfig::from_toml("seed = 5\nkind = \"solve-coupled\"\n").unwrap();
    let b = RunConfig::from_toml(
        "# same run\nkind = \"solve-coupled\"\nthreads = 1\nseed = 5\noutput_dir = \"elsewhere\"\n[solver]\nepsilon = 0.125\n",
    )
    .unwrap();
    assert_eq!(a.digest(), b.digest());
    let c = RunConfig::from_toml("seed = 6\nkind = \"solve-coupled\"\n").unwrap();
    assert_ne!(a.digest(), c.digest());
}

#[test]
fn stored_config_reparses_to_the_same_config() {
    let a = RunConfig::from_toml("seed = 5\nkind = \"simulate-pointproc\"\n[model]\ntype = \"hawkes\"\n").unwrap();
    let b = RunConfig::from_toml(&a.to_toml()).unwrap();
    assert_eq!(a.digest(), b.digest());
    assert_eq!(a.to_toml(), b.to_toml());
}

#[test]
fn unmodified_run_replays_identically() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run(&config_in(SMALL, dir.path())).unwrap();
    let rep = replay(&rec.dir.join(MANIFEST_FILE)).unwrap();
    assert_eq!(rep.verdict, Verdict::Identical);
    assert!(!rep.config_changed);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let one = run(&config_in(SMALL, dir.path())).unwrap();
    let four = run(&config_in(&format!("{SMALL}threads = 4\n"), dir.path())).unwrap();
    let csvs = |m: &fbsde_lab::RunManifest| m.files.iter().filter(|f| f.name.ends_with(".csv")).cloned().collect::<Vec<_>>();
    assert_eq!(csvs(&one.manifest), csvs(&four.manifest));
}

#[test]
fn edited_seed_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run(&config_in(SMALL, dir.path())).unwrap();
    let path = rec.dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).unwrap().replace("seed = 3", "seed = 4");
    fs::write(&path, text).unwrap();
    let rep = replay(&rec.dir.join(MANIFEST_FILE)).unwrap();
    assert!(rep.config_changed);
    let Verdict::Differs { files } = rep.verdict else { panic!("edited seed replayed identically") };
    assert!(files.iter().any(|f| f == "counts.csv"), "{files:?}");
}

#[test]
fn edited_paths_name_the_changed_table() {
    let dir = tempfile::tempdir().unwrap();
    let rec = run(&config_in(SMALL, dir.path())).unwrap();
    let path = rec.dir.join(CONFIG_FILE);
    let text = fs::read_to_string(&path).unwrap().replace("paths = 1500", "paths = 1600");
    fs::write(&path, text).unwrap();
    let Verdict::Differs { files } = replay(&rec.dir.join(MANIFEST_FILE)).unwrap().verdict else { panic!("no difference") };
    assert!(files.iter().any(|f| f.ends_with(".csv")), "{files:?}");
}

#[test]
fn run_directories_are_never_reused() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config_in(SMALL, dir.path());
    let first = run(&cfg).unwrap();
    let second = run(&cfg).unwrap();
    assert_ne!(first.dir, second.dir);
    assert!(second.dir.file_name().unwrap().to_string_lossy().ends_with("-2"));
    assert!(first.dir.join(MANIFEST_FILE).exists());
}

#[test]
fn missing_artifacts_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    assert!(matches!(replay(&dir.path().join(MANIFEST_FILE)), Err(LabError::MissingArtifact(_))));
    let rec = run(&config_in(SMALL, dir.path())).unwrap();
    fs::remove_file(rec.dir.join(CONFIG_FILE)).unwrap();
    assert!(matches!(replay(&rec.dir.join(MANIFEST_FILE)), Err(LabError::MissingArtifact(_))));
}

#[test]
fn binary_runs_replays_and_reports_errors() {
    let bin = env!("CARGO_BIN_EXE_fbsde-lab");
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.toml");
    fs::write(&cfg, format!("{SMALL}output_dir = {:?}\n", dir.path().join("runs").to_string_lossy())).unwrap();
    let out = Command::new(bin).arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let run_dir = stdout.lines().find_map(|l| l.strip_prefix("run directory: ")).unwrap().to_string();

    let out = Command::new(bin).arg("replay").arg(Path::new(&run_dir).join(MANIFEST_FILE)).output().unwrap();
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("identical"));

    fs::write(&cfg, "seed = 1\nkind = \"solve-coupled\"\npaths = 5\n").unwrap();
    let out = Command::new(bin).arg("run").arg(&cfg).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("paths"));
}
