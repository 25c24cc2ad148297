//! Run directories: result tables, the stored config, a summary and the
//! manifest that digests them.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::RunConfig;
use crate::error::LabError;
use crate::experiments::{run_experiment, Check, Outcome, Table};

pub const ARTIFACT_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const MANIFEST_FILE: &str = "manifest.json";
pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.txt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub passed: bool,
    /// Non-finite numbers are stored as `null`.
    pub values: BTreeMap<String, Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FileRecord {
    pub name: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub artifact_version: String,
    pub kind: String,
    pub seed: u64,
    pub config_digest: String,
    pub status: String,
    pub wall_time_seconds: f64,
    pub checks: Vec<CheckRecord>,
    /// Every file of the run except the manifest itself.
    pub files: Vec<FileRecord>,
}

impl RunManifest {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// A finished run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub dir: PathBuf,
    pub manifest: RunManifest,
    pub outcome: Outcome,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn number(v: f64) -> String {
    format!("{v}")
}

/// CSV with a one-line header; numbers in shortest round-trip form.
pub fn table_csv(t: &Table) -> Result<Vec<u8>, LabError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    let bad = |e: csv::Error| LabError::Format { line: 0, message: e.to_string() };
    w.write_record(&t.header).map_err(bad)?;
    for row in &t.rows {
        w.write_record(row.iter().map(|&v| number(v))).map_err(bad)?;
    }
    w.into_inner().map_err(|e| LabError::Format { line: 0, message: e.to_string() })
}

pub fn summary_text(cfg: &RunConfig, outcome: &Outcome) -> String {
    let mut s = String::new();
    s.push_str(&format!("experiment {} on model {}\n", cfg.kind.name(), cfg.model.name()));
    s.push_str(&format!("seed {}  config {}\n", cfg.seed, cfg.digest()));
    s.push_str(&format!("T = {}  N = {}  P = {}  basis degree {}\n\n", cfg.horizon, cfg.steps, cfg.paths, cfg.basis_degree));
    for c in &outcome.checks {
        s.push_str(&check_line(c));
        s.push('\n');
    }
    for n in &outcome.notes {
        s.push_str(&format!("note: {n}\n"));
    }
    s.push_str(if outcome.passed() { "\nall checks passed\n" } else { "\nsome checks FAILED\n" });
    s
}

pub fn check_line(c: &Check) -> String {
    let values: Vec<String> = c.values.iter().map(|(k, v)| format!("{k}={v:.6e}")).collect();
    format!("{} {}: {}", if c.passed { "PASS" } else { "FAIL" }, c.name, values.join(" "))
}

/// Creates `{root}/{stem}`, or `{stem}-2`, `{stem}-3`, ... if taken; an
/// existing directory is never reused.
fn fresh_dir(root: &Path, stem: &str) -> Result<PathBuf, LabError> {
    fs::create_dir_all(root).map_err(|e| LabError::io(root, e))?;
    for k in 1.. {
        let name = if k == 1 { stem.to_string() } else { format!("{stem}-{k}") };
        let dir = root.join(name);
        match fs::create_dir(&dir) {
            Ok(()) => return Ok(dir),
            Err(e) if e.kind() == ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(LabError::io(&dir, e)),
        }
    }
    unreachable!("unbounded suffix search")
}

fn write(dir: &Path, name: &str, bytes: &[u8], files: &mut Vec<FileRecord>) -> Result<(), LabError> {
    let path = dir.join(name);
    fs::write(&path, bytes).map_err(|e| LabError::io(&path, e))?;
    files.push(FileRecord { name: name.to_string(), sha256: sha256_hex(bytes) });
    Ok(())
}

/// Runs the experiment and persists it in a new directory under
/// `cfg.output_dir`.
pub fn run(cfg: &RunConfig) -> Result<RunRecord, LabError> {
    cfg.validate()?;
    let start = Instant::now();
    let outcome = run_experiment(cfg)?;
    let wall = start.elapsed().as_secs_f64();
    let digest = cfg.digest();
    let dir = fresh_dir(Path::new(&cfg.output_dir), &format!("{}-{}-{}", cfg.kind.name(), cfg.seed, &digest[..12]))?;
    let mut files = Vec::new();
    write(&dir, CONFIG_FILE, cfg.to_toml().as_bytes(), &mut files)?;
    for t in &outcome.tables {
        write(&dir, &format!("{}.csv", t.name), &table_csv(t)?, &mut files)?;
    }
    write(&dir, SUMMARY_FILE, summary_text(cfg, &outcome).as_bytes(), &mut files)?;
    let checks = outcome
        .checks
        .iter()
        .map(|c| CheckRecord {
            name: c.name.clone(),
            passed: c.passed,
            values: c.values.iter().map(|(k, &v)| (k.clone(), v.is_finite().then_some(v))).collect(),
        })
        .collect();
    let manifest = RunManifest {
        artifact_version: ARTIFACT_VERSION.to_string(),
        kind: cfg.kind.name().to_string(),
        seed: cfg.seed,
        config_digest: digest,
        status: if outcome.passed() { "passed" } else { "failed" }.to_string(),
        wall_time_seconds: wall,
        checks,
        files,
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| LabError::Manifest(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, json + "\n").map_err(|e| LabError::io(&path, e))?;
    Ok(RunRecord { dir, manifest, outcome })
}

pub fn read_manifest(path: &Path) -> Result<RunManifest, LabError> {
    let text = match fs::read_to_string(path) {
        Ok(t) => t,
        Err(e) if e.kind() == ErrorKind::NotFound => return Err(LabError::MissingArtifact(path.to_path_buf())),
        Err(e) => return Err(LabError::io(path, e)),
    };
    serde_json::from_str(&text).map_err(|e| LabError::Manifest(e.to_string()))
}
