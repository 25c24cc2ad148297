//! Re-running a stored run and comparing its files byte for byte.

use std::collections::BTreeMap;
use std::fs;
use std::io::ErrorKind;
use std::path::Path;

use crate::config::RunConfig;
use crate::error::LabError;
use crate::output::{read_manifest, run, CONFIG_FILE};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Verdict {
    Identical,
    /// Files whose digests differ, or that exist on one side only.
    Differs { files: Vec<String> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReplayReport {
    pub verdict: Verdict,
    /// The stored config no longer has the digest the manifest recorded.
    pub config_changed: bool,
}

impl ReplayReport {
    pub fn identical(&self) -> bool {
        self.verdict == Verdict::Identical
    }
}

/// Reads the manifest and the config stored beside it, re-runs the
/// experiment in a scratch directory and compares file digests.
pub fn replay(manifest_path: &Path) -> Result<ReplayReport, LabError> {
    let manifest = read_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let config_path = dir.join(CONFIG_FILE);
    let text = match fs::read_to_string(&config_path) {
        Ok(t) => t,
        Err(e) if e.kind() == ErrorKind::NotFound => return Err(LabError::MissingArtifact(config_path)),
        Err(e) => return Err(LabError::io(&config_path, e)),
    };
    let mut cfg = RunConfig::from_toml(&text)?;
    let scratch = tempfile::tempdir().map_err(|e| LabError::io(std::env::temp_dir(), e))?;
    cfg.output_dir = scratch.path().to_string_lossy().into_owned();
    let config_changed = cfg.digest() != manifest.config_digest;
    let rerun = run(&cfg)?;

    let old: BTreeMap<_, _> = manifest.files.iter().map(|f| (f.name.as_str(), f.sha256.as_str())).collect();
    let new: BTreeMap<_, _> = rerun.manifest.files.iter().map(|f| (f.name.as_str(), f.sha256.as_str())).collect();
    let mut files: Vec<String> = old
        .keys()
        .chain(new.keys())
        .filter(|name| old.get(*name) != new.get(*name))
        .map(|s| s.to_string())
        .collect();
    files.sort();
    files.dedup();
    let verdict = if files.is_empty() && manifest.artifact_version == rerun.manifest.artifact_version {
        Verdict::Identical
    } else {
        Verdict::Differs { files }
    };
    Ok(ReplayReport { verdict, config_changed })
}
