use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum LabError {
    #[error("invalid config: {field}: {message}")]
    Config { field: String, message: String },
    #[error("cannot parse config: {0}")]
    Parse(String),
    #[error("{module} failed during {stage}: {message}")]
    Solver { module: &'static str, stage: &'static str, message: String },
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error("missing artifact {0}")]
    MissingArtifact(PathBuf),
    #[error("invalid manifest: {0}")]
    Manifest(String),
    #[error("line {line}: {message}")]
    Format { line: usize, message: String },
}

impl LabError {
    pub fn config(field: impl Into<String>, message: impl Into<String>) -> Self {
        LabError::Config { field: field.into(), message: message.into() }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        LabError::Io { path: path.into(), source }
    }
}

/// Wraps a core error with the module and stage it came from.
pub(crate) fn solver<E: std::fmt::Display>(module: &'static str, stage: &'static str) -> impl FnOnce(E) -> LabError {
    move |e| LabError::Solver { module, stage, message: e.to_string() }
}
