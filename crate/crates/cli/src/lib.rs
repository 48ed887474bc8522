//! Pipeline stages behind the `chaomob` command-line tool.
//!
//! Every stage reads its upstream artifacts from an input directory, writes
//! its exports to an output directory, and records both sets of files with
//! their SHA-256 digests in `<stage>.manifest.json`.

pub mod config;
pub mod manifest;
pub mod stages;

use std::path::PathBuf;

pub use config::{ExperimentConfig, Overrides, Resolved, SCHEMA_VERSION};
pub use manifest::RunManifest;
pub use stages::{replay, run_stage, Stage, Workspace};

pub const TOOL_NAME: &str = "chaomob";
pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");
pub const OUT_DIR_ENV: &str = "CHAOMOB_OUT_DIR";

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] chaomob::Error),

    #[error("invalid config: {0}")]
    Config(String),

    #[error("missing upstream artifact {}: run `chaomob {producer}` first", path.display())]
    MissingArtifact { path: PathBuf, producer: &'static str },

    #[error("cannot parse {}: {message}", path.display())]
    BadArtifact { path: PathBuf, message: String },

    #[error("i/o error on {}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },

    #[error("replay differs from the manifest: {0}")]
    ReplayMismatch(String),
}

impl CliError {
    /// 2 for numerical failures, 1 for everything else.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Core(e) if e.is_numerical() => 2,
            _ => 1,
        }
    }
}
