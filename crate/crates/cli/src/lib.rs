//! Batch front-end for the worldforge data engine.
//!
//! A run reads a [`PipelineManifest`], executes one pipeline with every
//! random draw derived from the manifest seed, stages all artifacts in a
//! hidden sibling directory and renames it into place on success. The
//! output tree always carries `artifacts.sha256` and `run.json`.

pub mod artifacts;
pub mod manifest;
pub mod pipelines;

use std::path::{Path, PathBuf};

use serde::Serialize;

pub use artifacts::Staging;
pub use manifest::{ModuleConfigs, Pipeline, PipelineManifest};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("invalid manifest: {0}")]
    Validation(String),
    #[error("stage {stage} failed: {source}")]
    Stage {
        stage: &'static str,
        #[source]
        source: Box<dyn std::error::Error + Send + Sync>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl CliError {
    pub fn stage(stage: &'static str, e: impl std::error::Error + Send + Sync + 'static) -> Self {
        CliError::Stage { stage, source: Box::new(e) }
    }
}

pub type Result<T> = std::result::Result<T, CliError>;

pub(crate) trait StageExt<T> {
    fn stage(self, stage: &'static str) -> Result<T>;
}

impl<T, E: std::error::Error + Send + Sync + 'static> StageExt<T> for std::result::Result<T, E> {
    fn stage(self, stage: &'static str) -> Result<T> {
        self.map_err(|e| CliError::stage(stage, e))
    }
}

#[derive(Serialize)]
struct RunRecord<'a> {
    pipeline: &'static str,
    seed: u64,
    inputs: Vec<String>,
    config: &'a ModuleConfigs,
    summary: serde_json::Value,
}

/// Runs a validated manifest and returns the final output directory.
pub fn run(manifest: &PipelineManifest) -> Result<PathBuf> {
    manifest.validate()?;
    let mut staging = Staging::new(&manifest.output)?;
    let summary = pipelines::execute(manifest, &mut staging)?;
    let record = RunRecord {
        pipeline: manifest.pipeline.name(),
        seed: manifest.seed,
        inputs: manifest.inputs.keys().cloned().collect(),
        config: &manifest.config,
        summary,
    };
    staging.write_json("run.json", &record)?;
    staging.commit(&manifest.output)
}

/// Integrity check and human-readable summary of an output directory.
pub fn report(dir: &Path) -> Result<String> {
    let index = artifacts::read_index(dir)?;
    let bad = artifacts::verify(dir)?;
    let record: serde_json::Value = std::fs::read_to_string(dir.join("run.json"))
        .ok()
        .and_then(|s| serde_json::from_str(&s).ok())
        .ok_or_else(|| CliError::Validation(format!("{} has no readable run.json", dir.display())))?;
    let mut out = format!(
        "pipeline {} seed {}\n{} artifacts, {} modified\n",
        record["pipeline"].as_str().unwrap_or("?"),
        record["seed"],
        index.len(),
        bad.len()
    );
    for rel in &bad {
        out.push_str(&format!("modified: {rel}\n"));
    }
    if let Some(obj) = record["summary"].as_object() {
        for (k, v) in obj {
            out.push_str(&format!("{k}: {v}\n"));
        }
    }
    Ok(out)
}
