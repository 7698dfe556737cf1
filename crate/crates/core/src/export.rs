//! Deterministic exports of stage artifacts.

use std::fs;
use std::path::Path;

use crate::pipeline::{artifact, PipelineError};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportKind {
    Topics,
    Matches,
    Origin,
    Graph,
    Stats,
}

impl ExportKind {
    pub fn parse(s: &str) -> Result<Self, PipelineError> {
        Ok(match s {
            "topics" => ExportKind::Topics,
            "matches" => ExportKind::Matches,
            "origin" => ExportKind::Origin,
            "graph" => ExportKind::Graph,
            "stats" => ExportKind::Stats,
            other => {
                return Err(PipelineError::UnsupportedFormat {
                    what: other.into(),
                    format: "-".into(),
                })
            }
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            ExportKind::Topics => "topics",
            ExportKind::Matches => "matches",
            ExportKind::Origin => "origin",
            ExportKind::Graph => "graph",
            ExportKind::Stats => "stats",
        }
    }

    fn source(self) -> (&'static str, &'static str) {
        match self {
            ExportKind::Topics => (artifact::TOPICS, "json"),
            ExportKind::Matches => (artifact::MATCHES, "csv"),
            ExportKind::Origin => (artifact::ORIGIN, "json"),
            ExportKind::Graph => (artifact::GRAPH, "dot"),
            ExportKind::Stats => (artifact::STATS, "csv"),
        }
    }
}

/// Exported bytes for one artifact. JSON is re-serialized with sorted keys;
/// CSV and DOT artifacts are already canonical and pass through.
pub fn render(kind: ExportKind, format: &str, out_dir: &Path) -> Result<Vec<u8>, PipelineError> {
    let (file, native) = kind.source();
    if format != native {
        return Err(PipelineError::UnsupportedFormat {
            what: kind.name().into(),
            format: format.into(),
        });
    }
    let path = out_dir.join(file);
    let bytes = fs::read(&path).map_err(|_| PipelineError::ArtifactMissing(path.clone()))?;
    if native != "json" {
        return Ok(bytes);
    }
    let value: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| PipelineError::StageFailure {
        stage: "export".into(),
        message: format!("{}: {e}", path.display()),
    })?;
    let mut s = serde_json::to_string_pretty(&value).expect("json value serializes");
    s.push('\n');
    Ok(s.into_bytes())
}

pub fn export(kind: ExportKind, format: &str, out_dir: &Path, dest: &Path) -> Result<(), PipelineError> {
    let bytes = render(kind, format, out_dir)?;
    fs::write(dest, bytes)?;
    Ok(())
}
