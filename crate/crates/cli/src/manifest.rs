//! Run manifests and atomic file writes.

use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use poseidon::Error;
use serde::Serialize;

use crate::CliResult;

/// Record of one subcommand run, written last so that every artifact it
/// names already exists.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunManifest {
    pub subcommand: String,
    pub config: Option<PathBuf>,
    pub seed: u64,
    pub tool_version: String,
    pub started: String,
    pub finished: String,
    pub inputs: Vec<PathBuf>,
    pub outputs: Vec<PathBuf>,
}

/// Collects inputs and outputs while a subcommand runs.
#[derive(Debug, Clone)]
pub struct ManifestBuilder {
    subcommand: String,
    config: Option<PathBuf>,
    seed: u64,
    started: DateTime<Utc>,
    inputs: Vec<PathBuf>,
    outputs: Vec<PathBuf>,
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Millis, true)
}

impl ManifestBuilder {
    pub fn start(subcommand: &str, config: Option<&Path>, seed: u64) -> Self {
        ManifestBuilder {
            subcommand: subcommand.to_string(),
            config: config.map(Path::to_path_buf),
            seed,
            started: Utc::now(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    pub fn input(&mut self, path: impl Into<PathBuf>) {
        self.inputs.push(path.into());
    }

    pub fn output(&mut self, path: impl Into<PathBuf>) {
        self.outputs.push(path.into());
    }

    pub fn outputs(&self) -> &[PathBuf] {
        &self.outputs
    }

    /// Checks that every output exists, then writes the manifest atomically.
    pub fn finish(self, path: &Path) -> CliResult<RunManifest> {
        if let Some(missing) = self.outputs.iter().find(|p| !p.exists()) {
            return Err(Error::InvalidInput(format!(
                "manifest names a missing artifact {}",
                missing.display()
            ))
            .into());
        }
        let manifest = RunManifest {
            subcommand: self.subcommand,
            config: self.config,
            seed: self.seed,
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            started: stamp(self.started),
            finished: stamp(Utc::now()),
            inputs: self.inputs,
            outputs: self.outputs,
        };
        let text = toml::to_string(&manifest)
            .map_err(|e| Error::Parse(format!("serialising manifest: {e}")))?;
        write_atomic(path, text.as_bytes())?;
        Ok(manifest)
    }
}

/// Writes through a temporary file in the target directory, then renames.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    let io = |e: std::io::Error| Error::Io {
        path: path.to_path_buf(),
        source: e,
    };
    let name = path
        .file_name()
        .ok_or_else(|| Error::InvalidInput(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", name.to_string_lossy()));
    let mut f = std::fs::File::create(&tmp).map_err(io)?;
    f.write_all(bytes).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    std::fs::rename(&tmp, path).map_err(io)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_refuses_missing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let mut b = ManifestBuilder::start("synth", None, 7);
        b.output(dir.path().join("absent.csv"));
        assert!(b.finish(&dir.path().join("m.toml")).is_err());
        assert!(!dir.path().join("m.toml").exists());
    }

    #[test]
    fn manifest_round_trips_through_toml() {
        let dir = tempfile::tempdir().unwrap();
        let art = dir.path().join("a.csv");
        std::fs::write(&art, "x\n").unwrap();
        let mut b = ManifestBuilder::start("label", Some(Path::new("run.toml")), 3);
        b.input("cat.csv");
        b.output(&art);
        let path = dir.path().join("manifest.toml");
        let m = b.finish(&path).unwrap();
        let back: toml::Table = std::fs::read_to_string(&path).unwrap().parse().unwrap();
        assert_eq!(back["subcommand"].as_str(), Some("label"));
        assert_eq!(back["seed"].as_integer(), Some(3));
        assert_eq!(back["outputs"].as_array().unwrap().len(), 1);
        assert!(m.started <= m.finished);
        let leftovers: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| e.ok())
            .filter(|e| e.file_name().to_string_lossy().ends_with(".tmp"))
            .collect();
        assert!(leftovers.is_empty());
    }
}
