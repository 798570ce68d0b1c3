use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use coc_core::config::ExperimentConfig;
use coc_core::Error;
use serde::Serialize;

/// Record of one command run, written next to its main output.
#[derive(Debug, Serialize)]
pub struct Manifest {
    pub command: &'static str,
    pub version: &'static str,
    pub seed: Option<u64>,
    pub config: Option<ExperimentConfig>,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
}

impl Manifest {
    pub fn new(command: &'static str, config: Option<&ExperimentConfig>) -> Self {
        Self {
            command,
            version: env!("CARGO_PKG_VERSION"),
            seed: config.map(|c| c.train.seed),
            config: config.cloned(),
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
        }
    }

    pub fn input(mut self, name: impl Into<String>, path: &Path) -> Self {
        self.inputs.insert(name.into(), path.display().to_string());
        self
    }

    pub fn output(mut self, name: impl Into<String>, path: &Path) -> Self {
        self.outputs.insert(name.into(), path.display().to_string());
        self
    }

    pub fn path_for(primary: &Path) -> PathBuf {
        let mut s = primary.as_os_str().to_owned();
        s.push(".manifest.json");
        PathBuf::from(s)
    }

    /// Writes `<primary>.manifest.json`.
    pub fn write(&self, primary: &Path) -> Result<PathBuf, Error> {
        let path = Self::path_for(primary);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::Io {
            path: path.clone(),
            source: e,
        })?;
        Ok(path)
    }
}
