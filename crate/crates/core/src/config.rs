//! Experiment configuration file, TOML or JSON by extension.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::SyntheticConfig;
use crate::error::{Error, Result};
use crate::network::NetworkConfig;
use crate::training::TrainConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub dev_fraction: f64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        Self {
            train_fraction: 0.8,
            dev_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub synthetic: SyntheticConfig,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub split: SplitConfig,
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = if path.extension().is_some_and(|e| e == "json") {
            serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        } else {
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.synthetic.validate()?;
        self.network.validate()?;
        self.train.validate()?;
        if self.synthetic.k != self.network.k || self.synthetic.d_e != self.network.d_e {
            return Err(Error::Config(format!(
                "synthetic corpus has k = {} and d_e = {}, network has k = {} and d_e = {}",
                self.synthetic.k, self.synthetic.d_e, self.network.k, self.network.d_e
            )));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_config_round_trips_through_toml_and_json() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ExperimentConfig::default();
        let t = dir.path().join("c.toml");
        std::fs::write(&t, cfg.to_toml().unwrap()).unwrap();
        assert_eq!(ExperimentConfig::load(&t).unwrap(), cfg);
        let j = dir.path().join("c.json");
        std::fs::write(&j, serde_json::to_string(&cfg).unwrap()).unwrap();
        assert_eq!(ExperimentConfig::load(&j).unwrap(), cfg);
    }

    #[test]
    fn partial_toml_fills_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[synthetic]\nk = 4\n[network]\nk = 4\n[train]\nbatch_size = 8\n").unwrap();
        let cfg = ExperimentConfig::load(&p).unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.network.d_gru, NetworkConfig::default().d_gru);
    }

    #[test]
    fn unknown_keys_and_mismatches_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        std::fs::write(&p, "[train]\nbatch = 8\n").unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::Config(_))));
        std::fs::write(&p, "[synthetic]\nk = 4\n").unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::Config(_))));
    }
}
