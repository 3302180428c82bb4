use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::snowsynth::SnowParams;
use crate::train::TrainConfig;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IoConfig {
    /// Worker threads for parallel evaluation; `0` uses `MSPF_THREADS` or all cores.
    pub threads: usize,
}

/// A run configuration file: `[model]`, `[train]`, `[snow]` and `[io]`
/// tables of `key = value` lines. Missing keys take their defaults; unknown
/// keys are rejected.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub snow: SnowParams,
    pub io: IoConfig,
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::input(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text).map_err(|e| match e {
            Error::Config(m) => Error::config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.snow.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_serialize_fixed_point() {
        let text = "[model]\nstage_dims = [8, 16, 32, 64]\nffn_expansion = 1\n\n[train]\nepochs = 5\nlr0 = 0.001\n\n[snow]\nmask_density = 100.0\n";
        let a = RunConfig::parse(text).unwrap();
        assert_eq!(a.model.stage_dims, vec![8, 16, 32, 64]);
        assert_eq!(a.train.epochs, 5);
        let b = RunConfig::parse(&a.to_toml().unwrap()).unwrap();
        assert_eq!(a, b);
        assert_eq!(b.to_toml().unwrap(), a.to_toml().unwrap());
    }

    #[test]
    fn unknown_and_invalid_keys_rejected() {
        assert!(matches!(RunConfig::parse("[model]\nwidth = 3\n"), Err(Error::Config(_))));
        assert!(matches!(RunConfig::parse("[extra]\n"), Err(Error::Config(_))));
        assert!(matches!(
            RunConfig::parse("[snow]\ntransmission_range = [0.9, 0.1]\n"),
            Err(Error::Config(_))
        ));
        assert!(matches!(RunConfig::parse("[train]\nbatch = 0\n"), Err(Error::Config(_))));
    }
}
