//! `--config` TOML files. Every table is optional; unknown keys are rejected.
//!
//! ```toml
//! seed = 3
//!
//! [optim]
//! epochs = 10
//!
//! [probe]
//! huber_delta = 1.0
//!
//! [adapt]
//! rank = 32
//!
//! [adapt.vit]
//! num_blocks = 2
//!
//! [synth]            # gen-synth: exactly one of `synth` / `synth_images`
//! num_videos = 64
//! ```

use std::fs;
use std::path::Path;

use fmtrack_core::adapt::AdaptConfig;
use fmtrack_core::optim::OptimConfig;
use fmtrack_core::probe::ProbeConfig;
use fmtrack_core::synth::SyntheticConfig;
use fmtrack_core::synth_images::ImageSynthConfig;
use fmtrack_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: Option<u64>,
    /// Overrides on top of the command's recipe, see [`RunConfig::optim`].
    pub optim: Option<toml::Table>,
    pub probe: Option<ProbeConfig>,
    pub adapt: Option<AdaptConfig>,
    pub synth: Option<SyntheticConfig>,
    pub synth_images: Option<ImageSynthConfig>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = fs::read_to_string(path)
            .map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))?;
        let cfg: Self = toml::from_str(&text).map_err(|e| {
            Error::InvalidConfig(format!("{}: {}", path.display(), e.message()))
        })?;
        // reject bad [optim] keys up front, whatever the command
        cfg.overlay(OptimConfig::default())?;
        Ok(cfg)
    }

    fn overlay(&self, preset: OptimConfig) -> Result<OptimConfig> {
        let Some(table) = &self.optim else {
            return Ok(preset);
        };
        let bad = |e: toml::ser::Error| Error::InvalidConfig(format!("[optim]: {e}"));
        let mut merged = toml::Table::try_from(&preset).map_err(bad)?;
        merged.extend(table.clone());
        toml::Value::Table(merged)
            .try_into()
            .map_err(|e: toml::de::Error| Error::InvalidConfig(format!("[optim]: {}", e.message())))
    }

    /// Optimizer settings: the file's `[optim]` keys over `preset` (the
    /// command's recipe), then the command-line seed or the file's top-level seed.
    pub fn optim(&self, preset: OptimConfig, cli_seed: Option<u64>) -> Result<OptimConfig> {
        let mut o = self.overlay(preset)?;
        if let Some(s) = cli_seed.or(self.seed) {
            o.seed = s;
        }
        o.validate()?;
        Ok(o)
    }

    pub fn probe(&self) -> Result<ProbeConfig> {
        let p = self.probe.unwrap_or_default();
        p.validate()?;
        Ok(p)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn unknown_keys_are_rejected() {
        let load = |text: &str| {
            let dir = tempfile::tempdir().unwrap();
            let path = dir.path().join("run.toml");
            std::fs::write(&path, text).unwrap();
            RunConfig::load(Some(&path))
        };
        assert!(load("seed = 1\n[optim]\nepochs = 2\n").is_ok());
        assert!(matches!(load("sed = 1\n"), Err(Error::InvalidConfig(_))));
        assert!(matches!(load("[optim]\nepoch = 2\n"), Err(Error::InvalidConfig(_))));
        assert!(matches!(load("[optim]\nepochs = -2\n"), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn optim_keys_overlay_the_command_recipe() {
        let c: RunConfig = toml::from_str("[optim]\nepochs = 2\n").unwrap();
        let o = c.optim(OptimConfig::adaptation(), None).unwrap();
        assert_eq!(o.epochs, 2);
        assert_eq!(o.weight_decay, OptimConfig::adaptation().weight_decay);
        let p = c.optim(OptimConfig::probing(), None).unwrap();
        assert_eq!(p.weight_decay, OptimConfig::probing().weight_decay);
    }

    #[test]
    fn seed_precedence() {
        let c: RunConfig = toml::from_str("seed = 4\n").unwrap();
        assert_eq!(c.optim(OptimConfig::probing(), None).unwrap().seed, 4);
        assert_eq!(c.optim(OptimConfig::probing(), Some(9)).unwrap().seed, 9);
    }
}
