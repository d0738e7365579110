//! Declarative run configuration (TOML).

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::attack::AttackConfig;
use crate::classical::HSConfig;
use crate::error::{config_err, Error, Result};
use crate::eval::EvalConfig;
use crate::networks::{Family, NetworkSpec, TrainConfig};
use crate::synth::SceneConfig;
use crate::zero_flow::ZeroFlowConfig;

/// File name of the resolved-config snapshot written beside every output.
pub const SNAPSHOT_NAME: &str = "resolved_config.toml";

/// Architecture hyperparameters shared by both network families.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchConfig {
    pub levels: usize,
    pub base_channels: usize,
    pub max_disp: usize,
    pub leaky_slope: f32,
}

impl Default for ArchConfig {
    fn default() -> Self {
        let s = NetworkSpec::new(Family::EncoderDecoder);
        ArchConfig {
            levels: s.levels,
            base_channels: s.base_channels,
            max_disp: s.max_disp,
            leaky_slope: s.leaky_slope,
        }
    }
}

impl ArchConfig {
    pub fn spec(&self, family: Family) -> NetworkSpec {
        NetworkSpec {
            family,
            levels: self.levels,
            base_channels: self.base_channels,
            max_disp: self.max_disp,
            leaky_slope: self.leaky_slope,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Global seed; commands fall back to it when no seed flag is given.
    pub seed: u64,
    pub output_dir: PathBuf,
    pub scene: SceneConfig,
    pub network: ArchConfig,
    pub train: TrainConfig,
    pub hs: HSConfig,
    pub attack: AttackConfig,
    pub eval: EvalConfig,
    pub zero_flow: ZeroFlowConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            output_dir: PathBuf::from("runs"),
            scene: SceneConfig::default(),
            network: ArchConfig::default(),
            train: TrainConfig::default(),
            hs: HSConfig::default(),
            attack: AttackConfig::default(),
            eval: EvalConfig::default(),
            zero_flow: ZeroFlowConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        for family in [Family::EncoderDecoder, Family::SpatialPyramid] {
            let spec = self.network.spec(family);
            spec.validate()?;
            let side = 1usize << spec.levels;
            if self.scene.height % side != 0 || self.scene.width % side != 0 {
                return Err(config_err!(
                    "scene {}x{} is not divisible by 2^{} for the networks",
                    self.scene.height,
                    self.scene.width,
                    spec.levels
                ));
            }
        }
        if self.train.level_weights.len() != self.network.levels {
            return Err(config_err!(
                "train.level_weights has {} entries but the networks have {} levels",
                self.train.level_weights.len(),
                self.network.levels
            ));
        }
        self.hs.validate()?;
        self.attack.validate((self.scene.height, self.scene.width))?;
        self.eval.ranges.validate()?;
        self.zero_flow.ranges.validate()?;
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| config_err!("cannot serialize config: {e}"))
    }

    /// Writes the resolved config into `dir`.
    pub fn write_snapshot(&self, dir: impl AsRef<Path>) -> Result<PathBuf> {
        let path = dir.as_ref().join(SNAPSHOT_NAME);
        std::fs::write(&path, self.to_toml()?).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_toml() {
        let cfg = RunConfig::default();
        let text = cfg.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), cfg);
    }

    #[test]
    fn partial_files_fill_in_defaults() {
        let cfg = RunConfig::from_toml("seed = 7\n[scene]\nheight = 32\nwidth = 64\n[attack]\npatch_size = 8\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!((cfg.scene.height, cfg.scene.width), (32, 64));
        assert_eq!(cfg.attack.patch_size, 8);
        assert_eq!(cfg.train, TrainConfig::default());
    }

    #[test]
    fn bad_files_are_rejected() {
        assert!(matches!(RunConfig::from_toml("sede = 1"), Err(Error::Toml(_))));
        assert!(matches!(
            RunConfig::from_toml("[scene]\nheight = 40\n"),
            Err(Error::Config(_))
        ));
        assert!(RunConfig::from_toml("[attack]\npatch_size = 80\n").is_err());
    }
}
