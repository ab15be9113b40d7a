//! Effective run configuration: command-line flags over a JSON config file
//! over built-in defaults.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use voxgeo_core::clinical::MeshMode;
use voxgeo_core::stitch::WeightMode;

/// Keys accepted in `--config`; every field is optional.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConfigFile {
    pub tau: Option<f64>,
    pub awp_eps: Option<f64>,
    pub dice_eps: Option<f64>,
    pub overlap: Option<f64>,
    pub lambda_ce: Option<f64>,
    pub lambda_dc: Option<f64>,
    pub ds_weights: Option<Vec<f64>>,
    pub blend: Option<WeightMode>,
    pub mesh: Option<MeshMode>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub log_level: Option<String>,
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
                serde_json::from_str(&text).with_context(|| format!("parsing config {}", p.display()))
            }
        }
    }
}

/// Numeric parameters after precedence resolution, echoed into metadata.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RunConfig {
    pub tau: f64,
    pub awp_eps: f64,
    pub dice_eps: f64,
    pub overlap: f64,
    pub lambda_ce: f64,
    pub lambda_dc: f64,
    /// `None` means halving weights sized to the number of scales.
    pub ds_weights: Option<Vec<f64>>,
    pub blend: WeightMode,
    pub mesh: MeshMode,
    pub seed: u64,
    pub threads: Option<usize>,
    pub log_level: String,
}

/// Values given on the command line; `None` falls through to the file.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub tau: Option<f64>,
    pub awp_eps: Option<f64>,
    pub dice_eps: Option<f64>,
    pub overlap: Option<f64>,
    pub lambda_ce: Option<f64>,
    pub lambda_dc: Option<f64>,
    pub ds_weights: Option<Vec<f64>>,
    pub blend: Option<WeightMode>,
    pub mesh: Option<MeshMode>,
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub log_level: Option<String>,
}

impl RunConfig {
    pub fn resolve(flags: Overrides, file: ConfigFile, env_threads: Option<usize>) -> Result<Self> {
        let c = Self {
            tau: flags.tau.or(file.tau).unwrap_or(voxgeo_core::uncertainty::DEFAULT_TAU),
            awp_eps: flags.awp_eps.or(file.awp_eps).unwrap_or(voxgeo_core::attention::AWP_EPS),
            dice_eps: flags.dice_eps.or(file.dice_eps).unwrap_or(1e-5),
            overlap: flags.overlap.or(file.overlap).unwrap_or(0.5),
            lambda_ce: flags.lambda_ce.or(file.lambda_ce).unwrap_or(1.0),
            lambda_dc: flags.lambda_dc.or(file.lambda_dc).unwrap_or(1.0),
            ds_weights: flags.ds_weights.or(file.ds_weights),
            blend: flags.blend.or(file.blend).unwrap_or(WeightMode::Gaussian),
            mesh: flags.mesh.or(file.mesh).unwrap_or_default(),
            seed: flags.seed.or(file.seed).unwrap_or(0),
            threads: flags.threads.or(file.threads).or(env_threads),
            log_level: flags.log_level.or(file.log_level).unwrap_or_else(|| "info".into()),
        };
        c.validate()?;
        Ok(c)
    }

    fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.tau) {
            bail!("tau {} outside [0, 1]", self.tau);
        }
        if !(0.0..1.0).contains(&self.overlap) {
            bail!("overlap {} outside [0, 1)", self.overlap);
        }
        if !(self.awp_eps > 0.0 && self.dice_eps > 0.0) {
            bail!("eps values must be positive");
        }
        if self.threads == Some(0) {
            bail!("threads must be at least 1");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn precedence() {
        let file: ConfigFile = serde_json::from_str(r#"{"tau": 0.9, "overlap": 0.25, "blend": "uniform"}"#).unwrap();
        let flags = Overrides { tau: Some(0.8), ..Default::default() };
        let c = RunConfig::resolve(flags, file, Some(3)).unwrap();
        assert_eq!((c.tau, c.overlap, c.blend, c.threads), (0.8, 0.25, WeightMode::Uniform, Some(3)));
        assert_eq!(c.lambda_ce, 1.0);
        assert!(serde_json::from_str::<ConfigFile>(r#"{"bogus": 1}"#).is_err());
        let bad = Overrides { overlap: Some(1.0), ..Default::default() };
        assert!(RunConfig::resolve(bad, ConfigFile::default(), None).is_err());
    }
}
