//! Run configuration: one JSON document, strict schema, flags on top.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use stylesearch_core::downstream::{FeatureSpec, TrainConfig};
use stylesearch_core::harmonizer::HarmonizationConfig;
use stylesearch_core::phantom::Scenario;

use crate::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DownstreamConfig {
    pub iterations: usize,
    pub step: f64,
    pub l2: f64,
    /// Radii of the two local windows.
    pub r1: usize,
    pub r2: usize,
}

impl Default for DownstreamConfig {
    fn default() -> Self {
        let t = TrainConfig::default();
        let f = FeatureSpec::default();
        DownstreamConfig {
            iterations: t.iterations,
            step: t.step,
            l2: t.l2,
            r1: f.r1,
            r2: f.r2,
        }
    }
}

impl DownstreamConfig {
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            iterations: self.iterations,
            step: self.step,
            l2: self.l2,
        }
    }

    pub fn feature_spec(&self) -> FeatureSpec {
        FeatureSpec {
            r1: self.r1,
            r2: self.r2,
            ..FeatureSpec::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputConfig {
    pub dir: PathBuf,
    /// Write the running-best PGM strip after harmonizing.
    pub snapshots: bool,
}

impl Default for OutputConfig {
    fn default() -> Self {
        OutputConfig {
            dir: PathBuf::from("out"),
            snapshots: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Master seed of the scenario bundle.
    pub seed: u64,
    pub scenario: Scenario,
    pub downstream: DownstreamConfig,
    pub harmonization: HarmonizationConfig,
    pub output: OutputConfig,
}

/// Command-line values that override the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub snapshots: bool,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Defaults, then the config file, then flags. `--seed` sets both the
    /// master seed and the search seed.
    pub fn resolve(path: Option<&Path>, o: &Overrides) -> Result<Self, CliError> {
        let mut cfg = match path {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = o.seed {
            cfg.seed = seed;
            cfg.harmonization.bo.seed = seed;
        }
        if let Some(out) = &o.out {
            cfg.output.dir = out.clone();
        }
        cfg.output.snapshots |= o.snapshots;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let cfg_err = |e: stylesearch_core::Error| CliError::Config(e.to_string());
        self.scenario.validate().map_err(cfg_err)?;
        self.harmonization.validate().map_err(cfg_err)?;
        let d = &self.downstream;
        if !(d.step > 0.0 && d.step.is_finite()) || !(d.l2 >= 0.0 && d.l2.is_finite()) || d.r1 == 0 || d.r2 == 0 {
            return Err(CliError::Config(
                "downstream needs step > 0, l2 >= 0 and window radii >= 1".into(),
            ));
        }
        Ok(())
    }

    /// The config as recorded next to its outputs; the output directory is
    /// the provenance file's own and is written as ".".
    pub fn for_provenance(&self) -> Self {
        let mut c = self.clone();
        c.output.dir = PathBuf::from(".");
        c
    }
}
