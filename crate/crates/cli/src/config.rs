//! Run configuration: one TOML file drives every subcommand.
//!
//! Unknown keys are rejected so a typo cannot silently fall back to a
//! default. Command-line flags override file values.

use beamflow::baselines::{DecodeMode, RecurrentConfig};
use beamflow::data::WindowConfig;
use beamflow::error::{Error, Result};
use beamflow::flow::TrainConfig;
use beamflow::model::recurrent::CellKind;
use beamflow::model::ModelConfig;
use beamflow::simulator::SimConfig;
use serde::{Deserialize, Serialize};
use std::path::Path;

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub window: WindowConfig,
    pub test_fraction: f64,
    /// Subtract this base from beam indices on ingestion.
    pub beam_base: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            window: WindowConfig::default(),
            test_fraction: 0.2,
            beam_base: 0,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BaselineConfig {
    pub hidden: usize,
    pub autoregressive: bool,
}

impl Default for BaselineConfig {
    fn default() -> Self {
        BaselineConfig {
            hidden: 155,
            autoregressive: true,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub k: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { k: vec![1, 3] }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub samples: usize,
    pub warmup: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            samples: 1000,
            warmup: 100,
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub simulator: SimConfig,
    pub data: DataConfig,
    pub model: ModelConfig,
    pub training: TrainConfig,
    pub baseline: BaselineConfig,
    pub eval: EvalConfig,
    pub bench: BenchConfig,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let raw = std::fs::read_to_string(path)
            .map_err(|e| Error::config(format!("cannot read config {}: {e}", path.display())))?;
        let cfg: RunConfig = toml::from_str(&raw)
            .map_err(|e| Error::config(format!("{}: {e}", path.display())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.simulator.validate()?;
        self.data.window.validate()?;
        self.model.validate()?;
        if self.eval.k.is_empty() {
            return Err(Error::config("eval.k must list at least one K"));
        }
        if self.model.m != self.simulator.codebook_size {
            return Err(Error::config(format!(
                "model.m ({}) differs from simulator.codebook_size ({})",
                self.model.m, self.simulator.codebook_size
            )));
        }
        Ok(())
    }

    pub fn recurrent_config(&self, cell: CellKind) -> RecurrentConfig {
        RecurrentConfig {
            cell,
            hidden: self.baseline.hidden,
            m: self.model.m,
            decode: if self.baseline.autoregressive {
                DecodeMode::Autoregressive
            } else {
                DecodeMode::Direct {
                    t_pred: self.data.window.t_pred,
                }
            },
        }
    }

    pub fn fingerprint(&self) -> String {
        beamflow::eval::fingerprint(self)
    }
}

/// Which predictor a checkpoint holds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fm,
    Rnn,
    Lstm,
}

impl std::str::FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fm" => Ok(ModelKind::Fm),
            "rnn" => Ok(ModelKind::Rnn),
            "lstm" => Ok(ModelKind::Lstm),
            other => Err(Error::config(format!(
                "unknown model `{other}` (expected fm, rnn, or lstm)"
            ))),
        }
    }
}

impl std::fmt::Display for ModelKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            ModelKind::Fm => "fm",
            ModelKind::Rnn => "rnn",
            ModelKind::Lstm => "lstm",
        };
        f.write_str(s)
    }
}

/// Self-describing payload embedded in every checkpoint.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointConfig {
    pub kind: ModelKind,
    pub m: usize,
    pub seed: u64,
    pub window: WindowConfig,
    pub model: Option<ModelConfig>,
    pub baseline: Option<RecurrentConfig>,
    pub training: TrainConfig,
    pub run_fingerprint: String,
}

impl CheckpointConfig {
    pub fn to_json(&self) -> Result<String> {
        serde_json::to_string(self).map_err(|e| Error::config(format!("checkpoint config: {e}")))
    }

    pub fn from_json(raw: &str) -> Result<CheckpointConfig> {
        serde_json::from_str(raw)
            .map_err(|e| Error::data(format!("checkpoint carries an unreadable config: {e}")))
    }
}
