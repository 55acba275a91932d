use std::path::Path;

use latmap_core::store::synth::SynthSpec;
use latmap_core::{Error, GridConfig, OnlineConfig, Result, TrainConfig};
use serde::{Deserialize, Serialize};

/// Aggregator shape used when no weights file is supplied.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AggregatorSettings {
    pub hidden: Vec<usize>,
    pub token_dim: usize,
    pub num_frequencies: usize,
}

impl Default for AggregatorSettings {
    fn default() -> Self {
        AggregatorSettings {
            hidden: latmap_core::AggregatorWeights::DEFAULT_HIDDEN.to_vec(),
            token_dim: latmap_core::AggregatorWeights::DEFAULT_TOKEN_DIM,
            num_frequencies: latmap_core::PosEncConfig::default().num_frequencies,
        }
    }
}

/// Contents of `--config`; every section is optional. Command-line flags win.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    pub grid: GridConfig,
    pub decoder_hidden: Vec<usize>,
    pub train: TrainConfig,
    pub online: OnlineConfig,
    pub aggregator: AggregatorSettings,
    pub synth: SynthSpec,
}

impl Default for CliConfig {
    fn default() -> Self {
        CliConfig {
            grid: GridConfig::default(),
            decoder_hidden: vec![128, 128],
            train: TrainConfig::default(),
            online: OnlineConfig::default(),
            aggregator: AggregatorSettings::default(),
            synth: SynthSpec::default(),
        }
    }
}

impl CliConfig {
    pub fn load(path: Option<&Path>) -> Result<Self> {
        let Some(path) = path else {
            return Ok(CliConfig::default());
        };
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text).map_err(|e| Error::InvalidConfig(format!("{}: {e}", path.display())))
    }

    /// Points every seed in the configuration at `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.grid.seed = seed;
        self.train.seed = seed;
        self.online.seed = seed;
        self.synth.seed = seed;
    }
}
