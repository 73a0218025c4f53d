use std::path::Path;

use serde::{Deserialize, Serialize};
use squeeze_core::eviction::EvictionPolicy;
use squeeze_core::kv_model::RunConfig;
use squeeze_core::simulator::{default_weight_scale, ToyModelSpec, DEFAULT_VOCAB};

use crate::error::{CliError, CliResult};
use crate::manifest::read_text;

/// Model/run config file: the shape and run keys plus optional toy-model
/// knobs `weight_scale` and `vocab`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    #[serde(flatten)]
    pub run: RunConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight_scale: Option<f32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<usize>,
}

impl ModelConfig {
    pub fn load(path: &Path, seed: Option<u64>) -> CliResult<Self> {
        let text = read_text(path)?;
        let mut cfg: ModelConfig = serde_json::from_str(&text).map_err(|e| CliError::read(path, e))?;
        cfg.run.sim.validate().map_err(|e| CliError::read(path, e))?;
        if let Some(seed) = seed {
            cfg.run.sim.seed = seed;
        }
        Ok(cfg)
    }

    pub fn toy_spec(&self) -> ToyModelSpec {
        ToyModelSpec {
            shape: self.run.shape,
            seed: self.run.sim.seed,
            weight_scale: self
                .weight_scale
                .unwrap_or_else(|| default_weight_scale(self.run.shape.d_model)),
            vocab: self.vocab.unwrap_or(DEFAULT_VOCAB),
        }
    }
}

#[derive(Debug, Clone, clap::Args)]
pub struct PolicyArgs {
    /// `sliding_window`, `streaming`, `h2o`, or a JSON object such as
    /// `{"policy":"h2o","recent_fraction":0.5}`.
    #[arg(long, default_value = "sliding_window")]
    pub policy: String,
    /// Sink tokens kept by `streaming`.
    #[arg(long)]
    pub n_sink: Option<usize>,
    /// Share of the budget given to the recent window by `h2o`.
    #[arg(long)]
    pub recent_fraction: Option<f64>,
}

impl PolicyArgs {
    pub fn resolve(&self) -> CliResult<EvictionPolicy> {
        let text = self.policy.trim();
        let mut policy = if text.starts_with('{') {
            serde_json::from_str(text).map_err(|e| CliError::Usage(format!("--policy: {e}")))?
        } else {
            serde_json::from_value(serde_json::json!({ "policy": text }))
                .map_err(|_| CliError::Usage(format!("unknown policy {text:?}")))?
        };
        match &mut policy {
            EvictionPolicy::Streaming { n_sink } => {
                if let Some(n) = self.n_sink {
                    *n_sink = n;
                }
            }
            EvictionPolicy::H2o { recent_fraction } => {
                if let Some(f) = self.recent_fraction {
                    *recent_fraction = f;
                }
            }
            EvictionPolicy::SlidingWindow => {}
        }
        policy.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(policy)
    }
}

/// Allowed range for `--squeeze-ratio`.
pub const SQUEEZE_RATIO_RANGE: std::ops::RangeInclusive<f64> = 0.05..=1.0;

pub fn check_squeeze_ratio(r: f64) -> CliResult<f64> {
    if SQUEEZE_RATIO_RANGE.contains(&r) {
        Ok(r)
    } else {
        Err(CliError::Usage(format!(
            "squeeze ratio {r} outside [{}, {}]",
            SQUEEZE_RATIO_RANGE.start(),
            SQUEEZE_RATIO_RANGE.end()
        )))
    }
}
