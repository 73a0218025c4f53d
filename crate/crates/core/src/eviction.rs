//! Sequence-wise eviction policies, each enforcing one layer's own budget.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kv_model::LayerCache;

pub const DEFAULT_SINK_TOKENS: usize = 4;
pub const DEFAULT_RECENT_FRACTION: f64 = 0.5;
/// Tolerance on attention rows summing to one.
pub const ROW_SUM_TOLERANCE: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "policy", rename_all = "snake_case")]
pub enum EvictionPolicy {
    /// Keep the most recent tokens.
    SlidingWindow,
    /// Keep the first `n_sink` tokens plus the most recent ones.
    Streaming {
        #[serde(default = "default_sinks")]
        n_sink: usize,
    },
    /// Keep a recent window plus the tokens with the largest accumulated
    /// attention.
    H2o {
        #[serde(default = "default_recent_fraction")]
        recent_fraction: f64,
    },
}

fn default_sinks() -> usize {
    DEFAULT_SINK_TOKENS
}

fn default_recent_fraction() -> f64 {
    DEFAULT_RECENT_FRACTION
}

impl EvictionPolicy {
    pub fn streaming() -> Self {
        EvictionPolicy::Streaming {
            n_sink: DEFAULT_SINK_TOKENS,
        }
    }

    pub fn h2o() -> Self {
        EvictionPolicy::H2o {
            recent_fraction: DEFAULT_RECENT_FRACTION,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            EvictionPolicy::SlidingWindow => "sliding_window",
            EvictionPolicy::Streaming { .. } => "streaming",
            EvictionPolicy::H2o { .. } => "h2o",
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let EvictionPolicy::H2o { recent_fraction } = *self {
            if !(recent_fraction > 0.0 && recent_fraction < 1.0) {
                return Err(Error::InvalidConfig(format!(
                    "recent_fraction must lie in (0, 1), got {recent_fraction}"
                )));
            }
        }
        Ok(())
    }

    /// Smallest budget the policy accepts.
    pub fn floor(&self) -> usize {
        match *self {
            EvictionPolicy::SlidingWindow => 1,
            EvictionPolicy::Streaming { n_sink } => n_sink + 1,
            EvictionPolicy::H2o { .. } => 2,
        }
    }

    /// Indices (into `layer.entries()`, ascending) of the entries to keep.
    pub fn select(&self, layer: &LayerCache, budget: usize) -> Result<Vec<usize>> {
        self.validate()?;
        if budget < self.floor() {
            return Err(Error::BudgetFloor {
                layer: 0,
                budget,
                floor: self.floor(),
            });
        }
        let entries = layer.entries();
        let n = entries.len();
        if n <= budget {
            return Ok((0..n).collect());
        }
        let mut keep = match *self {
            EvictionPolicy::SlidingWindow => (n - budget..n).collect(),
            EvictionPolicy::Streaming { n_sink } => {
                // entries are sorted, so the sinks present form a prefix
                let sinks = entries.iter().take_while(|e| e.position < n_sink).count();
                let recent = budget - sinks;
                let mut keep: Vec<usize> = (0..sinks).collect();
                keep.extend((n - recent).max(sinks)..n);
                keep
            }
            EvictionPolicy::H2o { recent_fraction } => {
                let recent = (budget as f64 * recent_fraction).floor() as usize;
                let heavy = budget - recent;
                let mut older: Vec<usize> = (0..n - recent).collect();
                // highest score first; equal scores prefer the later position
                older.sort_by(|&a, &b| {
                    entries[b]
                        .score
                        .total_cmp(&entries[a].score)
                        .then(entries[b].position.cmp(&entries[a].position))
                });
                older.truncate(heavy);
                older.extend(n - recent..n);
                older
            }
        };
        keep.sort_unstable();
        Ok(keep)
    }
}

/// Evicts down to `budget` entries in place; returns the evicted positions.
/// A cache already within budget is left unchanged.
pub fn evict(policy: &EvictionPolicy, layer: &mut LayerCache, budget: usize) -> Result<Vec<usize>> {
    let keep = policy.select(layer, budget)?;
    if keep.len() == layer.len() {
        return Ok(Vec::new());
    }
    Ok(layer.retain_indices(&keep))
}

/// Adds one attention row (one probability per retained entry, in position
/// order) onto the entries' accumulated scores.
pub fn accumulate_scores(layer: &mut LayerCache, row: &[f64]) -> Result<()> {
    if row.len() != layer.len() {
        return Err(Error::AttentionRow(format!(
            "row has {} entries for {} retained positions",
            row.len(),
            layer.len()
        )));
    }
    check_distribution(row)?;
    for (entry, &p) in layer.entries_mut().iter_mut().zip(row) {
        entry.score += p;
    }
    Ok(())
}

pub(crate) fn check_distribution(row: &[f64]) -> Result<()> {
    if row.iter().any(|p| !(*p >= 0.0) || !p.is_finite()) {
        return Err(Error::AttentionRow("probabilities must be finite and >= 0".into()));
    }
    let sum: f64 = row.iter().sum();
    if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
        return Err(Error::AttentionRow(format!("row sums to {sum}, not 1")));
    }
    Ok(())
}
