//! Model and run shapes, per-layer cache occupancy and KV byte accounting.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Static dimensions of a decoder stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawShape")]
pub struct ModelShape {
    pub n_layer: usize,
    pub d_model: usize,
    pub n_heads: usize,
    /// Width of the K and V projections. Equal to `d_model` unless the model
    /// shares KV heads across query heads.
    pub kv_dim: usize,
    pub bytes_per_scalar: usize,
    pub max_context: usize,
}

#[derive(Deserialize)]
struct RawShape {
    n_layer: usize,
    d_model: usize,
    n_heads: usize,
    #[serde(default)]
    kv_dim: Option<usize>,
    bytes_per_scalar: usize,
    max_context: usize,
}

impl TryFrom<RawShape> for ModelShape {
    type Error = Error;

    fn try_from(raw: RawShape) -> Result<Self> {
        let shape = ModelShape {
            n_layer: raw.n_layer,
            d_model: raw.d_model,
            n_heads: raw.n_heads,
            kv_dim: raw.kv_dim.unwrap_or(raw.d_model),
            bytes_per_scalar: raw.bytes_per_scalar,
            max_context: raw.max_context,
        };
        shape.validate()?;
        Ok(shape)
    }
}

impl ModelShape {
    /// Shape with `kv_dim = d_model`.
    pub fn new(
        n_layer: usize,
        d_model: usize,
        n_heads: usize,
        bytes_per_scalar: usize,
        max_context: usize,
    ) -> Result<Self> {
        let shape = ModelShape {
            n_layer,
            d_model,
            n_heads,
            kv_dim: d_model,
            bytes_per_scalar,
            max_context,
        };
        shape.validate()?;
        Ok(shape)
    }

    /// Llama-2-7B in half precision.
    pub fn llama2_7b() -> Self {
        ModelShape {
            n_layer: 32,
            d_model: 4096,
            n_heads: 32,
            kv_dim: 4096,
            bytes_per_scalar: 2,
            max_context: 4096,
        }
    }

    pub fn with_kv_dim(mut self, kv_dim: usize) -> Result<Self> {
        self.kv_dim = kv_dim;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layer == 0 {
            return Err(Error::InvalidConfig("n_layer must be at least 1".into()));
        }
        if self.d_model == 0 {
            return Err(Error::InvalidConfig("d_model must be at least 1".into()));
        }
        if self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::InvalidConfig(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.kv_dim == 0 {
            return Err(Error::InvalidConfig("kv_dim must be at least 1".into()));
        }
        if !matches!(self.bytes_per_scalar, 1 | 2 | 4 | 8) {
            return Err(Error::InvalidConfig(format!(
                "bytes_per_scalar must be 1, 2, 4 or 8, got {}",
                self.bytes_per_scalar
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Bytes one token occupies across K and V of every layer, for `batch`
    /// sequences.
    pub fn bytes_per_token(&self, batch: usize) -> Result<u64> {
        [self.kv_dim, self.n_layer, batch, self.bytes_per_scalar]
            .iter()
            .try_fold(2u64, |acc, &f| acc.checked_mul(f as u64))
            .ok_or(Error::Overflow("bytes per token"))
    }
}

/// Per-run sizes: prompt length, generated length, batch and seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimConfig {
    pub prompt_len: usize,
    pub gen_len: usize,
    pub batch: usize,
    pub seed: u64,
}

impl SimConfig {
    pub fn new(prompt_len: usize, gen_len: usize, batch: usize, seed: u64) -> Result<Self> {
        let cfg = SimConfig {
            prompt_len,
            gen_len,
            batch,
            seed,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.prompt_len == 0 {
            return Err(Error::InvalidConfig("prompt_len must be at least 1".into()));
        }
        if self.batch == 0 {
            return Err(Error::InvalidConfig("batch must be at least 1".into()));
        }
        Ok(())
    }

    pub fn total_tokens(&self) -> usize {
        self.prompt_len + self.gen_len
    }
}

/// The flat JSON config document holding both a shape and a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(flatten)]
    pub shape: ModelShape,
    #[serde(flatten)]
    pub sim: SimConfig,
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            serde_json::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.sim.validate()?;
        Ok(cfg)
    }
}

/// Upper bound on KV bytes when every layer caches all `prompt_len + gen_len`
/// tokens: `2 · kv_dim · n_layer · batch · (prompt_len + gen_len) · bytes_per_scalar`.
pub fn kv_cache_bytes(shape: &ModelShape, cfg: &SimConfig) -> Result<u64> {
    shape.validate()?;
    cfg.validate()?;
    shape
        .bytes_per_token(cfg.batch)?
        .checked_mul(cfg.total_tokens() as u64)
        .ok_or(Error::Overflow("kv cache bytes"))
}

/// Smallest total token count at which the KV cache reaches `weight_bytes`.
pub fn weights_crossover_tokens(shape: &ModelShape, batch: usize, weight_bytes: u64) -> Result<u64> {
    shape.validate()?;
    let per_token = shape.bytes_per_token(batch)?;
    Ok(weight_bytes.div_ceil(per_token))
}

/// One cached token: its absolute position and the attention mass it has
/// accumulated while retained.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CacheEntry {
    pub position: usize,
    pub score: f64,
}

/// Retained entries of one layer, sorted by strictly increasing position.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LayerCache {
    entries: Vec<CacheEntry>,
}

impl LayerCache {
    pub fn new() -> Self {
        Self::default()
    }

    /// Cache holding positions `0..len` with zero scores.
    pub fn filled(len: usize) -> Self {
        LayerCache {
            entries: (0..len)
                .map(|position| CacheEntry {
                    position,
                    score: 0.0,
                })
                .collect(),
        }
    }

    pub fn from_entries(mut entries: Vec<CacheEntry>) -> Result<Self> {
        entries.sort_by_key(|e| e.position);
        if entries.windows(2).any(|w| w[0].position == w[1].position) {
            return Err(Error::InvalidConfig("duplicate cache position".into()));
        }
        if entries.iter().any(|e| !(e.score >= 0.0) || !e.score.is_finite()) {
            return Err(Error::InvalidConfig("cache scores must be finite and >= 0".into()));
        }
        Ok(LayerCache { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[CacheEntry] {
        &self.entries
    }

    pub fn positions(&self) -> Vec<usize> {
        self.entries.iter().map(|e| e.position).collect()
    }

    pub fn contains(&self, position: usize) -> bool {
        self.entries
            .binary_search_by_key(&position, |e| e.position)
            .is_ok()
    }

    /// Appends a token newer than every retained one.
    pub fn push(&mut self, position: usize) -> Result<()> {
        if let Some(last) = self.entries.last() {
            if last.position >= position {
                return Err(Error::InvalidConfig(format!(
                    "position {position} is not newer than {}",
                    last.position
                )));
            }
        }
        self.entries.push(CacheEntry {
            position,
            score: 0.0,
        });
        Ok(())
    }

    pub(crate) fn entries_mut(&mut self) -> &mut [CacheEntry] {
        &mut self.entries
    }

    /// Keeps entries whose index (not position) is in `keep`, which must be
    /// sorted. Returns the evicted positions.
    pub(crate) fn retain_indices(&mut self, keep: &[usize]) -> Vec<usize> {
        let mut keep_iter = keep.iter().peekable();
        let mut evicted = Vec::new();
        let mut idx = 0;
        self.entries.retain(|e| {
            let kept = keep_iter.peek() == Some(&&idx);
            if kept {
                keep_iter.next();
            } else {
                evicted.push(e.position);
            }
            idx += 1;
            kept
        });
        evicted
    }
}

/// Per-layer occupancy of the KV cache. Key/value tensors live with the
/// simulator; this tracks which positions each layer still holds.
#[derive(Debug, Clone, PartialEq)]
pub struct KvCacheState {
    layers: Vec<LayerCache>,
    budgets: Vec<Option<usize>>,
}

impl KvCacheState {
    /// Empty cache with no budgets.
    pub fn new(n_layer: usize) -> Self {
        KvCacheState {
            layers: vec![LayerCache::new(); n_layer],
            budgets: vec![None; n_layer],
        }
    }

    pub fn from_layers(layers: Vec<LayerCache>) -> Self {
        let n = layers.len();
        KvCacheState {
            layers,
            budgets: vec![None; n],
        }
    }

    pub fn set_budgets(&mut self, budgets: Vec<Option<usize>>) -> Result<()> {
        if budgets.len() != self.layers.len() {
            return Err(Error::LayerMismatch {
                expected: self.layers.len(),
                actual: budgets.len(),
            });
        }
        self.budgets = budgets;
        Ok(())
    }

    pub fn n_layer(&self) -> usize {
        self.layers.len()
    }

    pub fn layer(&self, i: usize) -> &LayerCache {
        &self.layers[i]
    }

    pub fn layer_mut(&mut self, i: usize) -> &mut LayerCache {
        &mut self.layers[i]
    }

    pub fn layers(&self) -> &[LayerCache] {
        &self.layers
    }

    pub fn budget(&self, i: usize) -> Option<usize> {
        self.budgets[i]
    }

    pub fn retained_counts(&self) -> Vec<usize> {
        self.layers.iter().map(LayerCache::len).collect()
    }

    pub fn total_retained(&self) -> usize {
        self.layers.iter().map(LayerCache::len).sum()
    }
}

/// Bytes held by the entries actually retained in `cache`.
pub fn kv_cache_bytes_actual(cache: &KvCacheState, shape: &ModelShape, batch: usize) -> Result<u64> {
    if cache.n_layer() != shape.n_layer {
        return Err(Error::LayerMismatch {
            expected: shape.n_layer,
            actual: cache.n_layer(),
        });
    }
    let per_entry = [shape.kv_dim, shape.bytes_per_scalar, batch]
        .iter()
        .try_fold(2u64, |acc, &f| acc.checked_mul(f as u64))
        .ok_or(Error::Overflow("bytes per cache entry"))?;
    per_entry
        .checked_mul(cache.total_retained() as u64)
        .ok_or(Error::Overflow("kv cache bytes"))
}
