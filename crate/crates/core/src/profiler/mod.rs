//! Layer importance profiling.
//!
//! For every layer and prompt token we compare the hidden state entering the
//! attention sublayer (`A`) with the state after the attention residual add
//! (`B = A + Attn(norm(A))`). A cosine near 1 means the layer barely moved the
//! embedding. The per-layer arithmetic mean over prompt tokens is the layer's
//! score.

mod trace_format;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use trace_format::{load_trace, read_trace, save_trace, write_trace, TRACE_MAGIC};

/// Cosine similarity of two equal-length vectors.
///
/// The dot product and norms are accumulated in `f64`; the result is rounded
/// to `f32`, the precision stored by compact traces, and clamped to `[-1, 1]`.
pub fn cosine_similarity(a: &[f32], b: &[f32]) -> Result<f32> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch {
            left: a.len(),
            right: b.len(),
        });
    }
    let (mut dot, mut na, mut nb) = (0f64, 0f64, 0f64);
    for (&x, &y) in a.iter().zip(b) {
        let (x, y) = (x as f64, y as f64);
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    let cos = dot / (na.sqrt() * nb.sqrt());
    Ok((cos as f32).clamp(-1.0, 1.0))
}

/// Payload of a prefill trace.
#[derive(Debug, Clone, PartialEq)]
pub enum TraceData {
    /// Pre- and post-attention vectors, layer-major then token-major, each
    /// `d_model` long.
    Full { pre: Vec<f32>, post: Vec<f32> },
    /// Only the per-token cosines, layer-major.
    Compact { cosines: Vec<f32> },
}

/// Hidden states recorded around every attention sublayer during prefill.
#[derive(Debug, Clone, PartialEq)]
pub struct PrefillTrace {
    n_layer: usize,
    d_model: usize,
    prompt_len: usize,
    data: TraceData,
}

impl PrefillTrace {
    pub fn full(
        n_layer: usize,
        d_model: usize,
        prompt_len: usize,
        pre: Vec<f32>,
        post: Vec<f32>,
    ) -> Result<Self> {
        check_dims(n_layer, d_model, prompt_len)?;
        let expected = n_layer * prompt_len * d_model;
        for (name, v) in [("pre", &pre), ("post", &post)] {
            if v.len() != expected {
                return Err(Error::Format(format!(
                    "{name}-attention payload has {} scalars, expected {expected}",
                    v.len()
                )));
            }
        }
        let trace = PrefillTrace {
            n_layer,
            d_model,
            prompt_len,
            data: TraceData::Full { pre, post },
        };
        trace.check_finite()?;
        Ok(trace)
    }

    pub fn compact(n_layer: usize, d_model: usize, prompt_len: usize, cosines: Vec<f32>) -> Result<Self> {
        check_dims(n_layer, d_model, prompt_len)?;
        if cosines.len() != n_layer * prompt_len {
            return Err(Error::Format(format!(
                "compact payload has {} cosines, expected {}",
                cosines.len(),
                n_layer * prompt_len
            )));
        }
        if let Some(i) = cosines
            .iter()
            .position(|c| !c.is_finite() || !(-1.0..=1.0).contains(c))
        {
            return Err(Error::Format(format!(
                "cosine at layer {}, token {} is outside [-1, 1]",
                i / prompt_len,
                i % prompt_len
            )));
        }
        Ok(PrefillTrace {
            n_layer,
            d_model,
            prompt_len,
            data: TraceData::Compact { cosines },
        })
    }

    pub fn n_layer(&self) -> usize {
        self.n_layer
    }

    pub fn d_model(&self) -> usize {
        self.d_model
    }

    pub fn prompt_len(&self) -> usize {
        self.prompt_len
    }

    pub fn data(&self) -> &TraceData {
        &self.data
    }

    pub fn is_compact(&self) -> bool {
        matches!(self.data, TraceData::Compact { .. })
    }

    /// Pre- and post-attention vectors of one (layer, token) pair; `None` for
    /// compact traces.
    pub fn pair(&self, layer: usize, token: usize) -> Option<(&[f32], &[f32])> {
        match &self.data {
            TraceData::Full { pre, post } => {
                let start = (layer * self.prompt_len + token) * self.d_model;
                let range = start..start + self.d_model;
                Some((&pre[range.clone()], &post[range]))
            }
            TraceData::Compact { .. } => None,
        }
    }

    /// Per-token cosines, layer-major.
    pub fn token_cosines(&self) -> Result<Vec<f32>> {
        match &self.data {
            TraceData::Compact { cosines } => Ok(cosines.clone()),
            TraceData::Full { .. } => {
                let mut out = Vec::with_capacity(self.n_layer * self.prompt_len);
                for layer in 0..self.n_layer {
                    for token in 0..self.prompt_len {
                        let (a, b) = self.pair(layer, token).expect("full trace");
                        out.push(cosine_similarity(a, b).map_err(|e| e.at(layer, token))?);
                    }
                }
                Ok(out)
            }
        }
    }

    /// Same trace with the vectors replaced by their cosines.
    pub fn to_compact(&self) -> Result<PrefillTrace> {
        PrefillTrace::compact(self.n_layer, self.d_model, self.prompt_len, self.token_cosines()?)
    }

    fn check_finite(&self) -> Result<()> {
        if let TraceData::Full { pre, post } = &self.data {
            for (name, v) in [("pre", pre), ("post", post)] {
                if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                    let entry = i / self.d_model;
                    return Err(Error::Format(format!(
                        "non-finite {name}-attention value at layer {}, token {}",
                        entry / self.prompt_len,
                        entry % self.prompt_len
                    )));
                }
            }
        }
        Ok(())
    }
}

fn check_dims(n_layer: usize, d_model: usize, prompt_len: usize) -> Result<()> {
    if n_layer == 0 || d_model == 0 || prompt_len == 0 {
        return Err(Error::Format(format!(
            "trace dimensions must be nonzero (n_layer={n_layer}, d_model={d_model}, prompt_len={prompt_len})"
        )));
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LayerCosine {
    pub layer: usize,
    pub mean_cos: f64,
}

/// Mean cosine per layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CosineProfile {
    pub layers: Vec<LayerCosine>,
    pub prompt_len: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
    /// Per-token cosines, `[layer][token]`. Kept in memory only.
    #[serde(skip)]
    pub token_cosines: Option<Vec<Vec<f32>>>,
}

impl CosineProfile {
    /// Profile from bare per-layer means.
    pub fn from_means(means: &[f64], prompt_len: usize) -> Result<Self> {
        if let Some(layer) = means
            .iter()
            .position(|m| !m.is_finite() || !(-1.0..=1.0).contains(m))
        {
            return Err(Error::InvalidConfig(format!(
                "layer {layer}: mean cosine {} outside [-1, 1]",
                means[layer]
            )));
        }
        Ok(CosineProfile {
            layers: means
                .iter()
                .enumerate()
                .map(|(layer, &mean_cos)| LayerCosine { layer, mean_cos })
                .collect(),
            prompt_len,
            source: None,
            token_cosines: None,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let profile: CosineProfile =
            serde_json::from_str(text).map_err(|e| Error::Format(e.to_string()))?;
        for (i, l) in profile.layers.iter().enumerate() {
            if l.layer != i {
                return Err(Error::Format(format!(
                    "profile entry {i} is labelled layer {}",
                    l.layer
                )));
            }
            if !(-1.0..=1.0).contains(&l.mean_cos) {
                return Err(Error::Format(format!("layer {i}: mean_cos {} outside [-1, 1]", l.mean_cos)));
            }
        }
        Ok(profile)
    }

    pub fn n_layer(&self) -> usize {
        self.layers.len()
    }

    pub fn means(&self) -> Vec<f64> {
        self.layers.iter().map(|l| l.mean_cos).collect()
    }
}

/// Per-layer mean of the prompt tokens' cosines.
pub fn profile_layers(trace: &PrefillTrace) -> Result<CosineProfile> {
    let cosines = trace.token_cosines()?;
    let per_layer: Vec<Vec<f32>> = cosines
        .chunks(trace.prompt_len)
        .map(<[f32]>::to_vec)
        .collect();
    let layers = per_layer
        .iter()
        .enumerate()
        .map(|(layer, toks)| {
            let sum: f64 = toks.iter().map(|&c| c as f64).sum();
            LayerCosine {
                layer,
                mean_cos: (sum / toks.len() as f64).clamp(-1.0, 1.0),
            }
        })
        .collect();
    Ok(CosineProfile {
        layers,
        prompt_len: trace.prompt_len,
        source: None,
        token_cosines: Some(per_layer),
    })
}
