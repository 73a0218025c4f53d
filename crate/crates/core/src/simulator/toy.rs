//! A small pre-norm decoder with seeded random weights.
//!
//! Block: `x → A = x; B = A + Attn(norm(A)); x' = B + MLP(norm(B))`, RMS
//! normalisation without gain, sinusoidal positions added to the token
//! embedding, tied output embedding and greedy sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eviction::{accumulate_scores, evict, EvictionPolicy};
use crate::kv_model::{KvCacheState, ModelShape};

const NORM_EPS: f32 = 1e-6;
const MLP_EXPANSION: usize = 4;
pub const DEFAULT_VOCAB: usize = 256;

/// Seed, shape and initialisation of a toy model. Weights are a pure function
/// of these fields.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    #[serde(flatten)]
    pub shape: ModelShape,
    pub seed: u64,
    /// Standard deviation of every projection weight.
    pub weight_scale: f32,
    pub vocab: usize,
}

impl ToyModelSpec {
    /// Spec with `weight_scale = 1.5 / sqrt(d_model)` and the default vocab.
    pub fn new(shape: ModelShape, seed: u64) -> Self {
        ToyModelSpec {
            shape,
            seed,
            weight_scale: default_weight_scale(shape.d_model),
            vocab: DEFAULT_VOCAB,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.shape.validate()?;
        let hd = self.shape.head_dim();
        if self.shape.kv_dim % hd != 0 || self.shape.n_heads % (self.shape.kv_dim / hd) != 0 {
            return Err(Error::InvalidConfig(format!(
                "kv_dim {} must be a whole number of heads of width {hd} dividing n_heads {}",
                self.shape.kv_dim, self.shape.n_heads
            )));
        }
        if !(self.weight_scale > 0.0 && self.weight_scale.is_finite()) {
            return Err(Error::InvalidConfig("weight_scale must be positive".into()));
        }
        if self.vocab < 2 {
            return Err(Error::InvalidConfig("vocab must be at least 2".into()));
        }
        Ok(())
    }

    /// Seeded prompt of `len` token ids.
    pub fn prompt(&self, len: usize) -> Vec<u32> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5EED_0F_9E37_79B9);
        (0..len).map(|_| rng.random_range(0..self.vocab as u32)).collect()
    }
}

pub fn default_weight_scale(d_model: usize) -> f32 {
    1.5 / (d_model as f32).sqrt()
}

/// Row-major `[in][out]` matrices of one block.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct ToyModel {
    spec: ToyModelSpec,
    embedding: Vec<f32>,
    layers: Vec<LayerWeights>,
}

impl ToyModel {
    pub fn build(spec: &ToyModelSpec) -> Result<Self> {
        spec.validate()?;
        let ModelShape {
            n_layer,
            d_model,
            kv_dim,
            ..
        } = spec.shape;
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        let unit = Normal::new(0.0f32, 1.0).expect("unit normal");
        let scaled = Normal::new(0.0f32, spec.weight_scale)
            .map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut draw = |n: usize, dist: &Normal<f32>| -> Vec<f32> {
            (0..n).map(|_| dist.sample(&mut rng)).collect()
        };
        let embedding = draw(spec.vocab * d_model, &unit);
        let d_ff = MLP_EXPANSION * d_model;
        let layers = (0..n_layer)
            .map(|_| LayerWeights {
                wq: draw(d_model * d_model, &scaled),
                wk: draw(d_model * kv_dim, &scaled),
                wv: draw(d_model * kv_dim, &scaled),
                wo: draw(d_model * d_model, &scaled),
                w_up: draw(d_model * d_ff, &scaled),
                w_down: draw(d_ff * d_model, &scaled),
            })
            .collect();
        Ok(ToyModel {
            spec: *spec,
            embedding,
            layers,
        })
    }

    pub fn spec(&self) -> &ToyModelSpec {
        &self.spec
    }

    pub fn shape(&self) -> &ModelShape {
        &self.spec.shape
    }

    pub fn layer(&self, i: usize) -> &LayerWeights {
        &self.layers[i]
    }

    /// Token embedding plus sinusoidal position encoding.
    pub fn embed(&self, token: u32, position: usize) -> Result<Vec<f32>> {
        if token as usize >= self.spec.vocab {
            return Err(Error::TokenOutOfRange {
                token,
                vocab: self.spec.vocab,
            });
        }
        let d = self.spec.shape.d_model;
        let row = &self.embedding[token as usize * d..(token as usize + 1) * d];
        Ok(row
            .iter()
            .enumerate()
            .map(|(i, &e)| {
                let freq = 1.0 / 10_000f64.powf((2 * (i / 2)) as f64 / d as f64);
                let angle = position as f64 * freq;
                e + if i % 2 == 0 { angle.sin() } else { angle.cos() } as f32
            })
            .collect())
    }

    /// Greedy next token from a final hidden state (lowest id on ties).
    pub fn next_token(&self, hidden: &[f32]) -> u32 {
        let h = rms_norm(hidden);
        let d = self.spec.shape.d_model;
        let mut best = (0u32, f32::NEG_INFINITY);
        for (t, row) in self.embedding.chunks(d).enumerate() {
            let logit: f32 = row.iter().zip(&h).map(|(a, b)| a * b).sum();
            if logit > best.1 {
                best = (t as u32, logit);
            }
        }
        best.0
    }
}

pub fn rms_norm(x: &[f32]) -> Vec<f32> {
    let ms = x.iter().map(|v| (v * v) as f64).sum::<f64>() / x.len() as f64;
    let inv = 1.0 / (ms as f32 + NORM_EPS).sqrt();
    x.iter().map(|v| v * inv).collect()
}

/// `x · W` for row-major `W` of shape `[x.len()][out]`.
pub fn matvec(x: &[f32], w: &[f32], out: usize) -> Vec<f32> {
    let mut y = vec![0f32; out];
    for (xi, row) in x.iter().zip(w.chunks(out)) {
        for (yj, wij) in y.iter_mut().zip(row) {
            *yj += xi * wij;
        }
    }
    y
}

fn gelu(x: f32) -> f32 {
    0.5 * x * (1.0 + (0.797_884_6 * (x + 0.044_715 * x * x * x)).tanh())
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Something a test harness or tool can watch while decoding.
#[derive(Debug, Clone, PartialEq)]
pub enum StepEvent<'a> {
    /// Positions removed from a layer before its attention at `step`.
    Evicted {
        step: usize,
        layer: usize,
        positions: &'a [usize],
    },
    /// Head-averaged attention over the retained positions, in position
    /// order, after the step's own entry was appended.
    Attended {
        step: usize,
        layer: usize,
        positions: &'a [usize],
        row: &'a [f64],
    },
}

/// Per-layer outcome of pushing one token through the stack.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenStep {
    pub hidden: Vec<f32>,
    pub pre_attention: Vec<Vec<f32>>,
    pub post_attention: Vec<Vec<f32>>,
    pub retained_after_evict: Vec<usize>,
    pub mass_retained: Vec<f64>,
}

/// Live decoding state: retained positions plus every key/value ever computed.
#[derive(Debug, Clone)]
pub struct DecodeSession<'m> {
    model: &'m ToyModel,
    cache: KvCacheState,
    keys: Vec<Vec<f32>>,
    values: Vec<Vec<f32>>,
    next_position: usize,
}

impl<'m> DecodeSession<'m> {
    pub fn new(model: &'m ToyModel) -> Self {
        let n = model.shape().n_layer;
        DecodeSession {
            model,
            cache: KvCacheState::new(n),
            keys: vec![Vec::new(); n],
            values: vec![Vec::new(); n],
            next_position: 0,
        }
    }

    pub fn cache(&self) -> &KvCacheState {
        &self.cache
    }

    pub fn into_cache(self) -> KvCacheState {
        self.cache
    }

    pub fn next_position(&self) -> usize {
        self.next_position
    }

    /// Key vector computed for `position` at `layer`, retained or not.
    pub fn key(&self, layer: usize, position: usize) -> &[f32] {
        let kv = self.model.shape().kv_dim;
        &self.keys[layer][position * kv..(position + 1) * kv]
    }

    pub fn value(&self, layer: usize, position: usize) -> &[f32] {
        let kv = self.model.shape().kv_dim;
        &self.values[layer][position * kv..(position + 1) * kv]
    }

    /// Runs one token through every layer. Layers whose cache exceeds their
    /// budget are compressed first; attention then covers the retained
    /// positions plus the new one.
    pub fn step(
        &mut self,
        token: u32,
        budgets: &[Option<usize>],
        policy: &EvictionPolicy,
        step: usize,
        observer: &mut dyn FnMut(StepEvent<'_>),
    ) -> Result<TokenStep> {
        let shape = *self.model.shape();
        if self.next_position >= shape.max_context {
            return Err(Error::ContextOverflow {
                needed: self.next_position + 1,
                max_context: shape.max_context,
            });
        }
        let position = self.next_position;
        let mut x = self.model.embed(token, position)?;
        let hd = shape.head_dim();
        let n_kv_heads = shape.kv_dim / hd;
        let group = shape.n_heads / n_kv_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let d_ff = MLP_EXPANSION * shape.d_model;

        let mut out = TokenStep {
            hidden: Vec::new(),
            pre_attention: Vec::with_capacity(shape.n_layer),
            post_attention: Vec::with_capacity(shape.n_layer),
            retained_after_evict: Vec::with_capacity(shape.n_layer),
            mass_retained: Vec::with_capacity(shape.n_layer),
        };

        for (li, w) in self.model.layers.iter().enumerate() {
            if let Some(budget) = budgets[li] {
                if self.cache.layer(li).len() > budget {
                    let evicted = evict(policy, self.cache.layer_mut(li), budget).map_err(|e| match e {
                        Error::BudgetFloor { budget, floor, .. } => Error::BudgetFloor {
                            layer: li,
                            budget,
                            floor,
                        },
                        other => other,
                    })?;
                    observer(StepEvent::Evicted {
                        step,
                        layer: li,
                        positions: &evicted,
                    });
                }
            }
            out.retained_after_evict.push(self.cache.layer(li).len());

            let a = x;
            let normed = rms_norm(&a);
            let q = matvec(&normed, &w.wq, shape.d_model);
            self.keys[li].extend(matvec(&normed, &w.wk, shape.kv_dim));
            self.values[li].extend(matvec(&normed, &w.wv, shape.kv_dim));
            self.cache.layer_mut(li).push(position)?;

            let positions = self.cache.layer(li).positions();
            let full_history = positions.len() == position + 1;
            let mut row = vec![0f64; positions.len()];
            let mut mass = 0f64;
            let mut attn = vec![0f32; shape.d_model];
            for h in 0..shape.n_heads {
                let g = h / group;
                let qh = &q[h * hd..(h + 1) * hd];
                let logit = |p: usize| -> f64 {
                    let k = &self.key(li, p)[g * hd..(g + 1) * hd];
                    qh.iter().zip(k).map(|(a, b)| (*a as f64) * (*b as f64)).sum::<f64>() * scale
                };
                let probs = softmax(&positions.iter().map(|&p| logit(p)).collect::<Vec<_>>());
                if !full_history {
                    // what the uncompressed cache would have put on the survivors
                    let all = softmax(&(0..=position).map(logit).collect::<Vec<_>>());
                    mass += positions.iter().map(|&p| all[p]).sum::<f64>();
                }
                let mut ctx = vec![0f64; hd];
                for (&p, &pr) in positions.iter().zip(&probs) {
                    let v = &self.value(li, p)[g * hd..(g + 1) * hd];
                    for (c, vv) in ctx.iter_mut().zip(v) {
                        *c += pr * *vv as f64;
                    }
                }
                for (slot, c) in attn[h * hd..(h + 1) * hd].iter_mut().zip(ctx) {
                    *slot = c as f32;
                }
                for (r, pr) in row.iter_mut().zip(probs) {
                    *r += pr / shape.n_heads as f64;
                }
            }
            out.mass_retained.push(if full_history {
                1.0
            } else {
                (mass / shape.n_heads as f64).clamp(0.0, 1.0)
            });
            accumulate_scores(self.cache.layer_mut(li), &row)?;
            observer(StepEvent::Attended {
                step,
                layer: li,
                positions: &positions,
                row: &row,
            });

            let attn_out = matvec(&attn, &w.wo, shape.d_model);
            let b: Vec<f32> = a.iter().zip(&attn_out).map(|(x, y)| x + y).collect();
            let up: Vec<f32> = matvec(&rms_norm(&b), &w.w_up, d_ff).into_iter().map(gelu).collect();
            let down = matvec(&up, &w.w_down, shape.d_model);
            x = b.iter().zip(&down).map(|(x, y)| x + y).collect();
            out.pre_attention.push(a);
            out.post_attention.push(b);
        }
        self.next_position += 1;
        out.hidden = x;
        Ok(out)
    }
}
