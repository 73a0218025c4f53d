//! Prefill and decode loop over the toy model, with per-layer budgets.

mod planted;
mod toy;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::eviction::{check_distribution, EvictionPolicy};
use crate::grouping::BudgetPlan;
use crate::kv_model::{kv_cache_bytes_actual, KvCacheState, ModelShape, SimConfig};
use crate::profiler::PrefillTrace;

pub use planted::make_planted_trace;
pub use toy::{
    default_weight_scale, matvec, rms_norm, DecodeSession, LayerWeights, StepEvent, TokenStep, ToyModel,
    ToyModelSpec, DEFAULT_VOCAB,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecodeMode {
    /// Per-layer budgets from the plan.
    Squeeze,
    /// `b_init` on every layer.
    Uniform,
    /// No eviction.
    Full,
}

impl DecodeMode {
    pub fn name(&self) -> &'static str {
        match self {
            DecodeMode::Squeeze => "squeeze",
            DecodeMode::Uniform => "uniform",
            DecodeMode::Full => "full",
        }
    }
}

impl std::str::FromStr for DecodeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "squeeze" => Ok(DecodeMode::Squeeze),
            "uniform" => Ok(DecodeMode::Uniform),
            "full" => Ok(DecodeMode::Full),
            other => Err(Error::InvalidConfig(format!("unknown mode {other:?}"))),
        }
    }
}

/// Result of prefilling the toy model.
pub struct Prefill<'m> {
    pub trace: PrefillTrace,
    /// Final-layer output per prompt token.
    pub hidden: Vec<Vec<f32>>,
    pub session: DecodeSession<'m>,
}

/// Pushes the prompt through the model, caching every prompt position in
/// every layer and recording the hidden state around each attention block.
pub fn prefill<'m>(
    model: &'m ToyModel,
    prompt: &[u32],
    observer: &mut dyn FnMut(StepEvent<'_>),
) -> Result<Prefill<'m>> {
    let shape = *model.shape();
    if prompt.is_empty() {
        return Err(Error::InvalidConfig("prompt must hold at least one token".into()));
    }
    if prompt.len() > shape.max_context {
        return Err(Error::ContextOverflow {
            needed: prompt.len(),
            max_context: shape.max_context,
        });
    }
    let unbounded = vec![None; shape.n_layer];
    let mut session = DecodeSession::new(model);
    let d = shape.d_model;
    let n = shape.n_layer * prompt.len() * d;
    let (mut pre, mut post) = (vec![0f32; n], vec![0f32; n]);
    let mut hidden = Vec::with_capacity(prompt.len());
    for (t, &token) in prompt.iter().enumerate() {
        let out = session.step(token, &unbounded, &EvictionPolicy::SlidingWindow, 0, observer)?;
        for layer in 0..shape.n_layer {
            let at = (layer * prompt.len() + t) * d;
            pre[at..at + d].copy_from_slice(&out.pre_attention[layer]);
            post[at..at + d].copy_from_slice(&out.post_attention[layer]);
        }
        hidden.push(out.hidden);
    }
    let trace = PrefillTrace::full(shape.n_layer, d, prompt.len(), pre, post)?;
    Ok(Prefill {
        trace,
        hidden,
        session,
    })
}

/// Prefill returning the trace, the filled cache and the final hidden states.
pub fn toy_prefill(spec: &ToyModelSpec, prompt: &[u32]) -> Result<(PrefillTrace, KvCacheState, Vec<Vec<f32>>)> {
    let model = ToyModel::build(spec)?;
    let p = prefill(&model, prompt, &mut |_| {})?;
    Ok((p.trace, p.session.into_cache(), p.hidden))
}

/// Probability mass of a full-history attention row that lands on `retained`.
pub fn attention_mass_retained(full_row: &[f64], retained: &[usize]) -> Result<f64> {
    check_distribution(full_row)?;
    let mut mass = 0f64;
    for &p in retained {
        mass += full_row.get(p).ok_or_else(|| {
            Error::AttentionRow(format!("position {p} beyond a row of {}", full_row.len()))
        })?;
    }
    Ok(mass.clamp(0.0, 1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub shape: ModelShape,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub batch: usize,
    pub seed: u64,
    pub weight_scale: f32,
    pub vocab: usize,
    pub mode: DecodeMode,
    pub policy: EvictionPolicy,
    pub b_init: Option<usize>,
    pub squeeze_ratio: Option<f64>,
    /// Effective per-layer budgets; `null` means unbounded.
    pub budgets: Vec<Option<usize>>,
}

/// Cache state at the end of a step. Step 0 is the end of prefill.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub bytes: u64,
    pub retained: Vec<usize>,
    /// Per-layer count right after the budget check, before the step's own
    /// entry is appended.
    pub retained_after_evict: Vec<usize>,
    pub mass_retained: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimReport {
    pub config: ReportConfig,
    pub steps: Vec<StepRecord>,
    pub peak_bytes: u64,
    pub tokens: Vec<u32>,
    /// SHA-256 of the last token's final hidden state (little-endian f32).
    pub fingerprint: String,
}

/// One flat CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CsvRow {
    pub step: usize,
    pub layer: usize,
    pub retained: usize,
    pub bytes: u64,
    pub mass_retained: f64,
}

impl SimReport {
    /// Rows of `(step, layer, retained, bytes, mass_retained)`; `bytes` is the
    /// layer's share.
    pub fn csv_rows(&self) -> Vec<CsvRow> {
        let shape = &self.config.shape;
        let per_entry = 2 * shape.kv_dim as u64 * shape.bytes_per_scalar as u64 * self.config.batch as u64;
        self.steps
            .iter()
            .flat_map(|s| {
                s.retained
                    .iter()
                    .zip(&s.mass_retained)
                    .enumerate()
                    .map(move |(layer, (&retained, &mass_retained))| CsvRow {
                        step: s.step,
                        layer,
                        retained,
                        bytes: per_entry * retained as u64,
                        mass_retained,
                    })
            })
            .collect()
    }

    pub fn mean_mass_retained(&self) -> f64 {
        let decode: Vec<f64> = self.steps[1..].iter().flat_map(|s| s.mass_retained.iter().copied()).collect();
        if decode.is_empty() {
            1.0
        } else {
            decode.iter().sum::<f64>() / decode.len() as f64
        }
    }

    pub fn min_mass_retained(&self) -> f64 {
        self.steps
            .iter()
            .flat_map(|s| s.mass_retained.iter().copied())
            .fold(1.0, f64::min)
    }

    pub fn byte_series(&self) -> Vec<u64> {
        self.steps.iter().map(|s| s.bytes).collect()
    }
}

/// Full outcome of a simulated decode.
#[derive(Debug, Clone)]
pub struct SimOutcome {
    pub report: SimReport,
    /// Final-layer hidden state of the last processed token.
    pub final_hidden: Vec<f32>,
    pub cache: KvCacheState,
}

/// Prefills a seeded prompt of `run.prompt_len` tokens and greedily decodes
/// `run.gen_len` more.
pub fn simulate_decode(
    model: &ToyModel,
    run: &SimConfig,
    plan: Option<&BudgetPlan>,
    policy: &EvictionPolicy,
    mode: DecodeMode,
) -> Result<SimOutcome> {
    let prompt = model.spec().prompt(run.prompt_len);
    simulate_decode_observed(model, &prompt, run, plan, policy, mode, &mut |_| {})
}

/// [`simulate_decode`] with an explicit prompt and an event observer.
pub fn simulate_decode_observed(
    model: &ToyModel,
    prompt: &[u32],
    run: &SimConfig,
    plan: Option<&BudgetPlan>,
    policy: &EvictionPolicy,
    mode: DecodeMode,
    observer: &mut dyn FnMut(StepEvent<'_>),
) -> Result<SimOutcome> {
    run.validate()?;
    policy.validate()?;
    let shape = *model.shape();
    if prompt.len() != run.prompt_len {
        return Err(Error::InvalidConfig(format!(
            "prompt has {} tokens, config says {}",
            prompt.len(),
            run.prompt_len
        )));
    }
    if run.total_tokens() > shape.max_context {
        return Err(Error::ContextOverflow {
            needed: run.total_tokens(),
            max_context: shape.max_context,
        });
    }
    let budgets = effective_budgets(&shape, plan, policy, mode)?;

    let pre = prefill(model, prompt, observer)?;
    let mut session = pre.session;
    let mut hidden = pre.hidden.last().cloned().expect("non-empty prompt");

    let bytes_now = |s: &DecodeSession<'_>| kv_cache_bytes_actual(s.cache(), &shape, run.batch);
    let counts = session.cache().retained_counts();
    let mut steps = vec![StepRecord {
        step: 0,
        bytes: bytes_now(&session)?,
        retained: counts.clone(),
        retained_after_evict: counts,
        mass_retained: vec![1.0; shape.n_layer],
    }];
    let mut tokens = Vec::with_capacity(run.gen_len);
    for step in 1..=run.gen_len {
        let token = model.next_token(&hidden);
        tokens.push(token);
        let out = session.step(token, &budgets, policy, step, observer)?;
        hidden = out.hidden;
        steps.push(StepRecord {
            step,
            bytes: bytes_now(&session)?,
            retained: session.cache().retained_counts(),
            retained_after_evict: out.retained_after_evict,
            mass_retained: out.mass_retained,
        });
    }

    let fingerprint = fingerprint(&hidden);
    let peak_bytes = steps.iter().map(|s| s.bytes).max().unwrap_or(0);
    let spec = model.spec();
    let report = SimReport {
        config: ReportConfig {
            shape,
            prompt_len: run.prompt_len,
            gen_len: run.gen_len,
            batch: run.batch,
            seed: spec.seed,
            weight_scale: spec.weight_scale,
            vocab: spec.vocab,
            mode,
            policy: *policy,
            b_init: plan.map(|p| p.b_init),
            squeeze_ratio: plan.map(|p| p.squeeze_ratio),
            budgets,
        },
        steps,
        peak_bytes,
        tokens,
        fingerprint,
    };
    Ok(SimOutcome {
        report,
        final_hidden: hidden,
        cache: session.into_cache(),
    })
}

fn effective_budgets(
    shape: &ModelShape,
    plan: Option<&BudgetPlan>,
    policy: &EvictionPolicy,
    mode: DecodeMode,
) -> Result<Vec<Option<usize>>> {
    if mode == DecodeMode::Full {
        return Ok(vec![None; shape.n_layer]);
    }
    let plan = plan.ok_or_else(|| {
        Error::InvalidConfig(format!("{} mode needs a budget plan", mode.name()))
    })?;
    if plan.n_layer() != shape.n_layer {
        return Err(Error::LayerMismatch {
            expected: shape.n_layer,
            actual: plan.n_layer(),
        });
    }
    let budgets: Vec<usize> = match mode {
        DecodeMode::Squeeze => plan.budgets.clone(),
        _ => vec![plan.b_init; shape.n_layer],
    };
    if let Some(layer) = budgets.iter().position(|&b| b < policy.floor()) {
        return Err(Error::BudgetFloor {
            layer,
            budget: budgets[layer],
            floor: policy.floor(),
        });
    }
    Ok(budgets.into_iter().map(Some).collect())
}

pub fn fingerprint(hidden: &[f32]) -> String {
    let mut h = Sha256::new();
    for x in hidden {
        h.update(x.to_le_bytes());
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}
