use serde::{Deserialize, Serialize};
use squeeze_core::eviction::{evict, EvictionPolicy};
use squeeze_core::grouping::{allocate_budgets, budget_from_fraction, cluster_layers, BudgetPlan};
use squeeze_core::kv_model::{CacheEntry, LayerCache, ModelShape, SimConfig};
use squeeze_core::profiler::{profile_layers, CosineProfile};
use squeeze_core::simulator::{prefill, simulate_decode, DecodeMode, ToyModel, ToyModelSpec};

fn text<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

pub fn plan_budgets(cosines_json: &str, b_init: usize, squeeze_ratio: f64) -> Result<String, String> {
    let cosines: Vec<f64> = serde_json::from_str(cosines_json).map_err(text)?;
    let profile = CosineProfile::from_means(&cosines, 1).map_err(text)?;
    let groups = cluster_layers(&profile).map_err(text)?;
    let plan = allocate_budgets(&groups, b_init, squeeze_ratio).map_err(text)?;
    serde_json::to_string(&plan).map_err(text)
}

#[derive(Serialize)]
struct EvictOutcome {
    retained: Vec<CacheEntry>,
    evicted: Vec<usize>,
}

pub fn evict_demo(policy_json: &str, entries_json: &str, budget: usize) -> Result<String, String> {
    let policy: EvictionPolicy = serde_json::from_str(policy_json).map_err(text)?;
    policy.validate().map_err(text)?;
    let entries: Vec<CacheEntry> = serde_json::from_str(entries_json).map_err(text)?;
    let mut layer = LayerCache::from_entries(entries).map_err(text)?;
    let evicted = evict(&policy, &mut layer, budget).map_err(text)?;
    serde_json::to_string(&EvictOutcome {
        retained: layer.entries().to_vec(),
        evicted,
    })
    .map_err(text)
}

#[derive(Debug, Deserialize)]
pub struct CurveRequest {
    pub n_layer: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub prompt_len: usize,
    pub gen_len: usize,
    pub seed: u64,
    /// `b_init` as a fraction of the prompt length.
    pub budget: f64,
    pub squeeze_ratio: f64,
    pub policy: EvictionPolicy,
}

#[derive(Debug, Serialize)]
struct Curve {
    mode: &'static str,
    bytes: Vec<u64>,
    mass_retained: Vec<f64>,
    peak_bytes: u64,
}

#[derive(Debug, Serialize)]
struct Curves {
    plan: BudgetPlan,
    mean_cosines: Vec<f64>,
    curves: Vec<Curve>,
}

pub fn memory_curves(request_json: &str) -> Result<String, String> {
    let req: CurveRequest = serde_json::from_str(request_json).map_err(text)?;
    let max_context = req.prompt_len + req.gen_len;
    let shape = ModelShape::new(req.n_layer, req.d_model, req.n_heads, 2, max_context).map_err(text)?;
    let model = ToyModel::build(&ToyModelSpec::new(shape, req.seed)).map_err(text)?;
    let run = SimConfig::new(req.prompt_len, req.gen_len, 1, req.seed).map_err(text)?;

    let prompt = model.spec().prompt(req.prompt_len);
    let pre = prefill(&model, &prompt, &mut |_| {}).map_err(text)?;
    let profile = profile_layers(&pre.trace).map_err(text)?;
    let b_init = budget_from_fraction(req.budget, req.prompt_len).map_err(text)?;
    let plan = allocate_budgets(&cluster_layers(&profile).map_err(text)?, b_init, req.squeeze_ratio).map_err(text)?;

    let mut curves = Vec::new();
    for mode in [DecodeMode::Full, DecodeMode::Uniform, DecodeMode::Squeeze] {
        let out = simulate_decode(&model, &run, Some(&plan), &req.policy, mode).map_err(text)?;
        let r = out.report;
        curves.push(Curve {
            mode: mode.name(),
            bytes: r.byte_series(),
            mass_retained: r
                .steps
                .iter()
                .map(|s| s.mass_retained.iter().sum::<f64>() / s.mass_retained.len() as f64)
                .collect(),
            peak_bytes: r.peak_bytes,
        });
    }
    serde_json::to_string(&Curves {
        plan,
        mean_cosines: profile.means(),
        curves,
    })
    .map_err(text)
}
