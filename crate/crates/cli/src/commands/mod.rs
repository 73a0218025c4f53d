pub mod plan;
pub mod profile;
pub mod report;
pub mod simulate;
pub mod sweep;

use squeeze_core::grouping::{allocate_budgets, cluster_layers, BudgetPlan};
use squeeze_core::profiler::{profile_layers, CosineProfile};
use squeeze_core::simulator::{prefill, ToyModel};

use crate::config::ModelConfig;
use crate::error::CliResult;

/// Prefill the config's seeded prompt and profile it.
pub(crate) fn toy_profile(model: &ToyModel, cfg: &ModelConfig) -> CliResult<CosineProfile> {
    let prompt = model.spec().prompt(cfg.run.sim.prompt_len);
    let p = prefill(model, &prompt, &mut |_| {})?;
    Ok(profile_layers(&p.trace)?)
}

pub(crate) fn plan_from_profile(profile: &CosineProfile, b_init: usize, ratio: f64) -> CliResult<BudgetPlan> {
    let groups = cluster_layers(profile)?;
    Ok(allocate_budgets(&groups, b_init, ratio)?)
}
