use std::path::PathBuf;

use clap::Args;
use squeeze_core::grouping::{allocate_budgets, LayerGroups, DEFAULT_SQUEEZE_RATIO};
use squeeze_core::profiler::CosineProfile;

use super::plan_from_profile;
use crate::config::{check_squeeze_ratio, PolicyArgs};
use crate::error::{CliError, CliResult};
use crate::manifest::{read_text, write_json_with_manifest, RunManifest};
use crate::{BudgetArgs, OutArgs};

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Profile JSON written by `squeeze profile`.
    #[arg(long, required_unless_present = "groups")]
    pub profile: Option<PathBuf>,
    /// Layer groups JSON (`g1`, `g2`, `g3`) used instead of clustering.
    #[arg(long)]
    pub groups: Option<PathBuf>,
    #[command(flatten)]
    pub budget: BudgetArgs,
    /// Share of `b_init` kept by the least important group.
    #[arg(long, default_value_t = DEFAULT_SQUEEZE_RATIO)]
    pub squeeze_ratio: f64,
    /// Check every budget against this policy's minimum.
    #[arg(long)]
    pub policy: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn run(a: &PlanArgs, args: &[String]) -> CliResult<()> {
    let mut manifest = RunManifest::new("plan", args);
    let profile = match &a.profile {
        Some(path) => {
            let text = read_text(path)?;
            manifest.inputs.push(path.clone());
            Some(CosineProfile::from_json(&text).map_err(|e| CliError::read(path, e))?)
        }
        None => None,
    };
    let groups = match &a.groups {
        Some(path) => {
            let text = read_text(path)?;
            manifest.inputs.push(path.clone());
            let g: LayerGroups = serde_json::from_str(&text).map_err(|e| CliError::read(path, e))?;
            if let Some(p) = &profile {
                if p.n_layer() != g.n_layer() {
                    return Err(CliError::read(
                        path,
                        format!("{} grouped layers but the profile has {}", g.n_layer(), p.n_layer()),
                    ));
                }
            }
            Some(g)
        }
        None => None,
    };

    let ratio = check_squeeze_ratio(a.squeeze_ratio)?;
    let prompt_len = profile.as_ref().map(|p| p.prompt_len);
    if a.budget.budget.is_some() && prompt_len.is_none() {
        return Err(CliError::Usage("--budget needs --profile for the prompt length; use --b-init".into()));
    }
    let b_init = a
        .budget
        .resolve(prompt_len.unwrap_or(0))?
        .ok_or_else(|| CliError::Usage("need --b-init or --budget".into()))?;
    let plan = match (groups, &profile) {
        (Some(g), _) => allocate_budgets(&g, b_init, ratio)?,
        (None, Some(p)) => plan_from_profile(p, b_init, ratio)?,
        (None, None) => return Err(CliError::Usage("need --profile or --groups".into())),
    };
    if let Some(policy) = &a.policy {
        let policy = PolicyArgs {
            policy: policy.clone(),
            n_sink: None,
            recent_fraction: None,
        }
        .resolve()?;
        plan.enforce_floor(policy.floor())?;
    }

    let out_path = a.out.out_dir.join("plan.json");
    manifest.outputs.push(out_path.clone());
    write_json_with_manifest(&out_path, &plan, &manifest)
}
