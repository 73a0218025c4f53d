use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use squeeze_core::grouping::{BudgetPlan, DEFAULT_SQUEEZE_RATIO};
use squeeze_core::simulator::{simulate_decode, DecodeMode, SimReport, ToyModel};

use super::{plan_from_profile, toy_profile};
use crate::config::{check_squeeze_ratio, ModelConfig, PolicyArgs};
use crate::error::{CliError, CliResult};
use crate::manifest::{read_text, write_json_with_manifest, write_sidecar, write_text, RunManifest};
use crate::{BudgetArgs, OutArgs};

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Toy-model config.
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Budget plan from `squeeze plan`. Without one the plan is derived from
    /// this run's own prefill using --b-init/--budget and --squeeze-ratio.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[command(flatten)]
    pub budget: BudgetArgs,
    #[arg(long, default_value_t = DEFAULT_SQUEEZE_RATIO)]
    pub squeeze_ratio: f64,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// squeeze, uniform or full.
    #[arg(long, default_value = "squeeze")]
    pub mode: DecodeMode,
    /// Overrides the config's gen_len.
    #[arg(long)]
    pub gen_len: Option<usize>,
    /// File stem of the report; defaults to `report-<mode>`.
    #[arg(long)]
    pub label: Option<String>,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn run(a: &SimulateArgs, args: &[String]) -> CliResult<()> {
    let mut manifest = RunManifest::new("simulate", args);
    let mut cfg = ModelConfig::load(&a.config, a.seed)?;
    if let Some(g) = a.gen_len {
        cfg.run.sim.gen_len = g;
    }
    manifest.config_paths.push(a.config.clone());
    manifest.seed = Some(cfg.run.sim.seed);
    let policy = a.policy.resolve()?;
    let model = ToyModel::build(&cfg.toy_spec())?;

    let plan = match (&a.plan, a.budget.resolve(cfg.run.sim.prompt_len)?) {
        (Some(path), _) => {
            manifest.inputs.push(path.clone());
            Some(BudgetPlan::from_json(&read_text(path)?).map_err(|e| CliError::read(path, e))?)
        }
        (None, Some(b_init)) => {
            let ratio = check_squeeze_ratio(a.squeeze_ratio)?;
            Some(plan_from_profile(&toy_profile(&model, &cfg)?, b_init, ratio)?)
        }
        (None, None) if a.mode == DecodeMode::Full => None,
        (None, None) => {
            return Err(CliError::Usage(format!(
                "{} mode needs --plan, --b-init or --budget",
                a.mode.name()
            )))
        }
    };

    let out = simulate_decode(&model, &cfg.run.sim, plan.as_ref(), &policy, a.mode)?;
    let label = a.label.clone().unwrap_or_else(|| format!("report-{}", a.mode.name()));
    let json_path = a.out.out_dir.join(format!("{label}.json"));
    let csv_path = a.out.out_dir.join(format!("{label}.csv"));
    manifest.outputs.extend([json_path.clone(), csv_path.clone()]);
    write_json_with_manifest(&json_path, &out.report, &manifest)?;
    write_report_csv(&csv_path, &out.report)?;
    write_sidecar(&csv_path, &manifest)
}

pub fn write_report_csv(path: &Path, report: &SimReport) -> CliResult<()> {
    write_csv(path, report.csv_rows())
}

pub(crate) fn write_csv<R: Serialize>(path: &Path, rows: impl IntoIterator<Item = R>) -> CliResult<()> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for row in rows {
        w.serialize(row).map_err(|e| CliError::write(path, e))?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::write(path, e))?;
    write_text(path, &String::from_utf8(bytes).expect("csv output is utf-8"))
}
