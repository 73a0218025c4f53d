use std::path::PathBuf;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use clap::Args;
use serde::Serialize;
use squeeze_core::eviction::EvictionPolicy;
use squeeze_core::grouping::{allocate_budgets, budget_from_fraction, cluster_layers, LayerGroups, DEFAULT_SQUEEZE_RATIO};
use squeeze_core::kv_model::SimConfig;
use squeeze_core::simulator::{simulate_decode, DecodeMode, ToyModel};
use squeeze_core::Error;

use super::simulate::write_csv;
use super::toy_profile;
use crate::config::{check_squeeze_ratio, ModelConfig, PolicyArgs};
use crate::error::{CliError, CliResult};
use crate::manifest::{write_sidecar, RunManifest};
use crate::{BudgetArgs, OutArgs};

const DEFAULT_RATIOS: [f64; 10] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
const DEFAULT_BUDGET_FRACTION: f64 = 0.2;

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    #[command(flatten)]
    pub policy: PolicyArgs,
    /// Squeeze ratios to try (default 0.1,0.2,...,1.0).
    #[arg(long, value_delimiter = ',', conflicts_with = "budgets")]
    pub squeeze_ratios: Vec<f64>,
    /// Budget fractions of the prompt length to try at a fixed squeeze ratio.
    #[arg(long, value_delimiter = ',')]
    pub budgets: Vec<f64>,
    /// Base budget for a ratio sweep (default: 20% of the prompt).
    #[command(flatten)]
    pub base: BudgetArgs,
    /// Squeeze ratio for a budget sweep.
    #[arg(long, default_value_t = DEFAULT_SQUEEZE_RATIO)]
    pub squeeze_ratio: f64,
    #[arg(long)]
    pub gen_len: Option<usize>,
    /// Concurrent simulations.
    #[arg(long, default_value_t = 4)]
    pub jobs: usize,
    #[command(flatten)]
    pub out: OutArgs,
}

/// One sweep point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub squeeze_ratio: f64,
    pub b_init: usize,
    pub g3_layers: usize,
    pub budget_sum: usize,
    pub global_budget: usize,
    pub conserved: bool,
    pub status: String,
    pub peak_bytes: Option<u64>,
    pub uniform_peak_bytes: Option<u64>,
    pub full_peak_bytes: u64,
    pub mean_mass_retained: Option<f64>,
    pub min_mass_retained: Option<f64>,
    pub uniform_mean_mass_retained: Option<f64>,
}

pub fn run(a: &SweepArgs, args: &[String]) -> CliResult<()> {
    let mut manifest = RunManifest::new("sweep", args);
    let mut cfg = ModelConfig::load(&a.config, a.seed)?;
    if let Some(g) = a.gen_len {
        cfg.run.sim.gen_len = g;
    }
    manifest.config_paths.push(a.config.clone());
    manifest.seed = Some(cfg.run.sim.seed);
    let policy = a.policy.resolve()?;
    if a.jobs == 0 {
        return Err(CliError::Usage("--jobs must be at least 1".into()));
    }

    let prompt_len = cfg.run.sim.prompt_len;
    let points: Vec<(f64, usize)> = if a.budgets.is_empty() {
        let b_init = match a.base.resolve(prompt_len)? {
            Some(b) => b,
            None => budget_from_fraction(DEFAULT_BUDGET_FRACTION, prompt_len)?,
        };
        let ratios = if a.squeeze_ratios.is_empty() {
            DEFAULT_RATIOS.to_vec()
        } else {
            a.squeeze_ratios.clone()
        };
        ratios
            .into_iter()
            .map(|r| check_squeeze_ratio(r).map(|r| (r, b_init)))
            .collect::<CliResult<_>>()?
    } else {
        let r = check_squeeze_ratio(a.squeeze_ratio)?;
        a.budgets
            .iter()
            .map(|&f| {
                budget_from_fraction(f, prompt_len)
                    .map(|b| (r, b))
                    .map_err(|e| CliError::Usage(e.to_string()))
            })
            .collect::<CliResult<_>>()?
    };

    let model = ToyModel::build(&cfg.toy_spec())?;
    let groups = cluster_layers(&toy_profile(&model, &cfg)?)?;
    let full = simulate_decode(&model, &cfg.run.sim, None, &policy, DecodeMode::Full)?;
    let full_peak = full.report.peak_bytes;

    let rows = fan_out(&points, a.jobs, |&(ratio, b_init)| {
        sweep_point(&model, &cfg.run.sim, &groups, &policy, ratio, b_init, full_peak)
    })?;

    let out_path = a.out.out_dir.join("sweep.csv");
    manifest.outputs.push(out_path.clone());
    write_csv(&out_path, rows)?;
    write_sidecar(&out_path, &manifest)
}

/// Runs `f` over `items` on at most `jobs` threads; results keep item order.
fn fan_out<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> CliResult<R> + Sync) -> CliResult<Vec<R>> {
    let next = AtomicUsize::new(0);
    let slots: Vec<Mutex<Option<CliResult<R>>>> = items.iter().map(|_| Mutex::new(None)).collect();
    std::thread::scope(|s| {
        for _ in 0..jobs.min(items.len()) {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                if i >= items.len() {
                    break;
                }
                *slots[i].lock().unwrap() = Some(f(&items[i]));
            });
        }
    });
    slots
        .into_iter()
        .map(|m| m.into_inner().unwrap().expect("every slot filled"))
        .collect()
}

fn sweep_point(
    model: &ToyModel,
    run: &SimConfig,
    groups: &LayerGroups,
    policy: &EvictionPolicy,
    ratio: f64,
    b_init: usize,
    full_peak: u64,
) -> CliResult<SweepRow> {
    let n = model.shape().n_layer;
    let global_budget = n * b_init;
    let mut row = SweepRow {
        squeeze_ratio: ratio,
        b_init,
        g3_layers: groups.g3.len(),
        budget_sum: 0,
        global_budget,
        conserved: false,
        status: "ok".into(),
        peak_bytes: None,
        uniform_peak_bytes: None,
        full_peak_bytes: full_peak,
        mean_mass_retained: None,
        min_mass_retained: None,
        uniform_mean_mass_retained: None,
    };
    let plan = match allocate_budgets(groups, b_init, ratio) {
        Ok(p) => p,
        Err(Error::Allocation) => {
            row.status = "allocation_error".into();
            return Ok(row);
        }
        Err(e) => return Err(e.into()),
    };
    row.budget_sum = plan.total();
    row.conserved = row.budget_sum <= global_budget && row.budget_sum + n > global_budget;

    let outcome = |mode| match simulate_decode(model, run, Some(&plan), policy, mode) {
        Ok(o) => Ok(Some(o.report)),
        Err(Error::BudgetFloor { .. }) => Ok(None),
        Err(e) => Err(CliError::from(e)),
    };
    match outcome(DecodeMode::Squeeze)? {
        Some(r) => {
            row.peak_bytes = Some(r.peak_bytes);
            row.mean_mass_retained = Some(r.mean_mass_retained());
            row.min_mass_retained = Some(r.min_mass_retained());
        }
        None => row.status = "budget_floor".into(),
    }
    if let Some(r) = outcome(DecodeMode::Uniform)? {
        row.uniform_peak_bytes = Some(r.peak_bytes);
        row.uniform_mean_mass_retained = Some(r.mean_mass_retained());
    }
    Ok(row)
}
