use std::path::PathBuf;

use clap::Args;
use serde::Serialize;
use squeeze_core::simulator::{DecodeMode, SimReport};

use super::simulate::write_csv;
use crate::error::{CliError, CliResult};
use crate::manifest::{read_text, write_sidecar, RunManifest};
use crate::OutArgs;

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Report JSON files written by `squeeze simulate`.
    #[arg(required = true)]
    pub reports: Vec<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Serialize)]
struct ComparisonRow {
    label: String,
    mode: &'static str,
    policy: &'static str,
    b_init: Option<usize>,
    squeeze_ratio: Option<f64>,
    peak_bytes: u64,
    final_bytes: u64,
    mean_step_bytes: f64,
    mean_mass_retained: f64,
    min_mass_retained: f64,
    /// `1 - peak / peak(full)` against a full-cache report of the same run.
    peak_savings_vs_full: Option<f64>,
}

#[derive(Debug, Serialize)]
struct SeriesRow<'a> {
    step: usize,
    label: &'a str,
    mode: &'static str,
    bytes: u64,
    bytes_per_sequence: u64,
}

fn same_run(a: &SimReport, b: &SimReport) -> bool {
    let (x, y) = (&a.config, &b.config);
    x.shape == y.shape && x.prompt_len == y.prompt_len && x.gen_len == y.gen_len && x.batch == y.batch && x.seed == y.seed
}

pub fn run(a: &ReportArgs, args: &[String]) -> CliResult<()> {
    let mut manifest = RunManifest::new("report", args);
    let mut loaded = Vec::new();
    for path in &a.reports {
        let report: SimReport = serde_json::from_str(&read_text(path)?).map_err(|e| CliError::read(path, e))?;
        let label = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        manifest.inputs.push(path.clone());
        loaded.push((label, report));
    }

    let comparison: Vec<ComparisonRow> = loaded
        .iter()
        .map(|(label, r)| {
            let full_peak = loaded
                .iter()
                .find(|(_, o)| o.config.mode == DecodeMode::Full && same_run(o, r))
                .map(|(_, o)| o.peak_bytes);
            let series = r.byte_series();
            ComparisonRow {
                label: label.clone(),
                mode: r.config.mode.name(),
                policy: r.config.policy.name(),
                b_init: r.config.b_init,
                squeeze_ratio: r.config.squeeze_ratio,
                peak_bytes: r.peak_bytes,
                final_bytes: *series.last().unwrap_or(&0),
                mean_step_bytes: series.iter().sum::<u64>() as f64 / series.len().max(1) as f64,
                mean_mass_retained: r.mean_mass_retained(),
                min_mass_retained: r.min_mass_retained(),
                peak_savings_vs_full: full_peak.map(|f| 1.0 - r.peak_bytes as f64 / f as f64),
            }
        })
        .collect();
    let series: Vec<SeriesRow<'_>> = loaded
        .iter()
        .flat_map(|(label, r)| {
            r.steps.iter().map(move |s| SeriesRow {
                step: s.step,
                label,
                mode: r.config.mode.name(),
                bytes: s.bytes,
                bytes_per_sequence: s.bytes / r.config.batch as u64,
            })
        })
        .collect();

    let cmp_path = a.out.out_dir.join("comparison.csv");
    let series_path = a.out.out_dir.join("memory_series.csv");
    manifest.outputs.extend([cmp_path.clone(), series_path.clone()]);
    write_csv(&cmp_path, comparison)?;
    write_csv(&series_path, series)?;
    write_sidecar(&cmp_path, &manifest)?;
    write_sidecar(&series_path, &manifest)
}
