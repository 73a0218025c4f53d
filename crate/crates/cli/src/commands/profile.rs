use std::path::PathBuf;

use clap::Args;
use squeeze_core::profiler::{load_trace, profile_layers, save_trace};
use squeeze_core::simulator::{prefill, ToyModel};

use crate::config::ModelConfig;
use crate::error::{CliError, CliResult};
use crate::manifest::{write_json_with_manifest, RunManifest};
use crate::OutArgs;

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// `SQZTRC01` trace file (full or compact).
    #[arg(long, conflicts_with = "config", required_unless_present = "config")]
    pub trace: Option<PathBuf>,
    /// Toy-model config; its seeded prompt is prefilled and profiled.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the toy prefill trace here.
    #[arg(long, requires = "config")]
    pub save_trace: Option<PathBuf>,
    /// Save the trace in compact (cosines only) form.
    #[arg(long, requires = "save_trace")]
    pub compact: bool,
    #[command(flatten)]
    pub out: OutArgs,
}

pub fn run(a: &ProfileArgs, args: &[String]) -> CliResult<()> {
    let mut manifest = RunManifest::new("profile", args);
    let out_path = a.out.out_dir.join("profile.json");

    let mut profile = match (&a.trace, &a.config) {
        (Some(path), _) => {
            let trace = load_trace(path).map_err(|e| CliError::read(path, e))?;
            manifest.inputs.push(path.clone());
            let mut p = profile_layers(&trace).map_err(|e| CliError::read(path, e))?;
            p.source = Some(path.display().to_string());
            p
        }
        (None, Some(path)) => {
            let cfg = ModelConfig::load(path, a.seed)?;
            manifest.config_paths.push(path.clone());
            manifest.seed = Some(cfg.run.sim.seed);
            let model = ToyModel::build(&cfg.toy_spec())?;
            let prompt = model.spec().prompt(cfg.run.sim.prompt_len);
            let pre = prefill(&model, &prompt, &mut |_| {})?;
            if let Some(dest) = &a.save_trace {
                let trace = if a.compact { pre.trace.to_compact()? } else { pre.trace.clone() };
                save_trace(&trace, dest).map_err(|e| CliError::write(dest, e))?;
                manifest.outputs.push(dest.clone());
            }
            let mut p = profile_layers(&pre.trace)?;
            p.source = Some(format!("toy:seed={}", cfg.run.sim.seed));
            p
        }
        (None, None) => return Err(CliError::Usage("need --trace or --config".into())),
    };
    profile.token_cosines = None;
    manifest.outputs.push(out_path.clone());
    write_json_with_manifest(&out_path, &profile, &manifest)
}
