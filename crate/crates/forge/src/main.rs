use std::fs::OpenOptions;
use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use forge::config::PipelineConfig;
use forge::pipeline::{
    ci_from_accuracies, load_dataset, read_accuracies, run_all, stage_build, stage_ci, stage_eval, stage_export, stage_prune,
    stage_quantize, stage_train, ForgeError, Workspace, INT8_FILE,
};
use serde::Serialize;

#[derive(Parser)]
#[command(name = "forge", version, about = "Train, compress and export ACDNet models")]
struct Cli {
    #[command(subcommand)]
    stage: Stage,
    /// Pipeline config (TOML)
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config seed
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the config output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Stage {
    /// Build the network and write init.acdf
    Build,
    /// Train from init.acdf to base.acdf
    Train,
    /// Prune base.acdf and retrain to pruned.acdf
    Prune,
    /// Quantize the pruned (or base) model to int8.acdf
    Quantize,
    /// Emit C sources and test vectors from int8.acdf
    Export,
    /// Evaluate a container on the test fold
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// 95% confidence interval from a bootstrap or an accuracy list
    Ci {
        #[arg(long)]
        model: Option<PathBuf>,
        /// One accuracy per line
        #[arg(long, conflicts_with = "model")]
        accuracies: Option<PathBuf>,
    },
    /// All stages from build to export
    Run,
}

fn print_json<T: Serialize>(v: &T) {
    println!("{}", serde_json::to_string_pretty(v).expect("report serializes"));
}

fn log_config(ws: &Workspace, stage: &str) -> Result<(), ForgeError> {
    let path = ws.path("forge.log");
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|source| ForgeError::Io {
            path: path.display().to_string(),
            source,
        })?;
    writeln!(f, "# stage: {stage}\n{}", ws.cfg.to_toml()).map_err(|source| ForgeError::Io {
        path: path.display().to_string(),
        source,
    })
}

fn run(cli: Cli) -> Result<(), ForgeError> {
    if let Stage::Ci {
        accuracies: Some(path), ..
    } = &cli.stage
    {
        let accs = read_accuracies(path)?;
        if accs.is_empty() {
            return Err(ForgeError::Usage(format!("{}: no accuracies", path.display())));
        }
        print_json(&ci_from_accuracies(&accs));
        return Ok(());
    }
    let config = cli.config.ok_or_else(|| ForgeError::Usage("--config is required".into()))?;
    let mut cfg = PipelineConfig::load(&config)?;
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = cli.out {
        cfg.out = out;
    }
    let ws = Workspace::new(cfg)?;
    let name = match &cli.stage {
        Stage::Build => "build",
        Stage::Train => "train",
        Stage::Prune => "prune",
        Stage::Quantize => "quantize",
        Stage::Export => "export",
        Stage::Eval { .. } => "eval",
        Stage::Ci { .. } => "ci",
        Stage::Run => "run",
    };
    log_config(&ws, name)?;
    if let Stage::Run = cli.stage {
        print_json(&run_all(&ws)?);
        return Ok(());
    }
    let ds = load_dataset(&ws.cfg)?;
    let model = |m: &Option<PathBuf>| m.clone().unwrap_or_else(|| ws.path(INT8_FILE));
    match &cli.stage {
        Stage::Build => print_json(&stage_build(&ws, &ds)?),
        Stage::Train => print_json(&stage_train(&ws, &ds)?),
        Stage::Prune => print_json(&stage_prune(&ws, &ds)?),
        Stage::Quantize => print_json(&stage_quantize(&ws, &ds)?),
        Stage::Export => print_json(&stage_export(&ws, &ds)?),
        Stage::Eval { model: m } => print_json(&stage_eval(&ws, &ds, &model(m))?),
        Stage::Ci { model: m, .. } => print_json(&stage_ci(&ws, &ds, &model(m))?),
        Stage::Run => unreachable!("handled above"),
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("forge: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
