// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use factlab_cli::stages::{self, Workspace};
use factlab_cli::{report, CliError, PipelineConfig, Result};

#[derive(Parser)]
#[command(name = "factlab", version, about = "Memorized versus in-context recall in small transformers")]
struct Cli {
    /// Pipeline config (TOML).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the config seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; overrides `out` in the config.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Rerun stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the world and training corpus.
    GenCorpus,
    /// Percentile frequency bins for every criterion.
    FreqBins,
    /// Train one model, or every configured model.
    Train(ModelArg),
    /// Run the behavior suite and binned summaries.
    Eval(ModelArg),
    /// Selection set, attribution map and head selection.
    Attribute(ModelArg),
    /// Alpha sweeps for the selected heads on the tuning set.
    SweepAlpha(ModelArg),
    /// Apply the tuned interventions to held-out prompts.
    Intervene(ModelArg),
    /// Apply the tuned interventions to the second relation.
    Generalize(ModelArg),
    /// OV decompositions and decoded singular vectors.
    Svd(ModelArg),
    /// Build the report from existing artifacts.
    Report,
    /// Every stage in order, then the report.
    Pipeline,
}

#[derive(clap::Args)]
struct ModelArg {
    /// Model name from the config; all models when omitted.
    #[arg(long)]
    model: Option<String>,
}

fn load_config(cli: &Cli) -> Result<(PipelineConfig, PathBuf)> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    let mut config = PipelineConfig::load(path)?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let dir = cli
        .out
        .clone()
        .or_else(|| config.out.clone())
        .ok_or_else(|| CliError::Config("no output directory: pass --out or set `out` in the config".into()))?;
    Ok((config, dir))
}

fn workspace(cli: &Cli) -> Result<Workspace> {
    let (config, dir) = load_config(cli)?;
    Workspace::open(config, dir, cli.force)
}

fn per_model(cli: &Cli, arg: &ModelArg, f: fn(&mut Workspace, &str) -> Result<stages::StageOutcome>) -> Result<()> {
    let (config, dir) = load_config(cli)?;
    if let Some(name) = &arg.model {
        config.model(name)?;
    }
    let mut ws = Workspace::open(config, dir, cli.force)?;
    for m in ws.model_names(arg.model.as_deref())? {
        f(&mut ws, &m)?;
    }
    Ok(())
}

fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenCorpus => stages::gen_corpus(&mut workspace(cli)?).map(drop),
        Command::FreqBins => stages::freq_bins(&mut workspace(cli)?).map(drop),
        Command::Train(a) => per_model(cli, a, stages::train_model),
        Command::Eval(a) => per_model(cli, a, stages::eval_model),
        Command::Attribute(a) => per_model(cli, a, stages::attribute_model),
        Command::SweepAlpha(a) => per_model(cli, a, stages::sweep_model),
        Command::Intervene(a) => per_model(cli, a, stages::intervene_model),
        Command::Generalize(a) => per_model(cli, a, stages::transfer_model),
        Command::Svd(a) => per_model(cli, a, stages::svd_model),
        Command::Report => {
            let dir = match &cli.out {
                Some(d) => d.clone(),
                None => workspace(cli)?.dir,
            };
            if !dir.is_dir() {
                return Err(CliError::Config(format!("{} is not a directory", dir.display())));
            }
            let files = report::write_report(&dir, &dir.join("report"))?;
            log::info!("report: wrote {} files", files.len());
            Ok(())
        }
        Command::Pipeline => stages::pipeline(&mut workspace(cli)?),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
