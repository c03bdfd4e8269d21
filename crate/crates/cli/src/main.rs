use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use elastron::pipeline::{run_stage, Overrides, PipelineConfig, Stage};

#[derive(Parser)]
#[command(name = "elastron", version, about = "Convert a small transformer into a routed elastic model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML pipeline config; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed for every stage; required unless the config sets one.
    #[arg(long)]
    seed: Option<u64>,
    /// Normalized budget for `extract`.
    #[arg(long)]
    budget: Option<f64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the dense model.
    Pretrain(Common),
    /// Score heads and neurons and reorder them by importance.
    Sort(Common),
    /// Continue training on the full model plus sampled sub-models.
    ElasticCt(Common),
    /// Build the per-slot cost table.
    BuildLut(Common),
    /// Train budget-conditioned routers against the surrogate.
    TrainRouters(Common),
    /// Fine-tune model and routers together.
    Finetune(Common),
    /// Extract the dense sub-model for `--budget`.
    Extract(Common),
    /// Evaluate routed sub-models at each budget.
    Eval(Common),
    /// Sweep budgets and random selections for the cost-loss frontier.
    Pareto(Common),
    /// Fit the scaling law to the Pareto points.
    FitLaw(Common),
    /// Collect every stage output into one CSV.
    Report(Common),
    /// Every stage in order.
    All(Common),
    /// Print the default config as TOML.
    DefaultConfig,
}

fn stages(cmd: &Command) -> Option<(Vec<Stage>, &Common)> {
    let one = |s: Stage, c| Some((vec![s], c));
    match cmd {
        Command::Pretrain(c) => one(Stage::Pretrain, c),
        Command::Sort(c) => one(Stage::Sort, c),
        Command::ElasticCt(c) => one(Stage::ElasticCt, c),
        Command::BuildLut(c) => one(Stage::BuildLut, c),
        Command::TrainRouters(c) => one(Stage::TrainRouters, c),
        Command::Finetune(c) => one(Stage::Finetune, c),
        Command::Extract(c) => one(Stage::Extract, c),
        Command::Eval(c) => one(Stage::Eval, c),
        Command::Pareto(c) => one(Stage::Pareto, c),
        Command::FitLaw(c) => one(Stage::FitLaw, c),
        Command::Report(c) => one(Stage::Report, c),
        Command::All(c) => Some((Stage::ALL.to_vec(), c)),
        Command::DefaultConfig => None,
    }
}

fn run(cli: Cli) -> elastron::Result<()> {
    let Some((todo, common)) = stages(&cli.command) else {
        print!("{}", PipelineConfig::default().to_toml()?);
        return Ok(());
    };
    let base = match &common.config {
        Some(p) => PipelineConfig::load(p)?,
        None => PipelineConfig::default(),
    };
    let cfg = base.effective(&Overrides {
        seed: common.seed,
        output_dir: common.out.clone(),
        budget: common.budget,
    })?;
    for stage in todo {
        eprintln!("[{}] running", stage.as_str());
        for path in run_stage(&cfg, stage)? {
            println!("{}\t{}", stage.as_str(), path.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
