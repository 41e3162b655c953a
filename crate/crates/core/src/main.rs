use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::LevelFilter;

use protodiff::harness::{self, ExperimentConfig, Run};
use protodiff::prototypes::HeadKind;
use protodiff::{Error, Result};

#[derive(Parser, Debug)]
#[command(name = "protodiff", version, about = "Mask-conditioned diffusion with prototype explanations")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Experiment configuration (INI).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Restrict to one prototype head.
    #[arg(long, global = true)]
    head: Option<HeadKind>,

    /// Number of images to generate (sample only).
    #[arg(long, global = true)]
    count: Option<usize>,

    /// Output directory, overriding `output.dir`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Seed, overriding `data.seed`.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Comma-separated generated image ids (explain only).
    #[arg(long, global = true, value_delimiter = ',')]
    ids: Vec<String>,

    /// Log progress to stderr.
    #[arg(long, short, global = true)]
    verbose: bool,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    GenData,
    TrainDiffusion,
    Sample,
    Trajectory,
    TrainProto,
    Explain,
    Evaluate,
    Compare,
}

fn run(cli: &Cli) -> Result<String> {
    let path = cli.config.as_ref().ok_or_else(|| Error::Config("--config <path> is required".into()))?;
    let config = ExperimentConfig::load(path)?;
    let run = Run::new(config, cli.out.clone(), cli.seed);
    match cli.command {
        Command::GenData => harness::cmd_gen_data(&run),
        Command::TrainDiffusion => harness::cmd_train_diffusion(&run),
        Command::Sample => harness::cmd_sample(&run, cli.count),
        Command::Trajectory => harness::cmd_trajectory(&run),
        Command::TrainProto => harness::cmd_train_proto(&run, cli.head),
        Command::Explain => harness::cmd_explain(&run, cli.head, &cli.ids),
        Command::Evaluate => harness::cmd_evaluate(&run),
        Command::Compare => harness::cmd_compare(&run),
    }
}

fn category(e: &Error) -> &'static str {
    match harness::exit_code(e) {
        harness::EXIT_CONFIG => "config error",
        harness::EXIT_MISSING_PREREQUISITE => "missing prerequisite",
        harness::EXIT_NUMERIC => "numeric failure",
        harness::EXIT_IO => "i/o error",
        _ => "error",
    }
}

fn main() -> ExitCode {
    let cli = Cli::try_parse().unwrap_or_else(|e| e.exit());
    env_logger::Builder::new()
        .filter_level(if cli.verbose { LevelFilter::Info } else { LevelFilter::Warn })
        .format_timestamp(None)
        .init();
    match run(&cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("protodiff: {}: {e}", category(&e));
            ExitCode::from(harness::exit_code(&e) as u8)
        }
    }
}
