//! `sparse-vrnn`: synthesize data, train, predict and evaluate.

mod commands;
mod config;
mod render;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

/// Configuration or validation failure; exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "sparse-vrnn", version, about = "Stochastic sparse depth sequence prediction")]
struct Cli {
    /// Print the annotated configuration schema and exit.
    #[arg(long)]
    print_schema: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration file (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides every seed in the configuration.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; for `synth` the dataset directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum NetChoice {
    Depth,
    Mask,
    Both,
}

#[derive(Copy, Clone, Debug, PartialEq, Eq, ValueEnum)]
pub enum PhaseChoice {
    NextFrame,
    JointAutoregressive,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a seeded synthetic dataset of 16-bit depth images.
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train one phase and write checkpoints and loss reports.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        phase: Option<PhaseChoice>,
        #[arg(long, value_enum, default_value = "both")]
        net: NetChoice,
        #[arg(long)]
        epochs: Option<usize>,
        /// Continue from the phase's latest checkpoints.
        #[arg(long)]
        resume: bool,
        /// Start the joint phase without next-frame checkpoints.
        #[arg(long)]
        from_scratch: bool,
    },
    /// Roll out sampled futures of one drive and write them as images.
    Predict {
        #[command(flatten)]
        common: Common,
        /// Drive directory of 16-bit depth frames.
        #[arg(long)]
        input: PathBuf,
        /// Directory with depth_best.ckpt and mask_best.ckpt.
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        /// Also score the rollouts against the frames that follow the warmup.
        #[arg(long)]
        compare: bool,
    },
    /// Score rollouts on the validation split; writes a CSV and an SVG plot.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoints: Option<PathBuf>,
        /// Dataset split directory; defaults to the configured val/.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        horizon: Option<usize>,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if cli.print_schema {
        print!("{}", config::SCHEMA);
        return Ok(());
    }
    let Some(command) = cli.command else {
        return Err(UsageError("no command given; see --help".into()).into());
    };
    match command {
        Command::Synth { common } => commands::synth(&common),
        Command::Train {
            common,
            phase,
            net,
            epochs,
            resume,
            from_scratch,
        } => commands::train(&common, phase, net, epochs, resume, from_scratch),
        Command::Predict {
            common,
            input,
            checkpoints,
            horizon,
            samples,
            compare,
        } => commands::predict(&common, &input, checkpoints, horizon, samples, compare),
        Command::Eval {
            common,
            checkpoints,
            dataset,
            horizon,
            samples,
            jobs,
        } => commands::eval(&common, checkpoints, dataset, horizon, samples, jobs),
    }
}

fn is_usage(err: &anyhow::Error) -> bool {
    err.chain().any(|e| {
        e.downcast_ref::<UsageError>().is_some()
            || matches!(e.downcast_ref::<sparse_vrnn::Error>(), Some(sparse_vrnn::Error::Config(_)))
    })
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(if is_usage(&err) { 2 } else { 1 })
        }
    }
}
