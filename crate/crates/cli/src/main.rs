mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "agcnet", version, about = "Adaptive graph convolution traffic forecasting")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// TOML run configuration; omitted keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the `seed` key of the configuration.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic diffusion dataset.
    Synth {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model and write checkpoints, history and a test report.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Start from the parameters of this checkpoint.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Evaluate a checkpoint next to the persistence baseline.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Comma-separated forecast steps (default: from the checkpoint config).
        #[arg(long, value_delimiter = ',')]
        horizons: Option<Vec<usize>>,
    },
    /// Check analytic gradients against finite differences on a tiny instance.
    Gradcheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Central-difference step.
        #[arg(long, default_value_t = agcnet::training::GRADCHECK_STEP)]
        step: f64,
        /// Double the analytic gradient of this parameter before comparing.
        #[arg(long)]
        corrupt: Option<String>,
    },
    /// Train each ablation setting over a range of seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Data directory; the synthetic dataset from the config when omitted.
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 3)]
        seeds: u64,
        /// Include the adjacency-kernel settings.
        #[arg(long)]
        adjacency: bool,
        /// Include periodic-channel variants.
        #[arg(long)]
        periodic: bool,
    },
    /// Welch t-test on the test MAEs of two groups of training runs.
    Ttest {
        /// Run directory, or a directory of run directories.
        #[arg(long = "group-a")]
        group_a: PathBuf,
        #[arg(long = "group-b")]
        group_b: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { common, out } => commands::synth(&common, &out),
        Command::Train {
            common,
            data,
            out,
            resume,
        } => commands::train(&common, &data, &out, resume.as_deref()),
        Command::Eval {
            checkpoint,
            data,
            out,
            horizons,
        } => commands::eval(&checkpoint, &data, out.as_deref(), horizons),
        Command::Gradcheck {
            common,
            out,
            step,
            corrupt,
        } => commands::gradcheck(&common, out.as_deref(), step, corrupt.as_deref()),
        Command::Ablate {
            common,
            data,
            out,
            seeds,
            adjacency,
            periodic,
        } => commands::ablate(&common, data.as_deref(), &out, seeds, adjacency, periodic),
        Command::Ttest { group_a, group_b, out } => commands::ttest(&group_a, &group_b, out.as_deref()),
    };
    match result {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(2),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
