use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use pwc_moe::harness::{self, ExperimentConfig, ProbeOptions, RunOptions};
use pwc_moe::Error;

/// Privacy-aware MoE with wireless token offloading: training, predictor
/// fitting, evaluation and sweeps.
#[derive(Debug, Parser)]
#[command(name = "pwcmoe", version)]
struct Cli {
    /// Configuration file (`key = value` lines); built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory for checkpoints, CSV files and the run manifest.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,

    /// Also write a gnuplot script next to each plottable CSV.
    #[arg(long, global = true)]
    emit_gnuplot: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the MoE classifier.
    Train,
    /// Fit the importance predictor to the trained model's aggregation weights.
    TrainPredictor,
    /// Full-token accuracy, optional budgeted accuracy and the oracle comparison.
    Eval,
    /// Accuracy per uploaded-token budget for predictor top-k and random selection.
    SweepBudget,
    /// Token budget and tokens needed for peak accuracy per client distance.
    SweepDistance,
    /// Tokens needed to reach each target accuracy.
    TargetAccuracy,
    /// Uplink budget at one distance.
    ChannelProbe {
        /// Client to base-station distance in meters.
        #[arg(long)]
        distance: Option<f64>,
        /// Use unit shadowing and fading instead of random draws.
        #[arg(long)]
        deterministic: bool,
    },
}

fn user_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_)
            | Error::ConfigLine { .. }
            | Error::Csv { .. }
            | Error::UnseenLabel { .. }
            | Error::Io { .. }
            | Error::Checkpoint { .. }
            | Error::Domain(_)
            | Error::InstanceTooLarge { .. }
    )
}

fn run(cli: Cli) -> Result<String, Error> {
    let mut cfg = match &cli.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let opts = RunOptions {
        out_dir: cli.out,
        emit_gnuplot: cli.emit_gnuplot,
    };
    let report = match cli.command {
        Command::Train => harness::cmd_train(&cfg, &opts)?,
        Command::TrainPredictor => harness::cmd_train_predictor(&cfg, &opts)?,
        Command::Eval => harness::cmd_eval(&cfg, &opts)?,
        Command::SweepBudget => harness::cmd_sweep_budget(&cfg, &opts)?,
        Command::SweepDistance => harness::cmd_sweep_distance(&cfg, &opts)?,
        Command::TargetAccuracy => harness::cmd_target_accuracy(&cfg, &opts)?,
        Command::ChannelProbe { distance, deterministic } => {
            harness::cmd_channel_probe(&cfg, &opts, &ProbeOptions { distance, deterministic })?
        }
    };
    let mut text = report.summary;
    for f in &report.files {
        text.push_str(&format!("\nwrote {}", f.display()));
    }
    Ok(text)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(summary) => {
            println!("{summary}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if user_error(&e) { 1 } else { 2 })
        }
    }
}
