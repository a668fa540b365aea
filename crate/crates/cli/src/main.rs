use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use led_cli::synth::{write_jsonl, SynthConfig};
use led_cli::{CliError, PipelineConfig, Runner, Stage};
use tracing_subscriber::EnvFilter;

#[derive(Parser)]
#[command(name = "led", version, about = "LED recommender pipeline and serving daemon")]
struct Cli {
    /// Pipeline configuration (JSON). Defaults apply to anything unset.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override a config field by dotted path, e.g. `train.loss=css`.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Rerun stages even when their inputs are unchanged.
    #[arg(long, global = true)]
    force: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Read the raw event log into a timeline set.
    Ingest,
    /// Partition users into train, validation and test.
    Split,
    /// Count co-occurrences and build the PMI matrix.
    Pmi,
    /// Factorize the PMI matrix into item embeddings.
    Rsvd,
    /// Fine-tune the model.
    Train,
    /// Build the ANN index and the serving artifacts.
    Index,
    /// Offline metrics for the model and the popularity baseline.
    Eval,
    /// Recall against the number of sampled negatives.
    Sweep,
    /// Run every offline stage in order.
    Pipeline,
    /// Serve recommendations over HTTP.
    Serve,
    /// Print the effective configuration.
    Config,
    /// Write a small synthetic event log in the JSONL ingest format.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 400)]
        users: usize,
        #[arg(long, default_value_t = 200)]
        items: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = PipelineConfig::load(cli.config.as_deref(), &cli.overrides)?;
    let stage = match cli.command {
        Command::Ingest => Stage::Ingest,
        Command::Split => Stage::Split,
        Command::Pmi => Stage::Pmi,
        Command::Rsvd => Stage::Rsvd,
        Command::Train => Stage::Train,
        Command::Index => Stage::Index,
        Command::Eval => Stage::Eval,
        Command::Sweep => Stage::Sweep,
        Command::Pipeline => {
            Runner::new(cfg, cli.force).pipeline()?;
            return Ok(());
        }
        Command::Serve => return led_cli::serve::run(&cfg),
        Command::Config => {
            println!("{}", serde_json::to_string_pretty(&cfg).expect("config serializes"));
            return Ok(());
        }
        Command::Synth { out, users, items, seed } => {
            let sc = SynthConfig { users, items, seed, clusters: SynthConfig::default().clusters.min(items.max(1)), ..Default::default() };
            let f = std::fs::File::create(&out).map_err(|e| CliError::io(&out, e))?;
            write_jsonl(&sc, std::io::BufWriter::new(f)).map_err(|e| CliError::io(&out, e))?;
            tracing::info!(path = %out.display(), users, items, "wrote synthetic events");
            return Ok(());
        }
    };
    Runner::new(cfg, cli.force).run(stage)?;
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .json()
        .with_writer(std::io::stderr)
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            tracing::error!(error = %e, "failed");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
