use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use fedka::config::{load_config, ConfigError, ExperimentConfig};
use fedka::data::write_dataset_dir;
use fedka::experiment::{load_domains, replicate_seed, run_experiment, sweep, ExperimentError};
use fedka::federation::VariantTag;
use fedka::metrics::dump_features;
use fedka::nn::Model;

#[derive(Parser)]
#[command(name = "fedka", version, about = "Federated knowledge-alignment simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat TOML config; absent keys take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed (overrides the config file).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (overrides the config file).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run every replicate of one variant.
    Run {
        #[command(flatten)]
        common: Common,
        /// Variant tag (overrides the config file).
        #[arg(long)]
        variant: Option<String>,
    },
    /// Run several variants from the same seed and write comparison.csv.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated variant tags; default is all seven.
        #[arg(long, value_delimiter = ',')]
        variant: Vec<String>,
    },
    /// Write the configured domains as CSV files plus a manifest.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Replicate whose synthetic data to write.
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
    /// Encode the configured domains with a saved model.
    DumpFeatures {
        #[command(flatten)]
        common: Common,
        /// Model JSON written by `run`.
        #[arg(long)]
        model: PathBuf,
        #[arg(long, default_value_t = 0)]
        replicate: usize,
    },
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        Failure::Runtime(e.to_string())
    }
}

fn load(common: &Common) -> Result<ExperimentConfig, Failure> {
    let mut cfg = match &common.config {
        Some(p) => load_config(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    if let Some(o) = &common.out {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn parse_variant(s: &str) -> Result<VariantTag, Failure> {
    s.parse().map_err(|_| Failure::Config(format!("key `variant`: unknown variant `{s}`")))
}

fn runtime<E: std::fmt::Display>(path: &Path) -> impl FnOnce(E) -> Failure + '_ {
    move |e| Failure::Runtime(format!("{}: {e}", path.display()))
}

fn execute(cli: Cli) -> Result<(), Failure> {
    match cli.command {
        Command::Run { common, variant } => {
            let mut cfg = load(&common)?;
            if let Some(v) = variant {
                cfg.variant = parse_variant(&v)?;
            }
            let s = run_experiment(&cfg)?;
            println!(
                "{}: max TTA {:.4} ± {:.4} over {} replicates",
                s.variant, s.max_tta_mean, s.max_tta_std, s.replicates
            );
        }
        Command::Sweep { common, variant } => {
            let cfg = load(&common)?;
            let tags = if variant.is_empty() {
                VariantTag::ALL.to_vec()
            } else {
                variant.iter().map(|v| parse_variant(v)).collect::<Result<_, _>>()?
            };
            for s in sweep(&cfg, &tags)? {
                println!("{:<12} {:.4} ± {:.4}", s.variant, s.max_tta_mean, s.max_tta_std);
            }
        }
        Command::GenData { common, replicate } => {
            let cfg = load(&common)?;
            let domains = load_domains(&cfg, replicate)?;
            let manifest = write_dataset_dir(&domains.all(), &cfg.output_dir)
                .map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("wrote {} (seed {})", manifest.display(), replicate_seed(cfg.seed, replicate));
        }
        Command::DumpFeatures { common, model, replicate } => {
            let cfg = load(&common)?;
            let text = std::fs::read_to_string(&model).map_err(runtime(&model))?;
            let m: Model = serde_json::from_str(&text).map_err(runtime(&model))?;
            let domains = load_domains(&cfg, replicate)?;
            std::fs::create_dir_all(&cfg.output_dir).map_err(runtime(&cfg.output_dir))?;
            let out = cfg.output_dir.join("features.csv");
            dump_features(&m.encoder, &domains.all(), &out).map_err(|e| Failure::Runtime(e.to_string()))?;
            println!("wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}
