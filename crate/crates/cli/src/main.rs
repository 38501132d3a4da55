use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use histune_cli::compare::stats_table;
use histune_cli::config::defaults_help;
use histune_cli::{cmd_compare, cmd_query, cmd_run, CliError, MatrixSpec, Query, RunConfig, TunerKind};

#[derive(Parser)]
#[command(name = "histune", version, about = "History-aware γ tuning for a desk-scale multi-agent Q-learning run")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat key = value config file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Seed of the run (first seed for compare).
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one lifetime and write rewards.csv, history.htgl and config.toml.
    #[command(after_help = defaults_help())]
    Run {
        #[command(flatten)]
        common: Common,
        /// static | grid | random | history
        #[arg(long)]
        tuner: Option<String>,
        /// Route every component through the socket broker.
        #[arg(long)]
        tcp: bool,
    },
    /// Run tuner kinds × seeds and summarise per-episode rewards.
    #[command(after_help = defaults_help())]
    Compare {
        #[command(flatten)]
        common: Common,
        /// Tuner kinds, comma separated.
        #[arg(long, default_value = "static,grid,random,history", value_delimiter = ',')]
        tuner: Vec<String>,
        /// Number of consecutive seeds.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        /// Start every kind from each γ0 in 0.1..0.9.
        #[arg(long)]
        sweep: bool,
    },
    /// Query the history recorded in a commit log.
    Query {
        /// Path to history.htgl.
        log: PathBuf,
        /// best | trajectory | measurements | kind KIND | node ID | range FROM TO
        query: Vec<String>,
    },
}

fn load(common: &Common) -> Result<RunConfig, CliError> {
    let mut config = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = common.seed {
        config.seed = seed;
    }
    if let Some(out) = &common.out {
        config.out = out.clone();
    }
    Ok(config)
}

fn execute(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run { common, tuner, tcp } => {
            let mut config = load(&common)?;
            if let Some(t) = tuner {
                config.tuner = TunerKind::parse(&t)?;
            }
            config.tcp |= tcp;
            let a = cmd_run(&config)?;
            println!("wrote {} ({} episodes, {} stable windows)", a.dir.display(), a.log.episodes.len(), a.stable_windows);
            if let Some(b) = a.best {
                println!("{b}");
            }
        }
        Command::Compare {
            common,
            tuner,
            seeds,
            sweep,
        } => {
            let base = load(&common)?;
            let kinds = tuner.iter().map(|t| TunerKind::parse(t.trim())).collect::<Result<Vec<_>, _>>()?;
            let first = base.seed;
            let spec = MatrixSpec {
                out: base.out.clone(),
                seeds: (first..first + seeds).collect(),
                base,
                kinds,
                sweep,
            };
            let result = cmd_compare(&spec)?;
            print!("{}", stats_table(&result));
            println!("wrote {}", spec.out.display());
            if let Some(p) = result.partial {
                return Err(CliError::Partial(p));
            }
        }
        Command::Query { log, query } => {
            let q = Query::parse(&query)?;
            print!("{}", cmd_query(&log, &q)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match execute(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("histune: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
