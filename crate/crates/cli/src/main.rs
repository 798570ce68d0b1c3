use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

mod commands;
mod manifest;

#[derive(Parser)]
#[command(name = "coc", version, about = "Allegation and violation classification on case fact embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum Format {
    Csv,
    Text,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a planted-dependency synthetic corpus as JSONL.
    GenData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on the train split, early-stopping on dev; writes the best checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_checkpoint: PathBuf,
        #[arg(long)]
        history: PathBuf,
        /// Search learning rates and temperature pairs on dev first.
        #[arg(long)]
        grid: bool,
    },
    /// Score a checkpoint on a corpus and write the metrics report as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        report: PathBuf,
        /// Score only the test split produced by this config's split fractions.
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Train and test every ablation condition; writes the results table.
    Ablate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out_table: PathBuf,
        /// Comma-separated condition names.
        #[arg(long, value_delimiter = ',')]
        only: Vec<String>,
    },
    /// Finite-difference check of the full model gradient on a tiny random batch.
    Gradcheck {
        /// Network and loss settings; the tiny default is used when absent.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Merge result tables and eval reports into one table.
    Report {
        #[arg(long, num_args = 1.., required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long, value_enum, default_value_t = Format::Text)]
        format: Format,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData { config, out } => commands::gen_data(&config, &out),
        Command::Train {
            data,
            config,
            out_checkpoint,
            history,
            grid,
        } => commands::train(&data, &config, &out_checkpoint, &history, grid),
        Command::Eval {
            checkpoint,
            data,
            report,
            config,
        } => commands::eval(&checkpoint, &data, &report, config.as_deref()),
        Command::Ablate {
            data,
            config,
            out_table,
            only,
        } => commands::ablate(&data, &config, &out_table, &only),
        Command::Gradcheck { config, seed } => commands::gradcheck(config.as_deref(), seed),
        Command::Report { inputs, format, out } => commands::report(&inputs, format, out.as_deref()),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            commands::exit_code(&e)
        }
    }
}
