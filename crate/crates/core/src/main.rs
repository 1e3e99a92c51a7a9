use std::fs::{self, File};
use std::io::BufWriter;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::{error, info};

use fiarse::config::parse_config;
use fiarse::report::{emit_csv, write_sweep};
use fiarse::{Experiment, Result, Schedule};

#[derive(Parser)]
#[command(version, about = "Federated training with importance-aware submodels")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write metrics.csv, sweep.csv and config.json.
    Run {
        config: PathBuf,
        /// `key.path=value`; the value is parsed as JSON when possible.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory, overriding the config's `output`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        quiet: bool,
        /// Train clients one after another instead of in parallel.
        #[arg(long)]
        sequential: bool,
    },
}

fn run(
    config: PathBuf,
    overrides: Vec<String>,
    out: Option<PathBuf>,
    sequential: bool,
) -> Result<()> {
    let cfg = parse_config(&config, &overrides)?;
    let dir = out.unwrap_or_else(|| cfg.output.clone());
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("config.json"), cfg.to_json())?;

    let schedule = if sequential {
        Schedule::Sequential
    } else {
        Schedule::Parallel
    };
    let exp = Experiment::new(cfg)?.with_schedule(schedule);
    let result = exp.run()?;

    emit_csv(&result.rows, &dir.join("metrics.csv"))?;
    write_sweep(
        &result.sweep,
        BufWriter::new(File::create(dir.join("sweep.csv"))?),
    )?;
    if let Some((round, report)) = result.reports.last() {
        info!(
            "round {round}: mean global accuracy {:.4}",
            report.global_mean
        );
    }
    for (g, acc) in &result.sweep {
        info!("gamma {g}: global accuracy {acc:.4}");
    }
    info!("wrote {}", dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let Command::Run {
        config,
        overrides,
        out,
        quiet,
        sequential,
    } = cli.command;
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(if quiet {
        "warn"
    } else {
        "info"
    }))
    .format_timestamp(None)
    .init();
    match run(config, overrides, out, sequential) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
