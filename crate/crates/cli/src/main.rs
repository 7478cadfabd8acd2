use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use log::info;

use fedda::federation::run_training_with;
use fedda::metrics::verify::{self, Suite};
use fedda::metrics::{emit_svg, CsvSink, ExperimentConfig};

#[derive(Parser)]
#[command(name = "fedda", version, about = "Federated restarted dual averaging experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment from a TOML config.
    Run {
        config: PathBuf,
        /// Replace a config value, e.g. `schedule.eta=0.05`. Repeatable.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Output directory (overrides `output.dir`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Log per-client consensus errors.
        #[arg(long)]
        trace_clients: bool,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Run a built-in check suite; exits nonzero on failure.
    Verify {
        /// prox-oracle, lemmas or rate
        suite: Suite,
    },
}

fn run(config: PathBuf, overrides: Vec<String>, out: Option<PathBuf>, trace_clients: bool, seed: Option<u64>) -> Result<()> {
    let mut cfg = ExperimentConfig::from_path(&config, &overrides)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.trace_clients |= trace_clients;
    let dir = out.unwrap_or_else(|| cfg.output.dir.clone());
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    std::fs::write(dir.join("config.toml"), cfg.to_toml_string()?)
        .with_context(|| format!("writing resolved config to {}", dir.display()))?;

    let csv_path = dir.join(&cfg.output.csv);
    let mut sink = CsvSink::create(&csv_path)?;
    let table = match run_training_with(&cfg, &mut |row| sink.write(row)) {
        Ok(t) => t,
        Err(e) => {
            let record = dir.join("error.txt");
            std::fs::write(&record, format!("{e}\n")).with_context(|| format!("writing {}", record.display()))?;
            return Err(e).context(format!("run aborted; partial metrics in {}", csv_path.display()));
        }
    };
    if let Some(svg) = &cfg.output.svg {
        emit_svg(&table.rows, &cfg.output.svg_fields, &dir.join(svg))?;
    }
    info!("wrote {} rows to {}", table.rows.len(), csv_path.display());
    if let Some(last) = table.rows.last() {
        println!("final loss {:.6e}, last measure {:.6e}", table.final_loss, last.measure_g);
    } else {
        println!("final loss {:.6e}, no steps run", table.final_loss);
    }
    if table.lemma.checks > 0 {
        println!("local-update checks: {} of {} violated", table.lemma.violations, table.lemma.checks);
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config, overrides, out, trace_clients, seed } => run(config, overrides, out, trace_clients, seed),
        Command::Verify { suite } => {
            let report = verify::run_suite(suite);
            match report {
                Ok(r) => {
                    for line in &r.lines {
                        println!("{line}");
                    }
                    println!("{}: {}", r.name, if r.passed { "PASS" } else { "FAIL" });
                    if r.passed {
                        Ok(())
                    } else {
                        return ExitCode::FAILURE;
                    }
                }
                Err(e) => Err(e.into()),
            }
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
