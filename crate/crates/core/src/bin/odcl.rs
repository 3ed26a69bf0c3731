use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use odcl::harness::{self, emit_report, rebuild_from_predictions, ExperimentConfig, HarnessError, RunOptions, RunRecord, StreamSource};
use odcl::stream::write_manifest;
use odcl::verify;

#[derive(Parser)]
#[command(name = "odcl", version, about = "Open-domain continual learning experiments on a toy dual encoder")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `section.key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Write the configured synthetic stream as a manifest plus binary sample files.
    Generate {
        #[command(flatten)]
        common: Common,
    },
    /// Train and evaluate every configured method.
    Run {
        #[command(flatten)]
        common: Common,
        /// Use the configured seeds as-is instead of mixing in a run nonce.
        #[arg(long)]
        deterministic: bool,
        /// Task order as a 1-based comma list, e.g. `3,1,2`.
        #[arg(long, value_delimiter = ',')]
        order: Option<Vec<usize>>,
        #[arg(long)]
        plots: bool,
        /// Continue from a step checkpoint directory.
        #[arg(long, conflicts_with_all = ["config", "seed", "order"])]
        resume: Option<PathBuf>,
    },
    /// Regenerate tables (and plots) from a finished run directory.
    Report {
        #[arg(long)]
        output: PathBuf,
        /// Recompute matrices from the prediction logs instead of the run record.
        #[arg(long)]
        from_predictions: bool,
        #[arg(long)]
        plots: bool,
    },
    /// Run the invariant suite.
    Verify {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn load_config(common: &Common) -> Result<ExperimentConfig, HarnessError> {
    let mut cfg = match &common.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = common.seed {
        cfg.apply_seed(seed);
    }
    if let Some(out) = &common.output {
        cfg.output = out.clone();
    }
    Ok(cfg)
}

fn print_summary(record: &RunRecord) {
    for r in &record.results {
        for (mode, rep) in &r.reports {
            let transfer = rep.transfer.map(|t| format!("{:.2}", t * 100.0)).unwrap_or_else(|| "-".into());
            println!(
                "{:<16} {mode}  Last {:6.2}  Avg {:6.2}  Forgetting {:6.2}  Transfer {transfer}",
                r.method.name(),
                rep.last * 100.0,
                rep.avg * 100.0,
                rep.forgetting * 100.0
            );
        }
    }
    println!("written to {}", record.config.output.display());
}

fn run(cli: Cli) -> Result<(), HarnessError> {
    let mut progress = |msg: &str| eprintln!("{msg}");
    match cli.command {
        Command::Generate { common } => {
            let cfg = load_config(&common)?;
            if matches!(cfg.stream, StreamSource::Manifest(_)) {
                return Err(harness::ConfigError::general("generate needs a synthetic stream section, not stream.manifest").into());
            }
            let stream = harness::load_stream(&cfg)?;
            std::fs::create_dir_all(&cfg.output).map_err(|source| HarnessError::Io {
                path: cfg.output.display().to_string(),
                source,
            })?;
            let path = cfg.output.join("manifest.txt");
            write_manifest(&stream, &path)?;
            println!("{} tasks written to {}", stream.total_tasks(), path.display());
        }
        Command::Run {
            common,
            deterministic,
            order,
            plots,
            resume,
        } => {
            let mut options = RunOptions {
                progress: Some(&mut progress),
                ..Default::default()
            };
            let record = match resume {
                Some(path) => harness::resume(&path, &mut options)?,
                None => {
                    let mut cfg = load_config(&common)?;
                    cfg.deterministic |= deterministic;
                    cfg.plots |= plots;
                    if order.is_some() {
                        cfg.order = order;
                    }
                    cfg.validate()?;
                    harness::run_with(&cfg, &mut options)?
                }
            };
            if let Some(r) = record {
                print_summary(&r);
            }
        }
        Command::Report {
            output,
            from_predictions,
            plots,
        } => {
            let mut record = RunRecord::load(&output.join("run_record.json"))?;
            if from_predictions {
                let n = rebuild_from_predictions(&mut record, &output)?;
                eprintln!("rebuilt {n} method(s) from prediction logs");
            }
            let files = emit_report(&record, &output, plots || record.config.plots)?;
            for f in files {
                println!("{}", f.display());
            }
            print_summary(&record);
        }
        Command::Verify { seed } => {
            let results = verify::run_all(seed);
            let failed = results.iter().filter(|r| !r.passed).count();
            for r in &results {
                println!("[{}] {}: {}", if r.passed { "PASS" } else { "FAIL" }, r.name, r.detail);
            }
            if failed > 0 {
                eprintln!("{failed} check(s) failed");
                std::process::exit(1);
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
