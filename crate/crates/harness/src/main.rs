use std::path::{Path, PathBuf};
use std::process::ExitCode;

use cdafed_harness::compare::compare;
use cdafed_harness::experiment::{run, write_outputs, RunSummary};
use cdafed_harness::plot::{emit_plot_data, read_log, GroupBy};
use cdafed_harness::{ExperimentConfig, HarnessError};
use clap::{Parser, Subcommand};

const EXIT_CONFIG: u8 = 1;
const EXIT_RUNTIME: u8 = 2;

#[derive(Parser)]
#[command(name = "cdafed", version, about = "Federated learning under concept drift: experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every cross-validation fold of an experiment.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Override the config's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Compare two run summaries (summary.json files or their directories).
    Compare { a: PathBuf, b: PathBuf },
    /// Turn a fold log into per-group series files plus a marker sidecar.
    PlotData {
        log: PathBuf,
        #[arg(long, value_parser = ["concept", "client", "overall"])]
        group_by: String,
        /// Directory for the series files; defaults to the log's directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn summary_path(p: &Path) -> PathBuf {
    if p.is_dir() {
        p.join("summary.json")
    } else {
        p.to_path_buf()
    }
}

fn fail(e: &HarnessError) -> ExitCode {
    eprintln!("error: {e}");
    match e {
        HarnessError::Config(_) | HarnessError::Input(_) => ExitCode::from(EXIT_CONFIG),
        _ => ExitCode::from(EXIT_RUNTIME),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match cli.command {
        Command::Run { config, seed, out } => {
            let mut cfg = match ExperimentConfig::load(&config) {
                Ok(c) => c,
                Err(e) => return fail(&e),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.output_dir = o;
            }
            let output = match run(&cfg) {
                Ok(o) => o,
                Err(e) => return fail(&e),
            };
            if let Err(e) = write_outputs(&cfg, &output, &cfg.output_dir) {
                eprintln!("error: {e}");
                return ExitCode::from(EXIT_RUNTIME);
            }
            print!("{}", output.summary.table());
            let failed = output.summary.failed_folds();
            if failed.is_empty() {
                ExitCode::SUCCESS
            } else {
                eprintln!("{} fold(s) failed: {failed:?}", failed.len());
                ExitCode::from(EXIT_RUNTIME)
            }
        }
        Command::Compare { a, b } => {
            let result = RunSummary::load(&summary_path(&a))
                .and_then(|sa| RunSummary::load(&summary_path(&b)).map(|sb| (sa, sb)))
                .and_then(|(sa, sb)| compare(&sa, &sb));
            match result {
                Ok(report) => {
                    print!("{}", report.render());
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
        Command::PlotData { log, group_by, out } => {
            let result = group_by.parse::<GroupBy>().and_then(|g| {
                let parsed = read_log(&log)?;
                let dir = out
                    .clone()
                    .or_else(|| log.parent().map(Path::to_path_buf))
                    .unwrap_or_default();
                let stem = log.file_stem().and_then(|s| s.to_str()).unwrap_or("log");
                emit_plot_data(&parsed, g, &dir, stem)
            });
            match result {
                Ok(files) => {
                    for f in files.series.iter().chain([&files.markers]) {
                        println!("{}", f.display());
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(&e),
            }
        }
    }
}
