//! `alsim`: batch front end for the active learning engine.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
//! Progress goes to standard error; results go to files.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use alsim::corpus::Task;
use alsim::models::{Capacity, ModelFamily, ModelSpec};
use alsim::reporting::{self, ExportFormat, RunRecord};
use alsim::simulator::{self, ExperimentConfig, RunOptions};
use alsim::Error;
use clap::{Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(name = "alsim", version, about = "Pool-based active learning simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run an experiment, persist one record per seed and export the curves.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replaces the config's seed list.
        #[arg(long, num_args = 1..)]
        seeds: Option<Vec<u64>>,
        /// Seeds run concurrently; timings are only comparable at 1.
        #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
        parallel: u64,
        /// Also write per-iteration scores, UPS records and PLASM audits.
        #[arg(long)]
        audit: bool,
    },
    /// Coverage of fresh queries by the previous iteration's ranking.
    Coverage {
        #[arg(long)]
        config: PathBuf,
        /// Top-k percentages of the stale ranking.
        #[arg(long, value_delimiter = ',', default_value = "10,20,30,40,50")]
        k: Vec<f64>,
        /// Iterations to probe.
        #[arg(long, value_delimiter = ',', default_value = "1,2,6")]
        iters: Vec<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Correlation of least-confidence scores between models.
    Correlate {
        #[arg(long)]
        config: PathBuf,
        /// Models as family:capacity, e.g. linear-ngram:small. Defaults to
        /// every family for the task at both capacities.
        #[arg(long, value_delimiter = ',')]
        models: Vec<String>,
        /// Seed for the shared training sample.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Aggregate persisted runs of one config.
    Summarize {
        /// Directory of run records.
        #[arg(long)]
        store: PathBuf,
        /// Export to a .csv or .json file.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file and print it with defaults filled in.
    ValidateConfig {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}

fn load_config(path: &Path) -> alsim::Result<ExperimentConfig> {
    ExperimentConfig::from_file(path)
}

fn write_atomic(path: &Path, text: &str) -> alsim::Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| io_error(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).map_err(|e| io_error(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn usage(msg: String) -> Error {
    Error::Config(vec![msg])
}

fn dispatch(cmd: Command) -> alsim::Result<ExitCode> {
    match cmd {
        Command::ValidateConfig { config } => {
            let text = fs::read_to_string(&config).map_err(|e| io_error(&config, e))?;
            let cfg = ExperimentConfig::from_toml_str(&text)?;
            print!("{}", cfg.normalized().to_toml()?);
            Ok(ExitCode::SUCCESS)
        }
        Command::Run {
            config,
            out,
            seeds,
            parallel,
            audit,
        } => {
            let mut cfg = load_config(&config)?;
            if let Some(seeds) = seeds {
                cfg.seeds = seeds;
                cfg.validate()?;
            }
            if parallel > 1 {
                log::warn!("running {parallel} seeds at once; recorded timings are not comparable");
            }
            let opts = RunOptions {
                parallel: parallel as usize,
                audit_dir: audit.then(|| out.join("audit")),
            };
            let runs = simulator::run_experiment(&cfg, &opts)?;
            let store = out.join("runs");
            let mut records = Vec::new();
            for run in runs {
                let record = RunRecord::new(&cfg, run, opts.parallel)?;
                let id = reporting::persist_run(&record, &store)?;
                log::info!("seed {} stored as {id}", record.seed);
                records.push(record);
            }
            let failed: Vec<u64> = records.iter().filter(|r| r.failure.is_some()).map(|r| r.seed).collect();
            if failed.len() < records.len() {
                reporting::export(&records, ExportFormat::Csv, &out.join("results.csv"))?;
                let summary = reporting::export(&records, ExportFormat::Json, &out.join("results.json"))?;
                log::info!("\n{}", reporting::format_summary(&summary));
            }
            if failed.is_empty() {
                Ok(ExitCode::SUCCESS)
            } else {
                eprintln!("error: seeds {failed:?} failed; see the run records in {}", store.display());
                Ok(ExitCode::from(1))
            }
        }
        Command::Coverage { config, k, iters, out } => {
            let cfg = load_config(&config)?;
            if let Some(bad) = k.iter().find(|k| !(**k > 0.0 && **k <= 100.0)) {
                return Err(usage(format!("--k values are percentages in (0, 100], got {bad}")));
            }
            if let Some(bad) = iters.iter().find(|&&t| t == 0 || t > cfg.iterations) {
                return Err(usage(format!("--iters {bad} outside 1..={}", cfg.iterations)));
            }
            let ks: Vec<f64> = k.iter().map(|k| k / 100.0).collect();
            let table = simulator::measure_coverage_table(&cfg, &ks, &iters)?;
            write_atomic(&out, &table.to_csv())?;
            log::info!("coverage table written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Correlate {
            config,
            models,
            seed,
            out,
        } => {
            let cfg = load_config(&config)?;
            let specs = if models.is_empty() {
                default_models(cfg.resolved_task())
            } else {
                models.iter().map(|m| parse_model(m)).collect::<alsim::Result<Vec<_>>>()?
            };
            if let Some(s) = specs.iter().find(|s| s.task() != cfg.resolved_task()) {
                return Err(usage(format!("--models: {} does not solve the config's task", s.family)));
            }
            let data = simulator::load_dataset(&cfg.dataset)?;
            let m = simulator::correlation_matrix(&cfg, &data, &specs, seed)?;
            write_atomic(&out, &m.to_csv())?;
            log::info!("correlation matrix written to {}", out.display());
            Ok(ExitCode::SUCCESS)
        }
        Command::Summarize { store, out } => {
            let records = reporting::load_store(&store)?;
            let summary = match &out {
                Some(path) => {
                    let format = ExportFormat::from_path(path).map_err(|e| usage(e.to_string()))?;
                    reporting::export(&records, format, path)?
                }
                None => reporting::summarize(&records)?,
            };
            print!("{}", reporting::format_summary(&summary));
            Ok(ExitCode::SUCCESS)
        }
    }
}

fn default_models(task: Task) -> Vec<ModelSpec> {
    let families: &[ModelFamily] = match task {
        Task::Classification => &[ModelFamily::LinearNgram, ModelFamily::Feedforward],
        Task::Tagging => &[ModelFamily::WindowTagger],
    };
    families
        .iter()
        .flat_map(|&f| [Capacity::Small, Capacity::Large].map(|c| ModelSpec::preset(f, c)))
        .collect()
}

fn parse_model(text: &str) -> alsim::Result<ModelSpec> {
    let bad = || usage(format!("--models: expected family:capacity, got {text:?}"));
    let (family, capacity) = text.split_once(':').ok_or_else(bad)?;
    let family: ModelFamily = serde_json::from_value(family.into()).map_err(|_| bad())?;
    let capacity: Capacity = serde_json::from_value(capacity.into()).map_err(|_| bad())?;
    Ok(ModelSpec::preset(family, capacity))
}
