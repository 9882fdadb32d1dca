//! `arena`: run experiments, sweeps, pretraining and reports from JSON configs.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use arena_core::harness::{
    aggregate, jsonl_bytes, markdown_report, pretrained_model, rank_metric_csv_bytes, read_jsonl, run_many,
    summary_csv_bytes, sweep_configs, trajectory_csv_bytes, write_atomic, Checkpoint, ExperimentConfig,
    RunResult, StopReason, SweepAxis, TaskSpec,
};
use arena_core::{Error, VERSION};
use clap::{Args, Parser, Subcommand};
use log::{info, warn};

const EXIT_FAILURE: u8 = 1;
const EXIT_CONFIG: u8 = 2;
const EXIT_ABORT: u8 = 3;

#[derive(Parser, Debug)]
#[command(name = "arena", version, about = "Adaptive-rank adapter experiments")]
struct Cli {
    /// Only print errors.
    #[arg(long, global = true, conflicts_with = "verbose")]
    quiet: bool,
    /// Print per-epoch progress.
    #[arg(long, short, global = true)]
    verbose: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Output root; results go to `<out>/<config name>/`.
    #[arg(long, env = "ARENA_OUT", default_value = "results")]
    out: PathBuf,
    /// Comma-separated seeds, replacing the config's list.
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    /// Parallel runs.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Dotted-path override, e.g. `prox.lambda=0.1` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train and evaluate one config for every seed.
    Run(RunArgs),
    /// Cross the config with a list of values along one axis.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// One of rank_init, lambda, k.
        #[arg(long)]
        axis: String,
        /// Comma-separated values.
        #[arg(long, value_delimiter = ',')]
        values: Vec<f64>,
    },
    /// Pretrain the segmentation base model and write a checkpoint.
    Pretrain {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint file to write.
        #[arg(long, default_value = "checkpoint.json")]
        out: PathBuf,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Summarize every `*.jsonl` file under a results directory.
    Report {
        results: PathBuf,
        /// Where to write the report; defaults to the results directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match e {
            Error::Config(_) | Error::Json(_) => EXIT_CONFIG,
            Error::NonFinite { .. } => EXIT_ABORT,
            _ => EXIT_FAILURE,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

fn config_failure(message: impl Into<String>) -> Failure {
    Failure {
        code: EXIT_CONFIG,
        message: message.into(),
    }
}

fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig, Failure> {
    if !path.is_file() {
        return Err(config_failure(format!("config file `{}` not found", path.display())));
    }
    let cfg = ExperimentConfig::load(path).map_err(|e| config_failure(format!("{}: {e}", path.display())))?;
    cfg.with_overrides(overrides)
        .map_err(|e| config_failure(format!("{}: {e}", path.display())))
}

fn provenance_header(cfg: &ExperimentConfig, extra: &str) -> Result<String, Failure> {
    let json = serde_json::to_string(cfg).map_err(Error::from)?;
    Ok(format!("# tool_version={VERSION}{extra}\n# config={json}\n"))
}

fn with_header(header: &str, body: Vec<u8>) -> Vec<u8> {
    let mut out = header.as_bytes().to_vec();
    out.extend(body);
    out
}

fn execute(jobs: &[(ExperimentConfig, u64)], threads: usize) -> Result<Vec<RunResult>, Failure> {
    let mut results = Vec::with_capacity(jobs.len());
    for out in run_many(jobs, threads)? {
        results.push(out?);
    }
    Ok(results)
}

fn aborted(results: &[RunResult]) -> usize {
    results.iter().filter(|r| r.stop_reason == StopReason::Abort).count()
}

fn output_dir(root: &Path, cfg: &ExperimentConfig) -> PathBuf {
    root.join(&cfg.name)
}

fn cmd_run(args: &RunArgs) -> Result<(), Failure> {
    let mut cfg = load_config(&args.config, &args.overrides)?;
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if cfg.seeds.is_empty() {
        return Err(config_failure("no seeds to run"));
    }
    let jobs: Vec<_> = cfg.seeds.iter().map(|&s| (cfg.clone(), s)).collect();
    let results = execute(&jobs, args.jobs)?;
    let dir = output_dir(&args.out, &cfg);
    let header = provenance_header(&cfg, "")?;
    write_atomic(&dir.join("results.jsonl"), &jsonl_bytes(&results)?)?;
    write_atomic(&dir.join("summary.csv"), &with_header(&header, summary_csv_bytes(&results)?))?;
    info!("wrote {} result(s) to {}", results.len(), dir.display());
    finish(&results)
}

fn finish(results: &[RunResult]) -> Result<(), Failure> {
    match aborted(results) {
        0 => Ok(()),
        n => Err(Failure {
            code: EXIT_ABORT,
            message: format!("{n} run(s) aborted on non-finite values"),
        }),
    }
}

fn cmd_sweep(args: &RunArgs, axis: &str, values: &[f64]) -> Result<(), Failure> {
    let axis: SweepAxis = axis.parse().map_err(|e: Error| config_failure(e.to_string()))?;
    if values.is_empty() {
        return Err(config_failure("sweep needs --values"));
    }
    let mut cfg = load_config(&args.config, &args.overrides)?;
    if let Some(seeds) = &args.seeds {
        cfg.seeds = seeds.clone();
    }
    if cfg.seeds.is_empty() {
        return Err(config_failure("no seeds to run"));
    }
    let configs = sweep_configs(&cfg, axis, values)?;
    let jobs: Vec<_> = configs
        .iter()
        .flat_map(|c| c.seeds.iter().map(move |&s| (c.clone(), s)))
        .collect();
    let results = execute(&jobs, args.jobs)?;
    let dir = output_dir(&args.out, &cfg);
    let axis_name = serde_json::to_string(&axis).map_err(Error::from)?;
    let header = provenance_header(&cfg, &format!(" sweep_axis={}", axis_name.trim_matches('"')))?;
    write_atomic(&dir.join("results.jsonl"), &jsonl_bytes(&results)?)?;
    write_atomic(&dir.join("summary.csv"), &with_header(&header, summary_csv_bytes(&results)?))?;
    write_atomic(&dir.join("plot_rank_metric.csv"), &with_header(&header, rank_metric_csv_bytes(&results)?))?;
    write_atomic(&dir.join("plot_trajectories.csv"), &with_header(&header, trajectory_csv_bytes(&results)?))?;
    info!("wrote {} result(s) to {}", results.len(), dir.display());
    finish(&results)
}

fn cmd_pretrain(config: &Path, out: &Path, overrides: &[String]) -> Result<(), Failure> {
    let cfg = load_config(config, overrides)?;
    let TaskSpec::Segmentation(spec) = &cfg.task else {
        return Err(config_failure("pretraining needs a segmentation task config"));
    };
    if spec.checkpoint.is_some() {
        return Err(config_failure("config already names a checkpoint; remove task.checkpoint to pretrain"));
    }
    let model = pretrained_model(spec)?;
    let record = Checkpoint::new(spec, (*model).clone());
    write_atomic(out, record.to_json()?.as_bytes())?;
    info!("wrote checkpoint {}", out.display());
    Ok(())
}

fn jsonl_files(dir: &Path) -> Result<Vec<PathBuf>, Failure> {
    let mut found = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| config_failure(format!("cannot read `{}`: {e}", d.display())))?;
        for entry in entries {
            let path = entry.map_err(Error::from)?.path();
            if path.is_dir() {
                stack.push(path);
            } else if path.extension().is_some_and(|e| e == "jsonl") {
                found.push(path);
            }
        }
    }
    found.sort();
    Ok(found)
}

fn cmd_report(results_dir: &Path, out: Option<&Path>) -> Result<(), Failure> {
    if !results_dir.is_dir() {
        return Err(config_failure(format!("results directory `{}` not found", results_dir.display())));
    }
    let mut results = Vec::new();
    let mut skipped = 0;
    for file in jsonl_files(results_dir)? {
        let text = fs::read_to_string(&file).map_err(Error::from)?;
        let (mut parsed, bad) = read_jsonl(&text);
        if bad > 0 {
            warn!("{}: skipped {bad} unreadable line(s)", file.display());
        }
        skipped += bad;
        results.append(&mut parsed);
    }
    if results.is_empty() {
        return Err(config_failure(format!("no results found under `{}`", results_dir.display())));
    }
    let rows: Vec<_> = results.iter().map(|r| r.summary_row()).collect();
    let summary = aggregate(&rows);
    let metric_names: BTreeMap<String, String> = results
        .iter()
        .map(|r| (r.config.task.family().to_string(), r.metric_name.clone()))
        .collect();
    let versions: std::collections::BTreeSet<&str> = results.iter().map(|r| r.tool_version.as_str()).collect();
    let mut md = format!(
        "# Results\n\nReport tool version {VERSION}; results from version(s) {}. {} run(s), {} skipped line(s).\n\n",
        versions.into_iter().collect::<Vec<_>>().join(", "),
        results.len(),
        skipped
    );
    md.push_str(&markdown_report(&summary, &metric_names));
    md.push_str("\n## Configs\n\n");
    let mut configs: Vec<String> = Vec::new();
    for r in &results {
        let c = serde_json::to_string(&r.config).map_err(Error::from)?;
        if !configs.contains(&c) {
            configs.push(c);
        }
    }
    for c in &configs {
        md.push_str(&format!("```json\n{c}\n```\n"));
    }
    let dir = out.unwrap_or(results_dir);
    write_atomic(&dir.join("report.md"), md.as_bytes())?;
    let header = format!("# tool_version={VERSION}\n");
    write_atomic(
        &dir.join("report_cells.json"),
        serde_json::to_string_pretty(&summary).map_err(Error::from)?.as_bytes(),
    )?;
    write_atomic(&dir.join("report_summary.csv"), &with_header(&header, summary_csv_bytes(&results)?))?;
    write_atomic(&dir.join("report_rank_metric.csv"), &with_header(&header, rank_metric_csv_bytes(&results)?))?;
    if skipped > 0 {
        println!("skipped {skipped} corrupted line(s)");
    }
    println!("{} run(s) in {} cell(s); report at {}", results.len(), summary.cells.len(), dir.join("report.md").display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = if cli.quiet {
        log::LevelFilter::Error
    } else if cli.verbose {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Info
    };
    env_logger::Builder::new()
        .filter_level(level)
        .parse_env("ARENA_LOG")
        .format_timestamp(None)
        .init();
    let outcome = match &cli.command {
        Command::Run(args) => cmd_run(args),
        Command::Sweep { run, axis, values } => cmd_sweep(run, axis, values),
        Command::Pretrain {
            config,
            out,
            overrides,
        } => cmd_pretrain(config, out, overrides),
        Command::Report { results, out } => cmd_report(results, out.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}
