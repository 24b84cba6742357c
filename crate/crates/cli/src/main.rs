//! Command-line front end: dataset generation, meta-training, evaluation,
//! baselines and the oracle verification suites.
//!
//! Configuration precedence, lowest first: built-in defaults, `--config`
//! file, `--set key=value` overrides, dedicated flags such as `--seed`.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use glitter::checkpoint::{load_checkpoint, save_checkpoint};
use glitter::dataset::{load_dataset, save_dataset};
use glitter::eval::{
    evaluate, evaluate_knn, protonet_baseline_eval, protonet_baseline_train, EvalOptions,
    EvalReport, ProtoConfig,
};
use glitter::sbm::{generate_sbm_dataset, SbmConfig};
use glitter::trainer::{train, TrainConfig};
use glitter::verify::{run_suite, Suite};
use glitter::GlitterError;

#[derive(Parser)]
#[command(
    name = "glitter",
    version,
    about = "Few-shot node classification with task-specific structure learning"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic stochastic-block-model dataset.
    Generate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
    /// Meta-train on a dataset and write a checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Per-episode JSON-lines log.
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Meta-test a checkpoint. Defaults to the configuration stored in it.
    Evaluate {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Run an oracle suite; exits 1 if any check fails.
    Verify {
        #[arg(long, value_enum)]
        suite: SuiteArg,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Run a baseline on the same test episodes as `evaluate`.
    Baseline {
        #[command(flatten)]
        common: Common,
        #[arg(long, value_enum)]
        model: BaselineModel,
        #[arg(long)]
        data: PathBuf,
        /// Neighbors for the KNN baseline.
        #[arg(long, default_value_t = 1)]
        k: usize,
        #[command(flatten)]
        eval: EvalArgs,
    },
    /// Print configuration defaults.
    Config {
        #[arg(long, required = true)]
        defaults: bool,
        #[arg(long, value_enum, default_value = "train")]
        kind: ConfigKind,
        #[arg(long)]
        seed: Option<u64>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML file of flat key = value pairs.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one key, e.g. `--set eta=5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, default_value_t = 10)]
    reps: usize,
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    #[arg(long, default_value_t = 1)]
    workers: usize,
    /// Also write the report as JSON here.
    #[arg(long)]
    report: Option<PathBuf>,
}

impl EvalArgs {
    fn options(&self) -> EvalOptions {
        EvalOptions {
            repetitions: self.reps,
            episodes_per_rep: self.episodes,
            workers: self.workers,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SuiteArg {
    Theorems,
    Gradients,
    Sampling,
}

#[derive(Clone, Copy, ValueEnum)]
enum BaselineModel {
    Knn,
    Protonet,
}

#[derive(Clone, Copy, ValueEnum)]
enum ConfigKind {
    Train,
    Sbm,
}

/// Exit 2 for anything wrong with the invocation, 1 for failures while running.
enum Failure {
    Usage(anyhow::Error),
    Run(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Run(e)
    }
}

impl From<GlitterError> for Failure {
    fn from(e: GlitterError) -> Self {
        Failure::Run(e.into())
    }
}

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {e:#}");
            eprintln!("run `glitter --help` for usage");
            ExitCode::from(2)
        }
        Err(Failure::Run(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Parses `raw` as a TOML value, falling back to a bare string.
fn parse_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Layers file and `--set` overrides over `base`, then applies `--seed`.
fn resolve<T: Serialize + DeserializeOwned>(base: &T, common: &Common) -> Result<T, Failure> {
    let mut table = toml::Table::try_from(base).map_err(usage)?;
    if let Some(path) = &common.config {
        let text = fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))
            .map_err(usage)?;
        let file: toml::Table = text
            .parse()
            .with_context(|| format!("parsing config {}", path.display()))
            .map_err(usage)?;
        table.extend(file);
    }
    for item in &common.overrides {
        let (key, raw) = item
            .split_once('=')
            .ok_or_else(|| usage(anyhow!("--set expects KEY=VALUE, got `{item}`")))?;
        table.insert(key.trim().to_string(), parse_value(raw.trim()));
    }
    if let Some(seed) = common.seed {
        table.insert("seed".into(), toml::Value::Integer(seed as i64));
    }
    toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| usage(anyhow!("invalid configuration: {e}")))
}

/// Writes to stdout, turning a closed pipe into an error instead of a panic.
fn say(text: &str) -> Result<(), Failure> {
    let mut out = std::io::stdout().lock();
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Failure::Run(e.into()))
}

fn print_config<T: Serialize>(cfg: &T) -> Result<(), Failure> {
    let text = toml::to_string(cfg).map_err(|e| Failure::Run(e.into()))?;
    say(&format!("# resolved configuration\n{text}\n"))
}

fn emit_report(report: &EvalReport, path: Option<&Path>) -> Result<(), Failure> {
    let json = serde_json::to_string(report).map_err(|e| Failure::Run(e.into()))?;
    say(&format!("{json}\n{report}\n"))?;
    if let Some(path) = path {
        fs::write(path, format!("{json}\n"))
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(())
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate { common, out } => {
            let cfg: SbmConfig = resolve(&SbmConfig::default(), &common)?;
            print_config(&cfg)?;
            cfg.validate().map_err(usage)?;
            let data = generate_sbm_dataset(&cfg)?;
            save_dataset(&data, &out)?;
            println!("wrote {} graph(s) to {}", data.graphs.len(), out.display());
        }
        Command::Train {
            common,
            data,
            out,
            log,
        } => {
            let cfg: TrainConfig = resolve(&TrainConfig::default(), &common)?;
            print_config(&cfg)?;
            let dataset = load_dataset(&data)?;
            let outcome = train(&dataset, &cfg)?;
            save_checkpoint(&outcome.checkpoint, &out)?;
            if let Some(log) = log {
                outcome.log.write_jsonl(&log)?;
            }
            println!(
                "trained {} episodes in {:.1}s, checkpoint {} ({})",
                outcome.log.records.len(),
                outcome.log.wall_time_secs,
                out.display(),
                outcome.checkpoint.fingerprint()
            );
        }
        Command::Evaluate {
            common,
            checkpoint,
            data,
            eval,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let cfg: TrainConfig = resolve(&ckpt.config, &common)?;
            print_config(&cfg)?;
            let dataset = load_dataset(&data)?;
            let report = evaluate(&ckpt, &dataset, &cfg, eval.options())?;
            emit_report(&report, eval.report.as_deref())?;
        }
        Command::Verify { suite, seed } => {
            let suite = match suite {
                SuiteArg::Theorems => Suite::Theorems,
                SuiteArg::Gradients => Suite::Gradients,
                SuiteArg::Sampling => Suite::Sampling,
            };
            let report = run_suite(&suite, seed)?;
            say(&format!("# suite {suite:?}, seed {seed}\n{report}"))?;
            if !report.passed() {
                let failed = report.checks.iter().filter(|c| !c.passed).count();
                return Err(Failure::Run(anyhow!("{failed} check(s) failed")));
            }
        }
        Command::Baseline {
            common,
            model,
            data,
            k,
            eval,
        } => {
            let cfg: TrainConfig = resolve(&TrainConfig::default(), &common)?;
            print_config(&cfg)?;
            let dataset = load_dataset(&data)?;
            let report = match model {
                BaselineModel::Knn => evaluate_knn(&dataset, &cfg, k, eval.options())?,
                BaselineModel::Protonet => {
                    let params = protonet_baseline_train(&dataset, &cfg, ProtoConfig::default())?;
                    protonet_baseline_eval(&params, &dataset, &cfg, eval.options())?
                }
            };
            emit_report(&report, eval.report.as_deref())?;
        }
        Command::Config { kind, seed, .. } => match kind {
            ConfigKind::Train => print_config(&TrainConfig {
                seed: seed.unwrap_or(0),
                ..Default::default()
            })?,
            ConfigKind::Sbm => print_config(&SbmConfig {
                seed: seed.unwrap_or(0),
                ..Default::default()
            })?,
        },
    }
    Ok(())
}
