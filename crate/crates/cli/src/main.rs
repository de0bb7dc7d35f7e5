use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use serde_json::Value;

use memedit::gen_model;
use memedit::harness::{
    aggregate, emit_results, read_results_csv, read_summary, run_experiment_with_traces, run_sweep,
    verify_all, ExperimentConfig, Method,
};

const EXIT_VERIFY_FAILED: u8 = 2;
const EXIT_CONFIG: u8 = 3;
const EXIT_DIVERGENCE: u8 = 4;
const REAGGREGATION_TOL: f64 = 1e-12;

/// Closed-form and meta-optimized editing of synthetic associative memories.
///
/// Any config field can be overridden with `--path.to.field=value`, e.g.
/// `--geometry.kappa=1e4` or `--metake_params.T=30`.
#[derive(Debug, Parser)]
#[command(name = "memedit", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// JSON config; fields not given keep their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a generated model as JSON.
    Gen {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one edit suite.
    Edit {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        /// Per-edit CSV; the summary JSON is written next to it.
        #[arg(long)]
        out: PathBuf,
        /// Optimizer traces as JSON lines, one object per iteration.
        #[arg(long)]
        trace: Option<PathBuf>,
    },
    /// Grid over condition number, protected mass and method.
    Sweep {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        seed: u64,
        #[arg(long, value_delimiter = ',', required = true)]
        kappas: Vec<f64>,
        #[arg(long, value_delimiter = ',', required = true)]
        masses: Vec<f64>,
        /// Defaults to every method.
        #[arg(long, value_delimiter = ',')]
        methods: Vec<Method>,
        /// JSON output; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the invariant battery.
    Verify {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute aggregates from a results CSV and compare with its summary.
    Report {
        #[arg(long)]
        csv: PathBuf,
        /// Defaults to `<stem>.summary.json` next to the CSV.
        #[arg(long)]
        summary: Option<PathBuf>,
    },
}

#[derive(Debug)]
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl Failure {
    fn config(error: impl Into<anyhow::Error>) -> Self {
        Failure {
            code: EXIT_CONFIG,
            error: error.into(),
        }
    }
}

impl From<anyhow::Error> for Failure {
    fn from(error: anyhow::Error) -> Self {
        Failure { code: 1, error }
    }
}

impl From<memedit::Error> for Failure {
    fn from(error: memedit::Error) -> Self {
        let code = if error.is_divergence() {
            EXIT_DIVERGENCE
        } else if matches!(error, memedit::Error::InvalidConfig(_)) {
            EXIT_CONFIG
        } else {
            1
        };
        Failure {
            code,
            error: error.into(),
        }
    }
}

/// Splits `--a.b=value` overrides from the arguments clap understands.
/// Anything whose key names a field of the default config is an override.
fn split_overrides(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let template = serde_json::to_value(ExperimentConfig::default()).expect("default config");
    let mut rest = Vec::new();
    let mut overrides = Vec::new();
    for arg in args {
        let parsed = arg
            .strip_prefix("--")
            .and_then(|s| s.split_once('='))
            .filter(|(key, _)| *key != "seed" && lookup(&template, key).is_some());
        match parsed {
            Some((key, value)) => overrides.push((key.to_owned(), value.to_owned())),
            None => rest.push(arg),
        }
    }
    (rest, overrides)
}

fn lookup<'a>(value: &'a Value, dotted: &str) -> Option<&'a Value> {
    dotted.split('.').try_fold(value, |v, part| v.get(part))
}

fn merge(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(base), Value::Object(patch)) => {
            for (key, value) in patch {
                match base.get_mut(&key) {
                    Some(slot) => merge(slot, value),
                    None => {
                        base.insert(key, value);
                    }
                }
            }
        }
        (slot, patch) => *slot = patch,
    }
}

fn set_path(root: &mut Value, dotted: &str, raw: &str) -> anyhow::Result<()> {
    let parsed = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_owned()));
    let mut slot = root;
    for part in dotted.split('.') {
        slot = slot
            .get_mut(part)
            .ok_or_else(|| anyhow!("unknown config field `{dotted}`"))?;
    }
    *slot = parsed;
    Ok(())
}

fn load_config(
    args: &ConfigArgs,
    overrides: &[(String, String)],
    seed: Option<u64>,
) -> Result<ExperimentConfig, Failure> {
    let mut doc = serde_json::to_value(ExperimentConfig::default()).map_err(Failure::config)?;
    if let Some(path) = &args.config {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))
            .map_err(Failure::config)?;
        let patch: Value = serde_json::from_str(&text)
            .with_context(|| format!("parsing {}", path.display()))
            .map_err(Failure::config)?;
        merge(&mut doc, patch);
    }
    for (key, value) in overrides {
        set_path(&mut doc, key, value).map_err(Failure::config)?;
    }
    if let Some(seed) = seed {
        doc["seed"] = Value::from(seed);
    }
    let cfg: ExperimentConfig = serde_json::from_value(doc)
        .context("config does not match the expected schema")
        .map_err(Failure::config)?;
    cfg.validate().map_err(Failure::config)?;
    Ok(cfg)
}

fn write_or_print(path: Option<&Path>, text: &str) -> anyhow::Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            print_stdout(text);
            Ok(())
        }
    }
}

/// A closed pipe on stdout is not an error worth reporting.
fn print_stdout(text: &str) {
    let mut out = std::io::stdout().lock();
    let _ = writeln!(out, "{text}").and_then(|()| out.flush());
}

fn run(cli: Cli, overrides: &[(String, String)]) -> Result<(), Failure> {
    match cli.command {
        Command::Gen { config, out } => {
            let cfg = load_config(&config, overrides, None)?;
            gen_model(&cfg.geometry)?.save(&out)?;
            eprintln!("wrote {}", out.display());
        }
        Command::Edit {
            config,
            seed,
            out,
            trace,
        } => {
            let cfg = load_config(&config, overrides, Some(seed))?;
            let (record, traces) = run_experiment_with_traces(&cfg)?;
            let summary_path = emit_results(&record, &out)?;
            if let Some(path) = trace {
                let mut lines = String::new();
                for t in traces.iter().flatten() {
                    lines.push_str(&t.to_json_lines()?);
                }
                std::fs::write(&path, lines)
                    .with_context(|| format!("writing {}", path.display()))?;
            }
            let summary = std::fs::read_to_string(&summary_path)
                .with_context(|| format!("reading {}", summary_path.display()))?;
            print_stdout(&summary);
        }
        Command::Sweep {
            config,
            seed,
            kappas,
            masses,
            methods,
            out,
        } => {
            let cfg = load_config(&config, overrides, Some(seed))?;
            let methods = if methods.is_empty() {
                Method::ALL.to_vec()
            } else {
                methods
            };
            let rows = run_sweep(&cfg, &kappas, &masses, &methods)?;
            let text = serde_json::to_string_pretty(&rows).map_err(anyhow::Error::from)?;
            write_or_print(out.as_deref(), &text)?;
        }
        Command::Verify { config, out } => {
            let cfg = load_config(&config, overrides, None)?;
            let report = verify_all(&cfg)?;
            let text = serde_json::to_string_pretty(&report).map_err(anyhow::Error::from)?;
            write_or_print(out.as_deref(), &text)?;
            for check in &report.checks {
                eprintln!("{:<28} {:?}", check.name, check.status);
            }
            if !report.all_hard_pass() {
                return Err(Failure {
                    code: EXIT_VERIFY_FAILED,
                    error: anyhow!("one or more invariants failed"),
                });
            }
        }
        Command::Report { csv, summary } => {
            let summary_path = summary.unwrap_or_else(|| csv.with_extension("summary.json"));
            let rows = read_results_csv(&csv)?;
            let stored = read_summary(&summary_path)?;
            let again = aggregate(
                &rows,
                stored.config.paraphrase_count,
                stored.config.locality_count,
            );
            let text = serde_json::to_string_pretty(&again).map_err(anyhow::Error::from)?;
            print_stdout(&text);
            let s = &stored.aggregates;
            let drift = [
                (again.efficacy - s.efficacy).abs(),
                (again.generalization - s.generalization).abs(),
                (again.specificity - s.specificity).abs(),
            ];
            if again.n_edits != s.n_edits || drift.iter().any(|&d| d > REAGGREGATION_TOL) {
                return Err(anyhow!(
                    "aggregates disagree with {} (differences {drift:?})",
                    summary_path.display()
                )
                .into());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let (args, overrides) = split_overrides(std::env::args().collect());
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_CONFIG } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli, &overrides) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
