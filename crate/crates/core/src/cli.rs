//! Command-line front end: config loading with overrides, the `run`,
//! `ablate`, `sweep` and `partition-inspect` subcommands, and the on-disk
//! artifact formats.
//!
//! # Config
//!
//! TOML with the sections `[experiment]`, `[data]`, `[split]`, `[model]`,
//! `[train]`, `[aggregate]`; every key is optional and falls back to its
//! default. Precedence, lowest first: built-in defaults, config file,
//! `--set key=value` overrides in command-line order, `--seed`. An override
//! key is either `section.key` or a bare key that names exactly one field.
//!
//! # Metrics log (`metrics.csv`)
//!
//! One header line then one line per round:
//!
//! ```text
//! round,client_losses,weights,head_loss,accuracy,macro_f1
//! 0,0.61;0.58;;0.7,0.25;0.25;0;0.5,1.2,31.25,28.4
//! ```
//!
//! `client_losses` and `weights` are `;`-separated per client in client
//! order (a skipped client has an empty loss and weight 0; `ssfl_only`
//! writes empty lists). `head_loss` is the server head-training loss, or
//! the server's supervised loss under `ssfl_only`; it is `NaN` under
//! `supervised`, which trains no separate head. Floats use the shortest round-trip representation.
//! Wall-clock time per round goes to `timing.csv` (`round,wall_ms`) so the
//! metrics log stays byte-identical across runs.
//!
//! # Summary (`summary.toml`)
//!
//! `rounds`, `final_accuracy`, `final_macro_f1`, `best_accuracy`,
//! `best_round`, `dataset_fingerprint`.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::federation::{
    load_dataset, run_experiment_on, AblationMode, ExperimentConfig, ExperimentResult, RoundRecord,
};
use crate::model;
use crate::partition::build_split;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "tempfed", version, about = "Semi-supervised multi-modal federated learning simulator")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Clone)]
pub struct CommonArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Override a config value, e.g. `--set rounds=5` or `--set split.r_l=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Experiment seed (overrides the config).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Client worker threads; 0 picks the number of cores.
    #[arg(long, default_value_t = 0)]
    pub workers: usize,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run one experiment.
    Run(CommonArgs),
    /// Run the four ablation modes on a shared split.
    Ablate(CommonArgs),
    /// Run one experiment per value of a parameter.
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// One of window_fraction, r_l, r_m, alpha, tau.
        #[arg(long)]
        param: String,
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        values: Vec<f64>,
    },
    /// Write the split manifest without training.
    PartitionInspect(CommonArgs),
}

/// Errors that map to the usage exit code.
fn is_usage_error(e: &Error) -> bool {
    matches!(e, Error::Config(_) | Error::Parameter { .. })
}

fn exit_code(e: &Error) -> i32 {
    if is_usage_error(e) {
        EXIT_USAGE
    } else {
        EXIT_RUNTIME
    }
}

const SECTIONS: [&str; 6] = ["experiment", "data", "split", "model", "train", "aggregate"];

fn parse_value(raw: &str) -> toml::Value {
    // anything that is not a TOML literal is taken as a string
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn default_table() -> toml::Table {
    toml::Table::try_from(ExperimentConfig::default()).expect("defaults serialize")
}

/// Resolve `key` to `(section, field)` against the config schema.
fn resolve_key(key: &str) -> Result<(String, String)> {
    let schema = default_table();
    let fields_of = |section: &str| -> Vec<String> {
        schema
            .get(section)
            .and_then(toml::Value::as_table)
            .map(|t| t.keys().cloned().collect())
            .unwrap_or_default()
    };
    // optional fields do not appear in the serialized defaults
    let has = |section: &str, field: &str| {
        fields_of(section).iter().any(|f| f == field) || (section == "experiment" && field == "feature_file")
    };
    if let Some((section, field)) = key.split_once('.') {
        if !SECTIONS.contains(&section) {
            return Err(Error::Config(format!("unknown section `{section}` in override `{key}`")));
        }
        if !has(section, field) {
            return Err(Error::Config(format!("unknown key `{field}` in section [{section}]")));
        }
        return Ok((section.into(), field.into()));
    }
    let matches: Vec<&str> = SECTIONS.iter().copied().filter(|s| has(s, key)).collect();
    match matches.as_slice() {
        [one] => Ok(((*one).into(), key.into())),
        [] => Err(Error::Config(format!("unknown config key `{key}`"))),
        many => Err(Error::Config(format!(
            "key `{key}` is ambiguous, qualify it with one of: {}",
            many.join(", ")
        ))),
    }
}

pub fn apply_override(table: &mut toml::Table, assignment: &str) -> Result<()> {
    let (key, value) = assignment
        .split_once('=')
        .ok_or_else(|| Error::Config(format!("override `{assignment}` is not KEY=VALUE")))?;
    let (section, field) = resolve_key(key.trim())?;
    let entry = table
        .entry(section.clone())
        .or_insert_with(|| toml::Value::Table(toml::Table::new()));
    let sect = entry
        .as_table_mut()
        .ok_or_else(|| Error::Config(format!("[{section}] is not a table")))?;
    sect.insert(field, parse_value(value.trim()));
    Ok(())
}

pub fn parse_config(text: &str, overrides: &[String]) -> Result<ExperimentConfig> {
    let mut table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    for o in overrides {
        apply_override(&mut table, o)?;
    }
    let cfg: ExperimentConfig = toml::Value::Table(table)
        .try_into()
        .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    Ok(cfg)
}

pub fn load_config(path: &Path, overrides: &[String]) -> Result<ExperimentConfig> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Config(format!("cannot read config `{}`: {e}", path.display())))?;
    parse_config(&text, overrides).map_err(|e| match e {
        Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn config_to_toml(cfg: &ExperimentConfig) -> String {
    toml::to_string(cfg).expect("config serializes")
}

/// Reproducibility record written next to every run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub dataset_fingerprint: String,
    pub outputs: BTreeMap<String, String>,
    pub config: ExperimentConfig,
}

impl RunManifest {
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("manifest serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

fn join_f64<I: IntoIterator<Item = Option<f64>>>(it: I) -> String {
    it.into_iter()
        .map(|v| v.map(|x| x.to_string()).unwrap_or_default())
        .collect::<Vec<_>>()
        .join(";")
}

pub const METRICS_HEADER: &str = "round,client_losses,weights,head_loss,accuracy,macro_f1";

pub fn format_metrics_log(records: &[RoundRecord]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.round,
            join_f64(r.client_losses.iter().copied()),
            join_f64(r.weights.iter().map(|&w| Some(w))),
            r.head_loss,
            r.accuracy,
            r.macro_f1
        );
    }
    out
}

/// A metrics-log line read back from disk.
#[derive(Debug, Clone, PartialEq)]
pub struct LoggedRound {
    pub round: usize,
    pub client_losses: Vec<Option<f64>>,
    pub weights: Vec<f64>,
    pub head_loss: f64,
    pub accuracy: f64,
    pub macro_f1: f64,
}

fn parse_list(field: &str) -> Result<Vec<Option<f64>>> {
    if field.is_empty() {
        return Ok(Vec::new());
    }
    field
        .split(';')
        .map(|v| {
            if v.is_empty() {
                Ok(None)
            } else {
                v.parse::<f64>()
                    .map(Some)
                    .map_err(|_| Error::Input(format!("bad number `{v}` in metrics log")))
            }
        })
        .collect()
}

pub fn parse_metrics_log(text: &str) -> Result<Vec<LoggedRound>> {
    let mut lines = text.lines();
    if lines.next() != Some(METRICS_HEADER) {
        return Err(Error::Input("metrics log header missing".into()));
    }
    lines
        .map(|line| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(Error::Input(format!("metrics line has {} fields: `{line}`", f.len())));
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|_| Error::Input(format!("bad number `{s}` in metrics log")))
            };
            Ok(LoggedRound {
                round: f[0]
                    .parse()
                    .map_err(|_| Error::Input(format!("bad round `{}`", f[0])))?,
                client_losses: parse_list(f[1])?,
                weights: parse_list(f[2])?.into_iter().map(|w| w.unwrap_or(0.0)).collect(),
                head_loss: num(f[3])?,
                accuracy: num(f[4])?,
                macro_f1: num(f[5])?,
            })
        })
        .collect()
}

/// Final/best metrics as derived from a run's metrics log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RunSummary {
    pub rounds: usize,
    pub final_accuracy: f64,
    pub final_macro_f1: f64,
    pub best_accuracy: f64,
    pub best_round: usize,
}

pub fn summarize(rounds: &[LoggedRound]) -> Option<RunSummary> {
    let last = rounds.last()?;
    let (best_accuracy, best_round) = rounds.iter().fold((f64::NEG_INFINITY, 0), |b, r| {
        if r.accuracy > b.0 {
            (r.accuracy, r.round)
        } else {
            b
        }
    });
    Some(RunSummary {
        rounds: rounds.len(),
        final_accuracy: last.accuracy,
        final_macro_f1: last.macro_f1,
        best_accuracy,
        best_round,
    })
}

fn write(path: &Path, contents: &str) -> Result<()> {
    fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

/// Write metrics, timing, summary, manifest and final checkpoint of a run.
pub fn write_run_artifacts(dir: &Path, cfg: &ExperimentConfig, result: &ExperimentResult) -> Result<RunSummary> {
    create_dir(dir)?;
    let metrics = format_metrics_log(&result.records);
    write(&dir.join("metrics.csv"), &metrics)?;
    let mut timing = String::from("round,wall_ms\n");
    for r in &result.records {
        let _ = writeln!(timing, "{},{}", r.round, r.wall_ms);
    }
    write(&dir.join("timing.csv"), &timing)?;
    let summary = summarize(&parse_metrics_log(&metrics)?)
        .ok_or_else(|| Error::Invariant("run produced no rounds".into()))?;
    let mut s = String::new();
    let _ = writeln!(s, "rounds = {}", summary.rounds);
    let _ = writeln!(s, "final_accuracy = {:?}", summary.final_accuracy);
    let _ = writeln!(s, "final_macro_f1 = {:?}", summary.final_macro_f1);
    let _ = writeln!(s, "best_accuracy = {:?}", summary.best_accuracy);
    let _ = writeln!(s, "best_round = {}", summary.best_round);
    let _ = writeln!(s, "dataset_fingerprint = \"{}\"", result.split_fingerprint);
    write(&dir.join("summary.toml"), &s)?;
    model::save_checkpoint(&dir.join("model.ckpt"), &result.final_model)?;
    let outputs = ["metrics.csv", "timing.csv", "summary.toml", "model.ckpt", "manifest.toml"]
        .iter()
        .map(|f| (f.trim_end_matches(|c| c != '.').trim_end_matches('.').to_string(), dir.join(f).display().to_string()))
        .collect();
    let manifest = RunManifest {
        version: env!("CARGO_PKG_VERSION").to_string(),
        dataset_fingerprint: result.split_fingerprint.clone(),
        outputs,
        config: cfg.clone(),
    };
    write(&dir.join("manifest.toml"), &manifest.to_toml())?;
    Ok(summary)
}

fn resolve(common: &CommonArgs) -> Result<ExperimentConfig> {
    let mut cfg = load_config(&common.config, &common.overrides)?;
    if let Some(seed) = common.seed {
        cfg.experiment.seed = seed;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run_one(cfg: &ExperimentConfig, dir: &Path, workers: usize) -> Result<(RunSummary, String)> {
    let dataset = load_dataset(cfg)?;
    let result = run_experiment_on(dataset, cfg, workers)?;
    let summary = write_run_artifacts(dir, cfg, &result)?;
    Ok((summary, result.split_fingerprint))
}

fn report(e: &Error) -> i32 {
    eprintln!("error: {e}");
    exit_code(e)
}

pub fn cmd_run(common: &CommonArgs) -> i32 {
    let cfg = match resolve(common) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    match run_one(&cfg, &common.out, common.workers) {
        Ok((s, _)) => {
            println!(
                "{} rounds: final accuracy {:.2}%, macro-F1 {:.2}%, best {:.2}% (round {})",
                s.rounds, s.final_accuracy, s.final_macro_f1, s.best_accuracy, s.best_round
            );
            EXIT_OK
        }
        Err(e) => report(&e),
    }
}

pub const ABLATION_HEADER: &str = "mode,final_accuracy,final_macro_f1,best_accuracy,dataset_fingerprint";

pub fn cmd_ablate(common: &CommonArgs) -> i32 {
    let base = match resolve(common) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    let mut table = String::from(ABLATION_HEADER);
    table.push('\n');
    for mode in AblationMode::ALL {
        let mut cfg = base.clone();
        cfg.experiment.mode = mode;
        let dir = common.out.join(mode.as_str());
        match run_one(&cfg, &dir, common.workers) {
            Ok((s, fp)) => {
                let _ = writeln!(
                    table,
                    "{mode},{},{},{},{fp}",
                    s.final_accuracy, s.final_macro_f1, s.best_accuracy
                );
                println!("{mode:>10}: final accuracy {:.2}%", s.final_accuracy);
            }
            Err(e) => return report(&e),
        }
    }
    if let Err(e) = write(&common.out.join("ablation.csv"), &table) {
        return report(&e);
    }
    EXIT_OK
}

pub const SWEEP_PARAMS: [&str; 5] = ["window_fraction", "r_l", "r_m", "alpha", "tau"];

/// Set a sweepable parameter on a config.
pub fn set_sweep_param(cfg: &mut ExperimentConfig, param: &str, value: f64) -> Result<()> {
    match param {
        "window_fraction" => cfg.train.window_fraction = value,
        "tau" => cfg.train.tau = value,
        "r_l" => cfg.split.r_l = value,
        "r_m" => cfg.split.r_m = value,
        "alpha" => cfg.split.alpha = value,
        other => {
            return Err(Error::Config(format!(
                "cannot sweep `{other}`; choose one of {}",
                SWEEP_PARAMS.join(", ")
            )))
        }
    }
    Ok(())
}

pub fn cmd_sweep(common: &CommonArgs, param: &str, values: &[f64]) -> i32 {
    if !SWEEP_PARAMS.contains(&param) {
        return report(&Error::Config(format!(
            "cannot sweep `{param}`; choose one of {}",
            SWEEP_PARAMS.join(", ")
        )));
    }
    if values.is_empty() {
        return report(&Error::Config("sweep needs at least one value".into()));
    }
    let base = match resolve(common) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    // validate every point before spending compute on any of them
    let mut configs = Vec::with_capacity(values.len());
    for &v in values {
        let mut cfg = base.clone();
        if let Err(e) = set_sweep_param(&mut cfg, param, v).and_then(|_| cfg.validate()) {
            return report(&e);
        }
        configs.push((v, cfg));
    }
    let mut table = format!("{param},final_accuracy,final_macro_f1,best_accuracy\n");
    for (v, cfg) in configs {
        let dir = common.out.join(format!("{param}={v}"));
        match run_one(&cfg, &dir, common.workers) {
            Ok((s, _)) => {
                let _ = writeln!(table, "{v},{},{},{}", s.final_accuracy, s.final_macro_f1, s.best_accuracy);
                println!("{param} = {v}: final accuracy {:.2}%", s.final_accuracy);
            }
            Err(e) => return report(&e),
        }
    }
    if let Err(e) = write(&common.out.join("sweep.csv"), &table) {
        return report(&e);
    }
    EXIT_OK
}

pub fn cmd_partition_inspect(common: &CommonArgs) -> i32 {
    let cfg = match resolve(common) {
        Ok(c) => c,
        Err(e) => return report(&e),
    };
    let result = load_dataset(&cfg).and_then(|d| build_split(d, &cfg.split, cfg.experiment.seed));
    let split = match result {
        Ok(s) => s,
        Err(e) => return report(&e),
    };
    let written = create_dir(&common.out).and_then(|_| write(&common.out.join("split.csv"), &split.manifest()));
    if let Err(e) = written {
        return report(&e);
    }
    println!(
        "{} clients (sizes {:?}), {} labelled on server, {} test; fingerprint {}",
        split.clients.len(),
        split.client_sizes(),
        split.server_labelled.len(),
        split.test.len(),
        split.fingerprint()
    );
    EXIT_OK
}

/// Parse arguments and dispatch; returns the process exit code.
pub fn run_cli<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match &cli.command {
        Command::Run(c) => cmd_run(c),
        Command::Ablate(c) => cmd_ablate(c),
        Command::Sweep { common, param, values } => cmd_sweep(common, param, values),
        Command::PartitionInspect(c) => cmd_partition_inspect(c),
    }
}
