//! Operator surface for divtt: configuration layering, training runs,
//! property suites, diagnostics and charts.

use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use divtt_core::envs::{Relabeled, ENVIRONMENT_NAMES};
use divtt_core::metrics::{
    diagnose_csv, diagnose_row, diagnose_text, emit_plots, epoch_summaries, write_summaries_csv,
    PlotSeries,
};
use divtt_core::propcheck::{run_suite, Suite};
use divtt_core::{
    environment_by_name, run_training, Environment, FamilyRules, RunLog, RunMode, RunOptions,
    TrainerConfig,
};
use serde::{Deserialize, Serialize};

/// Environment variable naming the root that relative output paths hang off.
pub const OUTPUT_ROOT_VAR: &str = "DIVTT_OUT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub mod exit {
    pub const OK: u8 = 0;
    pub const RUNTIME: u8 = 1;
    pub const USAGE: u8 = 2;
    pub const CONFIG: u8 = 3;
    pub const PROPERTY: u8 = 4;
}

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("property check failed: {0}")]
    Property(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => exit::USAGE,
            CliError::Config(_) => exit::CONFIG,
            CliError::Property(_) => exit::PROPERTY,
            CliError::Runtime(_) => exit::RUNTIME,
        }
    }
}

impl From<divtt_core::Error> for CliError {
    fn from(e: divtt_core::Error) -> Self {
        match e {
            divtt_core::Error::Config { .. } | divtt_core::Error::FamilyRule { .. } => {
                CliError::Config(e.to_string())
            }
            other => CliError::Runtime(other.to_string()),
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Runtime(format!("{}: {e}", path.display()))
}

#[derive(Parser, Debug)]
#[command(name = "divtt", version, about = "Adapter-ensemble test-time training on toy discovery tasks")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Train one run per seed and write logs, checkpoints and summaries.
    Train(TrainArgs),
    /// Run the executable property suites.
    Propcheck(PropcheckArgs),
    /// Length-reward rank correlations of finished runs.
    Diagnose(DiagnoseArgs),
    /// Family-entropy, best-reward and family-composition charts.
    Plot(PlotArgs),
    /// Print the resolved training configuration as TOML.
    PrintConfig(ConfigArgs),
}

fn parse_mode(s: &str) -> Result<RunMode, String> {
    RunMode::parse(s).ok_or_else(|| {
        let names: Vec<&str> = RunMode::ALL.iter().map(|m| m.as_str()).collect();
        format!("unknown mode `{s}` (expected one of {})", names.join(", "))
    })
}

fn parse_suite(s: &str) -> Result<Suite, String> {
    Suite::parse(s).ok_or_else(|| {
        let names: Vec<&str> = Suite::ALL.iter().map(|m| m.as_str()).collect();
        format!("unknown suite `{s}` (expected one of {})", names.join(", "))
    })
}

/// Flags shared by `train` and `print-config`.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// Run manifest (TOML).
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Trainer configuration (TOML); unknown keys are rejected.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// method, baseline-k1, ablate-no-nnm or ablate-no-mi.
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<RunMode>,
    /// Enable the streaming early-stop gate.
    #[arg(long, conflicts_with = "no_streaming")]
    pub streaming: bool,
    #[arg(long)]
    pub no_streaming: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainArgs {
    #[command(flatten)]
    pub config: ConfigArgs,
    /// Environment name.
    #[arg(long)]
    pub env: Option<String>,
    /// Ordered family rules file (`<label> <regex>` per line).
    #[arg(long)]
    pub rules: Option<PathBuf>,
    /// Comma-separated run seeds.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Output directory; relative paths are taken under the output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads for generation and scoring.
    #[arg(long)]
    pub workers: Option<usize>,
    /// Skip the per-epoch ensemble checkpoints.
    #[arg(long)]
    pub no_checkpoints: bool,
}

#[derive(Args, Debug, Clone)]
pub struct PropcheckArgs {
    /// Suites to run; all of them when omitted.
    #[arg(value_parser = parse_suite)]
    pub suites: Vec<Suite>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// One JSON report per suite instead of text lines.
    #[arg(long)]
    pub json: bool,
}

#[derive(Args, Debug, Clone)]
pub struct DiagnoseArgs {
    /// Run directories or rollouts files.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Also write the table as CSV.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Args, Debug, Clone)]
pub struct PlotArgs {
    /// Method run directories.
    pub runs: Vec<PathBuf>,
    /// Baseline run directories.
    #[arg(long)]
    pub baseline: Vec<PathBuf>,
    /// Chart directory; relative paths are taken under the output root.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Run description. Every field is optional so that manifests and command
/// lines can be layered over each other.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub config: Option<PathBuf>,
    pub env: Option<String>,
    pub rules: Option<PathBuf>,
    pub mode: Option<RunMode>,
    pub streaming: Option<bool>,
    pub seeds: Option<Vec<u64>>,
    pub output: Option<PathBuf>,
}

impl RunManifest {
    /// Reads a manifest; `config` and `rules` are taken relative to its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
        let mut m: RunManifest = toml::from_str(&text)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let dir = path.parent().unwrap_or(Path::new(""));
        m.config = m.config.map(|p| dir.join(p));
        m.rules = m.rules.map(|p| dir.join(p));
        Ok(m)
    }

    /// Fields set here win; unset ones fall through to `lower`.
    pub fn over(self, lower: RunManifest) -> RunManifest {
        RunManifest {
            config: self.config.or(lower.config),
            env: self.env.or(lower.env),
            rules: self.rules.or(lower.rules),
            mode: self.mode.or(lower.mode),
            streaming: self.streaming.or(lower.streaming),
            seeds: self.seeds.or(lower.seeds),
            output: self.output.or(lower.output),
        }
    }
}

impl ConfigArgs {
    fn streaming_flag(&self) -> Option<bool> {
        match (self.streaming, self.no_streaming) {
            (true, _) => Some(true),
            (_, true) => Some(false),
            _ => None,
        }
    }

    /// The command-line layer, without the manifest file.
    pub fn layer(&self) -> RunManifest {
        RunManifest {
            config: self.config.clone(),
            mode: self.mode,
            streaming: self.streaming_flag(),
            ..RunManifest::default()
        }
    }

    /// Command line over manifest file.
    pub fn layered(&self) -> Result<RunManifest, CliError> {
        let file = match &self.manifest {
            Some(p) => RunManifest::load(p)?,
            None => RunManifest::default(),
        };
        Ok(self.layer().over(file))
    }
}

impl TrainArgs {
    pub fn layer(&self) -> RunManifest {
        RunManifest {
            env: self.env.clone(),
            rules: self.rules.clone(),
            seeds: (!self.seeds.is_empty()).then(|| self.seeds.clone()),
            output: self.out.clone(),
            ..self.config.layer()
        }
    }

    pub fn layered(&self) -> Result<RunManifest, CliError> {
        let file = match &self.config.manifest {
            Some(p) => RunManifest::load(p)?,
            None => RunManifest::default(),
        };
        Ok(self.layer().over(file))
    }
}

pub fn load_config(path: &Path) -> Result<TrainerConfig, CliError> {
    let text = fs::read_to_string(path).map_err(|e| io_error(path, e))?;
    toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
}

/// A manifest with every layer applied.
#[derive(Clone, Debug, PartialEq)]
pub struct ResolvedRun {
    pub config: TrainerConfig,
    pub mode: RunMode,
    pub env: Option<String>,
    pub rules: Option<PathBuf>,
    pub seeds: Vec<u64>,
    pub output: Option<PathBuf>,
}

/// Applies the layers over the built-in defaults. The mode's forced
/// settings are applied last.
pub fn resolve(m: RunManifest) -> Result<ResolvedRun, CliError> {
    let mut config = match &m.config {
        Some(p) => load_config(p)?,
        None => TrainerConfig::default(),
    };
    if let Some(s) = m.streaming {
        config.streaming_enabled = s;
    }
    let mode = m.mode.unwrap_or_default();
    mode.apply(&mut config);
    let seeds = m.seeds.unwrap_or_else(|| vec![config.seed]);
    if seeds.is_empty() {
        return Err(CliError::Config("seeds: at least one seed is required".into()));
    }
    config.validate()?;
    Ok(ResolvedRun {
        config,
        mode,
        env: m.env,
        rules: m.rules,
        seeds,
        output: m.output,
    })
}

pub fn output_root() -> PathBuf {
    std::env::var_os(OUTPUT_ROOT_VAR)
        .filter(|v| !v.is_empty())
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT))
}

fn under_root(root: &Path, path: &Path) -> PathBuf {
    if path.is_absolute() {
        path.to_path_buf()
    } else {
        root.join(path)
    }
}

pub fn build_environment(
    name: &str,
    rules: Option<&Path>,
) -> Result<Arc<dyn Environment>, CliError> {
    let env = environment_by_name(name).map_err(|_| {
        CliError::Usage(format!(
            "unknown environment `{name}` (expected one of {})",
            ENVIRONMENT_NAMES.join(", ")
        ))
    })?;
    match rules {
        None => Ok(env),
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| io_error(p, e))?;
            let rules = FamilyRules::parse(&text)
                .map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            Ok(Arc::new(Relabeled::new(env, rules)))
        }
    }
}

/// Knobs whose values are shrunk to toy dimensions, with the setting used
/// on full-size models.
pub const SCALED_KNOBS: &[(&str, &str)] = &[
    ("policy.vocab_size", "152064"),
    ("policy.feature_dim", "4096"),
    ("policy.tracked_layers", "every attention projection"),
    ("policy.adapter_rank", "16"),
    ("policy.lora_alpha", "32"),
    ("learning_rate", "4e-5"),
    ("group_size", "8; raised so the ensemble size divides it"),
    ("limits.max_tokens", "32768"),
    ("limits.phase1_cap", "4096"),
    ("limits.phase2_budget", "6000"),
    ("streaming.window", "4096"),
    ("streaming.check_interval", "2048"),
    ("streaming.min_tokens_before_check", "4096"),
];

fn lookup<'a>(value: &'a toml::Value, dotted: &str) -> Option<&'a toml::Value> {
    dotted.split('.').try_fold(value, |v, key| v.get(key))
}

/// TOML for a resolved configuration, followed by comments flagging the
/// scaled knobs. The output parses back into the same configuration.
pub fn render_config(run: &ResolvedRun) -> Result<String, CliError> {
    let body = toml::to_string(&run.config)
        .map_err(|e| CliError::Runtime(format!("serializing config: {e}")))?;
    let tree = toml::Value::try_from(&run.config)
        .map_err(|e| CliError::Runtime(format!("serializing config: {e}")))?;
    let mut out = format!("# mode: {}\n", run.mode.as_str());
    out.push_str(&body);
    out.push_str("\n# Scaled to toy dimensions (current value, full-size setting):\n");
    for (key, reference) in SCALED_KNOBS {
        let current = lookup(&tree, key).map(|v| v.to_string()).unwrap_or_default();
        out.push_str(&format!("#   {key} = {current}  (full size: {reference})\n"));
    }
    out.push_str("#   LoRA dropout: not modelled (full size: 0.05)\n");
    Ok(out)
}

pub fn cmd_print_config(args: &ConfigArgs) -> Result<String, CliError> {
    render_config(&resolve(args.layered()?)?)
}

#[derive(Clone, Debug)]
pub struct SeedOutcome {
    pub seed: u64,
    pub dir: PathBuf,
    pub digest: String,
}

pub const CONFIG_FILE: &str = "config.toml";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const DIGEST_FILE: &str = "digest.txt";

/// Trains every seed of the resolved run into `<out>/seed-<n>/`.
pub fn cmd_train(args: &TrainArgs, root: &Path) -> Result<Vec<SeedOutcome>, CliError> {
    let run = resolve(args.layered()?)?;
    let env_name = run.env.clone().ok_or_else(|| {
        CliError::Usage("no environment given; pass --env or set `env` in the manifest".into())
    })?;
    let env = build_environment(&env_name, run.rules.as_deref())?;
    let out = under_root(
        root,
        &run.output
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("{env_name}-{}", run.mode.as_str()))),
    );

    let mut outcomes = Vec::new();
    for &seed in &run.seeds {
        let dir = out.join(format!("seed-{seed}"));
        fs::create_dir_all(&dir).map_err(|e| io_error(&dir, e))?;
        let config = TrainerConfig {
            seed,
            ..run.config.clone()
        };
        let single = ResolvedRun {
            config: config.clone(),
            seeds: vec![seed],
            ..run.clone()
        };
        let config_path = dir.join(CONFIG_FILE);
        fs::write(&config_path, render_config(&single)?).map_err(|e| io_error(&config_path, e))?;

        let options = RunOptions {
            workers: args.workers,
            checkpoint_dir: (!args.no_checkpoints).then(|| dir.join("checkpoints")),
        };
        let outcome = run_training(&*env, &config, &options)?;
        outcome.log.write_dir(&dir)?;
        write_summaries_csv(&dir.join(SUMMARY_FILE), &epoch_summaries(&outcome.log))?;
        let digest = outcome.log.digest()?;
        let digest_path = dir.join(DIGEST_FILE);
        fs::write(&digest_path, format!("{digest}\n")).map_err(|e| io_error(&digest_path, e))?;
        outcomes.push(SeedOutcome { seed, dir, digest });
    }
    Ok(outcomes)
}

/// Runs the suites and returns their report text. Any failing check turns
/// into a property error carrying the full report.
pub fn cmd_propcheck(args: &PropcheckArgs) -> Result<String, CliError> {
    let suites: Vec<Suite> = if args.suites.is_empty() {
        Suite::ALL.to_vec()
    } else {
        args.suites.clone()
    };
    let mut out = String::new();
    let mut failed = Vec::new();
    for suite in suites {
        let report = run_suite(suite, args.seed)?;
        if args.json {
            let line = serde_json::to_string(&report)
                .map_err(|e| CliError::Runtime(format!("serializing report: {e}")))?;
            out.push_str(&line);
            out.push('\n');
        } else {
            for line in report.lines() {
                out.push_str(&line);
                out.push('\n');
            }
        }
        failed.extend(
            report
                .lines()
                .into_iter()
                .zip(&report.checks)
                .filter(|(_, c)| !c.passed)
                .map(|(l, _)| l),
        );
    }
    if failed.is_empty() {
        Ok(out)
    } else {
        Err(CliError::Property(format!("{}\n{}", failed.join("\n"), out.trim_end())))
    }
}

fn run_label(path: &Path) -> String {
    let named = if path.is_file() { path.parent().filter(|p| !p.as_os_str().is_empty()) } else { None };
    let base = named.unwrap_or(path);
    base.file_name()
        .map(|n| n.to_string_lossy().into_owned())
        .unwrap_or_else(|| base.display().to_string())
}

fn read_log(path: &Path) -> Result<RunLog, CliError> {
    RunLog::read(path).map_err(|e| io_error(path, e))
}

pub fn cmd_diagnose(args: &DiagnoseArgs) -> Result<String, CliError> {
    let mut rows = Vec::new();
    for path in &args.runs {
        rows.push(diagnose_row(&run_label(path), &read_log(path)?));
    }
    if let Some(csv) = &args.csv {
        fs::write(csv, diagnose_csv(&rows)?).map_err(|e| io_error(csv, e))?;
    }
    Ok(diagnose_text(&rows))
}

pub fn cmd_plot(args: &PlotArgs, root: &Path) -> Result<Vec<PathBuf>, CliError> {
    if args.runs.is_empty() && args.baseline.is_empty() {
        return Err(CliError::Usage("plot needs at least one run directory".into()));
    }
    let mut series = Vec::new();
    for (paths, baseline) in [(&args.runs, false), (&args.baseline, true)] {
        for path in paths {
            series.push(PlotSeries {
                label: run_label(path),
                baseline,
                summaries: epoch_summaries(&read_log(path)?),
            });
        }
    }
    let dir = under_root(root, args.out.as_deref().unwrap_or(Path::new("plots")));
    Ok(emit_plots(&series, &dir)?)
}

/// Dispatches a parsed command line and prints its output.
pub fn run(cli: Cli, root: &Path) -> Result<(), CliError> {
    match cli.command {
        Command::Train(args) => {
            for o in cmd_train(&args, root)? {
                println!("seed {} digest {} {}", o.seed, o.digest, o.dir.display());
            }
        }
        Command::Propcheck(args) => print!("{}", cmd_propcheck(&args)?),
        Command::Diagnose(args) => print!("{}", cmd_diagnose(&args)?),
        Command::Plot(args) => {
            for p in cmd_plot(&args, root)? {
                println!("{}", p.display());
            }
        }
        Command::PrintConfig(args) => print!("{}", cmd_print_config(&args)?),
    }
    Ok(())
}
