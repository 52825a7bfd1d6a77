mod commands;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use adaeval::model::{GatePolicy, ModelConfig, SyncMode};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Adaptive coarse-to-fine sequence classification: data generation,
/// training, evaluation and ablations.
#[derive(Debug, Parser)]
#[command(name = "adaeval", version)]
pub struct Cli {
    /// Number of independent runs executed in parallel.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    GenData(GenDataArgs),
    /// Train a model and write a checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint offline or under per-video budgets.
    Eval(EvalArgs),
    /// Train and evaluate a matched set of variants.
    Ablate(AblateArgs),
    /// Collect results.json files into one CSV.
    Report(ReportArgs),
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Ablate(_) => "ablate",
            Command::Report(_) => "report",
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct GenDataArgs {
    /// Generator spec (JSON). Built-in default when omitted.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub train: usize,
    #[arg(long, default_value_t = 500)]
    pub val: usize,
    #[arg(long, default_value_t = 500)]
    pub test: usize,
    /// Overrides the spec's seed.
    #[arg(long, env = "ADAEVAL_SEED")]
    pub seed: Option<u64>,
}

/// Model and optimizer overrides shared by `train` and `ablate`.
#[derive(Debug, Clone, Args, Serialize)]
pub struct ModelFlags {
    /// Target fraction of fine reads.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Weight of the usage penalty.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Coarse LSTM hidden size.
    #[arg(long)]
    pub hc: Option<usize>,
    /// Fine LSTM hidden size.
    #[arg(long)]
    pub hf: Option<usize>,
    #[arg(long)]
    pub tau0: Option<f64>,
    #[arg(long)]
    pub tau_min: Option<f64>,
    #[arg(long)]
    pub tau_decay: Option<f64>,
    #[arg(long, env = "ADAEVAL_SEED")]
    pub seed: Option<u64>,
}

impl ModelFlags {
    pub fn apply(&self, cfg: &mut ModelConfig) {
        let set = |slot: &mut f64, v: Option<f64>| {
            if let Some(v) = v {
                *slot = v;
            }
        };
        set(&mut cfg.gamma, self.gamma);
        set(&mut cfg.lambda, self.lambda);
        set(&mut cfg.learning_rate, self.lr);
        set(&mut cfg.tau.tau0, self.tau0);
        set(&mut cfg.tau.tau_min, self.tau_min);
        set(&mut cfg.tau.decay_rate, self.tau_decay);
        cfg.epochs = self.epochs.unwrap_or(cfg.epochs);
        cfg.batch_size = self.batch_size.unwrap_or(cfg.batch_size);
        cfg.coarse_hidden = self.hc.unwrap_or(cfg.coarse_hidden);
        cfg.fine_hidden = self.hf.unwrap_or(cfg.fine_hidden);
        cfg.seed = self.seed.unwrap_or(cfg.seed);
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// Dataset directory (or its manifest.json).
    #[arg(long)]
    pub data: PathBuf,
    /// Checkpoint directory.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Read fine features at every step (plain LSTM over both streams).
    #[arg(long, conflicts_with = "force_coarse")]
    pub force_fine: bool,
    /// Never read fine features.
    #[arg(long)]
    pub force_coarse: bool,
    /// Keep the fine state unchanged on skipped steps.
    #[arg(long)]
    pub no_sync: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum EvalMode {
    Offline,
    Online,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum CostModeArg {
    Paper,
    Full,
}

/// A per-video budget: a number of fine reads, or `inf`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget(pub Option<usize>);

impl FromStr for Budget {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "inf" => Ok(Budget(None)),
            t => t
                .parse()
                .map(|k| Budget(Some(k)))
                .map_err(|_| format!("budget must be a non-negative integer or \"inf\", got {t:?}")),
        }
    }
}

impl Serialize for Budget {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self.0 {
            Some(k) => s.serialize_u64(k as u64),
            None => s.serialize_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct EvalArgs {
    /// Checkpoint directory (header.json + params.bin).
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, value_enum, default_value_t = EvalMode::Offline)]
    pub mode: EvalMode,
    /// Budgets for online mode, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    pub budgets: Vec<Budget>,
    #[arg(long, value_enum, default_value_t = CostModeArg::Full)]
    pub cost_mode: CostModeArg,
    /// Always-fine checkpoint; adds Uniform-K and Seq-K rows in online mode.
    #[arg(long)]
    pub baseline_ckpt: Option<PathBuf>,
    /// Output directory for results.json and curves.csv.
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationKind {
    Sync,
    Gamma,
    Hidden,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub what: AblationKind,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelFlags,
    /// Values to sweep: gamma values, or coarse hidden sizes.
    /// Defaults: 0.05,0.2,0.5 for gamma; 2,8,32 for hidden, where Hf
    /// defaults to 64 so every swept Hc stays below it.
    #[arg(long, value_delimiter = ',')]
    pub values: Option<Vec<f64>>,
    /// Split the variants are compared on.
    #[arg(long, default_value = "val")]
    pub split: String,
    #[arg(long, value_enum, default_value_t = CostModeArg::Full)]
    pub cost_mode: CostModeArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ReportArgs {
    /// Directory searched recursively for results.json files.
    #[arg(long)]
    pub runs: PathBuf,
    #[arg(long)]
    #[serde(skip)]
    pub out: PathBuf,
}

impl TrainArgs {
    pub fn gate(&self) -> GatePolicy {
        if self.force_fine {
            GatePolicy::AlwaysFine
        } else if self.force_coarse {
            GatePolicy::AlwaysCoarse
        } else {
            GatePolicy::Learned
        }
    }

    pub fn sync(&self) -> SyncMode {
        if self.no_sync {
            SyncMode::Keep
        } else {
            SyncMode::Copy
        }
    }
}

fn report_error(kind: &str, message: &str, command: Option<&str>) {
    let line = serde_json::json!({
        "error": {
            "kind": kind,
            "command": command,
            "message": message,
        }
    });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            report_error("usage", first.trim_start_matches("error: "), None);
            return ExitCode::from(2);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report_error(e.kind(), &e.to_string(), Some(cli.command.name()));
            ExitCode::FAILURE
        }
    }
}
