//! `acla` command-line runner.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data error,
//! 3 numerical failure.

mod commands;
mod config;
mod manifest;
mod svg;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use acla::data::DataError;
use acla::eval::EvalError;
use acla::features::FeatureError;
use acla::model::ModelError;
use acla::odesolve::SolveError;
use acla::train::TrainError;

#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl Failure {
    pub fn code(&self) -> u8 {
        match self {
            Failure::Usage(_) => 1,
            Failure::Data(_) => 2,
            Failure::Numeric(_) => 3,
        }
    }

    pub fn message(&self) -> &str {
        match self {
            Failure::Usage(m) | Failure::Data(m) | Failure::Numeric(m) => m,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<FeatureError> for Failure {
    fn from(e: FeatureError) -> Self {
        Failure::Data(e.to_string())
    }
}

impl From<DataError> for Failure {
    fn from(e: DataError) -> Self {
        match e {
            DataError::InvalidSpec(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<SolveError> for Failure {
    fn from(e: SolveError) -> Self {
        match e {
            SolveError::InvalidSpec(_) => Failure::Usage(e.to_string()),
            _ => Failure::Numeric(e.to_string()),
        }
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        match e {
            ModelError::InvalidConfig(_) => Failure::Usage(e.to_string()),
            ModelError::Solve(s) => s.into(),
            ModelError::NonFinite { .. } | ModelError::Autodiff(_) => Failure::Numeric(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::InvalidConfig(_) | TrainError::IterOutOfRange { .. } => Failure::Usage(e.to_string()),
            TrainError::Diverged { .. } | TrainError::NonFiniteGradient { .. } | TrainError::Autodiff(_) => {
                Failure::Numeric(e.to_string())
            }
            TrainError::Solve(s) => s.into(),
            TrainError::Model(m) => m.into(),
            TrainError::LengthMismatch { .. } | TrainError::NoSeries => Failure::Data(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::Data(d) => d.into(),
            EvalError::Model(m) => m.into(),
            EvalError::Train(t) => t.into(),
            EvalError::InvalidSweep(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "acla", version, about = "Battery SOH and EOL prediction with attention-augmented neural ODEs")]
pub struct Cli {
    /// Seed for parameter initialization and sweep cells.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// key = value config file (model.*, train.*, run.* or synth.* keys).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output file or directory, depending on the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Worker threads for sweeps.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// Overrides a config key; repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic battery: cycle CSVs, capacity index and truth file.
    Synth,
    /// Extract the feature CSV of one battery from its cycle directory.
    Extract(ExtractArgs),
    /// Train a model and write a checkpoint plus loss history.
    Train(TrainArgs),
    /// Evaluate a checkpoint on feature files.
    Eval(EvalArgs),
    /// Run an attention-placement or training-fraction sweep.
    Sweep(SweepArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GridArg {
    Oxford,
    Nasa,
    Tju,
    Hust,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Directory with cycle_<k>.csv files and capacity.csv.
    #[arg(long)]
    pub data: PathBuf,
    /// Voltage grid preset.
    #[arg(long, conflicts_with = "segments")]
    pub grid: Option<GridArg>,
    /// Custom grid as lo:hi:n segments, comma separated.
    #[arg(long)]
    pub segments: Option<String>,
    /// Fresh capacity in Ah; defaults to the first cycle's capacity.
    #[arg(long)]
    pub q0: Option<f64>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum VariantArg {
    Node,
    Anode,
    Acl,
    Acla,
}

impl From<VariantArg> for acla::model::Variant {
    fn from(v: VariantArg) -> Self {
        match v {
            VariantArg::Node => Self::Node,
            VariantArg::Anode => Self::Anode,
            VariantArg::Acl => Self::Acl,
            VariantArg::Acla => Self::Acla,
        }
    }
}

#[derive(Debug, Args)]
pub struct RunArgs {
    /// Feature CSV files, one battery each.
    #[arg(long, required = true, num_args = 1..)]
    pub features: Vec<PathBuf>,
    /// Model variant; adjusts attention and augmentation to match.
    #[arg(long)]
    pub variant: Option<VariantArg>,
    /// Training fraction (overrides run.split).
    #[arg(long)]
    pub split: Option<f64>,
    /// Points kept per battery by uniform subsampling, or 0 to keep all
    /// (overrides run.subsample).
    #[arg(long)]
    pub subsample: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: RunArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub run: RunArgs,
    /// truth.csv per feature file, in the same order, for reference EOLs.
    #[arg(long, num_args = 1..)]
    pub truth: Vec<PathBuf>,
    /// Also write an SVG plot per battery.
    #[arg(long)]
    pub svg: bool,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum SweepKind {
    Attention,
    Split,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    pub kind: SweepKind,
    #[command(flatten)]
    pub run: RunArgs,
    #[arg(long, num_args = 1..)]
    pub truth: Vec<PathBuf>,
    /// Dataset label in the table.
    #[arg(long, default_value = "data")]
    pub dataset: String,
    /// Write NA wall times so reruns are byte-identical.
    #[arg(long)]
    pub omit_timing: bool,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
