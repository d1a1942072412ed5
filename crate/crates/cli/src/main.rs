//! `ctxcompat`: world generation, training, evaluation, ablation sweeps and
//! gradient checks over the synthetic compatibility world.
//!
//! Exit codes: 0 success, 1 configuration error, 2 training divergence,
//! 3 integrity failure (hash mismatch, corrupt artifact, gradient check).

mod commands;
mod config;
mod manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use ctxcompat::objective::{FusionKind, Preset};
use ctxcompat::scoring::ProtocolKind;

#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub msg: String,
}

impl Failure {
    pub fn config(msg: impl Into<String>) -> Self {
        Self {
            code: 1,
            msg: msg.into(),
        }
    }

    pub fn integrity(msg: impl Into<String>) -> Self {
        Self {
            code: 3,
            msg: msg.into(),
        }
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.msg)
    }
}

impl From<ctxcompat::Error> for Failure {
    fn from(e: ctxcompat::Error) -> Self {
        let code = match e {
            ctxcompat::Error::Divergence { .. } => 2,
            ctxcompat::Error::Integrity(_) => 3,
            _ => 1,
        };
        Self {
            code,
            msg: e.to_string(),
        }
    }
}

impl From<ctxcompat::diffcore::DiffError> for Failure {
    fn from(e: ctxcompat::diffcore::DiffError) -> Self {
        ctxcompat::Error::from(e).into()
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Self::config(e.to_string())
    }
}

#[derive(Parser)]
#[command(
    name = "ctxcompat",
    version,
    about = "Contextual compatibility anomaly detection on a synthetic world"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a world and its train / val / cross-context splits.
    Gen(GenArgs),
    /// Few-shot training of one model; writes a checkpoint and history.
    Train(TrainArgs),
    /// Evaluate a trained run, fresh seeds, an untrained model or the oracle.
    Eval(EvalArgs),
    /// Run an ablation grid and print the comparison table.
    Ablate(AblateArgs),
    /// Analytic vs central-difference gradients of L_text, L_img, L_total.
    Gradcheck(GradcheckArgs),
}

/// Flags shared by every command; each overrides the config file.
#[derive(Args, Clone, Default)]
pub struct Common {
    /// TOML config, or a `run.json` manifest to re-execute.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training schedule: table7 (default), b1-protocol, desk.
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; defaults to `$CTXCOMPAT_OUT/<command>-...`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Flags that shape a training run.
#[derive(Args, Clone, Default)]
pub struct TrainFlags {
    /// Shots per class and label.
    #[arg(long)]
    pub shots: Option<usize>,
    /// Epochs for both stages.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Text-adapter stage epochs.
    #[arg(long)]
    pub epochs_stage1: Option<usize>,
    /// Visual-adapter stage epochs.
    #[arg(long)]
    pub epochs_stage2: Option<usize>,
    /// average, static, concat or crm.
    #[arg(long, value_parser = parse_fusion)]
    pub fusion: Option<FusionKind>,
    /// fewshot_cc, normal_only_cc or in_distribution.
    #[arg(long, value_parser = parse_protocol)]
    pub protocol: Option<ProtocolKind>,
    /// Keep the text objective live while training the visual adapters.
    #[arg(long)]
    pub joint: bool,
    /// Skip pixel AUROC and PRO.
    #[arg(long)]
    pub no_pixels: bool,
}

#[derive(Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    /// Per-class Jaccard band between same- and cross-context context sets.
    #[arg(long, value_parser = config::parse_band)]
    pub jaccard: Option<(f64, f64)>,
}

#[derive(Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Dataset directory written by `gen`.
    #[arg(long)]
    pub data: PathBuf,
}

#[derive(Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory from `train`; evaluates its checkpoints.
    #[arg(long, conflicts_with_all = ["oracle", "untrained"])]
    pub run: Option<PathBuf>,
    /// Score with the true labels.
    #[arg(long)]
    pub oracle: bool,
    /// Evaluate freshly initialized models.
    #[arg(long)]
    pub untrained: bool,
    /// Seeds to train and aggregate when no run is given.
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum Suite {
    Components,
    Branches,
    Fusion,
    NormalOnly,
    LossWeights,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Components => "components",
            Suite::Branches => "branches",
            Suite::Fusion => "fusion",
            Suite::NormalOnly => "normal_only",
            Suite::LossWeights => "loss_weights",
        }
    }
}

#[derive(Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub flags: TrainFlags,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum)]
    pub suite: Suite,
    #[arg(long, default_value_t = 3)]
    pub seeds: u64,
    /// Values swept per weight by the loss_weights suite.
    #[arg(long, value_delimiter = ',', default_value = "0,0.05,0.1,0.5,1")]
    pub grid: Vec<f64>,
}

#[derive(Args)]
pub struct GradcheckArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset directory; a world is generated from the config when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub seeds: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    Preset::parse(s).map_err(|e| e.to_string())
}

fn parse_fusion(s: &str) -> Result<FusionKind, String> {
    FusionKind::parse(s).map_err(|e| e.to_string())
}

fn parse_protocol(s: &str) -> Result<ProtocolKind, String> {
    ProtocolKind::parse(s).map_err(|e| e.to_string())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Gradcheck(a) => commands::gradcheck(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
    }
}
