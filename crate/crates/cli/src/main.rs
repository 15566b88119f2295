//! `weakmil`: synthesize corpora, extract features, train MIL scorers and
//! evaluate them at a fixed false-positive budget.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use weakmil::{Error, ModelKind, OptimizerKind, Split};

#[derive(Parser, Debug)]
#[command(name = "weakmil", version, about, long_about = None)]
#[command(after_help = "Exit codes: 0 success, 2 configuration error, 3 data or format error, 4 numeric divergence.")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic weakly labeled video corpus and its manifest.
    Synth(SynthArgs),
    /// Compute per-segment descriptors for every bag of a manifest.
    Features(FeaturesArgs),
    /// Train a Deep MIL or attention MIL scorer with validation-based selection.
    Train(TrainArgs),
    /// Pick the score threshold meeting a false-positive budget on clean bags.
    Tune(TuneArgs),
    /// Score a split and write metrics.csv, roc.csv and per_kind.csv.
    Eval(EvalArgs),
    /// Non-learned reference detectors.
    #[command(subcommand)]
    Baseline(Baseline),
}

#[derive(Args, Debug, Clone, Copy)]
struct GeometryArgs {
    /// Frames per bag.
    #[arg(long, default_value_t = weakmil::video::BAG_LEN)]
    bag_len: usize,
    /// Frames per segment; must divide the bag length.
    #[arg(long, default_value_t = weakmil::video::SEG_LEN)]
    seg_len: usize,
}

impl GeometryArgs {
    fn geometry(self) -> weakmil::Result<weakmil::BagGeometry> {
        let g = weakmil::BagGeometry {
            bag_len: self.bag_len,
            seg_len: self.seg_len,
        };
        g.validate()?;
        Ok(g)
    }
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// Generator config (JSON with a `version` field).
    #[arg(long)]
    config: PathBuf,
    /// Output directory for `manifest.json` and `videos/`.
    #[arg(long)]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum Extractor {
    /// 1176-dim mean and temporal-difference descriptor.
    Builtin,
    /// Precomputed WMIL file, one bag per manifest video in manifest order.
    Import,
}

#[derive(Args, Debug)]
struct FeaturesArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Output directory; receives `{split}.wmil` and `{split}.json`.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = Extractor::Builtin)]
    extractor: Extractor,
    /// WMIL file to import (required with `--extractor import`).
    #[arg(long)]
    from: Option<PathBuf>,
    #[command(flatten)]
    geometry: GeometryArgs,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum ModelArg {
    DeepMil,
    Attention,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::DeepMil => ModelKind::DeepMil,
            ModelArg::Attention => ModelKind::Attention,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum OptimizerArg {
    Adagrad,
    Adam,
}

impl From<OptimizerArg> for OptimizerKind {
    fn from(o: OptimizerArg) -> Self {
        match o {
            OptimizerArg::Adagrad => OptimizerKind::Adagrad,
            OptimizerArg::Adam => OptimizerKind::Adam,
        }
    }
}

#[derive(Args, Debug)]
struct TrainArgs {
    /// Feature directory written by `features`; uses its train and validation splits.
    #[arg(long)]
    features: PathBuf,
    /// Output directory for model.wmck, last.wmck, state.wmrs, train_log.csv and train_config.json.
    #[arg(long)]
    out: PathBuf,
    /// Training config (JSON with a `version` field); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Objective [default: deep-mil].
    #[arg(long, value_enum)]
    model: Option<ModelArg>,
    /// Seed for initialization, batch sampling and dropout [default: 0].
    #[arg(long)]
    seed: Option<u64>,
    /// Total epochs [default: 30].
    #[arg(long)]
    epochs: Option<usize>,
    /// Optimizer [default: adagrad for deep-mil, adam for attention].
    #[arg(long, value_enum)]
    optimizer: Option<OptimizerArg>,
    /// Learning rate [default: 0.1 for adagrad (eps 1e-8), 1e-3 for adam (0.9, 0.999, 1e-8)].
    #[arg(long)]
    lr: Option<f64>,
    /// Weight-matrix L2 coefficient [default: 0.001].
    #[arg(long)]
    lambda: Option<f64>,
    /// Hidden-activation dropout rate [default: 0.6].
    #[arg(long)]
    dropout: Option<f64>,
    /// Corrupted bags per batch, each paired with a normal bag [default: 30, i.e. 30+30].
    #[arg(long)]
    pairs_per_batch: Option<usize>,
    /// Continue from a saved training state; `--epochs` is the new total.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum SplitArg {
    Train,
    Validation,
    Test,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Self {
        match s {
            SplitArg::Train => Split::Train,
            SplitArg::Validation => Split::Validation,
            SplitArg::Test => Split::Test,
        }
    }
}

#[derive(ValueEnum, Clone, Copy, Debug, PartialEq, Eq)]
enum GranularityArg {
    Bag,
    Segment,
}

impl From<GranularityArg> for weakmil::Granularity {
    fn from(g: GranularityArg) -> Self {
        match g {
            GranularityArg::Bag => weakmil::Granularity::Bag,
            GranularityArg::Segment => weakmil::Granularity::Segment,
        }
    }
}

#[derive(Args, Debug)]
struct TuneArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Feature directory; only normal-labeled bags of `--split` are used.
    #[arg(long)]
    clean: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Validation)]
    split: SplitArg,
    /// Maximum fraction of clean scores allowed above the threshold.
    #[arg(long, default_value_t = weakmil::eval::DEFAULT_TARGET_FPR)]
    target_fpr: f64,
    /// Count false positives per bag (max segment score) or per segment.
    #[arg(long, value_enum, default_value_t = GranularityArg::Bag)]
    granularity: GranularityArg,
    /// Report path.
    #[arg(long, default_value = "threshold.json")]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// A number, or the path of a report written by `tune`.
    #[arg(long)]
    threshold: String,
    /// Feature directory to evaluate.
    #[arg(long)]
    test: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    /// Directory for metrics.csv, roc.csv and per_kind.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Baseline {
    /// Lowest-k patch energy detector; flags frames with flat regions.
    Energy(EnergyArgs),
}

#[derive(Args, Debug)]
struct EnergyArgs {
    #[arg(long)]
    manifest: PathBuf,
    /// Divide each frame score by the mean over the preceding window.
    #[arg(long)]
    normalize: bool,
    /// Square patch side in pixels.
    #[arg(long, default_value_t = 32)]
    patch: usize,
    /// Number of lowest patch energies averaged per frame.
    #[arg(long, default_value_t = 3)]
    k: usize,
    /// Preceding frames used for normalization.
    #[arg(long, default_value_t = 3)]
    window: usize,
    /// Side of the centered crop taken from each 112x112 frame.
    #[arg(long, default_value_t = 96)]
    crop: usize,
    /// Split whose normal-labeled bags set the threshold.
    #[arg(long, value_enum, default_value_t = SplitArg::Validation)]
    tune_split: SplitArg,
    /// Split to evaluate.
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    split: SplitArg,
    #[arg(long, default_value_t = weakmil::eval::DEFAULT_TARGET_FPR)]
    target_fpr: f64,
    #[command(flatten)]
    geometry: GeometryArgs,
    /// Directory for metrics.csv, roc.csv and per_kind.csv.
    #[arg(long, default_value = ".")]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Range(_) => 2,
        Error::Numeric(_) | Error::Divergence(_) => 4,
        _ => 3,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Features(a) => commands::features(a),
        Command::Train(a) => commands::train(a),
        Command::Tune(a) => commands::tune(a),
        Command::Eval(a) => commands::eval(a),
        Command::Baseline(Baseline::Energy(a)) => commands::energy(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // One line, so scripts can split on `kind=` and `msg=`.
            let msg = e.to_string().replace(['\n', '\r'], " ");
            eprintln!("error: kind={} msg={msg:?}", e.kind());
            ExitCode::from(exit_code(&e))
        }
    }
}
