use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use flowcaps::loss::LossKind;
use flowcaps::synth::ShapeKind;
use serde::Serialize;

#[derive(Debug, Parser, Serialize)]
#[command(name = "flowcaps", version, about = "Optical flow with capsule encoders: data, training, evaluation")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args, Serialize)]
pub struct Global {
    /// Seed for data generation, initialization and shuffling.
    #[arg(long, global = true, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, global = true, value_enum, default_value_t = Precision::F32)]
    pub precision: Precision,
    /// Output directory (or output file for `predict` and `viz` when it has the matching extension).
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    /// Key-value file of flag defaults (`key = value` per line); flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitArg {
    Train,
    Test,
}

#[derive(Debug, Subcommand, Serialize)]
#[serde(tag = "command", rename_all = "kebab-case")]
pub enum Command {
    /// Generate a synthetic moving-shape dataset.
    GenData(GenData),
    /// Train a flow network.
    TrainFlow(TrainFlow),
    /// Evaluate a flow checkpoint on a dataset split.
    EvalFlow(EvalFlow),
    /// Predict the flow between two PPM frames.
    Predict(Predict),
    /// Render a `.flo` file as a color-coded PPM.
    Viz(Viz),
    /// Print parameter counts of model presets.
    Params(Params),
    /// Train the motion classifier on ground-truth or predicted flows.
    TrainCls(TrainCls),
    /// Evaluate a classifier checkpoint.
    EvalCls(EvalCls),
    /// Compare the two networks on nested fractions of the training data.
    ProtocolLowdata(ProtocolLowdata),
    /// Compare the two networks on shapes withheld from training.
    ProtocolOod(ProtocolOod),
    /// Finite-difference check of every differentiable operation and the mini network.
    Gradcheck(Gradcheck),
}

#[derive(Debug, Args, Serialize)]
pub struct GenData {
    /// `default` (64x64), `small` (32x32), or a JSON scene file.
    #[arg(long, default_value = "default")]
    pub spec: String,
    /// Canvas side length, overriding the spec.
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub max_disp: Option<i32>,
    #[arg(long, default_value_t = 800)]
    pub n_train: usize,
    #[arg(long, default_value_t = 200)]
    pub n_test: usize,
    /// Shapes kept out of the training split (comma separated).
    #[arg(long, value_delimiter = ',')]
    pub held_out: Vec<ShapeKind>,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct TrainArgs {
    /// `epe`, `combined`, or `combined:<alpha>`.
    #[arg(long, default_value = "epe")]
    pub loss: LossKind,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 8)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Epochs without improvement before stopping; 0 disables early stopping.
    #[arg(long, default_value_t = 5)]
    pub patience: usize,
    /// Stop once the test EPE reaches this value.
    #[arg(long)]
    pub target_epe: Option<f64>,
    /// Random horizontal flips of training pairs.
    #[arg(long)]
    pub flip: bool,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainFlow {
    /// Dataset directory or manifest file.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "flowcaps-mini")]
    pub preset: String,
    /// Key-value architecture file; the preset supplies missing keys.
    #[arg(long)]
    pub model: Option<PathBuf>,
    #[command(flatten)]
    pub train: TrainArgs,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalFlow {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Args, Serialize)]
pub struct Predict {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// First and second frame (binary PPM).
    #[arg(long, num_args = 2, value_names = ["FRAME1", "FRAME2"], required = true)]
    pub pair: Vec<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct Viz {
    /// Flow file to render.
    pub flo: PathBuf,
    /// Flow magnitude mapped to full saturation (defaults to the field maximum).
    #[arg(long)]
    pub max_norm: Option<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct Params {
    /// Preset to count; all presets when omitted.
    #[arg(long)]
    pub preset: Option<String>,
    /// Key-value architecture file.
    #[arg(long, conflicts_with = "preset")]
    pub model: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainCls {
    #[arg(long)]
    pub data: PathBuf,
    /// Train on flows predicted by this flow checkpoint instead of ground truth.
    #[arg(long)]
    pub flow_ckpt: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    pub epochs: usize,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalCls {
    #[arg(long)]
    pub ckpt: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Classify flows predicted by this flow checkpoint instead of ground truth.
    #[arg(long)]
    pub flow_ckpt: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct ProtocolArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    pub seeds: Vec<u64>,
    #[arg(long, default_value = "flownets-mini")]
    pub baseline: String,
    #[arg(long, default_value = "flowcaps-mini")]
    pub capsule: String,
    #[command(flatten)]
    pub train: TrainArgs,
}

#[derive(Debug, Args, Serialize)]
pub struct ProtocolLowdata {
    #[command(flatten)]
    pub common: ProtocolArgs,
    #[arg(long, value_delimiter = ',', default_value = "0.5,0.6,0.7,0.8,0.9,1.0")]
    pub fractions: Vec<f64>,
}

#[derive(Debug, Args, Serialize)]
pub struct ProtocolOod {
    #[command(flatten)]
    pub common: ProtocolArgs,
    /// Held-out shapes; defaults to those recorded in the dataset manifest.
    #[arg(long, value_delimiter = ',')]
    pub held_out: Vec<ShapeKind>,
}

#[derive(Debug, Args, Serialize)]
pub struct Gradcheck {
    /// Coordinates probed per parameter tensor of the full network.
    #[arg(long, default_value_t = 3)]
    pub model_probes: usize,
}
