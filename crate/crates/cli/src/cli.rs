//! Command-line surface. Every tunable is an `Option` so the layered
//! resolution in [`crate::config`] can tell "flag given" from "use the
//! config file or default".

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(
    name = "cycleseg",
    version,
    about = "Phase-cycle volumetric segmentation: phantom data, semi-supervised training, prediction, and evaluation",
    after_help = "Exit codes: 0 ok, 2 invalid configuration, 3 numeric failure, \
                  4 checkpoint problem, 5 missing input.\n\
                  CYCLESEG_OUTPUT_ROOT rehomes relative output paths."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic deforming-valve dataset with ground truth
    Phantom(PhantomArgs),
    /// Train the student/teacher segmentation model on a dataset
    Train(TrainArgs),
    /// Segment every phase of one patient sequence from a checkpoint
    Predict(PredictArgs),
    /// Score predictions against ground truth and render reports
    Eval(EvalArgs),
    /// Run the gradient and oracle check suites
    Check(CheckArgs),
    /// Run the three-arm ablation benchmark
    Ablation(AblationArgs),
}

#[derive(Args)]
pub struct PhantomArgs {
    /// Flat key = value config file (flags win over file entries)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output dataset directory
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub patients: Option<usize>,
    /// Cubic volume edge length in voxels
    #[arg(long)]
    pub grid: Option<usize>,
    /// Phases per cycle (minimum 3)
    #[arg(long)]
    pub phases: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Peak deformation as a fraction of the grid size
    #[arg(long)]
    pub amplitude: Option<f64>,
    /// Speckle noise standard deviation
    #[arg(long)]
    pub noise: Option<f64>,
    /// Allowed relative ground-truth volume drift across phases
    #[arg(long)]
    pub volume_tolerance: Option<f64>,
    /// Fraction of patients assigned to the training split
    #[arg(long)]
    pub train_frac: Option<f64>,
    /// Fraction of patients assigned to the validation split
    #[arg(long)]
    pub val_frac: Option<f64>,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Flat key = value config file (flags win over file entries)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory (as written by `phantom`)
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for checkpoints, loss trace, and manifest
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Training-split fraction when the dataset has no manifest
    #[arg(long)]
    pub train_frac: Option<f64>,
    /// Validation-split fraction when the dataset has no manifest
    #[arg(long)]
    pub val_frac: Option<f64>,

    /// Memory-bank attention: on or off
    #[arg(long, value_name = "on|off")]
    pub mcl: Option<String>,
    /// Topology regularization: on or off
    #[arg(long, value_name = "on|off")]
    pub tcr: Option<String>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Learning-rate decay factor
    #[arg(long)]
    pub lr_decay: Option<f64>,
    /// Epochs between learning-rate decays
    #[arg(long)]
    pub lr_decay_every: Option<usize>,
    /// Teacher EMA momentum
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Consistency-weight ceiling
    #[arg(long)]
    pub beta_max: Option<f64>,
    /// Fraction of training over which the consistency weight ramps
    #[arg(long)]
    pub ramp: Option<f64>,
    /// Topology-loss weight
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Attention positions kept per query
    #[arg(long)]
    pub topk: Option<usize>,
    /// Memory-bank capacity per direction
    #[arg(long)]
    pub capacity: Option<usize>,
    #[arg(long)]
    pub steps_per_patient: Option<usize>,
    /// Use teacher probabilities instead of thresholded masks: on or off
    #[arg(long, value_name = "on|off")]
    pub soft_labels: Option<String>,
    /// Global gradient-norm clip
    #[arg(long)]
    pub grad_clip: Option<f64>,

    #[arg(long)]
    pub base_channels: Option<usize>,
    /// Encoder/decoder pyramid depth
    #[arg(long)]
    pub levels: Option<usize>,
    #[arg(long)]
    pub key_channels: Option<usize>,
    #[arg(long)]
    pub value_channels: Option<usize>,
    /// Comma-separated encoder levels that use attention readouts
    #[arg(long, value_name = "L1,L2,...")]
    pub readout_levels: Option<String>,

    /// Soft-binarization temperature
    #[arg(long)]
    pub tau: Option<f64>,
    /// Weight of the absolute-difference topology term
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Division guard in the relative topology term
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Surface measure: raw or normalized
    #[arg(long, value_name = "raw|normalized")]
    pub surface_mode: Option<String>,
    /// Block gradients into the labeled phase's measures: on or off
    #[arg(long, value_name = "on|off")]
    pub detach_reference: Option<String>,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Flat key = value config file (flags win over file entries)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Checkpoint file written by `train`
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Patient sequence directory
    #[arg(long)]
    pub sequence: Option<PathBuf>,
    /// Output directory for masks
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Disable memory-bank attention (independent per-phase inference)
    #[arg(long)]
    pub no_mcl: bool,
    /// Also write f32 probability maps next to the masks
    #[arg(long)]
    pub probabilities: bool,
    #[arg(long)]
    pub topk: Option<usize>,
    #[arg(long)]
    pub capacity: Option<usize>,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Flat key = value config file (flags win over file entries)
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Directory of mask_<t>.raw predictions
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Ground-truth patient sequence directory
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory for report files and the Dice curve
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Label for this run in tables
    #[arg(long)]
    pub label: Option<String>,
    /// Earlier report.json to diff against
    #[arg(long)]
    pub compare: Option<PathBuf>,
    /// Label for the compared run
    #[arg(long)]
    pub compare_label: Option<String>,
}

#[derive(Args)]
pub struct CheckArgs {
    /// Seed for the randomized checks
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write the results as JSON to this path
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args)]
pub struct AblationArgs {
    /// Benchmark seed (defaults to the shipped calibration seed)
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory for the benchmark report
    #[arg(long)]
    pub out: Option<PathBuf>,
}
