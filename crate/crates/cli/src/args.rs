use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Principal manifold flows: data generation, training, evaluation and
/// contour analysis.
///
/// Lengths, coordinates and latent values are in data units; log densities
/// are in nats; wall times in seconds. Relative output paths are resolved
/// against $PFLOW_OUT_DIR when it is set.
#[derive(Debug, Parser)]
#[command(name = "pflow", version, about, long_about)]
pub struct Cli {
    /// Log verbosity: repeat for more (-v info, -vv debug). Default: warnings only.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw a synthetic dataset and write it as CSV.
    GenData(GenDataArgs),
    /// Train a flow; writes model.ckpt, metrics.csv and config.json.
    Train(TrainArgs),
    /// Held-out likelihood and contour diagnostics of a checkpoint.
    Eval(EvalArgs),
    /// Draw samples from a checkpoint.
    Sample(SampleArgs),
    /// Per-point contour log-likelihoods, stretches and mutual information.
    ReportContours(ReportArgs),
    /// Follow principal manifolds from starting points.
    Trace(TraceArgs),
    /// Average |cos| between contour directions and principal components.
    Similarity(SimilarityArgs),
    /// Manifold-corrected log density and predicted rank per point.
    ManifoldDensity(ManifoldArgs),
    /// Randomized audit of the contour identities on random Jacobians.
    CookbookCheck(CookbookArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum CouplingArg {
    Affine,
    RqSpline,
    MixtureCdf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum ObjectiveArg {
    Ml,
    PfLagrangian,
    Pf,
    Ipf,
    IpfStage1,
    IpfStage2,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum OptimizerArg {
    Adabelief,
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum EstimatorArg {
    Exact,
    UnbiasedSingleBlock,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    /// Generator: points, circles, caret, swirl, grid, moons, pinwheel,
    /// swissroll (2D) or vardim (3D variable rank). Required.
    #[arg(long)]
    pub name: String,
    /// Number of points [count].
    #[arg(long, default_value_t = 10_000)]
    pub n: usize,
    /// Random seed [integer].
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Isotropic Gaussian noise std added to vardim points [data units].
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// When given, OUT is a directory receiving train.csv, test.csv and
    /// manifest.json with this fraction of rows for training [fraction in
    /// 0..1]. Default: one CSV file at OUT.
    #[arg(long)]
    pub train_frac: Option<f64>,
    /// Output CSV file, or directory with --train-frac. Required.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// JSON training config; flags below override it. Default: none (flag
    /// values and built-in defaults).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Training data: a CSV file or a gen-data directory. Required.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out data CSV. Default: test.csv of a data directory, else the
    /// last --holdout-frac of the data rows.
    #[arg(long)]
    pub test: Option<PathBuf>,
    /// Held-out fraction when no test set is available [fraction].
    #[arg(long, default_value_t = 0.2)]
    pub holdout_frac: f64,
    /// Output directory. Required.
    #[arg(long)]
    pub out: PathBuf,
    /// Objective. Default: config value, else ml.
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    /// Orthogonality weight alpha [unitless]. Default: config value, else 10.
    #[arg(long)]
    pub alpha: Option<f64>,
    /// Reconstruction weight gamma for injective stage 1 [per squared data
    /// unit]. Default: config value, else 10.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Block estimator. Default: config value, else exact.
    #[arg(long, value_enum)]
    pub estimator: Option<EstimatorArg>,
    /// Learning rate [per step]. Default: config value, else 1e-3.
    #[arg(long)]
    pub lr: Option<f64>,
    /// Batch size [rows]. Default: config value, else 256.
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Epochs [passes over the training rows]. Default: config value, else 1.
    #[arg(long)]
    pub epochs: Option<u64>,
    /// Total optimizer steps; overrides epochs [steps]. Default: config value,
    /// else unset.
    #[arg(long)]
    pub steps: Option<u64>,
    /// Steps between held-out evaluations [steps]. Default: config value,
    /// else 500.
    #[arg(long)]
    pub eval_interval: Option<u64>,
    /// Held-out rows per evaluation [rows]. Default: config value, else 2000.
    #[arg(long)]
    pub eval_points: Option<usize>,
    /// Decay the learning rate along a half cosine to this fraction of its
    /// initial value at the last step [fraction of --lr]. Default: config
    /// value, else a constant rate.
    #[arg(long)]
    pub cosine_floor: Option<f64>,
    /// Optimizer. Default: config value, else adabelief.
    #[arg(long, value_enum)]
    pub optimizer: Option<OptimizerArg>,
    /// Seed for initialisation and data order [integer]. Default: config
    /// value, else 0.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Coupling layers when the config has no architecture [count].
    #[arg(long, default_value_t = 6)]
    pub couplings: usize,
    /// Coupling type when the config has no architecture.
    #[arg(long, value_enum, default_value_t = CouplingArg::RqSpline)]
    pub coupling: CouplingArg,
    /// Conditioner hidden width when the config has no architecture [units].
    #[arg(long, default_value_t = 32)]
    pub hidden: usize,
    /// Conditioner residual blocks when the config has no architecture [count].
    #[arg(long, default_value_t = 2)]
    pub res_blocks: usize,
    /// Latent dimension below the data dimension builds an injective flow
    /// trained in two stages [dimensions]. Default: the data dimension.
    #[arg(long)]
    pub latent_dim: Option<usize>,
    /// Ambient-side couplings of an injective flow [count].
    #[arg(long, default_value_t = 2)]
    pub ambient_couplings: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct CkptArg {
    /// Checkpoint file, or a train output directory holding model.ckpt. Required.
    #[arg(long)]
    pub ckpt: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct PartitionArg {
    /// Latent partition as JSON blocks, e.g. "[[0],[1,2]]" [0-based latent
    /// indices]. Default: singletons.
    #[arg(long)]
    pub partition: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    pub ckpt: CkptArg,
    /// Data CSV or directory (its test.csv when present). Required.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub partition: PartitionArg,
    /// Use only the first LIMIT rows [rows]. Default: all rows.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Output directory for eval.json and points.csv. Required.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SampleArgs {
    #[command(flatten)]
    pub ckpt: CkptArg,
    /// Number of samples [count].
    #[arg(long, default_value_t = 1000)]
    pub n: usize,
    /// Random seed [integer].
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output CSV file. Required.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ReportArgs {
    #[command(flatten)]
    pub ckpt: CkptArg,
    /// Data CSV or directory. Required.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub partition: PartitionArg,
    /// Use only the first LIMIT rows [rows].
    #[arg(long, default_value_t = 200)]
    pub limit: usize,
    /// Output JSON file. Required.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct TraceArgs {
    #[command(flatten)]
    pub ckpt: CkptArg,
    /// Starting point as comma-separated coordinates [data units]. Default:
    /// the first --n-starts rows of --data.
    #[arg(long)]
    pub start: Option<String>,
    /// Data CSV or directory supplying starting points. Required unless
    /// --start is given.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Number of starting rows taken from --data [count].
    #[arg(long, default_value_t = 10)]
    pub n_starts: usize,
    /// Latent coordinate to follow [0-based index]. Default: every coordinate.
    #[arg(long)]
    pub block: Option<usize>,
    /// Arc parameter range [latent units].
    #[arg(long, default_value_t = 2.0)]
    pub t_max: f64,
    /// RK4 step [latent units].
    #[arg(long, default_value_t = 0.01)]
    pub step: f64,
    /// Output CSV file. Required.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct SimilarityArgs {
    #[command(flatten)]
    pub ckpt: CkptArg,
    /// Data CSV or directory. Required.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub partition: PartitionArg,
    /// Use only the first LIMIT rows [rows].
    #[arg(long, default_value_t = 1000)]
    pub limit: usize,
    /// Output JSON file. Required.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct ManifoldArgs {
    #[command(flatten)]
    pub ckpt: CkptArg,
    /// Data CSV or directory. Required.
    #[arg(long)]
    pub data: PathBuf,
    #[command(flatten)]
    pub partition: PartitionArg,
    /// Relative stretch threshold for keeping a contour [fraction of the
    /// largest stretch].
    #[arg(long, default_value_t = 0.01)]
    pub epsilon: f64,
    /// Use only the first LIMIT rows [rows]. Default: all rows.
    #[arg(long)]
    pub limit: Option<usize>,
    /// Output CSV file. Required.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct CookbookArgs {
    /// Random Jacobians per check [count].
    #[arg(long, default_value_t = 1000)]
    pub trials: usize,
    /// Largest latent/data dimension drawn [dimensions].
    #[arg(long, default_value_t = 6)]
    pub max_dim: usize,
    /// Random seed [integer].
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Output JSON file. Default: cookbook.json in the current directory.
    #[arg(long, default_value = "cookbook.json")]
    pub out: PathBuf,
}
