use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use vitlr_core::metrics::Bucketing;
use vitlr_core::synth::Profile;

#[derive(Debug, Parser)]
#[command(
    name = "vitlr",
    version,
    about = "Multi-frame traffic-light detection toolkit"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset with a 70/10/20 train/valid/test split.
    GenData(GenDataArgs),
    /// Train a model and write loss.csv, model.cfg and checkpoint.vtlr.
    Train(TrainArgs),
    /// Run a checkpoint on frames and print detections as JSON lines.
    Infer(InferArgs),
    /// Evaluate checkpoints, optionally bucketed by distance, scenario or n.
    Eval(EvalArgs),
    /// Replay the ego-lane selection over a clip carrying poses.
    Egolane(EgolaneArgs),
    /// Measure single-clip inference latency.
    Bench(BenchArgs),
    /// Check the inference graph against the NPU operator allowlist.
    LintGraph(LintArgs),
}

/// Model configuration: a file, then `key=value` overrides.
#[derive(Debug, Args)]
pub struct ModelArgs {
    /// Model config file (key = value).
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Override one model config key, e.g. `--model-opt encoder_depth=0`.
    #[arg(long = "model-opt", value_name = "KEY=VALUE")]
    pub model_opts: Vec<String>,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// easy, mixed, scenario-sweep or occlusion.
    #[arg(long, default_value = "easy")]
    pub profile: Profile,
    #[arg(long, default_value_t = 100)]
    pub count: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub height: usize,
    #[arg(long, default_value_t = 64)]
    pub width: usize,
    /// Frames per clip.
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Most lights in any clip; match the model's query count m.
    #[arg(long, default_value_t = 4)]
    pub max_lights: usize,
}

/// Every flag but `--config` and `--model-opt` overrides the config key of
/// the same name (dashes for underscores).
#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Train config file (key = value).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub dataset: Option<String>,
    #[arg(long)]
    pub out: Option<String>,
    #[arg(long)]
    pub steps: Option<String>,
    #[arg(long)]
    pub batch_size: Option<String>,
    #[arg(long)]
    pub lr: Option<String>,
    #[arg(long)]
    pub beta1: Option<String>,
    #[arg(long)]
    pub beta2: Option<String>,
    #[arg(long)]
    pub eps: Option<String>,
    #[arg(long)]
    pub seed: Option<String>,
    #[arg(long)]
    pub model_config: Option<String>,
    #[arg(long)]
    pub log_interval: Option<String>,
    #[arg(long)]
    pub checkpoint_every: Option<String>,
    #[arg(long)]
    pub lambda: Option<String>,
    #[arg(long)]
    pub focal_alpha: Option<String>,
    #[arg(long)]
    pub focal_gamma: Option<String>,
    #[arg(long)]
    pub cost_class: Option<String>,
    #[arg(long)]
    pub cost_box: Option<String>,
    #[arg(long = "model-opt", value_name = "KEY=VALUE")]
    pub model_opts: Vec<String>,
    /// Suppress per-interval progress on stderr.
    #[arg(long)]
    pub quiet: bool,
}

impl TrainArgs {
    pub fn overrides(&self) -> Vec<(&'static str, &str)> {
        [
            ("dataset", &self.dataset),
            ("out", &self.out),
            ("steps", &self.steps),
            ("batch_size", &self.batch_size),
            ("lr", &self.lr),
            ("beta1", &self.beta1),
            ("beta2", &self.beta2),
            ("eps", &self.eps),
            ("seed", &self.seed),
            ("model_config", &self.model_config),
            ("log_interval", &self.log_interval),
            ("checkpoint_every", &self.checkpoint_every),
            ("lambda", &self.lambda),
            ("focal_alpha", &self.focal_alpha),
            ("focal_gamma", &self.focal_gamma),
            ("cost_class", &self.cost_class),
            ("cost_box", &self.cost_box),
        ]
        .into_iter()
        .filter_map(|(k, v)| v.as_deref().map(|v| (k, v)))
        .collect()
    }
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("input").required(true).args(["frames", "clip"]))]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to model.cfg beside the checkpoint.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Comma-separated PPM frames, oldest first; exactly n of them.
    #[arg(long, value_delimiter = ',')]
    pub frames: Vec<PathBuf>,
    /// Clip directory; every frame with a full window is evaluated.
    #[arg(long)]
    pub clip: Option<PathBuf>,
    /// Write detections.jsonl here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// One or more checkpoints; frames-n bucketing takes one per n.
    #[arg(long, value_delimiter = ',', required = true)]
    pub checkpoint: Vec<PathBuf>,
    /// Applies to every checkpoint; defaults to model.cfg beside each.
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Dataset root (test split), split directory or clip directory.
    #[arg(long)]
    pub data: PathBuf,
    /// distance, scenario or frames-n; omitted evaluates all clips at once.
    #[arg(long)]
    pub bucket: Option<Bucketing>,
    /// Write report.csv here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("detector").required(true).args(["checkpoint", "oracle"]))]
pub struct EgolaneArgs {
    /// Clip directory whose manifest carries poses and a map light.
    #[arg(long)]
    pub clip: PathBuf,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub model_config: Option<PathBuf>,
    /// Use the annotated boxes as detections.
    #[arg(long)]
    pub oracle: bool,
    /// Window of the oracle detector.
    #[arg(long, default_value_t = 1)]
    pub window: usize,
    /// Gating radius in pixels.
    #[arg(long, default_value_t = vitlr_core::egolane::DEFAULT_RADIUS)]
    pub radius: f64,
    /// Write egolane.jsonl here instead of standard output.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Benchmark trained weights; otherwise a seeded random initialisation.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Clips to feed; otherwise seeded random frames.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, default_value_t = 3)]
    pub warmup: usize,
    #[arg(long, default_value_t = 20)]
    pub reps: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write bench.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct LintArgs {
    /// Lint the configuration stored beside this checkpoint.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[command(flatten)]
    pub model: ModelArgs,
    /// Print JSON instead of the text table.
    #[arg(long)]
    pub json: bool,
    /// Write lint.txt and lint.json here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
