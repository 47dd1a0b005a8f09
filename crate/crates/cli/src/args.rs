use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use cvr_core::adapter::ModelKind;
use cvr_core::bench::{EasyStrategy, IdentityStrategy, MiningRules};
use cvr_core::data::RunConfig;

use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "cvr", version, about = "Consistent video retrieval: synthesize, mine, train, evaluate")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic world: annotations, clip/text/caption stores and latents.
    Synth(SynthArgs),
    /// Mine a fixed-pool retrieval benchmark from annotations.
    Mine(MineArgs),
    /// Split annotations by video into fit, validation and evaluation sets.
    Split(SplitArgs),
    /// Train a next-state predictor or the learned late-fusion scorer.
    Train(TrainArgs),
    /// Select ensemble weights on a validation benchmark.
    Grid(GridArgs),
    /// Score a benchmark and write a report.
    Eval(EvalArgs),
    /// Retrain and evaluate across context lengths.
    Sweep(SweepArgs),
    /// Render one or more evaluation reports as a table and CSV.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
pub struct OutArgs {
    /// Output directory; created if missing.
    #[arg(long)]
    pub out: PathBuf,
    /// Worker threads for mining, training and evaluation.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub workers: u16,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// World spec JSON; flags override its values.
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub d: Option<usize>,
    #[arg(long)]
    pub tasks: Option<usize>,
    #[arg(long)]
    pub videos_per_task: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    /// Clip noise scale.
    #[arg(long)]
    pub sigma_n: Option<f64>,
    /// Query text noise scale.
    #[arg(long)]
    pub sigma_q: Option<f64>,
}

/// Run configuration: a JSON file plus per-field overrides.
#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Run config JSON; flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Context window (maximum number of preceding clips).
    #[arg(long = "context-len", short = 'L')]
    pub context_len: Option<usize>,
    #[arg(long)]
    pub pool_size: Option<usize>,
    #[arg(long)]
    pub max_state_negs: Option<usize>,
    #[arg(long)]
    pub max_ident_negs: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub lambda_s: Option<f64>,
    #[arg(long)]
    pub lambda_i: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub fit_frac: Option<f64>,
    /// Comma-separated visual-weight grid.
    #[arg(long, value_delimiter = ',')]
    pub wv_grid: Option<Vec<f64>>,
    /// Comma-separated prediction-weight grid.
    #[arg(long, value_delimiter = ',')]
    pub wp_grid: Option<Vec<f64>>,
    /// Drop zero-vector fallback negatives from the local losses.
    #[arg(long)]
    pub drop_zero_negatives: bool,
}

impl ConfigArgs {
    pub fn resolve(&self) -> CliResult<RunConfig> {
        let mut c = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| CliError::Usage(format!("--config {}: {e}", p.display())))?,
            None => RunConfig::default(),
        };
        macro_rules! set {
            ($($flag:ident => $field:ident),* $(,)?) => {
                $(if let Some(v) = self.$flag.clone() { c.$field = v; })*
            };
        }
        set!(
            seed => seed,
            context_len => context_len,
            pool_size => pool_size,
            max_state_negs => max_state_negs,
            max_ident_negs => max_ident_negs,
            tau => tau,
            lambda_s => lambda_s,
            lambda_i => lambda_i,
            lr => lr,
            weight_decay => weight_decay,
            batch_size => batch_size,
            epochs => epochs,
            dropout => dropout_rate,
            heads => n_heads,
            fit_frac => fit_frac,
            wv_grid => wv_grid,
            wp_grid => wp_grid,
        );
        if self.drop_zero_negatives {
            c.drop_zero_negatives = true;
        }
        c.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(c)
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum IdentityArg {
    CaptionKnn,
    TaskStep,
    TaskStepFallback,
    Lexical,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum EasyArg {
    DiffVideo,
    DiffTask,
}

#[derive(Debug, Args)]
pub struct MiningArgs {
    /// Identity-negative mining rule.
    #[arg(long, value_enum, default_value_t = IdentityArg::CaptionKnn)]
    pub identity: IdentityArg,
    /// Easy-negative pool.
    #[arg(long, value_enum, default_value_t = EasyArg::DiffVideo)]
    pub easy: EasyArg,
    /// Treat the immediately preceding step like any other state negative.
    #[arg(long)]
    pub allow_predecessor: bool,
}

impl MiningArgs {
    pub fn rules(&self, seed: u64) -> MiningRules {
        MiningRules {
            identity_strategy: match self.identity {
                IdentityArg::CaptionKnn => IdentityStrategy::CaptionKnn,
                IdentityArg::TaskStep => IdentityStrategy::TaskStepMatch,
                IdentityArg::TaskStepFallback => IdentityStrategy::TaskStepFallback,
                IdentityArg::Lexical => IdentityStrategy::LexicalJaccard,
            },
            easy_strategy: match self.easy {
                EasyArg::DiffVideo => EasyStrategy::DiffVideo,
                EasyArg::DiffTask => EasyStrategy::DiffTask,
            },
            avoid_immediate_predecessor: !self.allow_predecessor,
            seed,
        }
    }
}

#[derive(Debug, Args)]
pub struct StoreArgs {
    /// Clip embedding store.
    #[arg(long)]
    pub clips: PathBuf,
    /// Query text embedding store.
    #[arg(long)]
    pub texts: PathBuf,
    /// Keep stored vectors as they are instead of L2-normalizing on load.
    #[arg(long)]
    pub no_normalize: bool,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Annotation set to split.
    #[arg(long)]
    pub ann: PathBuf,
    /// Fraction of videos in the training portion (fit + validation).
    #[arg(long, default_value_t = 0.8)]
    pub train_frac: f64,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct MineArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Annotation set covering every video negatives may come from.
    #[arg(long)]
    pub ann: PathBuf,
    /// Caption embedding store (needed by caption-knn).
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Output directory of `split`; also writes benchmarks restricted to
    /// its validation and evaluation videos.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[command(flatten)]
    pub mining: MiningArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum ModelArg {
    Cast,
    EarlyFusionDirect,
    EarlyFusionResidual,
    LateFusion,
}

impl From<ModelArg> for ModelKind {
    fn from(m: ModelArg) -> Self {
        match m {
            ModelArg::Cast => ModelKind::Cast,
            ModelArg::EarlyFusionDirect => ModelKind::EarlyFusionDirect,
            ModelArg::EarlyFusionResidual => ModelKind::EarlyFusionResidual,
            ModelArg::LateFusion => ModelKind::LateFusion,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Annotation set of the training videos.
    #[arg(long)]
    pub ann: PathBuf,
    #[command(flatten)]
    pub stores: StoreArgs,
    /// Caption embedding store (needed by caption-knn).
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = ModelArg::Cast)]
    pub model: ModelArg,
    #[command(flatten)]
    pub mining: MiningArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Validation benchmark.
    #[arg(long)]
    pub bench: PathBuf,
    #[command(flatten)]
    pub stores: StoreArgs,
    /// Predictor checkpoint.
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub out: OutArgs,
    #[arg(long)]
    pub bench: PathBuf,
    #[command(flatten)]
    pub stores: StoreArgs,
    /// text, vis, cast, late[:alpha], semantic, full, learned-late or oracle.
    #[arg(long, default_value = "full")]
    pub mode: String,
    /// Model checkpoint; required by cast, semantic, full and learned-late.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// `grid.json` written by `grid`; supplies the ensemble weights.
    #[arg(long, conflicts_with_all = ["wv", "wp"])]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub wv: Option<f64>,
    #[arg(long)]
    pub wp: Option<f64>,
    /// Generator latents; required by the oracle mode.
    #[arg(long)]
    pub latents: Option<PathBuf>,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub out: OutArgs,
    /// Annotation set covering every video.
    #[arg(long)]
    pub ann: PathBuf,
    /// Output directory of `split`.
    #[arg(long)]
    pub split: PathBuf,
    #[command(flatten)]
    pub stores: StoreArgs,
    #[arg(long)]
    pub captions: Option<PathBuf>,
    /// Comma-separated context lengths.
    #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,5")]
    pub lengths: Vec<usize>,
    #[command(flatten)]
    pub mining: MiningArgs,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Output directory for `report.txt` and `report.csv`.
    #[arg(long)]
    pub out: PathBuf,
    /// `report.json` files written by `eval`; several inputs add a
    /// macro-average row.
    #[arg(long = "input", required = true, num_args = 1..)]
    pub inputs: Vec<PathBuf>,
}
