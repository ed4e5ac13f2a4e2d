use std::path::PathBuf;

use afr::episodes_io::{EpisodeSpec, SynthConfig};
use afr::gradcheck::GradCheckConfig;
use afr::losses::{LossConfig, MseNorm, ScSign};
use afr::numerics::AdamState;
use afr::regularizer::DEFAULT_REDUCTION;
use afr::semantics::DEFAULT_BETA;
use afr::trainer::{Ablation, BaselineRegularizer, TrainConfig};
use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "afr",
    version,
    about = "Attentive feature regularization for few-shot classification",
    long_about = "Attentive feature regularization for few-shot classification.\n\n\
        Exit codes: 0 success, 2 configuration error, 3 data/format error, \
        4 too many diverged episodes, 5 gradient check failure."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the episodic evaluation protocol and print a JSON report.
    Run(RunArgs),
    /// Run the attention and loss ablation grids with seed-paired episodes.
    Ablate(AblateArgs),
    /// Compare analytic and finite-difference gradients per parameter block.
    Gradcheck(GradcheckArgs),
    /// Write a synthetic base store, novel store and embedding file.
    Synth(SynthArgs),
    /// Summarize a feature store (.afrf/.csv) or embedding file (.json).
    Inspect(InspectArgs),
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// Base-class feature store (AFRF binary, or CSV by extension).
    #[arg(long, value_name = "PATH", required_unless_present = "synth")]
    pub base_features: Option<PathBuf>,

    /// Novel-class feature store (AFRF binary, or CSV by extension).
    #[arg(long, value_name = "PATH", required_unless_present = "synth")]
    pub novel_features: Option<PathBuf>,

    /// Label embedding JSON; required when beta > 0.
    #[arg(long, value_name = "PATH")]
    pub embeddings: Option<PathBuf>,

    /// Use the built-in synthetic benchmark (20 base, 10 novel classes, d=32)
    /// generated from --seed instead of files.
    #[arg(long, conflicts_with_all = ["base_features", "novel_features", "embeddings"])]
    pub synth: bool,
}

#[derive(Debug, Args)]
pub struct ProtocolArgs {
    /// Classes per episode.
    #[arg(long, default_value_t = EpisodeSpec::DEFAULT_N_WAY)]
    pub n_way: usize,

    /// Query samples per class.
    #[arg(long, default_value_t = EpisodeSpec::DEFAULT_QUERIES)]
    pub queries: usize,

    /// Episodes to sample.
    #[arg(long, default_value_t = EpisodeSpec::DEFAULT_EPISODES)]
    pub episodes: usize,

    /// Related base classes recruited per novel class (0 disables regularization).
    #[arg(long, default_value_t = DEFAULT_BETA)]
    pub beta: usize,

    /// Weight of the supervised contrastive loss.
    #[arg(long, default_value_t = LossConfig::DEFAULT_MU1)]
    pub mu1: f64,

    /// Weight of the mean-gap loss.
    #[arg(long, default_value_t = LossConfig::DEFAULT_MU2)]
    pub mu2: f64,

    /// Contrastive temperature. Not fixed by the method; 0.1 is this tool's choice.
    #[arg(long, default_value_t = LossConfig::DEFAULT_TAU)]
    pub tau: f64,

    /// Contrastive loss on raw dot products instead of L2-normalized features.
    #[arg(long)]
    pub raw_dot: bool,

    /// Sign convention of the contrastive term.
    #[arg(long, value_enum, default_value_t = ScSignArg::Standard)]
    pub sc_sign: ScSignArg,

    /// Norm used by the mean-gap loss.
    #[arg(long, value_enum, default_value_t = MseNormArg::Squared)]
    pub mse_norm: MseNormArg,

    /// Squeeze-excite reduction ratio (must divide the feature dim).
    #[arg(long, default_value_t = DEFAULT_REDUCTION)]
    pub reduction: usize,

    /// Training epochs per episode.
    #[arg(long, default_value_t = TrainConfig::DEFAULT_EPOCHS)]
    pub epochs: usize,

    /// Adam learning rate.
    #[arg(long, default_value_t = AdamState::DEFAULT_LEARNING_RATE)]
    pub lr: f64,

    /// Adam weight decay (coupled L2).
    #[arg(long, default_value_t = AdamState::DEFAULT_WEIGHT_DECAY)]
    pub wd: f64,

    /// Master seed; episode i uses stream i.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Worker threads for episodes. Results do not depend on this.
    #[arg(long, env = "AFR_WORKERS", default_value_t = 1)]
    pub workers: usize,

    /// Print a human-readable table instead of JSON.
    #[arg(long)]
    pub pretty: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScSignArg {
    Standard,
    PositiveLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum MseNormArg {
    Squared,
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineArg {
    None,
    Mixup,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub protocol: ProtocolArgs,

    /// Support samples per class.
    #[arg(long, default_value_t = EpisodeSpec::DEFAULT_K_SHOT)]
    pub k_shot: usize,

    /// Disable instance attention (calibrated prototypes = raw prototypes).
    #[arg(long)]
    pub no_instance_att: bool,

    /// Disable channel attention (fused prototypes = calibrated prototypes).
    #[arg(long)]
    pub no_channel_att: bool,

    /// Drop the supervised contrastive loss.
    #[arg(long)]
    pub no_sc: bool,

    /// Drop the mean-gap loss.
    #[arg(long)]
    pub no_mse: bool,

    /// Extra feature-level regularizer on the support set.
    #[arg(long, value_enum, default_value_t = BaselineArg::None)]
    pub baseline: BaselineArg,

    /// Also write the JSON report to this path.
    #[arg(long, value_name = "PATH")]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub data: DataArgs,

    #[command(flatten)]
    pub protocol: ProtocolArgs,

    /// Shot counts to evaluate, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "1,5")]
    pub k_shots: Vec<usize>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Feature dimension.
    #[arg(long, default_value_t = 8)]
    pub dim: usize,

    /// Prototypes per class.
    #[arg(long, default_value_t = 3)]
    pub beta: usize,

    /// Classes in the miniature episode.
    #[arg(long, default_value_t = 3)]
    pub n_way: usize,

    /// Support samples per class.
    #[arg(long, default_value_t = 2)]
    pub k_shot: usize,

    /// Squeeze-excite reduction ratio.
    #[arg(long, default_value_t = DEFAULT_REDUCTION)]
    pub reduction: usize,

    /// Random instances to check.
    #[arg(long, default_value_t = 10)]
    pub trials: usize,

    /// Contrastive temperature.
    #[arg(long, default_value_t = LossConfig::DEFAULT_TAU)]
    pub tau: f64,

    /// Master seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Test hook: corrupt the analytic gradient of one block.
    #[arg(long, hide = true, value_name = "BLOCK")]
    pub inject_fault: Option<String>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Total classes generated.
    #[arg(long, default_value_t = SynthConfig::default().classes)]
    pub classes: usize,

    /// Classes written to the novel store; the rest form the base store.
    #[arg(long, default_value_t = 10)]
    pub novel_classes: usize,

    /// Samples per class.
    #[arg(long, default_value_t = SynthConfig::default().per_class)]
    pub per_class: usize,

    /// Feature dimension.
    #[arg(long, default_value_t = SynthConfig::default().feat_dim)]
    pub feat_dim: usize,

    /// Embedding dimension.
    #[arg(long, default_value_t = SynthConfig::default().sem_dim)]
    pub sem_dim: usize,

    /// Number of super-categories the classes are grouped into.
    #[arg(long, default_value_t = SynthConfig::default().groups)]
    pub groups: usize,

    /// Spread of class embeddings around their group centre.
    #[arg(long, default_value_t = SynthConfig::default().cluster_spread)]
    pub cluster_spread: f64,

    /// Norm of every class feature mean.
    #[arg(long, default_value_t = SynthConfig::default().mean_norm)]
    pub mean_norm: f64,

    /// Per-dimension standard deviation of feature noise.
    #[arg(long, default_value_t = SynthConfig::default().noise)]
    pub noise: f64,

    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,

    /// Directory receiving base.afrf, novel.afrf and embeddings.json.
    #[arg(long, value_name = "DIR")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    /// File to summarize.
    pub path: PathBuf,
}

impl ProtocolArgs {
    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            mu1: self.mu1,
            mu2: self.mu2,
            tau: self.tau,
            normalize_for_sc: !self.raw_dot,
            sc_sign: match self.sc_sign {
                ScSignArg::Standard => ScSign::Standard,
                ScSignArg::PositiveLog => ScSign::PositiveLog,
            },
            mse_norm: match self.mse_norm {
                MseNormArg::Squared => MseNorm::Squared,
                MseNormArg::Plain => MseNorm::Plain,
            },
        }
    }

    pub fn episode_spec(&self, k_shot: usize, beta: usize) -> EpisodeSpec {
        EpisodeSpec {
            n_way: self.n_way,
            k_shot,
            queries_per_class: self.queries,
            beta,
            episodes: self.episodes,
        }
    }

    pub fn train_config(&self, ablation: Ablation, baseline: BaselineRegularizer) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.lr,
            weight_decay: self.wd,
            loss: self.loss_config(),
            ablation,
            reduction: self.reduction,
            baseline,
            seed: self.seed,
        }
    }
}

impl RunArgs {
    pub fn ablation(&self) -> Ablation {
        Ablation {
            instance_attention: !self.no_instance_att,
            channel_attention: !self.no_channel_att,
            sc_loss: !self.no_sc,
            mse_loss: !self.no_mse,
        }
    }

    pub fn baseline(&self) -> BaselineRegularizer {
        match self.baseline {
            BaselineArg::None => BaselineRegularizer::None,
            BaselineArg::Mixup => BaselineRegularizer::Mixup,
        }
    }
}

impl GradcheckArgs {
    pub fn config(&self) -> GradCheckConfig {
        GradCheckConfig {
            dim: self.dim,
            beta: self.beta,
            n_way: self.n_way,
            k_shot: self.k_shot,
            reduction: self.reduction,
            trials: self.trials,
            seed: self.seed,
            loss: LossConfig {
                tau: self.tau,
                ..LossConfig::default()
            },
            perturb_block: self.inject_fault.clone(),
            ..GradCheckConfig::default()
        }
    }
}

impl SynthArgs {
    pub fn config(&self) -> SynthConfig {
        SynthConfig {
            classes: self.classes,
            per_class: self.per_class,
            feat_dim: self.feat_dim,
            sem_dim: self.sem_dim,
            groups: self.groups,
            cluster_spread: self.cluster_spread,
            mean_norm: self.mean_norm,
            noise: self.noise,
        }
    }
}
