use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dpguard::{BudgetParams, DefensePolicy, MechanismConfig};
use rand::Rng;
use serde::Deserialize;

pub const DEFAULT_LISTEN: &str = "127.0.0.1:8080";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Format {
    #[default]
    Jsonl,
    Csv,
}

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed config file: {0}")]
    Toml(#[from] toml::de::Error),
    #[error("missing setting: {0}")]
    Missing(&'static str),
    #[error("{0}")]
    Invalid(&'static str),
    #[error(transparent)]
    Core(#[from] dpguard::Error),
}

/// Command line. Every shared setting may also come from a `DPGUARD_*`
/// variable or the TOML file named by `--config`; flags win over the
/// environment, which wins over the file.
#[derive(Debug, Parser)]
#[command(
    name = "dpguard",
    version,
    about = "Order-preserving private release of classifier confidence vectors"
)]
pub struct Cli {
    #[command(flatten)]
    pub common: CommonArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Defend every record of a JSONL or CSV stream.
    Defend,
    /// Solve for the fixed-point budget of a vector pair.
    Calibrate(CalibrateArgs),
    /// Run the synthetic membership-inference benchmark.
    Evaluate(EvaluateArgs),
    /// Serve the defense over HTTP with mandatory budget enforcement.
    Serve,
}

#[derive(Debug, Clone, Default, Args)]
pub struct CommonArgs {
    /// TOML configuration file.
    #[arg(long, global = true, env = "DPGUARD_CONFIG")]
    pub config: Option<PathBuf>,
    /// Privacy budget per selection.
    #[arg(long, global = true, env = "DPGUARD_EPSILON")]
    pub epsilon: Option<f64>,
    /// Candidates per sub-range [default: 5].
    #[arg(long, global = true, env = "DPGUARD_M")]
    pub m: Option<usize>,
    /// RNG seed; a fresh one is drawn when absent.
    #[arg(long, global = true, env = "DPGUARD_SEED")]
    pub seed: Option<u64>,
    /// Utility distance floor as a fraction of the candidate spacing [default: 0.1].
    #[arg(long, global = true, env = "DPGUARD_UTILITY_FLOOR_FRACTION")]
    pub utility_floor_fraction: Option<f64>,
    #[arg(long, global = true, env = "DPGUARD_TAU")]
    pub tau: Option<f64>,
    #[arg(long, global = true, env = "DPGUARD_EPS_CONFIDENT")]
    pub eps_confident: Option<f64>,
    #[arg(long, global = true, env = "DPGUARD_EPS_UNCONFIDENT")]
    pub eps_unconfident: Option<f64>,
    /// Overall per-record privacy target; enables the query ledger.
    #[arg(long, global = true, env = "DPGUARD_BUDGET_TOTAL_EPSILON")]
    pub budget_total_epsilon: Option<f64>,
    /// Class count the ledger is sized for.
    #[arg(long, global = true, env = "DPGUARD_NUM_CLASSES")]
    pub num_classes: Option<usize>,
    /// Persistent ledger file.
    #[arg(long, global = true, env = "DPGUARD_LEDGER")]
    pub ledger: Option<PathBuf>,
    #[arg(long, global = true, env = "DPGUARD_FORMAT", value_enum)]
    pub format: Option<Format>,
    /// Input file [default: stdin].
    #[arg(long, global = true, env = "DPGUARD_INPUT")]
    pub input: Option<PathBuf>,
    /// Output file [default: stdout].
    #[arg(long, global = true, env = "DPGUARD_OUTPUT")]
    pub output: Option<PathBuf>,
    #[arg(long, global = true, env = "DPGUARD_LISTEN")]
    pub listen: Option<String>,
    /// Classifier endpoint whose responses are defended.
    #[arg(long, global = true, env = "DPGUARD_UPSTREAM")]
    pub upstream: Option<String>,
}

#[derive(Debug, Clone, Args)]
pub struct CalibrateArgs {
    /// Original scores, comma separated.
    #[arg(long, value_delimiter = ',', required = true)]
    pub y: Vec<f64>,
    /// Modified scores, comma separated.
    #[arg(long = "y-prime", value_delimiter = ',', conflicts_with = "draws")]
    pub y_prime: Option<Vec<f64>>,
    /// Draw the modified scores with the configured mechanism instead.
    #[arg(long)]
    pub draws: bool,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvaluateArgs {
    #[arg(long, default_value_t = 10)]
    pub k: usize,
    #[arg(long, default_value_t = 20_000)]
    pub n_members: usize,
    #[arg(long, default_value_t = 20_000)]
    pub n_nonmembers: usize,
    #[arg(long, default_value_t = 0.99)]
    pub member_concentration: f64,
    #[arg(long, default_value_t = 0.6)]
    pub nonmember_concentration: f64,
    #[arg(long, default_value_t = 0)]
    pub cohort_seed: u64,
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileConfig {
    #[serde(default)]
    mechanism: FileMechanism,
    policy: Option<FilePolicy>,
    budget: Option<FileBudget>,
    #[serde(default)]
    io: FileIo,
    #[serde(default)]
    serve: FileServe,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileMechanism {
    epsilon: Option<f64>,
    m: Option<usize>,
    seed: Option<u64>,
    utility_floor_fraction: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FilePolicy {
    tau: Option<f64>,
    eps_confident: Option<f64>,
    eps_unconfident: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileBudget {
    total_epsilon: Option<f64>,
    num_classes: Option<usize>,
    ledger: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileIo {
    format: Option<Format>,
    input: Option<PathBuf>,
    output: Option<PathBuf>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct FileServe {
    listen: Option<String>,
    upstream: Option<String>,
}

/// Fully resolved settings.
#[derive(Debug, Clone, PartialEq)]
pub struct AppConfig {
    pub mechanism: MechanismConfig,
    pub policy: Option<DefensePolicy>,
    pub budget: Option<BudgetParams>,
    pub format: Format,
    pub ledger: Option<PathBuf>,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub listen: String,
    pub upstream: Option<String>,
}

impl AppConfig {
    pub fn new(mechanism: MechanismConfig) -> Self {
        Self {
            mechanism,
            policy: None,
            budget: None,
            format: Format::Jsonl,
            ledger: None,
            input: None,
            output: None,
            listen: DEFAULT_LISTEN.to_string(),
            upstream: None,
        }
    }

    pub fn resolve(args: &CommonArgs) -> Result<Self, ConfigError> {
        let file = match &args.config {
            Some(path) => toml::from_str::<FileConfig>(&fs::read_to_string(path)?)?,
            None => FileConfig::default(),
        };
        Self::merge(args, file)
    }

    fn merge(args: &CommonArgs, file: FileConfig) -> Result<Self, ConfigError> {
        let epsilon = args
            .epsilon
            .or(file.mechanism.epsilon)
            .ok_or(ConfigError::Missing("epsilon"))?;
        let seed = args.seed.or(file.mechanism.seed).unwrap_or_else(|| {
            let seed = rand::rng().random();
            tracing::info!(seed, "no seed configured; drew one");
            seed
        });
        let mut mechanism = MechanismConfig::new(epsilon).with_seed(seed);
        if let Some(m) = args.m.or(file.mechanism.m) {
            mechanism = mechanism.with_m(m);
        }
        if let Some(f) = args
            .utility_floor_fraction
            .or(file.mechanism.utility_floor_fraction)
        {
            mechanism = mechanism.with_utility_floor_fraction(f);
        }
        mechanism.validate()?;

        let fp = file.policy.unwrap_or_default();
        let policy = match (
            args.tau.or(fp.tau),
            args.eps_confident.or(fp.eps_confident),
            args.eps_unconfident.or(fp.eps_unconfident),
        ) {
            (None, None, None) => None,
            (Some(tau), Some(c), Some(u)) => Some(DefensePolicy::new(tau, c, u)?),
            _ => {
                return Err(ConfigError::Invalid(
                    "a policy needs tau, eps-confident and eps-unconfident together",
                ))
            }
        };

        let fb = file.budget.unwrap_or_default();
        let budget = match args.budget_total_epsilon.or(fb.total_epsilon) {
            None => None,
            Some(total) => {
                let k = args
                    .num_classes
                    .or(fb.num_classes)
                    .ok_or(ConfigError::Missing("num-classes (required with a budget)"))?;
                Some(BudgetParams::new(epsilon, k, total)?)
            }
        };

        Ok(Self {
            mechanism,
            policy,
            budget,
            format: args.format.or(file.io.format).unwrap_or_default(),
            ledger: args.ledger.clone().or(fb.ledger),
            input: args.input.clone().or(file.io.input),
            output: args.output.clone().or(file.io.output),
            listen: args
                .listen
                .clone()
                .or(file.serve.listen)
                .unwrap_or_else(|| DEFAULT_LISTEN.to_string()),
            upstream: args.upstream.clone().or(file.serve.upstream),
        })
    }
}
