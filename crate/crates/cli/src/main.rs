//! `contdrop`: moment analyses, oracle checks, and MNIST experiments for
//! continuous dropout.
//!
//! Exit status: 0 on success, 1 on invalid input, 2 on numeric failure
//! (divergence or an oracle check that did not pass).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use contdrop::network::Init;
use contdrop::train::{TrainConfig, DESK_WIDTH, MNIST_TRAIN_COUNT};
use contdrop::{Error, MaskDistribution, MomentMode};

mod analysis;
mod experiments;
mod output;

/// Thread count for the parallel Monte-Carlo and multi-run drivers.
const THREADS_ENV: &str = "CONTDROP_THREADS";

#[derive(Debug, Parser)]
#[command(name = "contdrop", version, about = "Continuous dropout analyses and experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Closed-form vs Monte-Carlo moments of a random masked linear layer,
    /// and the sigmoid-expectation approximation grid.
    AnalyzeStatic(StaticArgs),
    /// Error and gradient decompositions of random single units.
    AnalyzeDynamic(DynamicArgs),
    /// Pairwise hidden-unit covariance histograms of trained networks.
    Covhist(CovhistArgs),
    /// Train one MNIST network.
    Train(TrainArgs),
    /// Paired multi-run comparison of mask laws.
    Compare(CompareArgs),
    /// Test error of clipped-Gaussian dropout over a variance grid.
    Sweep(SweepArgs),
    /// Run every closed-form-vs-oracle suite.
    Verify(VerifyArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Format {
    Json,
    Csv,
}

#[derive(Debug, Args)]
struct Common {
    #[arg(long, default_value_t = 7)]
    seed: u64,
    /// Created if absent.
    #[arg(long, default_value = "out")]
    out_dir: PathBuf,
    /// JSON reports are always written; `csv` adds the tabular views.
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

/// Parses `--dropout` values; `none` means no dropout.
fn parse_law(s: &str) -> Result<Option<MaskDistribution>, String> {
    if s.trim().eq_ignore_ascii_case("none") {
        return Ok(None);
    }
    s.parse::<MaskDistribution>().map(Some).map_err(|e| e.to_string())
}

/// A possibly absent law as a single flag value; a bare `Option` field would
/// make the flag itself optional.
#[derive(Debug, Clone, Copy, PartialEq)]
struct LawArg(Option<MaskDistribution>);

fn parse_law_arg(s: &str) -> Result<LawArg, String> {
    parse_law(s).map(LawArg)
}

fn parse_required_law(s: &str) -> Result<MaskDistribution, String> {
    parse_law(s)?.ok_or_else(|| "a mask law is required here".into())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum ModeArg {
    Nominal,
    Effective,
}

impl From<ModeArg> for MomentMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Nominal => MomentMode::Nominal,
            ModeArg::Effective => MomentMode::Effective,
        }
    }
}

#[derive(Debug, Args)]
struct StaticArgs {
    #[command(flatten)]
    common: Common,
    /// Repeatable. Defaults to Bernoulli(0.5), uniform and unclipped N(0.5, 0.2).
    #[arg(long = "dropout", value_parser = parse_required_law)]
    dropout: Vec<MaskDistribution>,
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    /// Layer fan-in.
    #[arg(long, default_value_t = 8)]
    inputs: usize,
    /// Layer width.
    #[arg(long, default_value_t = 4)]
    units: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Effective)]
    mode: ModeArg,
}

#[derive(Debug, Args)]
struct DynamicArgs {
    #[command(flatten)]
    common: Common,
    /// Repeatable. Defaults to Bernoulli(0.5) and unclipped N(0.5, 0.2).
    #[arg(long = "dropout", value_parser = parse_required_law)]
    dropout: Vec<MaskDistribution>,
    #[arg(long, default_value_t = 1_000_000)]
    samples: usize,
    #[arg(long, default_value_t = 100)]
    instances: usize,
    #[arg(long, default_value_t = 8)]
    max_dim: usize,
    #[arg(long, value_enum, default_value_t = ModeArg::Nominal)]
    mode: ModeArg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InitArg {
    Normal,
    Fan,
}

/// Data location and training schedule shared by the MNIST subcommands.
#[derive(Debug, Args)]
struct TrainOpts {
    /// Falls back to $CONTDROP_MNIST_DIR, then /root/data/mnist.
    #[arg(long)]
    mnist_dir: Option<PathBuf>,
    /// Training examples; the rest of the 60000 form the validation set.
    #[arg(long, default_value_t = MNIST_TRAIN_COUNT)]
    train_count: usize,
    /// Use only the first this many test images.
    #[arg(long)]
    test_count: Option<usize>,
    #[arg(long, default_value_t = DESK_WIDTH)]
    width: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    lr_decay: Option<f64>,
    /// Max-norm radius; `inf` disables the constraint.
    #[arg(long)]
    maxnorm: Option<f64>,
    #[arg(long, value_enum)]
    init: Option<InitArg>,
    #[arg(long, requires = "init")]
    init_std: Option<f64>,
    /// Also mask the raw input pixels.
    #[arg(long)]
    mask_input: bool,
}

impl TrainOpts {
    fn config(&self, seed: u64) -> TrainConfig {
        let d = TrainConfig::default();
        TrainConfig {
            seed,
            epochs: self.epochs.unwrap_or(d.epochs),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            lr_initial: self.lr.unwrap_or(d.lr_initial),
            lr_decay: self.lr_decay.unwrap_or(d.lr_decay),
            maxnorm_c: match self.maxnorm {
                None => d.maxnorm_c,
                Some(c) if c.is_infinite() && c > 0.0 => None,
                Some(c) => Some(c),
            },
            init: match self.init {
                None => d.init,
                Some(InitArg::Fan) => Init::UniformFan,
                Some(InitArg::Normal) => Init::Normal {
                    std: self.init_std.unwrap_or(0.01),
                },
            },
            mask_input: self.mask_input,
            ..d
        }
    }
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    opts: TrainOpts,
    /// Mask law at hidden-layer inputs, or `none`.
    #[arg(long, value_parser = parse_law_arg, default_value = "gaussian:mu=0.5,var=0.2")]
    dropout: LawArg,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    opts: TrainOpts,
    /// Repeatable; at least one. `none` trains without dropout.
    #[arg(long = "dropout", value_parser = parse_law, required = true)]
    dropout: Vec<Option<MaskDistribution>>,
    #[arg(long, default_value_t = 5)]
    runs: usize,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    opts: TrainOpts,
    /// Comma-separated mask variances.
    #[arg(long, value_delimiter = ',', default_value = "0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")]
    grid: Vec<f64>,
    #[arg(long, default_value_t = 1)]
    runs: usize,
}

#[derive(Debug, Args)]
struct CovhistArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    opts: TrainOpts,
    /// Repeatable; one network is trained per law. Ignored with `--model`.
    #[arg(long = "dropout", value_parser = parse_law)]
    dropout: Vec<Option<MaskDistribution>>,
    /// Repeatable; saved networks to analyse instead of training.
    #[arg(long)]
    model: Vec<PathBuf>,
    /// Law installed at dropout-free sites so every layer can be probed.
    #[arg(long, value_parser = parse_required_law, default_value = "gaussian:mu=0.5,var=0.2")]
    probe: MaskDistribution,
    /// Test images the covariances are aggregated over.
    #[arg(long, default_value_t = 10)]
    n_inputs: usize,
    #[arg(long, default_value_t = 1000)]
    repeats: usize,
    #[arg(long, default_value_t = 41)]
    bins: usize,
    #[arg(long, default_value_t = 99.9)]
    percentile: f64,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[command(flatten)]
    common: Common,
    /// Monte-Carlo draws per oracle; defaults to 10^6.
    #[arg(long)]
    samples: Option<usize>,
    #[arg(long)]
    instances: Option<usize>,
}

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
enum Failure {
    Invalid(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Numeric(_) | Error::Divergence { .. } => Failure::Numeric(e.to_string()),
            other => Failure::Invalid(other.to_string()),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Invalid(e.to_string())
    }
}

type CliResult<T = ()> = Result<T, Failure>;

fn configure_threads() -> CliResult {
    let Ok(raw) = std::env::var(THREADS_ENV) else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::Invalid(format!("{THREADS_ENV} must be a positive integer, got `{raw}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Failure::Invalid(e.to_string()))
}

fn run(cli: Cli) -> CliResult {
    configure_threads()?;
    match cli.command {
        Command::AnalyzeStatic(a) => analysis::analyze_static(a),
        Command::AnalyzeDynamic(a) => analysis::analyze_dynamic(a),
        Command::Verify(a) => analysis::verify(a),
        Command::Train(a) => experiments::train(a),
        Command::Compare(a) => experiments::compare(a),
        Command::Sweep(a) => experiments::sweep(a),
        Command::Covhist(a) => experiments::covhist(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Invalid(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Numeric(msg)) => {
            eprintln!("numeric failure: {msg}");
            ExitCode::from(2)
        }
    }
}
