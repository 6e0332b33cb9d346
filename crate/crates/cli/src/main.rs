//! `dpfp`: fingerprint, share, attack and analyze relational tables.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod artifacts;
mod commands;

pub const EXIT_USAGE: u8 = 2;
pub const EXIT_DATA: u8 = 3;
pub const EXIT_BUDGET: u8 = 4;

#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub message: String,
}

impl CliError {
    pub fn usage(message: impl Into<String>) -> Self {
        Self { code: EXIT_USAGE, message: message.into() }
    }

    pub fn data(message: impl Into<String>) -> Self {
        Self { code: EXIT_DATA, message: message.into() }
    }
}

impl From<dpfp::Error> for CliError {
    fn from(e: dpfp::Error) -> Self {
        use dpfp::Error as E;
        let code = match &e {
            E::BudgetInfeasible { .. } => EXIT_BUDGET,
            E::Parameter(_) | E::Precondition(_) | E::Size(_) | E::Undefined(_) => EXIT_USAGE,
            E::Schema(_)
            | E::Integrity(_)
            | E::Alignment(_)
            | E::Config(_)
            | E::NonTermination { .. }
            | E::Io(_)
            | E::Csv(_)
            | E::Json(_) => EXIT_DATA,
        };
        Self { code, message: e.to_string() }
    }
}

#[derive(Debug, Parser)]
#[command(name = "dpfp", version, about = "Entry-level differentially-private fingerprinting of relational databases")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Insert one recipient's fingerprint and release the clamped copy.
    Fingerprint(FingerprintArgs),
    /// Recover a fingerprint template from a leaked copy.
    Extract(ExtractArgs),
    /// Match an extracted template against the recipient registry.
    Detect(DetectArgs),
    /// Simulate an attack on a fingerprinted copy.
    Attack(AttackArgs),
    /// Evaluate closed-form bounds.
    Analyze {
        #[command(subcommand)]
        what: AnalyzeCommand,
    },
    /// Share copies with C recipients under a cumulative budget (ε₀, δ₀).
    Share(ShareArgs),
    /// Utility metrics of a shared copy against the original.
    Utility(UtilityArgs),
    /// Randomized response followed by fraction-λ fingerprinting.
    Baseline(BaselineArgs),
}

#[derive(Debug, Args)]
pub struct KeyArgs {
    /// Secret key file (falls back to the DPFP_KEY environment variable). Never echoed.
    #[arg(long, env = "DPFP_KEY_FILE")]
    pub key_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TableArgs {
    /// Input table (CSV with header).
    #[arg(long)]
    pub db: PathBuf,
    /// Schema sidecar (JSON).
    #[arg(long)]
    pub schema: PathBuf,
}

#[derive(Debug, Args)]
pub struct MechanismArgs {
    /// Insertion budget ε.
    #[arg(long)]
    pub epsilon: f64,
    /// Sensitivity Δ; overrides the schema and may only tighten the global value.
    #[arg(long)]
    pub delta: Option<u32>,
    /// Marking probability p; defaults to the minimum 1/(e^{ε/K}+1).
    #[arg(long)]
    pub p: Option<f64>,
    /// Fingerprint length L (at most 128).
    #[arg(long, default_value_t = 128)]
    pub len: usize,
}

#[derive(Debug, Args)]
pub struct FingerprintArgs {
    #[command(flatten)]
    pub table: TableArgs,
    #[command(flatten)]
    pub mechanism: MechanismArgs,
    #[command(flatten)]
    pub key: KeyArgs,
    /// Recipient's internal id; its fingerprint is derived from the key and this id.
    #[arg(long)]
    pub sp_id: String,
    /// Released CSV.
    #[arg(long)]
    pub out: PathBuf,
    /// Debug listing of every mark decision (key-holder only).
    #[arg(long)]
    pub marks: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExtractArgs {
    /// Original table (CSV).
    #[arg(long)]
    pub original: PathBuf,
    /// Leaked copy (CSV).
    #[arg(long)]
    pub leak: PathBuf,
    /// Schema sidecar (JSON).
    #[arg(long)]
    pub schema: PathBuf,
    #[command(flatten)]
    pub mechanism: MechanismArgs,
    #[command(flatten)]
    pub key: KeyArgs,
    /// Extraction result (JSON); printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DetectArgs {
    /// Extraction result written by `extract`.
    #[arg(long)]
    pub extraction: PathBuf,
    /// JSON object mapping external recipient ids to internal ids.
    #[arg(long)]
    pub registry: PathBuf,
    /// Number of recipients C used to derive the match threshold D.
    #[arg(long, conflicts_with = "threshold")]
    pub recipients: Option<u64>,
    /// Explicit match threshold D.
    #[arg(long)]
    pub threshold: Option<usize>,
    #[command(flatten)]
    pub key: KeyArgs,
    /// Verdict (JSON); printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AttackChoice {
    /// Random bit flipping with probability γ_rnd.
    Flip,
    /// Row subset keeping each row with probability γ_sub.
    Subset,
    /// Correlation attack with threshold τ.
    Corr,
}

#[derive(Debug, Args)]
pub struct AttackArgs {
    #[arg(long, value_enum)]
    pub kind: AttackChoice,
    #[command(flatten)]
    pub table: TableArgs,
    /// γ_rnd for `flip`, γ_sub for `subset`.
    #[arg(long)]
    pub gamma: Option<f64>,
    /// τ for `corr`.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Number of low bits K the attacker touches; defaults to the bit width of Δ.
    #[arg(long)]
    pub bits: Option<u32>,
    /// Attack RNG seed.
    #[arg(long)]
    pub seed: u64,
    /// Reference distributions (JSON) for `corr`; defaults to the input's own.
    #[arg(long)]
    pub ref_joint: Option<PathBuf>,
    /// Attacked CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum AnalyzeCommand {
    /// Evaluate one closed-form bound and print {inputs, value|interval}.
    Bound(BoundArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum BoundName {
    Infcap,
    Error,
    Density,
    Joint,
    Marginal,
    Psub,
    Prnd,
    Gain,
}

#[derive(Debug, Args)]
pub struct BoundArgs {
    #[arg(long, value_enum)]
    pub name: BoundName,
    /// Insertion budget ε (used to derive p when --p is absent).
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Marking probability p.
    #[arg(long)]
    pub p: Option<f64>,
    /// Sensitivity Δ.
    #[arg(long, default_value_t = 1)]
    pub delta: u32,
    /// Prior odds ψ (infcap).
    #[arg(long)]
    pub psi: Option<f64>,
    /// Rows N.
    #[arg(long)]
    pub n: Option<usize>,
    /// Attributes T.
    #[arg(long)]
    pub t: Option<usize>,
    /// Fingerprint length L.
    #[arg(long, default_value_t = 128)]
    pub len: usize,
    /// γ_sub (psub) or γ_rnd (prnd).
    #[arg(long)]
    pub gamma: Option<f64>,
    /// Match threshold D (prnd); derived from C when omitted.
    #[arg(long)]
    pub d: Option<usize>,
    /// Recipients C for deriving D.
    #[arg(long, default_value_t = 1)]
    pub recipients: u64,
    /// Original joint or marginal probability (joint, marginal).
    #[arg(long)]
    pub prob: Option<f64>,
    /// Pr_min over the other cells (joint, marginal).
    #[arg(long)]
    pub pr_min: Option<f64>,
    /// Pr_max over the other cells (joint, marginal).
    #[arg(long)]
    pub pr_max: Option<f64>,
    /// Threshold τ (gain).
    #[arg(long)]
    pub tau: Option<f64>,
    /// JSON list of {joint, pr_min, pr_max} cells (gain).
    #[arg(long)]
    pub cells: Option<PathBuf>,
    /// Gain endpoint form.
    #[arg(long, value_enum, default_value_t = GainForm::ScaledLambda)]
    pub variant: GainForm,
    /// Monte Carlo trials for prnd; 0 selects exact evaluation (tiny instances only).
    #[arg(long, default_value_t = 0)]
    pub trials: usize,
    /// Monte Carlo seed for prnd.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GainForm {
    ScaledLambda,
    Difference,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum GammaBasisArg {
    /// Γ scales with N·K.
    Nk,
    /// Γ scales with N·T.
    Nt,
}

#[derive(Debug, Args)]
pub struct ShareArgs {
    #[command(flatten)]
    pub table: TableArgs,
    #[command(flatten)]
    pub key: KeyArgs,
    /// Number of recipients C.
    #[arg(long)]
    pub recipients: usize,
    /// Cumulative budget ε₀.
    #[arg(long)]
    pub epsilon0: f64,
    /// Composition slack δ′; the run reports δ₀ = 2δ′.
    #[arg(long)]
    pub delta_prime: f64,
    /// Per-copy insertion budget ε.
    #[arg(long)]
    pub epsilon: f64,
    /// Sensitivity Δ override.
    #[arg(long)]
    pub delta: Option<u32>,
    /// Density threshold Γ; defaults to (1/2 + 1/√12)·Δ·p·N·K.
    #[arg(long)]
    pub gamma: Option<f64>,
    #[arg(long, value_enum, default_value_t = GammaBasisArg::Nk)]
    pub gamma_basis: GammaBasisArg,
    /// Split of ε₂ + ε₃ as ε₂ share : ε₃ share.
    #[arg(long, num_args = 2, value_names = ["E2", "E3"], default_values_t = [1.0, 1.0])]
    pub ratio: Vec<f64>,
    /// Seed of the Laplace noise streams.
    #[arg(long, default_value_t = 0)]
    pub noise_seed: u64,
    /// Safety cap on trials per recipient.
    #[arg(long, default_value_t = dpfp::svt::DEFAULT_MAX_TRIALS)]
    pub max_trials: usize,
    /// Fingerprint length L.
    #[arg(long, default_value_t = 128)]
    pub len: usize,
    /// Output directory for copies, registry and ledger.
    #[arg(long)]
    pub out_dir: PathBuf,
}

#[derive(Debug, Args)]
pub struct UtilityArgs {
    /// Original table (CSV).
    #[arg(long)]
    pub original: PathBuf,
    /// Shared copy (CSV).
    #[arg(long)]
    pub shared: PathBuf,
    /// Schema sidecar (JSON).
    #[arg(long)]
    pub schema: PathBuf,
    /// Conjunctive equality query (JSON {"predicates": [[attr, value], ...]}).
    #[arg(long)]
    pub query: Option<PathBuf>,
    /// Metrics (JSON); printed to stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    #[command(flatten)]
    pub table: TableArgs,
    #[command(flatten)]
    pub mechanism: MechanismArgs,
    #[command(flatten)]
    pub key: KeyArgs,
    /// Recipient's internal id.
    #[arg(long)]
    pub sp_id: String,
    /// Marking fraction λ of the fingerprinting stage.
    #[arg(long)]
    pub lambda: f64,
    /// Randomized-response seed.
    #[arg(long)]
    pub seed: u64,
    /// Released CSV.
    #[arg(long)]
    pub out: PathBuf,
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Fingerprint(a) => commands::fingerprint(&a),
        Command::Extract(a) => commands::extract(&a),
        Command::Detect(a) => commands::detect(&a),
        Command::Attack(a) => commands::attack(&a),
        Command::Analyze { what: AnalyzeCommand::Bound(a) } => commands::bound(&a),
        Command::Share(a) => commands::share(&a),
        Command::Utility(a) => commands::utility(&a),
        Command::Baseline(a) => commands::baseline(&a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_USAGE } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", e.message);
            ExitCode::from(e.code)
        }
    }
}
