use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use ldpp::selfplay::{PlannerMode, DEFAULT_ETA, DEFAULT_MAX_TURNS, DEFAULT_VOTES};

mod commands;
mod run;

#[derive(Parser)]
#[command(name = "ldpp", version, about = "Latent dialogue policy discovery and planning pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dialogue corpus.
    GenCorpus(GenCorpusArgs),
    /// Score every system turn of a corpus with a critic.
    Annotate(AnnotateArgs),
    /// Pretrain the generator (unless --from is given) and run Stage 1.
    TrainStage1(Stage1Args),
    /// Attach encoder pseudo-labels to annotated tuples.
    Label(LabelArgs),
    TrainStage2(StageArgs),
    TrainStage3(StageArgs),
    /// Self-play evaluation.
    Evaluate(EvaluateArgs),
    /// Codebook usage, representative utterances and projections.
    Analyze(AnalyzeArgs),
    /// Context-completion augmentation.
    Augment(AugmentArgs),
}

#[derive(Args)]
pub struct GenCorpusArgs {
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Run directory, or a `.json` file for the corpus alone.
    #[arg(long)]
    pub out: PathBuf,
    /// Synthetic spec as JSON (built-in six-strategy spec otherwise).
    #[arg(long)]
    pub spec: Option<PathBuf>,
}

#[derive(Args)]
pub struct AnnotateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = DEFAULT_VOTES)]
    pub votes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    /// Use the chat-completion critic (LDPP_API_BASE, LDPP_API_KEY).
    #[arg(long)]
    pub external: bool,
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Args)]
pub struct Stage1Args {
    #[arg(long)]
    pub tuples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generator-pretrain checkpoint to start from.
    #[arg(long)]
    pub from: Option<PathBuf>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Args)]
pub struct LabelArgs {
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub tuples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args)]
pub struct StageArgs {
    #[arg(long)]
    pub from: PathBuf,
    /// Labelled, reward-annotated tuples.
    #[arg(long)]
    pub tuples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Allow Stage 3 to start from a Stage-1 checkpoint.
    #[arg(long)]
    pub skip_stage2: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum Planner {
    Mixture,
    Argmax,
    Random,
}

impl From<Planner> for PlannerMode {
    fn from(p: Planner) -> Self {
        match p {
            Planner::Mixture => PlannerMode::Mixture,
            Planner::Argmax => PlannerMode::Argmax,
            Planner::Random => PlannerMode::Random,
        }
    }
}

#[derive(Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub from: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 200)]
    pub cases: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value_t = Planner::Mixture)]
    pub planner: Planner,
    #[arg(long, default_value_t = DEFAULT_MAX_TURNS)]
    pub max_turns: usize,
    #[arg(long, default_value_t = DEFAULT_ETA)]
    pub eta: f64,
    #[arg(long, default_value_t = DEFAULT_VOTES)]
    pub votes: usize,
    #[arg(long, default_value_t = 32)]
    pub max_new_tokens: usize,
    /// Leave aborted episodes out of the metrics instead of counting them as failures.
    #[arg(long)]
    pub exclude_aborted: bool,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub external: bool,
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

#[derive(Args)]
pub struct AnalyzeArgs {
    #[arg(long)]
    pub from: PathBuf,
    /// Labelled tuples.
    #[arg(long)]
    pub tuples: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Corpus with ground-truth labels, for clustering quality.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    pub top_n: usize,
    #[arg(long, default_value_t = 6)]
    pub top_codes: usize,
}

#[derive(Args)]
pub struct AugmentArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub min_prefix: usize,
    #[arg(long, default_value_t = 8)]
    pub max_prefix: usize,
    #[arg(long, default_value_t = 7)]
    pub per_dialogue: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub spec: Option<PathBuf>,
    #[arg(long)]
    pub external: bool,
    #[arg(long)]
    pub templates: Option<PathBuf>,
}

fn dispatch(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::GenCorpus(a) => commands::gen_corpus(a),
        Command::Annotate(a) => commands::annotate(a),
        Command::TrainStage1(a) => commands::train_stage1_cmd(a),
        Command::Label(a) => commands::label(a),
        Command::TrainStage2(a) => commands::train_later(a, ldpp::models::Stage::Stage2),
        Command::TrainStage3(a) => commands::train_later(a, ldpp::models::Stage::Stage3),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Analyze(a) => commands::analyze(a),
        Command::Augment(a) => commands::augment(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.chain().any(|c| c.downcast_ref::<ldpp::Error>().is_some_and(ldpp::Error::is_validation));
            ExitCode::from(if validation { 1 } else { 2 })
        }
    }
}
