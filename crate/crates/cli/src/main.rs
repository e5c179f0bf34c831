mod cmd;
mod config;
mod io;
mod resources;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use icl_forge_core::lpr::{FlagScope, LprSimilarity, RankBase, TieRank};
use icl_forge_core::scoring::PplOn;
use icl_forge_core::selectors::SelectorMethod;

use crate::io::UsageError;

#[derive(Parser)]
#[command(name = "icl-forge", version, about = "Noise-robust demonstration selection for in-context learning")]
struct Cli {
    /// JSON run configuration. Flags override it.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Worker bound (default: all cores, 4 when an HTTP backend is involved).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Corrupt a fraction of a pool's outputs and flag them.
    InjectNoise(cmd::noise::InjectNoiseArgs),
    /// Validate and convert an embedding matrix, or fetch one over HTTP.
    ImportEmbeddings(cmd::embed::ImportEmbeddingsArgs),
    /// Score every pool example and write a score file.
    Score(cmd::score::ScoreArgs),
    /// Select demonstrations for every test example.
    Select(cmd::select::SelectArgs),
    /// Run in-context inference and report EM or BLEU.
    Evaluate(cmd::evaluate::EvaluateArgs),
    /// Count scoring requests of local versus global ranking.
    Bench(cmd::bench::BenchArgs),
    /// Summarise evaluation reports as a table.
    Report(cmd::report::ReportArgs),
}

#[derive(Args, Debug, Clone, Default)]
pub struct SelectorArgs {
    #[arg(long, value_name = "random|topk|dpp")]
    pub selector: Option<SelectorMethod>,
    /// Demonstrations per test example (K).
    #[arg(long)]
    pub k_demos: Option<usize>,
    /// Similarity pre-filter size (M) for DPP and global ranking.
    #[arg(long)]
    pub dpp_pool: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug, Clone, Default)]
pub struct LprArgs {
    /// Filter selected demonstrations with local perplexity ranking.
    #[arg(long)]
    pub lpr: bool,
    /// Neighbours per cluster.
    #[arg(long)]
    pub lpr_k: Option<usize>,
    /// Rank-fraction threshold in [0, 1].
    #[arg(long)]
    pub lpr_gamma: Option<f64>,
    #[arg(long, value_name = "cosine|bm25")]
    pub lpr_similarity: Option<LprSimilarity>,
    #[arg(long, value_name = "zero_based|one_based")]
    pub lpr_rank_base: Option<RankBase>,
    #[arg(long, value_name = "min|ordinal")]
    pub lpr_tie_rank: Option<TieRank>,
    #[arg(long, value_name = "own_cluster|candidate_cluster")]
    pub lpr_flag_scope: Option<FlagScope>,
    /// Keep the filtered set in selector order.
    #[arg(long)]
    pub no_reorder: bool,
    /// Replace the selection with the K globally lowest-perplexity items
    /// among the M most similar.
    #[arg(long, conflicts_with = "lpr")]
    pub global_rank: bool,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ScorerArgs {
    /// file:PATH, synthetic:MODEL.json or an http(s) base URL.
    #[arg(long, value_name = "URI")]
    pub scorer: Option<String>,
    /// Model name for HTTP backends.
    #[arg(long)]
    pub model: Option<String>,
    /// Prompt template JSON shared by scoring and inference.
    #[arg(long, value_name = "PATH")]
    pub template: Option<PathBuf>,
    #[arg(long, value_name = "sequence|output")]
    pub ppl_on: Option<PplOn>,
    /// Score cache file (default: $ICL_FORGE_CACHE_DIR/scores.jsonl, else memory only).
    #[arg(long, value_name = "PATH")]
    pub cache: Option<PathBuf>,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let base = config::load(cli.config.as_deref())?;
    let jobs = cli.jobs;
    match cli.command {
        Command::InjectNoise(a) => cmd::noise::run(a, base, jobs),
        Command::ImportEmbeddings(a) => cmd::embed::run(a, base, jobs),
        Command::Score(a) => cmd::score::run(a, base, jobs),
        Command::Select(a) => cmd::select::run(a, base, jobs),
        Command::Evaluate(a) => cmd::evaluate::run(a, base, jobs),
        Command::Bench(a) => cmd::bench::run(a, base, jobs),
        Command::Report(a) => cmd::report::run(a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
