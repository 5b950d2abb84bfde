use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

/// Retrieval-augmented decoding toolkit.
///
/// Corpora are TSV files: source, target, optional domain, optional talk id.
/// Results go to stdout (or --out), progress to stderr. Every command
/// writes a JSON run manifest next to its main output, or to --manifest.
/// All randomness comes from --seed through ChaCha8.
#[derive(Debug, Parser)]
#[command(name = "knnmt", version, about, long_about)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model, or adapters on top of an existing one.
    Train(TrainArgs),
    /// Teacher-force a corpus through a model into a kNN datastore.
    BuildDatastore(BuildDatastoreArgs),
    /// Beam-decode the sources of a corpus, optionally with retrieval.
    Decode(DecodeArgs),
    /// Search retrieval temperature and weight on a dev corpus.
    GridSearch(GridSearchArgs),
    /// Augment a bitext with forward and backward translations.
    Diversify(DiversifyArgs),
    /// Rank a pool by n-gram overlap with a seed corpus and keep the top k.
    SelectData(SelectDataArgs),
    /// Decode each talk with a datastore built from the other talks.
    LeaveOneOut(LeaveOneOutArgs),
    /// Score hypotheses against references.
    Score(ScoreArgs),
    /// Deduplicate and drop over-long or length-skewed pairs.
    Filter(FilterArgs),
    /// Train an n-gram language model for shallow fusion.
    TrainLm(TrainLmArgs),
    /// Write one of the seeded synthetic benchmarks.
    MakeBenchmark(MakeBenchmarkArgs),
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct Common {
    /// Seed for every random choice the command makes.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Where to write the run manifest [default: <output>.manifest.json]
    #[arg(long)]
    pub manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    /// Training corpus (TSV).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output model file.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    /// SGD learning rate.
    #[arg(long, default_value_t = 0.5)]
    pub lr: f64,
    #[arg(long, default_value_t = 8)]
    pub batch_size: usize,
    /// Global gradient-norm clipping threshold.
    #[arg(long, default_value_t = 5.0)]
    pub clip_norm: f64,
    /// Freeze the base model and train only the adapter for --lang.
    #[arg(long, requires = "init")]
    pub adapters_only: bool,
    /// Language tag for the adapter.
    #[arg(long, default_value = "default")]
    pub lang: String,
    /// Start from this model instead of a fresh one.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Extra corpora whose tokens join the vocabulary without being trained on.
    #[arg(long)]
    pub vocab_corpus: Vec<PathBuf>,
    #[arg(long, default_value_t = 32_000)]
    pub max_vocab: usize,
    /// Train target-to-source.
    #[arg(long)]
    pub reverse: bool,
    #[arg(long, default_value_t = 32)]
    pub emb_dim: usize,
    #[arg(long, default_value_t = 64)]
    pub hidden_dim: usize,
    #[arg(long, default_value_t = 8)]
    pub adapter_rank: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct BuildDatastoreArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Bitext to teacher-force (TSV).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Activate this adapter before building.
    #[arg(long)]
    pub lang: Option<String>,
    /// Attach an inverted-file index with this many clusters.
    #[arg(long)]
    pub ivf_clusters: Option<usize>,
    #[arg(long, default_value_t = 20)]
    pub ivf_iterations: usize,
    /// Clusters probed per IVF query.
    #[arg(long, default_value_t = 8)]
    pub nprobe: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Args, Serialize)]
pub struct RetrievalArgs {
    /// Neighbors per query.
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    /// Retrieval temperature.
    #[arg(long = "T", default_value_t = 50.0)]
    pub temperature: f64,
    /// Weight of the kNN distribution.
    #[arg(long = "w", default_value_t = 0.3)]
    pub weight: f64,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    /// Output length cap [default: 2 x source length + 8]
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Activate this adapter on every model that has it.
    #[arg(long)]
    pub lang: Option<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct DecodeArgs {
    /// Model file; repeat to ensemble.
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Datastore per model, in the same order.
    #[arg(long = "datastore")]
    pub datastores: Vec<PathBuf>,
    /// Corpus whose sources are decoded (TSV).
    #[arg(long)]
    pub corpus: PathBuf,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Never retrieve entries from this talk.
    #[arg(long)]
    pub exclude_talk: Option<u32>,
    /// Shallow-fusion weight of --lm.
    #[arg(long, default_value_t = 0.0)]
    pub fusion_alpha: f64,
    /// N-gram count file from train-lm.
    #[arg(long)]
    pub lm: Option<PathBuf>,
    /// JSONL report [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct GridSearchArgs {
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    #[arg(long = "datastore", required = true)]
    pub datastores: Vec<PathBuf>,
    /// Dev corpus (TSV).
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long = "T-grid", value_delimiter = ',', default_value = "10,50,100")]
    pub t_grid: Vec<f64>,
    #[arg(long = "w-grid", value_delimiter = ',', default_value = "0.1,0.3,0.5")]
    pub w_grid: Vec<f64>,
    #[arg(long, default_value_t = 8)]
    pub k: usize,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    /// Exclude each dev pair's own talk from retrieval.
    #[arg(long)]
    pub leave_one_out: bool,
    #[arg(long)]
    pub lang: Option<String>,
    /// TSV table [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct DiversifyArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Source-to-target model.
    #[arg(long)]
    pub forward: PathBuf,
    /// Target-to-source model.
    #[arg(long)]
    pub backward: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 1)]
    pub rounds: usize,
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    /// Keep exact duplicate pairs.
    #[arg(long)]
    pub no_dedup: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct SelectDataArgs {
    /// Candidate pool (TSV).
    #[arg(long)]
    pub pool: PathBuf,
    /// In-domain seed corpus (TSV); its sources define the n-grams.
    #[arg(long)]
    pub seed_corpus: PathBuf,
    #[arg(long)]
    pub top_k: usize,
    #[arg(long, default_value_t = 4)]
    pub max_order: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct LeaveOneOutArgs {
    #[arg(long = "model", required = true)]
    pub models: Vec<PathBuf>,
    /// Talk corpus (TSV with talk ids).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Prebuilt datastores, one per model [default: built from --corpus]
    #[arg(long = "datastore")]
    pub datastores: Vec<PathBuf>,
    #[command(flatten)]
    pub retrieval: RetrievalArgs,
    /// Terminology list, one token per line, for term recall.
    #[arg(long)]
    pub terms: Option<PathBuf>,
    /// Retrieval hypotheses, one per line.
    #[arg(long)]
    pub hyps_out: Option<PathBuf>,
    /// Retrieval-off hypotheses, one per line.
    #[arg(long)]
    pub base_hyps_out: Option<PathBuf>,
    /// JSON report [default: stdout]
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    Bleu,
    Wer,
}

#[derive(Debug, Args, Serialize)]
pub struct ScoreArgs {
    #[arg(long, value_enum)]
    pub metric: Metric,
    /// Hypotheses: plain lines, or a decode JSONL report.
    #[arg(long)]
    pub hyp: PathBuf,
    /// References, one per line.
    #[arg(long, required_unless_present = "ref_corpus", conflicts_with = "ref_corpus")]
    pub r#ref: Option<PathBuf>,
    /// Take references from the target column of a TSV corpus.
    #[arg(long)]
    pub ref_corpus: Option<PathBuf>,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args, Serialize)]
pub struct FilterArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Longest allowed length ratio, in either direction.
    #[arg(long, default_value_t = 3.0)]
    pub max_ratio: f64,
    /// Longest allowed side, in tokens.
    #[arg(long, default_value_t = 200)]
    pub max_len: usize,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Side {
    Source,
    Target,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainLmArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Model whose vocabulary the LM shares.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, default_value_t = knnmt::ngram::DEFAULT_ORDER)]
    pub order: usize,
    #[arg(long, value_enum, default_value_t = Side::Target)]
    pub side: Side,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum BenchmarkKind {
    /// general.tsv, talks.tsv and terms.txt
    DomainShift,
    /// base.tsv, bitext.tsv and dev.tsv
    Adaptation,
    /// copy.tsv
    Copy,
    /// restoration.tsv
    Restoration,
}

#[derive(Debug, Args, Serialize)]
pub struct MakeBenchmarkArgs {
    #[arg(long, value_enum)]
    pub kind: BenchmarkKind,
    #[arg(long)]
    pub out_dir: PathBuf,
    /// Pair count for the copy and restoration sets.
    #[arg(long, default_value_t = 200)]
    pub size: usize,
    #[command(flatten)]
    pub common: Common,
}
