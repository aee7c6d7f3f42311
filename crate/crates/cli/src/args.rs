use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "mealgen", version, about = "Ingredient-conditioned meal image synthesis experiments")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthetic benchmark generation.
    #[command(subcommand)]
    Synth(SynthCommand),
    /// Corpus ingestion.
    #[command(subcommand)]
    Data(DataCommand),
    /// Canonical ingredient vocabulary.
    #[command(subcommand)]
    Vocab(VocabCommand),
    /// Association model (FoodSpace).
    #[command(subcommand)]
    Assoc(AssocCommand),
    /// Conditional GAN.
    #[command(subcommand)]
    Gan(GanCommand),
    /// Sample grids with a shared noise vector or a shared recipe.
    #[command(subcommand)]
    Grid(GridCommand),
    /// Interpolation between two recipes in FoodSpace.
    Interp(InterpArgs),
    /// Retrieval and quality tables over run directories.
    Report(ReportArgs),
}

#[derive(Debug, Subcommand)]
pub enum SynthCommand {
    /// Generate recipes, render images, and train the presence oracle.
    Build(SynthBuildArgs),
}

#[derive(Debug, Args)]
pub struct SynthBuildArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// TOML file with benchmark settings; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub recipes: Option<usize>,
    #[arg(long)]
    pub glyphs: Option<usize>,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Oracle training epochs.
    #[arg(long)]
    pub oracle_epochs: Option<usize>,
    #[arg(long)]
    pub no_oracle: bool,
}

#[derive(Debug, Subcommand)]
pub enum DataCommand {
    /// Load, filter and split a corpus into a dataset directory.
    Prepare(PrepareArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FormatArg {
    Jsonl,
    Layered,
}

#[derive(Debug, Args)]
pub struct PrepareArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value = "jsonl")]
    pub format: FormatArg,
    /// Image layer joined on recipe id (layered format only).
    #[arg(long)]
    pub image_layer: Option<PathBuf>,
    /// Directory that image references are relative to; defaults to the
    /// corpus file's directory.
    #[arg(long)]
    pub images_root: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum VocabCommand {
    /// Frequency cut, stem merge, embeddings and fusion proposals.
    Build(VocabBuildArgs),
}

#[derive(Debug, Args)]
pub struct VocabBuildArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Reviewed decisions file; accepted pairs are fused.
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
pub enum AssocCommand {
    Train(AssocTrainArgs),
    Eval(AssocEvalArgs),
}

#[derive(Debug, Args)]
pub struct AssocTrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub vocab: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub feature_dim: Option<usize>,
    #[arg(long)]
    pub no_attention: bool,
    /// Train on the first N training recipes only.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AssocEvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Pool sizes; repeat or comma-separate.
    #[arg(long, value_delimiter = ',', default_values_t = vec![1000usize])]
    pub pool: Vec<usize>,
    #[arg(long, default_value_t = mealgen::retrieval::DEFAULT_REPETITIONS)]
    pub repetitions: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of recipes whose attention weights are exported.
    #[arg(long, default_value_t = 20)]
    pub attention: usize,
}

#[derive(Debug, Subcommand)]
pub enum GanCommand {
    Train(GanTrainArgs),
    Eval(GanEvalArgs),
}

#[derive(Debug, Args)]
pub struct GanTrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Association run directory providing the frozen encoders.
    #[arg(long)]
    pub assoc: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub category: Option<String>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub base_size: Option<usize>,
    #[arg(long)]
    pub cycle: Option<f64>,
    #[arg(long)]
    pub learning_rate: Option<f64>,
    #[arg(long)]
    pub sample_every: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct GanEvalArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = mealgen::image_eval::DEFAULT_EVAL_SAMPLES)]
    pub samples: usize,
    /// Retrieval pool for fake-image-to-recipe ranking.
    #[arg(long, default_value_t = 900)]
    pub pool: usize,
    #[arg(long, default_value_t = mealgen::retrieval::DEFAULT_REPETITIONS)]
    pub repetitions: usize,
    #[arg(long, default_value_t = mealgen::image_eval::DEFAULT_IS_SPLITS)]
    pub is_splits: usize,
    /// Presence oracle used as the feature extractor; defaults to the
    /// dataset's own oracle when present.
    #[arg(long)]
    pub oracle: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Subcommand)]
pub enum GridCommand {
    /// Several recipes sharing one noise vector.
    FixedZ(GridFixedZArgs),
    /// One recipe under several noise vectors.
    FixedC(GridFixedCArgs),
}

#[derive(Debug, Args)]
pub struct GridFixedZArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long, value_delimiter = ',', required = true)]
    pub recipes: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub z_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GridFixedCArgs {
    #[arg(long)]
    pub run: PathBuf,
    #[arg(long)]
    pub recipe: String,
    #[arg(long, default_value_t = 8)]
    pub num_z: usize,
    #[arg(long, default_value_t = 0)]
    pub z_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct InterpArgs {
    #[arg(long)]
    pub run: PathBuf,
    /// Recipe containing the target ingredient.
    #[arg(long, requires = "recipe_j")]
    pub recipe_i: Option<String>,
    /// Recipe without it.
    #[arg(long, requires = "recipe_i")]
    pub recipe_j: Option<String>,
    /// Canonical target ingredient; when mining, every ingredient is tried
    /// if omitted.
    #[arg(long)]
    pub target: Option<String>,
    /// Mine up to N qualifying pairs from the split instead of naming one.
    #[arg(long, conflicts_with = "recipe_i")]
    pub mine: Option<usize>,
    #[arg(long, default_value = "test")]
    pub split: String,
    #[arg(long, default_value_t = 5)]
    pub points: usize,
    #[arg(long, default_value_t = 0)]
    pub z_seed: u64,
    #[arg(long, default_value_t = crate::interp::MIN_OVERLAP)]
    pub min_overlap: f64,
    /// Output image (single pair) or directory (mining).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Also write the tables to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}
