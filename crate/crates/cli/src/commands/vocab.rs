use std::path::Path;

use anyhow::{Context, Result};
use mealgen::recipe_data::{Recipe, Split};
use mealgen::vocab::{
    apply_decisions, parse_decisions, propose_fusions, proposals_to_review_text, train_embeddings, Decision,
    EmbeddingTable, IngredientVocabulary, Word2VecConfig, DEFAULT_FUSION_THRESHOLD, DEFAULT_TOP_K,
};
use serde::{Deserialize, Serialize};

use crate::args::VocabBuildArgs;
use crate::dataset::Dataset;
use crate::rundir::{base_config, RunDir};

pub const VOCAB_FILE: &str = "vocab.txt";
pub const EMBEDDINGS_FILE: &str = "embeddings.bin";
pub const REVIEW_FILE: &str = "proposals.tsv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct VocabConfig {
    pub data: String,
    pub top_k: usize,
    pub fusion_threshold: f64,
    pub decisions: Option<String>,
    pub embeddings: Word2VecConfig,
}

impl Default for VocabConfig {
    fn default() -> Self {
        Self {
            data: String::new(),
            top_k: DEFAULT_TOP_K,
            fusion_threshold: DEFAULT_FUSION_THRESHOLD,
            decisions: None,
            embeddings: Word2VecConfig::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct VocabStats {
    canonical: usize,
    coverage: f64,
    proposals: usize,
    accepted: usize,
    vocabulary_hash: String,
}

fn embed(vocab: &IngredientVocabulary, recipes: &[Recipe], cfg: &Word2VecConfig) -> Result<EmbeddingTable> {
    let seqs: Vec<Vec<usize>> = recipes.iter().map(|r| vocab.encode(&r.ingredients)).collect();
    Ok(train_embeddings(&seqs, vocab.len(), cfg)?)
}

pub fn build(args: &VocabBuildArgs) -> Result<()> {
    let mut cfg: VocabConfig = base_config(args.config.as_deref())?;
    cfg.data = args.data.display().to_string();
    if let Some(k) = args.top_k {
        cfg.top_k = k;
    }
    if let Some(t) = args.threshold {
        cfg.fusion_threshold = t;
    }
    if let Some(e) = args.epochs {
        cfg.embeddings.epochs = e;
    }
    if let Some(s) = args.seed {
        cfg.embeddings.seed = s;
    }
    if let Some(d) = &args.decisions {
        cfg.decisions = Some(d.display().to_string());
    }

    let data = Dataset::open(&args.data)?;
    let train = data.recipes(Split::Train, None);
    let run = RunDir::acquire(&args.out)?;
    run.write_config(&cfg)?;

    let mut vocab = IngredientVocabulary::build(&train, cfg.top_k)?;
    let mut table = embed(&vocab, &train, &cfg.embeddings)?;
    let mut proposals = propose_fusions(&vocab, &table, cfg.fusion_threshold)?;
    run.write_text(REVIEW_FILE, &proposals_to_review_text(&proposals))?;
    if let Some(path) = &cfg.decisions {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {path}"))?;
        let rows = parse_decisions(&text)?;
        vocab = apply_decisions(&vocab, &mut proposals, &rows, &train)?;
        table = embed(&vocab, &train, &cfg.embeddings)?;
    }
    vocab.save(&run.join(VOCAB_FILE))?;
    table.save(&run.join(EMBEDDINGS_FILE))?;
    run.write_json(
        "stats.json",
        &VocabStats {
            canonical: vocab.len(),
            coverage: vocab.coverage(),
            proposals: proposals.len(),
            accepted: proposals.iter().filter(|p| p.decision == Decision::Accept).count(),
            vocabulary_hash: vocab.hash(),
        },
    )
}

pub fn load(dir: &Path) -> Result<(IngredientVocabulary, EmbeddingTable)> {
    let vocab = IngredientVocabulary::load(&dir.join(VOCAB_FILE))
        .with_context(|| format!("loading vocabulary from {}", dir.display()))?;
    let table = EmbeddingTable::load(&dir.join(EMBEDDINGS_FILE))?;
    Ok((vocab, table))
}
