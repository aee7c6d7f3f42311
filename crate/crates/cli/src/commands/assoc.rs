use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use mealgen::foodspace::{
    pair_medr, train_association, AssocConfig, AssocTrainConfig, AssociationModel, TrainingLog, FOODSPACE_DIM,
};
use mealgen::recipe_data::Split;
use mealgen::retrieval::{evaluate_pools, format_retrieval_table, random_baseline, AggregateResult, CrossModalReport};
use mealgen::vocab::IngredientVocabulary;
use serde::{Deserialize, Serialize};

use crate::args::{AssocEvalArgs, AssocTrainArgs};
use crate::dataset::{parse_split, Dataset};
use crate::rundir::{base_config, read_toml, RunDir, CONFIG_FILE};

pub const MODEL_DIR: &str = "model";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct AssocRunConfig {
    pub data: PathBuf,
    pub vocab: PathBuf,
    /// Use only the first N training recipes.
    pub limit: Option<usize>,
    pub model: AssocConfig,
    pub train: AssocTrainConfig,
}

#[derive(Debug, Serialize)]
struct AssocTrainMetrics {
    train_pairs: usize,
    val_pairs: usize,
    train_medr: f64,
    log: TrainingLog,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoolReport {
    pub pool_size: usize,
    pub model: CrossModalReport,
    pub random: AggregateResult,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalReport {
    pub split: String,
    pub pairs: usize,
    pub pools: Vec<PoolReport>,
}

/// A trained association run with its vocabulary and dataset.
pub struct AssocRun {
    pub dir: PathBuf,
    pub config: AssocRunConfig,
    pub data: Dataset,
    pub vocab: IngredientVocabulary,
    pub model: AssociationModel,
}

impl AssocRun {
    pub fn open(dir: &Path) -> Result<Self> {
        let config: AssocRunConfig = read_toml(&dir.join(CONFIG_FILE))?;
        let data = Dataset::open(&config.data)?;
        let (vocab, _) = super::vocab::load(&config.vocab)?;
        let (model, hash) = AssociationModel::load(&dir.join(MODEL_DIR))?;
        if hash != vocab.hash() {
            bail!("association model in {} was trained with a different vocabulary", dir.display());
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            data,
            vocab,
            model,
        })
    }
}

pub fn train(args: &AssocTrainArgs) -> Result<()> {
    let mut cfg: AssocRunConfig = base_config(args.config.as_deref())?;
    cfg.data = std::path::absolute(&args.data)?;
    cfg.vocab = std::path::absolute(&args.vocab)?;
    if let Some(e) = args.epochs {
        cfg.train.epochs = e;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(f) = args.feature_dim {
        cfg.model.feature_dim = f;
    }
    if args.no_attention {
        cfg.model.attention = false;
    }
    if args.limit.is_some() {
        cfg.limit = args.limit;
    }
    if let Some(s) = args.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }

    let data = Dataset::open(&cfg.data)?;
    let (vocab, table) = super::vocab::load(&cfg.vocab)?;
    cfg.model.vocab_size = vocab.len();
    let run = RunDir::acquire(&args.out)?;
    run.write_config(&cfg)?;

    let mut recipes = data.recipes(Split::Train, None);
    if let Some(n) = cfg.limit {
        recipes.truncate(n);
    }
    recipes.extend(data.recipes(Split::Val, None));
    let loaded = data.load(&recipes, &vocab, &[cfg.model.image_size])?;
    let (mut train, mut val) = (Vec::new(), Vec::new());
    for (pair, r) in loaded.pairs.into_iter().zip(&loaded.recipes) {
        match r.split {
            Some(Split::Train) => train.push(pair),
            _ => val.push(pair),
        }
    }
    let model = AssociationModel::new(cfg.model.clone())?;
    model.set_embeddings(&table)?;
    let log = train_association(&model, &loaded.bank, &train, &val, &cfg.train)?;
    model.save(&run.join(MODEL_DIR), &vocab.hash())?;
    let train_medr = pair_medr(&model, &loaded.bank, &train)?;
    log::info!("training-set MedR {train_medr}");
    run.write_json(
        "metrics.json",
        &AssocTrainMetrics {
            train_pairs: train.len(),
            val_pairs: val.len(),
            train_medr,
            log,
        },
    )
}

pub fn eval(args: &AssocEvalArgs) -> Result<()> {
    let assoc = AssocRun::open(&args.run)?;
    let split = parse_split(&args.split)?;
    let recipes = assoc.data.recipes(split, None);
    let loaded = assoc
        .data
        .load(&recipes, &assoc.vocab, &[assoc.model.config().image_size])?;
    let seqs: Vec<Vec<usize>> = loaded.pairs.iter().map(|p| p.tokens.clone()).collect();
    let first: Vec<usize> = loaded.pairs.iter().map(|p| p.images[0]).collect();
    let texts = assoc.model.embed_sequences(&seqs)?;
    let images = assoc.model.embed_bank(&loaded.bank, &first)?;

    let mut pools = Vec::new();
    for &pool in &args.pool {
        pools.push(PoolReport {
            pool_size: pool,
            model: evaluate_pools(&texts, &images, pool, args.repetitions, args.seed)?,
            random: random_baseline(pool, args.repetitions, FOODSPACE_DIM, args.seed)?,
        });
    }
    let report = RetrievalReport {
        split: split.as_str().into(),
        pairs: texts.len(),
        pools,
    };
    let run = RunDir::acquire(&args.run)?;
    run.write_json(format!("eval/retrieval_{}.json", split.as_str()), &report)?;
    run.write_text(format!("eval/retrieval_{}.txt", split.as_str()), &retrieval_table(&report))?;

    let records = assoc
        .model
        .attention_records(&assoc.vocab, &loaded.recipes[..args.attention.min(loaded.recipes.len())])?;
    let mut lines = String::new();
    for r in &records {
        lines.push_str(&serde_json::to_string(r)?);
        lines.push('\n');
    }
    run.write_text(format!("eval/attention_{}.jsonl", split.as_str()), &lines)?;
    print!("{}", retrieval_table(&report));
    Ok(())
}

pub fn retrieval_table(report: &RetrievalReport) -> String {
    let mut out = String::new();
    for p in &report.pools {
        out.push_str(&format!("pool {} ({} split)\n", p.pool_size, report.split));
        let random = CrossModalReport {
            im2recipe: p.random.clone(),
            recipe2im: p.random.clone(),
        };
        out.push_str(&format_retrieval_table(&[
            ("random".to_string(), random),
            ("model".to_string(), p.model.clone()),
        ]));
    }
    out
}
