use anyhow::{bail, Result};
use mealgen::recipe_data::{
    assign_splits, filter_recipes, load_corpus, load_layered, CorpusFormat, Split, DEFAULT_SPLIT_FRACTIONS,
};
use serde::{Deserialize, Serialize};

use crate::args::{FormatArg, PrepareArgs};
use crate::dataset::{Dataset, DatasetInfo};
use crate::rundir::RunDir;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrepareConfig {
    pub corpus: String,
    pub format: String,
    pub image_layer: Option<String>,
    pub images_root: String,
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

#[derive(Debug, Serialize)]
struct PrepareStats {
    loaded: usize,
    kept: usize,
    train: usize,
    val: usize,
    test: usize,
}

pub fn prepare(args: &PrepareArgs) -> Result<()> {
    let raw = match args.format {
        FormatArg::Jsonl => load_corpus(&args.corpus, CorpusFormat::JsonLines)?,
        FormatArg::Layered => match &args.image_layer {
            Some(layer) => load_layered(&args.corpus, layer)?,
            None => bail!("--image-layer is required for the layered format"),
        },
    };
    let images_root = match &args.images_root {
        Some(r) => std::path::absolute(r)?,
        None => std::path::absolute(args.corpus.parent().unwrap_or(std::path::Path::new(".")))?,
    };
    let cfg = PrepareConfig {
        corpus: args.corpus.display().to_string(),
        format: format!("{:?}", args.format).to_lowercase(),
        image_layer: args.image_layer.as_ref().map(|p| p.display().to_string()),
        images_root: images_root.display().to_string(),
        split_fractions: DEFAULT_SPLIT_FRACTIONS,
        seed: args.seed,
    };
    let run = RunDir::acquire(&args.out)?;
    run.write_config(&cfg)?;
    let loaded = raw.len();
    let manifest = assign_splits(filter_recipes(raw), cfg.split_fractions, cfg.seed)?;
    Dataset::write(
        run.path(),
        &DatasetInfo {
            images_root,
            synth: None,
        },
        &manifest,
    )?;
    let [train, val, test] = Split::ALL.map(|s| manifest.recipes.iter().filter(|r| r.split == Some(s)).count());
    run.write_json(
        "stats.json",
        &PrepareStats {
            loaded,
            kept: manifest.recipes.len(),
            train,
            val,
            test,
        },
    )
}
