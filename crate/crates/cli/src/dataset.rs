//! Dataset directories: `manifest.jsonl`, `dataset.toml`, and the images.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use mealgen::foodspace::TrainingPair;
use mealgen::imaging::ImageBank;
use mealgen::recipe_data::{resolve_image, DatasetManifest, Recipe, Split};
use mealgen::synthbench::{GlyphSpec, Oracle, SynthConfig};
use mealgen::vocab::IngredientVocabulary;
use serde::{Deserialize, Serialize};

use crate::rundir::{read_toml, write_toml};

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const INFO_FILE: &str = "dataset.toml";
pub const ORACLE_DIR: &str = "oracle";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    /// Root for relative image references; relative to the dataset dir.
    pub images_root: PathBuf,
    /// Present for synthetic benchmarks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthConfig>,
}

pub struct Dataset {
    pub dir: PathBuf,
    pub info: DatasetInfo,
    pub manifest: DatasetManifest,
}

/// Recipes that made it into a bank, with their pairs.
pub struct Loaded {
    pub bank: ImageBank,
    pub pairs: Vec<TrainingPair>,
    pub recipes: Vec<Recipe>,
}

impl Dataset {
    pub fn write(dir: &Path, info: &DatasetInfo, manifest: &DatasetManifest) -> Result<()> {
        manifest.save(&dir.join(MANIFEST_FILE))?;
        write_toml(&dir.join(INFO_FILE), info)
    }

    pub fn open(dir: &Path) -> Result<Self> {
        let info: DatasetInfo = read_toml(&dir.join(INFO_FILE))?;
        let manifest = DatasetManifest::load(&dir.join(MANIFEST_FILE))
            .with_context(|| format!("loading dataset {}", dir.display()))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            info,
            manifest,
        })
    }

    pub fn images_root(&self) -> PathBuf {
        self.dir.join(&self.info.images_root)
    }

    pub fn recipes(&self, split: Split, category: Option<&str>) -> Vec<Recipe> {
        self.manifest
            .recipes
            .iter()
            .filter(|r| r.split == Some(split))
            .filter(|r| category.is_none() || r.category.as_deref() == category)
            .cloned()
            .collect()
    }

    pub fn find(&self, id: &str) -> Result<&Recipe> {
        match self.manifest.recipes.iter().find(|r| r.id == id) {
            Some(r) => Ok(r),
            None => bail!("no recipe with id {id} in {}", self.dir.display()),
        }
    }

    pub fn glyphs(&self) -> Option<GlyphSpec> {
        self.info.synth.as_ref().map(|s| GlyphSpec::new(s.num_glyphs))
    }

    pub fn oracle(&self) -> Result<Option<Oracle>> {
        let dir = self.dir.join(ORACLE_DIR);
        if !dir.exists() {
            return Ok(None);
        }
        Ok(Some(Oracle::load(&dir)?))
    }

    /// Loads the images of `recipes` at `sizes`. Recipes without known
    /// ingredients or without any readable image are dropped with a warning.
    pub fn load(&self, recipes: &[Recipe], vocab: &IngredientVocabulary, sizes: &[usize]) -> Result<Loaded> {
        let root = self.images_root();
        let mut paths = Vec::new();
        let mut owners = Vec::new();
        let mut kept = Vec::new();
        for r in recipes {
            if vocab.encode(&r.ingredients).is_empty() {
                log::warn!("recipe {} has no in-vocabulary ingredient; skipped", r.id);
                continue;
            }
            for image in &r.image_refs {
                paths.push(resolve_image(&root, image));
                owners.push(kept.len());
            }
            kept.push(r);
        }
        let (bank, missing) = ImageBank::load(&paths, sizes);
        let mut slot = 0usize;
        let mut images: Vec<Vec<usize>> = vec![Vec::new(); kept.len()];
        let mut missing = missing.into_iter().peekable();
        for (i, &owner) in owners.iter().enumerate() {
            if missing.peek() == Some(&i) {
                missing.next();
                continue;
            }
            images[owner].push(slot);
            slot += 1;
        }
        let mut pairs = Vec::new();
        let mut out_recipes = Vec::new();
        for (r, imgs) in kept.into_iter().zip(images) {
            if imgs.is_empty() {
                log::warn!("recipe {} has no readable image; skipped", r.id);
                continue;
            }
            pairs.push(TrainingPair {
                tokens: vocab.encode(&r.ingredients),
                images: imgs,
            });
            out_recipes.push(r.clone());
        }
        if pairs.is_empty() {
            bail!("no usable recipes in {}", self.dir.display());
        }
        Ok(Loaded {
            bank,
            pairs,
            recipes: out_recipes,
        })
    }
}

pub fn parse_split(s: &str) -> Result<Split> {
    Ok(s.parse::<Split>()?)
}
