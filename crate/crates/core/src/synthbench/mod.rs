//! Procedural "meal" benchmark: coloured glyphs on a plate, one glyph per
//! visible ingredient, plus an ingredient-presence oracle.

mod oracle;
mod render;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use oracle::{micro_f1, Oracle, OracleConfig, OracleReport};
pub use render::{glyph_radius, render, signature_color, SynthRecipe};

use crate::recipe_data::{assign_splits, DatasetManifest, Recipe};
use crate::{Error, Result};

const NAMES: [(&str, &str); 12] = [
    ("tomato", "tomatoes"),
    ("basil", "basil"),
    ("egg", "eggs"),
    ("olive", "olives"),
    ("carrot", "carrots"),
    ("pea", "peas"),
    ("berry", "berries"),
    ("onion", "onions"),
    ("lemon", "lemons"),
    ("mushroom", "mushrooms"),
    ("pepper", "peppers"),
    ("corn", "corn"),
];
const INVISIBLE: [&str; 6] = ["salt", "sugar", "water", "vinegar", "yeast", "vanilla"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub num_recipes: usize,
    pub num_glyphs: usize,
    /// Per-glyph marginal presence rates; a single value applies to all.
    pub frequencies: Vec<f64>,
    pub images_per_recipe: usize,
    pub image_size: usize,
    /// Ingredients that never appear in the image.
    pub invisible_ingredients: usize,
    pub invisible_frequency: f64,
    /// Spell some ingredients in plural form.
    pub plural_variants: bool,
    pub split_fractions: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_recipes: 1000,
            num_glyphs: 8,
            frequencies: vec![0.2],
            images_per_recipe: 1,
            image_size: 64,
            invisible_ingredients: 0,
            invisible_frequency: 0.3,
            plural_variants: false,
            split_fractions: [0.7, 0.15, 0.15],
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn glyph_frequencies(&self) -> Result<Vec<f64>> {
        let f = match self.frequencies.len() {
            1 => vec![self.frequencies[0]; self.num_glyphs],
            n if n == self.num_glyphs => self.frequencies.clone(),
            n => {
                return Err(Error::InvalidArgument(format!(
                    "{n} glyph frequencies for {} glyphs",
                    self.num_glyphs
                )))
            }
        };
        if f.iter().any(|&p| !(p > 0.0 && p < 1.0)) {
            return Err(Error::InvalidArgument("glyph frequencies must lie in (0, 1)".into()));
        }
        Ok(f)
    }
}

pub fn glyph_name(k: usize) -> String {
    NAMES.get(k).map(|n| n.0.to_string()).unwrap_or_else(|| format!("glyph{k}"))
}

fn glyph_plural(k: usize) -> String {
    NAMES.get(k).map(|n| n.1.to_string()).unwrap_or_else(|| format!("glyph{k}s"))
}

pub fn invisible_name(k: usize) -> String {
    INVISIBLE.get(k).map(|s| s.to_string()).unwrap_or_else(|| format!("spice{k}"))
}

/// Maps ingredient strings back to glyph ids.
#[derive(Debug, Clone)]
pub struct GlyphSpec {
    num_glyphs: usize,
    by_name: BTreeMap<String, usize>,
}

impl GlyphSpec {
    pub fn new(num_glyphs: usize) -> Self {
        let mut by_name = BTreeMap::new();
        for k in 0..num_glyphs {
            by_name.insert(glyph_name(k), k);
            by_name.insert(glyph_plural(k), k);
        }
        Self { num_glyphs, by_name }
    }

    pub fn num_glyphs(&self) -> usize {
        self.num_glyphs
    }

    pub fn glyph_of(&self, ingredient: &str) -> Option<usize> {
        self.by_name.get(&crate::vocab::normalize_raw(ingredient)).copied()
    }

    /// Sorted, deduplicated glyph ids of a recipe.
    pub fn glyphs_of(&self, recipe: &Recipe) -> Vec<usize> {
        let mut g: Vec<usize> = recipe.ingredients.iter().filter_map(|i| self.glyph_of(i)).collect();
        g.sort_unstable();
        g.dedup();
        g
    }

    pub fn presence_vector(&self, recipe: &Recipe) -> Vec<f32> {
        let mut v = vec![0.0; self.num_glyphs];
        for g in self.glyphs_of(recipe) {
            v[g] = 1.0;
        }
        v
    }
}

/// Per-glyph draw rates whose marginals, conditioned on a non-empty
/// subset, equal `target`.
pub fn draw_rates(target: &[f64]) -> Result<Vec<f64>> {
    let marginal_scale = |s: f64| {
        let empty: f64 = target.iter().map(|&p| 1.0 - s * p).product();
        s / (1.0 - empty)
    };
    let max_s = 1.0 / target.iter().cloned().fold(0.0, f64::max);
    // marginal_scale is increasing in s; find s with marginal_scale(s) = 1.
    if marginal_scale(max_s) < 1.0 {
        return Err(Error::InvalidArgument("glyph frequencies unreachable with non-empty subsets".into()));
    }
    let (mut lo, mut hi) = (1e-12, max_s);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if marginal_scale(mid) < 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Ok(target.iter().map(|&p| p * hi).collect())
}

fn seed_for(seed: u64, key: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(key.as_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().unwrap())
}

pub fn image_ref(id: &str, j: usize) -> String {
    format!("images/{id}_{j}.png")
}

/// Layout seed of an image, derived from the benchmark seed and its ref.
pub fn layout_seed(seed: u64, image_ref: &str) -> u64 {
    seed_for(seed, image_ref)
}

/// Generates recipes and assigns splits. Images are produced separately by
/// [`render_benchmark`].
pub fn build_benchmark(cfg: &SynthConfig) -> Result<DatasetManifest> {
    if cfg.num_recipes == 0 {
        return Err(Error::InvalidArgument("num_recipes must be at least 1".into()));
    }
    if cfg.num_glyphs == 0 || cfg.images_per_recipe == 0 {
        return Err(Error::InvalidArgument("num_glyphs and images_per_recipe must be positive".into()));
    }
    let rates = draw_rates(&cfg.glyph_frequencies()?)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let recipes: Vec<Recipe> = (0..cfg.num_recipes)
        .map(|i| {
            let glyphs: Vec<usize> = loop {
                let g: Vec<usize> = (0..cfg.num_glyphs).filter(|&k| rng.random::<f64>() < rates[k]).collect();
                if !g.is_empty() {
                    break g;
                }
            };
            let mut ingredients: Vec<String> = glyphs
                .iter()
                .map(|&k| {
                    if cfg.plural_variants && rng.random::<bool>() {
                        glyph_plural(k)
                    } else {
                        glyph_name(k)
                    }
                })
                .collect();
            for k in 0..cfg.invisible_ingredients {
                if rng.random::<f64>() < cfg.invisible_frequency {
                    ingredients.push(invisible_name(k));
                }
            }
            let id = format!("synth-{i:05}");
            Recipe {
                image_refs: (0..cfg.images_per_recipe).map(|j| image_ref(&id, j)).collect(),
                id,
                ingredients,
                instructions_count: rng.random_range(1..=8),
                split: None,
                category: None,
            }
        })
        .collect();
    assign_splits(recipes, cfg.split_fractions, cfg.seed)
}

pub fn synth_recipe(spec: &GlyphSpec, recipe: &Recipe, image_ref: &str, seed: u64) -> SynthRecipe {
    SynthRecipe {
        glyphs: spec.glyphs_of(recipe),
        layout_seed: layout_seed(seed, image_ref),
    }
}

/// Renders every image of the manifest under `root` at `cfg.image_size`.
pub fn render_benchmark(manifest: &DatasetManifest, cfg: &SynthConfig, root: &Path) -> Result<()> {
    let spec = GlyphSpec::new(cfg.num_glyphs);
    let jobs: Vec<(&Recipe, &String)> = manifest
        .recipes
        .iter()
        .flat_map(|r| r.image_refs.iter().map(move |i| (r, i)))
        .collect();
    jobs.par_iter().try_for_each(|(recipe, image)| {
        let img = render(&synth_recipe(&spec, recipe, image, cfg.seed), cfg.num_glyphs, cfg.image_size)?;
        crate::imaging::save_png(&img, &root.join(image))
    })
}

/// Renders in memory, one image per recipe (its first).
pub fn render_first_images(recipes: &[Recipe], cfg: &SynthConfig) -> Result<Vec<image::RgbImage>> {
    let spec = GlyphSpec::new(cfg.num_glyphs);
    recipes
        .par_iter()
        .map(|r| {
            let image = r
                .image_refs
                .first()
                .ok_or_else(|| Error::InvalidArgument(format!("recipe {} has no image", r.id)))?;
            render(&synth_recipe(&spec, r, image, cfg.seed), cfg.num_glyphs, cfg.image_size)
        })
        .collect()
}
