//! Linear sweeps between two recipes' FoodSpace encodings.

use std::collections::BTreeSet;

use anyhow::{bail, Result};
use candle_core::Tensor;
use mealgen::imaging::{grid, save_png, tensor_to_images};
use mealgen::recipe_data::Recipe;
use mealgen::vocab::IngredientVocabulary;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::args::InterpArgs;
use crate::commands::gan::{noise, GanRun};
use crate::dataset::parse_split;
use crate::rundir::{write_json, RunDir};

pub const MIN_OVERLAP: f64 = 0.7;

/// `points` evenly spaced fractions from 0 to 1.
pub fn sweep(points: usize) -> Result<Vec<f64>> {
    if points < 2 {
        bail!("an interpolation needs at least two points");
    }
    Ok((0..points).map(|k| k as f64 / (points - 1) as f64).collect())
}

/// Jaccard overlap of the two ingredient sets once the target is removed.
pub fn overlap(a: &BTreeSet<usize>, b: &BTreeSet<usize>, target: usize) -> f64 {
    let a: BTreeSet<_> = a.iter().filter(|&&x| x != target).collect();
    let b: BTreeSet<_> = b.iter().filter(|&&x| x != target).collect();
    let union = a.union(&b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(&b).count() as f64 / union as f64
}

/// Checks that `i` holds the target, `j` does not, and that the rest
/// overlaps enough. Returns the overlap.
pub fn check_pair(a: &BTreeSet<usize>, b: &BTreeSet<usize>, target: usize, min_overlap: f64) -> mealgen::Result<f64> {
    if !a.contains(&target) || b.contains(&target) {
        return Err(mealgen::Error::InvalidArgument(
            "the first recipe must contain the target and the second must not".into(),
        ));
    }
    let o = overlap(a, b, target);
    if o < min_overlap {
        return Err(mealgen::Error::InsufficientOverlap {
            overlap: o,
            required: min_overlap,
        });
    }
    Ok(o)
}

/// Every qualifying `(i, j, target)` over `sets`, in index order.
pub fn mine_pairs(sets: &[BTreeSet<usize>], targets: &[usize], min_overlap: f64) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for &t in targets {
        for (i, a) in sets.iter().enumerate().filter(|(_, s)| s.contains(&t)) {
            for (j, b) in sets.iter().enumerate().filter(|(_, s)| !s.contains(&t)) {
                if overlap(a, b, t) >= min_overlap {
                    out.push((i, j, t));
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InterpSidecar {
    pub recipe_i: String,
    pub recipe_j: String,
    pub target: String,
    pub overlap: f64,
    pub t: Vec<f64>,
    pub z_seed: u64,
    /// Oracle probability of the target's glyph at each point.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_probability: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningSummary {
    pub candidates: usize,
    pub pairs: Vec<InterpSidecar>,
    /// Fraction of scored pairs whose target probability is lower at the
    /// last point than at the first.
    pub decreasing_fraction: Option<f64>,
}

fn set_of(vocab: &IngredientVocabulary, r: &Recipe) -> BTreeSet<usize> {
    vocab.canonical_set(&r.ingredients).into_iter().collect()
}

/// Generates the strip for one validated pair.
fn render_pair(
    run: &GanRun,
    i: &Recipe,
    j: &Recipe,
    target: &str,
    overlap: f64,
    t: &[f64],
    z_seed: u64,
) -> Result<(image::RgbImage, InterpSidecar)> {
    let p = run.encode(&[i, j])?;
    let (pi, pj) = (p.get(0)?, p.get(1)?);
    let rows = t
        .iter()
        .map(|&s| Ok(((&pi * (1.0 - s))? + (&pj * s)?)?))
        .collect::<Result<Vec<Tensor>>>()?;
    let p_t = Tensor::stack(&rows, 0)?;
    let z = noise(z_seed, 1, run.gan.config().z_dim)?.repeat((t.len(), 1))?;
    let images = run.generate(&p_t, &z)?;
    let strip = grid(&[tensor_to_images(&images)?], 2)?;
    let target_probability = match (run.oracle(None)?, run.assoc.data.glyphs()) {
        (Some(oracle), Some(spec)) => match spec.glyph_of(target) {
            Some(g) => Some(oracle.presence(&images)?.iter().map(|row| row[g]).collect()),
            None => None,
        },
        _ => None,
    };
    Ok((
        strip,
        InterpSidecar {
            recipe_i: i.id.clone(),
            recipe_j: j.id.clone(),
            target: target.to_string(),
            overlap,
            t: t.to_vec(),
            z_seed,
            target_probability,
        },
    ))
}

pub fn run(args: &InterpArgs) -> Result<()> {
    let run = GanRun::open(&args.run)?;
    let t = sweep(args.points)?;
    let vocab = &run.assoc.vocab;
    if let (Some(a), Some(b)) = (&args.recipe_i, &args.recipe_j) {
        let Some(target) = &args.target else {
            bail!("--target is required for a named pair");
        };
        let Some(ti) = vocab.index_of_canonical(target) else {
            bail!("{target} is not a canonical ingredient");
        };
        let (ri, rj) = (run.assoc.data.find(a)?, run.assoc.data.find(b)?);
        let o = check_pair(&set_of(vocab, ri), &set_of(vocab, rj), ti, args.min_overlap)?;
        let (strip, sidecar) = render_pair(&run, ri, rj, target, o, &t, args.z_seed)?;
        save_png(&strip, &args.out)?;
        write_json(&args.out.with_extension("json"), &sidecar)?;
        println!("{}", serde_json::to_string_pretty(&sidecar)?);
        return Ok(());
    }
    let Some(limit) = args.mine else {
        bail!("name a pair with --recipe-i/--recipe-j or pass --mine N");
    };
    let split = parse_split(&args.split)?;
    let recipes = run.assoc.data.recipes(split, run.config.category.as_deref());
    let sets: Vec<BTreeSet<usize>> = recipes.iter().map(|r| set_of(vocab, r)).collect();
    let targets: Vec<usize> = match &args.target {
        Some(name) => match vocab.index_of_canonical(name) {
            Some(i) => vec![i],
            None => bail!("{name} is not a canonical ingredient"),
        },
        None => (0..vocab.len()).collect(),
    };
    let mut pairs = mine_pairs(&sets, &targets, args.min_overlap);
    let candidates = pairs.len();
    pairs.shuffle(&mut ChaCha8Rng::seed_from_u64(args.z_seed));
    pairs.truncate(limit);
    let out = RunDir::acquire(&args.out)?;
    let mut summary = MiningSummary {
        candidates,
        pairs: Vec::new(),
        decreasing_fraction: None,
    };
    for (k, &(i, j, ti)) in pairs.iter().enumerate() {
        let target = vocab.token(ti).unwrap_or_default();
        let o = overlap(&sets[i], &sets[j], ti);
        let (strip, sidecar) = render_pair(&run, &recipes[i], &recipes[j], target, o, &t, args.z_seed + k as u64)?;
        save_png(&strip, &out.join(format!("pair{k:03}.png")))?;
        summary.pairs.push(sidecar);
    }
    let scored: Vec<&Vec<f64>> = summary.pairs.iter().filter_map(|p| p.target_probability.as_ref()).collect();
    if !scored.is_empty() {
        let down = scored.iter().filter(|p| p[p.len() - 1] < p[0]).count();
        summary.decreasing_fraction = Some(down as f64 / scored.len() as f64);
    }
    out.write_json("summary.json", &summary)?;
    println!(
        "{} candidate pairs, {} rendered, decreasing fraction {:?}",
        candidates,
        summary.pairs.len(),
        summary.decreasing_fraction
    );
    Ok(())
}
