//! Cross-modal retrieval metrics: median rank and recall at K.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use candle_core::{Device, Tensor};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const RECALL_KS: [usize; 3] = [1, 5, 10];
pub const DEFAULT_REPETITIONS: usize = 10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub ranks: Vec<usize>,
    pub medr: f64,
    pub recall_at: BTreeMap<usize, f64>,
}

/// Lower median of the ranks.
pub fn lower_median(values: &[usize]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    v[(v.len() - 1) / 2] as f64
}

pub fn recall_at(ranks: &[usize], k: usize) -> f64 {
    ranks.iter().filter(|&&r| r <= k).count() as f64 / ranks.len().max(1) as f64
}

fn summarize(ranks: Vec<usize>) -> RetrievalResult {
    RetrievalResult {
        medr: lower_median(&ranks),
        recall_at: RECALL_KS.iter().map(|&k| (k, recall_at(&ranks, k))).collect(),
        ranks,
    }
}

fn normalized(rows: &[Vec<f32>], dim: usize) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(Error::DimensionMismatch(format!("embedding of width {} in a {dim}-d set", r.len())));
        }
        let norm = r.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt();
        if !(norm > 0.0) || !norm.is_finite() {
            return Err(Error::ZeroNorm);
        }
        out.extend(r.iter().map(|&x| x as f64 / norm));
    }
    Ok(out)
}

/// Cosine similarity matrix `[queries × pool]`.
pub fn similarity_matrix(queries: &[Vec<f32>], pool: &[Vec<f32>]) -> Result<Vec<Vec<f64>>> {
    let dim = pool
        .first()
        .map(Vec::len)
        .ok_or_else(|| Error::InvalidArgument("empty retrieval pool".into()))?;
    let q = Tensor::from_vec(normalized(queries, dim)?, (queries.len(), dim), &Device::Cpu)?;
    let p = Tensor::from_vec(normalized(pool, dim)?, (pool.len(), dim), &Device::Cpu)?;
    Ok(q.matmul(&p.t()?)?.to_vec2::<f64>()?)
}

/// Rank of `truth` in one similarity row: one plus the number of pool items
/// scoring higher, plus ties at a lower pool index.
pub fn rank_of(row: &[f64], truth: usize) -> usize {
    let s = row[truth];
    1 + row
        .iter()
        .enumerate()
        .filter(|&(j, &x)| x > s || (x == s && j < truth))
        .count()
}

/// Ranks every query's true pool item by cosine similarity.
pub fn rank_queries(queries: &[Vec<f32>], pool: &[Vec<f32>], truth: &[usize]) -> Result<RetrievalResult> {
    if truth.len() != queries.len() {
        return Err(Error::InvalidArgument(format!(
            "{} truth entries for {} queries",
            truth.len(),
            queries.len()
        )));
    }
    if let Some(&t) = truth.iter().find(|&&t| t >= pool.len()) {
        return Err(Error::InvalidArgument(format!("truth index {t} outside pool of {}", pool.len())));
    }
    let sims = similarity_matrix(queries, pool)?;
    Ok(summarize(sims.iter().zip(truth).map(|(row, &t)| rank_of(row, t)).collect()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateResult {
    pub pool_size: usize,
    pub repetitions: usize,
    pub medr_mean: f64,
    pub medr_std: f64,
    pub recall_mean: BTreeMap<usize, f64>,
    pub recall_std: BTreeMap<usize, f64>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

pub fn aggregate(pool_size: usize, results: &[RetrievalResult]) -> AggregateResult {
    let medrs: Vec<f64> = results.iter().map(|r| r.medr).collect();
    let (medr_mean, medr_std) = mean_std(&medrs);
    let mut recall_mean = BTreeMap::new();
    let mut recall_std = BTreeMap::new();
    for k in RECALL_KS {
        let v: Vec<f64> = results.iter().map(|r| r.recall_at[&k]).collect();
        let (m, s) = mean_std(&v);
        recall_mean.insert(k, m);
        recall_std.insert(k, s);
    }
    AggregateResult {
        pool_size,
        repetitions: results.len(),
        medr_mean,
        medr_std,
        recall_mean,
        recall_std,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossModalReport {
    pub im2recipe: AggregateResult,
    pub recipe2im: AggregateResult,
}

/// Samples `repetitions` pools of `pool_size` aligned pairs and ranks in
/// both directions. `texts[i]` and `images[i]` form a pair.
pub fn evaluate_pools(
    texts: &[Vec<f32>],
    images: &[Vec<f32>],
    pool_size: usize,
    repetitions: usize,
    seed: u64,
) -> Result<CrossModalReport> {
    if texts.len() != images.len() {
        return Err(Error::InvalidArgument(format!("{} texts vs {} images", texts.len(), images.len())));
    }
    if pool_size == 0 || repetitions == 0 {
        return Err(Error::InvalidArgument("pool size and repetitions must be positive".into()));
    }
    if texts.len() < pool_size {
        return Err(Error::InsufficientPairs {
            needed: pool_size,
            available: texts.len(),
        });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut i2r = Vec::with_capacity(repetitions);
    let mut r2i = Vec::with_capacity(repetitions);
    let truth: Vec<usize> = (0..pool_size).collect();
    for _ in 0..repetitions {
        let mut idx = sample(&mut rng, texts.len(), pool_size).into_vec();
        idx.sort_unstable();
        let t: Vec<Vec<f32>> = idx.iter().map(|&i| texts[i].clone()).collect();
        let v: Vec<Vec<f32>> = idx.iter().map(|&i| images[i].clone()).collect();
        i2r.push(rank_queries(&v, &t, &truth)?);
        r2i.push(rank_queries(&t, &v, &truth)?);
    }
    Ok(CrossModalReport {
        im2recipe: aggregate(pool_size, &i2r),
        recipe2im: aggregate(pool_size, &r2i),
    })
}

/// Gaussian random embeddings, the chance baseline.
pub fn random_embeddings(n: usize, dim: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<f32>> {
    (0..n)
        .map(|_| (0..dim).map(|_| StandardNormal.sample(rng)).collect())
        .collect()
}

/// Mean MedR of independent random query and pool embeddings.
pub fn random_baseline(pool_size: usize, repetitions: usize, dim: usize, seed: u64) -> Result<AggregateResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let truth: Vec<usize> = (0..pool_size).collect();
    let results = (0..repetitions)
        .map(|_| {
            let q = random_embeddings(pool_size, dim, &mut rng);
            let p = random_embeddings(pool_size, dim, &mut rng);
            rank_queries(&q, &p, &truth)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(aggregate(pool_size, &results))
}

/// Text table with MedR and R@{1,5,10} for both directions.
pub fn format_retrieval_table(rows: &[(String, CrossModalReport)]) -> String {
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<24} | {:>8} {:>6} {:>6} {:>6} | {:>8} {:>6} {:>6} {:>6}",
        "", "im2recipe", "", "", "", "recipe2im", "", "", ""
    );
    let _ = writeln!(
        out,
        "{:<24} | {:>8} {:>6} {:>6} {:>6} | {:>8} {:>6} {:>6} {:>6}",
        "model", "MedR", "R@1", "R@5", "R@10", "MedR", "R@1", "R@5", "R@10"
    );
    for (name, r) in rows {
        let cells = |a: &AggregateResult| {
            format!(
                "{:>8.2} {:>6.3} {:>6.3} {:>6.3}",
                a.medr_mean, a.recall_mean[&1], a.recall_mean[&5], a.recall_mean[&10]
            )
        };
        let _ = writeln!(out, "{:<24} | {} | {}", name, cells(&r.im2recipe), cells(&r.recipe2im));
    }
    out
}
