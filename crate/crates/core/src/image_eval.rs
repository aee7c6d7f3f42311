//! Inception Score and Fréchet distance over feature activations.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

pub const DEFAULT_IS_SPLITS: usize = 10;
pub const DEFAULT_EVAL_SAMPLES: usize = 900;
/// Eigenvalues above `-PSD_TOLERANCE * max(1, largest)` are clipped to zero.
pub const PSD_TOLERANCE: f64 = 1e-10;
const ROW_SUM_TOLERANCE: f64 = 1e-5;

/// Exp of the mean KL divergence between each row and the split marginal,
/// averaged over `splits` contiguous splits. Returns `(mean, std)`.
pub fn inception_score(probs: &[Vec<f64>], splits: usize) -> Result<(f64, f64)> {
    let n = probs.len();
    if splits == 0 || n < splits {
        return Err(Error::InvalidArgument(format!("{n} rows cannot form {splits} splits")));
    }
    let classes = probs[0].len();
    for (row, p) in probs.iter().enumerate() {
        let sum: f64 = p.iter().sum();
        if p.len() != classes || p.iter().any(|&v| !(v >= 0.0)) || (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
            return Err(Error::NotDistribution { row, sum });
        }
    }
    let scores: Vec<f64> = (0..splits)
        .map(|k| {
            let part = &probs[k * n / splits..(k + 1) * n / splits];
            let mut marginal = vec![0.0; classes];
            for p in part {
                for (m, v) in marginal.iter_mut().zip(p) {
                    *m += v / part.len() as f64;
                }
            }
            let kl: f64 = part
                .iter()
                .map(|p| {
                    p.iter()
                        .zip(&marginal)
                        .filter(|(&v, _)| v > 0.0)
                        .map(|(&v, &m)| v * (v / m).ln())
                        .sum::<f64>()
                })
                .sum::<f64>()
                / part.len() as f64;
            kl.exp()
        })
        .collect();
    let mean = scores.iter().sum::<f64>() / splits as f64;
    let var = scores.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / splits as f64;
    Ok((mean, var.sqrt()))
}

/// Gaussian fit of a feature set: mean, unbiased covariance and count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActivationStats {
    pub mean: Vec<f64>,
    /// Row-major `d x d`.
    pub covariance: Vec<f64>,
    pub count: usize,
}

impl ActivationStats {
    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn cov_matrix(&self) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim(), self.dim(), &self.covariance)
    }
}

/// Streaming mean and co-moment accumulator (Welford updates, Chan merge).
#[derive(Debug, Clone, PartialEq)]
pub struct StatsAccumulator {
    count: usize,
    mean: DVector<f64>,
    comoment: DMatrix<f64>,
}

impl StatsAccumulator {
    pub fn new(dim: usize) -> Self {
        Self {
            count: 0,
            mean: DVector::zeros(dim),
            comoment: DMatrix::zeros(dim, dim),
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn push(&mut self, x: &[f64]) -> Result<()> {
        if x.len() != self.mean.len() {
            return Err(Error::DimensionMismatch(format!(
                "feature of width {} for {}-d statistics",
                x.len(),
                self.mean.len()
            )));
        }
        let x = DVector::from_column_slice(x);
        self.count += 1;
        let delta = &x - &self.mean;
        self.mean += &delta / self.count as f64;
        let delta2 = &x - &self.mean;
        self.comoment.ger(1.0, &delta, &delta2, 1.0);
        Ok(())
    }

    pub fn merge(&mut self, other: &StatsAccumulator) -> Result<()> {
        if other.mean.len() != self.mean.len() {
            return Err(Error::DimensionMismatch("merging statistics of different widths".into()));
        }
        if other.count == 0 {
            return Ok(());
        }
        let (na, nb) = (self.count as f64, other.count as f64);
        let n = na + nb;
        let delta = &other.mean - &self.mean;
        self.comoment += &other.comoment;
        self.comoment.ger(na * nb / n, &delta, &delta, 1.0);
        self.mean += &delta * (nb / n);
        self.count += other.count;
        Ok(())
    }

    pub fn finish(&self) -> Result<ActivationStats> {
        if self.count < 2 {
            return Err(Error::InsufficientPairs {
                needed: 2,
                available: self.count,
            });
        }
        let cov = &self.comoment / (self.count as f64 - 1.0);
        let sym = (&cov + cov.transpose()) * 0.5;
        Ok(ActivationStats {
            mean: self.mean.iter().copied().collect(),
            covariance: sym.transpose().iter().copied().collect(),
            count: self.count,
        })
    }
}

/// Statistics of a feature set, accumulated one row at a time.
pub fn activation_stats(features: &[Vec<f64>]) -> Result<ActivationStats> {
    let dim = features.first().map_or(0, |f| f.len());
    let mut acc = StatsAccumulator::new(dim);
    for f in features {
        acc.push(f)?;
    }
    acc.finish()
}

fn psd_eigen(m: &DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (m + m.transpose()) * 0.5;
    let mut eig = SymmetricEigen::new(sym);
    let largest = eig.eigenvalues.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let tol = PSD_TOLERANCE * largest.max(1.0);
    for v in eig.eigenvalues.iter_mut() {
        if *v < -tol {
            log::debug!("{what} has eigenvalue {v}");
            return Err(Error::NotPsd(*v));
        }
        *v = v.max(0.0);
    }
    Ok(eig)
}

fn sqrt_psd(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let eig = psd_eigen(m, what)?;
    let root = DMatrix::from_diagonal(&eig.eigenvalues.map(f64::sqrt));
    Ok(&eig.eigenvectors * root * eig.eigenvectors.transpose())
}

/// `|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^{1/2})`, with the trace of
/// the square root taken as `Tr((S_a^{1/2} S_b S_a^{1/2})^{1/2})`.
pub fn fid(a: &ActivationStats, b: &ActivationStats) -> Result<f64> {
    if a.dim() != b.dim() || a.covariance.len() != a.dim() * a.dim() || b.covariance.len() != b.dim() * b.dim() {
        return Err(Error::DimensionMismatch(format!("statistics of width {} and {}", a.dim(), b.dim())));
    }
    let (sa, sb) = (a.cov_matrix(), b.cov_matrix());
    let root_a = sqrt_psd(&sa, "first covariance")?;
    psd_eigen(&sb, "second covariance")?;
    let inner = &root_a * &sb * &root_a;
    let cross: f64 = psd_eigen(&inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|v| v.sqrt())
        .sum();
    let mean_term: f64 = a.mean.iter().zip(&b.mean).map(|(x, y)| (x - y).powi(2)).sum();
    Ok((mean_term + sa.trace() + sb.trace() - 2.0 * cross).max(0.0))
}

/// One row of an image-quality table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QualityRow {
    pub category: String,
    pub model: String,
    #[serde(rename = "IS_mean")]
    pub is_mean: f64,
    #[serde(rename = "IS_std")]
    pub is_std: f64,
    #[serde(rename = "FID")]
    pub fid: f64,
}

/// Rows rescaled to sum to one; all-zero rows become uniform.
pub fn normalize_rows(rows: &[Vec<f64>]) -> Vec<Vec<f64>> {
    rows.iter()
        .map(|r| {
            let s: f64 = r.iter().sum();
            if s > 0.0 {
                r.iter().map(|v| v / s).collect()
            } else {
                vec![1.0 / r.len() as f64; r.len()]
            }
        })
        .collect()
}
