use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::model::AssociationModel;
use super::{triplet_objective_tensor, DEFAULT_MARGIN};
use crate::imaging::ImageBank;
use crate::retrieval::rank_queries;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AssocTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub margin: f64,
    pub seed: u64,
    /// Validation recipes ranked after every epoch (the first N).
    pub val_pool: usize,
}

impl Default for AssocTrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 64,
            learning_rate: 1e-3,
            margin: DEFAULT_MARGIN,
            seed: 0,
            val_pool: 500,
        }
    }
}

/// One recipe: its encoded ingredients and its images' bank positions.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub tokens: Vec<usize>,
    pub images: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub val_medr: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainingLog {
    pub step_losses: Vec<f64>,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
    pub best_val_medr: Option<f64>,
}

/// Image-to-recipe MedR over `pairs` using each recipe's first image.
pub fn pair_medr(model: &AssociationModel, bank: &ImageBank, pairs: &[TrainingPair]) -> Result<f64> {
    let seqs: Vec<Vec<usize>> = pairs.iter().map(|p| p.tokens.clone()).collect();
    let first: Vec<usize> = pairs.iter().map(|p| p.images[0]).collect();
    let p = model.embed_sequences(&seqs)?;
    let q = model.embed_bank(bank, &first)?;
    let truth: Vec<usize> = (0..pairs.len()).collect();
    Ok(rank_queries(&q, &p, &truth)?.medr)
}

/// Mini-batch ascent on the triplet objective with in-batch negatives.
/// Each anchor's negative recipe is drawn uniformly from the rest of its
/// batch. The parameters with the best validation MedR are kept.
pub fn train_association(
    model: &AssociationModel,
    bank: &ImageBank,
    train: &[TrainingPair],
    val: &[TrainingPair],
    cfg: &AssocTrainConfig,
) -> Result<TrainingLog> {
    if train.len() < 2 || cfg.batch_size < 2 {
        return Err(Error::InsufficientPairs {
            needed: 2,
            available: train.len().min(cfg.batch_size),
        });
    }
    if let Some(p) = train.iter().chain(val).find(|p| p.images.is_empty() || p.tokens.is_empty()) {
        return Err(Error::InvalidArgument(format!("training pair without tokens or images: {p:?}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut opt = AdamW::new(
        model.store().vars(),
        ParamsAdamW {
            lr: cfg.learning_rate,
            weight_decay: 0.0,
            ..Default::default()
        },
    )?;
    let size = model.config().image_size;
    let val: Vec<TrainingPair> = val.iter().take(cfg.val_pool).cloned().collect();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = TrainingLog {
        step_losses: Vec::new(),
        epochs: Vec::new(),
        best_epoch: 0,
        best_val_medr: None,
    };
    let mut best = None;
    for epoch in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let b = chunk.len();
            if b < 2 {
                continue;
            }
            let seqs: Vec<Vec<usize>> = chunk.iter().map(|&i| train[i].tokens.clone()).collect();
            let images: Vec<usize> = chunk
                .iter()
                .map(|&i| {
                    let imgs = &train[i].images;
                    imgs[rng.random_range(0..imgs.len())]
                })
                .collect();
            let neg: Vec<u32> = (0..b).map(|i| ((i + rng.random_range(1..b)) % b) as u32).collect();
            let neg = Tensor::from_vec(neg, b, &Device::Cpu)?;
            let (p, _) = model.encode_ingredients(&seqs)?;
            let q = model.encode_images(&bank.batch(&images, size)?)?;
            let v = triplet_objective_tensor(&p, &q, &q.index_select(&neg, 0)?, &p.index_select(&neg, 0)?, cfg.margin)?;
            let loss = v.mean_all()?.neg()?;
            let value = loss.to_dtype(DType::F64)?.to_scalar::<f64>()?;
            if !value.is_finite() {
                return Err(Error::Diverged {
                    step: log.step_losses.len(),
                    detail: format!("association loss {value} in epoch {epoch}"),
                });
            }
            opt.backward_step(&loss)?;
            log.step_losses.push(value);
            total += value;
            batches += 1;
        }
        let mean_loss = total / batches.max(1) as f64;
        let val_medr = if val.is_empty() {
            None
        } else {
            Some(pair_medr(model, bank, &val)?)
        };
        log::info!("assoc epoch {epoch}: loss {mean_loss:.5} val MedR {val_medr:?}");
        log.epochs.push(EpochLog {
            epoch,
            mean_loss,
            val_medr,
        });
        let improved = match (val_medr, log.best_val_medr) {
            (Some(m), Some(b)) => m < b,
            (Some(_), None) => true,
            (None, _) => true,
        };
        if improved {
            log.best_epoch = epoch;
            log.best_val_medr = val_medr;
            best = Some(model.store().snapshot()?);
        }
    }
    if let Some(snapshot) = best {
        model.store().restore(&snapshot)?;
    }
    Ok(log)
}
