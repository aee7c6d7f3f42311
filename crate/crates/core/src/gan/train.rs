use candle_core::{DType, Device, Tensor};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::losses::{
    cycle_similarity, discriminator_loss, generator_loss, kl_standard_normal, DiscriminatorLogits, GeneratorLossParts,
    GeneratorScale,
};
use super::model::{gaussian, MealGan};
use crate::foodspace::{AssociationModel, ImageEncoder, TrainingPair};
use crate::imaging::ImageBank;
use crate::nn::resize_bilinear;
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanTrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
    /// Sample hook period in steps; 0 disables it.
    pub sample_every: usize,
    /// Steps between last-good parameter snapshots.
    pub snapshot_every: usize,
}

impl Default for GanTrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 32,
            learning_rate: 2e-4,
            beta1: 0.5,
            beta2: 0.999,
            seed: 0,
            sample_every: 500,
            snapshot_every: 100,
        }
    }
}

/// Training pairs with their frozen FoodSpace encodings.
pub struct GanData<'a> {
    /// `[N, 1024]` ingredient encodings.
    pub p: Tensor,
    /// `[N, 1024]` encodings of the paired real images.
    pub q: Tensor,
    pub bank: &'a ImageBank,
    /// Bank index of each pair's image.
    pub images: Vec<usize>,
}

impl<'a> GanData<'a> {
    /// One pair per (recipe, image); encodings come from the frozen model.
    pub fn prepare(assoc: &AssociationModel, bank: &'a ImageBank, pairs: &[TrainingPair]) -> Result<Self> {
        let mut seqs = Vec::new();
        let mut images = Vec::new();
        for pair in pairs {
            for &img in &pair.images {
                seqs.push(pair.tokens.clone());
                images.push(img);
            }
        }
        if images.len() < 2 {
            return Err(Error::InsufficientPairs {
                needed: 2,
                available: images.len(),
            });
        }
        let p = assoc.embed_sequences(&seqs)?;
        let q = assoc.embed_bank(bank, &images)?;
        Ok(Self {
            p: rows_to_tensor(&p)?,
            q: rows_to_tensor(&q)?,
            bank,
            images,
        })
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

pub fn rows_to_tensor(rows: &[Vec<f32>]) -> Result<Tensor> {
    let d = rows.first().map_or(0, |r| r.len());
    let flat: Vec<f32> = rows.iter().flatten().copied().collect();
    Ok(Tensor::from_vec(flat, (rows.len(), d), &Device::Cpu)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanStepLog {
    pub step: usize,
    pub d_loss: f64,
    pub g: GeneratorLossParts,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct GanTrainLog {
    pub steps: Vec<GanStepLog>,
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn index(idx: &[usize]) -> Result<Tensor> {
    let v: Vec<u32> = idx.iter().map(|&i| i as u32).collect();
    Ok(Tensor::from_vec(v, idx.len(), &Device::Cpu)?)
}

/// Alternating discriminator and generator updates over all three scales.
///
/// The FoodSpace image encoder enters only through `encoder`, which should
/// be a constant copy (see [`AssociationModel::frozen_image_encoder`]).
/// `hook(step, gan)` runs every `sample_every` steps and after the last.
/// A non-finite loss restores the last snapshot and returns
/// [`Error::Diverged`].
pub fn train_gan(
    gan: &MealGan,
    data: &GanData,
    encoder: &ImageEncoder,
    cfg: &GanTrainConfig,
    mut hook: impl FnMut(usize, &MealGan) -> Result<()>,
) -> Result<GanTrainLog> {
    let b = cfg.batch_size.min(data.len());
    if b < 2 {
        return Err(Error::InsufficientPairs {
            needed: 2,
            available: data.len(),
        });
    }
    let gc = gan.config().clone();
    let dtype = gan.dtype();
    let params = ParamsAdamW {
        lr: cfg.learning_rate,
        beta1: cfg.beta1,
        beta2: cfg.beta2,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    let mut opt_d = AdamW::new(gan.discriminator_vars(), params.clone())?;
    let mut opt_g = AdamW::new(gan.generator_vars(), params)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let scales = gc.scales();
    let enc_size = encoder.input_size();
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut last_good = gan.store().snapshot()?;
    let mut log = GanTrainLog::default();

    for step in 1..=cfg.steps {
        if cursor + b > order.len() {
            order = (0..data.len()).collect();
            order.shuffle(&mut rng);
            cursor = 0;
        }
        let batch = &order[cursor..cursor + b];
        cursor += b;
        let wrong: Vec<usize> = (0..b).map(|j| (j + rng.random_range(1..b)) % b).collect();
        let bank_idx: Vec<usize> = batch.iter().map(|&i| data.images[i]).collect();
        let sel = index(batch)?;
        let p = data.p.index_select(&sel, 0)?.to_dtype(dtype)?;
        let q = data.q.index_select(&sel, 0)?.to_dtype(dtype)?;
        let wrong_sel = index(&wrong)?;
        let mut real = Vec::with_capacity(3);
        for &s in &scales {
            let r = data.bank.batch(&bank_idx, s)?.to_dtype(dtype)?;
            let w = r.index_select(&wrong_sel, 0)?;
            real.push((r, w));
        }

        let eta = gaussian(&mut rng, (b, gc.c_dim), dtype)?;
        let z = gaussian(&mut rng, (b, gc.z_dim), dtype)?;
        let factor = gan.ca.augment(&p, Some(&eta))?;
        let fakes = gan.generator.forward(&factor.c, &z, true)?;

        let c_d = factor.c.detach();
        let mut d_loss = Tensor::zeros((), dtype, &Device::Cpu)?;
        for (i, d) in gan.discriminators.iter().enumerate() {
            let (cr, ur) = d.forward(&real[i].0, &c_d)?;
            let (cw, uw) = d.forward(&real[i].1, &c_d)?;
            let (cf, uf) = d.forward(&fakes[i].detach(), &c_d)?;
            let logits = DiscriminatorLogits {
                cond_real: cr,
                cond_wrong: cw,
                cond_fake: cf,
                uncond_real: ur,
                uncond_wrong: uw,
                uncond_fake: uf,
            };
            d_loss = (d_loss + discriminator_loss(&logits, gc.weights.uncond)?)?;
        }
        let d_value = scalar(&d_loss)?;
        if !d_value.is_finite() {
            gan.store().restore(&last_good)?;
            return Err(Error::Diverged {
                step,
                detail: format!("discriminator loss {d_value}"),
            });
        }
        opt_d.backward_step(&d_loss)?;

        let mut per_scale = Vec::with_capacity(3);
        for (i, d) in gan.discriminators.iter().enumerate() {
            let (cf, uf) = d.forward(&fakes[i], &factor.c)?;
            let cycle = if gc.weights.cycle > 0.0 {
                let resized = resize_bilinear(&fakes[i], enc_size, enc_size)?;
                cycle_similarity(&q, &encoder.forward(&resized)?)?
            } else {
                Tensor::zeros(b, dtype, &Device::Cpu)?
            };
            per_scale.push(GeneratorScale {
                cond_fake: cf,
                uncond_fake: uf,
                cycle_similarity: cycle,
            });
        }
        let kl = kl_standard_normal(&factor.mu, &factor.logvar)?;
        let (g_loss, parts) = generator_loss(&per_scale, &kl, &gc.weights)?;
        if !parts.total.is_finite() {
            gan.store().restore(&last_good)?;
            return Err(Error::Diverged {
                step,
                detail: format!("generator loss {}", parts.total),
            });
        }
        opt_g.backward_step(&g_loss)?;

        log.steps.push(GanStepLog {
            step,
            d_loss: d_value,
            g: parts,
        });
        if step % cfg.snapshot_every.max(1) == 0 {
            last_good = gan.store().snapshot()?;
        }
        if (cfg.sample_every > 0 && step % cfg.sample_every == 0) || step == cfg.steps {
            hook(step, gan)?;
        }
    }
    Ok(log)
}
