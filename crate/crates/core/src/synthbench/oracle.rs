use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{AdamW, Linear, Optimizer, ParamsAdamW, VarBuilder};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::render::{render, SynthRecipe};
use crate::imaging::ImageBank;
use crate::nn::{bce_with_logits, conv2d, resize_bilinear, Conv2d, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub input_size: usize,
    pub hidden: usize,
    pub render_size: usize,
    pub train_images: usize,
    pub heldout_images: usize,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Extra uniform-noise images per batch, as a fraction of the batch,
    /// trained towards 0.5 on every glyph.
    pub noise_fraction: f64,
    pub seed: u64,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self {
            input_size: 32,
            hidden: 64,
            render_size: 64,
            train_images: 4000,
            heldout_images: 500,
            epochs: 4,
            batch_size: 64,
            learning_rate: 2e-3,
            noise_fraction: 0.125,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleReport {
    /// Fraction of held-out clean renders whose thresholded predictions
    /// equal the true subset.
    pub heldout_exact_match: f64,
    pub heldout_glyph_accuracy: f64,
    /// Mean `|p - 0.5|` over uniform-noise images.
    pub noise_deviation: f64,
    pub final_loss: f64,
}

struct OracleNet {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    fc: Linear,
    head: Linear,
}

impl OracleNet {
    fn new(k: usize, cfg: &OracleConfig, vb: VarBuilder) -> Result<Self> {
        let flat = 64 * (cfg.input_size / 8) * (cfg.input_size / 8);
        Ok(Self {
            c1: conv2d(3, 32, 3, 2, 1, vb.pp("c1"))?,
            c2: conv2d(32, 64, 3, 2, 1, vb.pp("c2"))?,
            c3: conv2d(64, 64, 3, 2, 1, vb.pp("c3"))?,
            fc: candle_nn::linear(flat, cfg.hidden, vb.pp("fc"))?,
            head: candle_nn::linear(cfg.hidden, k, vb.pp("head"))?,
        })
    }

    fn features(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let h = self.c1.forward(x)?.relu()?;
        let h = self.c2.forward(&h)?.relu()?;
        let h = self.c3.forward(&h)?.relu()?;
        self.fc.forward(&h.flatten_from(1)?)?.relu()
    }

    fn logits(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        self.head.forward(&self.features(x)?)
    }
}

/// Ingredient-presence classifier on rendered meals.
pub struct Oracle {
    store: ParamStore,
    net: OracleNet,
    cfg: OracleConfig,
    num_glyphs: usize,
}

#[derive(Serialize, Deserialize)]
struct OracleMeta {
    num_glyphs: usize,
    config: OracleConfig,
}

fn random_subsets(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<SynthRecipe> {
    (0..n)
        .map(|_| SynthRecipe {
            glyphs: (0..k).filter(|_| rng.random::<bool>()).collect(),
            layout_seed: rng.random(),
        })
        .collect()
}

fn render_set(recipes: &[SynthRecipe], k: usize, cfg: &OracleConfig) -> Result<ImageBank> {
    use rayon::prelude::*;
    let images: Vec<image::RgbImage> =
        recipes.par_iter().map(|r| render(r, k, cfg.render_size)).collect::<Result<_>>()?;
    Ok(ImageBank::from_images(&images, &[cfg.input_size, cfg.input_size / 2]))
}

fn targets(recipes: &[&SynthRecipe], k: usize) -> Vec<f32> {
    let mut t = vec![0f32; recipes.len() * k];
    for (i, r) in recipes.iter().enumerate() {
        for &g in &r.glyphs {
            t[i * k + g] = 1.0;
        }
    }
    t
}

fn uniform_noise(n: usize, size: usize, rng: &mut ChaCha8Rng) -> Result<Tensor> {
    let data: Vec<f32> = (0..n * 3 * size * size).map(|_| rng.random_range(-1.0f32..=1.0)).collect();
    Ok(Tensor::from_vec(data, (n, 3, size, size), &Device::Cpu)?)
}

impl Oracle {
    pub fn new(num_glyphs: usize, cfg: OracleConfig) -> Result<Self> {
        if cfg.input_size % 8 != 0 || cfg.input_size == 0 {
            return Err(Error::InvalidArgument("oracle input size must be a positive multiple of 8".into()));
        }
        let store = ParamStore::new(cfg.seed);
        let net = OracleNet::new(num_glyphs, &cfg, store.var_builder())?;
        Ok(Self {
            store,
            net,
            cfg,
            num_glyphs,
        })
    }

    pub fn num_glyphs(&self) -> usize {
        self.num_glyphs
    }

    pub fn config(&self) -> &OracleConfig {
        &self.cfg
    }

    pub fn feature_dim(&self) -> usize {
        self.cfg.hidden
    }

    pub fn train(num_glyphs: usize, cfg: OracleConfig) -> Result<(Self, OracleReport)> {
        let oracle = Self::new(num_glyphs, cfg.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x6f72_6163_6c65);
        let train = random_subsets(cfg.train_images, num_glyphs, &mut rng);
        let bank = render_set(&train, num_glyphs, &cfg)?;
        let mut opt = AdamW::new(
            oracle.store.vars(),
            ParamsAdamW {
                lr: cfg.learning_rate,
                weight_decay: 0.0,
                ..Default::default()
            },
        )?;
        let n_noise = ((cfg.batch_size as f64 * cfg.noise_fraction).round() as usize).max(1);
        let jitter = Normal::new(0.0f32, 1.0).unwrap();
        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut final_loss = f64::NAN;
        for epoch in 0..cfg.epochs {
            order.shuffle(&mut rng);
            let mut total = 0.0;
            let mut batches = 0;
            for chunk in order.chunks(cfg.batch_size) {
                let mut x = bank.batch(chunk, cfg.input_size)?;
                if rng.random::<f64>() < 0.3 {
                    x = resize_bilinear(&bank.batch(chunk, cfg.input_size / 2)?, cfg.input_size, cfg.input_size)?;
                }
                let sigma = rng.random_range(0.0f32..0.08);
                let noise: Vec<f32> = (0..x.elem_count()).map(|_| sigma * jitter.sample(&mut rng)).collect();
                let shape = x.shape().clone();
                x = (x + Tensor::from_vec(noise, shape, &Device::Cpu)?)?;
                let x = Tensor::cat(&[&x, &uniform_noise(n_noise, cfg.input_size, &mut rng)?], 0)?;
                let rows: Vec<&SynthRecipe> = chunk.iter().map(|&i| &train[i]).collect();
                let mut t = targets(&rows, num_glyphs);
                t.extend(std::iter::repeat_n(0.5f32, n_noise * num_glyphs));
                let t = Tensor::from_vec(t, (chunk.len() + n_noise, num_glyphs), &Device::Cpu)?;
                let loss = bce_with_logits(&oracle.net.logits(&x)?, &t)?;
                opt.backward_step(&loss)?;
                total += loss.to_scalar::<f32>()? as f64;
                batches += 1;
            }
            final_loss = total / batches as f64;
            log::info!("oracle epoch {epoch}: loss {final_loss:.5}");
        }

        let held = random_subsets(cfg.heldout_images, num_glyphs, &mut rng);
        let held_bank = render_set(&held, num_glyphs, &cfg)?;
        let idx: Vec<usize> = (0..held.len()).collect();
        let probs = oracle.presence(&held_bank.batch(&idx, cfg.input_size)?)?;
        let refs: Vec<&SynthRecipe> = held.iter().collect();
        let truth = targets(&refs, num_glyphs);
        let mut exact = 0usize;
        let mut correct = 0usize;
        for (i, row) in probs.iter().enumerate() {
            let ok: Vec<bool> = row
                .iter()
                .enumerate()
                .map(|(g, &p)| (p >= 0.5) == (truth[i * num_glyphs + g] == 1.0))
                .collect();
            correct += ok.iter().filter(|&&b| b).count();
            exact += ok.iter().all(|&b| b) as usize;
        }
        let noise_probs = oracle.presence(&uniform_noise(100, cfg.input_size, &mut rng)?)?;
        let noise_deviation = noise_probs.iter().flatten().map(|p| (p - 0.5).abs()).sum::<f64>()
            / (noise_probs.len() * num_glyphs) as f64;
        let report = OracleReport {
            heldout_exact_match: exact as f64 / held.len() as f64,
            heldout_glyph_accuracy: correct as f64 / (held.len() * num_glyphs) as f64,
            noise_deviation,
            final_loss,
        };
        Ok((oracle, report))
    }

    fn prepare(&self, images: &Tensor) -> Result<Tensor> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 {
            return Err(Error::DimensionMismatch(format!("oracle expects 3 channels, got {c}")));
        }
        let x = images.to_dtype(DType::F32)?;
        let s = self.cfg.input_size;
        Ok(if (h, w) == (s, s) { x } else { resize_bilinear(&x, s, s)? })
    }

    /// Per-glyph presence probabilities in `[0, 1]`, one row per image.
    pub fn presence(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for start in (0..images.dim(0)?).step_by(256) {
            let n = (images.dim(0)? - start).min(256);
            let x = self.prepare(&images.narrow(0, start, n)?)?;
            let p = candle_nn::ops::sigmoid(&self.net.logits(&x)?)?.to_dtype(DType::F64)?;
            out.extend(p.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    /// Differentiable presence logits, for use inside training graphs.
    pub fn logits(&self, images: &Tensor) -> Result<Tensor> {
        Ok(self.net.logits(&self.prepare(images)?)?)
    }

    /// Penultimate activations.
    pub fn features(&self, images: &Tensor) -> Result<Vec<Vec<f64>>> {
        let mut out = Vec::new();
        for start in (0..images.dim(0)?).step_by(256) {
            let n = (images.dim(0)? - start).min(256);
            let x = self.prepare(&images.narrow(0, start, n)?)?;
            out.extend(self.net.features(&x)?.to_dtype(DType::F64)?.to_vec2::<f64>()?);
        }
        Ok(out)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join("oracle.safetensors"))?;
        let meta = OracleMeta {
            num_glyphs: self.num_glyphs,
            config: self.cfg.clone(),
        };
        let path = dir.join("oracle.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join("oracle.json");
        let meta: OracleMeta =
            serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
        let oracle = Self::new(meta.num_glyphs, meta.config)?;
        oracle.store.load(&dir.join("oracle.safetensors"))?;
        Ok(oracle)
    }
}

/// Micro-averaged F1 of thresholded predictions against truth sets.
pub fn micro_f1(predicted: &[Vec<bool>], truth: &[Vec<bool>]) -> f64 {
    let (mut tp, mut fp, mut fneg) = (0usize, 0usize, 0usize);
    for (p, t) in predicted.iter().zip(truth) {
        for (&a, &b) in p.iter().zip(t) {
            match (a, b) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fneg += 1,
                _ => {}
            }
        }
    }
    if tp == 0 {
        return 0.0;
    }
    2.0 * tp as f64 / (2 * tp + fp + fneg) as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn f1_by_hand() {
        let p = vec![vec![true, true, false], vec![false, false, true]];
        let t = vec![vec![true, false, false], vec![false, true, true]];
        // tp 2, fp 1, fn 1 -> 4 / 6
        assert!((micro_f1(&p, &t) - 4.0 / 6.0).abs() < 1e-12);
        assert_eq!(micro_f1(&[vec![false]], &[vec![true]]), 0.0);
    }

    #[test]
    fn presence_contract_and_persistence() {
        let cfg = OracleConfig {
            train_images: 64,
            heldout_images: 16,
            epochs: 1,
            ..Default::default()
        };
        let (oracle, report) = Oracle::train(8, cfg).unwrap();
        assert!(report.final_loss.is_finite());
        let x = Tensor::zeros((3, 3, 64, 64), DType::F32, &Device::Cpu).unwrap();
        let p = oracle.presence(&x).unwrap();
        assert_eq!(p.len(), 3);
        assert!(p.iter().all(|r| r.len() == 8 && r.iter().all(|v| (0.0..=1.0).contains(v))));
        assert_eq!(oracle.features(&x).unwrap()[0].len(), 64);
        let dir = tempfile::tempdir().unwrap();
        oracle.save(dir.path()).unwrap();
        let back = Oracle::load(dir.path()).unwrap();
        assert_eq!(back.presence(&x).unwrap(), p);
        assert!(oracle.presence(&Tensor::zeros((1, 1, 32, 32), DType::F32, &Device::Cpu).unwrap()).is_err());
    }
}
