use std::path::{Path, PathBuf};

use anyhow::{bail, Result};
use candle_core::{DType, Device, Tensor};
use mealgen::gan::{gaussian, rows_to_tensor, train_gan, GanConfig, GanData, GanStepLog, GanTrainConfig, MealGan};
use mealgen::image_eval::{activation_stats, fid, inception_score, normalize_rows, QualityRow};
use mealgen::imaging::{grid, resize_square, save_png, tensor_to_images};
use mealgen::recipe_data::{Recipe, Split};
use mealgen::retrieval::{evaluate_pools, random_baseline, AggregateResult};
use mealgen::synthbench::{micro_f1, Oracle};
use mealgen::foodspace::FOODSPACE_DIM;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::assoc::AssocRun;
use crate::args::{GanEvalArgs, GanTrainArgs};
use crate::dataset::parse_split;
use crate::rundir::{base_config, read_toml, write_json, RunDir, CONFIG_FILE};

pub const GAN_DIR: &str = "gan";
const CHUNK: usize = 100;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanRunConfig {
    pub assoc: PathBuf,
    pub category: Option<String>,
    /// Training recipes shown in the periodic sample grids.
    pub sample_recipes: usize,
    pub model: GanConfig,
    pub train: GanTrainConfig,
}

impl Default for GanRunConfig {
    fn default() -> Self {
        Self {
            assoc: PathBuf::new(),
            category: None,
            sample_recipes: 8,
            model: GanConfig::default(),
            train: GanTrainConfig::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct GanTrainMetrics {
    pairs: usize,
    steps: Vec<GanStepLog>,
}

/// Sidecar of a sample grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSidecar {
    pub recipe_ids: Vec<String>,
    pub z_seed: u64,
    pub scales: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub oracle_presence: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GanQuality {
    pub quality: Option<QualityRow>,
    pub split: String,
    pub samples: usize,
    pub cycle_weight: f64,
    pub fake2recipe: AggregateResult,
    pub random: AggregateResult,
    pub oracle_f1: Option<f64>,
    pub oracle_f1_shuffled: Option<f64>,
}

pub struct GanRun {
    pub dir: PathBuf,
    pub config: GanRunConfig,
    pub assoc: AssocRun,
    pub gan: MealGan,
}

impl GanRun {
    pub fn open(dir: &Path) -> Result<Self> {
        let config: GanRunConfig = read_toml(&dir.join(CONFIG_FILE))?;
        let assoc = AssocRun::open(&config.assoc)?;
        let (gan, fp) = MealGan::load(&dir.join(GAN_DIR))?;
        if fp != assoc.model.fingerprint()? {
            bail!("GAN in {} was trained against a different association model", dir.display());
        }
        Ok(Self {
            dir: dir.to_path_buf(),
            config,
            assoc,
            gan,
        })
    }

    /// FoodSpace text encodings `[N, 1024]` of recipes.
    pub fn encode(&self, recipes: &[&Recipe]) -> Result<Tensor> {
        let seqs: Vec<Vec<usize>> = recipes.iter().map(|r| self.assoc.vocab.encode(&r.ingredients)).collect();
        if let Some(i) = seqs.iter().position(|s| s.is_empty()) {
            bail!("recipe {} has no in-vocabulary ingredient", recipes[i].id);
        }
        Ok(rows_to_tensor(&self.assoc.model.embed_sequences(&seqs)?)?)
    }

    /// Evaluation-mode images at the largest scale, in chunks.
    pub fn generate(&self, p: &Tensor, z: &Tensor) -> Result<Tensor> {
        Ok(generate_largest(&self.gan, p, z)?)
    }

    pub fn oracle(&self, path: Option<&Path>) -> Result<Option<Oracle>> {
        match path {
            Some(p) => Ok(Some(Oracle::load(p)?)),
            None => self.assoc.data.oracle(),
        }
    }
}

pub fn noise(seed: u64, n: usize, z_dim: usize) -> Result<Tensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(gaussian(&mut rng, (n, z_dim), DType::F32)?)
}

fn generate_largest(gan: &MealGan, p: &Tensor, z: &Tensor) -> mealgen::Result<Tensor> {
    let n = p.dim(0)?;
    let mut parts = Vec::new();
    for start in (0..n).step_by(CHUNK) {
        let len = (n - start).min(CHUNK);
        let [_, _, big] = gan.generate_eval(&p.narrow(0, start, len)?, &z.narrow(0, start, len)?)?;
        parts.push(big);
    }
    Ok(Tensor::cat(&parts, 0)?)
}

/// Rows of images at every scale, upsampled to the largest for display.
pub fn scale_rows(images: &[Tensor; 3], size: usize) -> mealgen::Result<Vec<Vec<image::RgbImage>>> {
    images
        .iter()
        .map(|t| Ok(tensor_to_images(t)?.iter().map(|i| resize_square(i, size)).collect()))
        .collect()
}

pub fn train(args: &GanTrainArgs) -> Result<()> {
    let mut cfg: GanRunConfig = base_config(args.config.as_deref())?;
    cfg.assoc = std::path::absolute(&args.assoc)?;
    if args.category.is_some() {
        cfg.category = args.category.clone();
    }
    if let Some(s) = args.steps {
        cfg.train.steps = s;
    }
    if let Some(b) = args.batch_size {
        cfg.train.batch_size = b;
    }
    if let Some(b) = args.base_size {
        cfg.model.base_size = b;
    }
    if let Some(c) = args.cycle {
        cfg.model.weights.cycle = c;
    }
    if let Some(lr) = args.learning_rate {
        cfg.train.learning_rate = lr;
    }
    if let Some(e) = args.sample_every {
        cfg.train.sample_every = e;
    }
    if let Some(s) = args.seed {
        cfg.model.seed = s;
        cfg.train.seed = s;
    }
    cfg.model.validate()?;

    let assoc = AssocRun::open(&cfg.assoc)?;
    let data_dir = args.data.canonicalize()?;
    if data_dir != assoc.data.dir.canonicalize()? {
        bail!("--data differs from the dataset the association run was trained on");
    }
    let recipes = assoc.data.recipes(Split::Train, cfg.category.as_deref());
    if recipes.is_empty() {
        bail!("no training recipes for category {:?}", cfg.category);
    }
    let scales = cfg.model.scales();
    let mut sizes = scales.to_vec();
    sizes.push(assoc.model.config().image_size);
    let loaded = assoc.data.load(&recipes, &assoc.vocab, &sizes)?;
    let data = GanData::prepare(&assoc.model, &loaded.bank, &loaded.pairs)?;
    let encoder = assoc.model.frozen_image_encoder()?;
    let gan = MealGan::new(cfg.model.clone())?;

    let run = RunDir::acquire(&args.out)?;
    run.write_config(&cfg)?;
    let shown = cfg.sample_recipes.min(loaded.recipes.len());
    let sample_p = data.p.narrow(0, 0, shown)?;
    let z_seed = cfg.train.seed ^ 0x5a5a;
    let sample_z = noise(z_seed, shown, cfg.model.z_dim)?;
    let sidecar_ids: Vec<String> = loaded.recipes[..shown].iter().map(|r| r.id.clone()).collect();
    let samples_dir = run.join("samples");
    let hook = |step: usize, g: &MealGan| -> mealgen::Result<()> {
        let out = g.generate_eval(&sample_p, &sample_z)?;
        for (t, s) in out.iter().zip(scales) {
            let row = tensor_to_images(t)?;
            save_png(&grid(&[row], 2)?, &samples_dir.join(format!("step{step:06}_{s}px.png")))?;
        }
        let sidecar = GridSidecar {
            recipe_ids: sidecar_ids.clone(),
            z_seed,
            scales: scales.to_vec(),
            step: Some(step),
            oracle_presence: Vec::new(),
        };
        write_json(&samples_dir.join(format!("step{step:06}.json")), &sidecar)
            .map_err(|e| mealgen::Error::InvalidArgument(e.to_string()))
    };
    let fingerprint = assoc.model.fingerprint()?;
    match train_gan(&gan, &data, &encoder, &cfg.train, hook) {
        Ok(log) => {
            gan.save(&run.join(GAN_DIR), &fingerprint)?;
            run.write_json(
                "metrics.json",
                &GanTrainMetrics {
                    pairs: data.len(),
                    steps: log.steps,
                },
            )
        }
        Err(e) => {
            gan.save(&run.join(GAN_DIR), &fingerprint)?;
            Err(e.into())
        }
    }
}

fn threshold(rows: &[Vec<f64>]) -> Vec<Vec<bool>> {
    rows.iter().map(|r| r.iter().map(|&v| v > 0.5).collect()).collect()
}

pub fn eval(args: &GanEvalArgs) -> Result<()> {
    let run = GanRun::open(&args.run)?;
    let split = parse_split(&args.split)?;
    let recipes = run.assoc.data.recipes(split, run.config.category.as_deref());
    let final_size = run.gan.config().scales()[2];
    let loaded = run.assoc.data.load(&recipes, &run.assoc.vocab, &[final_size])?;
    let n = args.samples.min(loaded.recipes.len());
    if n < args.samples {
        log::warn!("{} split has {} usable recipes; evaluating {n} samples", split.as_str(), loaded.recipes.len());
    }
    let chosen: Vec<&Recipe> = loaded.recipes[..n].iter().collect();
    let p = run.encode(&chosen)?;
    let z = noise(args.seed, n, run.gan.config().z_dim)?;
    let fakes = run.generate(&p, &z)?;

    let texts = run.assoc.model.embed_sequences(
        &chosen
            .iter()
            .map(|r| run.assoc.vocab.encode(&r.ingredients))
            .collect::<Vec<_>>(),
    )?;
    let q_fake = run.assoc.model.embed_images(&fakes)?;
    let fake2recipe = evaluate_pools(&texts, &q_fake, args.pool, args.repetitions, args.seed)?.im2recipe;
    let random = random_baseline(args.pool, args.repetitions, FOODSPACE_DIM, args.seed)?;

    let oracle = run.oracle(args.oracle.as_deref())?;
    let (mut quality, mut f1, mut f1_shuffled) = (None, None, None);
    if let Some(oracle) = &oracle {
        let presence = oracle.presence(&fakes)?;
        let (is_mean, is_std) = inception_score(&normalize_rows(&presence), args.is_splits)?;
        let first: Vec<usize> = loaded.pairs[..n].iter().map(|p| p.images[0]).collect();
        let real = loaded.bank.batch(&first, final_size)?;
        let fid_value = fid(
            &activation_stats(&oracle.features(&fakes)?)?,
            &activation_stats(&oracle.features(&real)?)?,
        )?;
        quality = Some(QualityRow {
            category: run.config.category.clone().unwrap_or_else(|| "all".into()),
            model: run_name(&run.dir),
            is_mean,
            is_std,
            fid: fid_value,
        });
        if let Some(spec) = run.assoc.data.glyphs() {
            let truth: Vec<Vec<bool>> = chosen
                .iter()
                .map(|r| spec.presence_vector(r).iter().map(|&v| v > 0.5).collect())
                .collect();
            f1 = Some(micro_f1(&threshold(&presence), &truth));
            let rotated: Vec<u32> = (0..n).map(|i| ((i + n / 2) % n) as u32).collect();
            let p_shuffled = p.index_select(&Tensor::new(rotated.as_slice(), &Device::Cpu)?, 0)?;
            let shuffled = oracle.presence(&run.generate(&p_shuffled, &z)?)?;
            f1_shuffled = Some(micro_f1(&threshold(&shuffled), &truth));
        }
    } else {
        log::warn!("no feature extractor available; IS and FID are not computed");
    }

    let report = GanQuality {
        quality,
        split: split.as_str().into(),
        samples: n,
        cycle_weight: run.gan.config().weights.cycle,
        fake2recipe,
        random,
        oracle_f1: f1,
        oracle_f1_shuffled: f1_shuffled,
    };
    let out = RunDir::acquire(&args.run)?;
    out.write_json(format!("eval/quality_{}.json", split.as_str()), &report)?;
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

pub fn run_name(dir: &Path) -> String {
    dir.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| dir.display().to_string())
}
