use std::path::Path;

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Linear, VarBuilder};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::losses::LossWeights;
use crate::foodspace::FOODSPACE_DIM;
use crate::nn::{add_channel_bias, batch_norm, conv2d, glu, leaky_relu, tanh, upsample2x, BatchNorm, Conv2d, ParamStore};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GanConfig {
    /// Side of the lowest-resolution output; the others are 2x and 4x.
    pub base_size: usize,
    pub z_dim: usize,
    pub c_dim: usize,
    /// Hidden-map channels of F0, F1 and F2.
    pub gen_channels: [usize; 3],
    pub residual_blocks: usize,
    /// Width of the first discriminator layer; doubles per layer up to 8x.
    pub disc_channels: usize,
    pub weights: LossWeights,
    pub seed: u64,
}

impl Default for GanConfig {
    fn default() -> Self {
        Self {
            base_size: 64,
            z_dim: 100,
            c_dim: 128,
            gen_channels: [64, 32, 16],
            residual_blocks: 2,
            disc_channels: 32,
            weights: LossWeights::default(),
            seed: 0,
        }
    }
}

impl GanConfig {
    pub fn scales(&self) -> [usize; 3] {
        [self.base_size, 2 * self.base_size, 4 * self.base_size]
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_size < 8 || !self.base_size.is_power_of_two() {
            return Err(Error::InvalidArgument(format!(
                "base size {} must be a power of two >= 8",
                self.base_size
            )));
        }
        if self.z_dim == 0 || self.c_dim == 0 || self.disc_channels == 0 || self.gen_channels.contains(&0) {
            return Err(Error::InvalidArgument("GAN widths must be positive".into()));
        }
        self.weights.validate()
    }
}

/// Standard-normal draws from a seeded generator.
pub fn gaussian(rng: &mut impl Rng, shape: (usize, usize), dtype: DType) -> Result<Tensor> {
    let data: Vec<f32> = (0..shape.0 * shape.1).map(|_| StandardNormal.sample(rng)).collect();
    Ok(Tensor::from_vec(data, shape, &Device::Cpu)?.to_dtype(dtype)?)
}

/// `mu`, `logvar` and the sample `c`, each `[B, c_dim]`.
#[derive(Debug, Clone)]
pub struct AppearanceFactor {
    pub mu: Tensor,
    pub logvar: Tensor,
    pub c: Tensor,
}

/// `p -> (mu, logvar)` through a linear map and a gated unit.
pub struct CondAugment {
    fc: Linear,
    c_dim: usize,
}

impl CondAugment {
    fn new(c_dim: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            fc: candle_nn::linear(FOODSPACE_DIM, 4 * c_dim, vb.pp("fc"))?,
            c_dim,
        })
    }

    pub fn moments(&self, p: &Tensor) -> Result<(Tensor, Tensor)> {
        let d = p.dim(candle_core::D::Minus1)?;
        if d != FOODSPACE_DIM {
            return Err(Error::DimensionMismatch(format!("conditioning expects {FOODSPACE_DIM}-d p, got {d}")));
        }
        let h = glu(&self.fc.forward(p)?, 1)?;
        Ok((h.narrow(1, 0, self.c_dim)?, h.narrow(1, self.c_dim, self.c_dim)?))
    }

    /// `c = mu + exp(logvar / 2) * eta`, or `c = mu` when `eta` is `None`.
    pub fn augment(&self, p: &Tensor, eta: Option<&Tensor>) -> Result<AppearanceFactor> {
        let (mu, logvar) = self.moments(p)?;
        let c = match eta {
            Some(eta) => (&mu + (logvar.affine(0.5, 0.0)?.exp()? * eta)?)?,
            None => mu.clone(),
        };
        Ok(AppearanceFactor { mu, logvar, c })
    }
}

fn conv3(cin: usize, cout: usize, vb: VarBuilder) -> Result<Conv2d> {
    Ok(conv2d(cin, cout, 3, 1, 1, vb)?)
}

struct UpBlock {
    conv: Conv2d,
    bn: BatchNorm,
}

impl UpBlock {
    fn new(cin: usize, cout: usize, vb: VarBuilder, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            conv: conv3(cin, 2 * cout, vb.pp("conv"))?,
            bn: batch_norm(2 * cout, vb.pp("bn"), Some(store))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let y = self.conv.forward(&upsample2x(x)?)?;
        Ok(glu(&self.bn.forward_t(&y, train)?, 1)?)
    }
}

struct Residual {
    a: Conv2d,
    bn_a: BatchNorm,
    b: Conv2d,
    bn_b: BatchNorm,
}

impl Residual {
    fn new(ch: usize, vb: VarBuilder, store: &ParamStore) -> Result<Self> {
        Ok(Self {
            a: conv3(ch, 2 * ch, vb.pp("a"))?,
            bn_a: batch_norm(2 * ch, vb.pp("bn_a"), Some(store))?,
            b: conv3(ch, ch, vb.pp("b"))?,
            bn_b: batch_norm(ch, vb.pp("bn_b"), Some(store))?,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> Result<Tensor> {
        let r = glu(&self.bn_a.forward_t(&self.a.forward(x)?, train)?, 1)?;
        let r = self.bn_b.forward_t(&self.b.forward(&r)?, train)?;
        Ok((x + r)?)
    }
}

/// Convolution over `[h ; c tiled]`. The tiled part of the kernel acts on a
/// spatially constant input, so it is a per-sample bias `W_c c`, exact away
/// from the zero-padded border.
struct JointConv {
    conv: Conv2d,
    cond: Linear,
}

impl JointConv {
    fn new(cin: usize, c_dim: usize, cout: usize, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            conv: conv3(cin, cout, vb.pp("conv"))?,
            cond: candle_nn::linear_no_bias(c_dim, cout, vb.pp("cond"))?,
        })
    }

    fn forward(&self, h: &Tensor, c: &Tensor) -> Result<Tensor> {
        Ok(add_channel_bias(&self.conv.forward(h)?, &self.cond.forward(c)?)?)
    }
}

struct Stage {
    joint: JointConv,
    joint_bn: BatchNorm,
    residual: Vec<Residual>,
    up: UpBlock,
}

pub struct Generator {
    fc: Linear,
    fc_bn: BatchNorm,
    first_up: Vec<UpBlock>,
    stages: Vec<Stage>,
    heads: Vec<Conv2d>,
    ch0: usize,
    z_dim: usize,
    c_dim: usize,
}

impl Generator {
    fn new(cfg: &GanConfig, vb: VarBuilder, store: &ParamStore) -> Result<Self> {
        let [c0, c1, c2] = cfg.gen_channels;
        let ups = (cfg.base_size / 4).trailing_zeros() as usize;
        let first_up = (0..ups)
            .map(|i| UpBlock::new(c0, c0, vb.pp(format!("f0.up{i}")), store))
            .collect::<Result<Vec<_>>>()?;
        let mut stages = Vec::new();
        for (i, (cin, cout)) in [(c0, c1), (c1, c2)].into_iter().enumerate() {
            let svb = vb.pp(format!("f{}", i + 1));
            stages.push(Stage {
                joint: JointConv::new(cin, cfg.c_dim, 2 * cin, svb.pp("joint"))?,
                joint_bn: batch_norm(2 * cin, svb.pp("joint_bn"), Some(store))?,
                residual: (0..cfg.residual_blocks)
                    .map(|r| Residual::new(cin, svb.pp(format!("res{r}")), store))
                    .collect::<Result<Vec<_>>>()?,
                up: UpBlock::new(cin, cout, svb.pp("up"), store)?,
            });
        }
        let heads = [c0, c1, c2]
            .iter()
            .enumerate()
            .map(|(i, &c)| conv3(c, 3, vb.pp(format!("t{i}"))))
            .collect::<Result<Vec<_>>>()?;
        let fc_out = 2 * c0 * 16;
        Ok(Self {
            fc: candle_nn::linear_no_bias(cfg.z_dim + cfg.c_dim, fc_out, vb.pp("f0.fc"))?,
            fc_bn: batch_norm(fc_out, vb.pp("f0.fc_bn"), Some(store))?,
            first_up,
            stages,
            heads,
            ch0: c0,
            z_dim: cfg.z_dim,
            c_dim: cfg.c_dim,
        })
    }

    /// Images at the three scales, each `[B, 3, s, s]` in `[-1, 1]`.
    /// Training mode normalizes with batch statistics and updates the
    /// running estimates; otherwise the running estimates are used.
    pub fn forward(&self, c: &Tensor, z: &Tensor, train: bool) -> Result<[Tensor; 3]> {
        let (bc, dc) = c.dims2()?;
        let (bz, dz) = z.dims2()?;
        if dc != self.c_dim || dz != self.z_dim || bc != bz {
            return Err(Error::DimensionMismatch(format!(
                "generator expects c [B, {}] and z [B, {}], got {:?} and {:?}",
                self.c_dim,
                self.z_dim,
                c.dims(),
                z.dims()
            )));
        }
        let x = self.fc_bn.forward_t(&self.fc.forward(&Tensor::cat(&[c, z], 1)?)?, train)?;
        let mut h = glu(&x.reshape((bc, 2 * self.ch0, 4, 4))?, 1)?;
        for up in &self.first_up {
            h = up.forward(&h, train)?;
        }
        let mut hidden = vec![h];
        for stage in &self.stages {
            let prev = hidden.last().unwrap();
            let j = stage.joint_bn.forward_t(&stage.joint.forward(prev, c)?, train)?;
            let mut h = glu(&j, 1)?;
            for r in &stage.residual {
                h = r.forward(&h, train)?;
            }
            hidden.push(stage.up.forward(&h, train)?);
        }
        let out: Vec<Tensor> = hidden
            .iter()
            .zip(&self.heads)
            .map(|(h, t)| Ok(tanh(&t.forward(h)?)?))
            .collect::<Result<_>>()?;
        let [a, b, c]: [Tensor; 3] = out.try_into().expect("three scales");
        Ok([a, b, c])
    }
}

/// Strided encoder to `4x4` followed by unconditional and conditional
/// logit heads. Normalization always uses the statistics of the batch at
/// hand; discriminators never run in inference mode.
pub struct Discriminator {
    down: Vec<(Conv2d, Option<BatchNorm>)>,
    uncond: Conv2d,
    joint: JointConv,
    joint_bn: BatchNorm,
    cond: Conv2d,
    size: usize,
}

impl Discriminator {
    fn new(size: usize, cfg: &GanConfig, vb: VarBuilder) -> Result<Self> {
        let layers = (size / 4).trailing_zeros() as usize;
        let mut down = Vec::new();
        let mut cin = 3;
        let mut cout = cfg.disc_channels;
        for i in 0..layers {
            let conv = conv2d(cin, cout, 4, 2, 1, vb.pp(format!("down{i}")))?;
            let bn = if i == 0 {
                None
            } else {
                Some(batch_norm(cout, vb.pp(format!("down{i}_bn")), None)?)
            };
            down.push((conv, bn));
            cin = cout;
            cout = (cout * 2).min(8 * cfg.disc_channels);
        }
        Ok(Self {
            down,
            uncond: conv2d(cin, 1, 4, 1, 0, vb.pp("uncond"))?,
            joint: JointConv::new(cin, cfg.c_dim, cin, vb.pp("joint"))?,
            joint_bn: batch_norm(cin, vb.pp("joint_bn"), None)?,
            cond: conv2d(cin, 1, 4, 1, 0, vb.pp("cond"))?,
            size,
        })
    }

    /// `(conditional, unconditional)` logits, each `[B]`.
    pub fn forward(&self, images: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let (b, ch, h, w) = images.dims4()?;
        if ch != 3 || h != self.size || w != self.size {
            return Err(Error::DimensionMismatch(format!(
                "discriminator for {s}x{s} got {:?}",
                images.dims(),
                s = self.size
            )));
        }
        let mut x = images.clone();
        for (conv, bn) in &self.down {
            x = conv.forward(&x)?;
            if let Some(bn) = bn {
                x = bn.forward_train(&x)?;
            }
            x = leaky_relu(&x, 0.2)?;
        }
        let uncond = self.uncond.forward(&x)?.reshape(b)?;
        let joint = leaky_relu(&self.joint_bn.forward_train(&self.joint.forward(&x, c)?)?, 0.2)?;
        let cond = self.cond.forward(&joint)?.reshape(b)?;
        Ok((cond, uncond))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct GanMeta {
    config: GanConfig,
    foodspace_fingerprint: String,
    parameters: usize,
}

/// Conditioning, generator and the three discriminators.
pub struct MealGan {
    cfg: GanConfig,
    store: ParamStore,
    pub ca: CondAugment,
    pub generator: Generator,
    pub discriminators: Vec<Discriminator>,
}

impl MealGan {
    pub fn new(cfg: GanConfig) -> Result<Self> {
        Self::with_dtype(cfg, DType::F32)
    }

    pub fn with_dtype(cfg: GanConfig, dtype: DType) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::with_dtype(cfg.seed, dtype);
        let vb = store.var_builder();
        let ca = CondAugment::new(cfg.c_dim, vb.pp("ca"))?;
        let generator = Generator::new(&cfg, vb.pp("g"), &store)?;
        let discriminators = cfg
            .scales()
            .iter()
            .enumerate()
            .map(|(i, &s)| Discriminator::new(s, &cfg, vb.pp(format!("d{i}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            cfg,
            store,
            ca,
            generator,
            discriminators,
        })
    }

    pub fn config(&self) -> &GanConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    /// Trainable generator-side variables (conditioning and generator);
    /// running normalization statistics are excluded.
    pub fn generator_vars(&self) -> Vec<candle_core::Var> {
        self.store
            .named_vars()
            .into_iter()
            .filter(|(n, _)| (n.starts_with("ca.") || n.starts_with("g.")) && !n.contains(".running_"))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn discriminator_vars(&self) -> Vec<candle_core::Var> {
        (0..3).flat_map(|i| self.store.vars_with_prefix(&format!("d{i}."))).collect()
    }

    /// Deterministic generation with `c = mu`.
    pub fn generate_eval(&self, p: &Tensor, z: &Tensor) -> Result<[Tensor; 3]> {
        let f = self.ca.augment(&p.to_dtype(self.dtype())?, None)?;
        self.generator.forward(&f.c, &z.to_dtype(self.dtype())?, false)
    }

    pub fn fingerprint(&self) -> Result<String> {
        Ok(self.store.fingerprint()?)
    }

    /// Writes `gan.safetensors` and `gan.json` into `dir`.
    pub fn save(&self, dir: &Path, foodspace_fingerprint: &str) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.store.save(&dir.join("gan.safetensors"))?;
        let meta = GanMeta {
            config: self.cfg.clone(),
            foodspace_fingerprint: foodspace_fingerprint.to_string(),
            parameters: self.store.num_parameters(),
        };
        let path = dir.join("gan.json");
        std::fs::write(&path, serde_json::to_string_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    /// Returns the model and the fingerprint of the FoodSpace model it was
    /// trained against.
    pub fn load(dir: &Path) -> Result<(Self, String)> {
        let path = dir.join("gan.json");
        let meta: GanMeta = serde_json::from_str(&std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?)?;
        let gan = Self::new(meta.config)?;
        gan.store.load(&dir.join("gan.safetensors"))?;
        Ok((gan, meta.foodspace_fingerprint))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn tiny() -> GanConfig {
        GanConfig {
            base_size: 8,
            z_dim: 6,
            c_dim: 5,
            gen_channels: [8, 6, 4],
            residual_blocks: 1,
            disc_channels: 4,
            weights: LossWeights::default(),
            seed: 3,
        }
    }

    fn inputs(b: usize, seed: u64) -> (Tensor, Tensor) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (
            gaussian(&mut rng, (b, FOODSPACE_DIM), DType::F32).unwrap(),
            gaussian(&mut rng, (b, 6), DType::F32).unwrap(),
        )
    }

    #[test]
    fn shapes_at_default_and_desk_scales() -> Result<()> {
        let gan = MealGan::new(GanConfig {
            gen_channels: [8, 4, 4],
            residual_blocks: 1,
            disc_channels: 4,
            ..GanConfig::default()
        })?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let p = gaussian(&mut rng, (2, FOODSPACE_DIM), DType::F32)?;
        let z = gaussian(&mut rng, (2, 100), DType::F32)?;
        let out = gan.generate_eval(&p, &z)?;
        for (img, s) in out.iter().zip([64, 128, 256]) {
            assert_eq!(img.dims(), &[2, 3, s, s]);
        }
        let gan = MealGan::new(tiny())?;
        let (p, z) = inputs(3, 1);
        let _ = gan.generator.forward(&gan.ca.augment(&p, None)?.c, &z, true)?;
        let out = gan.generate_eval(&p, &z)?;
        for (i, (img, s)) in out.iter().zip([8, 16, 32]).enumerate() {
            assert_eq!(img.dims(), &[3, 3, s, s]);
            let v: Vec<f32> = img.flatten_all()?.to_vec1()?;
            assert!(v.iter().all(|x| x.abs() <= 1.0));
            let c = gan.ca.augment(&p, None)?.c;
            let (cond, unc) = gan.discriminators[i].forward(img, &c)?;
            assert_eq!(cond.dims(), &[3]);
            assert_eq!(unc.dims(), &[3]);
        }
        assert!(gan.discriminators[0].forward(&out[1], &gan.ca.augment(&p, None)?.c).is_err());
        assert!(gan.generator.forward(&z, &z, false).is_err());
        Ok(())
    }

    #[test]
    fn determinism_and_conditioning_reach_output() -> Result<()> {
        let gan = MealGan::new(tiny())?;
        let (p, z) = inputs(2, 4);
        let a = gan.generate_eval(&p, &z)?;
        let b = gan.generate_eval(&p, &z)?;
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.flatten_all()?.to_vec1::<f32>()?, y.flatten_all()?.to_vec1::<f32>()?);
        }
        // Row 0 and row 1 share z but differ in p.
        let z_shared = Tensor::cat(&[z.narrow(0, 0, 1)?, z.narrow(0, 0, 1)?], 0)?;
        let out = gan.generate_eval(&p, &z_shared)?;
        for img in &out {
            let diff = (img.get(0)? - img.get(1)?)?.abs()?.max_all()?.to_scalar::<f32>()?;
            assert!(diff > 0.0);
        }
        Ok(())
    }

    #[test]
    fn batch_doubling_changes_only_batch_dimension() -> Result<()> {
        let gan = MealGan::new(tiny())?;
        let (p, z) = inputs(2, 7);
        let single = gan.generate_eval(&p, &z)?;
        let p2 = Tensor::cat(&[&p, &p], 0)?;
        let z2 = Tensor::cat(&[&z, &z], 0)?;
        let double = gan.generate_eval(&p2, &z2)?;
        for (s, d) in single.iter().zip(&double) {
            assert_eq!(d.dim(0)?, 2 * s.dim(0)?);
            assert_eq!(&d.dims()[1..], &s.dims()[1..]);
            let tail = d.narrow(0, 2, 2)?;
            let err = (tail - s)?.abs()?.max_all()?.to_scalar::<f32>()?;
            assert!(err < 1e-5);
        }
        Ok(())
    }

    #[test]
    fn train_mode_samples_differ_but_share_moments() -> Result<()> {
        let gan = MealGan::new(tiny())?;
        let (p, _) = inputs(2, 8);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = gan.ca.augment(&p, Some(&gaussian(&mut rng, (2, 5), DType::F32)?))?;
        let b = gan.ca.augment(&p, Some(&gaussian(&mut rng, (2, 5), DType::F32)?))?;
        assert_eq!(a.mu.to_vec2::<f32>()?, b.mu.to_vec2::<f32>()?);
        assert_eq!(a.logvar.to_vec2::<f32>()?, b.logvar.to_vec2::<f32>()?);
        assert_ne!(a.c.to_vec2::<f32>()?, b.c.to_vec2::<f32>()?);
        let e = gan.ca.augment(&p, None)?;
        assert_eq!(e.c.to_vec2::<f32>()?, e.mu.to_vec2::<f32>()?);
        Ok(())
    }

    #[test]
    fn reparameterized_mean_and_jacobian() -> Result<()> {
        let gan = MealGan::with_dtype(tiny(), DType::F64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = gaussian(&mut rng, (1, FOODSPACE_DIM), DType::F64)?;
        let (mu, logvar) = gan.ca.moments(&p)?;
        let n = 100_000;
        let eta = gaussian(&mut rng, (n, 5), DType::F64)?;
        let c = mu.broadcast_add(&logvar.affine(0.5, 0.0)?.exp()?.broadcast_mul(&eta)?)?;
        let mean: Vec<f64> = c.mean(0)?.to_vec1()?;
        let mu_v: Vec<f64> = mu.flatten_all()?.to_vec1()?;
        let sd: Vec<f64> = logvar.affine(0.5, 0.0)?.exp()?.flatten_all()?.to_vec1()?;
        for k in 0..5 {
            assert!((mean[k] - mu_v[k]).abs() < 3.0 * sd[k] / (n as f64).sqrt());
        }
        // dc/dmu is the identity: the gradient of sum(w * c) w.r.t. mu is w.
        let mu_var = candle_core::Var::from_tensor(&mu)?;
        let eta1 = gaussian(&mut rng, (1, 5), DType::F64)?;
        let w = Tensor::new(&[[0.3f64, -1.0, 2.0, 0.5, 4.0]], &Device::Cpu)?;
        let c = (mu_var.as_tensor() + (logvar.affine(0.5, 0.0)?.exp()? * &eta1)?)?;
        let g = (c * &w)?.sum_all()?.backward()?;
        assert_eq!(g.get(&mu_var).unwrap().to_vec2::<f64>()?, w.to_vec2::<f64>()?);
        Ok(())
    }

    #[test]
    fn checkpoint_round_trip() -> Result<()> {
        let dir = tempfile::tempdir().unwrap();
        let gan = MealGan::new(tiny())?;
        gan.save(dir.path(), "abc")?;
        let (back, fp) = MealGan::load(dir.path())?;
        assert_eq!(fp, "abc");
        assert_eq!(back.config(), gan.config());
        assert_eq!(back.fingerprint()?, gan.fingerprint()?);
        Ok(())
    }

    #[test]
    fn end_to_end_gradient_matches_finite_differences() -> Result<()> {
        let gan = MealGan::with_dtype(tiny(), DType::F64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = gaussian(&mut rng, (3, FOODSPACE_DIM), DType::F64)?;
        let z = gaussian(&mut rng, (3, 6), DType::F64)?;
        let eta = gaussian(&mut rng, (3, 5), DType::F64)?;
        let loss = || -> Result<Tensor> {
            let f = gan.ca.augment(&p, Some(&eta))?;
            let out = gan.generator.forward(&f.c, &z, true)?;
            let mut total = Tensor::zeros((), DType::F64, &Device::Cpu)?;
            for (d, img) in gan.discriminators.iter().zip(&out) {
                let (c, u) = d.forward(img, &f.c)?;
                total = (total + crate::gan::real_term(&c)? + crate::gan::real_term(&u)?)?;
            }
            Ok(total)
        };
        let grads = loss()?.backward()?;
        let mut checked = 0;
        for (name, var) in gan.store().named_vars() {
            if name.contains("running_") {
                continue;
            }
            let g = grads.get(&var).expect("every trainable variable gets a gradient");
            let gv: Vec<f64> = g.flatten_all()?.to_vec1()?;
            let base: Vec<f64> = var.as_tensor().flatten_all()?.to_vec1()?;
            let i = base.len() / 2;
            let eps = 1e-5;
            let mut shifted = base.clone();
            shifted[i] += eps;
            var.set(&Tensor::from_vec(shifted.clone(), var.shape(), &Device::Cpu)?)?;
            let up = loss()?.to_scalar::<f64>()?;
            shifted[i] -= 2.0 * eps;
            var.set(&Tensor::from_vec(shifted, var.shape(), &Device::Cpu)?)?;
            let down = loss()?.to_scalar::<f64>()?;
            var.set(&Tensor::from_vec(base, var.shape(), &Device::Cpu)?)?;
            let numeric = (up - down) / (2.0 * eps);
            assert!(
                (numeric - gv[i]).abs() <= 1e-5 * (1.0 + numeric.abs()),
                "{name}: numeric {numeric} vs analytic {}",
                gv[i]
            );
            checked += 1;
        }
        assert!(checked > 20);
        Ok(())
    }
}
