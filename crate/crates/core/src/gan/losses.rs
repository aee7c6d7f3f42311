//! Adversarial, conditioning and cycle losses.
//!
//! Discriminator heads emit logits; `-ln D = softplus(-l)` and
//! `-ln(1 - D) = softplus(l)` keep every term finite. Probability-valued
//! variants exist for direct evaluation.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::foodspace::cosine_rows;
use crate::nn::softplus;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub uncond: f64,
    pub ca: f64,
    pub cycle: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            uncond: 0.5,
            ca: 0.02,
            cycle: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("uncond", self.uncond), ("ca", self.ca), ("cycle", self.cycle)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::InvalidArgument(format!("loss weight {name} = {v} must be >= 0")));
            }
        }
        Ok(())
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// `0.5 * sum(mu^2 + e^logvar - 1 - logvar)` over the last axis, averaged
/// over the batch.
pub fn kl_standard_normal(mu: &Tensor, logvar: &Tensor) -> Result<Tensor> {
    if mu.dims() != logvar.dims() {
        return Err(Error::DimensionMismatch(format!("mu {:?} vs logvar {:?}", mu.dims(), logvar.dims())));
    }
    let total = scalar(&(mu.abs()?.sum_all()? + logvar.abs()?.sum_all()?)?)?;
    if !total.is_finite() {
        return Err(Error::NonFinite("conditioning mean or log-variance".into()));
    }
    let per = ((mu.sqr()? + logvar.exp()?)? - 1.0)?.sub(logvar)?;
    let batch = if mu.rank() > 1 { mu.dim(0)? } else { 1 };
    Ok((per.sum_all()? * (0.5 / batch as f64))?)
}

/// `-E ln D(x)` from logits.
pub fn real_term(logits: &Tensor) -> Result<Tensor> {
    Ok(softplus(&logits.neg()?)?.mean_all()?)
}

/// `-E ln(1 - D(x))` from logits.
pub fn fake_term(logits: &Tensor) -> Result<Tensor> {
    Ok(softplus(logits)?.mean_all()?)
}

/// Logits of one discriminator on the three image sets.
pub struct DiscriminatorLogits {
    pub cond_real: Tensor,
    pub cond_wrong: Tensor,
    pub cond_fake: Tensor,
    pub uncond_real: Tensor,
    pub uncond_wrong: Tensor,
    pub uncond_fake: Tensor,
}

/// Conditional cross-entropy (matched pair real; mismatched pair and fake
/// are fake) plus `uncond` times the unconditional term (both real images
/// real, fake fake).
pub fn discriminator_loss(l: &DiscriminatorLogits, uncond: f64) -> Result<Tensor> {
    let cond = ((real_term(&l.cond_real)? + fake_term(&l.cond_wrong)?)? + fake_term(&l.cond_fake)?)?;
    let unc = ((real_term(&l.uncond_real)? + real_term(&l.uncond_wrong)?)? + fake_term(&l.uncond_fake)?)?;
    Ok((cond + (unc * uncond)?)?)
}

fn check_probability(term: &'static str, values: &[f64]) -> Result<()> {
    match values.iter().find(|&&v| !(v > 0.0 && v < 1.0)) {
        Some(&value) => Err(Error::NotProbability { term, value }),
        None => Ok(()),
    }
}

fn mean_neg_ln(values: &[f64], complement: bool) -> f64 {
    values
        .iter()
        .map(|&d| -(if complement { 1.0 - d } else { d }).ln())
        .sum::<f64>()
        / values.len() as f64
}

/// Conditional term from probabilities:
/// `-E ln D(v+,c) - E ln(1 - D(v-,c)) - E ln(1 - D(fake,c))`.
pub fn conditional_term_from_probs(real: &[f64], wrong: &[f64], fake: &[f64]) -> Result<f64> {
    check_probability("D(v+, c)", real)?;
    check_probability("D(v-, c)", wrong)?;
    check_probability("D(fake, c)", fake)?;
    Ok(mean_neg_ln(real, false) + mean_neg_ln(wrong, true) + mean_neg_ln(fake, true))
}

/// Unconditional term from probabilities:
/// `-E ln D(v+) - E ln D(v-) - E ln(1 - D(fake))`.
pub fn unconditional_term_from_probs(real: &[f64], wrong: &[f64], fake: &[f64]) -> Result<f64> {
    check_probability("D(v+)", real)?;
    check_probability("D(v-)", wrong)?;
    check_probability("D(fake)", fake)?;
    Ok(mean_neg_ln(real, false) + mean_neg_ln(wrong, false) + mean_neg_ln(fake, true))
}

/// One scale's generator-side inputs.
pub struct GeneratorScale {
    pub cond_fake: Tensor,
    pub uncond_fake: Tensor,
    /// `cos(q+, q~+)` per example.
    pub cycle_similarity: Tensor,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeneratorLossParts {
    pub adversarial: f64,
    pub cycle: f64,
    pub kl: f64,
    pub total: f64,
}

/// `sum_i (adv_cond_i + uncond * adv_uncond_i - cycle * mean cos_i) + ca * kl`
/// with non-saturating adversarial terms `-E ln D(fake)`.
pub fn generator_loss(scales: &[GeneratorScale], kl: &Tensor, w: &LossWeights) -> Result<(Tensor, GeneratorLossParts)> {
    if scales.len() != 3 {
        return Err(Error::InvalidArgument(format!("generator loss needs 3 scales, got {}", scales.len())));
    }
    let mut adv = Tensor::zeros((), kl.dtype(), kl.device())?;
    let mut cyc = Tensor::zeros((), kl.dtype(), kl.device())?;
    for s in scales {
        adv = (adv + (real_term(&s.cond_fake)? + (real_term(&s.uncond_fake)? * w.uncond)?)?)?;
        cyc = (cyc + s.cycle_similarity.mean_all()?)?;
    }
    let total = ((&adv - (&cyc * w.cycle)?)? + (kl * w.ca)?)?;
    let parts = GeneratorLossParts {
        adversarial: scalar(&adv)?,
        cycle: scalar(&cyc)?,
        kl: scalar(kl)?,
        total: scalar(&total)?,
    };
    Ok((total, parts))
}

/// `cos(q+, q~+)` per row.
pub fn cycle_similarity(q_real: &Tensor, q_fake: &Tensor) -> Result<Tensor> {
    cosine_rows(q_real, q_fake)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn t1(v: &[f64]) -> Tensor {
        Tensor::new(v, &Device::Cpu).unwrap()
    }

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    #[test]
    fn kl_closed_form_examples() -> Result<()> {
        let z = Tensor::zeros((3, 5), DType::F64, &Device::Cpu)?;
        assert_eq!(scalar(&kl_standard_normal(&z, &z)?)?, 0.0);
        let mu = Tensor::ones((1, 4), DType::F64, &Device::Cpu)?;
        assert!((scalar(&kl_standard_normal(&mu, &z.narrow(0, 0, 1)?.narrow(1, 0, 4)?)?)? - 2.0).abs() < 1e-12);
        let bad = Tensor::new(&[[f64::NAN]], &Device::Cpu)?;
        assert!(matches!(kl_standard_normal(&bad, &bad), Err(Error::NonFinite(_))));
        Ok(())
    }

    #[test]
    fn kl_matches_monte_carlo() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = 3;
        let mu: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let lv: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..0.5)).collect();
        let closed = scalar(&kl_standard_normal(
            &Tensor::from_vec(mu.clone(), (1, d), &Device::Cpu)?,
            &Tensor::from_vec(lv.clone(), (1, d), &Device::Cpu)?,
        )?)?;
        // E_q[ln q(x) - ln p(x)] with x ~ q.
        let n = 100_000;
        let mut acc = 0.0;
        for _ in 0..n {
            for k in 0..d {
                let eta: f64 = StandardNormal.sample(&mut rng);
                let sd = (lv[k] / 2.0).exp();
                let x = mu[k] + sd * eta;
                acc += -0.5 * eta * eta - sd.ln() + 0.5 * x * x;
            }
        }
        let mc = acc / n as f64;
        assert!((mc - closed).abs() < 0.01 * closed, "{mc} vs {closed}");
        Ok(())
    }

    #[test]
    fn half_discriminator_gives_three_ln2() -> Result<()> {
        let half = [0.5; 4];
        assert!((conditional_term_from_probs(&half, &half, &half)? - 3.0 * 2f64.ln()).abs() < 1e-12);
        let zero = t1(&[0.0; 4]);
        let l = DiscriminatorLogits {
            cond_real: zero.clone(),
            cond_wrong: zero.clone(),
            cond_fake: zero.clone(),
            uncond_real: zero.clone(),
            uncond_wrong: zero.clone(),
            uncond_fake: zero.clone(),
        };
        assert!((scalar(&discriminator_loss(&l, 0.0)?)? - 3.0 * 2f64.ln()).abs() < 1e-12);
        assert!((scalar(&discriminator_loss(&l, 0.5)?)? - 4.5 * 2f64.ln()).abs() < 1e-12);
        Ok(())
    }

    #[test]
    fn perfect_discriminator_limit_and_monotonicity() -> Result<()> {
        let v = conditional_term_from_probs(&[1.0 - 1e-12], &[1e-12], &[1e-12])?;
        assert!(v < 1e-10);
        let mut last = f64::INFINITY;
        for p in [0.1, 0.3, 0.5, 0.7, 0.9] {
            let x = conditional_term_from_probs(&[p], &[0.4], &[0.2])?;
            assert!(x < last);
            last = x;
        }
        assert!(matches!(
            conditional_term_from_probs(&[1.0], &[0.5], &[0.5]),
            Err(Error::NotProbability { .. })
        ));
        assert!(unconditional_term_from_probs(&[0.5], &[1.2], &[0.5]).is_err());
        Ok(())
    }

    #[test]
    fn logit_route_matches_probability_route() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut probs = || -> Vec<f64> { (0..6).map(|_| rng.random_range(0.01..0.99)).collect() };
        let (cr, cw, cf, ur, uw, uf) = (probs(), probs(), probs(), probs(), probs(), probs());
        let lg = |v: &[f64]| t1(&v.iter().map(|&p| logit(p)).collect::<Vec<_>>());
        let l = DiscriminatorLogits {
            cond_real: lg(&cr),
            cond_wrong: lg(&cw),
            cond_fake: lg(&cf),
            uncond_real: lg(&ur),
            uncond_wrong: lg(&uw),
            uncond_fake: lg(&uf),
        };
        let want = conditional_term_from_probs(&cr, &cw, &cf)? + 0.5 * unconditional_term_from_probs(&ur, &uw, &uf)?;
        assert!((scalar(&discriminator_loss(&l, 0.5)?)? - want).abs() < 1e-9);
        Ok(())
    }

    #[test]
    fn discriminator_loss_is_batch_permutation_invariant() -> Result<()> {
        let a = [0.3, -1.0, 2.0, 0.1];
        let b = [2.0, 0.1, 0.3, -1.0];
        let make = |v: &[f64]| DiscriminatorLogits {
            cond_real: t1(v),
            cond_wrong: t1(&v.iter().map(|x| -x).collect::<Vec<_>>()),
            cond_fake: t1(v),
            uncond_real: t1(v),
            uncond_wrong: t1(v),
            uncond_fake: t1(v),
        };
        let x = scalar(&discriminator_loss(&make(&a), 0.5)?)?;
        let y = scalar(&discriminator_loss(&make(&b), 0.5)?)?;
        assert!((x - y).abs() < 1e-12);
        Ok(())
    }

    fn scale(cond: &[f64], uncond: &[f64], cos: &[f64]) -> GeneratorScale {
        GeneratorScale {
            cond_fake: t1(cond),
            uncond_fake: t1(uncond),
            cycle_similarity: t1(cos),
        }
    }

    #[test]
    fn generator_loss_reductions() -> Result<()> {
        let kl = t1(&[0.7]).squeeze(0)?;
        let scales = vec![
            scale(&[0.2, -0.3], &[1.0, 0.0], &[1.0, 1.0]),
            scale(&[0.5, 0.1], &[0.0, 0.0], &[1.0, 1.0]),
            scale(&[-1.0, 2.0], &[0.3, 0.3], &[1.0, 1.0]),
        ];
        let zeroed = LossWeights {
            uncond: 0.0,
            ca: 0.0,
            cycle: 0.0,
        };
        let (_, parts) = generator_loss(&scales, &kl, &zeroed)?;
        let plain: f64 = [[0.2, -0.3], [0.5, 0.1], [-1.0, 2.0]]
            .iter()
            .map(|s| s.iter().map(|&l: &f64| (1.0 + (-l).exp()).ln()).sum::<f64>() / 2.0)
            .sum();
        assert!((parts.total - plain).abs() < 1e-12);
        let only_cycle = LossWeights {
            uncond: 0.0,
            ca: 0.0,
            cycle: 1.0,
        };
        let (_, parts) = generator_loss(&scales, &kl, &only_cycle)?;
        assert!((parts.total - plain - (-3.0)).abs() < 1e-12);
        assert!(generator_loss(&scales[..2], &kl, &only_cycle).is_err());
        Ok(())
    }

    #[test]
    fn generator_loss_matches_term_by_term_sum() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut v = |n: usize, lo: f64, hi: f64| -> Vec<f64> { (0..n).map(|_| rng.random_range(lo..hi)).collect() };
        let raw: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> =
            (0..3).map(|_| (v(5, -3.0, 3.0), v(5, -3.0, 3.0), v(5, -1.0, 1.0))).collect();
        let kl_value = v(1, 0.0, 4.0)[0];
        let w = LossWeights {
            uncond: 0.5,
            ca: 0.02,
            cycle: 1.0,
        };
        let scales: Vec<GeneratorScale> = raw.iter().map(|(a, b, c)| scale(a, b, c)).collect();
        let (_, parts) = generator_loss(&scales, &t1(&[kl_value]).squeeze(0)?, &w)?;
        let neg_ln_sigmoid = |l: f64| (1.0 + (-l).exp()).ln();
        let mean = |x: &[f64]| x.iter().sum::<f64>() / x.len() as f64;
        let mut want = 0.0;
        for (a, b, c) in &raw {
            want += mean(&a.iter().map(|&l| neg_ln_sigmoid(l)).collect::<Vec<_>>());
            want += 0.5 * mean(&b.iter().map(|&l| neg_ln_sigmoid(l)).collect::<Vec<_>>());
            want -= mean(c);
        }
        want += 0.02 * kl_value;
        assert!((parts.total - want).abs() < 1e-9);
        Ok(())
    }

    #[test]
    fn gradients_match_finite_differences() -> Result<()> {
        let dev = Device::Cpu;
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut v = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.random_range(-1.0..1.0)).collect() };
        let (mu, lv, qr, qf) = (v(8), v(8), v(8), v(8));
        let rel = |a: f64, b: f64| (a - b).abs() / a.abs().max(b.abs()).max(1e-8);
        let check = |f: &dyn Fn(&Tensor) -> Result<Tensor>, x0: &[f64]| -> Result<()> {
            let var = Var::from_tensor(&Tensor::from_vec(x0.to_vec(), (2, 4), &dev)?)?;
            let g: Vec<f64> = f(var.as_tensor())?.backward()?.get(&var).unwrap().flatten_all()?.to_vec1()?;
            let eps = 1e-6;
            for i in 0..x0.len() {
                let (mut a, mut b) = (x0.to_vec(), x0.to_vec());
                a[i] += eps;
                b[i] -= eps;
                let fa = scalar(&f(&Tensor::from_vec(a, (2, 4), &dev)?)?)?;
                let fb = scalar(&f(&Tensor::from_vec(b, (2, 4), &dev)?)?)?;
                assert!(rel((fa - fb) / (2.0 * eps), g[i]) < 1e-4);
            }
            Ok(())
        };
        let lv_t = Tensor::from_vec(lv.clone(), (2, 4), &dev)?;
        let mu_t = Tensor::from_vec(mu.clone(), (2, 4), &dev)?;
        check(&|m| kl_standard_normal(m, &lv_t), &mu)?;
        check(&|l| kl_standard_normal(&mu_t, l), &lv)?;
        let qr_t = Tensor::from_vec(qr.clone(), (2, 4), &dev)?;
        check(&|q| Ok(cycle_similarity(&qr_t, q)?.sum_all()?), &qf)?;
        Ok(())
    }

    #[test]
    fn cycle_similarity_bounds() -> Result<()> {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut rng)).collect();
        let b: Vec<f64> = (0..40).map(|_| StandardNormal.sample(&mut rng)).collect();
        let s: Vec<f64> = cycle_similarity(
            &Tensor::from_vec(a.clone(), (10, 4), &Device::Cpu)?,
            &Tensor::from_vec(b, (10, 4), &Device::Cpu)?,
        )?
        .to_vec1()?;
        assert!(s.iter().all(|x| (-1.0..=1.0).contains(x)));
        let same: Vec<f64> = cycle_similarity(
            &Tensor::from_vec(a.clone(), (10, 4), &Device::Cpu)?,
            &Tensor::from_vec(a, (10, 4), &Device::Cpu)?,
        )?
        .to_vec1()?;
        assert!(same.iter().all(|x| (x - 1.0).abs() < 1e-12));
        Ok(())
    }

    proptest::proptest! {
        #[test]
        fn kl_is_nonnegative_and_zero_only_at_standard_normal(
            mu in proptest::collection::vec(-3.0f64..3.0, 1..12),
            lv_seed in proptest::collection::vec(-3.0f64..3.0, 12),
            zero_mask in proptest::collection::vec(proptest::bool::ANY, 12),
        ) {
            let d = mu.len();
            let mu: Vec<f64> = mu.iter().zip(&zero_mask).map(|(&m, &z)| if z { 0.0 } else { m }).collect();
            let lv: Vec<f64> = lv_seed[..d].iter().zip(&zero_mask).map(|(&l, &z)| if z { 0.0 } else { l }).collect();
            let kl = scalar(&kl_standard_normal(
                &Tensor::from_vec(mu.clone(), (1, d), &Device::Cpu).unwrap(),
                &Tensor::from_vec(lv.clone(), (1, d), &Device::Cpu).unwrap(),
            ).unwrap()).unwrap();
            proptest::prop_assert!(kl >= 0.0);
            let standard = mu.iter().chain(&lv).all(|&v| v == 0.0);
            proptest::prop_assert_eq!(kl == 0.0, standard);
        }
    }
}
