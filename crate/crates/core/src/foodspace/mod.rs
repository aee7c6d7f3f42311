//! The association model: ingredient and image encoders into a shared
//! 1024-d space, compared by cosine similarity.

mod image;
mod model;
mod text;
mod train;

use candle_core::{Tensor, D};

pub use image::ImageEncoder;
pub use model::{AssocConfig, AssociationModel, AttentionRecord, EncoderTrace};
pub use text::{pad_sequences, TextEncoder};
pub use train::{pair_medr, train_association, AssocTrainConfig, EpochLog, TrainingLog, TrainingPair};

use crate::{Error, Result};

pub const FOODSPACE_DIM: usize = 1024;
pub const HIDDEN_DIM: usize = 300;
pub const DEFAULT_MARGIN: f64 = 0.3;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::DimensionMismatch(format!("{} vs {}", a.len(), b.len())));
    }
    let (na, nb) = (dot(a, a).sqrt(), dot(b, b).sqrt());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// `min(s(p+,q+) - s(p+,q-) - eps, 0) + min(s(p+,q+) - s(p-,q+) - eps, 0)`.
/// Training maximizes this value.
pub fn triplet_objective(p_pos: &[f64], q_pos: &[f64], q_neg: &[f64], p_neg: &[f64], margin: f64) -> Result<f64> {
    if margin < 0.0 {
        return Err(Error::InvalidArgument(format!("margin {margin} is negative")));
    }
    let pos = cosine_similarity(p_pos, q_pos)?;
    let a = pos - cosine_similarity(p_pos, q_neg)? - margin;
    let b = pos - cosine_similarity(p_neg, q_pos)? - margin;
    Ok(a.min(0.0) + b.min(0.0))
}

/// Row-wise cosine similarity of `[B, D]` tensors.
pub fn cosine_rows(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let na = a.sqr()?.sum(D::Minus1)?.sqrt()?;
    let nb = b.sqr()?.sum(D::Minus1)?.sqrt()?;
    let min = na.minimum(&nb)?.min_all()?.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?;
    if min == 0.0 {
        return Err(Error::ZeroNorm);
    }
    Ok(((a * b)?.sum(D::Minus1)? / (na * nb)?)?)
}

/// Batched objective, one value per row.
pub fn triplet_objective_tensor(
    p_pos: &Tensor,
    q_pos: &Tensor,
    q_neg: &Tensor,
    p_neg: &Tensor,
    margin: f64,
) -> Result<Tensor> {
    let pos = cosine_rows(p_pos, q_pos)?;
    let a = ((&pos - cosine_rows(p_pos, q_neg)?)? - margin)?;
    let b = ((&pos - cosine_rows(p_neg, q_pos)?)? - margin)?;
    let zero = a.zeros_like()?;
    Ok((a.minimum(&zero)? + b.minimum(&zero)?)?)
}

/// Softmax attention over `h: [B, N, D]` with context `u: [D]`.
/// `mask: [B, N]` holds 1 for real positions and 0 for padding.
/// Returns the pooled `[B, D]` states and the `[B, N]` weights.
pub fn attention_pool(h: &Tensor, u: &Tensor, mask: Option<&Tensor>) -> Result<(Tensor, Tensor)> {
    let (b, n, d) = h.dims3()?;
    if u.dims1()? != d {
        return Err(Error::DimensionMismatch(format!("context has {} dims, states have {d}", u.dims1()?)));
    }
    let mut logits = h.broadcast_matmul(&u.reshape((d, 1))?)?.reshape((b, n))?;
    if let Some(m) = mask {
        let penalty = ((m.to_dtype(h.dtype())? - 1.0)? * 1e9)?;
        logits = (logits + penalty)?;
    }
    let weights = candle_nn::ops::softmax(&logits, D::Minus1)?;
    let pooled = weights.unsqueeze(1)?.matmul(h)?.squeeze(1)?;
    Ok((pooled, weights))
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{DType, Device, Var};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn unit(v: &[f64]) -> Vec<f64> {
        let n = dot(v, v).sqrt();
        v.iter().map(|x| x / n).collect()
    }

    #[test]
    fn triplet_edge_cases() {
        let e = unit(&[1.0, 2.0, 3.0]);
        assert!((triplet_objective(&e, &e, &e, &e, 0.3).unwrap() + 0.6).abs() < 1e-12);
        let x = [1.0, 0.0, 0.0];
        let y = [0.0, 1.0, 0.0];
        assert_eq!(triplet_objective(&x, &x, &y, &y, 0.3).unwrap(), 0.0);
        assert!(matches!(triplet_objective(&x, &[0.0; 3], &y, &y, 0.3), Err(Error::ZeroNorm)));
    }

    #[test]
    fn tensor_objective_matches_scalar() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let rows: Vec<Vec<f64>> = (0..4 * 6).map(|_| (0..16).map(|_| rng.random::<f64>() - 0.5).collect()).collect();
        let t = |k: usize| {
            let flat: Vec<f64> = rows[k * 6..(k + 1) * 6].concat();
            Tensor::from_vec(flat, (6, 16), &Device::Cpu).unwrap()
        };
        let v: Vec<f64> = triplet_objective_tensor(&t(0), &t(1), &t(2), &t(3), 0.3).unwrap().to_vec1().unwrap();
        for i in 0..6 {
            let want = triplet_objective(&rows[i], &rows[6 + i], &rows[12 + i], &rows[18 + i], 0.3).unwrap();
            assert!((v[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_examples() -> Result<()> {
        let dev = Device::Cpu;
        // Logits (0, ln 3) -> (1/4, 3/4).
        let h = Tensor::new(&[[[0.0f64, 1.0], [3f64.ln(), 1.0]]], &dev)?;
        let u = Tensor::new(&[1.0f64, 0.0], &dev)?;
        let (pooled, w) = attention_pool(&h, &u, None)?;
        let w: Vec<f64> = w.squeeze(0)?.to_vec1()?;
        assert!((w[0] - 0.25).abs() < 1e-12 && (w[1] - 0.75).abs() < 1e-12);
        let p: Vec<f64> = pooled.squeeze(0)?.to_vec1()?;
        assert!((p[0] - 0.75 * 3f64.ln()).abs() < 1e-12 && (p[1] - 1.0).abs() < 1e-12);
        // Orthogonal context -> uniform.
        let h = Tensor::new(&[[[0.0f64, 1.0], [0.0, 2.0], [0.0, -4.0]]], &dev)?;
        let (_, w) = attention_pool(&h, &u, None)?;
        for x in w.squeeze(0)?.to_vec1::<f64>()? {
            assert!((x - 1.0 / 3.0).abs() < 1e-12);
        }
        // N = 1 -> weight 1, pooled = h_1.
        let h1 = Tensor::new(&[[[0.5f64, -2.0]]], &dev)?;
        let (p, w) = attention_pool(&h1, &u, None)?;
        assert_eq!(w.flatten_all()?.to_vec1::<f64>()?, vec![1.0]);
        assert_eq!(p.flatten_all()?.to_vec1::<f64>()?, vec![0.5, -2.0]);
        // Padding gets no weight.
        let mask = Tensor::new(&[[1.0f64, 1.0, 0.0]], &dev)?;
        let (_, w) = attention_pool(&h, &u, Some(&mask))?;
        assert_eq!(w.squeeze(0)?.to_vec1::<f64>()?[2], 0.0);
        Ok(())
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
    }

    #[test]
    fn attention_gradient_matches_finite_differences() -> Result<()> {
        let dev = Device::Cpu;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let hv: Vec<f64> = (0..2 * 4 * 5).map(|_| rng.random::<f64>() - 0.5).collect();
        let uv: Vec<f64> = (0..5).map(|_| rng.random::<f64>() - 0.5).collect();
        let coef = Tensor::from_vec((0..10).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(), (2, 5), &dev)?;
        let f = |h: &Tensor, u: &Tensor| -> Result<Tensor> {
            let (p, _) = attention_pool(h, u, None)?;
            Ok((p * &coef)?.sum_all()?)
        };
        let h = Var::from_tensor(&Tensor::from_vec(hv.clone(), (2, 4, 5), &dev)?)?;
        let u = Var::from_tensor(&Tensor::from_vec(uv.clone(), 5, &dev)?)?;
        let grads = f(h.as_tensor(), u.as_tensor())?.backward()?;
        let gh: Vec<f64> = grads.get(&h).unwrap().flatten_all()?.to_vec1()?;
        let gu: Vec<f64> = grads.get(&u).unwrap().to_vec1()?;
        let eps = 1e-6;
        for i in 0..hv.len() {
            let (mut a, mut b) = (hv.clone(), hv.clone());
            a[i] += eps;
            b[i] -= eps;
            let fa = f(&Tensor::from_vec(a, (2, 4, 5), &dev)?, u.as_tensor())?.to_scalar::<f64>()?;
            let fb = f(&Tensor::from_vec(b, (2, 4, 5), &dev)?, u.as_tensor())?.to_scalar::<f64>()?;
            assert!(rel_err((fa - fb) / (2.0 * eps), gh[i]) < 1e-4);
        }
        for i in 0..uv.len() {
            let (mut a, mut b) = (uv.clone(), uv.clone());
            a[i] += eps;
            b[i] -= eps;
            let fa = f(h.as_tensor(), &Tensor::from_vec(a, 5, &dev)?)?.to_scalar::<f64>()?;
            let fb = f(h.as_tensor(), &Tensor::from_vec(b, 5, &dev)?)?.to_scalar::<f64>()?;
            assert!(rel_err((fa - fb) / (2.0 * eps), gu[i]) < 1e-4);
        }
        Ok(())
    }

    #[test]
    fn objective_gradient_wrt_anchor_matches_finite_differences() -> Result<()> {
        let dev = Device::Cpu;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(8);
        let mut make = || -> Vec<f64> { (0..3 * 7).map(|_| rng.random::<f64>() - 0.5).collect() };
        let (pv, q, qn, pn) = (make(), make(), make(), make());
        let t = |v: &[f64]| Tensor::from_vec(v.to_vec(), (3, 7), &dev).unwrap();
        let f = |p: &Tensor| -> Result<Tensor> {
            Ok(triplet_objective_tensor(p, &t(&q), &t(&qn), &t(&pn), 0.3)?.neg()?.sum_all()?)
        };
        let p = Var::from_tensor(&t(&pv))?;
        let g: Vec<f64> = f(p.as_tensor())?.backward()?.get(&p).unwrap().flatten_all()?.to_vec1()?;
        let eps = 1e-6;
        for i in 0..pv.len() {
            let (mut a, mut b) = (pv.clone(), pv.clone());
            a[i] += eps;
            b[i] -= eps;
            let fd = (f(&t(&a))?.to_scalar::<f64>()? - f(&t(&b))?.to_scalar::<f64>()?) / (2.0 * eps);
            assert!(rel_err(fd, g[i]) < 1e-4 || (fd.abs() < 1e-9 && g[i].abs() < 1e-9), "{fd} vs {}", g[i]);
        }
        assert_eq!(p.dtype(), DType::F64);
        Ok(())
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn objective_is_nonpositive_and_zero_iff_margins_hold(
            v in proptest::collection::vec(-1.0f64..1.0, 16),
            margin in 0.0f64..1.0,
        ) {
            let (a, b, c, d) = (&v[0..4], &v[4..8], &v[8..12], &v[12..16]);
            prop_assume!([a, b, c, d].iter().all(|x| dot(x, x) > 1e-6));
            let val = triplet_objective(a, b, c, d, margin).unwrap();
            prop_assert!(val <= 0.0);
            let pos = cosine_similarity(a, b).unwrap();
            let ok = pos - cosine_similarity(a, c).unwrap() >= margin && pos - cosine_similarity(d, b).unwrap() >= margin;
            prop_assert_eq!(val == 0.0, ok);
        }

        #[test]
        fn cosine_is_scale_invariant(
            v in proptest::collection::vec(-1.0f64..1.0, 8),
            s in 0.001f64..1000.0,
        ) {
            let (a, b) = (&v[0..4], &v[4..8]);
            prop_assume!(dot(a, a) > 1e-6 && dot(b, b) > 1e-6);
            let scaled: Vec<f64> = a.iter().map(|x| x * s).collect();
            prop_assert!((cosine_similarity(&scaled, b).unwrap() - cosine_similarity(a, b).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn attention_weights_form_a_distribution(
            hv in proptest::collection::vec(-3.0f64..3.0, 24),
            uv in proptest::collection::vec(-3.0f64..3.0, 4),
        ) {
            let dev = Device::Cpu;
            let h = Tensor::from_vec(hv, (2, 3, 4), &dev).unwrap();
            let u = Tensor::from_vec(uv, 4, &dev).unwrap();
            let (pooled, w) = attention_pool(&h, &u, None).unwrap();
            let w2: Vec<Vec<f64>> = w.to_vec2().unwrap();
            for row in &w2 {
                prop_assert!(row.iter().all(|&x| x >= 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
            }
            // Pooled equals the explicit weighted sum; permuting positions
            // permutes the weights and leaves the pooled state unchanged.
            let hs: Vec<Vec<Vec<f64>>> = h.to_vec3().unwrap();
            let p: Vec<Vec<f64>> = pooled.to_vec2().unwrap();
            for b in 0..2 {
                for k in 0..4 {
                    let s: f64 = (0..3).map(|i| w2[b][i] * hs[b][i][k]).sum();
                    prop_assert!((s - p[b][k]).abs() < 1e-12);
                }
            }
            let perm = Tensor::new(&[2u32, 0, 1], &dev).unwrap();
            let (pp, wp) = attention_pool(&h.index_select(&perm, 1).unwrap(), &u, None).unwrap();
            let wp: Vec<Vec<f64>> = wp.to_vec2().unwrap();
            let pp: Vec<Vec<f64>> = pp.to_vec2().unwrap();
            for b in 0..2 {
                prop_assert!((wp[b][0] - w2[b][2]).abs() < 1e-12);
                for k in 0..4 {
                    prop_assert!((pp[b][k] - p[b][k]).abs() < 1e-12);
                }
            }
        }
    }
}
