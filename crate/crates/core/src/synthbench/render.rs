use std::f64::consts::PI;

use image::{Rgb, RgbImage};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::{Error, Result};

const SUPERSAMPLE: usize = 4;
const TABLE: [u8; 3] = [72, 58, 46];
const SLOT_RADIUS: f64 = 0.29;
const PLATE_RADIUS: f64 = 0.46;
const JITTER: f64 = 0.01;

/// One renderable meal: the glyphs present and the seed for its layout
/// nuisance (jitter, plate shade).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthRecipe {
    pub glyphs: Vec<usize>,
    pub layout_seed: u64,
}

/// Saturated hue-spaced colour for glyph `k` of `num_glyphs`.
pub fn signature_color(k: usize, num_glyphs: usize) -> [u8; 3] {
    let h = 6.0 * k as f64 / num_glyphs as f64;
    let x = 1.0 - (h % 2.0 - 1.0).abs();
    let (r, g, b) = match h as usize {
        0 => (1.0, x, 0.0),
        1 => (x, 1.0, 0.0),
        2 => (0.0, 1.0, x),
        3 => (0.0, x, 1.0),
        4 => (x, 0.0, 1.0),
        _ => (1.0, 0.0, x),
    };
    [r, g, b].map(|c: f64| (c * 255.0).round() as u8)
}

fn inside_shape(shape: usize, u: f64, v: f64) -> bool {
    match shape % 8 {
        0 => u * u + v * v <= 1.0,
        1 => u.abs().max(v.abs()) <= 0.8,
        2 => (-0.9..=0.7).contains(&v) && u.abs() <= (v + 0.9) / 1.6 * 0.9,
        3 => u.abs() + v.abs() <= 1.0,
        4 => (u.abs() <= 0.3 && v.abs() <= 0.9) || (v.abs() <= 0.3 && u.abs() <= 0.9),
        5 => (0.25..=1.0).contains(&(u * u + v * v)),
        6 => u.abs() <= 0.95 && v.abs() <= 0.4,
        _ => (u / 0.55).powi(2) + (v / 0.95).powi(2) <= 1.0,
    }
}

struct Placement {
    glyph: usize,
    cx: f64,
    cy: f64,
}

pub fn glyph_radius(num_glyphs: usize) -> f64 {
    (0.8 * SLOT_RADIUS * (PI / num_glyphs.max(2) as f64).sin()).min(0.1)
}

/// Renders a recipe at `size` x `size`. Every glyph has a fixed slot on the
/// plate; the layout seed only jitters positions and shades the plate.
pub fn render(recipe: &SynthRecipe, num_glyphs: usize, size: usize) -> Result<RgbImage> {
    if size == 0 {
        return Err(Error::InvalidArgument("render size must be positive".into()));
    }
    if let Some(&g) = recipe.glyphs.iter().find(|&&g| g >= num_glyphs) {
        return Err(Error::InvalidArgument(format!("unknown glyph id {g} (K = {num_glyphs})")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(recipe.layout_seed);
    let shade: u8 = rng.random_range(210..=240);
    let plate = [shade, shade, shade.saturating_sub(4)];
    let mut jitter = vec![(0.0, 0.0); num_glyphs];
    for j in jitter.iter_mut() {
        *j = (rng.random_range(-JITTER..=JITTER), rng.random_range(-JITTER..=JITTER));
    }
    let placements: Vec<Placement> = recipe
        .glyphs
        .iter()
        .map(|&g| {
            let theta = 2.0 * PI * g as f64 / num_glyphs as f64 - PI / 2.0;
            Placement {
                glyph: g,
                cx: 0.5 + SLOT_RADIUS * theta.cos() + jitter[g].0,
                cy: 0.5 + SLOT_RADIUS * theta.sin() + jitter[g].1,
            }
        })
        .collect();
    let r = glyph_radius(num_glyphs);
    let colors: Vec<[u8; 3]> = (0..num_glyphs).map(|k| signature_color(k, num_glyphs)).collect();

    let fine = size * SUPERSAMPLE;
    let sample = |fx: usize, fy: usize| -> [u8; 3] {
        let x = (fx as f64 + 0.5) / fine as f64;
        let y = (fy as f64 + 0.5) / fine as f64;
        for p in &placements {
            let (u, v) = ((x - p.cx) / r, (y - p.cy) / r);
            if u.abs() <= 1.0 && v.abs() <= 1.0 && inside_shape(p.glyph, u, v) {
                return colors[p.glyph];
            }
        }
        if (x - 0.5).powi(2) + (y - 0.5).powi(2) <= PLATE_RADIUS * PLATE_RADIUS {
            plate
        } else {
            TABLE
        }
    };
    let area = (SUPERSAMPLE * SUPERSAMPLE) as u32;
    Ok(RgbImage::from_fn(size as u32, size as u32, |x, y| {
        let mut acc = [0u32; 3];
        for dy in 0..SUPERSAMPLE {
            for dx in 0..SUPERSAMPLE {
                let c = sample(x as usize * SUPERSAMPLE + dx, y as usize * SUPERSAMPLE + dy);
                for i in 0..3 {
                    acc[i] += c[i] as u32;
                }
            }
        }
        Rgb(acc.map(|a| ((a + area / 2) / area) as u8))
    }))
}
