//! In-memory image banks, tensor conversion and PNG grids.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{Device, Tensor};
use image::{Rgb, RgbImage};
use rayon::prelude::*;

use crate::{Error, Result};

pub fn load_png(path: &Path) -> Result<RgbImage> {
    if !path.exists() {
        return Err(Error::io(path, std::io::Error::new(std::io::ErrorKind::NotFound, "image not found")));
    }
    Ok(image::open(path)?.to_rgb8())
}

pub fn save_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save(path)?;
    Ok(())
}

/// Square resize. Integer shrink factors use exact box averaging with
/// round-half-up; anything else falls back to a triangle filter.
pub fn resize_square(img: &RgbImage, size: usize) -> RgbImage {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if w == size && h == size {
        return img.clone();
    }
    if w == h && w % size == 0 {
        let f = w / size;
        let area = (f * f) as u32;
        let mut out = RgbImage::new(size as u32, size as u32);
        for y in 0..size {
            for x in 0..size {
                let mut acc = [0u32; 3];
                for dy in 0..f {
                    for dx in 0..f {
                        let p = img.get_pixel((x * f + dx) as u32, (y * f + dy) as u32);
                        for c in 0..3 {
                            acc[c] += p[c] as u32;
                        }
                    }
                }
                out.put_pixel(x as u32, y as u32, Rgb(acc.map(|a| ((a + area / 2) / area) as u8)));
            }
        }
        return out;
    }
    image::imageops::resize(img, size as u32, size as u32, image::imageops::FilterType::Triangle)
}

fn to_chw(img: &RgbImage) -> Vec<u8> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut out = vec![0u8; 3 * w * h];
    for (x, y, p) in img.enumerate_pixels() {
        for c in 0..3 {
            out[c * w * h + y as usize * w + x as usize] = p[c];
        }
    }
    out
}

/// `[3, H, W]` in `[-1, 1]`.
pub fn image_to_tensor(img: &RgbImage) -> Result<Tensor> {
    let (w, h) = (img.width() as usize, img.height() as usize);
    let data: Vec<f32> = to_chw(img).into_iter().map(|v| v as f32 / 127.5 - 1.0).collect();
    Ok(Tensor::from_vec(data, (3, h, w), &Device::Cpu)?)
}

/// Converts `[B, 3, H, W]` values in `[-1, 1]` to 8-bit images.
pub fn tensor_to_images(t: &Tensor) -> Result<Vec<RgbImage>> {
    let (b, c, h, w) = t.dims4()?;
    if c != 3 {
        return Err(Error::DimensionMismatch(format!("expected 3 channels, got {c}")));
    }
    let data: Vec<f32> = t.to_dtype(candle_core::DType::F32)?.flatten_all()?.to_vec1()?;
    let plane = h * w;
    Ok((0..b)
        .map(|i| {
            let base = i * 3 * plane;
            RgbImage::from_fn(w as u32, h as u32, |x, y| {
                let at = |ch: usize| {
                    let v = data[base + ch * plane + y as usize * w + x as usize];
                    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
                };
                Rgb([at(0), at(1), at(2)])
            })
        })
        .collect())
}

/// Lays out rows of equally sized images with a `pad`-pixel gutter.
pub fn grid(rows: &[Vec<RgbImage>], pad: u32) -> Result<RgbImage> {
    let first = rows
        .iter()
        .flat_map(|r| r.first())
        .next()
        .ok_or_else(|| Error::InvalidArgument("empty grid".into()))?;
    let (w, h) = first.dimensions();
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0) as u32;
    let mut out = RgbImage::from_pixel(
        cols * (w + pad) + pad,
        rows.len() as u32 * (h + pad) + pad,
        Rgb([255, 255, 255]),
    );
    for (r, row) in rows.iter().enumerate() {
        for (c, img) in row.iter().enumerate() {
            if img.dimensions() != (w, h) {
                return Err(Error::DimensionMismatch("grid images differ in size".into()));
            }
            image::imageops::replace(
                &mut out,
                img,
                (pad + c as u32 * (w + pad)) as i64,
                (pad + r as u32 * (h + pad)) as i64,
            );
        }
    }
    Ok(out)
}

/// Images held as 8-bit CHW planes at several square sizes.
#[derive(Debug, Clone)]
pub struct ImageBank {
    len: usize,
    planes: BTreeMap<usize, Vec<u8>>,
}

impl ImageBank {
    pub fn from_images(images: &[RgbImage], sizes: &[usize]) -> Self {
        let planes = sizes
            .iter()
            .map(|&s| {
                let data: Vec<u8> = images.par_iter().flat_map_iter(|img| to_chw(&resize_square(img, s))).collect();
                (s, data)
            })
            .collect();
        Self {
            len: images.len(),
            planes,
        }
    }

    /// Loads every path; paths that cannot be read are skipped with a
    /// warning and reported by position.
    pub fn load(paths: &[std::path::PathBuf], sizes: &[usize]) -> (Self, Vec<usize>) {
        let loaded: Vec<Option<RgbImage>> = paths
            .par_iter()
            .map(|p| match load_png(p) {
                Ok(img) => Some(img),
                Err(e) => {
                    log::warn!("skipping image {}: {e}", p.display());
                    None
                }
            })
            .collect();
        let missing = loaded.iter().enumerate().filter(|(_, x)| x.is_none()).map(|(i, _)| i).collect();
        let images: Vec<RgbImage> = loaded.into_iter().flatten().collect();
        (Self::from_images(&images, sizes), missing)
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn sizes(&self) -> Vec<usize> {
        self.planes.keys().copied().collect()
    }

    /// `[B, 3, s, s]` f32 batch in `[-1, 1]`.
    pub fn batch(&self, indices: &[usize], size: usize) -> Result<Tensor> {
        let data = self
            .planes
            .get(&size)
            .ok_or_else(|| Error::InvalidArgument(format!("image bank has no {size}px plane")))?;
        let n = 3 * size * size;
        let mut out = Vec::with_capacity(indices.len() * n);
        for &i in indices {
            if i >= self.len {
                return Err(Error::InvalidArgument(format!("image index {i} out of range {}", self.len)));
            }
            out.extend(data[i * n..(i + 1) * n].iter().map(|&v| v as f32 / 127.5 - 1.0));
        }
        Ok(Tensor::from_vec(out, (indices.len(), 3, size, size), &Device::Cpu)?)
    }

    pub fn image(&self, i: usize, size: usize) -> Result<RgbImage> {
        tensor_to_images(&self.batch(&[i], size)?).map(|mut v| v.remove(0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn checker(size: u32) -> RgbImage {
        RgbImage::from_fn(size, size, |x, y| {
            if (x + y) % 2 == 0 {
                Rgb([255, 0, 10])
            } else {
                Rgb([1, 100, 20])
            }
        })
    }

    #[test]
    fn tensor_round_trip_is_lossless() {
        let img = checker(6);
        let t = image_to_tensor(&img).unwrap().unsqueeze(0).unwrap();
        assert_eq!(tensor_to_images(&t).unwrap()[0], img);
    }

    #[test]
    fn box_downsample_averages() {
        let small = resize_square(&checker(4), 2);
        // (255 + 1 + 1 + 255) / 4 = 128
        assert_eq!(small.get_pixel(0, 0), &Rgb([128, 50, 15]));
    }

    #[test]
    fn bank_batches_and_png_io() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a/b.png");
        save_png(&checker(8), &path).unwrap();
        let (bank, missing) = ImageBank::load(&[path.clone(), dir.path().join("gone.png")], &[8, 4]);
        assert_eq!(missing, vec![1]);
        assert_eq!(bank.len(), 1);
        assert_eq!(bank.batch(&[0, 0], 4).unwrap().dims(), &[2, 3, 4, 4]);
        assert_eq!(bank.image(0, 8).unwrap(), checker(8));
        assert!(bank.batch(&[0], 16).is_err());
    }

    #[test]
    fn grid_layout() {
        let g = grid(&[vec![checker(4), checker(4)], vec![checker(4)]], 2).unwrap();
        assert_eq!(g.dimensions(), (2 * 6 + 2, 2 * 6 + 2));
        assert_eq!(g.get_pixel(2, 2), checker(4).get_pixel(0, 0));
    }
}
