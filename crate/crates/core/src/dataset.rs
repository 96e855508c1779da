//! Paired HR/LR data: directory loading and a synthetic generator.

use std::fs;
use std::path::{Path, PathBuf};

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};

use crate::error::{Error, Result};
use crate::io::load_image;
use crate::resample::{avg_pool, bicubic_upscale};
use crate::tensor::{ImageTensor, MaskStack};

/// A clean image and its conditioning image on the same grid.
///
/// `y` is the low-resolution observation bicubically upscaled to the size of
/// `x0`, which is the grid the diffusion state lives on.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingPair {
    pub name: String,
    pub x0: ImageTensor,
    pub y: ImageTensor,
}

/// Upscales `lr` onto the grid of `hr`; the size ratio must be a whole number.
pub fn condition_on_grid(lr: &ImageTensor, hr: &ImageTensor) -> Result<ImageTensor> {
    if lr.channels() != hr.channels() {
        return Err(Error::shape(hr.shape(), lr.shape()));
    }
    let factor = hr.height() / lr.height();
    if factor == 0 || lr.height() * factor != hr.height() || lr.width() * factor != hr.width() {
        return Err(Error::InvalidArgument(format!(
            "LR {}x{} is not an integer downscale of HR {}x{}",
            lr.height(),
            lr.width(),
            hr.height(),
            hr.width()
        )));
    }
    bicubic_upscale(lr, factor)
}

/// Loads every `<name>_hr.png` / `<name>_lr.png` pair in `dir`, sorted by name.
pub fn load_pair_dir(dir: impl AsRef<Path>) -> Result<Vec<TrainingPair>> {
    let dir = dir.as_ref();
    let mut names: Vec<String> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok())
        .filter_map(|e| {
            e.file_name()
                .to_str()
                .and_then(|n| n.strip_suffix("_hr.png"))
                .map(str::to_owned)
        })
        .collect();
    names.sort();
    let mut pairs = Vec::with_capacity(names.len());
    for name in names {
        let lr_path: PathBuf = dir.join(format!("{name}_lr.png"));
        if !lr_path.exists() {
            return Err(Error::Format {
                path: lr_path,
                reason: "missing LR partner".into(),
            });
        }
        let x0 = load_image(dir.join(format!("{name}_hr.png")))?;
        let lr = load_image(&lr_path)?;
        let y = condition_on_grid(&lr, &x0)?;
        pairs.push(TrainingPair { name, x0, y });
    }
    if pairs.is_empty() {
        return Err(Error::Format {
            path: dir.to_path_buf(),
            reason: "no *_hr.png/*_lr.png pairs found".into(),
        });
    }
    Ok(pairs)
}

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

/// Block-average downscale of every channel.
pub fn downscale(img: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    let planes = MaskStack::new(img.channels(), img.height(), img.width(), img.data().to_vec(), false)?;
    let pooled = avg_pool(&planes, factor)?;
    ImageTensor::new(img.channels(), pooled.height(), pooled.width(), pooled.data().to_vec())
}

/// Synthetic scene: a linear gradient background with a few flat discs.
pub fn synthetic_scene(size: usize, channels: usize, seed: u64) -> Result<ImageTensor> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base: Vec<f64> = (0..channels).map(|_| 0.2 + 0.5 * uniform(&mut rng)).collect();
    let (gy, gx) = (0.3 * (uniform(&mut rng) - 0.5), 0.3 * (uniform(&mut rng) - 0.5));
    let blobs: Vec<(f64, f64, f64, Vec<f64>)> = (0..3)
        .map(|_| {
            let cy = uniform(&mut rng) * size as f64;
            let cx = uniform(&mut rng) * size as f64;
            let r = (0.15 + 0.2 * uniform(&mut rng)) * size as f64;
            let col = (0..channels).map(|_| uniform(&mut rng)).collect();
            (cy, cx, r, col)
        })
        .collect();
    let s = size as f64;
    ImageTensor::from_fn(channels, size, size, |c, y, x| {
        let (fy, fx) = (y as f64 + 0.5, x as f64 + 0.5);
        let mut v = base[c] + gy * (fy / s - 0.5) + gx * (fx / s - 0.5);
        for (cy, cx, r, col) in &blobs {
            if (fy - cy).powi(2) + (fx - cx).powi(2) <= r * r {
                v = col[c];
            }
        }
        v.clamp(0.0, 1.0)
    })
}

/// `count` synthetic pairs; the LR observation is a `factor`× block downscale.
pub fn synthetic_pairs(
    count: usize,
    size: usize,
    channels: usize,
    factor: usize,
    seed: u64,
) -> Result<Vec<(ImageTensor, ImageTensor)>> {
    (0..count)
        .map(|i| {
            let hr = synthetic_scene(size, channels, seed.wrapping_mul(1_000_003).wrapping_add(i as u64))?;
            let lr = downscale(&hr, factor)?;
            Ok((hr, lr))
        })
        .collect()
}

/// Synthetic pairs already conditioned onto the HR grid.
pub fn synthetic_training_set(count: usize, size: usize, channels: usize, seed: u64) -> Result<Vec<TrainingPair>> {
    synthetic_pairs(count, size, channels, 2, seed)?
        .into_iter()
        .enumerate()
        .map(|(i, (x0, lr))| {
            let y = condition_on_grid(&lr, &x0)?;
            Ok(TrainingPair {
                name: format!("synthetic_{i:03}"),
                x0,
                y,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_deterministic_and_in_range() {
        let a = synthetic_training_set(3, 8, 3, 5).unwrap();
        let b = synthetic_training_set(3, 8, 3, 5).unwrap();
        assert_eq!(a, b);
        for p in &a {
            assert_eq!(p.x0.shape(), p.y.shape());
            let (lo, hi) = p.x0.min_max();
            assert!(lo >= 0.0 && hi <= 1.0);
        }
        assert_ne!(a[0].x0, a[1].x0);
    }

    #[test]
    fn conditioning_requires_integer_ratio() {
        let hr = ImageTensor::zeros(1, 8, 8).unwrap();
        assert!(condition_on_grid(&ImageTensor::zeros(1, 3, 3).unwrap(), &hr).is_err());
        assert!(condition_on_grid(&ImageTensor::zeros(1, 4, 2).unwrap(), &hr).is_err());
        let y = condition_on_grid(&ImageTensor::zeros(1, 4, 4).unwrap(), &hr).unwrap();
        assert_eq!(y.shape(), hr.shape());
    }
}
