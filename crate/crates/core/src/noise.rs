//! Mask-structured Gaussian noise.
//!
//! Each mask `m` gates an independent standard-normal field `Z_m` drawn from
//! its own counter-based substream. The gated fields are summed and the sum
//! is standardized to zero mean and unit (population) variance over all
//! elements.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, MaskStack, Shape};

/// Master seed for all noise drawn by the pipeline. The substream for mask
/// `m` is ChaCha stream `m` under a key expanded from the master seed, so a
/// mask's noise depends only on `(master_seed, m)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct NoiseSeed(pub u64);

impl NoiseSeed {
    /// Seed for the `index`-th item of a sequence (batch items, dataset images).
    pub fn derive(self, index: u64) -> NoiseSeed {
        NoiseSeed(splitmix64(
            self.0 ^ splitmix64(index.wrapping_add(0x6A09_E667_F3BC_C909)),
        ))
    }

    fn stream(self, stream: u64) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.0);
        rng.set_stream(stream);
        rng
    }
}

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `n` standard normals from one substream via the Box-Muller transform.
pub fn gaussian_stream(seed: NoiseSeed, stream: u64, n: usize) -> Vec<f64> {
    const SCALE: f64 = 1.0 / (1u64 << 53) as f64;
    let mut rng = seed.stream(stream);
    let mut out = Vec::with_capacity(n + 1);
    while out.len() < n {
        // u1 in (0,1] keeps the logarithm finite; u2 in [0,1).
        let u1 = ((rng.next_u64() >> 11) + 1) as f64 * SCALE;
        let u2 = (rng.next_u64() >> 11) as f64 * SCALE;
        let r = (-2.0 * u1.ln()).sqrt();
        let (s, c) = (std::f64::consts::TAU * u2).sin_cos();
        out.push(r * c);
        out.push(r * s);
    }
    out.truncate(n);
    out
}

/// Neumaier-compensated accumulator.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub(crate) fn add(&mut self, v: f64) {
        let t = self.sum + v;
        if self.sum.abs() >= v.abs() {
            self.comp += (self.sum - t) + v;
        } else {
            self.comp += (v - t) + self.sum;
        }
        self.sum = t;
    }

    pub(crate) fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

pub(crate) fn compensated_mean(values: &[f64]) -> f64 {
    let mut acc = CompensatedSum::default();
    values.iter().for_each(|&v| acc.add(v));
    acc.value() / values.len() as f64
}

/// Population mean and standard deviation (two-pass, compensated).
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    let mean = compensated_mean(values);
    let mut acc = CompensatedSum::default();
    values.iter().for_each(|&v| acc.add((v - mean) * (v - mean)));
    (mean, (acc.value() / values.len() as f64).sqrt())
}

fn check_channels(channels: usize) -> Result<()> {
    if channels != 1 && channels != 3 {
        return Err(Error::InvalidArgument(format!(
            "noise needs 1 or 3 channels, got {channels}"
        )));
    }
    Ok(())
}

/// Pre-normalization sum `N_sum = Σ_m F_a^m ⊙ Z_m`, with mask `i` of the
/// stack drawing from substream `streams[i]`.
pub fn masked_noise_sum_with_streams(
    masks: &MaskStack,
    channels: usize,
    seed: NoiseSeed,
    streams: &[u64],
) -> Result<ImageTensor> {
    check_channels(channels)?;
    if !masks.is_binary() {
        return Err(Error::InvalidArgument("noise masks must be binary".into()));
    }
    if streams.len() != masks.count() {
        return Err(Error::InvalidArgument(format!(
            "{} substreams for {} masks",
            streams.len(),
            masks.count()
        )));
    }
    let shape = Shape::new(channels, masks.height(), masks.width());
    let n = shape.plane_len();
    let mut acc = vec![CompensatedSum::default(); shape.len()];
    // Fields are generated in parallel in bounded chunks and accumulated in
    // mask-index order, so the result does not depend on the thread count.
    const CHUNK: usize = 32;
    for first in (0..masks.count()).step_by(CHUNK) {
        let last = (first + CHUNK).min(masks.count());
        let fields: Vec<Vec<f64>> = (first..last)
            .into_par_iter()
            .map(|m| gaussian_stream(seed, streams[m], shape.len()))
            .collect();
        for (m, z) in (first..last).zip(&fields) {
            let mask = masks.mask(m);
            for c in 0..channels {
                for (i, &gate) in mask.iter().enumerate() {
                    if gate != 0.0 {
                        acc[c * n + i].add(gate * z[c * n + i]);
                    }
                }
            }
        }
    }
    Ok(ImageTensor::from_parts(
        shape,
        acc.iter().map(CompensatedSum::value).collect(),
    ))
}

/// `N_sum` with the default substream rule (mask `m` uses stream `m`).
pub fn masked_noise_sum(masks: &MaskStack, channels: usize, seed: NoiseSeed) -> Result<ImageTensor> {
    let streams: Vec<u64> = (0..masks.count() as u64).collect();
    masked_noise_sum_with_streams(masks, channels, seed, &streams)
}

fn standardize(field: &ImageTensor) -> Option<ImageTensor> {
    let (mean, std) = mean_std(field.data());
    if !(std > 0.0 && std.is_finite()) {
        return None;
    }
    Some(ImageTensor::from_parts(
        field.shape(),
        field.data().iter().map(|v| (v - mean) / std).collect(),
    ))
}

/// Standardized plain Gaussian field drawn from substream 0.
pub fn standard_normal_field(shape: Shape, seed: NoiseSeed) -> Result<ImageTensor> {
    check_channels(shape.channels)?;
    let raw = ImageTensor::new(
        shape.channels,
        shape.height,
        shape.width,
        gaussian_stream(seed, 0, shape.len()),
    )?;
    standardize(&raw).ok_or_else(|| Error::NonFinite("degenerate gaussian field".into()))
}

/// Result of noise synthesis, recording whether the unmasked fallback fired.
#[derive(Debug, Clone)]
pub struct SemanticNoise {
    pub field: ImageTensor,
    pub fallback: bool,
}

/// Standardized mask-structured noise `ε′ = (N_sum − μ)/σ`.
///
/// With no masks, or when `N_sum` is constant, the result is a standardized
/// unmasked field from substream 0 instead.
pub fn sample_masked_noise_detailed(masks: &MaskStack, channels: usize, seed: NoiseSeed) -> Result<SemanticNoise> {
    let shape = Shape::new(channels, masks.height(), masks.width());
    if masks.count() > 0 {
        let sum = masked_noise_sum(masks, channels, seed)?;
        if let Some(field) = standardize(&sum) {
            return Ok(SemanticNoise { field, fallback: false });
        }
    }
    Ok(SemanticNoise {
        field: standard_normal_field(shape, seed)?,
        fallback: true,
    })
}

pub fn sample_masked_noise(masks: &MaskStack, channels: usize, seed: NoiseSeed) -> Result<ImageTensor> {
    sample_masked_noise_detailed(masks, channels, seed).map(|n| n.field)
}
