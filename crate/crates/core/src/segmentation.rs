//! Binary mask extraction for the semantic guidance.
//!
//! The low-resolution image is upscaled 4x, segmented, block-pooled back to
//! the input grid and thresholded. Segmentation is either a deterministic
//! quantized-luminance connected-component labeller or a mask directory
//! produced by an external segmenter.

use std::collections::VecDeque;
use std::path::PathBuf;

use crate::error::{Error, Result};
use crate::io::load_mask_dir;
use crate::resample::{avg_pool, bicubic_upscale, threshold};
use crate::tensor::{ImageTensor, MaskStack};

/// Resolution ratio between the segmented image and the input grid.
pub const SEGMENT_SCALE: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmenterMode {
    /// Built-in connected-component segmenter.
    Toy,
    /// Masks read from `mask_dir`.
    Load,
}

impl std::str::FromStr for SegmenterMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "toy" => Ok(Self::Toy),
            "load" => Ok(Self::Load),
            other => Err(Error::Config(format!(
                "unknown segmenter mode `{other}` (expected `toy` or `load`)"
            ))),
        }
    }
}

impl std::fmt::Display for SegmenterMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Toy => "toy",
            Self::Load => "load",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SegmenterConfig {
    pub mode: SegmenterMode,
    pub mask_dir: Option<PathBuf>,
    /// Number of luminance bands for the toy segmenter.
    pub quant_levels: usize,
    /// Components smaller than this many pixels are dropped.
    pub min_region_px: usize,
    pub max_masks: usize,
    pub threshold_t: f64,
}

impl Default for SegmenterConfig {
    fn default() -> Self {
        Self {
            mode: SegmenterMode::Toy,
            mask_dir: None,
            quant_levels: 8,
            min_region_px: 16,
            max_masks: 256,
            threshold_t: 0.5,
        }
    }
}

impl SegmenterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.quant_levels < 2 {
            return Err(Error::Config(format!(
                "quant_levels must be >= 2, got {}",
                self.quant_levels
            )));
        }
        if self.max_masks < 1 {
            return Err(Error::Config("max_masks must be >= 1".into()));
        }
        if !(self.threshold_t > 0.0 && self.threshold_t < 1.0) {
            return Err(Error::Config(format!(
                "threshold_t must lie in (0,1), got {}",
                self.threshold_t
            )));
        }
        if self.mode == SegmenterMode::Load && self.mask_dir.is_none() {
            return Err(Error::Config("load mode requires mask_dir".into()));
        }
        Ok(())
    }
}

fn band(v: f64, levels: usize) -> usize {
    ((v.clamp(0.0, 1.0) * levels as f64).floor() as usize).min(levels - 1)
}

/// One binary mask per 4-connected component of the band-quantized luminance.
///
/// Components below `min_region_px` are dropped; the rest are ordered by size
/// (largest first) then by their first pixel in scanline order, and truncated
/// to `max_masks`. The masks are pairwise disjoint.
pub fn toy_segment(img: &ImageTensor, cfg: &SegmenterConfig) -> Result<MaskStack> {
    cfg.validate()?;
    let (h, w) = (img.height(), img.width());
    let bands: Vec<usize> = img
        .luminance()
        .data()
        .iter()
        .map(|&v| band(v, cfg.quant_levels))
        .collect();

    const UNLABELED: usize = usize::MAX;
    let mut labels = vec![UNLABELED; h * w];
    // (size, first pixel index) per component; label == position.
    let mut components: Vec<(usize, usize)> = Vec::new();
    let mut queue = VecDeque::new();
    for start in 0..h * w {
        if labels[start] != UNLABELED {
            continue;
        }
        let label = components.len();
        let b = bands[start];
        labels[start] = label;
        queue.push_back(start);
        let mut size = 0;
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (y, x) = (i / w, i % w);
            let mut visit = |j: usize| {
                if labels[j] == UNLABELED && bands[j] == b {
                    labels[j] = label;
                    queue.push_back(j);
                }
            };
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
        }
        components.push((size, start));
    }

    let mut kept: Vec<usize> = (0..components.len())
        .filter(|&l| components[l].0 >= cfg.min_region_px)
        .collect();
    kept.sort_by(|&a, &b| {
        components[b]
            .0
            .cmp(&components[a].0)
            .then(components[a].1.cmp(&components[b].1))
    });
    kept.truncate(cfg.max_masks);

    let mut data = vec![0.0; kept.len() * h * w];
    for (m, &label) in kept.iter().enumerate() {
        let out = &mut data[m * h * w..(m + 1) * h * w];
        for (o, &l) in out.iter_mut().zip(&labels) {
            if l == label {
                *o = 1.0;
            }
        }
    }
    Ok(MaskStack::from_parts(kept.len(), h, w, data, true))
}

/// Pools a full-resolution stack down by [`SEGMENT_SCALE`] and thresholds it.
pub fn reduce_masks(full: &MaskStack, t: f64) -> Result<MaskStack> {
    threshold(&avg_pool(full, SEGMENT_SCALE)?, t)
}

/// Produces the binary `M×H×W` stack for an `H×W` image.
///
/// In `Toy` mode this is `threshold(avg_pool(toy_segment(bicubic_upscale(img, 4)), 4), T)`.
/// In `Load` mode masks are read from disk: masks at `4H×4W` are pooled and
/// thresholded, masks already at `H×W` are used directly, and an empty
/// directory yields an empty stack.
pub fn mask_pipeline(img: &ImageTensor, cfg: &SegmenterConfig) -> Result<MaskStack> {
    cfg.validate()?;
    let (h, w) = (img.height(), img.width());
    match cfg.mode {
        SegmenterMode::Toy => {
            let upscaled = bicubic_upscale(img, SEGMENT_SCALE)?;
            let full = toy_segment(&upscaled, cfg)?;
            reduce_masks(&full, cfg.threshold_t)
        }
        SegmenterMode::Load => {
            let dir = cfg.mask_dir.as_ref().expect("validated");
            let Some(mut loaded) = load_mask_dir(dir)? else {
                return MaskStack::empty(h, w);
            };
            if loaded.count() > cfg.max_masks {
                loaded = loaded.permuted(&(0..cfg.max_masks).collect::<Vec<_>>())?;
            }
            if (loaded.height(), loaded.width()) == (h, w) {
                Ok(loaded)
            } else if (loaded.height(), loaded.width()) == (h * SEGMENT_SCALE, w * SEGMENT_SCALE) {
                reduce_masks(&loaded, cfg.threshold_t)
            } else {
                Err(Error::Format {
                    path: dir.clone(),
                    reason: format!(
                        "masks are {}x{}, expected {h}x{w} or {}x{}",
                        loaded.height(),
                        loaded.width(),
                        h * SEGMENT_SCALE,
                        w * SEGMENT_SCALE
                    ),
                })
            }
        }
    }
}
