//! Bicubic upscaling, block average pooling and thresholding.

use crate::error::{Error, Result};
use crate::tensor::{ImageTensor, MaskStack};

/// Catmull-Rom parameter of the cubic convolution kernel.
pub const CATMULL_ROM_A: f64 = -0.5;

/// Cubic convolution kernel with `a = -0.5`.
pub fn cubic_kernel(x: f64) -> f64 {
    let a = CATMULL_ROM_A;
    let x = x.abs();
    if x <= 1.0 {
        ((a + 2.0) * x - (a + 3.0)) * x * x + 1.0
    } else if x < 2.0 {
        ((a * x - 5.0 * a) * x + 8.0 * a) * x - 4.0 * a
    } else {
        0.0
    }
}

/// Source taps and weights for one output coordinate along an axis.
/// Output pixel centres are aligned with input pixel centres.
fn taps(out_index: usize, factor: usize, in_len: usize) -> ([usize; 4], [f64; 4]) {
    let src = (out_index as f64 + 0.5) / factor as f64 - 0.5;
    let base = src.floor();
    let frac = src - base;
    let base = base as isize;
    let last = in_len as isize - 1;
    let mut idx = [0usize; 4];
    let mut w = [0.0; 4];
    for k in 0..4 {
        let offset = k as isize - 1;
        idx[k] = (base + offset).clamp(0, last) as usize;
        w[k] = cubic_kernel(frac - offset as f64);
    }
    (idx, w)
}

fn upscale_plane(plane: &[f64], h: usize, w: usize, factor: usize) -> Vec<f64> {
    let (oh, ow) = (h * factor, w * factor);
    let col_taps: Vec<_> = (0..ow).map(|x| taps(x, factor, w)).collect();
    let mut horiz = vec![0.0; h * ow];
    for y in 0..h {
        let row = &plane[y * w..(y + 1) * w];
        for (x, (idx, wt)) in col_taps.iter().enumerate() {
            horiz[y * ow + x] = (0..4).map(|k| wt[k] * row[idx[k]]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        let (idx, wt) = taps(y, factor, h);
        for x in 0..ow {
            out[y * ow + x] = (0..4).map(|k| wt[k] * horiz[idx[k] * ow + x]).sum();
        }
    }
    out
}

/// Separable Catmull-Rom upscaling by an integer factor, clamp-to-edge.
pub fn bicubic_upscale(img: &ImageTensor, factor: usize) -> Result<ImageTensor> {
    if factor == 0 {
        return Err(Error::InvalidArgument("upscale factor must be at least 1".into()));
    }
    if factor == 1 {
        return Ok(img.clone());
    }
    let (h, w) = (img.height(), img.width());
    let mut data = Vec::with_capacity(img.data().len() * factor * factor);
    for c in 0..img.channels() {
        data.extend(upscale_plane(img.plane(c), h, w, factor));
    }
    ImageTensor::new(img.channels(), h * factor, w * factor, data)
}

/// Non-overlapping `window×window` block mean. The output is fractional.
pub fn avg_pool(stack: &MaskStack, window: usize) -> Result<MaskStack> {
    if window == 0 {
        return Err(Error::InvalidArgument("pooling window must be at least 1".into()));
    }
    let (h, w) = (stack.height(), stack.width());
    if h % window != 0 || w % window != 0 {
        return Err(Error::InvalidArgument(format!(
            "{h}x{w} mask is not divisible by pooling window {window}"
        )));
    }
    let (oh, ow) = (h / window, w / window);
    let area = (window * window) as f64;
    let mut data = Vec::with_capacity(stack.count() * oh * ow);
    for mask in stack.masks() {
        for by in 0..oh {
            for bx in 0..ow {
                let mut sum = 0.0;
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for y in by * window..(by + 1) * window {
                    for &v in &mask[y * w + bx * window..y * w + (bx + 1) * window] {
                        sum += v;
                        lo = lo.min(v);
                        hi = hi.max(v);
                    }
                }
                // Rounding in the sum must not push the mean outside the block range.
                data.push((sum / area).clamp(lo, hi));
            }
        }
    }
    Ok(MaskStack::from_parts(stack.count(), oh, ow, data, false))
}

/// Binarizes with a strict comparison: `1` iff value `> t`.
pub fn threshold(stack: &MaskStack, t: f64) -> Result<MaskStack> {
    if !(t > 0.0 && t < 1.0) {
        return Err(Error::InvalidArgument(format!("threshold {t} outside (0,1)")));
    }
    let data = stack.data().iter().map(|&v| if v > t { 1.0 } else { 0.0 }).collect();
    Ok(MaskStack::from_parts(
        stack.count(),
        stack.height(),
        stack.width(),
        data,
        true,
    ))
}
