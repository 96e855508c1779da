//! Raster containers shared by every stage of the pipeline.
//!
//! All storage is row-major `f64`. An [`ImageTensor`] is `C×H×W` (channel
//! planes stored one after another), a [`Plane`] is a single `H×W` field and a
//! [`MaskStack`] is `M×H×W`.

use std::fmt;

use crate::error::{Error, Result};

/// Luminance weights used whenever an RGB image is reduced to one channel.
pub const LUMA_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Shape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Shape {
    pub fn new(channels: usize, height: usize, width: usize) -> Self {
        Self {
            channels,
            height,
            width,
        }
    }

    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn plane_len(&self) -> usize {
        self.height * self.width
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.channels, self.height, self.width)
    }
}

fn check_finite(data: &[f64], what: &str) -> Result<()> {
    if let Some(i) = data.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{what} element {i} is {}", data[i])));
    }
    Ok(())
}

/// A `C×H×W` raster. Images use the nominal range `[0,1]`; diffusion states
/// and noise fields are unbounded but always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageTensor {
    shape: Shape,
    data: Vec<f64>,
}

impl ImageTensor {
    pub fn new(channels: usize, height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::InvalidArgument(format!(
                "image must have 1 or 3 channels, got {channels}"
            )));
        }
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "image dimensions must be positive, got {height}x{width}"
            )));
        }
        let shape = Shape::new(channels, height, width);
        if data.len() != shape.len() {
            return Err(Error::shape(
                format!("{} values for {shape}", shape.len()),
                format!("{} values", data.len()),
            ));
        }
        check_finite(&data, "image")?;
        Ok(Self { shape, data })
    }

    pub fn filled(channels: usize, height: usize, width: usize, value: f64) -> Result<Self> {
        Self::new(channels, height, width, vec![value; channels * height * width])
    }

    pub fn zeros(channels: usize, height: usize, width: usize) -> Result<Self> {
        Self::filled(channels, height, width, 0.0)
    }

    /// Builds an image from a closure over `(channel, row, col)`.
    pub fn from_fn(
        channels: usize,
        height: usize,
        width: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        let mut data = Vec::with_capacity(channels * height * width);
        for c in 0..channels {
            for y in 0..height {
                for x in 0..width {
                    data.push(f(c, y, x));
                }
            }
        }
        Self::new(channels, height, width, data)
    }

    /// Crate-internal constructor for results of arithmetic on finite inputs.
    pub(crate) fn from_parts(shape: Shape, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.len(), data.len());
        Self { shape, data }
    }

    pub fn shape(&self) -> Shape {
        self.shape
    }

    pub fn channels(&self) -> usize {
        self.shape.channels
    }

    pub fn height(&self) -> usize {
        self.shape.height
    }

    pub fn width(&self) -> usize {
        self.shape.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn at(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data[(c * self.shape.height + y) * self.shape.width + x]
    }

    pub fn plane(&self, c: usize) -> &[f64] {
        let n = self.shape.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn ensure_same_shape(&self, other: &ImageTensor) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::shape(self.shape, other.shape));
        }
        Ok(())
    }

    /// Applies `f` elementwise. Fails if `f` produces a non-finite value.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> Result<Self> {
        let data: Vec<f64> = self.data.iter().map(|&v| f(v)).collect();
        check_finite(&data, "mapped image")?;
        Ok(Self::from_parts(self.shape, data))
    }

    pub fn clamped(&self, lo: f64, hi: f64) -> Self {
        Self::from_parts(self.shape, self.data.iter().map(|v| v.clamp(lo, hi)).collect())
    }

    pub fn min_max(&self) -> (f64, f64) {
        self.data
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    /// Single-channel luminance plane. Grayscale images are returned as-is.
    pub fn luminance(&self) -> Plane {
        let n = self.shape.plane_len();
        let data = if self.shape.channels == 1 {
            self.data.clone()
        } else {
            (0..n)
                .map(|i| {
                    LUMA_WEIGHTS[0] * self.data[i]
                        + LUMA_WEIGHTS[1] * self.data[n + i]
                        + LUMA_WEIGHTS[2] * self.data[2 * n + i]
                })
                .collect()
        };
        Plane::from_parts(self.shape.height, self.shape.width, data)
    }

    /// Mean squared difference over every element.
    pub fn mse(&self, other: &ImageTensor) -> Result<f64> {
        self.ensure_same_shape(other)?;
        let sum: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// A single-channel `H×W` real field: weight maps, per-pixel schedule values.
#[derive(Debug, Clone, PartialEq)]
pub struct Plane {
    height: usize,
    width: usize,
    data: Vec<f64>,
}

impl Plane {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::shape(
                format!("{} values for {height}x{width}", height * width),
                format!("{} values", data.len()),
            ));
        }
        check_finite(&data, "plane")?;
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, value: f64) -> Self {
        Self::from_parts(height, width, vec![value; height * width])
    }

    pub(crate) fn from_parts(height: usize, width: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(height * width, data.len());
        Self { height, width, data }
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.width + x]
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self::from_parts(self.height, self.width, self.data.iter().map(|&v| f(v)).collect())
    }

    pub fn to_image(&self) -> ImageTensor {
        ImageTensor::from_parts(Shape::new(1, self.height, self.width), self.data.clone())
    }
}

/// `M×H×W` stack of masks. `binary` stacks hold only 0 and 1; pooled stacks
/// hold fractional coverage in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskStack {
    count: usize,
    height: usize,
    width: usize,
    data: Vec<f64>,
    binary: bool,
}

impl MaskStack {
    pub fn new(count: usize, height: usize, width: usize, data: Vec<f64>, binary: bool) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument(format!(
                "mask dimensions must be positive, got {height}x{width}"
            )));
        }
        if data.len() != count * height * width {
            return Err(Error::shape(
                format!("{} values for {count}x{height}x{width}", count * height * width),
                format!("{} values", data.len()),
            ));
        }
        if binary {
            if let Some(v) = data.iter().find(|&&v| v != 0.0 && v != 1.0) {
                return Err(Error::InvalidArgument(format!("binary mask stack contains value {v}")));
            }
        } else if let Some(v) = data.iter().find(|&&v| !(0.0..=1.0).contains(&v)) {
            return Err(Error::InvalidArgument(format!("mask stack value {v} outside [0,1]")));
        }
        Ok(Self {
            count,
            height,
            width,
            data,
            binary,
        })
    }

    pub fn empty(height: usize, width: usize) -> Result<Self> {
        Self::new(0, height, width, Vec::new(), true)
    }

    /// Stacks binary masks given as `H×W` boolean planes.
    pub fn from_bool_masks(height: usize, width: usize, masks: &[Vec<bool>]) -> Result<Self> {
        let mut data = Vec::with_capacity(masks.len() * height * width);
        for (i, m) in masks.iter().enumerate() {
            if m.len() != height * width {
                return Err(Error::shape(
                    format!("mask {i} with {} pixels", height * width),
                    m.len(),
                ));
            }
            data.extend(m.iter().map(|&b| if b { 1.0 } else { 0.0 }));
        }
        Self::new(masks.len(), height, width, data, true)
    }

    pub(crate) fn from_parts(count: usize, height: usize, width: usize, data: Vec<f64>, binary: bool) -> Self {
        debug_assert_eq!(count * height * width, data.len());
        Self {
            count,
            height,
            width,
            data,
            binary,
        }
    }

    pub fn count(&self) -> usize {
        self.count
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn is_binary(&self) -> bool {
        self.binary
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn mask(&self, m: usize) -> &[f64] {
        let n = self.height * self.width;
        &self.data[m * n..(m + 1) * n]
    }

    pub fn masks(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.count).map(move |m| self.mask(m))
    }

    /// Number of masks covering each pixel (the per-pixel sum over the stack).
    pub fn coverage(&self) -> Plane {
        let n = self.height * self.width;
        let mut cov = vec![0.0; n];
        for mask in self.masks() {
            for (c, v) in cov.iter_mut().zip(mask) {
                *c += v;
            }
        }
        Plane::from_parts(self.height, self.width, cov)
    }

    /// Reinterprets the stack as fractional data, dropping the binary flag.
    pub fn as_real(&self) -> Self {
        Self {
            binary: false,
            ..self.clone()
        }
    }

    /// Returns a stack with the masks reordered by `order` (indices into self).
    pub fn permuted(&self, order: &[usize]) -> Result<Self> {
        let n = self.height * self.width;
        let mut data = Vec::with_capacity(order.len() * n);
        for &i in order {
            if i >= self.count {
                return Err(Error::InvalidArgument(format!(
                    "mask index {i} out of range for {} masks",
                    self.count
                )));
            }
            data.extend_from_slice(self.mask(i));
        }
        Ok(Self::from_parts(
            order.len(),
            self.height,
            self.width,
            data,
            self.binary,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_rejects_bad_inputs() {
        assert!(ImageTensor::new(2, 2, 2, vec![0.0; 8]).is_err());
        assert!(ImageTensor::new(1, 0, 2, vec![]).is_err());
        assert!(ImageTensor::new(1, 2, 2, vec![0.0; 3]).is_err());
        assert!(matches!(
            ImageTensor::new(1, 1, 2, vec![0.0, f64::NAN]),
            Err(Error::NonFinite(_))
        ));
        assert!(ImageTensor::new(1, 1, 1, vec![f64::INFINITY]).is_err());
    }

    #[test]
    fn indexing_is_row_major_per_channel() {
        let img = ImageTensor::from_fn(3, 2, 3, |c, y, x| (c * 100 + y * 10 + x) as f64).unwrap();
        assert_eq!(img.at(2, 1, 2), 212.0);
        assert_eq!(img.plane(1)[4], 111.0);
    }

    #[test]
    fn luminance_weights() {
        let img = ImageTensor::from_fn(3, 1, 1, |c, _, _| [1.0, 0.5, 0.0][c]).unwrap();
        let l = img.luminance();
        assert!((l.at(0, 0) - (0.299 + 0.5 * 0.587)).abs() < 1e-15);
    }

    #[test]
    fn binary_masks_are_validated() {
        assert!(MaskStack::new(1, 1, 2, vec![0.0, 0.5], true).is_err());
        assert!(MaskStack::new(1, 1, 2, vec![0.0, 0.5], false).is_ok());
        assert!(MaskStack::new(1, 1, 2, vec![0.0, 1.5], false).is_err());
        let empty = MaskStack::empty(3, 4).unwrap();
        assert_eq!(empty.count(), 0);
        assert_eq!(empty.coverage().data(), &[0.0; 12]);
    }

    #[test]
    fn coverage_counts_overlaps() {
        let s = MaskStack::new(2, 1, 3, vec![1.0, 1.0, 0.0, 1.0, 0.0, 0.0], true).unwrap();
        assert_eq!(s.coverage().data(), &[2.0, 1.0, 0.0]);
        let p = s.permuted(&[1, 0]).unwrap();
        assert_eq!(p.mask(0), &[1.0, 0.0, 0.0]);
    }
}
