//! Pixel-wise residual-shift forward process and deterministic reverse chain.
//!
//! Steps run `T → 1`. Step `t ≥ 2` maps `x_t` to
//! `x_{t−1} = k⊙f(x_t, y, t) + m⊙x_t + j⊙y`; step 1 returns `f(x_1, y, 1)`.
//! Step index 0 is reserved for the inverse-direction call made in training.

use crate::error::{Error, Result};
use crate::noise::{sample_masked_noise, NoiseSeed};
use crate::schedule::{compute_weight_map, PixelSchedule, ReverseCoeffs, ScheduleConfig};
use crate::tensor::{ImageTensor, MaskStack, Plane};

/// A conditional denoiser `f(x_t, y, t) → x̂_0`.
pub trait Denoiser: Send + Sync {
    fn predict(&self, x_t: &ImageTensor, y: &ImageTensor, t: usize) -> Result<ImageTensor>;

    /// Flat parameter vector; empty for parameter-free denoisers.
    fn params(&self) -> Vec<f64> {
        Vec::new()
    }

    fn num_params(&self) -> usize {
        self.params().len()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.is_empty() {
            Ok(())
        } else {
            Err(Error::InvalidArgument("denoiser has no parameters".into()))
        }
    }
}

/// Test double that always returns the true clean image.
#[derive(Debug, Clone)]
pub struct OracleDenoiser {
    x0: ImageTensor,
}

impl OracleDenoiser {
    pub fn new(x0: ImageTensor) -> Self {
        Self { x0 }
    }
}

impl Denoiser for OracleDenoiser {
    fn predict(&self, x_t: &ImageTensor, _y: &ImageTensor, _t: usize) -> Result<ImageTensor> {
        x_t.ensure_same_shape(&self.x0)?;
        Ok(self.x0.clone())
    }
}

/// Number of parameters of [`ToyDenoiser`].
pub const TOY_PARAMS: usize = 38;
const TAPS: usize = 9;

/// Small linear denoiser used as a stand-in for a UNet backbone.
///
/// Per channel (weights shared across channels), with `s = t / T`:
///
/// ```text
/// out(p) = Σ_k (a_k + s·a'_k)·x_t(p+k) + Σ_k (b_k + s·b'_k)·y(p+k) + (c + s·c')
/// ```
///
/// over the 3×3 neighbourhood `k` with clamp-to-edge borders. Parameter
/// layout: `a[0..9] b[9..18] c[18] a'[19..28] b'[28..37] c'[37]`, taps in
/// row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDenoiser {
    steps: usize,
    params: Vec<f64>,
}

impl ToyDenoiser {
    /// All-zero parameters: the output is identically zero.
    pub fn zeros(steps: usize) -> Self {
        Self {
            steps: steps.max(1),
            params: vec![0.0; TOY_PARAMS],
        }
    }

    /// Returns `y` unchanged at every step.
    pub fn passthrough(steps: usize) -> Self {
        let mut d = Self::zeros(steps);
        d.params[TAPS + 4] = 1.0;
        d
    }

    pub fn with_params(steps: usize, params: Vec<f64>) -> Result<Self> {
        let mut d = Self::zeros(steps);
        d.set_params(&params)?;
        Ok(d)
    }

    /// Step count used to normalize the time embedding.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn effective_weights(&self, t: usize) -> ([f64; TAPS], [f64; TAPS], f64) {
        let s = t as f64 / self.steps as f64;
        let p = &self.params;
        let mut wx = [0.0; TAPS];
        let mut wy = [0.0; TAPS];
        for k in 0..TAPS {
            wx[k] = p[k] + s * p[19 + k];
            wy[k] = p[TAPS + k] + s * p[28 + k];
        }
        (wx, wy, p[18] + s * p[37])
    }
}

fn conv3x3_acc(out: &mut [f64], plane: &[f64], h: usize, w: usize, weights: &[f64; TAPS]) {
    for y in 0..h {
        let rows = [y.saturating_sub(1), y, (y + 1).min(h - 1)];
        for x in 0..w {
            let cols = [x.saturating_sub(1), x, (x + 1).min(w - 1)];
            let mut acc = 0.0;
            for (ky, &ry) in rows.iter().enumerate() {
                for (kx, &cx) in cols.iter().enumerate() {
                    acc += weights[ky * 3 + kx] * plane[ry * w + cx];
                }
            }
            out[y * w + x] += acc;
        }
    }
}

impl Denoiser for ToyDenoiser {
    fn predict(&self, x_t: &ImageTensor, y: &ImageTensor, t: usize) -> Result<ImageTensor> {
        x_t.ensure_same_shape(y)?;
        let (wx, wy, bias) = self.effective_weights(t);
        let (h, w) = (x_t.height(), x_t.width());
        let mut data = Vec::with_capacity(x_t.data().len());
        for c in 0..x_t.channels() {
            let mut out = vec![bias; h * w];
            conv3x3_acc(&mut out, x_t.plane(c), h, w, &wx);
            conv3x3_acc(&mut out, y.plane(c), h, w, &wy);
            data.extend(out);
        }
        ImageTensor::new(x_t.channels(), h, w, data)
    }

    fn params(&self) -> Vec<f64> {
        self.params.clone()
    }

    fn num_params(&self) -> usize {
        TOY_PARAMS
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != TOY_PARAMS {
            return Err(Error::InvalidArgument(format!(
                "toy denoiser takes {TOY_PARAMS} parameters, got {}",
                params.len()
            )));
        }
        if params.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("denoiser parameter".into()));
        }
        self.params.copy_from_slice(params);
        Ok(())
    }
}

fn check_field(img: &ImageTensor, field: &Plane, what: &str) -> Result<()> {
    if (img.height(), img.width()) != (field.height(), field.width()) {
        return Err(Error::shape(
            format!("{what} of {}x{}", img.height(), img.width()),
            format!("{}x{}", field.height(), field.width()),
        ));
    }
    Ok(())
}

fn finite(img: ImageTensor, what: &str) -> Result<ImageTensor> {
    if img.data().iter().all(|v| v.is_finite()) {
        Ok(img)
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// `x_T = y + κ^new·sqrt(η_T^new)·ε′`, per channel.
pub fn forward_init(y: &ImageTensor, eps: &ImageTensor, sched: &PixelSchedule) -> Result<ImageTensor> {
    y.ensure_same_shape(eps)?;
    let eta = sched.eta(sched.steps());
    check_field(y, eta, "schedule")?;
    let n = eta.data().len();
    let data = y
        .data()
        .iter()
        .zip(eps.data())
        .enumerate()
        .map(|(i, (&yv, &e))| {
            let p = i % n;
            yv + sched.kappa().data()[p] * eta.data()[p].sqrt() * e
        })
        .collect();
    finite(ImageTensor::from_parts(y.shape(), data), "forward initialization")
}

/// `x_t = x_0 + η_t^new⊙(y − x_0) + κ^new⊙sqrt(η_t^new)⊙ε′`.
pub fn forward_marginal(
    x0: &ImageTensor,
    y: &ImageTensor,
    t: usize,
    eps: &ImageTensor,
    sched: &PixelSchedule,
) -> Result<ImageTensor> {
    if t < 1 || t > sched.steps() {
        return Err(Error::InvalidArgument(format!(
            "step {t} outside 1..={}",
            sched.steps()
        )));
    }
    x0.ensure_same_shape(y)?;
    x0.ensure_same_shape(eps)?;
    let eta = sched.eta(t);
    check_field(x0, eta, "schedule")?;
    let n = eta.data().len();
    let data = (0..x0.data().len())
        .map(|i| {
            let p = i % n;
            let (x, yv, e) = (x0.data()[i], y.data()[i], eps.data()[i]);
            x + eta.data()[p] * (yv - x) + sched.kappa().data()[p] * eta.data()[p].sqrt() * e
        })
        .collect();
    finite(ImageTensor::from_parts(x0.shape(), data), "forward marginal")
}

/// `x_{t−1} = k⊙x̂_0 + m⊙x_t + j⊙y`.
pub fn reverse_step(
    x_t: &ImageTensor,
    x0_hat: &ImageTensor,
    y: &ImageTensor,
    coeffs: &ReverseCoeffs,
) -> Result<ImageTensor> {
    x_t.ensure_same_shape(x0_hat)?;
    x_t.ensure_same_shape(y)?;
    check_field(x_t, &coeffs.k, "coefficients")?;
    let n = coeffs.k.data().len();
    let (k, m, j) = (coeffs.k.data(), coeffs.m.data(), coeffs.j.data());
    let data = (0..x_t.data().len())
        .map(|i| {
            let p = i % n;
            k[p] * x0_hat.data()[i] + m[p] * x_t.data()[i] + j[p] * y.data()[i]
        })
        .collect();
    finite(ImageTensor::from_parts(x_t.shape(), data), "reverse step")
}

/// States visited by a reverse chain.
#[derive(Debug, Clone)]
pub struct Trajectory {
    /// `x_T, x_{T−1}, …, x_1`.
    pub states: Vec<ImageTensor>,
    pub x0_hat: ImageTensor,
}

/// Runs the full `T`-step reverse chain from `x_T`.
pub fn reverse_chain(
    den: &dyn Denoiser,
    x_t: ImageTensor,
    y: &ImageTensor,
    sched: &PixelSchedule,
) -> Result<Trajectory> {
    let mut states = Vec::with_capacity(sched.steps());
    let mut current = x_t;
    for t in (2..=sched.steps()).rev() {
        let pred = den.predict(&current, y, t)?;
        let next = reverse_step(&current, &pred, y, sched.coeffs(t))?;
        states.push(current);
        current = next;
    }
    let x0_hat = finite(den.predict(&current, y, 1)?, "denoiser output")?;
    states.push(current);
    Ok(Trajectory { states, x0_hat })
}

/// Builds the schedule and noise for `y` and returns the sampled trajectory.
/// `steps` must be `1` (one denoiser call on `x_T`) or `T`.
pub fn sample_trajectory(
    y: &ImageTensor,
    masks: &MaskStack,
    den: &dyn Denoiser,
    cfg: &ScheduleConfig,
    seed: NoiseSeed,
    steps: usize,
) -> Result<Trajectory> {
    if (masks.height(), masks.width()) != (y.height(), y.width()) {
        return Err(Error::shape(
            format!("masks of {}x{}", y.height(), y.width()),
            format!("{}x{}", masks.height(), masks.width()),
        ));
    }
    if steps != 1 && steps != cfg.steps {
        return Err(Error::InvalidArgument(format!(
            "sampling steps must be 1 or {}, got {steps}",
            cfg.steps
        )));
    }
    let weights = compute_weight_map(masks)?;
    let sched = PixelSchedule::new(cfg, &weights)?;
    let eps = sample_masked_noise(masks, y.channels(), seed)?;
    let x_t = forward_init(y, &eps, &sched)?;
    if steps == 1 {
        let x0_hat = finite(den.predict(&x_t, y, cfg.steps)?, "denoiser output")?;
        return Ok(Trajectory {
            states: vec![x_t],
            x0_hat,
        });
    }
    reverse_chain(den, x_t, y, &sched)
}

pub fn sample(
    y: &ImageTensor,
    masks: &MaskStack,
    den: &dyn Denoiser,
    cfg: &ScheduleConfig,
    seed: NoiseSeed,
    steps: usize,
) -> Result<ImageTensor> {
    sample_trajectory(y, masks, den, cfg, seed, steps).map(|t| t.x0_hat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::SemanticWeightMap;

    fn one_pixel(v: f64) -> ImageTensor {
        ImageTensor::new(1, 1, 1, vec![v]).unwrap()
    }

    fn sched_for(w: f64, cfg: &ScheduleConfig) -> PixelSchedule {
        let weights = SemanticWeightMap::from_plane(Plane::filled(1, 1, w)).unwrap();
        PixelSchedule::new(cfg, &weights).unwrap()
    }

    #[test]
    fn forward_init_single_pixel() {
        // eta_T = 0.5, W = 1, m = 0.2 gives eta_new = 0.6 and kappa_new = 1.6.
        let cfg = ScheduleConfig {
            steps: 1,
            eta_1: 0.1,
            eta_t: 0.5,
            ..Default::default()
        };
        let s = sched_for(1.0, &cfg);
        let x = forward_init(&one_pixel(0.5), &one_pixel(1.0), &s).unwrap();
        let expected = 0.5 + 1.6 * 0.6f64.sqrt();
        assert!((x.data()[0] - expected).abs() < 1e-12);
        assert!((x.data()[0] - 1.7394).abs() < 1e-4);

        let zero = forward_init(&one_pixel(0.5), &one_pixel(0.0), &s).unwrap();
        assert_eq!(zero.data()[0], 0.5);
    }

    #[test]
    fn forward_marginal_scalar_case() {
        let cfg = ScheduleConfig {
            steps: 2,
            eta_1: 0.25,
            eta_t: 1.0,
            m_hyper: 0.0,
            ..Default::default()
        };
        let s = sched_for(0.0, &cfg);
        let x = forward_marginal(&one_pixel(0.0), &one_pixel(1.0), 1, &one_pixel(0.5), &s).unwrap();
        assert!((x.data()[0] - 0.75).abs() < 1e-15);
        assert!(forward_marginal(&one_pixel(0.0), &one_pixel(1.0), 3, &one_pixel(0.5), &s).is_err());
        // eta_T = 1 exactly: the marginal at T equals the initialization.
        let xt = forward_marginal(&one_pixel(0.3), &one_pixel(1.0), 2, &one_pixel(0.5), &s).unwrap();
        let init = forward_init(&one_pixel(1.0), &one_pixel(0.5), &s).unwrap();
        assert!((xt.data()[0] - init.data()[0]).abs() < 1e-15);
    }

    #[test]
    fn reverse_fixed_point_and_identity() {
        let y = ImageTensor::from_fn(1, 2, 2, |_, r, c| (r + 2 * c) as f64 / 4.0).unwrap();
        let w = SemanticWeightMap::from_plane(Plane::filled(2, 2, 0.4)).unwrap();
        let s = PixelSchedule::new(&ScheduleConfig::default(), &w).unwrap();
        let out = reverse_step(&y, &y, &y, s.coeffs(5)).unwrap();
        for (a, b) in out.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let ident = ReverseCoeffs {
            k: Plane::filled(2, 2, 0.0),
            m: Plane::filled(2, 2, 1.0),
            j: Plane::filled(2, 2, 0.0),
        };
        let x = y.map(|v| v * 3.0 - 1.0).unwrap();
        assert_eq!(reverse_step(&x, &y, &y, &ident).unwrap(), x);
    }

    #[test]
    fn shape_mismatches_are_errors() {
        let s = sched_for(0.0, &ScheduleConfig::default());
        let a = ImageTensor::zeros(1, 2, 2).unwrap();
        assert!(forward_init(&a, &a, &s).is_err());
        let b = ImageTensor::zeros(1, 1, 1).unwrap();
        assert!(forward_init(&b, &a, &s).is_err());
        assert!(ToyDenoiser::zeros(15).predict(&a, &b, 3).is_err());
    }

    #[test]
    fn toy_denoiser_params() {
        let mut d = ToyDenoiser::zeros(15);
        assert_eq!(d.num_params(), TOY_PARAMS);
        assert!(d.set_params(&[1.0; 3]).is_err());
        assert!(d.set_params(&[f64::NAN; TOY_PARAMS]).is_err());
        let y = ImageTensor::from_fn(3, 4, 5, |c, r, x| (c + r * x) as f64 / 20.0).unwrap();
        let x = y.map(|v| 1.0 - v).unwrap();
        assert_eq!(ToyDenoiser::passthrough(15).predict(&x, &y, 7).unwrap(), y);
        assert!(d.predict(&x, &y, 3).unwrap().data().iter().all(|&v| v == 0.0));

        // Time-modulated bias: c + (t/T)·c'.
        let mut p = vec![0.0; TOY_PARAMS];
        p[18] = 0.5;
        p[37] = 1.0;
        d.set_params(&p).unwrap();
        let out = d.predict(&x, &y, 5).unwrap();
        assert!(out.data().iter().all(|&v| (v - (0.5 + 5.0 / 15.0)).abs() < 1e-15));
        assert!(d.predict(&x, &y, 0).unwrap().data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn toy_conv_uses_clamped_neighbourhood() {
        let mut p = vec![0.0; TOY_PARAMS];
        p[0] = 1.0; // top-left tap on x_t
        let d = ToyDenoiser::with_params(4, p).unwrap();
        let x = ImageTensor::from_fn(1, 3, 3, |_, r, c| (r * 3 + c) as f64).unwrap();
        let y = ImageTensor::zeros(1, 3, 3).unwrap();
        let out = d.predict(&x, &y, 2).unwrap();
        // out(r,c) = x(max(r-1,0), max(c-1,0))
        assert_eq!(out.data(), &[0.0, 0.0, 1.0, 0.0, 0.0, 1.0, 3.0, 3.0, 4.0]);
    }

    #[test]
    fn sample_rejects_bad_steps() {
        let y = ImageTensor::filled(1, 4, 4, 0.5).unwrap();
        let masks = MaskStack::empty(4, 4).unwrap();
        let d = ToyDenoiser::passthrough(15);
        let cfg = ScheduleConfig::default();
        assert!(sample(&y, &masks, &d, &cfg, NoiseSeed(1), 7).is_err());
        let wrong = MaskStack::empty(2, 2).unwrap();
        assert!(sample(&y, &wrong, &d, &cfg, NoiseSeed(1), 1).is_err());
        let out = sample(&y, &masks, &d, &cfg, NoiseSeed(1), 15).unwrap();
        assert_eq!(out, y);
    }
}
