//! Uniform-schedule sampler with scalar `η_t`, `κ` and unmasked noise.
//!
//! This is the reference the pixel-wise sampler reduces to when the semantic
//! modulation is switched off and no masks are available.

use crate::diffusion::{Denoiser, Trajectory};
use crate::error::{Error, Result};
use crate::noise::{standard_normal_field, NoiseSeed};
use crate::schedule::{build_schedule, ScheduleConfig};
use crate::tensor::ImageTensor;

fn scalar_coeffs(prev: f64, cur: f64) -> (f64, f64, f64) {
    let root_prod = (prev * cur).sqrt();
    let root_ratio = (prev / cur).sqrt();
    (1.0 - prev + root_prod - root_ratio, root_ratio, prev - root_prod)
}

fn checked(data: Vec<f64>, like: &ImageTensor) -> Result<ImageTensor> {
    ImageTensor::new(like.channels(), like.height(), like.width(), data)
}

/// Samples with a spatially uniform schedule; `steps` is `1` or `T`.
pub fn uniform_sample_trajectory(
    y: &ImageTensor,
    den: &dyn Denoiser,
    cfg: &ScheduleConfig,
    seed: NoiseSeed,
    steps: usize,
) -> Result<Trajectory> {
    if steps != 1 && steps != cfg.steps {
        return Err(Error::InvalidArgument(format!(
            "sampling steps must be 1 or {}, got {steps}",
            cfg.steps
        )));
    }
    let etas = build_schedule(cfg)?;
    let t_max = cfg.steps;
    let eps = standard_normal_field(y.shape(), seed)?;
    let scale = cfg.kappa;
    let eta_last = etas[t_max - 1];
    let x_t = checked(
        y.data()
            .iter()
            .zip(eps.data())
            .map(|(&yv, &e)| yv + scale * eta_last.sqrt() * e)
            .collect(),
        y,
    )?;
    if steps == 1 {
        let x0_hat = den.predict(&x_t, y, t_max)?;
        return Ok(Trajectory {
            states: vec![x_t],
            x0_hat,
        });
    }
    let mut states = Vec::with_capacity(t_max);
    let mut current = x_t;
    for t in (2..=t_max).rev() {
        let (k, m, j) = scalar_coeffs(etas[t - 2], etas[t - 1]);
        let pred = den.predict(&current, y, t)?;
        let next = checked(
            (0..current.data().len())
                .map(|i| k * pred.data()[i] + m * current.data()[i] + j * y.data()[i])
                .collect(),
            y,
        )?;
        states.push(current);
        current = next;
    }
    let x0_hat = den.predict(&current, y, 1)?;
    states.push(current);
    Ok(Trajectory { states, x0_hat })
}
