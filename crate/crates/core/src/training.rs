//! One-step student distillation with semantic consistency.
//!
//! Each training item is prepared once: the conditioning masks give the
//! weight map and pixel schedule, mask-structured noise gives `x_T`, and the
//! teacher's full reverse chain gives the target `x̂_0`. The student is then
//! scored with four terms:
//!
//! * distill: `MSE(f(x_T, y, T), x̂_0)`
//! * inverse: `MSE(f(x̂_0, y, 0), x_T)`
//! * ground truth: `MSE(f(x̂_T, y, T), x_0)` with `x̂_T = f(x_0, y, 0)` held fixed
//! * semantic consistency: `MSE(W(f(x_T, y, T)), W(x_0))`
//!
//! The total `distill + inverse + gt + λ·sc` is reported every iteration and
//! minimized by gradient descent on central finite differences. The
//! consistency term is a step function of the parameters, so it contributes
//! no gradient.

use rayon::prelude::*;

use crate::dataset::TrainingPair;
use crate::diffusion::{forward_init, forward_marginal, reverse_chain, Denoiser, OracleDenoiser, ToyDenoiser};
use crate::error::{Error, Result};
use crate::noise::{sample_masked_noise, NoiseSeed};
use crate::schedule::{compute_weight_map, PixelSchedule, ScheduleConfig, SemanticWeightMap};
use crate::segmentation::{mask_pipeline, SegmenterConfig};
use crate::tensor::ImageTensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainingConfig {
    pub lambda_sc: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    /// Items per iteration; `0` or anything at least the dataset size means full batch.
    pub batch_size: usize,
    pub fd_epsilon: f64,
    pub seed: NoiseSeed,
    pub schedule: ScheduleConfig,
    pub segmenter: SegmenterConfig,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        Self {
            lambda_sc: 1.0,
            learning_rate: 1e-2,
            iterations: 200,
            batch_size: 16,
            fd_epsilon: 1e-4,
            seed: NoiseSeed(0),
            schedule: ScheduleConfig::default(),
            segmenter: SegmenterConfig::default(),
        }
    }
}

impl TrainingConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_sc >= 0.0 && self.lambda_sc.is_finite()) {
            return Err(Error::Config(format!("lambda_sc must be >= 0, got {}", self.lambda_sc)));
        }
        if !(self.fd_epsilon > 0.0 && self.fd_epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "fd_epsilon must be > 0, got {}",
                self.fd_epsilon
            )));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config(format!(
                "learning_rate must be >= 0, got {}",
                self.learning_rate
            )));
        }
        if self.iterations < 1 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        self.schedule.validate()?;
        self.segmenter.validate()
    }
}

/// The four loss terms and their weighted total.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub l_distill: f64,
    pub l_inverse: f64,
    pub l_gt: f64,
    pub l_sc: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(l_distill: f64, l_inverse: f64, l_gt: f64, l_sc: f64, lambda_sc: f64) -> Self {
        Self {
            l_distill,
            l_inverse,
            l_gt,
            l_sc,
            total: l_distill + l_inverse + l_gt + lambda_sc * l_sc,
        }
    }

    /// Component-wise mean of several reports, re-totalled with `lambda_sc`.
    pub fn mean(reports: &[LossReport], lambda_sc: f64) -> Self {
        let n = reports.len() as f64;
        let avg = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        Self::new(
            avg(|r| r.l_distill),
            avg(|r| r.l_inverse),
            avg(|r| r.l_gt),
            avg(|r| r.l_sc),
            lambda_sc,
        )
    }

    pub fn is_finite(&self) -> bool {
        [self.l_distill, self.l_inverse, self.l_gt, self.l_sc, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

/// Source of distillation targets.
pub enum Teacher {
    /// Returns each item's own ground truth.
    Oracle,
    /// A toy model; the student starts from a copy of its parameters.
    Toy(ToyDenoiser),
    Custom(Box<dyn Denoiser>),
}

/// Full `T`-step reverse chain from `x_T`, returning the final prediction.
pub fn teacher_rollout(
    teacher: &dyn Denoiser,
    x_t: &ImageTensor,
    y: &ImageTensor,
    sched: &PixelSchedule,
) -> Result<ImageTensor> {
    reverse_chain(teacher, x_t.clone(), y, sched).map(|t| t.x0_hat)
}

/// Semantic weight map of an image, as used by the consistency loss.
pub fn semantic_weights(img: &ImageTensor, seg: &SegmenterConfig) -> Result<SemanticWeightMap> {
    compute_weight_map(&mask_pipeline(&img.clamped(0.0, 1.0), seg)?)
}

fn weight_mse(a: &SemanticWeightMap, b: &SemanticWeightMap) -> f64 {
    let n = a.values().len() as f64;
    a.values()
        .iter()
        .zip(b.values())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / n
}

pub fn semantic_consistency_loss(x0_hat: &ImageTensor, x0: &ImageTensor, seg: &SegmenterConfig) -> Result<f64> {
    x0_hat.ensure_same_shape(x0)?;
    Ok(weight_mse(&semantic_weights(x0_hat, seg)?, &semantic_weights(x0, seg)?))
}

/// Student-independent quantities for one training item.
#[derive(Debug, Clone)]
pub struct PreparedItem {
    pub x0: ImageTensor,
    pub y: ImageTensor,
    /// Semantically initialized `x_T = y + κ^new·sqrt(η_T^new)·ε′`.
    pub x_t: ImageTensor,
    /// Teacher's multi-step prediction.
    pub teacher_x0: ImageTensor,
    pub w_x0: SemanticWeightMap,
}

pub fn prepare_item(
    teacher: &Teacher,
    x0: &ImageTensor,
    y: &ImageTensor,
    cfg: &TrainingConfig,
    seed: NoiseSeed,
) -> Result<PreparedItem> {
    x0.ensure_same_shape(y)?;
    let masks = mask_pipeline(&y.clamped(0.0, 1.0), &cfg.segmenter)?;
    let weights = compute_weight_map(&masks)?;
    let sched = PixelSchedule::new(&cfg.schedule, &weights)?;
    let eps = sample_masked_noise(&masks, y.channels(), seed)?;
    let x_t = forward_init(y, &eps, &sched)?;
    let teacher_x0 = match teacher {
        Teacher::Oracle => teacher_rollout(&OracleDenoiser::new(x0.clone()), &x_t, y, &sched)?,
        Teacher::Toy(d) => teacher_rollout(d, &x_t, y, &sched)?,
        Teacher::Custom(d) => teacher_rollout(d.as_ref(), &x_t, y, &sched)?,
    };
    Ok(PreparedItem {
        x0: x0.clone(),
        y: y.clone(),
        x_t,
        teacher_x0,
        w_x0: semantic_weights(x0, &cfg.segmenter)?,
    })
}

/// `x̂_T = f(x_0, y, 0)`, evaluated once and then treated as a constant.
pub fn detached_inverse(student: &dyn Denoiser, item: &PreparedItem) -> Result<ImageTensor> {
    student.predict(&item.x0, &item.y, 0)
}

/// Selects which differentiable loss terms a gradient covers.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LossTerms {
    pub distill: bool,
    pub inverse: bool,
    pub gt: bool,
}

impl LossTerms {
    /// Every term with a derivative. The consistency term is piecewise
    /// constant in the parameters (thresholding and connected components),
    /// so its derivative is zero wherever it exists and it is left out.
    pub const DIFFERENTIABLE: LossTerms = LossTerms {
        distill: true,
        inverse: true,
        gt: true,
    };
}

/// Distill, inverse and ground-truth terms for one item with a fixed `x̂_T`.
fn smooth_terms(
    student: &dyn Denoiser,
    item: &PreparedItem,
    x_hat_t: &ImageTensor,
    cfg: &TrainingConfig,
    terms: LossTerms,
) -> Result<(f64, f64, f64, Option<ImageTensor>)> {
    let t_max = cfg.schedule.steps;
    let mut pred = None;
    let mut l_distill = 0.0;
    if terms.distill {
        let p = student.predict(&item.x_t, &item.y, t_max)?;
        l_distill = p.mse(&item.teacher_x0)?;
        pred = Some(p);
    }
    let mut l_inverse = 0.0;
    if terms.inverse {
        l_inverse = student.predict(&item.teacher_x0, &item.y, 0)?.mse(&item.x_t)?;
    }
    let mut l_gt = 0.0;
    if terms.gt {
        l_gt = student.predict(x_hat_t, &item.y, t_max)?.mse(&item.x0)?;
    }
    Ok((l_distill, l_inverse, l_gt, pred))
}

/// Scores the student on one item with a fixed `x̂_T`.
pub fn evaluate_student(
    student: &dyn Denoiser,
    item: &PreparedItem,
    x_hat_t: &ImageTensor,
    cfg: &TrainingConfig,
) -> Result<LossReport> {
    let (l_distill, l_inverse, l_gt, pred) = smooth_terms(student, item, x_hat_t, cfg, LossTerms::DIFFERENTIABLE)?;
    let pred = pred.expect("distill term evaluated");
    let l_sc = weight_mse(&semantic_weights(&pred, &cfg.segmenter)?, &item.w_x0);
    Ok(LossReport::new(l_distill, l_inverse, l_gt, l_sc, cfg.lambda_sc))
}

/// Losses for a single `(x_0, y)` pair using `cfg.seed` for the noise.
pub fn compute_losses(
    student: &dyn Denoiser,
    teacher: &Teacher,
    x0: &ImageTensor,
    y: &ImageTensor,
    cfg: &TrainingConfig,
) -> Result<LossReport> {
    cfg.validate()?;
    let item = prepare_item(teacher, x0, y, cfg, cfg.seed)?;
    let x_hat_t = detached_inverse(student, &item)?;
    evaluate_student(student, &item, &x_hat_t, cfg)
}

/// Mean loss over `items` at the student's current parameters.
pub fn batch_loss(student: &dyn Denoiser, items: &[PreparedItem], cfg: &TrainingConfig) -> Result<LossReport> {
    let reports = items
        .iter()
        .map(|item| {
            let x_hat_t = detached_inverse(student, item)?;
            evaluate_student(student, item, &x_hat_t, cfg)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(LossReport::mean(&reports, cfg.lambda_sc))
}

fn batch_smooth(
    student: &dyn Denoiser,
    items: &[PreparedItem],
    detached: &[ImageTensor],
    cfg: &TrainingConfig,
    terms: LossTerms,
) -> Result<f64> {
    let mut total = 0.0;
    for (item, x_hat_t) in items.iter().zip(detached) {
        let (d, i, g, _) = smooth_terms(student, item, x_hat_t, cfg, terms)?;
        total += d + i + g;
    }
    Ok(total / items.len() as f64)
}

/// Central finite-difference gradient of the mean of the selected terms over
/// the student's parameters.
///
/// `x̂_T` is computed once at the base parameters and held fixed across all
/// probes. Probes run in parallel; each is a pure function of its perturbed
/// parameters, so the result does not depend on the thread count.
pub fn fd_gradient<D>(student: &D, items: &[PreparedItem], cfg: &TrainingConfig, terms: LossTerms) -> Result<Vec<f64>>
where
    D: Denoiser + Clone,
{
    let detached = items
        .iter()
        .map(|item| detached_inverse(student, item))
        .collect::<Result<Vec<_>>>()?;
    let base = student.params();
    let h = cfg.fd_epsilon;
    (0..base.len())
        .into_par_iter()
        .map(|j| {
            let mut probe = student.clone();
            let mut params = base.clone();
            params[j] = base[j] + h;
            probe.set_params(&params)?;
            let plus = batch_smooth(&probe, items, &detached, cfg, terms)?;
            params[j] = base[j] - h;
            probe.set_params(&params)?;
            let minus = batch_smooth(&probe, items, &detached, cfg, terms)?;
            Ok((plus - minus) / (2.0 * h))
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub student: ToyDenoiser,
    /// Loss at the start of each iteration.
    pub history: Vec<LossReport>,
    /// Loss of the returned student over the whole dataset.
    pub final_report: LossReport,
}

fn prepare_all(teacher: &Teacher, dataset: &[TrainingPair], cfg: &TrainingConfig) -> Result<Vec<PreparedItem>> {
    dataset
        .par_iter()
        .enumerate()
        .map(|(i, pair)| prepare_item(teacher, &pair.x0, &pair.y, cfg, cfg.seed.derive(i as u64)))
        .collect()
}

fn batch_indices(iteration: usize, batch: usize, n: usize) -> Vec<usize> {
    if batch == 0 || batch >= n {
        return (0..n).collect();
    }
    (0..batch).map(|b| (iteration * batch + b) % n).collect()
}

/// Distills a [`ToyDenoiser`] student from `teacher` over `dataset`.
///
/// Item `i` always uses noise seed `cfg.seed.derive(i)`, so the objective is
/// a deterministic function of the parameters.
pub fn train(cfg: &TrainingConfig, dataset: &[TrainingPair], teacher: &Teacher) -> Result<TrainOutcome> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let mut student = match teacher {
        Teacher::Toy(d) => ToyDenoiser::with_params(cfg.schedule.steps, d.params())?,
        _ => ToyDenoiser::zeros(cfg.schedule.steps),
    };
    let items = prepare_all(teacher, dataset, cfg)?;
    let mut history = Vec::with_capacity(cfg.iterations);
    for it in 0..cfg.iterations {
        let batch: Vec<PreparedItem> = batch_indices(it, cfg.batch_size, items.len())
            .into_iter()
            .map(|i| items[i].clone())
            .collect();
        let report = batch_loss(&student, &batch, cfg)?;
        if !report.is_finite() {
            return Err(Error::NonFinite(format!("training loss diverged at iteration {it}")));
        }
        history.push(report);
        let grad = fd_gradient(&student, &batch, cfg, LossTerms::DIFFERENTIABLE)?;
        let params: Vec<f64> = student
            .params()
            .iter()
            .zip(&grad)
            .map(|(p, g)| p - cfg.learning_rate * g)
            .collect();
        if params.iter().any(|p| !p.is_finite()) {
            return Err(Error::NonFinite(format!("parameters diverged at iteration {it}")));
        }
        student.set_params(&params)?;
    }
    let final_report = batch_loss(&student, &items, cfg)?;
    if !final_report.is_finite() {
        return Err(Error::NonFinite("training loss diverged after the last update".into()));
    }
    Ok(TrainOutcome {
        student,
        history,
        final_report,
    })
}

/// Fits a toy teacher by minimizing `MSE(f(x_t, y, t), x_0)` over every step
/// `t` of the forward process, with fixed per-item noise.
pub fn pretrain_teacher(cfg: &TrainingConfig, dataset: &[TrainingPair]) -> Result<(ToyDenoiser, Vec<f64>)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    struct StepSample {
        x0: ImageTensor,
        y: ImageTensor,
        x_t: ImageTensor,
        t: usize,
    }
    let mut samples = Vec::new();
    for (i, pair) in dataset.iter().enumerate() {
        let masks = mask_pipeline(&pair.y.clamped(0.0, 1.0), &cfg.segmenter)?;
        let sched = PixelSchedule::new(&cfg.schedule, &compute_weight_map(&masks)?)?;
        let eps = sample_masked_noise(&masks, pair.y.channels(), cfg.seed.derive(i as u64))?;
        for t in 1..=cfg.schedule.steps {
            samples.push(StepSample {
                x0: pair.x0.clone(),
                y: pair.y.clone(),
                x_t: forward_marginal(&pair.x0, &pair.y, t, &eps, &sched)?,
                t,
            });
        }
    }
    let loss = |d: &ToyDenoiser| -> Result<f64> {
        let mut total = 0.0;
        for s in &samples {
            total += d.predict(&s.x_t, &s.y, s.t)?.mse(&s.x0)?;
        }
        Ok(total / samples.len() as f64)
    };
    let mut teacher = ToyDenoiser::passthrough(cfg.schedule.steps);
    let mut history = Vec::with_capacity(cfg.iterations);
    let h = cfg.fd_epsilon;
    for it in 0..cfg.iterations {
        let current = loss(&teacher)?;
        if !current.is_finite() {
            return Err(Error::NonFinite(format!("teacher loss diverged at iteration {it}")));
        }
        history.push(current);
        let base = teacher.params();
        let grad = (0..base.len())
            .into_par_iter()
            .map(|j| {
                let mut p = base.clone();
                p[j] = base[j] + h;
                let plus = loss(&ToyDenoiser::with_params(teacher.steps(), p.clone())?)?;
                p[j] = base[j] - h;
                let minus = loss(&ToyDenoiser::with_params(teacher.steps(), p)?)?;
                Ok((plus - minus) / (2.0 * h))
            })
            .collect::<Result<Vec<f64>>>()?;
        let next: Vec<f64> = base.iter().zip(&grad).map(|(p, g)| p - cfg.learning_rate * g).collect();
        teacher.set_params(&next)?;
    }
    Ok((teacher, history))
}
