//! Residual-shift schedules and their per-pixel semantic modulation.

use crate::error::{Error, Result};
use crate::tensor::{MaskStack, Plane};

/// Upper bound applied to adjusted transfer rates when clamping is enabled.
pub const ETA_CLAMP: f64 = 1.0 - 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ScheduleConfig {
    /// Number of diffusion steps `T`.
    pub steps: usize,
    pub eta_1: f64,
    pub eta_t: f64,
    /// Warp exponent of the geometric schedule.
    pub p: f64,
    pub kappa: f64,
    /// Strength of the semantic modulation.
    pub m_hyper: f64,
    pub clamp_eta: bool,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            steps: 15,
            eta_1: 0.0016,
            eta_t: 0.9999,
            p: 0.3,
            kappa: 2.0,
            m_hyper: 0.2,
            clamp_eta: false,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.steps < 1 {
            return fail("steps must be >= 1".into());
        }
        if !(self.eta_1 > 0.0 && self.eta_1 < self.eta_t && self.eta_t <= 1.0) {
            return fail(format!(
                "need 0 < eta_1 < eta_T <= 1, got eta_1={} eta_T={}",
                self.eta_1, self.eta_t
            ));
        }
        if !(self.kappa > 0.0 && self.kappa.is_finite()) {
            return fail(format!("kappa must be > 0, got {}", self.kappa));
        }
        if !(0.0..1.0).contains(&self.m_hyper) {
            return fail(format!("m_hyper must lie in [0,1), got {}", self.m_hyper));
        }
        if !(self.p > 0.0 && self.p.is_finite()) {
            return fail(format!("p must be > 0, got {}", self.p));
        }
        Ok(())
    }
}

/// Base transfer rates `η_1..η_T` (index 0 holds `η_1`).
///
/// `sqrt(η_t) = sqrt(η_1) · (sqrt(η_T)/sqrt(η_1))^(((t−1)/(T−1))^p)`; the
/// endpoints are set exactly. A single-step chain is just `[η_T]`.
pub fn build_schedule(cfg: &ScheduleConfig) -> Result<Vec<f64>> {
    cfg.validate()?;
    let t_max = cfg.steps;
    if t_max == 1 {
        return Ok(vec![cfg.eta_t]);
    }
    let ratio = (cfg.eta_t / cfg.eta_1).sqrt();
    let root_1 = cfg.eta_1.sqrt();
    let mut etas: Vec<f64> = (1..=t_max)
        .map(|t| {
            let s = (t - 1) as f64 / (t_max - 1) as f64;
            let root = root_1 * ratio.powf(s.powf(cfg.p));
            root * root
        })
        .collect();
    etas[0] = cfg.eta_1;
    etas[t_max - 1] = cfg.eta_t;
    Ok(etas)
}

/// Per-pixel coverage normalized by its maximum; all zeros for empty coverage.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticWeightMap(Plane);

impl SemanticWeightMap {
    /// Wraps an existing field; values must lie in `[0,1]`.
    pub fn from_plane(plane: Plane) -> Result<Self> {
        if let Some(v) = plane.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidArgument(format!("weight {v} outside [0,1]")));
        }
        Ok(Self(plane))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Self(Plane::filled(height, width, 0.0))
    }

    pub fn plane(&self) -> &Plane {
        &self.0
    }

    pub fn values(&self) -> &[f64] {
        self.0.data()
    }

    pub fn height(&self) -> usize {
        self.0.height()
    }

    pub fn width(&self) -> usize {
        self.0.width()
    }
}

pub fn compute_weight_map(masks: &MaskStack) -> Result<SemanticWeightMap> {
    if !masks.is_binary() {
        return Err(Error::InvalidArgument("weight map needs a binary mask stack".into()));
    }
    let coverage = masks.coverage();
    let max = coverage.data().iter().cloned().fold(0.0, f64::max);
    if max == 0.0 {
        return Ok(SemanticWeightMap::zeros(masks.height(), masks.width()));
    }
    Ok(SemanticWeightMap(coverage.map(|c| c / max)))
}

/// Modulated rate and noise strength:
/// `η·(1 + m·W)` and `κ·(1 − m·W)`, pixelwise.
pub fn adjust(eta: f64, kappa: f64, weights: &SemanticWeightMap, m_hyper: f64, clamp: bool) -> (Plane, Plane) {
    let eta_new = weights.plane().map(|w| {
        let e = eta * (1.0 + m_hyper * w);
        if clamp {
            e.min(ETA_CLAMP)
        } else {
            e
        }
    });
    let kappa_new = weights.plane().map(|w| kappa * (1.0 - m_hyper * w));
    (eta_new, kappa_new)
}

/// Affine weights of one reverse step, applied to `(x̂_0, x_t, y)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ReverseCoeffs {
    pub k: Plane,
    pub m: Plane,
    pub j: Plane,
}

/// Scalar reverse coefficients from `η_{t−1}` and `η_t`.
pub fn reverse_coeffs_scalar(eta_prev: f64, eta_cur: f64) -> Result<(f64, f64, f64)> {
    if !(eta_prev > 0.0 && eta_cur > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "transfer rates must be positive, got {eta_prev} and {eta_cur}"
        )));
    }
    if eta_prev > eta_cur {
        return Err(Error::InvalidArgument(format!(
            "eta_(t-1)={eta_prev} exceeds eta_t={eta_cur}"
        )));
    }
    let root_prod = (eta_prev * eta_cur).sqrt();
    let root_ratio = (eta_prev / eta_cur).sqrt();
    let k = 1.0 - eta_prev + root_prod - root_ratio;
    let m = root_ratio;
    let j = eta_prev - root_prod;
    Ok((k, m, j))
}

pub fn reverse_coeffs(eta_prev: &Plane, eta_cur: &Plane) -> Result<ReverseCoeffs> {
    if (eta_prev.height(), eta_prev.width()) != (eta_cur.height(), eta_cur.width()) {
        return Err(Error::shape(
            format!("{}x{}", eta_prev.height(), eta_prev.width()),
            format!("{}x{}", eta_cur.height(), eta_cur.width()),
        ));
    }
    let n = eta_prev.data().len();
    let (mut k, mut m, mut j) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
    for (&a, &b) in eta_prev.data().iter().zip(eta_cur.data()) {
        let (kk, mm, jj) = reverse_coeffs_scalar(a, b)?;
        k.push(kk);
        m.push(mm);
        j.push(jj);
    }
    let (h, w) = (eta_prev.height(), eta_prev.width());
    Ok(ReverseCoeffs {
        k: Plane::from_parts(h, w, k),
        m: Plane::from_parts(h, w, m),
        j: Plane::from_parts(h, w, j),
    })
}

/// All per-pixel fields one image needs for the forward and reverse process.
#[derive(Debug, Clone)]
pub struct PixelSchedule {
    base: Vec<f64>,
    eta: Vec<Plane>,
    kappa: Plane,
    coeffs: Vec<ReverseCoeffs>,
}

impl PixelSchedule {
    pub fn new(cfg: &ScheduleConfig, weights: &SemanticWeightMap) -> Result<Self> {
        let base = build_schedule(cfg)?;
        let mut eta = Vec::with_capacity(base.len());
        let mut kappa = None;
        for &e in &base {
            let (eta_new, kappa_new) = adjust(e, cfg.kappa, weights, cfg.m_hyper, cfg.clamp_eta);
            eta.push(eta_new);
            kappa.get_or_insert(kappa_new);
        }
        let coeffs = eta
            .windows(2)
            .map(|pair| reverse_coeffs(&pair[0], &pair[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            base,
            eta,
            kappa: kappa.expect("at least one step"),
            coeffs,
        })
    }

    pub fn steps(&self) -> usize {
        self.eta.len()
    }

    pub fn base(&self) -> &[f64] {
        &self.base
    }

    /// Adjusted rate field for step `t` in `1..=T`.
    pub fn eta(&self, t: usize) -> &Plane {
        &self.eta[t - 1]
    }

    pub fn kappa(&self) -> &Plane {
        &self.kappa
    }

    /// Reverse coefficients for step `t` in `2..=T`.
    pub fn coeffs(&self, t: usize) -> &ReverseCoeffs {
        &self.coeffs[t - 2]
    }

    pub fn height(&self) -> usize {
        self.kappa.height()
    }

    pub fn width(&self) -> usize {
        self.kappa.width()
    }
}

/// CSV dump of the base schedule: `t,eta` rows.
pub fn schedule_csv(etas: &[f64]) -> String {
    let mut out = String::from("t,eta\n");
    for (i, e) in etas.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, e));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn cfg() -> ScheduleConfig {
        ScheduleConfig::default()
    }

    #[test]
    fn single_step_schedule() {
        let s = build_schedule(&ScheduleConfig { steps: 1, ..cfg() }).unwrap();
        assert_eq!(s, vec![0.9999]);
    }

    #[test]
    fn p_one_is_geometric_in_root() {
        let s = build_schedule(&ScheduleConfig { p: 1.0, ..cfg() }).unwrap();
        let logs: Vec<f64> = s.iter().map(|e| e.sqrt().ln()).collect();
        let step = logs[1] - logs[0];
        for w in logs.windows(2) {
            assert!((w[1] - w[0] - step).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_form_at_step_eight() {
        let s = build_schedule(&cfg()).unwrap();
        // Independent scalar evaluation in log space.
        let frac: f64 = (7.0f64 / 14.0).powf(0.3);
        let expected = (0.0016f64.ln() + frac * (0.9999f64.ln() - 0.0016f64.ln())).exp();
        assert!((s[7] - expected).abs() < 1e-12 * expected.max(1.0));
        assert_eq!(s[0], 0.0016);
        assert_eq!(s[14], 0.9999);
        assert!(s.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn invalid_configs() {
        for bad in [
            ScheduleConfig { steps: 0, ..cfg() },
            ScheduleConfig { eta_1: 0.0, ..cfg() },
            ScheduleConfig {
                eta_1: 0.99999,
                ..cfg()
            },
            ScheduleConfig { eta_t: 1.5, ..cfg() },
            ScheduleConfig { kappa: 0.0, ..cfg() },
            ScheduleConfig { m_hyper: 1.0, ..cfg() },
            ScheduleConfig { m_hyper: -0.1, ..cfg() },
            ScheduleConfig { p: 0.0, ..cfg() },
        ] {
            assert!(build_schedule(&bad).is_err(), "{bad:?}");
        }
    }

    #[test]
    fn weight_map_examples() {
        let full = MaskStack::new(1, 2, 2, vec![1.0; 4], true).unwrap();
        assert_eq!(compute_weight_map(&full).unwrap().values(), &[1.0; 4]);

        let cov = MaskStack::new(2, 2, 2, vec![1.0, 1.0, 1.0, 0.0, 1.0, 0.0, 0.0, 0.0], true).unwrap();
        assert_eq!(compute_weight_map(&cov).unwrap().values(), &[1.0, 0.5, 0.5, 0.0]);

        let empty = MaskStack::empty(2, 3).unwrap();
        assert_eq!(compute_weight_map(&empty).unwrap().values(), &[0.0; 6]);
    }

    #[test]
    fn adjust_examples() {
        let w1 = SemanticWeightMap::from_plane(Plane::filled(1, 1, 1.0)).unwrap();
        let (e, k) = adjust(0.5, 2.0, &w1, 0.2, false);
        assert!((e.at(0, 0) - 0.6).abs() < 1e-15);
        assert!((k.at(0, 0) - 1.6).abs() < 1e-15);

        let w0 = SemanticWeightMap::zeros(1, 1);
        let (e, k) = adjust(0.5, 2.0, &w0, 0.2, false);
        assert_eq!((e.at(0, 0), k.at(0, 0)), (0.5, 2.0));

        let (e, _) = adjust(0.9999, 2.0, &w1, 0.2, true);
        assert_eq!(e.at(0, 0), ETA_CLAMP);
    }

    #[test]
    fn coefficient_examples() {
        assert_eq!(reverse_coeffs_scalar(0.3, 0.3).unwrap(), (0.0, 1.0, 0.0));
        let (k, m, j) = reverse_coeffs_scalar(0.25, 1.0).unwrap();
        assert_eq!((k, m, j), (0.75, 0.5, -0.25));
        assert!(reverse_coeffs_scalar(0.0, 1.0).is_err());
        assert!(reverse_coeffs_scalar(0.5, 0.4).is_err());
    }

    #[test]
    fn zero_modulation_is_bitwise_baseline() {
        let plane = Plane::new(2, 2, vec![0.0, 0.3, 0.7, 1.0]).unwrap();
        let w = SemanticWeightMap::from_plane(plane).unwrap();
        let c = ScheduleConfig { m_hyper: 0.0, ..cfg() };
        let sched = PixelSchedule::new(&c, &w).unwrap();
        let base = build_schedule(&c).unwrap();
        for t in 1..=c.steps {
            assert!(sched.eta(t).data().iter().all(|&v| v == base[t - 1]));
        }
        assert!(sched.kappa().data().iter().all(|&v| v == c.kappa));
    }

    #[test]
    fn single_pixel_perturbation_is_local() {
        let mut vals = vec![0.5; 9];
        let a = SemanticWeightMap::from_plane(Plane::new(3, 3, vals.clone()).unwrap()).unwrap();
        vals[4] = 0.9;
        let b = SemanticWeightMap::from_plane(Plane::new(3, 3, vals).unwrap()).unwrap();
        let sa = PixelSchedule::new(&cfg(), &a).unwrap();
        let sb = PixelSchedule::new(&cfg(), &b).unwrap();
        for t in 1..=15 {
            for i in 0..9 {
                let same = sa.eta(t).data()[i] == sb.eta(t).data()[i];
                assert_eq!(same, i != 4);
            }
        }
    }

    proptest! {
        #[test]
        fn weight_map_range_and_max(bits in proptest::collection::vec(any::<bool>(), 3 * 16)) {
            let data: Vec<f64> = bits.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let stack = MaskStack::new(3, 4, 4, data, true).unwrap();
            let w = compute_weight_map(&stack).unwrap();
            prop_assert!(w.values().iter().all(|v| (0.0..=1.0).contains(v)));
            if bits.iter().any(|&b| b) {
                prop_assert_eq!(w.values().iter().cloned().fold(0.0, f64::max), 1.0);
            }
        }

        #[test]
        fn pixel_schedule_invariants(ws in proptest::collection::vec(0.0f64..=1.0, 16), m in 0.0f64..0.99, p in 0.1f64..2.0) {
            let w = SemanticWeightMap::from_plane(Plane::new(4, 4, ws).unwrap()).unwrap();
            let c = ScheduleConfig { m_hyper: m, p, ..cfg() };
            let s = PixelSchedule::new(&c, &w).unwrap();
            for t in 2..=c.steps {
                for i in 0..16 {
                    prop_assert!(s.eta(t).data()[i] > s.eta(t - 1).data()[i]);
                    let co = s.coeffs(t);
                    let sum = co.k.data()[i] + co.m.data()[i] + co.j.data()[i];
                    prop_assert!((sum - 1.0).abs() <= 1e-9);
                }
            }
        }
    }
}
