use proptest::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use samsr_core::baseline::uniform_sample_trajectory;
use samsr_core::diffusion::{forward_init, forward_marginal, reverse_chain, reverse_step, sample, sample_trajectory};
use samsr_core::noise::sample_masked_noise;
use samsr_core::schedule::compute_weight_map;
use samsr_core::{
    Denoiser, ImageTensor, MaskStack, NoiseSeed, OracleDenoiser, PixelSchedule, Plane, ScheduleConfig,
    SemanticWeightMap, ToyDenoiser,
};

fn uniform(rng: &mut ChaCha8Rng) -> f64 {
    (rng.next_u64() >> 11) as f64 / (1u64 << 53) as f64
}

fn random_image(rng: &mut ChaCha8Rng, c: usize, h: usize, w: usize) -> ImageTensor {
    let data = (0..c * h * w).map(|_| uniform(rng)).collect();
    ImageTensor::new(c, h, w, data).unwrap()
}

fn random_masks(rng: &mut ChaCha8Rng, m: usize, h: usize, w: usize) -> MaskStack {
    let masks: Vec<Vec<bool>> = (0..m)
        .map(|_| (0..h * w).map(|_| rng.next_u32().is_multiple_of(3)).collect())
        .collect();
    MaskStack::from_bool_masks(h, w, &masks).unwrap()
}

fn max_abs_diff(a: &ImageTensor, b: &ImageTensor) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[test]
fn reverse_step_transports_forward_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (h, w) = (6, 7);
    let x0 = random_image(&mut rng, 3, h, w);
    let y = random_image(&mut rng, 3, h, w);
    let eps = ImageTensor::new(3, h, w, (0..3 * h * w).map(|_| 2.0 * uniform(&mut rng) - 1.0).collect()).unwrap();
    for m_hyper in [0.0, 0.2, 0.5, 0.9] {
        let weights =
            SemanticWeightMap::from_plane(Plane::new(h, w, (0..h * w).map(|_| uniform(&mut rng)).collect()).unwrap())
                .unwrap();
        let cfg = ScheduleConfig {
            m_hyper,
            ..ScheduleConfig::default()
        };
        let sched = PixelSchedule::new(&cfg, &weights).unwrap();
        for t in 2..=cfg.steps {
            let x_t = forward_marginal(&x0, &y, t, &eps, &sched).unwrap();
            let prev = reverse_step(&x_t, &x0, &y, sched.coeffs(t)).unwrap();
            let want = forward_marginal(&x0, &y, t - 1, &eps, &sched).unwrap();
            assert!(max_abs_diff(&prev, &want) <= 1e-9, "m={m_hyper} t={t}");
        }
        // Initialization is the marginal at T with x_0 replaced by y.
        let init = forward_init(&y, &eps, &sched).unwrap();
        assert!(max_abs_diff(&init, &forward_marginal(&y, &y, cfg.steps, &eps, &sched).unwrap()) <= 1e-12);
    }
}

#[test]
fn oracle_chain_tracks_the_forward_marginals() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (h, w) = (8, 8);
    let x0 = random_image(&mut rng, 3, h, w);
    let y = random_image(&mut rng, 3, h, w);
    let masks = random_masks(&mut rng, 4, h, w);
    let cfg = ScheduleConfig::default();
    let sched = PixelSchedule::new(&cfg, &compute_weight_map(&masks).unwrap()).unwrap();
    let seed = NoiseSeed(3);
    let eps = sample_masked_noise(&masks, 3, seed).unwrap();
    let oracle = OracleDenoiser::new(x0.clone());
    let traj = sample_trajectory(&y, &masks, &oracle, &cfg, seed, cfg.steps).unwrap();
    assert_eq!(traj.states.len(), cfg.steps);
    // x_T differs from the forward marginal at T by (1 − η_T)(x_0 − y); each
    // oracle step scales that offset by sqrt(η_{t−1}/η_t).
    let top = forward_marginal(&x0, &y, cfg.steps, &eps, &sched).unwrap();
    let n = h * w;
    for (k, state) in traj.states.iter().enumerate() {
        let t = cfg.steps - k;
        let marginal = forward_marginal(&x0, &y, t, &eps, &sched).unwrap();
        let want = ImageTensor::new(
            3,
            h,
            w,
            (0..3 * n)
                .map(|i| {
                    let ratio = (sched.eta(t).data()[i % n] / sched.eta(cfg.steps).data()[i % n]).sqrt();
                    marginal.data()[i] + ratio * (traj.states[0].data()[i] - top.data()[i])
                })
                .collect(),
        )
        .unwrap();
        assert!(max_abs_diff(state, &want) <= 1e-9, "t={t}");
    }
    assert!(max_abs_diff(&traj.x0_hat, &x0) <= 1e-9);
}

#[test]
fn zero_modulation_without_masks_is_the_uniform_baseline() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let y = random_image(&mut rng, 3, 5, 6);
    let params: Vec<f64> = (0..38).map(|_| 0.2 * (uniform(&mut rng) - 0.5)).collect();
    let den = ToyDenoiser::with_params(15, params).unwrap();
    let cfg = ScheduleConfig {
        m_hyper: 0.0,
        ..ScheduleConfig::default()
    };
    let empty = MaskStack::empty(5, 6).unwrap();
    for steps in [1, cfg.steps] {
        let pixel = sample_trajectory(&y, &empty, &den, &cfg, NoiseSeed(9), steps).unwrap();
        let scalar = uniform_sample_trajectory(&y, &den, &cfg, NoiseSeed(9), steps).unwrap();
        assert_eq!(pixel.states.len(), scalar.states.len());
        for (a, b) in pixel.states.iter().zip(&scalar.states) {
            assert_eq!(a.data(), b.data());
        }
        assert_eq!(pixel.x0_hat.data(), scalar.x0_hat.data());
    }
}

#[test]
fn sampling_is_thread_count_independent() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let y = random_image(&mut rng, 3, 8, 8);
    let masks = random_masks(&mut rng, 40, 8, 8);
    let den = ToyDenoiser::passthrough(15);
    let cfg = ScheduleConfig::default();
    let run = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| sample(&y, &masks, &den, &cfg, NoiseSeed(11), 15).unwrap())
    };
    assert_eq!(run(1).data(), run(3).data());
}

#[test]
fn chain_uses_each_step_once_in_descending_order() {
    use std::sync::Mutex;
    struct Recorder(Mutex<Vec<usize>>, OracleDenoiser);
    impl Denoiser for Recorder {
        fn predict(&self, x_t: &ImageTensor, y: &ImageTensor, t: usize) -> samsr_core::Result<ImageTensor> {
            self.0.lock().unwrap().push(t);
            self.1.predict(x_t, y, t)
        }
    }
    let y = ImageTensor::filled(1, 3, 3, 0.4).unwrap();
    let rec = Recorder(
        Mutex::new(Vec::new()),
        OracleDenoiser::new(ImageTensor::filled(1, 3, 3, 0.6).unwrap()),
    );
    let cfg = ScheduleConfig::default();
    let sched = PixelSchedule::new(&cfg, &SemanticWeightMap::zeros(3, 3)).unwrap();
    reverse_chain(&rec, y.clone(), &y, &sched).unwrap();
    let calls = rec.0.into_inner().unwrap();
    assert_eq!(calls, (1..=15).rev().collect::<Vec<_>>());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn trajectories_stay_finite(
        seed in any::<u64>(),
        m_hyper in 0.0f64..0.95,
        p in 0.1f64..3.0,
        kappa in 0.05f64..4.0,
        steps in 1usize..20,
        clamp in any::<bool>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let y = random_image(&mut rng, 3, 6, 6);
        let masks = random_masks(&mut rng, 3, 6, 6);
        let params: Vec<f64> = (0..38).map(|_| uniform(&mut rng) - 0.5).collect();
        let den = ToyDenoiser::with_params(steps, params).unwrap();
        let cfg = ScheduleConfig { steps, p, kappa, m_hyper, clamp_eta: clamp, ..ScheduleConfig::default() };
        let traj = sample_trajectory(&y, &masks, &den, &cfg, NoiseSeed(seed), steps).unwrap();
        for s in &traj.states {
            prop_assert!(s.data().iter().all(|v| v.is_finite()));
        }
        prop_assert!(traj.x0_hat.data().iter().all(|v| v.is_finite()));
    }
}
