use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::Args;
use rayon::prelude::*;
use samsr_core::config::RunConfig;
use samsr_core::dataset::{condition_on_grid, load_pair_dir, synthetic_training_set, TrainingPair};
use samsr_core::diffusion::{forward_marginal, sample};
use samsr_core::io::{atomic_write, load_image, save_image, save_mask_dir, visualize};
use samsr_core::metrics::evaluate;
use samsr_core::noise::sample_masked_noise_detailed;
use samsr_core::resample::bicubic_upscale;
use samsr_core::schedule::{build_schedule, compute_weight_map, schedule_csv};
use samsr_core::segmentation::mask_pipeline;
use samsr_core::tensorfile::{load_params, save_params, save_tensor};
use samsr_core::training::{pretrain_teacher, train as run_training, LossReport, Teacher};
use samsr_core::{Error, ImageTensor, MaskStack, NoiseSeed, PixelSchedule, SegmenterMode, ToyDenoiser};

use crate::DataArgs;

fn set_path(cfg: &mut Option<PathBuf>, flag: &Option<PathBuf>) {
    if flag.is_some() {
        cfg.clone_from(flag);
    }
}

fn required<'a>(p: &'a Option<PathBuf>, what: &str) -> Result<&'a Path> {
    p.as_deref()
        .ok_or_else(|| Error::Config(format!("missing {what} (pass the flag or set the config key)")).into())
}

/// Loads the LR input and upscales it onto the diffusion grid.
fn conditioned_input(cfg: &RunConfig) -> Result<ImageTensor> {
    let lr = load_image(required(&cfg.input, "--input")?)?;
    Ok(bicubic_upscale(&lr, cfg.scale)?)
}

fn masks_for(y: &ImageTensor, cfg: &RunConfig) -> Result<MaskStack> {
    let masks = mask_pipeline(&y.clamped(0.0, 1.0), &cfg.segmenter)?;
    eprintln!(
        "masks: {} on a {}x{} grid",
        masks.count(),
        masks.height(),
        masks.width()
    );
    if masks.count() == 0 {
        eprintln!("warning: no masks available; semantic modulation is disabled");
    }
    Ok(masks)
}

fn save_field(field: &ImageTensor, path: &Path) -> Result<()> {
    save_tensor(field, path)?;
    let png = path.with_extension("png");
    save_image(&visualize(field), &png, true)?;
    eprintln!("wrote {} and {}", path.display(), png.display());
    Ok(())
}

fn denoiser(cfg: &RunConfig) -> Result<ToyDenoiser> {
    match &cfg.params {
        Some(path) => {
            let d = load_params(path)?;
            if d.steps() != cfg.schedule.steps {
                bail!(Error::Config(format!(
                    "parameters in {} were fitted for {} steps, config has {}",
                    path.display(),
                    d.steps(),
                    cfg.schedule.steps
                )));
            }
            Ok(d)
        }
        None => {
            eprintln!("note: no --params given; using the passthrough denoiser");
            Ok(ToyDenoiser::passthrough(cfg.schedule.steps))
        }
    }
}

fn load_data(args: &DataArgs, cfg: &RunConfig) -> Result<Vec<TrainingPair>> {
    let pairs = match (args.synthetic, &cfg.data_dir) {
        (Some(n), _) => synthetic_training_set(n, args.size, args.channels, cfg.seed)?,
        (None, Some(dir)) => load_pair_dir(dir)?,
        (None, None) => bail!(Error::Config("pass --data-dir or --synthetic N".into())),
    };
    if pairs.is_empty() {
        bail!(Error::InvalidArgument("dataset is empty".into()));
    }
    eprintln!("dataset: {} pairs", pairs.len());
    Ok(pairs)
}

fn history_csv(history: &[LossReport]) -> String {
    let mut out = String::from("iteration,l_distill,l_inverse,l_gt,l_sc,total\n");
    for (i, r) in history.iter().enumerate() {
        let _ = writeln!(
            out,
            "{i},{:.12e},{:.12e},{:.12e},{:.12e},{:.12e}",
            r.l_distill, r.l_inverse, r.l_gt, r.l_sc, r.total
        );
    }
    out
}

#[derive(Debug, Args)]
pub struct SegmentArgs {
    /// LR input image.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output mask directory.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Upscaling factor from the input to the diffusion grid.
    #[arg(long)]
    scale: Option<usize>,
}

impl SegmentArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> &'static str {
        set_path(&mut cfg.input, &self.input);
        set_path(&mut cfg.output, &self.output);
        if let Some(s) = self.scale {
            cfg.scale = s;
        }
        "segment"
    }
}

pub fn segment(_: &SegmentArgs, cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.output, "--output")?;
    let y = conditioned_input(cfg)?;
    let masks = masks_for(&y, cfg)?;
    std::fs::create_dir_all(out).map_err(|e| Error::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    save_mask_dir(&masks, out)?;
    eprintln!("wrote {} masks to {}", masks.count(), out.display());
    Ok(())
}

#[derive(Debug, Args)]
pub struct NoiseArgs {
    /// LR input image.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output tensor file; a `.png` visualization is written beside it.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    scale: Option<usize>,
}

impl NoiseArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> &'static str {
        set_path(&mut cfg.input, &self.input);
        set_path(&mut cfg.output, &self.output);
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.scale {
            cfg.scale = s;
        }
        "noise"
    }
}

pub fn noise(_: &NoiseArgs, cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.output, "--output")?;
    let y = conditioned_input(cfg)?;
    let masks = masks_for(&y, cfg)?;
    let noise = sample_masked_noise_detailed(&masks, y.channels(), NoiseSeed(cfg.seed))?;
    if noise.fallback {
        eprintln!("warning: masked noise unavailable; used unmasked standard normal noise");
    }
    save_field(&noise.field, out)
}

#[derive(Debug, Args)]
pub struct WeightsArgs {
    /// LR input image; may be omitted in load mode when `--shape` is given.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output tensor file; a `.png` heatmap is written beside it.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Diffusion grid size as HxW, used without `--input`.
    #[arg(long, value_name = "HxW")]
    shape: Option<String>,
    /// Also write the base schedule as `t,eta` CSV.
    #[arg(long, value_name = "FILE")]
    schedule_csv: Option<PathBuf>,
    #[arg(long)]
    scale: Option<usize>,
}

impl WeightsArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> &'static str {
        set_path(&mut cfg.input, &self.input);
        set_path(&mut cfg.output, &self.output);
        if let Some(s) = self.scale {
            cfg.scale = s;
        }
        "weights"
    }
}

fn parse_shape(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::Config(format!("--shape expects HxW, got `{s}`"));
    let (h, w) = s.split_once('x').ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        bail!(bad());
    }
    Ok((h, w))
}

pub fn weights(args: &WeightsArgs, cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.output, "--output")?;
    let grid = match (&cfg.input, &args.shape) {
        (Some(_), _) => conditioned_input(cfg)?,
        (None, Some(shape)) => {
            if cfg.segmenter.mode != SegmenterMode::Load {
                bail!(Error::Config("--shape without --input requires seg_mode = load".into()));
            }
            let (h, w) = parse_shape(shape)?;
            ImageTensor::zeros(1, h, w)?
        }
        (None, None) => bail!(Error::Config("missing --input (or --shape in load mode)".into())),
    };
    let masks = masks_for(&grid, cfg)?;
    let w = compute_weight_map(&masks)?;
    let (lo, hi) = w
        .values()
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    eprintln!("weights: min {lo} max {hi}");
    let field = w.plane().to_image();
    save_tensor(&field, out)?;
    let png = out.with_extension("png");
    save_image(&field, &png, true)?;
    eprintln!("wrote {} and {}", out.display(), png.display());
    if let Some(path) = &args.schedule_csv {
        atomic_write(path, schedule_csv(&build_schedule(&cfg.schedule)?).as_bytes())?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct ForwardArgs {
    /// LR observation.
    #[arg(long)]
    input: Option<PathBuf>,
    /// HR image to corrupt; its size must be an integer multiple of the LR size.
    #[arg(long)]
    target: PathBuf,
    /// Forward step in 1..=steps.
    #[arg(long)]
    t: usize,
    /// Output tensor file; a `.png` visualization is written beside it.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

impl ForwardArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> &'static str {
        set_path(&mut cfg.input, &self.input);
        set_path(&mut cfg.output, &self.output);
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        "forward"
    }
}

pub fn forward(args: &ForwardArgs, cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.output, "--output")?;
    let lr = load_image(required(&cfg.input, "--input")?)?;
    let x0 = load_image(&args.target)?;
    let y = condition_on_grid(&lr, &x0)?;
    let masks = masks_for(&y, cfg)?;
    let sched = PixelSchedule::new(&cfg.schedule, &compute_weight_map(&masks)?)?;
    let noise = sample_masked_noise_detailed(&masks, y.channels(), NoiseSeed(cfg.seed))?;
    let x_t = forward_marginal(&x0, &y, args.t, &noise.field, &sched)?;
    save_field(&x_t, out)
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// LR input image.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Output PNG.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Denoiser calls: 1 or the schedule length.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Toy denoiser parameter file.
    #[arg(long)]
    params: Option<PathBuf>,
    #[arg(long)]
    scale: Option<usize>,
    /// Also write the raw prediction as a tensor file.
    #[arg(long, value_name = "FILE")]
    tensor_output: Option<PathBuf>,
}

impl SampleArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> &'static str {
        set_path(&mut cfg.input, &self.input);
        set_path(&mut cfg.output, &self.output);
        set_path(&mut cfg.params, &self.params);
        if let Some(s) = self.steps {
            cfg.sample_steps = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(s) = self.scale {
            cfg.scale = s;
        }
        "sample"
    }
}

pub fn sample_cmd(args: &SampleArgs, cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.output, "--output")?;
    let y = conditioned_input(cfg)?;
    let masks = masks_for(&y, cfg)?;
    let den = denoiser(cfg)?;
    let x0_hat = sample(&y, &masks, &den, &cfg.schedule, NoiseSeed(cfg.seed), cfg.sample_steps)?;
    save_image(&x0_hat, out, cfg.clamp_on_save)?;
    eprintln!("wrote {}", out.display());
    if let Some(path) = &args.tensor_output {
        save_tensor(&x0_hat, path)?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// `oracle` uses each pair's ground truth; `toy` needs `--teacher-params`.
    #[arg(long, default_value = "oracle", value_parser = ["oracle", "toy"])]
    teacher: String,
    #[arg(long, value_name = "FILE")]
    teacher_params: Option<PathBuf>,
    /// Output parameter file for the student.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write per-iteration losses as CSV.
    #[arg(long, value_name = "FILE")]
    history: Option<PathBuf>,
}

impl TrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> &'static str {
        set_path(&mut cfg.output, &self.output);
        set_path(&mut cfg.data_dir, &self.data.data_dir);
        if let Some(n) = self.iterations {
            cfg.iterations = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        "train"
    }
}

fn log_history(history: &[LossReport]) {
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        eprintln!(
            "loss: iteration 0 total {:.6}, iteration {} total {:.6}",
            first.total,
            history.len() - 1,
            last.total
        );
    }
}

pub fn train(args: &TrainArgs, cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.output, "--output")?;
    let data = load_data(&args.data, cfg)?;
    let teacher = match args.teacher.as_str() {
        "toy" => {
            let path = args
                .teacher_params
                .as_ref()
                .ok_or_else(|| Error::Config("--teacher toy requires --teacher-params".into()))?;
            Teacher::Toy(load_params(path)?)
        }
        _ => Teacher::Oracle,
    };
    let outcome = run_training(&cfg.training(), &data, &teacher)?;
    log_history(&outcome.history);
    eprintln!("loss: final total {:.6}", outcome.final_report.total);
    save_params(&outcome.student, out)?;
    eprintln!("wrote {}", out.display());
    if let Some(path) = &args.history {
        atomic_write(path, history_csv(&outcome.history).as_bytes())?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Output parameter file for the teacher.
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    iterations: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the per-iteration loss as CSV.
    #[arg(long, value_name = "FILE")]
    history: Option<PathBuf>,
}

impl PretrainArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> &'static str {
        set_path(&mut cfg.output, &self.output);
        set_path(&mut cfg.data_dir, &self.data.data_dir);
        if let Some(n) = self.iterations {
            cfg.iterations = n;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        "pretrain-teacher"
    }
}

pub fn pretrain(args: &PretrainArgs, cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.output, "--output")?;
    let data = load_data(&args.data, cfg)?;
    let (teacher, history) = pretrain_teacher(&cfg.training(), &data)?;
    if let (Some(first), Some(last)) = (history.first(), history.last()) {
        eprintln!(
            "loss: iteration 0 {first:.6}, iteration {} {last:.6}",
            history.len() - 1
        );
    }
    save_params(&teacher, out)?;
    eprintln!("wrote {}", out.display());
    if let Some(path) = &args.history {
        let mut csv = String::from("iteration,loss\n");
        for (i, l) in history.iter().enumerate() {
            let _ = writeln!(csv, "{i},{l:.12e}");
        }
        atomic_write(path, csv.as_bytes())?;
        eprintln!("wrote {}", path.display());
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Reference image, or a directory of reference PNGs.
    #[arg(long)]
    reference: PathBuf,
    /// Image under test, or a directory of PNGs with matching names.
    #[arg(long)]
    input: PathBuf,
    /// Write the CSV here instead of stdout.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn png_names(dir: &Path) -> Result<Vec<String>> {
    let mut names: Vec<String> = std::fs::read_dir(dir)
        .map_err(|e| Error::Io {
            path: dir.to_path_buf(),
            source: e,
        })?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().to_str().map(str::to_owned))
        .filter(|n| n.ends_with(".png"))
        .collect();
    names.sort();
    Ok(names)
}

pub fn metrics(args: &MetricsArgs) -> Result<()> {
    let pairs: Vec<(String, PathBuf, PathBuf)> = match (args.reference.is_dir(), args.input.is_dir()) {
        (true, true) => png_names(&args.reference)?
            .into_iter()
            .filter(|n| args.input.join(n).is_file())
            .map(|n| (n.clone(), args.reference.join(&n), args.input.join(&n)))
            .collect(),
        (false, false) => {
            let name = args
                .input
                .file_name()
                .map(|n| n.to_string_lossy().into_owned())
                .unwrap_or_default();
            vec![(name, args.reference.clone(), args.input.clone())]
        }
        _ => bail!(Error::Config(
            "--reference and --input must both be files or both be directories".into()
        )),
    };
    if pairs.is_empty() {
        bail!(Error::InvalidArgument(
            "no matching PNG names in the two directories".into()
        ));
    }
    let rows = pairs
        .par_iter()
        .map(|(name, a, b)| {
            let r = evaluate(&load_image(a)?, &load_image(b)?).with_context(|| format!("comparing {name}"))?;
            Ok(format!("{name},{:.6},{:.6}\n", r.psnr, r.ssim))
        })
        .collect::<Result<Vec<String>>>()?;
    let csv = format!("filename,psnr,ssim\n{}", rows.concat());
    match &args.output {
        Some(path) => {
            atomic_write(path, csv.as_bytes())?;
            eprintln!("wrote {}", path.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Comma-separated m_hyper values; defaults to the config value.
    #[arg(long, value_delimiter = ',')]
    m: Vec<f64>,
    /// Comma-separated schedule exponents.
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
    /// Comma-separated noise strengths.
    #[arg(long, value_delimiter = ',')]
    kappa: Vec<f64>,
    /// Output CSV.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Toy denoiser parameter file.
    #[arg(long)]
    params: Option<PathBuf>,
    /// Denoiser calls per sample: 1 or the schedule length.
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
}

impl SweepArgs {
    pub fn apply(&self, cfg: &mut RunConfig) -> &'static str {
        set_path(&mut cfg.output, &self.output);
        set_path(&mut cfg.params, &self.params);
        set_path(&mut cfg.data_dir, &self.data.data_dir);
        if let Some(s) = self.steps {
            cfg.sample_steps = s;
        }
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        "sweep"
    }
}

struct GridPoint {
    m: f64,
    p: f64,
    kappa: f64,
}

pub fn sweep(args: &SweepArgs, cfg: &RunConfig) -> Result<()> {
    let out = required(&cfg.output, "--output")?;
    let or_default = |v: &Vec<f64>, d: f64| if v.is_empty() { vec![d] } else { v.clone() };
    let ms = or_default(&args.m, cfg.schedule.m_hyper);
    let ps = or_default(&args.p, cfg.schedule.p);
    let kappas = or_default(&args.kappa, cfg.schedule.kappa);
    let mut grid = Vec::new();
    for &m in &ms {
        for &p in &ps {
            for &kappa in &kappas {
                let mut s = cfg.schedule.clone();
                s.m_hyper = m;
                s.p = p;
                s.kappa = kappa;
                s.validate()
                    .with_context(|| format!("grid point m={m} p={p} kappa={kappa}"))?;
                grid.push(GridPoint { m, p, kappa });
            }
        }
    }
    let data = load_data(&args.data, cfg)?;
    let den = denoiser(cfg)?;
    let masks: Vec<MaskStack> = data
        .par_iter()
        .map(|pair| Ok(mask_pipeline(&pair.y.clamped(0.0, 1.0), &cfg.segmenter)?))
        .collect::<Result<_>>()?;
    eprintln!("sweep: {} grid points over {} images", grid.len(), data.len());

    let rows: Vec<(f64, f64)> = grid
        .par_iter()
        .map(|g| {
            let mut s = cfg.schedule.clone();
            s.m_hyper = g.m;
            s.p = g.p;
            s.kappa = g.kappa;
            let mut psnr = 0.0;
            let mut ssim = 0.0;
            for (i, (pair, mk)) in data.iter().zip(&masks).enumerate() {
                let seed = NoiseSeed(cfg.seed).derive(i as u64);
                let pred = sample(&pair.y, mk, &den, &s, seed, cfg.sample_steps)?;
                let r = evaluate(&pair.x0, &pred)?;
                psnr += r.psnr;
                ssim += r.ssim;
            }
            let n = data.len() as f64;
            Ok((psnr / n, ssim / n))
        })
        .collect::<Result<_>>()?;

    let mut csv = String::from("m_hyper,p,kappa,psnr,ssim,n\n");
    for (g, (psnr, ssim)) in grid.iter().zip(&rows) {
        let _ = writeln!(csv, "{},{},{},{psnr:.6},{ssim:.6},{}", g.m, g.p, g.kappa, data.len());
    }
    atomic_write(out, csv.as_bytes())?;
    eprintln!("wrote {} ({} rows)", out.display(), grid.len());
    Ok(())
}
