//! Flat `key = value` run configuration.
//!
//! One entry per line; blank lines and lines starting with `#` are ignored.
//! Unknown keys are rejected. [`RunConfig::to_text`] writes every key, and
//! parsing that text yields an identical config.

use std::path::PathBuf;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::noise::NoiseSeed;
use crate::schedule::ScheduleConfig;
use crate::segmentation::{SegmenterConfig, SegmenterMode};
use crate::training::TrainingConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub schedule: ScheduleConfig,
    pub segmenter: SegmenterConfig,
    pub lambda_sc: f64,
    pub learning_rate: f64,
    pub iterations: usize,
    pub batch_size: usize,
    pub fd_epsilon: f64,
    pub seed: u64,
    /// Upscale factor from an LR input to the diffusion grid.
    pub scale: usize,
    /// Reverse steps used by `sample`: 1 or `steps`.
    pub sample_steps: usize,
    pub clamp_on_save: bool,
    pub input: Option<PathBuf>,
    pub output: Option<PathBuf>,
    pub params: Option<PathBuf>,
    pub data_dir: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let training = TrainingConfig::default();
        Self {
            schedule: ScheduleConfig::default(),
            segmenter: SegmenterConfig::default(),
            lambda_sc: training.lambda_sc,
            learning_rate: training.learning_rate,
            iterations: training.iterations,
            batch_size: training.batch_size,
            fd_epsilon: training.fd_epsilon,
            seed: 0,
            scale: 4,
            sample_steps: 1,
            clamp_on_save: true,
            input: None,
            output: None,
            params: None,
            data_dir: None,
        }
    }
}

/// Every accepted key, in dump order.
pub const KEYS: &[&str] = &[
    "steps",
    "eta_1",
    "eta_T",
    "p",
    "kappa",
    "m_hyper",
    "clamp_eta",
    "seg_mode",
    "mask_dir",
    "quant_levels",
    "min_region_px",
    "max_masks",
    "threshold_t",
    "lambda_sc",
    "learning_rate",
    "iterations",
    "batch_size",
    "fd_epsilon",
    "seed",
    "scale",
    "sample_steps",
    "clamp_on_save",
    "input",
    "output",
    "params",
    "data_dir",
];

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("cannot parse `{value}` for key `{key}`")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(Error::Config(format!(
            "cannot parse `{value}` as a flag for key `{key}`"
        ))),
    }
}

fn opt_path(value: &str) -> Option<PathBuf> {
    (!value.is_empty()).then(|| PathBuf::from(value))
}

fn show_path(p: &Option<PathBuf>) -> String {
    p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
}

impl RunConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let value = value.trim();
        match key {
            "steps" => self.schedule.steps = parse_value(key, value)?,
            "eta_1" => self.schedule.eta_1 = parse_value(key, value)?,
            "eta_T" => self.schedule.eta_t = parse_value(key, value)?,
            "p" => self.schedule.p = parse_value(key, value)?,
            "kappa" => self.schedule.kappa = parse_value(key, value)?,
            "m_hyper" => self.schedule.m_hyper = parse_value(key, value)?,
            "clamp_eta" => self.schedule.clamp_eta = parse_bool(key, value)?,
            "seg_mode" => self.segmenter.mode = SegmenterMode::from_str(value)?,
            "mask_dir" => self.segmenter.mask_dir = opt_path(value),
            "quant_levels" => self.segmenter.quant_levels = parse_value(key, value)?,
            "min_region_px" => self.segmenter.min_region_px = parse_value(key, value)?,
            "max_masks" => self.segmenter.max_masks = parse_value(key, value)?,
            "threshold_t" => self.segmenter.threshold_t = parse_value(key, value)?,
            "lambda_sc" => self.lambda_sc = parse_value(key, value)?,
            "learning_rate" => self.learning_rate = parse_value(key, value)?,
            "iterations" => self.iterations = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "fd_epsilon" => self.fd_epsilon = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "scale" => self.scale = parse_value(key, value)?,
            "sample_steps" => self.sample_steps = parse_value(key, value)?,
            "clamp_on_save" => self.clamp_on_save = parse_bool(key, value)?,
            "input" => self.input = opt_path(value),
            "output" => self.output = opt_path(value),
            "params" => self.params = opt_path(value),
            "data_dir" => self.data_dir = opt_path(value),
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let s = &self.schedule;
        let g = &self.segmenter;
        Some(match key {
            "steps" => s.steps.to_string(),
            "eta_1" => s.eta_1.to_string(),
            "eta_T" => s.eta_t.to_string(),
            "p" => s.p.to_string(),
            "kappa" => s.kappa.to_string(),
            "m_hyper" => s.m_hyper.to_string(),
            "clamp_eta" => s.clamp_eta.to_string(),
            "seg_mode" => g.mode.to_string(),
            "mask_dir" => show_path(&g.mask_dir),
            "quant_levels" => g.quant_levels.to_string(),
            "min_region_px" => g.min_region_px.to_string(),
            "max_masks" => g.max_masks.to_string(),
            "threshold_t" => g.threshold_t.to_string(),
            "lambda_sc" => self.lambda_sc.to_string(),
            "learning_rate" => self.learning_rate.to_string(),
            "iterations" => self.iterations.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "fd_epsilon" => self.fd_epsilon.to_string(),
            "seed" => self.seed.to_string(),
            "scale" => self.scale.to_string(),
            "sample_steps" => self.sample_steps.to_string(),
            "clamp_on_save" => self.clamp_on_save.to_string(),
            "input" => show_path(&self.input),
            "output" => show_path(&self.output),
            "params" => show_path(&self.params),
            "data_dir" => show_path(&self.data_dir),
            _ => return None,
        })
    }

    /// Applies every `key = value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", lineno + 1)))?;
            self.set(key.trim(), value)?;
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn to_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        self.schedule.validate()?;
        self.segmenter.validate()?;
        if self.scale < 1 {
            return Err(Error::Config("scale must be >= 1".into()));
        }
        if self.sample_steps != 1 && self.sample_steps != self.schedule.steps {
            return Err(Error::Config(format!(
                "sample_steps must be 1 or steps ({}), got {}",
                self.schedule.steps, self.sample_steps
            )));
        }
        self.training().validate()
    }

    pub fn training(&self) -> TrainingConfig {
        TrainingConfig {
            lambda_sc: self.lambda_sc,
            learning_rate: self.learning_rate,
            iterations: self.iterations,
            batch_size: self.batch_size,
            fd_epsilon: self.fd_epsilon,
            seed: NoiseSeed(self.seed),
            schedule: self.schedule.clone(),
            segmenter: self.segmenter.clone(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_validate_and_dump_every_key() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let text = cfg.to_text();
        for k in KEYS {
            assert!(text.contains(&format!("{k} = ")), "{k}");
        }
        assert_eq!(RunConfig::parse(&text).unwrap(), cfg);
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(RunConfig::parse("nope = 1").is_err());
        assert!(RunConfig::parse("kappa = two").is_err());
        assert!(RunConfig::parse("kappa").is_err());
        assert!(RunConfig::parse("clamp_eta = maybe").is_err());
        assert!(RunConfig::parse("seg_mode = sam").is_err());
    }

    #[test]
    fn comments_and_overrides() {
        let cfg = RunConfig::parse("# a comment\n\nkappa = 1.5\nm_hyper=0.125\nmask_dir = masks/a b\n").unwrap();
        assert_eq!(cfg.schedule.kappa, 1.5);
        assert_eq!(cfg.schedule.m_hyper, 0.125);
        assert_eq!(cfg.segmenter.mask_dir, Some(PathBuf::from("masks/a b")));
        let mut cfg = cfg;
        cfg.set("kappa", "3").unwrap();
        assert_eq!(cfg.schedule.kappa, 3.0);
    }

    #[test]
    fn invalid_combinations() {
        let cfg = RunConfig {
            sample_steps: 4,
            ..RunConfig::default()
        };
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.schedule.m_hyper = 1.2;
        assert!(cfg.validate().is_err());
    }

    proptest! {
        #[test]
        fn dump_load_is_lossless(kappa in 0.001f64..10.0, m in 0.0f64..0.99, p in 0.01f64..3.0,
                                 lr in 0.0f64..1.0, seed in any::<u64>(), steps in 1usize..50,
                                 clamp in any::<bool>()) {
            let mut cfg = RunConfig::default();
            cfg.schedule.kappa = kappa;
            cfg.schedule.m_hyper = m;
            cfg.schedule.p = p;
            cfg.schedule.steps = steps;
            cfg.schedule.clamp_eta = clamp;
            cfg.learning_rate = lr;
            cfg.seed = seed;
            cfg.output = Some(PathBuf::from("out/x.png"));
            let back = RunConfig::parse(&cfg.to_text()).unwrap();
            prop_assert_eq!(back, cfg);
        }
    }
}
