//! Semantic-mask guided residual-shift diffusion for image super-resolution.
//!
//! Segmentation masks of the low-resolution input shape both the noise used
//! to initialize the diffusion state and a per-pixel modulation of the
//! residual transfer rate and noise strength. The reverse process is the
//! deterministic affine residual-shift update evaluated pixelwise.

pub mod baseline;
pub mod config;
pub mod dataset;
pub mod diffusion;
pub mod error;
pub mod io;
pub mod metrics;
pub mod noise;
pub mod resample;
pub mod schedule;
pub mod segmentation;
pub mod tensor;
pub mod tensorfile;
pub mod training;

pub use diffusion::{Denoiser, OracleDenoiser, ToyDenoiser};
pub use error::{Error, Result};
pub use noise::NoiseSeed;
pub use schedule::{PixelSchedule, ScheduleConfig, SemanticWeightMap};
pub use segmentation::{SegmenterConfig, SegmenterMode};
pub use tensor::{ImageTensor, MaskStack, Plane, Shape};
pub use training::{LossReport, Teacher, TrainingConfig};
