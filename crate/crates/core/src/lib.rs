//! Coronary stenosis analysis on synthetic angiograms: localization,
//! lesion segmentation and severity regression, trained end to end on
//! the `gradcore` engine.

pub mod config;
pub mod error;
pub mod experiment;
pub mod geometry;
pub mod gradsuite;
pub mod items;
pub mod losses;
pub mod metrics;
pub mod models;
pub mod pipeline;
pub mod synthdata;
pub mod train;

pub use config::PipelineConfig;
pub use error::{Result, StenosisError};
pub use geometry::{BBox, GridSpec, PixelPoint};
pub use models::{ModelSpec, Profile, Task};
pub use pipeline::{PipelineModel, SegLoss, StenosisReport};

/// Networks as trained.
pub type Model32 = ModelSpec<f32>;
/// Networks for gradient checks.
pub type Model64 = ModelSpec<f64>;
