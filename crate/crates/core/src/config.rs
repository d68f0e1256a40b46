//! Run configuration. Every hyperparameter lives here and is written next
//! to run outputs; reloading it reproduces the run.

use std::path::Path;

use gradcore::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::error::{Result, StenosisError};
use crate::losses::MwceParams;
use crate::metrics::SIGNIFICANT_FRACTION;
use crate::models::{Profile, ProfileName};
use crate::synthdata::AugmentConfig;
use crate::synthdata::SplitSpec;
use crate::synthdata::DatasetConfig;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub profile: ProfileName,
    /// Crop side B fed to the segmenter and classifier.
    pub box_size: usize,
    pub dataset: DatasetConfig,
    pub split: SplitSpec,
    pub augment: AugmentConfig,
    pub localizer: TrainConfig,
    pub segmenter: TrainConfig,
    pub classifier: TrainConfig,
    pub end_to_end: TrainConfig,
    pub mwce: MwceParams,
    pub dice_eps: f64,
    /// Start the end-to-end classifier from the ground-truth-mask classifier.
    pub warm_start_classifier: bool,
    pub decision_threshold: f64,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let profile = Profile::desk();
        PipelineConfig {
            profile: profile.name,
            box_size: profile.grid.box_size,
            dataset: DatasetConfig { grid: profile.grid, ..DatasetConfig::default() },
            split: SplitSpec::default(),
            augment: AugmentConfig::default(),
            localizer: TrainConfig::default(),
            segmenter: TrainConfig::default(),
            classifier: TrainConfig::default(),
            end_to_end: TrainConfig::default(),
            mwce: MwceParams::default(),
            dice_eps: 1e-6,
            warm_start_classifier: true,
            decision_threshold: SIGNIFICANT_FRACTION,
            init_seed: 0,
        }
    }
}

impl PipelineConfig {
    /// Epoch caps sized for a single-core run of well under an hour; every
    /// other value keeps its default.
    pub fn desk_budget() -> Self {
        let capped = |max_epochs, seed| TrainConfig { max_epochs, seed, ..TrainConfig::default() };
        PipelineConfig {
            localizer: capped(12, 11),
            segmenter: capped(10, 12),
            classifier: capped(15, 13),
            end_to_end: capped(5, 14),
            ..PipelineConfig::default()
        }
    }

    pub fn profile(&self) -> Result<Profile> {
        Profile::by_name(self.profile).with_box_size(self.box_size)
    }

    pub fn validate(&self) -> Result<()> {
        let profile = self.profile()?;
        if self.dataset.grid.image_size != profile.grid.image_size {
            return Err(StenosisError::invalid(format!(
                "dataset images are {} px but profile expects {}",
                self.dataset.grid.image_size, profile.grid.image_size
            )));
        }
        self.split.validate()?;
        self.augment.validate()?;
        self.mwce.validate()?;
        for t in [&self.localizer, &self.segmenter, &self.classifier, &self.end_to_end] {
            t.validate()?;
        }
        if !(self.dice_eps > 0.0) {
            return Err(StenosisError::invalid("dice eps must be positive"));
        }
        if !(0.0..=1.0).contains(&self.decision_threshold) {
            return Err(StenosisError::invalid("decision threshold must lie in [0, 1]"));
        }
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| StenosisError::invalid(format!("cannot read config {}: {e}", path.display())))?;
        let config: PipelineConfig = serde_json::from_str(&text)?;
        config.validate()?;
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_carry_reference_hyperparameters() {
        let c = PipelineConfig::default();
        c.validate().unwrap();
        assert_eq!(c.localizer.batch_size, 2);
        assert_eq!(c.localizer.early_stop_patience, 20);
        assert_eq!(c.localizer.lr_reduce_patience, 5);
        assert_eq!(c.localizer.lr_reduce_factor, 0.2);
        assert_eq!(c.mwce, MwceParams::default());
        assert_eq!(c.split.ratios, [70, 15, 15]);
        assert_eq!(c.augment.rotation_deg, 7.0);
        assert!(c.augment.elastic.is_none());
    }

    #[test]
    fn json_round_trip() {
        let c = PipelineConfig::desk_budget();
        let back: PipelineConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: PipelineConfig = serde_json::from_str(r#"{"box_size": 64}"#).unwrap();
        assert_eq!(partial.box_size, 64);
        assert_eq!(partial.localizer, TrainConfig::default());
    }

    #[test]
    fn mismatched_image_size_is_rejected() {
        let mut c = PipelineConfig::default();
        c.dataset.grid = crate::geometry::GridSpec::paper();
        assert!(c.validate().is_err());
    }
}
