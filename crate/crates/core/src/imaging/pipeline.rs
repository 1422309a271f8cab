use serde::{Deserialize, Serialize};

use super::{
    clahe_l, crop_scale, high_boost, quality_filter, quality_metrics, BoostVariant,
    EnhancedImage, QualityMetrics, QualityThresholds, QualityVerdict, RawImage,
};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PreprocessConfig {
    pub side: usize,
    pub thresholds: QualityThresholds,
    pub clahe_clip: f64,
    pub clahe_tiles: usize,
    /// Blur σ in pixels; `None` means `side / 32`.
    pub boost_sigma: Option<f64>,
    pub boost_gain: f64,
    pub boost_variant: BoostVariant,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            side: 64,
            thresholds: QualityThresholds::default(),
            clahe_clip: 2.0,
            clahe_tiles: 8,
            boost_sigma: None,
            boost_gain: 4.0,
            boost_variant: BoostVariant::NormalizeBoosted,
        }
    }
}

impl PreprocessConfig {
    pub fn sigma(&self) -> f64 {
        self.boost_sigma.unwrap_or(self.side as f64 / 32.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.side < super::MIN_SIDE {
            return Err(Error::Config(format!("image side {} < {}", self.side, super::MIN_SIDE)));
        }
        if self.clahe_tiles < 2 || self.clahe_tiles > self.side {
            return Err(Error::Config(format!("invalid CLAHE tile count {}", self.clahe_tiles)));
        }
        if !(self.clahe_clip >= 1.0) {
            return Err(Error::Config(format!("CLAHE clip limit {} < 1", self.clahe_clip)));
        }
        if !(self.sigma() > 0.0) || !self.boost_gain.is_finite() {
            return Err(Error::Config("boost sigma must be > 0 and gain finite".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Preprocessed {
    Accepted(EnhancedImage),
    Rejected {
        metrics: QualityMetrics,
        verdict: QualityVerdict,
    },
}

impl Preprocessed {
    pub fn accepted(self) -> Option<EnhancedImage> {
        match self {
            Self::Accepted(img) => Some(img),
            Self::Rejected { .. } => None,
        }
    }
}

/// Crop and scale, quality gate, CLAHE on L, then high-boost with min-max
/// normalization. Deterministic for a fixed config.
pub fn preprocess(img: &RawImage, config: &PreprocessConfig) -> Result<Preprocessed> {
    config.validate()?;
    let scaled = crop_scale(img, config.side)?;
    let metrics = quality_metrics(&scaled);
    let verdict = quality_filter(&metrics, &config.thresholds);
    if !verdict.pass() {
        return Ok(Preprocessed::Rejected { metrics, verdict });
    }
    let equalized = clahe_l(&scaled, config.clahe_clip, config.clahe_tiles)?;
    let boosted = high_boost(
        &equalized.to_float(),
        config.sigma(),
        config.boost_gain,
        config.boost_variant,
    )?;
    Ok(Preprocessed::Accepted(boosted.to_enhanced()?))
}
