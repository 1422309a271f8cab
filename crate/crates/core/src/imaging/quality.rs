use serde::{Deserialize, Serialize};

use super::{grey, RawImage};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityMetrics {
    /// Fraction of pixels brighter than `min(μ + 3σ, 255)`.
    pub hp_fraction: f64,
    /// Fraction of pixels darker than `max(μ − σ, 5)`.
    pub lp_fraction: f64,
    /// Sum of red values minus sum of blue values.
    pub rb_difference: i64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct QualityThresholds {
    pub hp_max: f64,
    pub lp_max: f64,
    pub ys_min: f64,
}

impl Default for QualityThresholds {
    fn default() -> Self {
        Self {
            hp_max: 0.02,
            lp_max: 0.30,
            ys_min: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum QualityFailure {
    /// Overexposed.
    F1Bright,
    /// Underexposed.
    F2Dark,
    /// Not red-dominant.
    F3Color,
}

impl QualityFailure {
    pub fn code(self) -> &'static str {
        match self {
            Self::F1Bright => "F1_bright",
            Self::F2Dark => "F2_dark",
            Self::F3Color => "F3_color",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct QualityVerdict {
    pub failures: Vec<QualityFailure>,
}

impl QualityVerdict {
    pub fn pass(&self) -> bool {
        self.failures.is_empty()
    }

    /// Failure codes joined by `;` (empty when passing).
    pub fn codes(&self) -> String {
        self.failures
            .iter()
            .map(|f| f.code())
            .collect::<Vec<_>>()
            .join(";")
    }
}

pub fn quality_metrics(img: &RawImage) -> QualityMetrics {
    let g = grey(img);
    let n = g.len() as f64;
    let mean = g.iter().sum::<f64>() / n;
    let sd = (g.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt();
    let bright = (mean + 3.0 * sd).min(255.0);
    let dark = (mean - sd).max(5.0);
    let hp = g.iter().filter(|&&v| v > bright).count() as f64 / n;
    let lp = g.iter().filter(|&&v| v < dark).count() as f64 / n;
    let rb = img
        .pixels()
        .map(|p| p[0] as i64 - p[2] as i64)
        .sum::<i64>();
    QualityMetrics {
        hp_fraction: hp,
        lp_fraction: lp,
        rb_difference: rb,
    }
}

pub fn quality_filter(m: &QualityMetrics, t: &QualityThresholds) -> QualityVerdict {
    let mut failures = Vec::new();
    if m.hp_fraction > t.hp_max {
        failures.push(QualityFailure::F1Bright);
    }
    if m.lp_fraction > t.lp_max {
        failures.push(QualityFailure::F2Dark);
    }
    if (m.rb_difference as f64) < t.ys_min {
        failures.push(QualityFailure::F3Color);
    }
    QualityVerdict { failures }
}
