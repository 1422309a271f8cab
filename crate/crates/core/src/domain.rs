//! Refraction arithmetic, myopia categories and progression labels.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Diopter cutoff at or below which an eye is myopic.
pub const MYOPIA_CUTOFF: f64 = -0.5;
/// Diopter cutoff strictly below which an eye is highly myopic.
pub const HIGH_MYOPIA_CUTOFF: f64 = -6.0;
pub const MODERATE_MYOPIA_CUTOFF: f64 = -3.0;
pub const HYPEROPIA_CUTOFF: f64 = 3.0;

/// Mean annual myopic shift (D/yr) above which a myopic child progresses rapidly.
pub const RAPID_PROGRESSION: f64 = 0.75;
/// Mean annual myopic shift (D/yr) below which progression is considered absent.
pub const NON_PROGRESSION: f64 = 0.50;

/// A subjective refraction: sphere and cylinder in diopters, axis in degrees.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Refraction {
    pub sphere: f64,
    pub cylinder: f64,
    pub axis: f64,
}

impl Refraction {
    pub fn new(sphere: f64, cylinder: f64, axis: f64) -> Result<Self> {
        let r = Self {
            sphere,
            cylinder,
            axis,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.sphere.is_finite() || !self.cylinder.is_finite() || !self.axis.is_finite() {
            return Err(Error::Domain(format!("non-finite refraction {self:?}")));
        }
        if !(0.0..180.0).contains(&self.axis) {
            return Err(Error::Domain(format!("axis {} outside [0, 180)", self.axis)));
        }
        Ok(())
    }
}

/// Spherical-equivalent refraction in diopters.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct Ser(f64);

impl Ser {
    pub fn new(value: f64) -> Result<Self> {
        if !value.is_finite() {
            return Err(Error::Domain(format!("non-finite SER {value}")));
        }
        Ok(Self(value))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum MyopiaCategory {
    HighMyopia,
    ModerateMyopia,
    LowMyopia,
    EmmetropiaOrLowHyperopia,
    Hyperopia,
}

impl MyopiaCategory {
    pub fn is_myopic(self) -> bool {
        matches!(
            self,
            Self::HighMyopia | Self::ModerateMyopia | Self::LowMyopia
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ProgressionLabel {
    Rapid,
    Intermediate,
    NonProgressive,
}

/// Sphere plus half the cylinder.
pub fn spherical_equivalent(r: &Refraction) -> Result<Ser> {
    if !r.sphere.is_finite() || !r.cylinder.is_finite() {
        return Err(Error::Domain(format!("non-finite refraction {r:?}")));
    }
    Ser::new(r.sphere + r.cylinder / 2.0)
}

/// Total partition of the SER line.
///
/// Boundaries: −6.0 and −3.0 are moderate, −0.5 is low myopia, +3.0 is
/// emmetropia/low hyperopia.
pub fn classify_ser(s: Ser) -> MyopiaCategory {
    let v = s.value();
    if v < HIGH_MYOPIA_CUTOFF {
        MyopiaCategory::HighMyopia
    } else if v <= MODERATE_MYOPIA_CUTOFF {
        MyopiaCategory::ModerateMyopia
    } else if v <= MYOPIA_CUTOFF {
        MyopiaCategory::LowMyopia
    } else if v <= HYPEROPIA_CUTOFF {
        MyopiaCategory::EmmetropiaOrLowHyperopia
    } else {
        MyopiaCategory::Hyperopia
    }
}

pub fn is_myopic(s: Ser) -> bool {
    s.value() <= MYOPIA_CUTOFF
}

pub fn is_high_myopic(s: Ser) -> bool {
    s.value() < HIGH_MYOPIA_CUTOFF
}

/// Year-over-year SER change; negative is a myopic shift.
pub fn annual_progression(prev: Ser, next: Ser) -> f64 {
    next.value() - prev.value()
}

/// Labels a child's progression from annual SER changes.
///
/// The progression magnitude is the mean myopic shift, `−mean(ΔSER)`.
pub fn progression_label(deltas: &[f64], myopic: bool) -> Result<ProgressionLabel> {
    if deltas.is_empty() {
        return Err(Error::Domain("progression_label needs at least one delta".into()));
    }
    if deltas.iter().any(|d| !d.is_finite()) {
        return Err(Error::Domain("non-finite progression delta".into()));
    }
    let shift = -deltas.iter().sum::<f64>() / deltas.len() as f64;
    Ok(if myopic && shift > RAPID_PROGRESSION {
        ProgressionLabel::Rapid
    } else if shift < NON_PROGRESSION {
        ProgressionLabel::NonProgressive
    } else {
        ProgressionLabel::Intermediate
    })
}
