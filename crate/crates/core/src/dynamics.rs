//! Scale/shape decomposition of engagement sequences.
//!
//! For a repaired cumulative sequence `v`, the scale is `max(v)` (the day-30
//! value) and the shape is `v / scale`. A forecast is obtained by
//! multiplying a predicted scale with a predicted shape.

use serde::{Deserialize, Serialize};

use crate::dataset::EngagementSequence;
use crate::{Error, Result, HORIZON};

/// Views at the end of the horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Scale(pub u64);

/// An engagement sequence normalized to `[0, 1]`.
///
/// A non-degenerate shape peaks at exactly 1. A degenerate shape comes from
/// a zero-view sequence and is all zeros.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeVector {
    values: [f64; HORIZON],
    degenerate: bool,
}

impl ShapeVector {
    pub fn degenerate() -> Self {
        Self {
            values: [0.0; HORIZON],
            degenerate: true,
        }
    }

    /// Validates a non-degenerate shape: values in `[0, 1]` with maximum 1.
    pub fn new(values: [f64; HORIZON]) -> Result<Self> {
        if values.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::invalid("shape", "values must lie in [0, 1]"));
        }
        if values.iter().copied().fold(0.0, f64::max) != 1.0 {
            return Err(Error::invalid("shape", "maximum must be exactly 1"));
        }
        Ok(Self {
            values,
            degenerate: false,
        })
    }

    /// Turns an arbitrary prototype vector (centroid or mode) into a shape
    /// by clamping to `[0, 1]` and rescaling so the peak is 1.
    pub fn from_prototype(prototype: &[f64]) -> Result<Self> {
        if prototype.len() < HORIZON {
            return Err(Error::invalid(
                "prototype",
                format!("expected at least {HORIZON} values, got {}", prototype.len()),
            ));
        }
        let mut values = [0.0; HORIZON];
        for (v, &p) in values.iter_mut().zip(prototype) {
            *v = p.clamp(0.0, 1.0);
        }
        let peak = values.iter().copied().fold(0.0, f64::max);
        if peak <= 0.0 {
            return Ok(Self::degenerate());
        }
        if peak != 1.0 {
            // x / x == 1 exactly, so the peak lands on 1
            for v in values.iter_mut() {
                *v /= peak;
            }
        }
        Self::new(values)
    }

    pub fn values(&self) -> &[f64; HORIZON] {
        &self.values
    }

    pub fn is_degenerate(&self) -> bool {
        self.degenerate
    }
}

/// `ln(views / days + 1)`: cumulative views normalized by time online.
pub fn popularity_score(views: f64, days_since_upload: f64) -> Result<f64> {
    if !(days_since_upload > 0.0) || !days_since_upload.is_finite() {
        return Err(Error::invalid("days_since_upload", "must be positive"));
    }
    if !(views >= 0.0) || !views.is_finite() {
        return Err(Error::invalid("views", "must be nonnegative"));
    }
    Ok((views / days_since_upload).ln_1p())
}

pub fn decompose(seq: &EngagementSequence) -> Result<(Scale, ShapeVector)> {
    if !seq.is_repaired() {
        return Err(Error::UnrepairedSequence);
    }
    let values = seq.values().ok_or(Error::UnrepairedSequence)?;
    let scale = values.iter().copied().max().unwrap_or(0);
    if scale == 0 {
        return Ok((Scale(0), ShapeVector::degenerate()));
    }
    let s = scale as f64;
    let shape = values.map(|v| v as f64 / s);
    Ok((Scale(scale), ShapeVector::new(shape)?))
}

pub fn recompose(scale: Scale, shape: &ShapeVector) -> EngagementSequence {
    let s = scale.0 as f64;
    EngagementSequence::complete(shape.values.map(|v| (s * v).round() as u64))
}

/// Trapezoidal area under the shape over days 1..30, divided by 29 so a
/// constant shape of 1 has area 1.
pub fn shape_area(shape: &ShapeVector) -> Result<f64> {
    if shape.degenerate {
        return Err(Error::DegenerateShape);
    }
    let area: f64 = shape.values.windows(2).map(|w| 0.5 * (w[0] + w[1])).sum();
    Ok(area / (HORIZON - 1) as f64)
}
