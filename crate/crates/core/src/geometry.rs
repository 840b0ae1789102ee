//! Normalized temporal spans, interval overlap measures and sinusoidal
//! coordinate encoding.
//!
//! Every span in the crate is a `(center, width)` pair expressed as a fraction
//! of the video duration. Intervals are clamped to `[0, 1]`; a span whose
//! clamped interval is empty is rejected.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Temperature used when encoding normalized `[0, 1]` coordinates.
pub const COORD_TEMPERATURE: f64 = 1000.0;
/// Temperature used when encoding integer frame indices.
pub const FRAME_TEMPERATURE: f64 = 1.0;

/// A normalized `(center, width)` temporal span.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentSpan {
    center: f64,
    width: f64,
}

impl MomentSpan {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        let invalid = |reason| Error::InvalidSpan { center, width, reason };
        if !center.is_finite() || !width.is_finite() {
            return Err(invalid("non-finite coordinate"));
        }
        if !(0.0..=1.0).contains(&center) {
            return Err(invalid("center outside [0, 1]"));
        }
        if !(width > 0.0 && width <= 1.0) {
            return Err(invalid("width outside (0, 1]"));
        }
        let span = Self { center, width };
        let (start, end) = span.raw_interval();
        if end <= start {
            return Err(invalid("empty interval after clamping"));
        }
        Ok(span)
    }

    /// Builds a span from an interval given in normalized coordinates.
    pub fn from_interval(start: f64, end: f64) -> Result<Self> {
        Self::new((start + end) / 2.0, end - start)
    }

    /// Builds a span from raw model outputs, squeezing them into the valid
    /// open range first. Used for predictions, which may saturate in
    /// single precision.
    pub fn from_prediction(center: f64, width: f64) -> Self {
        const EPS: f64 = 1e-6;
        let center = if center.is_finite() {
            center.clamp(EPS, 1.0 - EPS)
        } else {
            0.5
        };
        let width = if width.is_finite() { width.clamp(EPS, 1.0) } else { 1.0 };
        Self { center, width }
    }

    pub fn center(&self) -> f64 {
        self.center
    }

    pub fn width(&self) -> f64 {
        self.width
    }

    fn raw_interval(&self) -> (f64, f64) {
        let half = self.width / 2.0;
        ((self.center - half).max(0.0), (self.center + half).min(1.0))
    }

    /// The clamped interval `[start, end]`.
    pub fn interval(&self) -> (f64, f64) {
        self.raw_interval()
    }

    /// L1 distance between the `(center, width)` coordinates.
    pub fn l1(&self, other: &MomentSpan) -> f64 {
        (self.center - other.center).abs() + (self.width - other.width).abs()
    }
}

/// Converts a span to its clamped `(start, end)` interval.
pub fn span_to_interval(span: &MomentSpan) -> Result<(f64, f64)> {
    let (start, end) = span.raw_interval();
    if end <= start {
        return Err(Error::InvalidSpan {
            center: span.center,
            width: span.width,
            reason: "empty interval after clamping",
        });
    }
    Ok((start, end))
}

/// Overlap statistics of two intervals.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Overlap {
    pub iou: f64,
    pub giou: f64,
}

/// IoU and generalized IoU of two `[start, end]` intervals with positive length.
pub fn interval_overlap(a: (f64, f64), b: (f64, f64)) -> Overlap {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    let enclosure = a.1.max(b.1) - a.0.min(b.0);
    let iou = inter / union;
    // Rounding can leave a tiny negative gap when one interval contains the other.
    let gap = (enclosure - union).max(0.0);
    Overlap {
        iou,
        giou: iou - gap / enclosure,
    }
}

/// Temporal IoU and generalized IoU of two spans.
pub fn generalized_temporal_iou(a: &MomentSpan, b: &MomentSpan) -> Overlap {
    interval_overlap(a.interval(), b.interval())
}

/// Plain temporal IoU of two spans.
pub fn temporal_iou(a: &MomentSpan, b: &MomentSpan) -> f64 {
    generalized_temporal_iou(a, b).iou
}

/// Sinusoidal encoding of a scalar: pairs `(sin(x·τ/ω_i), cos(x·τ/ω_i))`
/// with `ω_i = 10000^(2i/d)`.
pub fn sinusoidal_encode(x: f64, dim: usize, temperature: f64) -> Result<Vec<f64>> {
    if dim == 0 || !dim.is_multiple_of(2) {
        return Err(Error::Config(format!(
            "sinusoidal encoding dimension must be even and positive, got {dim}"
        )));
    }
    let mut out = Vec::with_capacity(dim);
    for i in 0..dim / 2 {
        let omega = 10000f64.powf(2.0 * i as f64 / dim as f64);
        let arg = x * temperature / omega;
        out.push(arg.sin());
        out.push(arg.cos());
    }
    Ok(out)
}
