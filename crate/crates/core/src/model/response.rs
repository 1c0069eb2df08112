//! Piecewise-linear, monotone discount-response curve.
//!
//! Demand at discount `d` is `base + scale · S(d)` where `S` accumulates the
//! per-segment slopes: whole segments below `d` contribute their full slope,
//! the segment containing `d` contributes pro rata. With nonnegative slopes
//! and scale the curve is non-decreasing and continuous in `d`.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Width of one discount segment (10 percentage points).
pub const SEGMENT_WIDTH: f64 = 0.1;
/// Number of segments covering `[0, 0.7]`.
pub const SEGMENTS: usize = 7;
/// Upper end of the response domain.
pub const MAX_DISCOUNT: f64 = 0.7;

const DOMAIN_SLACK: f64 = 1e-9;

/// Segment index `m` containing `d` and the fraction of that segment covered.
///
/// At the right end of the domain the index clamps to the last segment with
/// fraction one.
#[inline]
pub fn segment<T: Scalar>(d: T, width: T, segments: usize) -> (usize, T) {
    let pos = (d * width.recip()).max(T::zero());
    let m = pos.floor().to_usize().unwrap_or(0).min(segments - 1);
    (m, pos - T::from_usize_lossy(m))
}

/// Cumulative slope contribution `S(d)`.
#[inline]
pub fn cumulative<T: Scalar>(d: T, slopes: &[T], width: T) -> T {
    let (m, frac) = segment(d, width, slopes.len());
    slopes[..m].iter().copied().sum::<T>() + frac * slopes[m]
}

/// Evaluates the response for a discount on the segment grid given by
/// `width` and `slopes.len()`.
pub fn evaluate<T: Scalar>(d: T, base: T, scale: T, slopes: &[T], width: T) -> Result<T> {
    let upper = width * T::from_usize_lossy(slopes.len());
    let slack = T::lit(DOMAIN_SLACK);
    if !(d >= -slack && d <= upper + slack) {
        return Err(Error::Domain(d.as_f64()));
    }
    let d = d.max(T::zero()).min(upper);
    Ok(base + scale * cumulative(d, slopes, width))
}

/// Demand response on the default grid (7 segments of width 0.1).
pub fn demand_response<T: Scalar>(d: T, base: T, scale: T, slopes: &[T]) -> Result<T> {
    if slopes.len() != SEGMENTS {
        return Err(Error::Config(format!(
            "expected {SEGMENTS} slopes, got {}",
            slopes.len()
        )));
    }
    evaluate(d, base, scale, slopes, T::lit(SEGMENT_WIDTH))
}
