//! Seed-pixel machinery: offset cascading, coefficient resampling,
//! seed-based depth and confidence fusion.
//!
//! Offsets live in normalized image coordinates (`u/(W-1)`, `v/(H-1)`), each
//! component bounded by `tau`. Cascading repeatedly samples the offset field
//! at the displaced position and accumulates the pixel-scaled step; the final
//! positions select where plane coefficients are borrowed from. Every
//! function here is differentiable end to end.

use crate::diffcore::{DiffError, DiffValue, Graph, Result};
use crate::geometry::pixel_grid;
use crate::math;
use crate::tensor::Tensor;
use crate::EPS_POS;

/// Dense offset vectors (normalized units, per-component |o| <= tau) plus a
/// confidence map in [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct OffsetConfidenceField {
    offsets: Tensor,
    confidence: Tensor,
    tau: f64,
}

impl OffsetConfidenceField {
    pub fn new(offsets: Tensor, confidence: Tensor, tau: f64) -> OffsetConfidenceField {
        assert_eq!(offsets.shape().len(), 3);
        assert_eq!(offsets.shape()[0], 2);
        assert_eq!(confidence.shape(), &offsets.shape()[1..]);
        assert!(tau > 0.0 && tau <= 0.5);
        for &o in offsets.iter() {
            assert!(
                math::abs(o) <= tau * (1.0 + 1e-12),
                "offset component {o} exceeds tau {tau}"
            );
        }
        for &f in confidence.iter() {
            assert!((0.0..=1.0).contains(&f), "confidence {f} outside [0,1]");
        }
        OffsetConfidenceField {
            offsets,
            confidence,
            tau,
        }
    }

    pub fn zero(height: usize, width: usize, tau: f64) -> OffsetConfidenceField {
        OffsetConfidenceField::new(
            Tensor::zeros(&[2, height, width]),
            Tensor::full(&[height, width], 1.0),
            tau,
        )
    }

    pub fn offsets(&self) -> &Tensor {
        &self.offsets
    }

    pub fn confidence(&self) -> &Tensor {
        &self.confidence
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn height(&self) -> usize {
        self.offsets.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.offsets.shape()[2]
    }
}

/// Absolute sampling positions in pixel units after cascading.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedPositions {
    positions: Tensor,
}

impl SeedPositions {
    pub fn new(positions: Tensor) -> SeedPositions {
        assert_eq!(positions.shape().len(), 3);
        assert_eq!(positions.shape()[0], 2);
        assert!(positions.all_finite(), "seed positions must be finite");
        SeedPositions { positions }
    }

    pub fn positions(&self) -> &Tensor {
        &self.positions
    }

    pub fn height(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.positions.shape()[2]
    }

    /// Seed position of pixel (y, x) as (x_pos, y_pos).
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        (self.positions.at3(0, y, x), self.positions.at3(1, y, x))
    }

    /// Nearest integer pixel of the seed of (y, x), clamped to bounds.
    pub fn nearest_pixel(&self, y: usize, x: usize) -> (usize, usize) {
        let (sx, sy) = self.at(y, x);
        let cx = math::round(sx).clamp(0.0, (self.width() - 1) as f64) as usize;
        let cy = math::round(sy).clamp(0.0, (self.height() - 1) as f64) as usize;
        (cy, cx)
    }
}

/// Convert normalized offsets to pixel units: u scales by (W-1), v by (H-1).
fn scale_to_pixels(offsets: &DiffValue, height: usize, width: usize) -> Result<DiffValue> {
    let graph = offsets.graph().clone();
    let ox = offsets
        .slice_channels(0, 1)?
        .affine((width - 1) as f64, 0.0)?;
    let oy = offsets
        .slice_channels(1, 2)?
        .affine((height - 1) as f64, 0.0)?;
    graph.concat_channels(&[ox, oy])
}

/// Iterated offset application: p_0 = p, p_{k+1} = p_k + scale(o(p_k)) with
/// the offset field bilinearly sampled at p_k. Returns p_K (pixel units).
pub fn cascade_offsets(offsets: &DiffValue, applications: usize) -> Result<DiffValue> {
    assert!(applications >= 1, "cascade needs at least one application");
    let shape = offsets.shape();
    assert_eq!(shape.len(), 3);
    assert_eq!(shape[0], 2, "offset field must be [2,H,W]");
    let (h, w) = (shape[1], shape[2]);
    let graph = offsets.graph().clone();
    let mut pos = graph.constant(pixel_grid(h, w));
    for _ in 0..applications {
        let sampled = offsets.grid_sample(&pos)?;
        let step = scale_to_pixels(&sampled, h, w)?;
        pos = pos.add(&step)?;
    }
    Ok(pos)
}

/// Bilinearly sample all four coefficient channels at the seed positions and
/// re-normalize the direction part (interpolation leaves the unit sphere).
pub fn resample_coefficients(coeffs: &DiffValue, seeds: &DiffValue) -> Result<DiffValue> {
    let shape = coeffs.shape();
    assert_eq!(shape.len(), 3);
    assert_eq!(shape[0], 4, "coefficient map must be [4,H,W]");
    let graph = coeffs.graph().clone();
    let sampled = coeffs.grid_sample(seeds)?;
    let unit = sampled.slice_channels(0, 3)?.normalize_channels()?;
    let rho = sampled.slice_channels(3, 4)?;
    graph.concat_channels(&[unit, rho])
}

/// Depth from a `[4,H,W]` coefficient map evaluated at the given `[2,H,W]`
/// pixel positions: Z = clamp(1 / max((a*u + b*v + g)*rho, EPS_POS)).
pub fn coefficients_to_depth(
    coeffs: &DiffValue,
    positions: &DiffValue,
    range: (f64, f64),
) -> Result<DiffValue> {
    let shape = coeffs.shape();
    assert_eq!(shape[0], 4, "coefficient map must be [4,H,W]");
    let (h, w) = (shape[1], shape[2]);
    let alpha = coeffs.slice_channels(0, 1)?;
    let beta = coeffs.slice_channels(1, 2)?;
    let gamma = coeffs.slice_channels(2, 3)?;
    let rho = coeffs.slice_channels(3, 4)?;
    let u = positions.slice_channels(0, 1)?;
    let v = positions.slice_channels(1, 2)?;
    let affine = alpha.mul(&u)?.add(&beta.mul(&v)?)?.add(&gamma)?;
    let denom = affine.mul(&rho)?.clamp(EPS_POS, f64::INFINITY)?;
    denom.recip()?.clamp(range.0, range.1)?.reshape(&[h, w])
}

/// Seed-based depth: resampled coefficients evaluated at each pixel's OWN
/// coordinates (plane interpolation, not value copying).
pub fn seed_depth(coeffs: &DiffValue, seeds: &DiffValue, range: (f64, f64)) -> Result<DiffValue> {
    let shape = coeffs.shape();
    let (h, w) = (shape[1], shape[2]);
    let resampled = resample_coefficients(coeffs, seeds)?;
    let own = coeffs.graph().constant(pixel_grid(h, w));
    coefficients_to_depth(&resampled, &own, range)
}

/// Confidence fusion, the Eq.-(7)-equivalent form `D_i + F * (D_s - D_i)`,
/// exact (bitwise) when D_s == D_i.
pub fn fuse_depths(d_i: &DiffValue, d_s: &DiffValue, confidence: &DiffValue) -> Result<DiffValue> {
    if d_i.shape() != d_s.shape() || d_i.shape() != confidence.shape() {
        return Err(DiffError::ShapeMismatch {
            op: "fuse_depths",
            lhs: d_i.shape(),
            rhs: d_s.shape(),
        });
    }
    d_i.add(&confidence.mul(&d_s.sub(d_i)?)?)
}

/// Per-application L2 bound on the cascaded displacement, in pixels.
pub fn max_step_pixels(tau: f64, height: usize, width: usize) -> f64 {
    tau * (width.max(height) - 1) as f64 * math::sqrt(2.0)
}

/// Plain (non-differentiable) cascade for diagnostics: same arithmetic as
/// [`cascade_offsets`] on raw tensors.
pub fn cascade_positions_plain(
    field: &OffsetConfidenceField,
    applications: usize,
) -> SeedPositions {
    let graph = Graph::new();
    let offsets = graph.constant(field.offsets().clone());
    let pos = cascade_offsets(&offsets, applications).expect("cascade on finite field");
    SeedPositions::new(pos.value())
}

/// Mean L2 displacement (pixels) between cascaded seed positions and the
/// identity grid.
pub fn mean_displacement(seeds: &SeedPositions) -> f64 {
    let (h, w) = (seeds.height(), seeds.width());
    let mut total = 0.0;
    for y in 0..h {
        for x in 0..w {
            let (sx, sy) = seeds.at(y, x);
            let dx = sx - x as f64;
            let dy = sy - y as f64;
            total += math::sqrt(dx * dx + dy * dy);
        }
    }
    total / (h * w) as f64
}
