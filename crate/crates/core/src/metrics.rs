//! Depth evaluation metrics with median scaling, plus offset-field
//! diagnostics.

use alloc::vec::Vec;

use crate::geometry::DepthMap;
use crate::math;
use crate::planarops::SeedPositions;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricsError {
    /// No jointly valid pixel under the cap.
    EmptyOverlap,
    /// Median of the prediction is zero; scaling undefined.
    ZeroMedian,
}

impl core::fmt::Display for MetricsError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            MetricsError::EmptyOverlap => write!(f, "no valid overlapping pixels under the cap"),
            MetricsError::ZeroMedian => write!(f, "prediction median is zero"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for MetricsError {}

/// The standard depth metric suite.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct MetricReport {
    pub a_rel: f64,
    pub s_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub log10: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub pixel_count: usize,
    pub cap: f64,
}

/// Midpoint median of the valid values of a depth map.
pub fn valid_median(d: &DepthMap) -> Option<f64> {
    let mut vals: Vec<f64> = d.valid_values().collect();
    if vals.is_empty() {
        return None;
    }
    vals.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = vals.len();
    Some(if n % 2 == 1 {
        vals[n / 2]
    } else {
        0.5 * (vals[n / 2 - 1] + vals[n / 2])
    })
}

/// Rescale `d` so its valid-pixel median matches the ground truth's.
pub fn median_scale(d: &DepthMap, dstar: &DepthMap) -> Result<DepthMap, MetricsError> {
    let joint = d
        .valid()
        .iter()
        .zip(dstar.valid())
        .any(|(&a, &b)| a && b);
    if !joint {
        return Err(MetricsError::EmptyOverlap);
    }
    let med_pred = valid_median(d).ok_or(MetricsError::EmptyOverlap)?;
    let med_gt = valid_median(dstar).ok_or(MetricsError::EmptyOverlap)?;
    if med_pred <= 0.0 {
        return Err(MetricsError::ZeroMedian);
    }
    Ok(d.scaled(med_gt / med_pred))
}

/// Error metrics over jointly valid pixels with ground truth below `cap`.
pub fn compute_metrics(
    d: &DepthMap,
    dstar: &DepthMap,
    cap: f64,
) -> Result<MetricReport, MetricsError> {
    assert_eq!(d.height(), dstar.height());
    assert_eq!(d.width(), dstar.width());
    let n_px = d.values().numel();
    let mut count = 0usize;
    let (mut a_rel, mut s_rel, mut sq, mut sq_log, mut l10) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut d1, mut d2, mut d3) = (0usize, 0usize, 0usize);
    let (t1, t2, t3) = (1.25, 1.25 * 1.25, 1.25 * 1.25 * 1.25);
    for i in 0..n_px {
        if !d.valid()[i] || !dstar.valid()[i] {
            continue;
        }
        let gt = dstar.values().data()[i];
        if gt > cap {
            continue;
        }
        let pred = d.values().data()[i];
        let diff = pred - gt;
        a_rel += math::abs(diff) / gt;
        s_rel += diff * diff / gt;
        sq += diff * diff;
        let dl = math::ln(pred) - math::ln(gt);
        sq_log += dl * dl;
        l10 += math::abs(math::log10(pred) - math::log10(gt));
        let ratio = (pred / gt).max(gt / pred);
        if ratio < t1 {
            d1 += 1;
        }
        if ratio < t2 {
            d2 += 1;
        }
        if ratio < t3 {
            d3 += 1;
        }
        count += 1;
    }
    if count == 0 {
        return Err(MetricsError::EmptyOverlap);
    }
    let n = count as f64;
    Ok(MetricReport {
        a_rel: a_rel / n,
        s_rel: s_rel / n,
        rmse: math::sqrt(sq / n),
        rmse_log: math::sqrt(sq_log / n),
        log10: l10 / n,
        delta1: d1 as f64 / n,
        delta2: d2 as f64 / n,
        delta3: d3 as f64 / n,
        pixel_count: count,
        cap,
    })
}

/// Merge per-image reports by pixel-weighted averaging (errors averaged on
/// their natural squared/linear scales).
pub fn merge_reports(reports: &[MetricReport]) -> Option<MetricReport> {
    if reports.is_empty() {
        return None;
    }
    let total: usize = reports.iter().map(|r| r.pixel_count).sum();
    if total == 0 {
        return None;
    }
    let tw = total as f64;
    let mut out = MetricReport {
        a_rel: 0.0,
        s_rel: 0.0,
        rmse: 0.0,
        rmse_log: 0.0,
        log10: 0.0,
        delta1: 0.0,
        delta2: 0.0,
        delta3: 0.0,
        pixel_count: total,
        cap: reports[0].cap,
    };
    for r in reports {
        let w = r.pixel_count as f64 / tw;
        out.a_rel += w * r.a_rel;
        out.s_rel += w * r.s_rel;
        out.rmse += w * r.rmse * r.rmse;
        out.rmse_log += w * r.rmse_log * r.rmse_log;
        out.log10 += w * r.log10;
        out.delta1 += w * r.delta1;
        out.delta2 += w * r.delta2;
        out.delta3 += w * r.delta3;
    }
    out.rmse = math::sqrt(out.rmse);
    out.rmse_log = math::sqrt(out.rmse_log);
    Some(out)
}

/// Offset-field diagnostics against region labels.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct OffsetDiagnostics {
    /// Fraction of pixels whose cascaded seed lands in their own region.
    pub seed_region_consistency: f64,
    /// Mean confidence over region interiors (further than `BOUNDARY_BAND`
    /// from any label edge).
    pub mean_confidence_interior: f64,
    /// Mean confidence within `BOUNDARY_BAND` pixels of a label edge.
    pub mean_confidence_boundary: f64,
}

/// Band half-width (pixels, Euclidean) used for boundary statistics.
pub const BOUNDARY_BAND: f64 = 2.0;

/// True for pixels within `band` (Euclidean) of a differing label.
pub fn boundary_mask(labels: &[u32], height: usize, width: usize, band: f64) -> Vec<bool> {
    let r = band as isize;
    let mut mask = alloc::vec![false; height * width];
    for y in 0..height as isize {
        for x in 0..width as isize {
            let own = labels[(y * width as isize + x) as usize];
            'scan: for dy in -r..=r {
                for dx in -r..=r {
                    if (dy * dy + dx * dx) as f64 > band * band {
                        continue;
                    }
                    let (ny, nx) = (y + dy, x + dx);
                    if ny < 0 || nx < 0 || ny >= height as isize || nx >= width as isize {
                        continue;
                    }
                    if labels[(ny * width as isize + nx) as usize] != own {
                        mask[(y * width as isize + x) as usize] = true;
                        break 'scan;
                    }
                }
            }
        }
    }
    mask
}

/// Consistency and confidence statistics of a trained offset field.
pub fn offset_diagnostics(
    seeds: &SeedPositions,
    confidence: &Tensor,
    labels: &[u32],
) -> OffsetDiagnostics {
    let (h, w) = (seeds.height(), seeds.width());
    assert_eq!(confidence.shape(), &[h, w]);
    assert_eq!(labels.len(), h * w);
    let mut consistent = 0usize;
    for y in 0..h {
        for x in 0..w {
            let (sy, sx) = seeds.nearest_pixel(y, x);
            if labels[sy * w + sx] == labels[y * w + x] {
                consistent += 1;
            }
        }
    }
    let boundary = boundary_mask(labels, h, w, BOUNDARY_BAND);
    let (mut sum_b, mut n_b, mut sum_i, mut n_i) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..h * w {
        if boundary[i] {
            sum_b += confidence.data()[i];
            n_b += 1;
        } else {
            sum_i += confidence.data()[i];
            n_i += 1;
        }
    }
    OffsetDiagnostics {
        seed_region_consistency: consistent as f64 / (h * w) as f64,
        mean_confidence_interior: if n_i > 0 { sum_i / n_i as f64 } else { 0.0 },
        mean_confidence_boundary: if n_b > 0 { sum_b / n_b as f64 } else { 0.0 },
    }
}
