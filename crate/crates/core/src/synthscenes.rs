//! Procedural piecewise-planar scenes: Voronoi region partition, per-region
//! 3D planes, rendered depth and a shaded image with a depth-dependent
//! attenuation cue.
//!
//! The image model is `albedo * (ambient + diffuse * max(0, n.L)) * att(Z)`
//! plus Gaussian pixel noise, where `att(Z) = (z_near / Z)^attenuation`.
//! The attenuation term makes absolute depth locally observable; with flat
//! albedo and shading alone, depth would only be recoverable up to the
//! per-region plane offset.

use alloc::vec;
use alloc::vec::Vec;

use crate::geometry::{
    coefficients_from_plane, plane_from_coefficients, CameraIntrinsics, DepthMap, Plane3D,
    PlaneCoefficientMap, PlaneCoefficients,
};
use crate::math;
use crate::planarops::OffsetConfidenceField;
use crate::rng::Rng64;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum SceneError {
    /// Rejection sampling could not place a region's plane within the depth
    /// range (100 attempts per region).
    RejectionBudgetExhausted,
}

impl core::fmt::Display for SceneError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            SceneError::RejectionBudgetExhausted => {
                write!(f, "plane rejection budget exhausted; spec is pathological")
            }
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for SceneError {}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub regions_min: usize,
    pub regions_max: usize,
    /// Metric depth range every rendered pixel must fall into.
    pub depth_range: (f64, f64),
    /// Maximum plane tilt from the optical axis, degrees.
    pub max_tilt_deg: f64,
    /// Gaussian pixel noise sigma.
    pub noise_sigma: f64,
    /// Lambertian shading mix.
    pub ambient: f64,
    pub diffuse: f64,
    /// Exponent of the `(z_near / Z)` brightness falloff; 0 disables the
    /// depth cue.
    pub attenuation: f64,
    pub seed: u64,
}

impl Default for SceneSpec {
    fn default() -> SceneSpec {
        SceneSpec {
            width: 64,
            height: 64,
            regions_min: 3,
            regions_max: 8,
            depth_range: (2.0, 8.0),
            max_tilt_deg: 60.0,
            noise_sigma: 0.01,
            ambient: 0.35,
            diffuse: 0.65,
            attenuation: 0.7,
            seed: 0,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) {
        assert!(self.width >= 8 && self.height >= 8);
        assert!(self.regions_min >= 1 && self.regions_min <= self.regions_max);
        assert!(self.depth_range.0 > 0.0 && self.depth_range.0 < self.depth_range.1);
        assert!(self.max_tilt_deg < 90.0);
        assert!(self.noise_sigma >= 0.0);
        assert!(self.attenuation >= 0.0);
    }
}

/// A generated scene: image, dense depth, region labels, true planes.
#[derive(Debug, Clone)]
pub struct SyntheticScene {
    /// `[3, H, W]`, values in [0, 1].
    pub image: Tensor,
    pub depth: DepthMap,
    /// Row-major region id per pixel.
    pub labels: Vec<u32>,
    /// One plane per region id.
    pub planes: Vec<Plane3D>,
    pub intrinsics: CameraIntrinsics,
}

impl SyntheticScene {
    pub fn height(&self) -> usize {
        self.depth.height()
    }

    pub fn width(&self) -> usize {
        self.depth.width()
    }

    /// Pixel-count centroid of each region, (cy, cx).
    pub fn region_centroids(&self) -> Vec<(f64, f64)> {
        let (h, w) = (self.height(), self.width());
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); self.planes.len()];
        for y in 0..h {
            for x in 0..w {
                let r = self.labels[y * w + x] as usize;
                sums[r].0 += y as f64;
                sums[r].1 += x as f64;
                sums[r].2 += 1;
            }
        }
        sums.iter()
            .map(|&(sy, sx, n)| (sy / n as f64, sx / n as f64))
            .collect()
    }

    /// Mirror the scene about the vertical axis; depth, labels and planes
    /// stay mutually consistent (the u-slope of every plane negates).
    pub fn flip_horizontal(&self) -> SyntheticScene {
        let (h, w) = (self.height(), self.width());
        let flip2 = |t: &Tensor| {
            Tensor::from_fn(&[h, w], |i| {
                let (y, x) = (i / w, i % w);
                t.at2(y, w - 1 - x)
            })
        };
        let image = Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let r = i % (h * w);
            let (y, x) = (r / w, r % w);
            self.image.at3(c, y, w - 1 - x)
        });
        let labels: Vec<u32> = (0..h * w)
            .map(|i| {
                let (y, x) = (i / w, i % w);
                self.labels[y * w + (w - 1 - x)]
            })
            .collect();
        let planes: Vec<Plane3D> = self
            .planes
            .iter()
            .map(|p| {
                let c = coefficients_from_plane(p, &self.intrinsics).expect("valid scene plane");
                let hat = [
                    c.unit[0] * c.rho,
                    c.unit[1] * c.rho,
                    c.unit[2] * c.rho,
                ];
                // 1/Z'(u') = -alpha*u' + beta*v + (gamma + alpha*(W-1)).
                let flipped_hat = [-hat[0], hat[1], hat[2] + hat[0] * (w as f64 - 1.0)];
                let rho = math::sqrt(
                    flipped_hat[0] * flipped_hat[0]
                        + flipped_hat[1] * flipped_hat[1]
                        + flipped_hat[2] * flipped_hat[2],
                );
                let flipped = PlaneCoefficients {
                    unit: [
                        flipped_hat[0] / rho,
                        flipped_hat[1] / rho,
                        flipped_hat[2] / rho,
                    ],
                    rho,
                };
                plane_from_coefficients(&flipped, &self.intrinsics).expect("flipped plane")
            })
            .collect();
        SyntheticScene {
            image,
            depth: DepthMap::dense(flip2(self.depth.values()), self.depth.range()),
            labels,
            planes,
            intrinsics: self.intrinsics,
        }
    }
}

const REGION_ATTEMPTS: usize = 100;
const MIN_REGION_PIXELS: usize = 8;

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h6 = (h % 1.0) * 6.0;
    let i = math::floor(h6) as i32 % 6;
    let f = h6 - math::floor(h6);
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i {
        0 => [v, t, p],
        1 => [q, v, p],
        2 => [p, v, t],
        3 => [p, q, v],
        4 => [t, p, v],
        _ => [v, p, q],
    }
}

/// Generate one scene. `seed` overrides the seed stored in the spec so
/// datasets can use `base_seed + index` streams.
pub fn generate(spec: &SceneSpec, seed: u64) -> Result<SyntheticScene, SceneError> {
    spec.validate();
    let mut rng = Rng64::new(seed ^ 0x5ce5_e5ce_a11d_0001);
    let (h, w) = (spec.height, spec.width);
    let k = CameraIntrinsics::default_for(w, h);

    // Voronoi partition with a minimum region size; resample sites on
    // failure.
    let mut labels = vec![0u32; h * w];
    let mut region_count = 0usize;
    let mut placed = false;
    for _ in 0..REGION_ATTEMPTS {
        region_count = spec.regions_min + rng.below(spec.regions_max - spec.regions_min + 1);
        let sites: Vec<(f64, f64)> = (0..region_count)
            .map(|_| {
                (
                    rng.uniform_in(0.0, (h - 1) as f64),
                    rng.uniform_in(0.0, (w - 1) as f64),
                )
            })
            .collect();
        let mut counts = vec![0usize; region_count];
        for y in 0..h {
            for x in 0..w {
                let mut best = 0usize;
                let mut best_d = f64::MAX;
                for (r, &(sy, sx)) in sites.iter().enumerate() {
                    let dy = y as f64 - sy;
                    let dx = x as f64 - sx;
                    let d = dy * dy + dx * dx;
                    if d < best_d {
                        best_d = d;
                        best = r;
                    }
                }
                labels[y * w + x] = best as u32;
                counts[best] += 1;
            }
        }
        if counts.iter().all(|&c| c >= MIN_REGION_PIXELS) {
            placed = true;
            break;
        }
    }
    if !placed {
        return Err(SceneError::RejectionBudgetExhausted);
    }

    // Region centroids for plane anchoring.
    let mut cy = vec![0.0f64; region_count];
    let mut cx = vec![0.0f64; region_count];
    let mut cn = vec![0usize; region_count];
    for y in 0..h {
        for x in 0..w {
            let r = labels[y * w + x] as usize;
            cy[r] += y as f64;
            cx[r] += x as f64;
            cn[r] += 1;
        }
    }

    // Sample one plane per region inside the tilt cone; reject planes whose
    // depth leaves the range anywhere in the region.
    let max_tilt = spec.max_tilt_deg.to_radians();
    let mut planes: Vec<Plane3D> = Vec::with_capacity(region_count);
    let mut coeffs: Vec<PlaneCoefficients> = Vec::with_capacity(region_count);
    for r in 0..region_count {
        let centroid = (cy[r] / cn[r] as f64, cx[r] / cn[r] as f64);
        let mut accepted = None;
        for _ in 0..REGION_ATTEMPTS {
            let tilt = rng.uniform_in(0.0, max_tilt);
            let azim = rng.uniform_in(0.0, core::f64::consts::TAU);
            let n = [
                math::sin(tilt) * math::cos(azim),
                math::sin(tilt) * math::sin(azim),
                math::cos(tilt),
            ];
            let z_c = rng.uniform_in(spec.depth_range.0, spec.depth_range.1);
            // Anchor: ray through the centroid at depth z_c lies on the plane.
            let px = z_c * (centroid.1 - k.u0) / k.fx;
            let py = z_c * (centroid.0 - k.v0) / k.fy;
            let d = -(n[0] * px + n[1] * py + n[2] * z_c);
            if d.abs() < 1e-6 {
                continue;
            }
            let plane = Plane3D::new(n, d);
            let Ok(c) = coefficients_from_plane(&plane, &k) else {
                continue;
            };
            // Depth must stay in range across the whole region.
            let ok = (0..h * w).all(|i| {
                if labels[i] != r as u32 {
                    return true;
                }
                let (y, x) = (i / w, i % w);
                let t = c.inverse_depth_at(x as f64, y as f64);
                if t <= 0.0 {
                    return false;
                }
                let z = 1.0 / t;
                z >= spec.depth_range.0 && z <= spec.depth_range.1
            });
            if ok {
                accepted = Some((plane, c));
                break;
            }
        }
        match accepted {
            Some((plane, c)) => {
                planes.push(plane);
                coeffs.push(c);
            }
            None => return Err(SceneError::RejectionBudgetExhausted),
        }
    }

    // Render depth from the per-region coefficients.
    let mut depth_vals = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let r = labels[y * w + x] as usize;
            let t = coeffs[r].inverse_depth_at(x as f64, y as f64);
            depth_vals.set2(y, x, 1.0 / t);
        }
    }
    let depth = DepthMap::dense(depth_vals, spec.depth_range);

    // Shade: per-region albedo, Lambertian term from the true normal, and
    // the depth-dependent attenuation cue.
    let light = {
        let l = [0.35, 0.25, 0.9];
        let n = math::sqrt(l[0] * l[0] + l[1] * l[1] + l[2] * l[2]);
        [l[0] / n, l[1] / n, l[2] / n]
    };
    let albedo: Vec<[f64; 3]> = (0..region_count)
        .map(|_| hsv_to_rgb(rng.uniform(), rng.uniform_in(0.25, 0.85), 1.0))
        .collect();
    let shade: Vec<f64> = planes
        .iter()
        .map(|p| {
            let ndotl = p.n[0] * light[0] + p.n[1] * light[1] + p.n[2] * light[2];
            spec.ambient + spec.diffuse * ndotl.max(0.0)
        })
        .collect();

    let mut image = Tensor::zeros(&[3, h, w]);
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let r = labels[i] as usize;
            let z = depth.values().at2(y, x);
            let att = if spec.attenuation > 0.0 {
                let ratio = spec.depth_range.0 / z;
                math::exp(spec.attenuation * math::ln(ratio))
            } else {
                1.0
            };
            for ch in 0..3 {
                let v = albedo[r][ch] * shade[r] * att + rng.normal() * spec.noise_sigma;
                image.set3(ch, y, x, v.clamp(0.0, 1.0));
            }
        }
    }

    Ok(SyntheticScene {
        image,
        depth,
        labels,
        planes,
        intrinsics: k,
    })
}

/// Diagnostic upper-bound offsets: each pixel points toward its region's
/// centroid, component-clipped to tau, confidence 1. Never used as training
/// supervision.
pub fn ideal_offsets(scene: &SyntheticScene, tau: f64) -> OffsetConfidenceField {
    let (h, w) = (scene.height(), scene.width());
    let centroids = scene.region_centroids();
    let mut offsets = Tensor::zeros(&[2, h, w]);
    for y in 0..h {
        for x in 0..w {
            let r = scene.labels[y * w + x] as usize;
            let (ty, tx) = centroids[r];
            let du = (tx - x as f64) / (w - 1) as f64;
            let dv = (ty - y as f64) / (h - 1) as f64;
            offsets.set3(0, y, x, du.clamp(-tau, tau));
            offsets.set3(1, y, x, dv.clamp(-tau, tau));
        }
    }
    OffsetConfidenceField::new(offsets, Tensor::full(&[h, w], 1.0), tau)
}

/// Ground-truth plane coefficients stacked per pixel, `[4, H, W]`.
pub fn ground_truth_coefficient_map(scene: &SyntheticScene) -> PlaneCoefficientMap {
    let (h, w) = (scene.height(), scene.width());
    let coeffs: Vec<PlaneCoefficients> = scene
        .planes
        .iter()
        .map(|p| coefficients_from_plane(p, &scene.intrinsics).expect("scene plane"))
        .collect();
    let mut unit = Tensor::zeros(&[3, h, w]);
    let mut rho = Tensor::zeros(&[h, w]);
    for y in 0..h {
        for x in 0..w {
            let c = &coeffs[scene.labels[y * w + x] as usize];
            unit.set3(0, y, x, c.unit[0]);
            unit.set3(1, y, x, c.unit[1]);
            unit.set3(2, y, x, c.unit[2]);
            rho.set2(y, x, c.rho);
        }
    }
    PlaneCoefficientMap::new(unit, rho)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::Graph;
    use crate::geometry::fit_coefficients_from_depth;
    use crate::planarops::{cascade_positions_plain, seed_depth};

    fn spec() -> SceneSpec {
        SceneSpec::default()
    }

    #[test]
    fn single_fronto_region_is_constant_depth() {
        let s = SceneSpec {
            regions_min: 1,
            regions_max: 1,
            max_tilt_deg: 0.0,
            ..spec()
        };
        let scene = generate(&s, 7).unwrap();
        let z0 = scene.depth.values().data()[0];
        for &z in scene.depth.values().iter() {
            assert!((z - z0).abs() < 1e-12, "depth must be constant, {z} vs {z0}");
        }
    }

    #[test]
    fn same_seed_is_bitwise_identical() {
        let s = spec();
        let a = generate(&s, 42).unwrap();
        let b = generate(&s, 42).unwrap();
        assert_eq!(a.image, b.image);
        assert_eq!(a.depth.values(), b.depth.values());
        assert_eq!(a.labels, b.labels);
        for (pa, pb) in a.planes.iter().zip(&b.planes) {
            assert_eq!(pa.n, pb.n);
            assert_eq!(pa.d, pb.d);
        }
    }

    #[test]
    fn validity_sweep_depths_in_range_labels_partition() {
        let s = spec();
        for seed in 0..200 {
            let scene = generate(&s, seed).unwrap();
            let n_regions = scene.planes.len();
            assert!(n_regions >= s.regions_min && n_regions <= s.regions_max);
            let mut seen = alloc::vec![false; n_regions];
            for &z in scene.depth.values().iter() {
                assert!(z >= s.depth_range.0 && z <= s.depth_range.1);
            }
            for &l in &scene.labels {
                assert!((l as usize) < n_regions);
                seen[l as usize] = true;
            }
            assert!(seen.iter().all(|&s| s), "every region must own pixels");
            for &v in scene.image.iter() {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }

    #[test]
    fn depth_matches_ray_plane_intersection() {
        let scene = generate(&spec(), 99).unwrap();
        let (h, w) = (scene.height(), scene.width());
        for y in (0..h).step_by(3) {
            for x in (0..w).step_by(3) {
                let r = scene.labels[y * w + x] as usize;
                let ray = scene.planes[r]
                    .ray_depth(x as f64, y as f64, &scene.intrinsics)
                    .expect("visible plane");
                let z = scene.depth.values().at2(y, x);
                assert!((z - ray).abs() <= 1e-9 * ray, "{z} vs {ray}");
            }
        }
    }

    #[test]
    fn every_pixel_has_a_same_region_neighbor() {
        // The piecewise-planarity prior holds by construction.
        let scene = generate(&spec(), 5).unwrap();
        let (h, w) = (scene.height(), scene.width());
        for y in 0..h {
            for x in 0..w {
                let own = scene.labels[y * w + x];
                let mut found = false;
                for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
                    let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                    if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                        continue;
                    }
                    if scene.labels[ny as usize * w + nx as usize] == own {
                        found = true;
                        break;
                    }
                }
                assert!(found, "isolated pixel at ({y},{x})");
            }
        }
    }

    #[test]
    fn depth_discontinuities_only_on_label_edges() {
        // Inside a region the depth gradient is bounded by the plane slope;
        // any large jump must cross a label edge.
        let scene = generate(&spec(), 13).unwrap();
        let (h, w) = (scene.height(), scene.width());
        for y in 0..h {
            for x in 1..w {
                let same = scene.labels[y * w + x] == scene.labels[y * w + x - 1];
                let dz =
                    (scene.depth.values().at2(y, x) - scene.depth.values().at2(y, x - 1)).abs();
                if same {
                    // In-plane horizontal step is bounded by the coefficient
                    // slope; 1 m per pixel is far beyond any in-cone plane.
                    assert!(dz < 1.0, "intra-region jump {dz} at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn ideal_offsets_zero_at_centroid_and_point_inward() {
        let s = SceneSpec {
            regions_min: 1,
            regions_max: 1,
            ..spec()
        };
        let scene = generate(&s, 3).unwrap();
        let field = ideal_offsets(&scene, 0.1);
        let (cy, cx) = scene.region_centroids()[0];
        let (h, w) = (scene.height(), scene.width());
        let (iy, ix) = (cy.round() as usize, cx.round() as usize);
        // Offset at the centroid pixel is (sub-pixel) small.
        let ox = field.offsets().at3(0, iy, ix) * (w - 1) as f64;
        let oy = field.offsets().at3(1, iy, ix) * (h - 1) as f64;
        assert!(ox.abs() <= 0.5 + 1e-9 && oy.abs() <= 0.5 + 1e-9);
        // A corner pixel points toward the centroid.
        let sx = field.offsets().at3(0, 0, 0);
        let sy = field.offsets().at3(1, 0, 0);
        assert!(sx > 0.0 && sy > 0.0);
    }

    #[test]
    fn ideal_offsets_with_true_coefficients_reproduce_depth() {
        // Pipeline oracle: GT coefficients resampled at ideal seeds and
        // evaluated at own coordinates give back GT depth wherever the
        // seed's bilinear support stays inside one region.
        let scene = generate(&spec(), 21).unwrap();
        let (h, w) = (scene.height(), scene.width());
        let field = ideal_offsets(&scene, 0.1);
        let seeds = cascade_positions_plain(&field, 1);
        let graph = Graph::new();
        let coeffs = graph.constant(ground_truth_coefficient_map(&scene).stacked());
        let seeds_dv = graph.constant(seeds.positions().clone());
        let d_s = seed_depth(&coeffs, &seeds_dv, scene.depth.range())
            .unwrap()
            .value();
        let mut checked = 0usize;
        let mut skipped = 0usize;
        for y in 0..h {
            for x in 0..w {
                let own = scene.labels[y * w + x];
                let (sx, sy) = seeds.at(y, x);
                let x0 = (sx.floor().max(0.0) as usize).min(w - 2);
                let y0 = (sy.floor().max(0.0) as usize).min(h - 2);
                let pure = [(y0, x0), (y0, x0 + 1), (y0 + 1, x0), (y0 + 1, x0 + 1)]
                    .iter()
                    .all(|&(yy, xx)| scene.labels[yy * w + xx] == own);
                if !pure {
                    skipped += 1;
                    continue;
                }
                let gt = scene.depth.values().at2(y, x);
                let got = d_s.at2(y, x);
                assert!(
                    (got - gt).abs() <= 1e-9 * gt,
                    "pixel ({y},{x}): {got} vs {gt}"
                );
                checked += 1;
            }
        }
        assert!(checked > 0);
        // The blended-support band along boundaries is thin.
        assert!(
            (skipped as f64) < 0.35 * (h * w) as f64,
            "too many boundary-support pixels: {skipped}"
        );
    }

    #[test]
    fn flip_keeps_planes_consistent_with_depth() {
        let scene = generate(&spec(), 31).unwrap();
        let flipped = scene.flip_horizontal();
        let (h, w) = (scene.height(), scene.width());
        // Re-fit coefficients from the flipped depth per region and compare
        // with the transformed planes.
        for (r, plane) in flipped.planes.iter().enumerate() {
            let region: Vec<bool> = flipped.labels.iter().map(|&l| l as usize == r).collect();
            if region.iter().filter(|&&b| b).count() < 16 {
                continue;
            }
            let refit = fit_coefficients_from_depth(&flipped.depth, &region).unwrap();
            let expect = coefficients_from_plane(plane, &flipped.intrinsics).unwrap();
            for i in 0..3 {
                assert!(
                    (refit.unit[i] - expect.unit[i]).abs() < 1e-6,
                    "region {r}: {:?} vs {:?}",
                    refit.unit,
                    expect.unit
                );
            }
            assert!((refit.rho - expect.rho).abs() < 1e-6 * expect.rho);
        }
        // u-slope (alpha-hat) negates under the flip.
        for (orig, flip) in scene.planes.iter().zip(&flipped.planes) {
            let co = coefficients_from_plane(orig, &scene.intrinsics).unwrap();
            let cf = coefficients_from_plane(flip, &scene.intrinsics).unwrap();
            let alpha_o = co.unit[0] * co.rho;
            let alpha_f = cf.unit[0] * cf.rho;
            assert!(
                (alpha_o + alpha_f).abs() < 1e-9,
                "u-slope must negate: {alpha_o} vs {alpha_f}"
            );
        }
        assert_eq!(
            scene.depth.values().at2(3, 5),
            flipped.depth.values().at2(3, w - 1 - 5)
        );
        assert_eq!(scene.labels[2 * w + 7], flipped.labels[2 * w + (w - 1 - 7)]);
        let _ = h;
    }
}
