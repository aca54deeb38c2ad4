//! Pinhole camera model and the bidirectional mapping between 3D planes,
//! per-pixel plane coefficients and depth.
//!
//! A 3D plane `n . P + d = 0` seen through a pinhole camera makes the inverse
//! depth an affine function of pixel position. The 4-vector
//! `C = (alpha, beta, gamma, rho)` stores that affine map with the direction
//! part normalized to unit length; depth is recovered as
//! `Z = 1 / ((alpha*u + beta*v + gamma) * rho)`.
//!
//! Pixel coordinates `(u, v)` are raw indices with `(0, 0)` at the top-left
//! pixel center.

use alloc::vec;
use alloc::vec::Vec;

use crate::diffcore::forward::invert3x3;
use crate::math;
use crate::tensor::Tensor;
use crate::EPS_POS;

/// Default metric depth clamp range in meters.
pub const DEFAULT_DEPTH_RANGE: (f64, f64) = (0.25, 10.0);

#[derive(Debug, Clone, PartialEq)]
pub enum GeometryError {
    /// Plane passes through the camera center (d = 0), so no finite
    /// coefficient representation exists.
    PlaneThroughOrigin,
    /// Coefficient vector collapsed to zero (plane direction at infinity).
    DegeneratePlane,
    /// Region for a least-squares fit has fewer than 3 pixels or is
    /// collinear.
    DegenerateRegion,
    /// No valid pixels to work with.
    EmptyMask,
}

impl core::fmt::Display for GeometryError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            GeometryError::PlaneThroughOrigin => write!(f, "plane passes through camera center"),
            GeometryError::DegeneratePlane => write!(f, "degenerate plane coefficients"),
            GeometryError::DegenerateRegion => {
                write!(f, "region is degenerate (collinear or < 3 pixels)")
            }
            GeometryError::EmptyMask => write!(f, "no valid pixels"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for GeometryError {}

/// Pinhole intrinsics in pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub u0: f64,
    pub v0: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        u0: f64,
        v0: f64,
        width: usize,
        height: usize,
    ) -> CameraIntrinsics {
        assert!(fx > 0.0 && fy > 0.0, "focal lengths must be positive");
        assert!(u0 >= 0.0 && u0 < width as f64, "principal point outside image");
        assert!(v0 >= 0.0 && v0 < height as f64, "principal point outside image");
        CameraIntrinsics {
            fx,
            fy,
            u0,
            v0,
            width,
            height,
        }
    }

    /// Default camera for a synthetic image: focal length max(W, H) and the
    /// principal point at the image center.
    pub fn default_for(width: usize, height: usize) -> CameraIntrinsics {
        let f = width.max(height) as f64;
        CameraIntrinsics::new(
            f,
            f,
            (width as f64 - 1.0) / 2.0,
            (height as f64 - 1.0) / 2.0,
            width,
            height,
        )
    }
}

/// Metric depth grid with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    values: Tensor,
    valid: Vec<bool>,
    range: (f64, f64),
}

impl DepthMap {
    pub fn new(values: Tensor, valid: Vec<bool>, range: (f64, f64)) -> DepthMap {
        assert_eq!(values.shape().len(), 2, "depth map must be [H,W]");
        assert_eq!(values.numel(), valid.len());
        assert!(range.0 > 0.0 && range.0 <= range.1);
        for (i, &v) in values.iter().enumerate() {
            if valid[i] {
                assert!(
                    v >= range.0 && v <= range.1,
                    "valid depth {v} outside range {range:?}"
                );
            }
        }
        DepthMap {
            values,
            valid,
            range,
        }
    }

    /// Fully valid map.
    pub fn dense(values: Tensor, range: (f64, f64)) -> DepthMap {
        let n = values.numel();
        DepthMap::new(values, vec![true; n], range)
    }

    pub fn height(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn valid(&self) -> &[bool] {
        &self.valid
    }

    pub fn range(&self) -> (f64, f64) {
        self.range
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Values at valid pixels, row-major.
    pub fn valid_values(&self) -> impl Iterator<Item = f64> + '_ {
        self.values
            .iter()
            .zip(self.valid.iter())
            .filter_map(|(&z, &ok)| ok.then_some(z))
    }

    /// Multiply every value by a positive factor, widening the range bounds
    /// accordingly (used by median scaling).
    pub fn scaled(&self, factor: f64) -> DepthMap {
        assert!(factor > 0.0 && factor.is_finite());
        DepthMap {
            values: self.values.map(|z| z * factor),
            valid: self.valid.clone(),
            range: (self.range.0 * factor, self.range.1 * factor),
        }
    }
}

/// Plane `n . P + d = 0` with unit normal.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Plane3D {
    pub n: [f64; 3],
    pub d: f64,
}

impl Plane3D {
    pub fn new(n: [f64; 3], d: f64) -> Plane3D {
        let norm = math::sqrt(n[0] * n[0] + n[1] * n[1] + n[2] * n[2]);
        assert!(norm > 0.0, "zero normal");
        assert!(d != 0.0, "plane through camera center");
        Plane3D {
            n: [n[0] / norm, n[1] / norm, n[2] / norm],
            d,
        }
    }

    /// Signed distance of a point from the plane.
    pub fn residual(&self, p: [f64; 3]) -> f64 {
        self.n[0] * p[0] + self.n[1] * p[1] + self.n[2] * p[2] + self.d
    }

    /// Depth of the ray through pixel (u, v) intersected with the plane.
    /// This is the independent geometric route to the same quantity that
    /// [`PlaneCoefficients::depth_at`] computes algebraically.
    pub fn ray_depth(&self, u: f64, v: f64, k: &CameraIntrinsics) -> Option<f64> {
        // Ray parameterized by depth: P(Z) = Z * ((u-u0)/fx, (v-v0)/fy, 1).
        let rx = (u - k.u0) / k.fx;
        let ry = (v - k.v0) / k.fy;
        let denom = self.n[0] * rx + self.n[1] * ry + self.n[2];
        if math::abs(denom) < 1e-300 {
            return None;
        }
        let z = -self.d / denom;
        (z > 0.0).then_some(z)
    }
}

/// Plane coefficients of a single plane: unit direction plus magnitude.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlaneCoefficients {
    pub unit: [f64; 3],
    pub rho: f64,
}

impl PlaneCoefficients {
    /// Inverse depth at pixel (u, v): `(alpha*u + beta*v + gamma) * rho`.
    pub fn inverse_depth_at(&self, u: f64, v: f64) -> f64 {
        (self.unit[0] * u + self.unit[1] * v + self.unit[2]) * self.rho
    }

    /// Depth at (u, v) clamped to `range`; the flag reports a non-positive
    /// denominator (assigned the far bound instead of erroring).
    pub fn depth_at(&self, u: f64, v: f64, range: (f64, f64)) -> (f64, bool) {
        let t = self.inverse_depth_at(u, v);
        if t <= EPS_POS {
            (range.1, true)
        } else {
            ((1.0 / t).clamp(range.0, range.1), false)
        }
    }
}

/// Dense per-pixel plane coefficients: `[3, H, W]` unit directions plus an
/// `[H, W]` positive magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct PlaneCoefficientMap {
    unit: Tensor,
    rho: Tensor,
}

impl PlaneCoefficientMap {
    pub fn new(unit: Tensor, rho: Tensor) -> PlaneCoefficientMap {
        assert_eq!(unit.shape().len(), 3);
        assert_eq!(unit.shape()[0], 3);
        assert_eq!(rho.shape(), &unit.shape()[1..]);
        let hw = rho.numel();
        for i in 0..hw {
            let (a, b, c) = (
                unit.data()[i],
                unit.data()[hw + i],
                unit.data()[2 * hw + i],
            );
            let norm = math::sqrt(a * a + b * b + c * c);
            assert!(
                math::abs(norm - 1.0) <= 1e-9,
                "direction at pixel {i} not unit: {norm}"
            );
            assert!(rho.data()[i] > 0.0, "rho must be positive");
        }
        PlaneCoefficientMap { unit, rho }
    }

    /// Constant map rendered from a single plane's coefficients.
    pub fn constant(c: PlaneCoefficients, height: usize, width: usize) -> PlaneCoefficientMap {
        let mut unit = Tensor::zeros(&[3, height, width]);
        for ch in 0..3 {
            for i in 0..height * width {
                unit.data_mut()[ch * height * width + i] = c.unit[ch];
            }
        }
        PlaneCoefficientMap::new(unit, Tensor::full(&[height, width], c.rho))
    }

    pub fn height(&self) -> usize {
        self.rho.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.rho.shape()[1]
    }

    pub fn unit(&self) -> &Tensor {
        &self.unit
    }

    pub fn rho(&self) -> &Tensor {
        &self.rho
    }

    /// All four channels as one `[4, H, W]` tensor (unit part then rho).
    pub fn stacked(&self) -> Tensor {
        let mut data = self.unit.data().to_vec();
        data.extend_from_slice(self.rho.data());
        Tensor::new(&[4, self.height(), self.width()], data)
    }

    pub fn at(&self, y: usize, x: usize) -> PlaneCoefficients {
        PlaneCoefficients {
            unit: [
                self.unit.at3(0, y, x),
                self.unit.at3(1, y, x),
                self.unit.at3(2, y, x),
            ],
            rho: self.rho.at2(y, x),
        }
    }

    /// Render the dense depth map (clamped) plus per-pixel flags for
    /// non-positive denominators.
    pub fn render_depth(&self, range: (f64, f64)) -> (DepthMap, Vec<bool>) {
        let (h, w) = (self.height(), self.width());
        let mut values = Tensor::zeros(&[h, w]);
        let mut flags = vec![false; h * w];
        for y in 0..h {
            for x in 0..w {
                let (z, flagged) = self.at(y, x).depth_at(x as f64, y as f64, range);
                values.set2(y, x, z);
                flags[y * w + x] = flagged;
            }
        }
        (DepthMap::dense(values, range), flags)
    }
}

/// Backproject valid pixels to 3D camera coordinates, row-major.
pub fn backproject(depth: &DepthMap, k: &CameraIntrinsics) -> Vec<[f64; 3]> {
    let (h, w) = (depth.height(), depth.width());
    let mut points = Vec::with_capacity(depth.valid_count());
    for y in 0..h {
        for x in 0..w {
            if depth.valid()[y * w + x] {
                let z = depth.values().at2(y, x);
                points.push([
                    z * (x as f64 - k.u0) / k.fx,
                    z * (y as f64 - k.v0) / k.fy,
                    z,
                ]);
            }
        }
    }
    points
}

/// Coefficients of a single plane under the given intrinsics.
pub fn coefficients_from_plane(
    plane: &Plane3D,
    k: &CameraIntrinsics,
) -> Result<PlaneCoefficients, GeometryError> {
    if plane.d == 0.0 {
        return Err(GeometryError::PlaneThroughOrigin);
    }
    let [a, b, c] = plane.n;
    let d = plane.d;
    let alpha_hat = -a / (k.fx * d);
    let beta_hat = -b / (k.fy * d);
    let gamma_hat = (a * k.u0 / k.fx + b * k.v0 / k.fy - c) / d;
    let rho = math::sqrt(alpha_hat * alpha_hat + beta_hat * beta_hat + gamma_hat * gamma_hat);
    if rho <= 0.0 || !rho.is_finite() {
        return Err(GeometryError::DegeneratePlane);
    }
    Ok(PlaneCoefficients {
        unit: [alpha_hat / rho, beta_hat / rho, gamma_hat / rho],
        rho,
    })
}

/// Invert [`coefficients_from_plane`]: recover the plane whose coefficient
/// representation under `k` is `c`. The orientation is chosen so the plane
/// intersects forward rays at positive depth.
pub fn plane_from_coefficients(
    c: &PlaneCoefficients,
    k: &CameraIntrinsics,
) -> Result<Plane3D, GeometryError> {
    let alpha_hat = c.unit[0] * c.rho;
    let beta_hat = c.unit[1] * c.rho;
    let gamma_hat = c.unit[2] * c.rho;
    // From the forward map: a/d = -alpha_hat*fx, b/d = -beta_hat*fy,
    // c/d = a*u0/(d*fx) + b*v0/(d*fy) - gamma_hat.
    let a_over_d = -alpha_hat * k.fx;
    let b_over_d = -beta_hat * k.fy;
    let c_over_d = a_over_d * k.u0 / k.fx + b_over_d * k.v0 / k.fy - gamma_hat;
    let norm = math::sqrt(a_over_d * a_over_d + b_over_d * b_over_d + c_over_d * c_over_d);
    if norm <= 0.0 || !norm.is_finite() {
        return Err(GeometryError::DegeneratePlane);
    }
    // w = n/d satisfies w . P = -1 on the plane, so the unit form is
    // n = w/|w| with offset d = +1/|w| (same plane as (-n, -d)).
    let n = [a_over_d / norm, b_over_d / norm, c_over_d / norm];
    Ok(Plane3D { n, d: 1.0 / norm })
}

/// Least-squares affine fit of inverse depth over a pixel region:
/// minimizes sum((alpha_hat*u + beta_hat*v + gamma_hat - 1/Z)^2).
///
/// `region` selects pixels (row-major mask over the full map); at least 3
/// non-collinear pixels are required.
pub fn fit_coefficients_from_depth(
    depth: &DepthMap,
    region: &[bool],
) -> Result<PlaneCoefficients, GeometryError> {
    let (h, w) = (depth.height(), depth.width());
    assert_eq!(region.len(), h * w);
    let mut ata = [0.0f64; 9];
    let mut atb = [0.0f64; 3];
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if !region[i] || !depth.valid()[i] {
                continue;
            }
            let (u, v) = (x as f64, y as f64);
            let inv_z = 1.0 / depth.values().at2(y, x);
            let row = [u, v, 1.0];
            for r in 0..3 {
                for cc in 0..3 {
                    ata[r * 3 + cc] += row[r] * row[cc];
                }
                atb[r] += row[r] * inv_z;
            }
            count += 1;
        }
    }
    if count < 3 {
        return Err(GeometryError::DegenerateRegion);
    }
    let trace = ata[0] + ata[4] + ata[8];
    let det_floor = 1e-12 * math::powi(trace / 3.0, 3).max(1e-300);
    let inv = invert3x3(&ata, det_floor).map_err(|_| GeometryError::DegenerateRegion)?;
    let hat = [
        inv[0] * atb[0] + inv[1] * atb[1] + inv[2] * atb[2],
        inv[3] * atb[0] + inv[4] * atb[1] + inv[5] * atb[2],
        inv[6] * atb[0] + inv[7] * atb[1] + inv[8] * atb[2],
    ];
    let rho = math::sqrt(hat[0] * hat[0] + hat[1] * hat[1] + hat[2] * hat[2]);
    if rho <= 0.0 || !rho.is_finite() {
        return Err(GeometryError::DegeneratePlane);
    }
    Ok(PlaneCoefficients {
        unit: [hat[0] / rho, hat[1] / rho, hat[2] / rho],
        rho,
    })
}

/// Constant `[2, H, W]` grid of pixel coordinates (channel 0 = u/x,
/// channel 1 = v/y); the position carrier fed to the differentiable
/// depth-from-coefficients evaluation.
pub fn pixel_grid(height: usize, width: usize) -> Tensor {
    let mut grid = Tensor::zeros(&[2, height, width]);
    for y in 0..height {
        for x in 0..width {
            grid.set3(0, y, x, x as f64);
            grid.set3(1, y, x, y as f64);
        }
    }
    grid
}

#[cfg(test)]
pub(crate) mod testutil {
    use super::*;
    use crate::rng::Rng64;

    /// Random plane tilted below 75 degrees crossing the optical axis
    /// 1..9 m in front of the camera.
    pub(crate) fn sample_plane(rng: &mut Rng64) -> Plane3D {
        loop {
            let tilt = rng.uniform_in(0.0, 75f64.to_radians());
            let azim = rng.uniform_in(0.0, core::f64::consts::TAU);
            let n = [
                math::sin(tilt) * math::cos(azim),
                math::sin(tilt) * math::sin(azim),
                math::cos(tilt),
            ];
            let depth_on_axis = rng.uniform_in(1.0, 9.0);
            let d = -n[2] * depth_on_axis;
            if d.abs() > 1e-3 {
                return Plane3D::new(n, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::testutil::sample_plane;
    use super::*;
    use crate::rng::Rng64;


    fn sample_intrinsics(rng: &mut Rng64) -> CameraIntrinsics {
        let w = 32 + rng.below(64);
        let h = 32 + rng.below(64);
        CameraIntrinsics::new(
            rng.uniform_in(0.5, 2.0) * w as f64,
            rng.uniform_in(0.5, 2.0) * h as f64,
            (w as f64) * rng.uniform_in(0.3, 0.7),
            (h as f64) * rng.uniform_in(0.3, 0.7),
            w,
            h,
        )
    }

    #[test]
    fn backproject_principal_point() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101);
        let depth = DepthMap::dense(Tensor::full(&[101, 101], 5.0), (0.25, 10.0));
        let pts = backproject(&depth, &k);
        assert_eq!(pts[50 * 101 + 50], [0.0, 0.0, 5.0]);
    }

    #[test]
    fn backproject_substitution_example() {
        // fx=fy=100, u0=v0=50, pixel (150,50), Z=2 -> (2,0,2).
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 200, 100);
        let depth = DepthMap::dense(Tensor::full(&[100, 200], 2.0), (0.25, 10.0));
        let pts = backproject(&depth, &k);
        assert_eq!(pts[50 * 200 + 150], [2.0, 0.0, 2.0]);
    }

    #[test]
    fn backproject_skips_invalid_pixels() {
        let k = CameraIntrinsics::new(10.0, 10.0, 1.0, 1.0, 3, 3);
        let values = Tensor::full(&[3, 3], 1.0);
        let mut valid = vec![true; 9];
        valid[4] = false;
        let depth = DepthMap::new(values, valid, (0.25, 10.0));
        assert_eq!(backproject(&depth, &k).len(), 8);
    }

    #[test]
    fn fronto_parallel_coefficients() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101);
        // n=(0,0,1), d=-2: plane Z=2 -> C=(0,0,1,0.5).
        let c = coefficients_from_plane(&Plane3D::new([0.0, 0.0, 1.0], -2.0), &k).unwrap();
        assert!((c.unit[0]).abs() < 1e-15);
        assert!((c.unit[1]).abs() < 1e-15);
        assert!((c.unit[2] - 1.0).abs() < 1e-15);
        assert!((c.rho - 0.5).abs() < 1e-15);
        let (z, flagged) = c.depth_at(13.0, 77.0, (0.25, 10.0));
        assert!(!flagged);
        assert!((z - 2.0).abs() < 1e-15);

        // Unit plane at Z=1 under any intrinsics.
        let k2 = CameraIntrinsics::new(37.0, 91.0, 10.0, 20.0, 64, 64);
        let c2 = coefficients_from_plane(&Plane3D::new([0.0, 0.0, 1.0], -1.0), &k2).unwrap();
        assert_eq!(c2.unit, [0.0, 0.0, 1.0]);
        assert_eq!(c2.rho, 1.0);
    }

    #[test]
    fn plane_through_origin_is_an_error() {
        let k = CameraIntrinsics::default_for(64, 64);
        let plane = Plane3D {
            n: [0.0, 0.0, 1.0],
            d: 0.0,
        };
        assert_eq!(
            coefficients_from_plane(&plane, &k),
            Err(GeometryError::PlaneThroughOrigin)
        );
    }

    #[test]
    fn coefficients_match_ray_casting_oracle() {
        let mut rng = Rng64::new(101);
        for _ in 0..200 {
            let k = sample_intrinsics(&mut rng);
            let plane = sample_plane(&mut rng);
            let c = coefficients_from_plane(&plane, &k).unwrap();
            for _ in 0..20 {
                let u = rng.uniform_in(0.0, (k.width - 1) as f64);
                let v = rng.uniform_in(0.0, (k.height - 1) as f64);
                let Some(ray_z) = plane.ray_depth(u, v, &k) else {
                    continue;
                };
                if !(0.05..1e4).contains(&ray_z) {
                    continue;
                }
                let t = c.inverse_depth_at(u, v);
                assert!(t > 0.0, "inverse depth must be positive on visible rays");
                let alg_z = 1.0 / t;
                assert!(
                    (alg_z - ray_z).abs() <= 1e-9 * ray_z,
                    "algebraic {alg_z} vs ray {ray_z}"
                );
            }
        }
    }

    #[test]
    fn same_plane_same_coefficients_different_depth() {
        let k = CameraIntrinsics::default_for(64, 48);
        let plane = Plane3D::new([0.3, -0.2, 0.9], -2.5);
        let c = coefficients_from_plane(&plane, &k).unwrap();
        let map = PlaneCoefficientMap::constant(c, 48, 64);
        let (depth, flags) = map.render_depth((0.25, 10.0));
        assert!(flags.iter().all(|&f| !f));
        let z00 = depth.values().at2(0, 0);
        let z_far = depth.values().at2(47, 63);
        assert!((z00 - z_far).abs() > 1e-6, "depth should vary over the plane");
        for y in 0..48 {
            for x in 0..64 {
                let cc = map.at(y, x);
                assert_eq!(cc.unit, c.unit);
                assert_eq!(cc.rho, c.rho);
            }
        }
    }

    #[test]
    fn backprojected_plane_points_satisfy_plane_equation() {
        let mut rng = Rng64::new(7);
        for _ in 0..50 {
            let k = sample_intrinsics(&mut rng);
            let plane = sample_plane(&mut rng);
            let c = coefficients_from_plane(&plane, &k).unwrap();
            let map = PlaneCoefficientMap::constant(c, k.height, k.width);
            let (depth, flags) = map.render_depth((1e-6, 1e6));
            if flags.iter().any(|&f| f) {
                continue; // plane leaves the visible frustum somewhere
            }
            for p in backproject(&depth, &k) {
                assert!(
                    math::abs(plane.residual(p)) <= 1e-9 * math::abs(plane.d),
                    "residual {} for plane {:?}",
                    plane.residual(p),
                    plane
                );
            }
        }
    }

    #[test]
    fn depth_round_trip_through_fit() {
        let k = CameraIntrinsics::new(100.0, 100.0, 50.0, 50.0, 101, 101);
        let c = coefficients_from_plane(&Plane3D::new([0.0, 0.0, 1.0], -2.0), &k).unwrap();
        let map = PlaneCoefficientMap::constant(c, 101, 101);
        let (depth, _) = map.render_depth((0.25, 10.0));
        let region = vec![true; 101 * 101];
        let refit = fit_coefficients_from_depth(&depth, &region).unwrap();
        for i in 0..3 {
            assert!((refit.unit[i] - c.unit[i]).abs() < 1e-9);
        }
        assert!((refit.rho - c.rho).abs() < 1e-9);
        let remap = PlaneCoefficientMap::constant(refit, 101, 101);
        let (redepth, _) = remap.render_depth((0.25, 10.0));
        for (a, b) in redepth.values().iter().zip(depth.values().iter()) {
            assert!((a - b).abs() <= 1e-9);
        }
    }

    #[test]
    fn fit_recovers_random_planes() {
        let mut rng = Rng64::new(55);
        for _ in 0..100 {
            let k = sample_intrinsics(&mut rng);
            let plane = sample_plane(&mut rng);
            let c = coefficients_from_plane(&plane, &k).unwrap();
            let map = PlaneCoefficientMap::constant(c, k.height, k.width);
            let (depth, flags) = map.render_depth((1e-6, 1e6));
            if flags.iter().any(|&f| f) {
                continue;
            }
            let region = vec![true; k.width * k.height];
            let refit = fit_coefficients_from_depth(&depth, &region).unwrap();
            for i in 0..3 {
                assert!((refit.unit[i] - c.unit[i]).abs() < 1e-9);
            }
            assert!((refit.rho - c.rho).abs() < 1e-9 * c.rho);
        }
    }

    #[test]
    fn fit_with_noise_recovers_approximately() {
        let mut rng = Rng64::new(77);
        let k = CameraIntrinsics::default_for(64, 64);
        let plane = Plane3D::new([0.2, 0.1, 0.95], -3.0);
        let c = coefficients_from_plane(&plane, &k).unwrap();
        let map = PlaneCoefficientMap::constant(c, 64, 64);
        let (depth, _) = map.render_depth((0.25, 10.0));
        let noisy = Tensor::from_fn(&[64, 64], |i| depth.values().data()[i] + rng.normal() * 1e-6);
        let noisy_map = DepthMap::dense(noisy, (0.25, 10.0));
        let region = vec![true; 64 * 64];
        let refit = fit_coefficients_from_depth(&noisy_map, &region).unwrap();
        for i in 0..3 {
            assert!(
                (refit.unit[i] - c.unit[i]).abs() < 1e-4,
                "unit[{i}] {} vs {}",
                refit.unit[i],
                c.unit[i]
            );
        }
        assert!((refit.rho - c.rho).abs() < 1e-4);
    }

    #[test]
    fn two_pixel_region_is_degenerate() {
        let depth = DepthMap::dense(Tensor::full(&[4, 4], 2.0), (0.25, 10.0));
        let mut region = vec![false; 16];
        region[0] = true;
        region[5] = true;
        assert_eq!(
            fit_coefficients_from_depth(&depth, &region),
            Err(GeometryError::DegenerateRegion)
        );
    }

    #[test]
    fn collinear_region_is_degenerate() {
        let depth = DepthMap::dense(Tensor::full(&[4, 8], 2.0), (0.25, 10.0));
        let mut region = vec![false; 32];
        for x in 0..8 {
            region[2 * 8 + x] = true; // a single row
        }
        assert_eq!(
            fit_coefficients_from_depth(&depth, &region),
            Err(GeometryError::DegenerateRegion)
        );
    }

    #[test]
    fn degenerate_denominator_is_flagged_not_fatal() {
        // A direction tilted hard enough that the denominator goes
        // non-positive inside the image: far bound plus flag, no error.
        let c = PlaneCoefficients {
            unit: [-0.9, 0.0, 0.43588989435406733],
            rho: 0.5,
        };
        let map = PlaneCoefficientMap::constant(c, 4, 64);
        let (depth, flags) = map.render_depth((0.25, 10.0));
        assert!(flags.iter().any(|&f| f), "expected some flagged pixels");
        for (i, &f) in flags.iter().enumerate() {
            if f {
                assert_eq!(depth.values().data()[i], 10.0);
            }
        }
    }

    #[test]
    fn plane_from_coefficients_inverts_forward_map() {
        let mut rng = Rng64::new(91);
        for _ in 0..200 {
            let k = sample_intrinsics(&mut rng);
            let plane = sample_plane(&mut rng);
            let c = coefficients_from_plane(&plane, &k).unwrap();
            let back = plane_from_coefficients(&c, &k).unwrap();
            let sign = if (back.n[2] * plane.n[2]) >= 0.0 { 1.0 } else { -1.0 };
            for i in 0..3 {
                assert!(
                    (back.n[i] * sign - plane.n[i]).abs() < 1e-9,
                    "normal mismatch {:?} vs {:?}",
                    back.n,
                    plane.n
                );
            }
            assert!((back.d * sign - plane.d).abs() < 1e-9 * plane.d.abs());
        }
    }
}
