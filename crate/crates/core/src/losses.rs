//! Training losses: the scale-invariant log depth loss, its weighted
//! combination over the three predictions, and the mean plane loss with
//! closed-form patch-normal fitting.

use alloc::vec::Vec;

use crate::diffcore::{DiffError, DiffValue, Graph, Result as DiffResult};
use crate::geometry::{CameraIntrinsics, DepthMap};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub enum LossError {
    /// Prediction and ground truth share no valid pixel.
    NoValidOverlap,
    Diff(DiffError),
}

impl From<DiffError> for LossError {
    fn from(e: DiffError) -> LossError {
        LossError::Diff(e)
    }
}

impl core::fmt::Display for LossError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            LossError::NoValidOverlap => write!(f, "no valid overlapping pixels"),
            LossError::Diff(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for LossError {}

pub type Result<T> = core::result::Result<T, LossError>;

/// Loss hyperparameters.
///
/// `ridge` is the relative Tikhonov coefficient: the diagonal of AtA gets
/// `ridge * trace(AtA) / 3` added before inversion.
#[derive(Debug, Clone, Copy, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct LossWeights {
    pub lambda: f64,
    pub mu: f64,
    pub lambda_si: f64,
    pub patch: usize,
    pub ridge: f64,
}

impl Default for LossWeights {
    fn default() -> LossWeights {
        LossWeights {
            lambda: 0.5,
            mu: 0.5,
            lambda_si: 0.5,
            patch: 32,
            ridge: 1e-9,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) {
        assert!(self.lambda >= 0.0 && self.mu >= 0.0);
        assert!((0.0..=1.0).contains(&self.lambda_si));
        assert!(self.patch >= 4, "patch side must be at least 4");
        assert!(self.ridge > 0.0);
    }
}

/// Per-patch unit normals with validity flags, row-major patch order.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchNormals {
    pub normals: Vec<[f64; 3]>,
    pub valid: Vec<bool>,
}

/// Orientation convention: flip so n_z >= 0, ties broken by n_y, then n_x.
pub fn orientation_sign(n: [f64; 3]) -> f64 {
    for &c in [n[2], n[1], n[0]].iter() {
        if c > 0.0 {
            return 1.0;
        }
        if c < 0.0 {
            return -1.0;
        }
    }
    1.0
}

/// Closed-form least-squares patch normal: solves (AtA + ridge_eff*I) n = Atb
/// with b all ones, normalizes and canonicalizes the orientation.
/// Returns None for degenerate (collinear / near-singular) patches.
pub fn fit_patch_normal(points: &[[f64; 3]], ridge: f64) -> Option<[f64; 3]> {
    if points.len() < 3 {
        return None;
    }
    let mut ata = [0.0f64; 9];
    let mut atb = [0.0f64; 3];
    for p in points {
        for r in 0..3 {
            for c in 0..3 {
                ata[r * 3 + c] += p[r] * p[c];
            }
            atb[r] += p[r];
        }
    }
    let trace = ata[0] + ata[4] + ata[8];
    let ridge_eff = ridge * trace / 3.0;
    for r in 0..3 {
        ata[r * 3 + r] += ridge_eff;
    }
    let det_floor = det_floor_for(trace, ridge);
    let inv = crate::diffcore::forward::invert3x3(&ata, det_floor).ok()?;
    let raw = [
        inv[0] * atb[0] + inv[1] * atb[1] + inv[2] * atb[2],
        inv[3] * atb[0] + inv[4] * atb[1] + inv[5] * atb[2],
        inv[6] * atb[0] + inv[7] * atb[1] + inv[8] * atb[2],
    ];
    let norm = math::sqrt(raw[0] * raw[0] + raw[1] * raw[1] + raw[2] * raw[2]);
    if norm < 1e-3 || !norm.is_finite() {
        return None;
    }
    let sign = orientation_sign([raw[0] / norm, raw[1] / norm, raw[2] / norm]);
    Some([
        sign * raw[0] / norm,
        sign * raw[1] / norm,
        sign * raw[2] / norm,
    ])
}

/// Determinant floor separating planar patches from collinear ones: a
/// rank-deficient system keeps exactly one ridge-order eigenvalue, so its
/// determinant is at most about ridge_eff * (trace/2)^2; planar patches sit
/// orders of magnitude above 10 * ridge * (trace/3)^3.
fn det_floor_for(trace: f64, ridge: f64) -> f64 {
    10.0 * ridge * math::powi(trace / 3.0, 3).max(1e-300)
}

/// Scale-invariant log loss over valid pixels:
/// mean(g^2) - lambda_si * (mean g)^2 with g = log D - log D*.
pub fn depth_loss(d: &DiffValue, dstar: &DepthMap, lambda_si: f64) -> Result<DiffValue> {
    let shape = d.shape();
    assert_eq!(
        shape,
        &[dstar.height(), dstar.width()],
        "prediction/GT extent mismatch"
    );
    let n_valid = dstar.valid_count();
    if n_valid == 0 {
        return Err(LossError::NoValidOverlap);
    }
    let graph = d.graph().clone();
    let mask = Tensor::from_fn(&shape, |i| if dstar.valid()[i] { 1.0 } else { 0.0 });
    // log D* is only consumed where the mask is 1; force benign values at
    // invalid pixels.
    let log_gt = Tensor::from_fn(&shape, |i| {
        if dstar.valid()[i] {
            math::ln(dstar.values().data()[i])
        } else {
            0.0
        }
    });
    let mask = graph.constant(mask);
    let log_gt = graph.constant(log_gt);
    let g = d.log()?.sub(&log_gt)?.mul(&mask)?;
    let inv_n = 1.0 / n_valid as f64;
    let mean_sq = g.square()?.sum()?.affine(inv_n, 0.0)?;
    let mean = g.sum()?.affine(inv_n, 0.0)?;
    let penalty = mean.square()?.affine(lambda_si, 0.0)?;
    Ok(mean_sq.sub(&penalty)?)
}

/// L_depth = L(D_f, D*) + lambda * L(D_s, D*) + mu * L(D_i, D*).
pub fn combined_depth_loss(
    d_f: &DiffValue,
    d_s: &DiffValue,
    d_i: &DiffValue,
    dstar: &DepthMap,
    w: &LossWeights,
) -> Result<DiffValue> {
    let lf = depth_loss(d_f, dstar, w.lambda_si)?;
    let ls = depth_loss(d_s, dstar, w.lambda_si)?.affine(w.lambda, 0.0)?;
    let li = depth_loss(d_i, dstar, w.lambda_si)?.affine(w.mu, 0.0)?;
    Ok(lf.add(&ls)?.add(&li)?)
}

struct PatchFit {
    normal: DiffValue,
    plain: [f64; 3],
}

/// Differentiable patch-normal fit over a cropped depth patch.
/// Returns None when the system is (near-)singular.
fn fit_patch_normal_diff(
    graph: &Graph,
    depth_patch: &DiffValue,
    gx: &DiffValue,
    gy: &DiffValue,
    ridge: f64,
) -> DiffResult<Option<PatchFit>> {
    // Backprojected coordinates: X = Z * (u-u0)/fx, Y = Z * (v-v0)/fy, Z.
    let x = depth_patch.mul(gx)?;
    let y = depth_patch.mul(gy)?;
    let z = depth_patch;

    let sxx = x.square()?.sum()?;
    let sxy = x.mul(&y)?.sum()?;
    let sxz = x.mul(z)?.sum()?;
    let syy = y.square()?.sum()?;
    let syz = y.mul(z)?.sum()?;
    let szz = z.square()?.sum()?;
    let trace = sxx.add(&syy)?.add(&szz)?;
    let ridge_eff = trace.affine(ridge / 3.0, 0.0)?;

    let d00 = sxx.add(&ridge_eff)?;
    let d11 = syy.add(&ridge_eff)?;
    let d22 = szz.add(&ridge_eff)?;
    let mat = graph
        .stack_scalars(&[
            d00,
            sxy.clone(),
            sxz.clone(),
            sxy,
            d11,
            syz.clone(),
            sxz,
            syz,
            d22,
        ])?
        .reshape(&[3, 3])?;
    let rhs = graph.stack_scalars(&[x.sum()?, y.sum()?, z.sum()?])?;

    let det_floor = det_floor_for(trace.item(), ridge);
    let raw = match mat.solve3x3(&rhs, det_floor) {
        Ok(v) => v,
        Err(DiffError::SingularMatrix { .. }) => return Ok(None),
        Err(e) => return Err(e),
    };
    let norm = raw.square()?.sum()?.sqrt()?;
    if norm.item() < 1e-3 {
        return Ok(None);
    }
    let unit = raw.div(&norm)?;
    let vals = unit.value();
    let sign = orientation_sign([vals.data()[0], vals.data()[1], vals.data()[2]]);
    let normal = unit.affine(sign, 0.0)?;
    let plain_vals = normal.value();
    Ok(Some(PatchFit {
        normal,
        plain: [
            plain_vals.data()[0],
            plain_vals.data()[1],
            plain_vals.data()[2],
        ],
    }))
}

/// Outcome of the mean plane loss: the differentiable sum plus diagnostics.
pub struct MeanPlaneLoss {
    pub loss: DiffValue,
    /// Set when no patch was jointly valid (loss is 0).
    pub empty_warning: bool,
    pub patches_total: usize,
    pub patches_used: usize,
    /// Predicted-side normals (row-major patch order), for diagnostics.
    pub predicted: PatchNormals,
}

/// Sum over jointly-valid non-overlapping patches of |n_k - n*_k|_1, with
/// normals from the closed-form least-squares fit on backprojected points.
/// Partial border tiles are dropped.
pub fn mean_plane_loss(
    d: &DiffValue,
    dstar: &DepthMap,
    k_intr: &CameraIntrinsics,
    w: &LossWeights,
) -> Result<MeanPlaneLoss> {
    w.validate();
    let (h, wd) = (dstar.height(), dstar.width());
    assert_eq!(d.shape(), &[h, wd]);
    let graph = d.graph().clone();
    let patch = w.patch;
    let (th, tw) = (h / patch, wd / patch);

    // Constant ray grids for backprojection.
    let gx_full = graph.constant(Tensor::from_fn(&[h, wd], |i| {
        let x = (i % wd) as f64;
        (x - k_intr.u0) / k_intr.fx
    }));
    let gy_full = graph.constant(Tensor::from_fn(&[h, wd], |i| {
        let y = (i / wd) as f64;
        (y - k_intr.v0) / k_intr.fy
    }));

    let mut loss = graph.scalar(0.0);
    let mut used = 0usize;
    let mut normals = Vec::with_capacity(th * tw);
    let mut valid_flags = Vec::with_capacity(th * tw);
    for ty in 0..th {
        for tx in 0..tw {
            let (y0, x0) = (ty * patch, tx * patch);
            // Patch must be fully valid on the ground-truth side.
            let fully_valid = (0..patch).all(|dy| {
                let row = (y0 + dy) * wd + x0;
                dstar.valid()[row..row + patch].iter().all(|&v| v)
            });
            if !fully_valid {
                normals.push([0.0, 0.0, 0.0]);
                valid_flags.push(false);
                continue;
            }
            let mut gt_points = Vec::with_capacity(patch * patch);
            for dy in 0..patch {
                for dx in 0..patch {
                    let (yy, xx) = (y0 + dy, x0 + dx);
                    let z = dstar.values().at2(yy, xx);
                    gt_points.push([
                        z * (xx as f64 - k_intr.u0) / k_intr.fx,
                        z * (yy as f64 - k_intr.v0) / k_intr.fy,
                        z,
                    ]);
                }
            }
            let Some(gt_normal) = fit_patch_normal(&gt_points, w.ridge) else {
                normals.push([0.0, 0.0, 0.0]);
                valid_flags.push(false);
                continue;
            };

            let dz = d.crop2d(y0, x0, patch, patch)?;
            let gx = gx_full.crop2d(y0, x0, patch, patch)?;
            let gy = gy_full.crop2d(y0, x0, patch, patch)?;
            let Some(fit) = fit_patch_normal_diff(&graph, &dz, &gx, &gy, w.ridge)? else {
                normals.push([0.0, 0.0, 0.0]);
                valid_flags.push(false);
                continue;
            };
            let gt = graph.constant(Tensor::new(&[3], gt_normal.to_vec()));
            let l1 = fit.normal.sub(&gt)?.abs()?.sum()?;
            loss = loss.add(&l1)?;
            normals.push(fit.plain);
            valid_flags.push(true);
            used += 1;
        }
    }
    Ok(MeanPlaneLoss {
        loss,
        empty_warning: used == 0,
        patches_total: th * tw,
        patches_used: used,
        predicted: PatchNormals {
            normals,
            valid: valid_flags,
        },
    })
}

/// Total loss components; forward values are captured for logging.
pub struct TotalLoss {
    pub value: DiffValue,
    pub depth_final: f64,
    pub depth_seed: f64,
    pub depth_initial: f64,
    pub mpl: f64,
    pub mpl_warning: bool,
}

/// L_total = L_depth + L_MPL, the latter computed on the final prediction.
pub fn total_loss(
    d_f: &DiffValue,
    d_s: &DiffValue,
    d_i: &DiffValue,
    dstar: &DepthMap,
    k_intr: &CameraIntrinsics,
    w: &LossWeights,
    mpl_enabled: bool,
) -> Result<TotalLoss> {
    let lf = depth_loss(d_f, dstar, w.lambda_si)?;
    let ls = depth_loss(d_s, dstar, w.lambda_si)?;
    let li = depth_loss(d_i, dstar, w.lambda_si)?;
    let (depth_final, depth_seed, depth_initial) = (lf.item(), ls.item(), li.item());
    let combined = lf
        .add(&ls.affine(w.lambda, 0.0)?)?
        .add(&li.affine(w.mu, 0.0)?)?;
    if mpl_enabled {
        let mpl = mean_plane_loss(d_f, dstar, k_intr, w)?;
        let mpl_value = mpl.loss.item();
        Ok(TotalLoss {
            value: combined.add(&mpl.loss)?,
            depth_final,
            depth_seed,
            depth_initial,
            mpl: mpl_value,
            mpl_warning: mpl.empty_warning,
        })
    } else {
        Ok(TotalLoss {
            value: combined,
            depth_final,
            depth_seed,
            depth_initial,
            mpl: 0.0,
            mpl_warning: false,
        })
    }
}
