//! Dataset directory layout and in-memory compact storage.
//!
//! Each scene index i owns four files:
//!   scene_%06d.ppm         8-bit image (binary P6)
//!   scene_%06d.pfm         depth (grayscale PFM, little-endian)
//!   scene_%06d.labels.pgm  region ids (binary P5)
//!   scene_%06d.planes.json per-region plane parameters, intrinsics and
//!                          the depth range
//!
//! Training always consumes the quantized representation (8-bit image,
//! f32 depth) so in-process and on-disk pipelines see identical data.

use std::path::{Path, PathBuf};

use planedepth_core::geometry::{CameraIntrinsics, DepthMap, Plane3D};
use planedepth_core::synthscenes::SyntheticScene;
use planedepth_core::tensor::Tensor;
use serde::{Deserialize, Serialize};

use crate::formats::{self, FormatError};

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("planes json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("scene {index}: {message}")]
    Inconsistent { index: usize, message: String },
}

pub type Result<T> = std::result::Result<T, DatasetError>;

#[derive(Debug, Serialize, Deserialize)]
struct PlanesFile {
    intrinsics: CameraIntrinsics,
    depth_range: (f64, f64),
    planes: Vec<Plane3D>,
}

/// Quantized scene exactly as stored on disk.
#[derive(Debug, Clone)]
pub struct CompactScene {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub image_rgb8: Vec<u8>,
    /// Row-major top-down metric depth.
    pub depth_f32: Vec<f32>,
    pub labels: Vec<u8>,
    pub planes: Vec<Plane3D>,
    pub intrinsics: CameraIntrinsics,
    pub depth_range: (f64, f64),
}

impl CompactScene {
    pub fn from_scene(scene: &SyntheticScene) -> CompactScene {
        let (h, w) = (scene.height(), scene.width());
        let mut rgb = Vec::with_capacity(3 * h * w);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    rgb.push((scene.image.at3(c, y, x) * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
        CompactScene {
            width: w,
            height: h,
            image_rgb8: rgb,
            depth_f32: scene.depth.values().iter().map(|&z| z as f32).collect(),
            labels: scene.labels.iter().map(|&l| l as u8).collect(),
            planes: scene.planes.clone(),
            intrinsics: scene.intrinsics,
            depth_range: scene.depth.range(),
        }
    }

    /// Materialize f64 tensors for the forward pass. Depth is clamped back
    /// into the stored range to absorb f32 rounding at the bounds.
    pub fn to_scene(&self) -> SyntheticScene {
        let (h, w) = (self.height, self.width);
        let image = Tensor::from_fn(&[3, h, w], |i| {
            let c = i / (h * w);
            let px = i % (h * w);
            self.image_rgb8[3 * px + c] as f64 / 255.0
        });
        let (lo, hi) = self.depth_range;
        let depth_vals = Tensor::from_fn(&[h, w], |i| (self.depth_f32[i] as f64).clamp(lo, hi));
        SyntheticScene {
            image,
            depth: DepthMap::dense(depth_vals, self.depth_range),
            labels: self.labels.iter().map(|&l| l as u32).collect(),
            planes: self.planes.clone(),
            intrinsics: self.intrinsics,
        }
    }
}

pub fn scene_paths(dir: &Path, index: usize) -> (PathBuf, PathBuf, PathBuf, PathBuf) {
    (
        dir.join(format!("scene_{index:06}.ppm")),
        dir.join(format!("scene_{index:06}.pfm")),
        dir.join(format!("scene_{index:06}.labels.pgm")),
        dir.join(format!("scene_{index:06}.planes.json")),
    )
}

pub fn write_scene(dir: &Path, index: usize, scene: &SyntheticScene) -> Result<()> {
    let compact = CompactScene::from_scene(scene);
    let (ppm, pfm, pgm, json) = scene_paths(dir, index);
    formats::write_ppm(&ppm, compact.width, compact.height, &compact.image_rgb8)?;
    formats::write_pfm(&pfm, compact.width, compact.height, &compact.depth_f32)?;
    formats::write_pgm(&pgm, compact.width, compact.height, &compact.labels)?;
    let planes = PlanesFile {
        intrinsics: compact.intrinsics,
        depth_range: compact.depth_range,
        planes: compact.planes,
    };
    let mut body = serde_json::to_vec_pretty(&planes)?;
    body.push(b'\n');
    std::fs::write(json, body)?;
    Ok(())
}

pub fn read_scene(dir: &Path, index: usize) -> Result<CompactScene> {
    let (ppm, pfm, pgm, json) = scene_paths(dir, index);
    let (w, h, image_rgb8) = formats::read_ppm(&ppm)?;
    let (dw, dh, depth_f32) = formats::read_pfm(&pfm)?;
    let (lw, lh, labels) = formats::read_pgm(&pgm)?;
    if (dw, dh) != (w, h) || (lw, lh) != (w, h) {
        return Err(DatasetError::Inconsistent {
            index,
            message: format!("extent mismatch: image {w}x{h}, depth {dw}x{dh}, labels {lw}x{lh}"),
        });
    }
    let planes: PlanesFile = serde_json::from_slice(&std::fs::read(json)?)?;
    Ok(CompactScene {
        width: w,
        height: h,
        image_rgb8,
        depth_f32,
        labels,
        planes: planes.planes,
        intrinsics: planes.intrinsics,
        depth_range: planes.depth_range,
    })
}

/// Number of consecutive scene indices present in a dataset directory.
pub fn count_scenes(dir: &Path) -> usize {
    let mut n = 0;
    loop {
        let (ppm, _, _, _) = scene_paths(dir, n);
        if !ppm.exists() {
            return n;
        }
        n += 1;
    }
}

/// Load a whole directory into memory.
pub fn load_dir(dir: &Path) -> Result<Vec<CompactScene>> {
    let n = count_scenes(dir);
    (0..n).map(|i| read_scene(dir, i)).collect()
}
