//! Two-head encoder-decoder: a shared stride-2 conv encoder, one decoder
//! emitting plane coefficients (optionally guided by per-scale coefficient
//! previews) and one emitting offsets plus confidence.
//!
//! Head activations enforce every output constraint by construction: the
//! coefficient direction is unit-normalized, rho goes through softplus,
//! offsets through tanh scaled by tau, confidence through a sigmoid.
//!
//! The raw coefficient channels are reparameterized before normalization:
//! the u/v slope channels are scaled by 1/max(W-1, H-1) and the constant
//! channel gets a +1 shift. True in-range planes have slopes of that
//! magnitude (inverse depth is affine in raw pixel coordinates), and the
//! shift starts training near a fronto-parallel solution instead of inside
//! the depth clamp where gradients vanish.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use alloc::{format, vec};

use crate::diffcore::{DiffError, DiffValue, Graph};
use crate::geometry::{pixel_grid, DepthMap, PlaneCoefficientMap, DEFAULT_DEPTH_RANGE};
use crate::math;
use crate::planarops::{
    cascade_offsets, coefficients_to_depth, fuse_depths, seed_depth, OffsetConfidenceField,
    SeedPositions,
};
use crate::rng::Rng64;
use crate::tensor::Tensor;
use crate::EPS_POS;

#[derive(Debug, Clone, PartialEq)]
pub enum ModelError {
    /// Input height/width not divisible by 2^stages.
    BadResolution {
        height: usize,
        width: usize,
        factor: usize,
    },
    MissingParam(String),
    Diff(DiffError),
}

impl From<DiffError> for ModelError {
    fn from(e: DiffError) -> ModelError {
        ModelError::Diff(e)
    }
}

impl core::fmt::Display for ModelError {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        match self {
            ModelError::BadResolution {
                height,
                width,
                factor,
            } => write!(
                f,
                "input {width}x{height} not divisible by the downsampling factor {factor}"
            ),
            ModelError::MissingParam(name) => write!(f, "missing parameter {name}"),
            ModelError::Diff(e) => write!(f, "{e}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for ModelError {}

pub type Result<T> = core::result::Result<T, ModelError>;

/// Architecture and head configuration.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ModelConfig {
    pub input_channels: usize,
    /// Encoder stage widths (one stride-2 stage per entry); the decoders
    /// mirror them.
    pub widths: Vec<usize>,
    /// Enable the per-scale coefficient guidance channels in decoder 1.
    pub guidance: bool,
    /// Offset bound in normalized image coordinates.
    pub tau: f64,
    /// Offset cascade applications K.
    pub cascade: usize,
    /// Predict depth directly (one channel) instead of plane coefficients.
    pub direct_depth: bool,
    /// Enable the offset/confidence head.
    pub offsets: bool,
    pub depth_range: (f64, f64),
}

impl Default for ModelConfig {
    fn default() -> ModelConfig {
        ModelConfig {
            input_channels: 3,
            widths: vec![16, 32, 64],
            guidance: true,
            tau: 0.1,
            cascade: 3,
            direct_depth: false,
            offsets: true,
            depth_range: DEFAULT_DEPTH_RANGE,
        }
    }
}

impl ModelConfig {
    pub fn stages(&self) -> usize {
        self.widths.len()
    }

    pub fn downsample_factor(&self) -> usize {
        1 << self.stages()
    }

    pub fn validate(&self) {
        assert!(self.input_channels >= 1);
        assert!(!self.widths.is_empty(), "at least one encoder stage");
        assert!(self.widths.iter().all(|&w| w > 0));
        assert!(self.tau > 0.0 && self.tau <= 0.5, "tau must be in (0, 0.5]");
        assert!(self.cascade >= 1);
        assert!(self.depth_range.0 > 0.0 && self.depth_range.0 < self.depth_range.1);
        // Guidance previews only exist for the coefficient representation.
        assert!(
            !self.direct_depth || !self.guidance,
            "guidance requires the coefficient head"
        );
    }
}

/// Named parameter tensors in fixed declaration order (the checkpoint and
/// gradient-accumulation order).
#[derive(Debug, Clone, PartialEq)]
pub struct Parameters {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl Parameters {
    /// Reassemble from stored names and tensors (checkpoint loading).
    pub fn from_parts(names: Vec<String>, tensors: Vec<Tensor>) -> Parameters {
        assert_eq!(names.len(), tensors.len());
        Parameters { names, tensors }
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn tensors_mut(&mut self) -> &mut [Tensor] {
        &mut self.tensors
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.names.iter().zip(self.tensors.iter())
    }

    pub fn scalar_count(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }
}

enum Head {
    Coeff,
    Offset,
}

/// Walks the parameter declaration order shared by init, forward and the
/// checkpoint format.
fn declare_params(config: &ModelConfig, mut visit: impl FnMut(String, Vec<usize>, bool)) {
    let s = config.stages();
    let w = &config.widths;
    // Encoder: stride-2 3x3 convs. `true` marks encoder (fan-in) init.
    let mut cin = config.input_channels;
    for (i, &cout) in w.iter().enumerate() {
        visit(format!("enc{i}.w"), vec![cout, cin, 3, 3], true);
        visit(format!("enc{i}.b"), vec![cout], true);
        cin = cout;
    }
    let heads: &[(&str, bool)] = if config.offsets {
        &[("coeff", true), ("offset", false)]
    } else {
        &[("coeff", true)]
    };
    for &(name, is_coeff) in heads {
        let guided = is_coeff && config.guidance && !config.direct_depth;
        let top = w[s - 1];
        for unit in 0..2 {
            visit(format!("{name}.bot.rb{unit}.w"), vec![top, top, 3, 3], false);
            visit(format!("{name}.bot.rb{unit}.b"), vec![top], false);
        }
        if guided {
            visit(format!("{name}.guide{s}.w"), vec![4, top, 1, 1], false);
            visit(format!("{name}.guide{s}.b"), vec![4], false);
        }
        for scale in (1..s).rev() {
            let wu = w[scale]; // incoming (coarser) width
            let ws = w[scale - 1];
            let extra = if guided { 1 } else { 0 };
            visit(
                format!("{name}.up{scale}.proj.w"),
                vec![ws, wu + extra, 1, 1],
                false,
            );
            visit(format!("{name}.up{scale}.proj.b"), vec![ws], false);
            for unit in 0..2 {
                visit(
                    format!("{name}.up{scale}.skip.rb{unit}.w"),
                    vec![ws, ws, 3, 3],
                    false,
                );
                visit(format!("{name}.up{scale}.skip.rb{unit}.b"), vec![ws], false);
            }
            if guided {
                visit(format!("{name}.guide{scale}.w"), vec![4, ws, 1, 1], false);
                visit(format!("{name}.guide{scale}.b"), vec![4], false);
            }
        }
        let out_ch = if is_coeff {
            if config.direct_depth {
                1
            } else {
                4
            }
        } else {
            3
        };
        let fine = w[0];
        let extra = if guided { 1 } else { 0 };
        visit(
            format!("{name}.out.c0.w"),
            vec![fine, fine + extra, 3, 3],
            false,
        );
        visit(format!("{name}.out.c0.b"), vec![fine], false);
        visit(format!("{name}.out.c1.w"), vec![out_ch, fine, 3, 3], false);
        visit(format!("{name}.out.c1.b"), vec![out_ch], false);
    }
}

/// Decoder weight init sigma.
pub const DECODER_SIGMA: f64 = 0.01;

/// Initialize parameters: encoder fan-in-scaled normal, decoder
/// Normal(0, 0.01), zero biases. Deterministic in the seed.
pub fn init(config: &ModelConfig, seed: u64) -> Parameters {
    config.validate();
    let mut rng = Rng64::new(seed ^ 0x0dd0_5eed_f00d_cafe);
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    declare_params(config, |name, shape, encoder| {
        let is_bias = shape.len() == 1;
        let tensor = if is_bias {
            Tensor::zeros(&shape)
        } else if encoder {
            let fan_in: usize = shape[1..].iter().product();
            let std = math::sqrt(2.0 / fan_in as f64);
            Tensor::from_fn(&shape, |_| rng.normal() * std)
        } else {
            Tensor::from_fn(&shape, |_| rng.normal() * DECODER_SIGMA)
        };
        names.push(name);
        tensors.push(tensor);
    });
    Parameters { names, tensors }
}

/// Everything the forward pass produces, as live graph values.
pub struct ModelOutput {
    pub graph: Graph,
    /// Leaves in [`Parameters`] order; read gradients from these after
    /// backward.
    pub param_values: Vec<DiffValue>,
    /// Plane coefficients `[4,H,W]`; None in direct-depth mode.
    pub coeffs: Option<DiffValue>,
    /// Normalized offsets `[2,H,W]` (zeros when the head is disabled).
    pub offsets: DiffValue,
    /// Confidence `[H,W]`.
    pub confidence: DiffValue,
    /// Cascaded absolute seed positions `[2,H,W]`, pixel units.
    pub seeds: DiffValue,
    pub d_i: DiffValue,
    pub d_s: DiffValue,
    pub d_f: DiffValue,
    /// Guidance depth previews, coarsest first (empty when disabled).
    pub guidance_depths: Vec<DiffValue>,
}

impl ModelOutput {
    pub fn offset_field(&self, tau: f64) -> OffsetConfidenceField {
        OffsetConfidenceField::new(self.offsets.value(), self.confidence.value(), tau)
    }

    pub fn seed_positions(&self) -> SeedPositions {
        SeedPositions::new(self.seeds.value())
    }

    pub fn final_depth_map(&self, range: (f64, f64)) -> DepthMap {
        DepthMap::dense(self.d_f.value(), range)
    }

    pub fn coefficient_map(&self) -> Option<PlaneCoefficientMap> {
        self.coeffs.as_ref().map(|c| {
            let v = c.value();
            let (h, w) = (v.shape()[1], v.shape()[2]);
            let hw = h * w;
            let unit = Tensor::new(&[3, h, w], v.data()[..3 * hw].to_vec());
            let rho = Tensor::new(&[h, w], v.data()[3 * hw..].to_vec());
            PlaneCoefficientMap::new(unit, rho)
        })
    }
}

struct ParamLookup<'a> {
    map: BTreeMap<&'a str, DiffValue>,
}

impl<'a> ParamLookup<'a> {
    fn get(&self, name: &str) -> Result<DiffValue> {
        self.map
            .get(name)
            .cloned()
            .ok_or_else(|| ModelError::MissingParam(name.to_string()))
    }
}

fn residual_block(x: &DiffValue, lut: &ParamLookup, prefix: &str) -> Result<DiffValue> {
    let w0 = lut.get(&format!("{prefix}.rb0.w"))?;
    let b0 = lut.get(&format!("{prefix}.rb0.b"))?;
    let w1 = lut.get(&format!("{prefix}.rb1.w"))?;
    let b1 = lut.get(&format!("{prefix}.rb1.b"))?;
    let t = x.elu()?.conv2d(&w0, &b0, 1, 1)?;
    let t = t.elu()?.conv2d(&w1, &b1, 1, 1)?;
    Ok(x.add(&t)?)
}

/// Raw 4-channel head output to constrained plane coefficients.
/// `slope_scale` is the natural magnitude of the unit-direction slope
/// channels, d_max/max(W-1, H-1): inverse depth is affine in raw pixel
/// coordinates, so in-range planes have |slope| up to about Z/f.
fn coeff_activation(graph: &Graph, raw: &DiffValue, slope_scale: f64) -> Result<DiffValue> {
    let a = raw.slice_channels(0, 1)?.affine(slope_scale, 0.0)?;
    let b = raw.slice_channels(1, 2)?.affine(slope_scale, 0.0)?;
    let c = raw.slice_channels(2, 3)?.affine(1.0, 1.0)?;
    let unit = graph.concat_channels(&[a, b, c])?.normalize_channels()?;
    let rho = raw.slice_channels(3, 4)?.softplus()?.affine(1.0, EPS_POS)?;
    Ok(graph.concat_channels(&[unit, rho])?)
}

/// Pixel grid whose coordinates are scaled to full resolution (factor 2^s
/// for a scale-s feature map).
fn scaled_grid(height: usize, width: usize, factor: f64) -> Tensor {
    let mut grid = Tensor::zeros(&[2, height, width]);
    for y in 0..height {
        for x in 0..width {
            grid.set3(0, y, x, x as f64 * factor);
            grid.set3(1, y, x, y as f64 * factor);
        }
    }
    grid
}

struct DecoderRun {
    raw: DiffValue,
    guidance_depths: Vec<DiffValue>,
}

fn run_decoder(
    graph: &Graph,
    config: &ModelConfig,
    lut: &ParamLookup,
    encoder_feats: &[DiffValue],
    head: Head,
    full: (usize, usize),
) -> Result<DecoderRun> {
    let name = match head {
        Head::Coeff => "coeff",
        Head::Offset => "offset",
    };
    let guided = matches!(head, Head::Coeff) && config.guidance && !config.direct_depth;
    let s = config.stages();
    let (full_h, full_w) = full;
    let slope_scale = config.depth_range.1 / (full_w.max(full_h) - 1) as f64;
    let mut guidance_depths = Vec::new();

    let mut x = residual_block(&encoder_feats[s - 1], lut, &format!("{name}.bot"))?;
    // Guidance preview at the current scale, carried into the next stage.
    let mut carried_guidance: Option<DiffValue> = None;
    if guided {
        let gw = lut.get(&format!("{name}.guide{s}.w"))?;
        let gb = lut.get(&format!("{name}.guide{s}.b"))?;
        let raw4 = x.conv2d(&gw, &gb, 1, 0)?;
        let coeffs = coeff_activation(graph, &raw4, slope_scale)?;
        let shape = raw4.shape();
        let grid = graph.constant(scaled_grid(shape[1], shape[2], (1 << s) as f64));
        let depth = coefficients_to_depth(&coeffs, &grid, config.depth_range)?
            .reshape(&[1, shape[1], shape[2]])?;
        guidance_depths.push(depth.clone());
        carried_guidance = Some(depth);
    }

    for scale in (1..s).rev() {
        let skip = &encoder_feats[scale - 1];
        let skip_shape = skip.shape();
        let (sh, sw) = (skip_shape[1], skip_shape[2]);
        let mut up = x.upsample_bilinear(sh, sw)?;
        if let Some(g) = carried_guidance.take() {
            let gu = g.upsample_bilinear(sh, sw)?;
            up = graph.concat_channels(&[up, gu])?;
        }
        let pw = lut.get(&format!("{name}.up{scale}.proj.w"))?;
        let pb = lut.get(&format!("{name}.up{scale}.proj.b"))?;
        let proj = up.conv2d(&pw, &pb, 1, 0)?.elu()?;
        let skip_t = residual_block(skip, lut, &format!("{name}.up{scale}.skip"))?;
        x = proj.add(&skip_t)?;
        if guided {
            let gw = lut.get(&format!("{name}.guide{scale}.w"))?;
            let gb = lut.get(&format!("{name}.guide{scale}.b"))?;
            let raw4 = x.conv2d(&gw, &gb, 1, 0)?;
            let coeffs = coeff_activation(graph, &raw4, slope_scale)?;
            let grid = graph.constant(scaled_grid(sh, sw, (1 << scale) as f64));
            let depth = coefficients_to_depth(&coeffs, &grid, config.depth_range)?
                .reshape(&[1, sh, sw])?;
            guidance_depths.push(depth.clone());
            carried_guidance = Some(depth);
        }
    }

    // Adaptive output: two 3x3 convs then upsample to full resolution.
    let mut head_in = x;
    if let Some(g) = carried_guidance.take() {
        head_in = graph.concat_channels(&[head_in, g])?;
    }
    let c0w = lut.get(&format!("{name}.out.c0.w"))?;
    let c0b = lut.get(&format!("{name}.out.c0.b"))?;
    let c1w = lut.get(&format!("{name}.out.c1.w"))?;
    let c1b = lut.get(&format!("{name}.out.c1.b"))?;
    let t = head_in.conv2d(&c0w, &c0b, 1, 1)?.elu()?;
    let raw = t.conv2d(&c1w, &c1b, 1, 1)?.upsample_bilinear(full_h, full_w)?;
    Ok(DecoderRun {
        raw,
        guidance_depths,
    })
}

/// Full forward pass. The image is `[C, H, W]` with H and W divisible by
/// 2^stages.
pub fn forward(image: &Tensor, params: &Parameters, config: &ModelConfig) -> Result<ModelOutput> {
    config.validate();
    let shape = image.shape();
    assert_eq!(shape.len(), 3, "image must be [C,H,W]");
    assert_eq!(shape[0], config.input_channels);
    let (h, w) = (shape[1], shape[2]);
    let factor = config.downsample_factor();
    if h % factor != 0 || w % factor != 0 {
        return Err(ModelError::BadResolution {
            height: h,
            width: w,
            factor,
        });
    }

    let graph = Graph::new();
    let mut param_values = Vec::with_capacity(params.len());
    let mut map = BTreeMap::new();
    for (name, tensor) in params.iter() {
        let leaf = graph.leaf(tensor.clone());
        param_values.push(leaf.clone());
        map.insert(name.as_str(), leaf);
    }
    let lut = ParamLookup { map };

    let img = graph.constant(image.clone());
    let mut feats = Vec::with_capacity(config.stages());
    let mut x = img;
    for i in 0..config.stages() {
        let wt = lut.get(&format!("enc{i}.w"))?;
        let bt = lut.get(&format!("enc{i}.b"))?;
        x = x.conv2d(&wt, &bt, 2, 1)?.elu()?;
        feats.push(x.clone());
    }

    let coeff_run = run_decoder(&graph, config, &lut, &feats, Head::Coeff, (h, w))?;
    let own_grid = graph.constant(pixel_grid(h, w));
    let slope_scale = config.depth_range.1 / (w.max(h) - 1) as f64;

    let (coeffs, d_i) = if config.direct_depth {
        let (lo, hi) = config.depth_range;
        let d = coeff_run
            .raw
            .sigmoid()?
            .affine(hi - lo, lo)?
            .reshape(&[h, w])?;
        (None, d)
    } else {
        let c = coeff_activation(&graph, &coeff_run.raw, slope_scale)?;
        let d = coefficients_to_depth(&c, &own_grid, config.depth_range)?;
        (Some(c), d)
    };

    let (offsets, confidence, seeds, d_s, d_f) = if config.offsets {
        let offset_run = run_decoder(&graph, config, &lut, &feats, Head::Offset, (h, w))?;
        let offsets = offset_run
            .raw
            .slice_channels(0, 2)?
            .tanh()?
            .affine(config.tau, 0.0)?;
        let confidence = offset_run
            .raw
            .slice_channels(2, 3)?
            .sigmoid()?
            .reshape(&[h, w])?;
        let seeds = cascade_offsets(&offsets, config.cascade)?;
        let d_s = match &coeffs {
            Some(c) => seed_depth(c, &seeds, config.depth_range)?,
            // Direct-depth ablation: resample the depth values themselves.
            None => d_i
                .reshape(&[1, h, w])?
                .grid_sample(&seeds)?
                .reshape(&[h, w])?,
        };
        let d_f = fuse_depths(&d_i, &d_s, &confidence)?;
        (offsets, confidence, seeds, d_s, d_f)
    } else {
        let offsets = graph.constant(Tensor::zeros(&[2, h, w]));
        let confidence = graph.constant(Tensor::full(&[h, w], 0.5));
        let seeds = graph.constant(pixel_grid(h, w));
        (offsets, confidence, seeds, d_i.clone(), d_i.clone())
    };

    Ok(ModelOutput {
        graph,
        param_values,
        coeffs,
        offsets,
        confidence,
        seeds,
        d_i,
        d_s,
        d_f,
        guidance_depths: coeff_run.guidance_depths,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::CameraIntrinsics;
    use crate::losses::{total_loss, LossWeights};

    fn tiny_config() -> ModelConfig {
        ModelConfig {
            widths: vec![4, 8],
            ..ModelConfig::default()
        }
    }

    #[test]
    fn init_is_deterministic() {
        let config = tiny_config();
        let a = init(&config, 7);
        let b = init(&config, 7);
        assert_eq!(a, b);
        let c = init(&config, 8);
        assert_ne!(a, c);
    }

    #[test]
    fn decoder_sigma_matches_spec() {
        let config = ModelConfig::default();
        let params = init(&config, 1);
        let mut sum = 0.0;
        let mut sq = 0.0;
        let mut n = 0usize;
        for (name, t) in params.iter() {
            if name.starts_with("enc") || name.ends_with(".b") {
                continue;
            }
            for &v in t.iter() {
                sum += v;
                sq += v * v;
                n += 1;
            }
        }
        assert!(n >= 10_000, "need enough decoder draws, got {n}");
        let mean = sum / n as f64;
        let std = math::sqrt(sq / n as f64 - mean * mean);
        assert!(
            (std - DECODER_SIGMA).abs() < 0.1 * DECODER_SIGMA,
            "decoder std {std}"
        );
    }

    #[test]
    fn zero_image_gives_bias_determined_outputs() {
        let config = tiny_config();
        let params = init(&config, 3);
        let image = Tensor::zeros(&[3, 16, 16]);
        let out = forward(&image, &params, &config).unwrap();
        // Zero biases and zero input: the offset head sees all-zero inputs.
        for &f in out.confidence.value().iter() {
            assert_eq!(f, 0.5, "confidence must be sigmoid(0)");
        }
        for &o in out.offsets.value().iter() {
            assert_eq!(o, 0.0);
        }
        // Without guidance previews the coefficient head is all-zero too:
        // D_i = 1/(softplus(0) + eps), constant.
        let plain = ModelConfig {
            guidance: false,
            ..tiny_config()
        };
        let out2 = forward(&image, &init(&plain, 3), &plain).unwrap();
        let expected = 1.0 / (core::f64::consts::LN_2 + EPS_POS);
        for &z in out2.d_i.value().iter() {
            assert!((z - expected).abs() < 1e-12, "{z} vs {expected}");
        }
    }

    #[test]
    fn output_shape_contract() {
        let config = tiny_config();
        let params = init(&config, 5);
        let image = Tensor::from_fn(&[3, 16, 24], |i| (i % 7) as f64 / 7.0);
        let out = forward(&image, &params, &config).unwrap();
        assert_eq!(out.coeffs.as_ref().unwrap().shape(), vec![4, 16, 24]);
        assert_eq!(out.offsets.shape(), vec![2, 16, 24]);
        assert_eq!(out.confidence.shape(), vec![16, 24]);
        assert_eq!(out.seeds.shape(), vec![2, 16, 24]);
        assert_eq!(out.d_i.shape(), vec![16, 24]);
        assert_eq!(out.d_s.shape(), vec![16, 24]);
        assert_eq!(out.d_f.shape(), vec![16, 24]);
    }

    #[test]
    fn bad_resolution_is_rejected_before_compute() {
        let config = tiny_config();
        let params = init(&config, 5);
        let image = Tensor::zeros(&[3, 18, 16]);
        assert!(matches!(
            forward(&image, &params, &config),
            Err(ModelError::BadResolution { .. })
        ));
    }

    #[test]
    fn head_constraints_hold_under_extreme_weights() {
        let mut rng = Rng64::new(11);
        let config = tiny_config();
        let mut params = init(&config, 5);
        for t in params.tensors_mut() {
            for v in t.data_mut().iter_mut() {
                *v = rng.uniform_in(-1e3, 1e3);
            }
        }
        let image = Tensor::from_fn(&[3, 16, 16], |_| rng.uniform());
        let out = forward(&image, &params, &config).unwrap();
        let tau = config.tau;
        for &o in out.offsets.value().iter() {
            assert!(o.abs() <= tau);
        }
        for &f in out.confidence.value().iter() {
            assert!((0.0..=1.0).contains(&f));
        }
        let coeffs = out.coefficient_map().unwrap();
        for &r in coeffs.rho().iter() {
            assert!(r > 0.0);
        }
        let (lo, hi) = config.depth_range;
        for &z in out.d_f.value().iter() {
            assert!(z >= lo && z <= hi);
        }
    }

    #[test]
    fn zeroed_offset_head_reduces_to_initial_depth_exactly() {
        let config = tiny_config();
        let mut params = init(&config, 9);
        // Force the offset decoder's output convolution to zero.
        let names: Vec<String> = params.names().to_vec();
        for (i, name) in names.iter().enumerate() {
            if name.starts_with("offset.out.c1") {
                let shape = params.tensors()[i].shape().to_vec();
                params.tensors_mut()[i] = Tensor::zeros(&shape);
            }
        }
        let image = Tensor::from_fn(&[3, 16, 16], |i| ((i * 37) % 11) as f64 / 11.0);
        let out = forward(&image, &params, &config).unwrap();
        for &o in out.offsets.value().iter() {
            assert_eq!(o, 0.0);
        }
        for &f in out.confidence.value().iter() {
            assert_eq!(f, 0.5);
        }
        assert_eq!(out.d_s.value(), out.d_i.value(), "D_s must equal D_i");
        assert_eq!(out.d_f.value(), out.d_i.value(), "D_f must equal D_i");
    }

    #[test]
    fn guidance_flag_controls_parameters_and_shapes() {
        let with = init(&tiny_config(), 3);
        let without = init(
            &ModelConfig {
                guidance: false,
                ..tiny_config()
            },
            3,
        );
        assert!(with.names().iter().any(|n| n.contains("guide")));
        assert!(!without.names().iter().any(|n| n.contains("guide")));

        // Guidance previews carry the coarse extents before upsampling.
        let config = tiny_config();
        let params = init(&config, 3);
        let image = Tensor::from_fn(&[3, 16, 16], |i| (i % 5) as f64 / 5.0);
        let out = forward(&image, &params, &config).unwrap();
        assert_eq!(out.guidance_depths.len(), 2);
        assert_eq!(out.guidance_depths[0].shape(), vec![1, 4, 4]);
        assert_eq!(out.guidance_depths[1].shape(), vec![1, 8, 8]);
    }

    #[test]
    fn gradients_flow_through_guidance() {
        let config = tiny_config();
        let params = init(&config, 13);
        let mut rng = Rng64::new(17);
        let image = Tensor::from_fn(&[3, 16, 16], |_| rng.uniform());
        let out = forward(&image, &params, &config).unwrap();
        let gt = DepthMap::dense(
            Tensor::from_fn(&[16, 16], |_| rng.uniform_in(1.0, 5.0)),
            (0.25, 10.0),
        );
        let k = CameraIntrinsics::default_for(16, 16);
        let w = LossWeights {
            patch: 8,
            ..LossWeights::default()
        };
        let loss = total_loss(&out.d_f, &out.d_s, &out.d_i, &gt, &k, &w, true).unwrap();
        loss.value.backward().unwrap();
        for (i, name) in params.names().iter().enumerate() {
            if name.contains("guide") && name.ends_with(".w") {
                let grad = out.param_values[i].grad();
                let nonzero = grad.iter().any(|&g| g != 0.0);
                assert!(nonzero, "no gradient reached {name}");
            }
        }
    }

    #[test]
    fn forward_is_bitwise_deterministic() {
        let config = tiny_config();
        let params = init(&config, 21);
        let image = Tensor::from_fn(&[3, 16, 16], |i| ((i * 7919) % 97) as f64 / 97.0);
        let a = forward(&image, &params, &config).unwrap();
        let b = forward(&image, &params, &config).unwrap();
        assert_eq!(a.d_f.value(), b.d_f.value());
        assert_eq!(a.offsets.value(), b.offsets.value());
    }

    #[test]
    fn disabled_offsets_collapse_to_single_head() {
        let config = ModelConfig {
            offsets: false,
            ..tiny_config()
        };
        let params = init(&config, 2);
        assert!(!params.names().iter().any(|n| n.starts_with("offset")));
        let image = Tensor::from_fn(&[3, 16, 16], |i| (i % 3) as f64 / 3.0);
        let out = forward(&image, &params, &config).unwrap();
        assert_eq!(out.d_f.value(), out.d_i.value());
        assert_eq!(out.d_s.value(), out.d_i.value());
    }

    #[test]
    fn direct_depth_mode_bounds_depth_by_sigmoid() {
        let config = ModelConfig {
            direct_depth: true,
            guidance: false,
            ..tiny_config()
        };
        let params = init(&config, 4);
        let image = Tensor::from_fn(&[3, 16, 16], |i| (i % 13) as f64 / 13.0);
        let out = forward(&image, &params, &config).unwrap();
        assert!(out.coeffs.is_none());
        let (lo, hi) = config.depth_range;
        for &z in out.d_i.value().iter() {
            assert!(z > lo && z < hi);
        }
    }
}
