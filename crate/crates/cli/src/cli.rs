//! Command-line interface: gen-data, train, infer, eval, gradcheck,
//! reconstruct. JSON config files feed gen-data and train; every flag
//! overrides its config field. Exit codes: 0 success, 1 usage error,
//! 2 runtime failure.

use std::io::Write;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use planedepth_core::geometry::{backproject, CameraIntrinsics, DepthMap};
use planedepth_core::metrics::{compute_metrics, median_scale, merge_reports, MetricReport};
use planedepth_core::model::forward;
use planedepth_core::synthscenes::{generate, SceneSpec};
use planedepth_core::tensor::Tensor;

use crate::dataset;
use crate::formats::{
    read_checkpoint, read_pfm, read_ppm, write_checkpoint, write_pfm, write_ply_ascii, write_ppm,
    PlyVertex,
};
use crate::gradsuite;
use crate::trainer::{train, TrainConfig};
use crate::viz::offset_color_wheel;

#[derive(Parser)]
#[command(
    name = "planedepth",
    about = "Piecewise-planar depth estimation toolkit",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic piecewise-planar dataset directory.
    GenData(GenDataArgs),
    /// Train a model on a dataset directory.
    Train(TrainArgs),
    /// Run a checkpoint on one image; writes depth, offsets and confidence.
    Infer(InferArgs),
    /// Compare predicted depth maps against ground truth.
    Eval(EvalArgs),
    /// Run the gradient verification suite.
    Gradcheck(GradcheckArgs),
    /// Backproject a depth map to a colored point cloud.
    Reconstruct(ReconstructArgs),
}

#[derive(Args)]
struct GenDataArgs {
    /// Output dataset directory (created if missing).
    #[arg(long)]
    out: PathBuf,
    /// Number of scenes.
    #[arg(long, default_value_t = 100)]
    count: usize,
    /// SceneSpec JSON; flags below override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    #[arg(long)]
    regions_min: Option<usize>,
    #[arg(long)]
    regions_max: Option<usize>,
    #[arg(long)]
    depth_min: Option<f64>,
    #[arg(long)]
    depth_max: Option<f64>,
    #[arg(long)]
    max_tilt_deg: Option<f64>,
    #[arg(long)]
    noise_sigma: Option<f64>,
    #[arg(long)]
    attenuation: Option<f64>,
    /// Base seed; scene i uses seed base_seed + i.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct TrainArgs {
    /// Training dataset directory (from gen-data).
    #[arg(long)]
    data: PathBuf,
    /// Optional validation dataset directory.
    #[arg(long)]
    val_data: Option<PathBuf>,
    /// Output directory for checkpoints and the training log.
    #[arg(long)]
    out: PathBuf,
    /// TrainConfig JSON; flags below override individual fields.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lr_step_epochs: Option<usize>,
    #[arg(long)]
    flip_prob: Option<f64>,
    #[arg(long)]
    clip_norm: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Mean plane loss on/off.
    #[arg(long)]
    mpl: Option<bool>,
    /// Guidance module on/off.
    #[arg(long)]
    guidance: Option<bool>,
    /// Offset/confidence head on/off.
    #[arg(long)]
    offsets: Option<bool>,
    /// Predict depth directly instead of plane coefficients.
    #[arg(long)]
    direct_depth: Option<bool>,
    /// Offset cascade applications.
    #[arg(long)]
    cascade: Option<usize>,
    #[arg(long)]
    tau: Option<f64>,
    /// Encoder widths, comma separated (e.g. 16,32,64).
    #[arg(long)]
    widths: Option<String>,
    /// Mean-plane-loss patch side.
    #[arg(long)]
    patch: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    mu: Option<f64>,
    #[arg(long)]
    lambda_si: Option<f64>,
    #[arg(long)]
    quiet: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Input image (binary PPM).
    #[arg(long)]
    image: PathBuf,
    /// Output prefix; writes <prefix>_depth.pfm, <prefix>_offsets.ppm,
    /// <prefix>_confidence.pfm.
    #[arg(long)]
    out_prefix: String,
}

#[derive(Args)]
struct EvalArgs {
    /// Predicted depth: a .pfm file or a directory of them.
    #[arg(long)]
    pred: PathBuf,
    /// Ground-truth depth: a .pfm file or a directory (e.g. from gen-data).
    #[arg(long)]
    gt: PathBuf,
    /// Ground-truth depth cap in meters.
    #[arg(long, default_value_t = 10.0)]
    cap: f64,
    /// Disable median scaling of the prediction.
    #[arg(long)]
    no_median_scale: bool,
}

#[derive(Args)]
struct GradcheckArgs {
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Parameter coordinates sampled for the end-to-end check.
    #[arg(long, default_value_t = 20)]
    e2e_coords: usize,
}

#[derive(Args)]
struct ReconstructArgs {
    /// Depth map (.pfm).
    #[arg(long)]
    depth: PathBuf,
    /// Color image (.ppm) of the same extent.
    #[arg(long)]
    image: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    fx: Option<f64>,
    #[arg(long)]
    fy: Option<f64>,
    #[arg(long)]
    u0: Option<f64>,
    #[arg(long)]
    v0: Option<f64>,
}

/// Parse argv and run; returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successful exits; everything
            // else is a usage error.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    let result = match cli.command {
        Command::GenData(args) => gen_data(args),
        Command::Train(args) => train_cmd(args),
        Command::Infer(args) => infer(args),
        Command::Eval(args) => eval(args),
        Command::Gradcheck(args) => gradcheck_cmd(args),
        Command::Reconstruct(args) => reconstruct(args),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            2
        }
    }
}

fn read_json_config<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let body = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_slice(&body).with_context(|| format!("parsing {}", path.display()))
}

fn gen_data(args: GenDataArgs) -> Result<i32> {
    let mut spec: SceneSpec = match &args.config {
        Some(path) => read_json_config(path)?,
        None => SceneSpec::default(),
    };
    if let Some(v) = args.width {
        spec.width = v;
    }
    if let Some(v) = args.height {
        spec.height = v;
    }
    if let Some(v) = args.regions_min {
        spec.regions_min = v;
    }
    if let Some(v) = args.regions_max {
        spec.regions_max = v;
    }
    if let Some(v) = args.depth_min {
        spec.depth_range.0 = v;
    }
    if let Some(v) = args.depth_max {
        spec.depth_range.1 = v;
    }
    if let Some(v) = args.max_tilt_deg {
        spec.max_tilt_deg = v;
    }
    if let Some(v) = args.noise_sigma {
        spec.noise_sigma = v;
    }
    if let Some(v) = args.attenuation {
        spec.attenuation = v;
    }
    if let Some(v) = args.seed {
        spec.seed = v;
    }
    spec.validate();
    std::fs::create_dir_all(&args.out)?;
    for i in 0..args.count {
        let scene = generate(&spec, spec.seed + i as u64)
            .with_context(|| format!("generating scene {i}"))?;
        dataset::write_scene(&args.out, i, &scene)?;
    }
    println!(
        "wrote {} scenes ({}x{}) to {}",
        args.count,
        spec.width,
        spec.height,
        args.out.display()
    );
    Ok(0)
}

fn parse_widths(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .with_context(|| format!("bad width {p:?}"))
        })
        .collect()
}

fn train_cmd(args: TrainArgs) -> Result<i32> {
    let mut cfg: TrainConfig = match &args.config {
        Some(path) => read_json_config(path)?,
        None => TrainConfig::default(),
    };
    if let Some(v) = args.lr {
        cfg.lr = v;
    }
    if let Some(v) = args.weight_decay {
        cfg.weight_decay = v;
    }
    if let Some(v) = args.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = args.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = args.lr_step_epochs {
        cfg.lr_step_epochs = v;
    }
    if let Some(v) = args.flip_prob {
        cfg.flip_prob = v;
    }
    if let Some(v) = args.clip_norm {
        cfg.clip_norm = v;
    }
    if let Some(v) = args.seed {
        cfg.seed = v;
    }
    if let Some(v) = args.mpl {
        cfg.mpl = v;
    }
    if let Some(v) = args.guidance {
        cfg.model.guidance = v;
    }
    if let Some(v) = args.offsets {
        cfg.model.offsets = v;
    }
    if let Some(v) = args.direct_depth {
        cfg.model.direct_depth = v;
        if v {
            cfg.model.guidance = false;
        }
    }
    if let Some(v) = args.cascade {
        cfg.model.cascade = v;
    }
    if let Some(v) = args.tau {
        cfg.model.tau = v;
    }
    if let Some(s) = &args.widths {
        cfg.model.widths = parse_widths(s)?;
    }
    if let Some(v) = args.patch {
        cfg.loss.patch = v;
    }
    if let Some(v) = args.lambda {
        cfg.loss.lambda = v;
    }
    if let Some(v) = args.mu {
        cfg.loss.mu = v;
    }
    if let Some(v) = args.lambda_si {
        cfg.loss.lambda_si = v;
    }
    cfg.validate();

    let train_set = dataset::load_dir(&args.data)
        .with_context(|| format!("loading {}", args.data.display()))?;
    if train_set.is_empty() {
        bail!("no scenes found in {}", args.data.display());
    }
    let val_set = match &args.val_data {
        Some(dir) => Some(dataset::load_dir(dir).with_context(|| format!("loading {}", dir.display()))?),
        None => None,
    };
    std::fs::create_dir_all(&args.out)?;

    let log_path = args.out.join("train_log.jsonl");
    let mut log_file = std::fs::File::create(&log_path)?;
    let quiet = args.quiet;
    let outcome = train(
        &train_set,
        val_set.as_deref(),
        &cfg,
        Some(&args.out),
        |record| {
            let line = serde_json::to_string(record).expect("serializable record");
            let _ = writeln!(log_file, "{line}");
            if !quiet {
                let val = record
                    .val
                    .as_ref()
                    .map(|v| format!(" val_rmse={:.4}", v.rmse))
                    .unwrap_or_default();
                eprintln!(
                    "epoch {:3}  lr={:.2e}  loss={:.5}{val}",
                    record.epoch, record.lr, record.total_loss
                );
            }
        },
    )?;
    write_checkpoint(&args.out.join("model.p3p1"), &cfg.model, &outcome.params)?;
    let cfg_out = serde_json::to_string_pretty(&cfg)?;
    std::fs::write(args.out.join("train_config.json"), cfg_out + "\n")?;
    println!("trained {} epochs; outputs in {}", cfg.epochs, args.out.display());
    Ok(0)
}

fn load_image_tensor(path: &Path) -> Result<Tensor> {
    let (w, h, rgb) = read_ppm(path)?;
    Ok(Tensor::from_fn(&[3, h, w], |i| {
        let c = i / (h * w);
        let px = i % (h * w);
        rgb[3 * px + c] as f64 / 255.0
    }))
}

fn infer(args: InferArgs) -> Result<i32> {
    let ckpt = read_checkpoint(&args.checkpoint)?;
    let image = load_image_tensor(&args.image)?;
    let out = forward(&image, &ckpt.params, &ckpt.config)?;
    let shape = out.d_f.shape();
    let (h, w) = (shape[0], shape[1]);

    let depth: Vec<f32> = out.d_f.value().iter().map(|&z| z as f32).collect();
    write_pfm(
        Path::new(&format!("{}_depth.pfm", args.out_prefix)),
        w,
        h,
        &depth,
    )?;
    let rgb = offset_color_wheel(&out.offsets.value(), ckpt.config.tau);
    write_ppm(
        Path::new(&format!("{}_offsets.ppm", args.out_prefix)),
        w,
        h,
        &rgb,
    )?;
    let conf: Vec<f32> = out.confidence.value().iter().map(|&c| c as f32).collect();
    write_pfm(
        Path::new(&format!("{}_confidence.pfm", args.out_prefix)),
        w,
        h,
        &conf,
    )?;
    Ok(0)
}

/// Depth map from a PFM file; non-positive or non-finite samples are
/// marked invalid.
fn depth_from_pfm(path: &Path) -> Result<DepthMap> {
    let (w, h, data) = read_pfm(path)?;
    let mut valid = vec![true; w * h];
    let mut lo = f64::MAX;
    let mut hi = 0.0f64;
    for (i, &v) in data.iter().enumerate() {
        let z = v as f64;
        if !(z.is_finite() && z > 0.0) {
            valid[i] = false;
        } else {
            lo = lo.min(z);
            hi = hi.max(z);
        }
    }
    if hi == 0.0 {
        bail!("{}: no positive depth samples", path.display());
    }
    let values = Tensor::from_fn(&[h, w], |i| data[i] as f64);
    Ok(DepthMap::new(values, valid, (lo, hi)))
}

fn pfm_pairs(pred: &Path, gt: &Path) -> Result<Vec<(PathBuf, PathBuf)>> {
    if pred.is_file() && gt.is_file() {
        return Ok(vec![(pred.to_path_buf(), gt.to_path_buf())]);
    }
    if !(pred.is_dir() && gt.is_dir()) {
        bail!("--pred and --gt must both be files or both be directories");
    }
    let mut names: Vec<String> = std::fs::read_dir(pred)?
        .filter_map(|e| e.ok())
        .filter_map(|e| e.file_name().into_string().ok())
        .filter(|n| n.ends_with(".pfm") && gt.join(n).is_file())
        .collect();
    names.sort();
    if names.is_empty() {
        bail!("no matching .pfm files between the two directories");
    }
    Ok(names
        .into_iter()
        .map(|n| (pred.join(&n), gt.join(&n)))
        .collect())
}

fn eval(args: EvalArgs) -> Result<i32> {
    let pairs = pfm_pairs(&args.pred, &args.gt)?;
    let mut reports: Vec<MetricReport> = Vec::with_capacity(pairs.len());
    for (pred_path, gt_path) in &pairs {
        let pred = depth_from_pfm(pred_path)?;
        let gt = depth_from_pfm(gt_path)?;
        let pred = if args.no_median_scale {
            pred
        } else {
            median_scale(&pred, &gt)
                .with_context(|| format!("median scaling {}", pred_path.display()))?
        };
        reports.push(
            compute_metrics(&pred, &gt, args.cap)
                .with_context(|| format!("evaluating {}", pred_path.display()))?,
        );
    }
    let merged = merge_reports(&reports).context("no valid pixels in any pair")?;
    println!("{}", serde_json::to_string_pretty(&merged)?);
    Ok(0)
}

fn gradcheck_cmd(args: GradcheckArgs) -> Result<i32> {
    let mut all_pass = true;
    for report in gradsuite::run_op_suite(args.seed) {
        println!(
            "{:6} {:24} max rel err {:9.3e}  (tol {:.1e})",
            if report.pass { "PASS" } else { "FAIL" },
            report.op,
            report.max_rel_err,
            report.tolerance
        );
        all_pass &= report.pass;
    }
    let e2e = gradsuite::end_to_end_check(args.seed, args.e2e_coords);
    println!(
        "{:6} {:24} max rel err {:9.3e}  (tol {:.1e})",
        if e2e.pass { "PASS" } else { "FAIL" },
        e2e.op,
        e2e.max_rel_err,
        e2e.tolerance
    );
    all_pass &= e2e.pass;
    if all_pass {
        println!("gradient suite: all checks passed");
        Ok(0)
    } else {
        bail!("gradient suite failed")
    }
}

fn reconstruct(args: ReconstructArgs) -> Result<i32> {
    let depth = depth_from_pfm(&args.depth)?;
    let (iw, ih, rgb) = read_ppm(&args.image)?;
    if (iw, ih) != (depth.width(), depth.height()) {
        bail!(
            "image {}x{} does not match depth {}x{}",
            iw,
            ih,
            depth.width(),
            depth.height()
        );
    }
    let default_k = CameraIntrinsics::default_for(iw, ih);
    let k = CameraIntrinsics::new(
        args.fx.unwrap_or(default_k.fx),
        args.fy.unwrap_or(default_k.fy),
        args.u0.unwrap_or(default_k.u0),
        args.v0.unwrap_or(default_k.v0),
        iw,
        ih,
    );
    let points = backproject(&depth, &k);
    let mut vertices = Vec::with_capacity(points.len());
    let mut pi = 0usize;
    for y in 0..ih {
        for x in 0..iw {
            if depth.valid()[y * iw + x] {
                let p = points[pi];
                pi += 1;
                vertices.push(PlyVertex {
                    x: p[0],
                    y: p[1],
                    z: p[2],
                    red: rgb[3 * (y * iw + x)],
                    green: rgb[3 * (y * iw + x) + 1],
                    blue: rgb[3 * (y * iw + x) + 2],
                });
            }
        }
    }
    write_ply_ascii(&args.out, &vertices)?;
    println!("wrote {} vertices to {}", vertices.len(), args.out.display());
    Ok(0)
}
