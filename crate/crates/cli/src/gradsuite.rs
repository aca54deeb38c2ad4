//! The shippable gradient-verification suite: every autodiff primitive
//! against central finite differences over multiple seeds, plus an
//! end-to-end check of the total training loss through the full model.

use planedepth_core::diffcore::{grad_check, gradcheck, DiffValue, GradCheckReport, Graph, KINK_MARGIN};
use planedepth_core::geometry::CameraIntrinsics;
use planedepth_core::losses::{total_loss, LossWeights};
use planedepth_core::model::{forward, init, ModelConfig};
use planedepth_core::rng::Rng64;
use planedepth_core::synthscenes::{generate, SceneSpec};
use planedepth_core::tensor::Tensor;

pub const OP_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;
pub const SEEDS: u64 = 10;

type Build = fn(&Graph, &[DiffValue]) -> planedepth_core::diffcore::Result<DiffValue>;

struct OpCase {
    name: &'static str,
    sample: fn(&mut Rng64) -> Vec<Tensor>,
    kink_free: fn(&[Tensor]) -> bool,
    build: Build,
    tolerance: f64,
}

fn vec6(rng: &mut Rng64) -> Vec<Tensor> {
    vec![Tensor::from_fn(&[6], |_| rng.uniform_in(-2.0, 2.0))]
}

fn vec6_pos(rng: &mut Rng64) -> Vec<Tensor> {
    vec![Tensor::from_fn(&[6], |_| rng.uniform_in(0.2, 3.0))]
}

fn pair(rng: &mut Rng64) -> Vec<Tensor> {
    vec![
        Tensor::from_fn(&[2, 3], |_| rng.uniform_in(-2.0, 2.0)),
        Tensor::from_fn(&[2, 3], |_| rng.uniform_in(-2.0, 2.0)),
    ]
}

fn pair_denominator_safe(rng: &mut Rng64) -> Vec<Tensor> {
    vec![
        Tensor::from_fn(&[2, 3], |_| rng.uniform_in(-2.0, 2.0)),
        Tensor::from_fn(&[2, 3], |_| {
            let sign = if rng.uniform() < 0.5 { -1.0 } else { 1.0 };
            sign * rng.uniform_in(0.5, 2.0)
        }),
    ]
}

fn scalar_and_map(rng: &mut Rng64) -> Vec<Tensor> {
    vec![
        Tensor::from_fn(&[3, 3], |_| rng.uniform_in(-2.0, 2.0)),
        Tensor::scalar(rng.uniform_in(0.5, 1.5)),
    ]
}

fn no_kinks(_: &[Tensor]) -> bool {
    true
}

fn away_from_zero(xs: &[Tensor]) -> bool {
    gradcheck::away_from(&xs[0], &[0.0], KINK_MARGIN)
}

fn clamp_kink_free(xs: &[Tensor]) -> bool {
    gradcheck::away_from(&xs[0], &[-1.0, 1.0], KINK_MARGIN)
}

fn cases() -> Vec<OpCase> {
    vec![
        OpCase {
            name: "add",
            sample: pair,
            kink_free: no_kinks,
            build: |_, xs| xs[0].add(&xs[1]),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "add_scalar_broadcast",
            sample: scalar_and_map,
            kink_free: no_kinks,
            build: |_, xs| xs[0].add(&xs[1]),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "sub",
            sample: pair,
            kink_free: no_kinks,
            build: |_, xs| xs[0].sub(&xs[1]),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "mul",
            sample: pair,
            kink_free: no_kinks,
            build: |_, xs| xs[0].mul(&xs[1]),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "mul_scalar_broadcast",
            sample: scalar_and_map,
            kink_free: no_kinks,
            build: |_, xs| xs[0].mul(&xs[1]),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "div",
            sample: pair_denominator_safe,
            kink_free: no_kinks,
            build: |_, xs| xs[0].div(&xs[1]),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "neg",
            sample: vec6,
            kink_free: no_kinks,
            build: |_, xs| xs[0].neg(),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "recip",
            sample: vec6_pos,
            kink_free: no_kinks,
            build: |_, xs| xs[0].recip(),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "log",
            sample: vec6_pos,
            kink_free: no_kinks,
            build: |_, xs| xs[0].log(),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "exp",
            sample: vec6,
            kink_free: no_kinks,
            build: |_, xs| xs[0].exp(),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "sqrt",
            sample: vec6_pos,
            kink_free: no_kinks,
            build: |_, xs| xs[0].sqrt(),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "tanh",
            sample: vec6,
            kink_free: no_kinks,
            build: |_, xs| xs[0].tanh(),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "sigmoid",
            sample: vec6,
            kink_free: no_kinks,
            build: |_, xs| xs[0].sigmoid(),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "softplus",
            sample: vec6,
            kink_free: no_kinks,
            build: |_, xs| xs[0].softplus(),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "elu",
            sample: vec6,
            kink_free: away_from_zero,
            build: |_, xs| xs[0].elu(),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "abs",
            sample: vec6,
            kink_free: away_from_zero,
            build: |_, xs| xs[0].abs(),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "clamp",
            sample: vec6,
            kink_free: clamp_kink_free,
            build: |_, xs| xs[0].clamp(-1.0, 1.0),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "affine",
            sample: vec6,
            kink_free: no_kinks,
            build: |_, xs| xs[0].affine(-1.7, 0.4),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "sum",
            sample: pair,
            kink_free: no_kinks,
            build: |_, xs| xs[0].sum(),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "mean",
            sample: pair,
            kink_free: no_kinks,
            build: |_, xs| xs[0].mean(),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "sum_axis0",
            sample: pair,
            kink_free: no_kinks,
            build: |_, xs| xs[0].sum_axis(0),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "mean_axis1",
            sample: pair,
            kink_free: no_kinks,
            build: |_, xs| xs[0].mean_axis(1),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "reshape",
            sample: pair,
            kink_free: no_kinks,
            build: |_, xs| xs[0].reshape(&[3, 2]),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "slice_channels",
            sample: |rng| vec![Tensor::from_fn(&[3, 2, 2], |_| rng.uniform_in(-1.0, 1.0))],
            kink_free: no_kinks,
            build: |_, xs| xs[0].slice_channels(1, 3),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "crop2d",
            sample: |rng| vec![Tensor::from_fn(&[2, 5, 5], |_| rng.uniform_in(-1.0, 1.0))],
            kink_free: no_kinks,
            build: |_, xs| xs[0].crop2d(1, 1, 3, 3),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "concat_channels",
            sample: |rng| {
                vec![
                    Tensor::from_fn(&[1, 3, 3], |_| rng.uniform_in(-1.0, 1.0)),
                    Tensor::from_fn(&[2, 3, 3], |_| rng.uniform_in(-1.0, 1.0)),
                ]
            },
            kink_free: no_kinks,
            build: |g, xs| g.concat_channels(xs),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "stack_scalars",
            sample: |rng| {
                vec![
                    Tensor::scalar(rng.uniform_in(-1.0, 1.0)),
                    Tensor::scalar(rng.uniform_in(-1.0, 1.0)),
                    Tensor::scalar(rng.uniform_in(-1.0, 1.0)),
                ]
            },
            kink_free: no_kinks,
            build: |g, xs| g.stack_scalars(xs),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "conv2d_stride1",
            sample: |rng| {
                vec![
                    Tensor::from_fn(&[2, 5, 5], |_| rng.uniform_in(-1.0, 1.0)),
                    Tensor::from_fn(&[3, 2, 3, 3], |_| rng.uniform_in(-1.0, 1.0)),
                    Tensor::from_fn(&[3], |_| rng.uniform_in(-1.0, 1.0)),
                ]
            },
            kink_free: no_kinks,
            build: |_, xs| xs[0].conv2d(&xs[1], &xs[2], 1, 1),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "conv2d_stride2",
            sample: |rng| {
                vec![
                    Tensor::from_fn(&[2, 6, 6], |_| rng.uniform_in(-1.0, 1.0)),
                    Tensor::from_fn(&[2, 2, 3, 3], |_| rng.uniform_in(-1.0, 1.0)),
                    Tensor::from_fn(&[2], |_| rng.uniform_in(-1.0, 1.0)),
                ]
            },
            kink_free: no_kinks,
            build: |_, xs| xs[0].conv2d(&xs[1], &xs[2], 2, 1),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "grid_sample_bilinear",
            sample: |rng| {
                vec![
                    Tensor::from_fn(&[2, 5, 5], |_| rng.uniform_in(-1.0, 1.0)),
                    Tensor::from_fn(&[2, 3, 3], |_| rng.uniform_in(0.2, 3.8)),
                ]
            },
            kink_free: |xs| gradcheck::away_from_integers(&xs[1], KINK_MARGIN),
            build: |_, xs| xs[0].grid_sample(&xs[1]),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "upsample_bilinear",
            sample: |rng| vec![Tensor::from_fn(&[2, 3, 3], |_| rng.uniform_in(-1.0, 1.0))],
            kink_free: no_kinks,
            build: |_, xs| xs[0].upsample_bilinear(5, 7),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "normalize_channels",
            sample: |rng| vec![Tensor::from_fn(&[3, 2, 2], |_| rng.uniform_in(0.2, 2.0))],
            kink_free: no_kinks,
            build: |_, xs| xs[0].normalize_channels(),
            tolerance: OP_TOLERANCE,
        },
        OpCase {
            name: "solve_normal_3x3",
            sample: |rng| {
                let a: Vec<f64> = (0..9).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
                let mut m = vec![0.0f64; 9];
                for r in 0..3 {
                    for c in 0..3 {
                        for k in 0..3 {
                            m[r * 3 + c] += a[k * 3 + r] * a[k * 3 + c];
                        }
                    }
                    m[r * 3 + r] += 1.0;
                }
                vec![
                    Tensor::new(&[3, 3], m),
                    Tensor::from_fn(&[3], |_| rng.uniform_in(-2.0, 2.0)),
                ]
            },
            kink_free: no_kinks,
            build: |_, xs| xs[0].solve3x3(&xs[1], 1e-30),
            tolerance: OP_TOLERANCE,
        },
    ]
}

/// Worst-case report per primitive over `SEEDS` random seeds.
pub fn run_op_suite(base_seed: u64) -> Vec<GradCheckReport> {
    let mut out = Vec::new();
    for case in cases() {
        let mut worst: Option<GradCheckReport> = None;
        for s in 0..SEEDS {
            let mut rng = Rng64::new(base_seed ^ (0x9e37 + s * 7919));
            let report = grad_check(
                case.name,
                &mut rng,
                case.sample,
                case.kink_free,
                case.build,
                case.tolerance,
            )
            .expect("sampler produced kink-free inputs");
            worst = Some(match worst {
                Some(prev) if prev.max_rel_err >= report.max_rel_err => prev,
                _ => report,
            });
        }
        out.push(worst.expect("at least one seed"));
    }
    out
}

/// Central-difference check of the total training loss with respect to a
/// random subset of model parameters, through the complete forward pass.
pub fn end_to_end_check(seed: u64, n_coords: usize) -> GradCheckReport {
    let spec = SceneSpec {
        width: 16,
        height: 16,
        ..SceneSpec::default()
    };
    let scene = generate(&spec, seed ^ 0xe2e).expect("scene generation");
    let config = ModelConfig {
        widths: vec![4, 8],
        depth_range: (0.25, 10.0),
        ..ModelConfig::default()
    };
    let weights = LossWeights {
        patch: 8,
        ..LossWeights::default()
    };
    let mut params = init(&config, seed);
    let k: CameraIntrinsics = scene.intrinsics;

    let eval_loss = |params: &planedepth_core::model::Parameters| -> f64 {
        let out = forward(&scene.image, params, &config).expect("forward");
        total_loss(
            &out.d_f,
            &out.d_s,
            &out.d_i,
            &scene.depth,
            &k,
            &weights,
            true,
        )
        .expect("loss")
        .value
        .item()
    };

    // Analytic gradients once.
    let out = forward(&scene.image, &params, &config).expect("forward");
    let loss = total_loss(
        &out.d_f,
        &out.d_s,
        &out.d_i,
        &scene.depth,
        &k,
        &weights,
        true,
    )
    .expect("loss");
    loss.value.backward().expect("backward");
    let grads: Vec<Tensor> = out.param_values.iter().map(|p| p.grad()).collect();

    let mut rng = Rng64::new(seed ^ 0x20c0);
    let h = 1e-5;
    let mut max_rel = 0.0f64;
    for _ in 0..n_coords {
        let pi = rng.below(params.len());
        let ei = rng.below(params.tensors()[pi].numel());
        let original = params.tensors()[pi].data()[ei];
        params.tensors_mut()[pi].data_mut()[ei] = original + h;
        let fp = eval_loss(&params);
        params.tensors_mut()[pi].data_mut()[ei] = original - h;
        let fm = eval_loss(&params);
        params.tensors_mut()[pi].data_mut()[ei] = original;
        let numeric = (fp - fm) / (2.0 * h);
        let analytic = grads[pi].data()[ei];
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
        max_rel = max_rel.max(rel);
    }
    GradCheckReport {
        op: "total_loss_end_to_end".to_string(),
        max_rel_err: max_rel,
        step: h,
        tolerance: END_TO_END_TOLERANCE,
        pass: max_rel <= END_TO_END_TOLERANCE,
    }
}
