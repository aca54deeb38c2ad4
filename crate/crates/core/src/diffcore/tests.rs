use alloc::vec;
use alloc::vec::Vec;

use super::*;
use crate::rng::Rng64;
use crate::tensor::Tensor;

fn scalar_leaf(g: &Graph, v: f64) -> DiffValue {
    g.leaf(Tensor::scalar(v))
}

#[test]
fn activation_fixed_points() {
    let g = Graph::new();
    let zero = scalar_leaf(&g, 0.0);
    assert_eq!(zero.tanh().unwrap().item(), 0.0);
    assert_eq!(zero.sigmoid().unwrap().item(), 0.5);
}

#[test]
fn elu_definition() {
    let g = Graph::new();
    let pos = scalar_leaf(&g, 1.7);
    assert_eq!(pos.elu().unwrap().item(), 1.7);
    let neg = scalar_leaf(&g, -1.0);
    let expected = crate::math::exp(-1.0) - 1.0;
    let got = neg.elu().unwrap().item();
    assert!((got - expected).abs() < 1e-15, "ELU(-1) = {got}");
    assert!((expected + 0.63212).abs() < 1e-5);
}

#[test]
fn mean_value_and_gradient() {
    let g = Graph::new();
    let x = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]));
    let m = x.mean().unwrap();
    assert_eq!(m.item(), 2.0);
    m.backward().unwrap();
    for &gi in x.grad().iter() {
        assert!((gi - 1.0 / 3.0).abs() < 1e-15);
    }
}

#[test]
fn conv_identity_kernel() {
    let g = Graph::new();
    let x = g.leaf(Tensor::from_fn(&[1, 4, 5], |i| i as f64 * 0.3 - 2.0));
    let w = g.leaf(Tensor::new(&[1, 1, 1, 1], vec![1.0]));
    let b = g.leaf(Tensor::new(&[1], vec![0.0]));
    let y = x.conv2d(&w, &b, 1, 0).unwrap();
    assert_eq!(y.value(), x.value());
}

#[test]
fn conv_ones_kernel_on_constant_field() {
    let g = Graph::new();
    let c = 0.75;
    let x = g.leaf(Tensor::full(&[1, 6, 6], c));
    let w = g.leaf(Tensor::full(&[1, 1, 3, 3], 1.0));
    let b = g.leaf(Tensor::new(&[1], vec![0.0]));
    let y = x.conv2d(&w, &b, 1, 1).unwrap().value();
    for yy in 1..5 {
        for xx in 1..5 {
            assert!((y.at3(0, yy, xx) - 9.0 * c).abs() < 1e-12);
        }
    }
    // Corner sees only 4 taps.
    assert!((y.at3(0, 0, 0) - 4.0 * c).abs() < 1e-12);
}

/// Direct quadruple-loop cross-correlation; the independent oracle for conv2d.
fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (wd + 2 * pad - kw) / stride + 1;
    let mut out = Tensor::zeros(&[cout, ho, wo]);
    for co in 0..cout {
        for oy in 0..ho {
            for ox in 0..wo {
                let mut acc = b.data()[co];
                for ci in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                acc += x.at3(ci, iy as usize, ix as usize)
                                    * w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                            }
                        }
                    }
                }
                out.set3(co, oy, ox, acc);
            }
        }
    }
    out
}

#[test]
fn conv_matches_loop_oracle_forward_and_backward() {
    let mut rng = Rng64::new(42);
    for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
        let xt = Tensor::from_fn(&[2, 5, 5], |_| rng.uniform_in(-1.0, 1.0));
        let wt = Tensor::from_fn(&[3, 2, 3, 3], |_| rng.uniform_in(-1.0, 1.0));
        let bt = Tensor::from_fn(&[3], |_| rng.uniform_in(-1.0, 1.0));

        let g = Graph::new();
        let x = g.leaf(xt.clone());
        let w = g.leaf(wt.clone());
        let b = g.leaf(bt.clone());
        let y = x.conv2d(&w, &b, stride, pad).unwrap();
        let oracle = conv_oracle(&xt, &wt, &bt, stride, pad);
        assert_eq!(y.shape(), oracle.shape().to_vec());
        for (a, o) in y.value().iter().zip(oracle.iter()) {
            assert!((a - o).abs() < 1e-12, "forward mismatch stride={stride}");
        }

        // Gradients against the finite-difference harness.
        let report = grad_check(
            "conv2d",
            &mut rng,
            |rng| {
                vec![
                    Tensor::from_fn(&[2, 5, 5], |_| rng.uniform_in(-1.0, 1.0)),
                    Tensor::from_fn(&[3, 2, 3, 3], |_| rng.uniform_in(-1.0, 1.0)),
                    Tensor::from_fn(&[3], |_| rng.uniform_in(-1.0, 1.0)),
                ]
            },
            |_| true,
            |_, xs| xs[0].conv2d(&xs[1], &xs[2], stride, pad),
            1e-4,
        )
        .unwrap();
        assert!(report.pass, "conv2d grad rel err {}", report.max_rel_err);
    }
}

#[test]
fn conv_kernel_larger_than_padded_input_errors() {
    let g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[1, 2, 2]));
    let w = g.leaf(Tensor::zeros(&[1, 1, 5, 5]));
    let b = g.leaf(Tensor::zeros(&[1]));
    assert!(matches!(
        x.conv2d(&w, &b, 1, 1),
        Err(DiffError::KernelTooLarge { .. })
    ));
}

#[test]
fn grid_sample_integer_positions_are_exact_lookup() {
    let g = Graph::new();
    let map = g.leaf(Tensor::from_fn(&[2, 3, 4], |i| i as f64));
    let mut pos = Tensor::zeros(&[2, 3, 4]);
    for y in 0..3 {
        for x in 0..4 {
            pos.set3(0, y, x, x as f64);
            pos.set3(1, y, x, y as f64);
        }
    }
    let out = map.grid_sample(&g.constant(pos)).unwrap();
    assert_eq!(out.value(), map.value());
}

#[test]
fn grid_sample_center_of_2x2() {
    let g = Graph::new();
    let map = g.leaf(Tensor::new(&[1, 2, 2], vec![1.0, 3.0, 5.0, 7.0]));
    let pos = Tensor::new(&[2, 1, 1], vec![0.5, 0.5]);
    let out = map.grid_sample(&g.constant(pos)).unwrap();
    assert_eq!(out.value().data()[0], 4.0);
}

#[test]
fn grid_sample_border_clamp() {
    let g = Graph::new();
    let map = g.leaf(Tensor::new(&[1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let pos = Tensor::new(&[2, 1, 1], vec![-10.0, 0.0]);
    let out = map.grid_sample(&g.constant(pos)).unwrap();
    assert_eq!(out.value().data()[0], 1.0);
}

#[test]
fn grid_sample_gradients_wrt_map_and_positions() {
    let mut rng = Rng64::new(7);
    let report = grad_check(
        "grid_sample",
        &mut rng,
        |rng| {
            vec![
                Tensor::from_fn(&[2, 5, 5], |_| rng.uniform_in(-1.0, 1.0)),
                Tensor::from_fn(&[2, 3, 3], |_| rng.uniform_in(0.3, 3.7)),
            ]
        },
        |xs| gradcheck::away_from_integers(&xs[1], KINK_MARGIN),
        |_, xs| xs[0].grid_sample(&xs[1]),
        1e-4,
    )
    .unwrap();
    assert!(report.pass, "grid_sample rel err {}", report.max_rel_err);
}

#[test]
fn normalize_channels_examples() {
    let g = Graph::new();
    let v = g.leaf(Tensor::new(&[3, 1, 2], vec![0.0, 3.0, 0.0, 4.0, 2.0, 0.0]));
    let n = v.normalize_channels().unwrap().value();
    // Pixel 0: (0,0,2) -> (0,0,1); pixel 1: (3,4,0) -> (0.6,0.8,0).
    assert!((n.at3(0, 0, 0)).abs() < 1e-15);
    assert!((n.at3(1, 0, 0)).abs() < 1e-15);
    assert!((n.at3(2, 0, 0) - 1.0).abs() < 1e-15);
    assert!((n.at3(0, 0, 1) - 0.6).abs() < 1e-15);
    assert!((n.at3(1, 0, 1) - 0.8).abs() < 1e-15);
    assert!((n.at3(2, 0, 1)).abs() < 1e-15);
}

#[test]
fn normalize_channels_gradient() {
    let mut rng = Rng64::new(9);
    let report = grad_check(
        "normalize_channels",
        &mut rng,
        |rng| vec![Tensor::from_fn(&[3, 2, 2], |_| rng.uniform_in(0.2, 2.0))],
        |_| true,
        |_, xs| xs[0].normalize_channels(),
        1e-6,
    )
    .unwrap();
    assert!(report.pass, "normalize rel err {}", report.max_rel_err);
}

#[test]
fn solve3x3_identity_and_diagonal() {
    let g = Graph::new();
    let eye = g.leaf(Tensor::new(
        &[3, 3],
        vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0],
    ));
    let rhs = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]));
    let x = eye.solve3x3(&rhs, 1e-30).unwrap();
    assert_eq!(x.value().data(), &[1.0, 2.0, 3.0]);

    let diag = g.leaf(Tensor::new(
        &[3, 3],
        vec![2.0, 0.0, 0.0, 0.0, 4.0, 0.0, 0.0, 0.0, 8.0],
    ));
    let rhs2 = g.leaf(Tensor::new(&[3], vec![2.0, 4.0, 8.0]));
    let x2 = diag.solve3x3(&rhs2, 1e-30).unwrap();
    for &v in x2.value().iter() {
        assert!((v - 1.0).abs() < 1e-15);
    }
}

/// Gaussian elimination with partial pivoting; oracle for solve3x3.
fn gauss_solve(m: &[f64; 9], b: &[f64; 3]) -> [f64; 3] {
    let mut a = [[m[0], m[1], m[2], b[0]], [m[3], m[4], m[5], b[1]], [
        m[6], m[7], m[8], b[2],
    ]];
    for col in 0..3 {
        let piv = (col..3)
            .max_by(|&i, &j| a[i][col].abs().partial_cmp(&a[j][col].abs()).unwrap())
            .unwrap();
        a.swap(col, piv);
        for row in col + 1..3 {
            let f = a[row][col] / a[col][col];
            for k in col..4 {
                a[row][k] -= f * a[col][k];
            }
        }
    }
    let mut x = [0.0; 3];
    for row in (0..3).rev() {
        let mut acc = a[row][3];
        for k in row + 1..3 {
            acc -= a[row][k] * x[k];
        }
        x[row] = acc / a[row][row];
    }
    x
}

#[test]
fn solve3x3_matches_elimination_oracle() {
    let mut rng = Rng64::new(13);
    for _ in 0..100 {
        // Build a well-conditioned SPD matrix A^T A + I.
        let mut m = [0.0f64; 9];
        let a: Vec<f64> = (0..9).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
        for r in 0..3 {
            for c in 0..3 {
                for k in 0..3 {
                    m[r * 3 + c] += a[k * 3 + r] * a[k * 3 + c];
                }
            }
            m[r * 3 + r] += 1.0;
        }
        let b = [
            rng.uniform_in(-2.0, 2.0),
            rng.uniform_in(-2.0, 2.0),
            rng.uniform_in(-2.0, 2.0),
        ];
        let g = Graph::new();
        let mat = g.leaf(Tensor::new(&[3, 3], m.to_vec()));
        let rhs = g.leaf(Tensor::new(&[3], b.to_vec()));
        let x = mat.solve3x3(&rhs, 1e-30).unwrap().value();
        let oracle = gauss_solve(&m, &b);
        for k in 0..3 {
            assert!(
                (x.data()[k] - oracle[k]).abs() < 1e-10,
                "solve mismatch {} vs {}",
                x.data()[k],
                oracle[k]
            );
        }
    }
}

#[test]
fn solve3x3_singular_is_an_error() {
    let g = Graph::new();
    let m = g.leaf(Tensor::new(
        &[3, 3],
        vec![1.0, 2.0, 3.0, 2.0, 4.0, 6.0, 1.0, 1.0, 1.0],
    ));
    let b = g.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]));
    assert!(matches!(
        m.solve3x3(&b, 1e-12),
        Err(DiffError::SingularMatrix { .. })
    ));
}

#[test]
fn solve3x3_gradient() {
    let mut rng = Rng64::new(17);
    let report = grad_check(
        "solve3x3",
        &mut rng,
        |rng| {
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
        |_| true,
        |_, xs| xs[0].solve3x3(&xs[1], 1e-30),
        1e-6,
    )
    .unwrap();
    assert!(report.pass, "solve3x3 rel err {}", report.max_rel_err);
}

#[test]
fn backward_square() {
    let g = Graph::new();
    let x = scalar_leaf(&g, 3.0);
    let loss = x.square().unwrap();
    loss.backward().unwrap();
    assert_eq!(x.grad().item(), 6.0);
}

#[test]
fn backward_mean_squared_residual() {
    let g = Graph::new();
    let x = g.leaf(Tensor::new(&[4], vec![0.0, 1.0, 2.0, 5.0]));
    let loss = x.affine(1.0, -1.0).unwrap().square().unwrap().mean().unwrap();
    loss.backward().unwrap();
    let gx = x.grad();
    for (i, &xv) in [0.0, 1.0, 2.0, 5.0].iter().enumerate() {
        let expected = 2.0 * (xv - 1.0) / 4.0;
        assert!((gx.data()[i] - expected).abs() < 1e-15);
    }
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let g = Graph::new();
    let x = g.leaf(Tensor::zeros(&[3]));
    assert!(matches!(
        x.backward(),
        Err(DiffError::NonScalarLoss { .. })
    ));
}

#[test]
fn backward_twice_is_rejected() {
    let g = Graph::new();
    let x = scalar_leaf(&g, 2.0);
    let loss = x.square().unwrap();
    loss.backward().unwrap();
    assert_eq!(loss.backward(), Err(DiffError::BackwardTwice));
}

#[test]
fn off_path_gradients_stay_zero() {
    let g = Graph::new();
    let x = scalar_leaf(&g, 2.0);
    let unused = x.exp().unwrap();
    let loss = x.square().unwrap();
    loss.backward().unwrap();
    assert_eq!(unused.grad().item(), 0.0);
    assert_eq!(x.grad().item(), 4.0);
}

#[test]
fn shape_mismatch_is_an_error() {
    let g = Graph::new();
    let a = g.leaf(Tensor::zeros(&[3]));
    let b = g.leaf(Tensor::zeros(&[4]));
    assert!(matches!(a.add(&b), Err(DiffError::ShapeMismatch { .. })));
}

#[test]
fn non_finite_output_names_the_op() {
    let g = Graph::new();
    let a = scalar_leaf(&g, 1.0);
    let b = scalar_leaf(&g, 0.0);
    match a.div(&b) {
        Err(DiffError::NonFinite { op }) => assert_eq!(op, "div"),
        other => panic!("expected NonFinite, got {other:?}"),
    }
    let big = scalar_leaf(&g, 1e308);
    assert!(matches!(big.exp(), Err(DiffError::NonFinite { op: "exp" })));
}

#[test]
fn linearity_of_backward() {
    // grad(a*f + b*g) == a*grad(f) + b*grad(g), elementwise.
    let (a, b) = (2.5, -1.25);
    let xt = Tensor::new(&[3], vec![0.3, -0.7, 1.1]);

    let run = |wa: f64, wb: f64| -> Vec<f64> {
        let g = Graph::new();
        let x = g.leaf(xt.clone());
        let f = x.tanh().unwrap().sum().unwrap();
        let h = x.square().unwrap().sum().unwrap();
        let loss = f
            .affine(wa, 0.0)
            .unwrap()
            .add(&h.affine(wb, 0.0).unwrap())
            .unwrap();
        loss.backward().unwrap();
        x.grad().data().to_vec()
    };

    let combined = run(a, b);
    let only_f = run(1.0, 0.0);
    let only_h = run(0.0, 1.0);
    for i in 0..3 {
        let expected = a * only_f[i] + b * only_h[i];
        assert_eq!(combined[i], expected, "linearity must hold exactly");
    }
}

#[test]
fn forward_is_deterministic() {
    let build = || {
        let g = Graph::new();
        let x = g.leaf(Tensor::from_fn(&[2, 4, 4], |i| (i as f64 * 0.37).sin()));
        let w = g.leaf(Tensor::from_fn(&[2, 2, 3, 3], |i| (i as f64 * 0.11).cos()));
        let b = g.leaf(Tensor::new(&[2], vec![0.1, -0.2]));
        x.conv2d(&w, &b, 1, 1)
            .unwrap()
            .elu()
            .unwrap()
            .mean()
            .unwrap()
            .item()
    };
    let first = build();
    let second = build();
    assert_eq!(first.to_bits(), second.to_bits());
}

#[test]
fn composite_graph_full_gradient_check() {
    // Chains most primitives: conv -> elu -> grid_sample -> normalize ->
    // sigmoid/softplus mix -> reductions.
    let mut rng = Rng64::new(23);
    let report = grad_check(
        "composite",
        &mut rng,
        |rng| {
            vec![
                Tensor::from_fn(&[2, 4, 4], |_| rng.uniform_in(-1.0, 1.0)),
                Tensor::from_fn(&[3, 2, 3, 3], |_| rng.uniform_in(-0.5, 0.5)),
                Tensor::from_fn(&[3], |_| rng.uniform_in(-0.2, 0.2)),
                Tensor::from_fn(&[2, 3, 3], |_| rng.uniform_in(0.3, 2.7)),
            ]
        },
        |xs| {
            gradcheck::away_from_integers(&xs[3], KINK_MARGIN)
                && xs[0].iter().all(|&v| v.abs() > KINK_MARGIN)
        },
        |g, xs| {
            let feat = xs[0].conv2d(&xs[1], &xs[2], 1, 1)?.elu()?;
            let sampled = feat.grid_sample(&xs[3])?;
            let unit = sampled.normalize_channels()?;
            let a = unit.slice_channels(0, 1)?.sigmoid()?;
            let b = unit.slice_channels(1, 3)?.softplus()?;
            let merged = g.concat_channels(&[a, b])?;
            merged.square()?.mean()
        },
        1e-4,
    )
    .unwrap();
    assert!(report.pass, "composite rel err {}", report.max_rel_err);
}

#[test]
fn reductions_over_axes() {
    let g = Graph::new();
    let x = g.leaf(Tensor::new(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let rows = x.sum_axis(1).unwrap();
    assert_eq!(rows.value().data(), &[6.0, 15.0]);
    let cols = x.mean_axis(0).unwrap();
    assert_eq!(cols.value().data(), &[2.5, 3.5, 4.5]);

    let mut rng = Rng64::new(31);
    for axis in 0..2 {
        let report = grad_check(
            "sum_axis",
            &mut rng,
            |rng| vec![Tensor::from_fn(&[3, 4], |_| rng.uniform_in(-1.0, 1.0))],
            |_| true,
            |_, xs| xs[0].sum_axis(axis),
            1e-6,
        )
        .unwrap();
        assert!(report.pass);
    }
}

#[test]
fn stack_and_concat_round_trip_gradients() {
    let mut rng = Rng64::new(37);
    let report = grad_check(
        "stack_scalars",
        &mut rng,
        |rng| {
            vec![
                Tensor::scalar(rng.uniform_in(-1.0, 1.0)),
                Tensor::scalar(rng.uniform_in(-1.0, 1.0)),
                Tensor::scalar(rng.uniform_in(-1.0, 1.0)),
            ]
        },
        |_| true,
        |g, xs| {
            let v = g.stack_scalars(xs)?;
            v.square()?.sum()
        },
        1e-6,
    )
    .unwrap();
    assert!(report.pass);

    let report = grad_check(
        "crop2d",
        &mut rng,
        |rng| vec![Tensor::from_fn(&[2, 5, 5], |_| rng.uniform_in(-1.0, 1.0))],
        |_| true,
        |_, xs| xs[0].crop2d(1, 2, 3, 2),
        1e-6,
    )
    .unwrap();
    assert!(report.pass);
}
