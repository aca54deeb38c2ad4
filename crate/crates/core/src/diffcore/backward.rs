//! Reverse pass: walks the tape backwards and applies each primitive's
//! analytic vector-Jacobian product.

use alloc::vec;
use alloc::vec::Vec;

use super::forward::{bilin_cell, pad_input, sigmoid};
use super::{BinaryKind, DiffError, DiffValue, Node, Op, Result, UnaryKind};
use crate::tensor::Tensor;
use crate::EPS_POS;

pub(crate) fn run(loss: &DiffValue) -> Result<()> {
    let mut inner = loss.graph.inner.borrow_mut();
    if inner.backward_done {
        return Err(DiffError::BackwardTwice);
    }
    {
        let node = &inner.nodes[loss.id];
        if node.value.numel() != 1 {
            return Err(DiffError::NonScalarLoss {
                shape: node.value.shape().to_vec(),
            });
        }
        if !node.value.all_finite() {
            return Err(DiffError::NonFinite { op: "backward" });
        }
    }
    inner.backward_done = true;

    let n = inner.nodes.len();
    // Nodes the loss depends on; everything else keeps a zero gradient.
    let mut reachable = vec![false; n];
    let mut stack = vec![loss.id];
    reachable[loss.id] = true;
    while let Some(id) = stack.pop() {
        inner.nodes[id].op.for_each_input(|j| {
            if !reachable[j] {
                reachable[j] = true;
                stack.push(j);
            }
        });
    }

    let mut grads: Vec<Option<Tensor>> = vec![None; n];
    grads[loss.id] = Some(Tensor::full(
        inner.nodes[loss.id].value.shape(),
        1.0,
    ));

    // Tape order is a topological order: every consumer of a node has a
    // larger id, so by the time we reach a node its gradient is complete.
    for id in (0..=loss.id).rev() {
        if !reachable[id] || !inner.nodes[id].needs_grad {
            continue;
        }
        let Some(gout) = grads[id].take() else {
            continue;
        };
        propagate(&inner.nodes, id, &gout, &mut grads);
        grads[id] = Some(gout);
    }

    for (node, grad) in inner.nodes.iter_mut().zip(grads.into_iter()) {
        if node.needs_grad {
            node.grad = grad;
        }
    }
    Ok(())
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, mut add: impl FnMut(&mut [f64])) {
    if !nodes[id].needs_grad {
        return;
    }
    let g = grads[id].get_or_insert_with(|| Tensor::zeros(nodes[id].value.shape()));
    add(g.data_mut());
}

/// Gradient contribution shaped like the op output, folded down to the input
/// shape (sum-reduce when the input was a broadcast scalar).
fn accumulate_reduced(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, contrib: &[f64]) {
    if !nodes[id].needs_grad {
        return;
    }
    let numel = nodes[id].value.numel();
    if numel == contrib.len() {
        accumulate(nodes, grads, id, |g| {
            for (gi, ci) in g.iter_mut().zip(contrib) {
                *gi += ci;
            }
        });
    } else {
        debug_assert_eq!(numel, 1);
        let s: f64 = contrib.iter().sum();
        accumulate(nodes, grads, id, |g| g[0] += s);
    }
}

fn propagate(nodes: &[Node], id: usize, gout: &Tensor, grads: &mut [Option<Tensor>]) {
    let op = nodes[id].op.clone();
    match op {
        Op::Leaf => {}
        Op::Unary { kind, input } => {
            let x = &nodes[input].value;
            let y = &nodes[id].value;
            let contrib: Vec<f64> = match kind {
                UnaryKind::Neg => gout.iter().map(|&g| -g).collect(),
                UnaryKind::Recip => gout
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(&g, (&xv, &yv))| if xv > EPS_POS { -g * yv * yv } else { 0.0 })
                    .collect(),
                UnaryKind::Log => gout
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &xv)| if xv > EPS_POS { g / xv } else { 0.0 })
                    .collect(),
                UnaryKind::Exp => gout.iter().zip(y.iter()).map(|(&g, &yv)| g * yv).collect(),
                UnaryKind::Sqrt => gout
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(&g, (&xv, &yv))| if xv > EPS_POS { 0.5 * g / yv } else { 0.0 })
                    .collect(),
                UnaryKind::Tanh => gout
                    .iter()
                    .zip(y.iter())
                    .map(|(&g, &yv)| g * (1.0 - yv * yv))
                    .collect(),
                UnaryKind::Sigmoid => gout
                    .iter()
                    .zip(y.iter())
                    .map(|(&g, &yv)| g * yv * (1.0 - yv))
                    .collect(),
                UnaryKind::Softplus => gout
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &xv)| g * sigmoid(xv))
                    .collect(),
                UnaryKind::Elu => gout
                    .iter()
                    .zip(x.iter().zip(y.iter()))
                    .map(|(&g, (&xv, &yv))| if xv >= 0.0 { g } else { g * (yv + 1.0) })
                    .collect(),
                UnaryKind::Abs => gout
                    .iter()
                    .zip(x.iter())
                    .map(|(&g, &xv)| {
                        if xv > 0.0 {
                            g
                        } else if xv < 0.0 {
                            -g
                        } else {
                            0.0
                        }
                    })
                    .collect(),
            };
            accumulate_reduced(nodes, grads, input, &contrib);
        }
        Op::Affine { input, mul, .. } => {
            let contrib: Vec<f64> = gout.iter().map(|&g| g * mul).collect();
            accumulate_reduced(nodes, grads, input, &contrib);
        }
        Op::Clamp { input, lo, hi } => {
            let x = &nodes[input].value;
            let contrib: Vec<f64> = gout
                .iter()
                .zip(x.iter())
                .map(|(&g, &xv)| if (lo..=hi).contains(&xv) { g } else { 0.0 })
                .collect();
            accumulate_reduced(nodes, grads, input, &contrib);
        }
        Op::Binary { kind, lhs, rhs } => {
            let a = &nodes[lhs].value;
            let b = &nodes[rhs].value;
            let n = gout.numel();
            let at = |t: &Tensor, i: usize| {
                if t.numel() == 1 {
                    t.data()[0]
                } else {
                    t.data()[i]
                }
            };
            let (da, db): (Vec<f64>, Vec<f64>) = match kind {
                BinaryKind::Add => (gout.data().to_vec(), gout.data().to_vec()),
                BinaryKind::Sub => (
                    gout.data().to_vec(),
                    gout.iter().map(|&g| -g).collect(),
                ),
                BinaryKind::Mul => (
                    (0..n).map(|i| gout.data()[i] * at(b, i)).collect(),
                    (0..n).map(|i| gout.data()[i] * at(a, i)).collect(),
                ),
                BinaryKind::Div => (
                    (0..n).map(|i| gout.data()[i] / at(b, i)).collect(),
                    (0..n)
                        .map(|i| {
                            let bv = at(b, i);
                            -gout.data()[i] * at(a, i) / (bv * bv)
                        })
                        .collect(),
                ),
            };
            accumulate_reduced(nodes, grads, lhs, &da);
            accumulate_reduced(nodes, grads, rhs, &db);
        }
        Op::Sum { input } => {
            let g = gout.item();
            accumulate(nodes, grads, input, |gr| {
                for v in gr.iter_mut() {
                    *v += g;
                }
            });
        }
        Op::Mean { input } => {
            let n = nodes[input].value.numel() as f64;
            let g = gout.item() / n;
            accumulate(nodes, grads, input, |gr| {
                for v in gr.iter_mut() {
                    *v += g;
                }
            });
        }
        Op::SumAxis { input, axis } | Op::MeanAxis { input, axis } => {
            let shape = nodes[input].value.shape().to_vec();
            let outer: usize = shape[..axis].iter().product();
            let mid = shape[axis];
            let inner_n: usize = shape[axis + 1..].iter().product();
            let scale = if matches!(nodes[id].op, Op::MeanAxis { .. }) {
                1.0 / mid as f64
            } else {
                1.0
            };
            accumulate(nodes, grads, input, |gr| {
                for o in 0..outer {
                    for m in 0..mid {
                        let base = (o * mid + m) * inner_n;
                        let src = o * inner_n;
                        for i in 0..inner_n {
                            gr[base + i] += gout.data()[src + i] * scale;
                        }
                    }
                }
            });
        }
        Op::Reshape { input } => {
            accumulate(nodes, grads, input, |gr| {
                for (gi, go) in gr.iter_mut().zip(gout.iter()) {
                    *gi += go;
                }
            });
        }
        Op::SliceChannels { input, c0 } => {
            let hw = nodes[input].value.shape()[1] * nodes[input].value.shape()[2];
            accumulate(nodes, grads, input, |gr| {
                for (i, &g) in gout.iter().enumerate() {
                    gr[c0 * hw + i] += g;
                }
            });
        }
        Op::Crop2d { input, y0, x0 } => {
            let ishape = nodes[input].value.shape().to_vec();
            let (c, ih, iw) = super::forward::spatial_dims(&ishape);
            let oshape = nodes[id].value.shape().to_vec();
            let (_, oh, ow) = super::forward::spatial_dims(&oshape);
            accumulate(nodes, grads, input, |gr| {
                for ch in 0..c {
                    for y in 0..oh {
                        let src = (ch * oh + y) * ow;
                        let dst = (ch * ih + y0 + y) * iw + x0;
                        for x in 0..ow {
                            gr[dst + x] += gout.data()[src + x];
                        }
                    }
                }
            });
        }
        Op::ConcatChannels { inputs } => {
            let mut offset = 0usize;
            for &inp in &inputs {
                let len = nodes[inp].value.numel();
                let slice = &gout.data()[offset..offset + len];
                accumulate(nodes, grads, inp, |gr| {
                    for (gi, &g) in gr.iter_mut().zip(slice) {
                        *gi += g;
                    }
                });
                offset += len;
            }
        }
        Op::StackScalars { inputs } => {
            for (k, &inp) in inputs.iter().enumerate() {
                let g = gout.data()[k];
                accumulate(nodes, grads, inp, |gr| gr[0] += g);
            }
        }
        Op::Conv2d {
            input,
            weight,
            bias,
            stride,
            pad,
        } => {
            conv2d_backward(nodes, grads, id, input, weight, bias, stride, pad, gout);
        }
        Op::GridSample { map, positions } => {
            grid_sample_backward(nodes, grads, map, positions, gout);
        }
        Op::NormalizeChannels { input } => {
            let v = &nodes[input].value;
            let y = &nodes[id].value;
            let hw = v.shape()[1] * v.shape()[2];
            accumulate(nodes, grads, input, |gr| {
                for i in 0..hw {
                    let (a, b, c) = (v.data()[i], v.data()[hw + i], v.data()[2 * hw + i]);
                    let norm = crate::math::sqrt(a * a + b * b + c * c);
                    let denom = norm.max(crate::EPS_NORM);
                    let (ga, gb, gc) = (
                        gout.data()[i],
                        gout.data()[hw + i],
                        gout.data()[2 * hw + i],
                    );
                    if norm > crate::EPS_NORM {
                        let (ya, yb, yc) = (y.data()[i], y.data()[hw + i], y.data()[2 * hw + i]);
                        let dot = ya * ga + yb * gb + yc * gc;
                        gr[i] += (ga - ya * dot) / denom;
                        gr[hw + i] += (gb - yb * dot) / denom;
                        gr[2 * hw + i] += (gc - yc * dot) / denom;
                    } else {
                        gr[i] += ga / denom;
                        gr[hw + i] += gb / denom;
                        gr[2 * hw + i] += gc / denom;
                    }
                }
            });
        }
        Op::Solve3x3 { mat, rhs, inv } => {
            let x = nodes[id].value.data();
            let g = gout.data();
            // db = M^-T g ; dM = -db x^T   (from d(M^-1) = -M^-1 dM M^-1)
            let db = [
                inv[0] * g[0] + inv[3] * g[1] + inv[6] * g[2],
                inv[1] * g[0] + inv[4] * g[1] + inv[7] * g[2],
                inv[2] * g[0] + inv[5] * g[1] + inv[8] * g[2],
            ];
            accumulate(nodes, grads, rhs, |gr| {
                for k in 0..3 {
                    gr[k] += db[k];
                }
            });
            accumulate(nodes, grads, mat, |gr| {
                for r in 0..3 {
                    for c in 0..3 {
                        gr[r * 3 + c] -= db[r] * x[c];
                    }
                }
            });
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn conv2d_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    out_id: usize,
    input: usize,
    weight: usize,
    bias: usize,
    stride: usize,
    pad: usize,
    gout: &Tensor,
) {
    let x = &nodes[input].value;
    let w = &nodes[weight].value;
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, _, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    let (ho, wo) = (
        nodes[out_id].value.shape()[1],
        nodes[out_id].value.shape()[2],
    );
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);

    accumulate(nodes, grads, bias, |gr| {
        for co in 0..cout {
            gr[co] += gout.channel(co).iter().sum::<f64>();
        }
    });

    if nodes[weight].needs_grad {
        let xp = pad_input(x, pad);
        accumulate(nodes, grads, weight, |gr| {
            for co in 0..cout {
                let gch = gout.channel(co);
                for ci in 0..cin {
                    let xch = &xp[ci * hp * wp..(ci + 1) * hp * wp];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = 0.0;
                            for oy in 0..ho {
                                let grow = &gch[oy * wo..(oy + 1) * wo];
                                let xrow = (oy * stride + ky) * wp + kx;
                                if stride == 1 {
                                    let xs = &xch[xrow..xrow + wo];
                                    for (gv, xv) in grow.iter().zip(xs) {
                                        acc += gv * xv;
                                    }
                                } else {
                                    for (ox, gv) in grow.iter().enumerate() {
                                        acc += gv * xch[xrow + ox * stride];
                                    }
                                }
                            }
                            gr[((co * cin + ci) * kh + ky) * kw + kx] += acc;
                        }
                    }
                }
            }
        });
    }

    if nodes[input].needs_grad {
        let mut dxp = vec![0.0; cin * hp * wp];
        for co in 0..cout {
            let gch = gout.channel(co);
            for ci in 0..cin {
                let dch = &mut dxp[ci * hp * wp..(ci + 1) * hp * wp];
                for ky in 0..kh {
                    for kx in 0..kw {
                        let wv = w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        for oy in 0..ho {
                            let grow = &gch[oy * wo..(oy + 1) * wo];
                            let drow = (oy * stride + ky) * wp + kx;
                            if stride == 1 {
                                let ds = &mut dch[drow..drow + wo];
                                for (dv, gv) in ds.iter_mut().zip(grow) {
                                    *dv += wv * gv;
                                }
                            } else {
                                for (ox, gv) in grow.iter().enumerate() {
                                    dch[drow + ox * stride] += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        accumulate(nodes, grads, input, |gr| {
            for ci in 0..cin {
                for y in 0..h {
                    let src = (ci * hp + y + pad) * wp + pad;
                    let dst = (ci * h + y) * wd;
                    for xx in 0..wd {
                        gr[dst + xx] += dxp[src + xx];
                    }
                }
            }
        });
    }
}

fn grid_sample_backward(
    nodes: &[Node],
    grads: &mut [Option<Tensor>],
    map_id: usize,
    pos_id: usize,
    gout: &Tensor,
) {
    let map = &nodes[map_id].value;
    let pos = &nodes[pos_id].value;
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let np = pos.shape()[1] * pos.shape()[2];
    let map_needs = nodes[map_id].needs_grad;
    let pos_needs = nodes[pos_id].needs_grad;

    let mut dmap = if map_needs {
        vec![0.0; map.numel()]
    } else {
        Vec::new()
    };
    let mut dpos = if pos_needs {
        vec![0.0; pos.numel()]
    } else {
        Vec::new()
    };

    for i in 0..np {
        let xv = pos.data()[i];
        let yv = pos.data()[np + i];
        let (x0, fx, gate_x) = bilin_cell(xv, w);
        let (y0, fy, gate_y) = bilin_cell(yv, h);
        let x1 = if w == 1 { 0 } else { x0 + 1 };
        let y1 = if h == 1 { 0 } else { y0 + 1 };
        let w00 = (1.0 - fy) * (1.0 - fx);
        let w01 = (1.0 - fy) * fx;
        let w10 = fy * (1.0 - fx);
        let w11 = fy * fx;
        let (mut gx, mut gy) = (0.0, 0.0);
        for ch in 0..c {
            let m = map.channel(ch);
            let g = gout.data()[ch * np + i];
            if map_needs {
                let d = &mut dmap[ch * h * w..(ch + 1) * h * w];
                d[y0 * w + x0] += g * w00;
                d[y0 * w + x1] += g * w01;
                d[y1 * w + x0] += g * w10;
                d[y1 * w + x1] += g * w11;
            }
            if pos_needs {
                let m00 = m[y0 * w + x0];
                let m01 = m[y0 * w + x1];
                let m10 = m[y1 * w + x0];
                let m11 = m[y1 * w + x1];
                gx += g * ((1.0 - fy) * (m01 - m00) + fy * (m11 - m10));
                gy += g * ((1.0 - fx) * (m10 - m00) + fx * (m11 - m01));
            }
        }
        if pos_needs {
            dpos[i] = gx * gate_x;
            dpos[np + i] = gy * gate_y;
        }
    }

    if map_needs {
        accumulate(nodes, grads, map_id, |gr| {
            for (gi, di) in gr.iter_mut().zip(&dmap) {
                *gi += di;
            }
        });
    }
    if pos_needs {
        accumulate(nodes, grads, pos_id, |gr| {
            for (gi, di) in gr.iter_mut().zip(&dpos) {
                *gi += di;
            }
        });
    }
}
