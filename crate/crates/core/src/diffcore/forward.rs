//! Forward implementations of every differentiable primitive.

use alloc::vec;
use alloc::vec::Vec;

use super::{BinaryKind, DiffError, DiffValue, Graph, Op, Result, UnaryKind};
use crate::math;
use crate::tensor::Tensor;
use crate::{EPS_NORM, EPS_POS};

/// Squared norms this close to 1 skip the normalization divide, making the
/// op idempotent on already-unit inputs.
pub(crate) const UNIT_SNAP: f64 = 1e-12;

pub(crate) fn unary_forward(kind: UnaryKind, x: f64) -> f64 {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Recip => 1.0 / x.max(EPS_POS),
        UnaryKind::Log => math::ln(x.max(EPS_POS)),
        UnaryKind::Exp => math::exp(x),
        UnaryKind::Sqrt => math::sqrt(x.max(EPS_POS)),
        UnaryKind::Tanh => math::tanh(x),
        UnaryKind::Sigmoid => sigmoid(x),
        UnaryKind::Softplus => softplus(x),
        UnaryKind::Elu => {
            if x >= 0.0 {
                x
            } else {
                math::exp(x) - 1.0
            }
        }
        UnaryKind::Abs => math::abs(x),
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + math::exp(-x))
    } else {
        let e = math::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    // ln(1 + e^x), stable on both tails.
    x.max(0.0) + math::ln_1p(math::exp(-math::abs(x)))
}

impl DiffValue {
    fn unary(&self, kind: UnaryKind) -> Result<DiffValue> {
        let out = {
            let inner = self.graph.inner.borrow();
            let node = &inner.nodes[self.id];
            node.value.map(|v| unary_forward(kind, v))
        };
        if !out.all_finite() {
            return Err(DiffError::NonFinite { op: kind.name() });
        }
        let needs = self.graph.needs_grad_of(&[self.id]);
        Ok(self.graph.push(
            out,
            Op::Unary {
                kind,
                input: self.id,
            },
            needs,
        ))
    }

    pub fn neg(&self) -> Result<DiffValue> {
        self.unary(UnaryKind::Neg)
    }

    /// 1 / max(x, EPS_POS); inputs are expected positive.
    pub fn recip(&self) -> Result<DiffValue> {
        self.unary(UnaryKind::Recip)
    }

    /// ln(max(x, EPS_POS)).
    pub fn log(&self) -> Result<DiffValue> {
        self.unary(UnaryKind::Log)
    }

    pub fn exp(&self) -> Result<DiffValue> {
        self.unary(UnaryKind::Exp)
    }

    /// sqrt(max(x, EPS_POS)).
    pub fn sqrt(&self) -> Result<DiffValue> {
        self.unary(UnaryKind::Sqrt)
    }

    pub fn tanh(&self) -> Result<DiffValue> {
        self.unary(UnaryKind::Tanh)
    }

    pub fn sigmoid(&self) -> Result<DiffValue> {
        self.unary(UnaryKind::Sigmoid)
    }

    pub fn softplus(&self) -> Result<DiffValue> {
        self.unary(UnaryKind::Softplus)
    }

    /// ELU with unit scale: x for x >= 0, e^x - 1 otherwise.
    pub fn elu(&self) -> Result<DiffValue> {
        self.unary(UnaryKind::Elu)
    }

    pub fn abs(&self) -> Result<DiffValue> {
        self.unary(UnaryKind::Abs)
    }

    /// mul * x + add with constant coefficients.
    pub fn affine(&self, mul: f64, add: f64) -> Result<DiffValue> {
        let out = {
            let inner = self.graph.inner.borrow();
            inner.nodes[self.id].value.map(|v| mul * v + add)
        };
        if !out.all_finite() {
            return Err(DiffError::NonFinite { op: "affine" });
        }
        let needs = self.graph.needs_grad_of(&[self.id]);
        Ok(self.graph.push(
            out,
            Op::Affine {
                input: self.id,
                mul,
            },
            needs,
        ))
    }

    pub fn clamp(&self, lo: f64, hi: f64) -> Result<DiffValue> {
        assert!(lo <= hi, "clamp bounds inverted");
        let out = {
            let inner = self.graph.inner.borrow();
            inner.nodes[self.id].value.map(|v| v.clamp(lo, hi))
        };
        if !out.all_finite() {
            return Err(DiffError::NonFinite { op: "clamp" });
        }
        let needs = self.graph.needs_grad_of(&[self.id]);
        Ok(self.graph.push(
            out,
            Op::Clamp {
                input: self.id,
                lo,
                hi,
            },
            needs,
        ))
    }

    fn binary(&self, other: &DiffValue, kind: BinaryKind) -> Result<DiffValue> {
        self.expect_same_graph(other);
        let out = {
            let inner = self.graph.inner.borrow();
            let a = &inner.nodes[self.id].value;
            let b = &inner.nodes[other.id].value;
            let f = |x: f64, y: f64| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
                BinaryKind::Div => x / y,
            };
            if a.shape() == b.shape() {
                Tensor::new(
                    a.shape(),
                    a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect(),
                )
            } else if b.is_scalar() {
                let y = b.item();
                a.map(|x| f(x, y))
            } else if a.is_scalar() {
                let x = a.item();
                b.map(|y| f(x, y))
            } else {
                return Err(DiffError::ShapeMismatch {
                    op: kind.name(),
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
        };
        if !out.all_finite() {
            return Err(DiffError::NonFinite { op: kind.name() });
        }
        let needs = self.graph.needs_grad_of(&[self.id, other.id]);
        Ok(self.graph.push(
            out,
            Op::Binary {
                kind,
                lhs: self.id,
                rhs: other.id,
            },
            needs,
        ))
    }

    pub fn add(&self, other: &DiffValue) -> Result<DiffValue> {
        self.binary(other, BinaryKind::Add)
    }

    pub fn sub(&self, other: &DiffValue) -> Result<DiffValue> {
        self.binary(other, BinaryKind::Sub)
    }

    pub fn mul(&self, other: &DiffValue) -> Result<DiffValue> {
        self.binary(other, BinaryKind::Mul)
    }

    pub fn div(&self, other: &DiffValue) -> Result<DiffValue> {
        self.binary(other, BinaryKind::Div)
    }

    pub fn square(&self) -> Result<DiffValue> {
        self.mul(self)
    }

    pub fn sum(&self) -> Result<DiffValue> {
        let out = {
            let inner = self.graph.inner.borrow();
            Tensor::scalar(inner.nodes[self.id].value.iter().sum())
        };
        if !out.all_finite() {
            return Err(DiffError::NonFinite { op: "sum" });
        }
        let needs = self.graph.needs_grad_of(&[self.id]);
        Ok(self.graph.push(out, Op::Sum { input: self.id }, needs))
    }

    pub fn mean(&self) -> Result<DiffValue> {
        let out = {
            let inner = self.graph.inner.borrow();
            let v = &inner.nodes[self.id].value;
            Tensor::scalar(v.iter().sum::<f64>() / v.numel() as f64)
        };
        if !out.all_finite() {
            return Err(DiffError::NonFinite { op: "mean" });
        }
        let needs = self.graph.needs_grad_of(&[self.id]);
        Ok(self.graph.push(out, Op::Mean { input: self.id }, needs))
    }

    pub fn sum_axis(&self, axis: usize) -> Result<DiffValue> {
        self.reduce_axis(axis, false)
    }

    pub fn mean_axis(&self, axis: usize) -> Result<DiffValue> {
        self.reduce_axis(axis, true)
    }

    fn reduce_axis(&self, axis: usize, mean: bool) -> Result<DiffValue> {
        let out = {
            let inner = self.graph.inner.borrow();
            let v = &inner.nodes[self.id].value;
            let shape = v.shape();
            assert!(axis < shape.len(), "reduce axis out of range");
            reduce_axis_tensor(v, axis, mean)
        };
        let op_name = if mean { "mean_axis" } else { "sum_axis" };
        if !out.all_finite() {
            return Err(DiffError::NonFinite { op: op_name });
        }
        let needs = self.graph.needs_grad_of(&[self.id]);
        let op = if mean {
            Op::MeanAxis {
                input: self.id,
                axis,
            }
        } else {
            Op::SumAxis {
                input: self.id,
                axis,
            }
        };
        Ok(self.graph.push(out, op, needs))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<DiffValue> {
        let out = {
            let inner = self.graph.inner.borrow();
            let v = &inner.nodes[self.id].value;
            if shape.iter().product::<usize>() != v.numel() {
                return Err(DiffError::ShapeMismatch {
                    op: "reshape",
                    lhs: v.shape().to_vec(),
                    rhs: shape.to_vec(),
                });
            }
            v.clone().reshaped(shape)
        };
        let needs = self.graph.needs_grad_of(&[self.id]);
        Ok(self.graph.push(out, Op::Reshape { input: self.id }, needs))
    }

    /// Channels c0..c1 of a `[C, H, W]` tensor.
    pub fn slice_channels(&self, c0: usize, c1: usize) -> Result<DiffValue> {
        let out = {
            let inner = self.graph.inner.borrow();
            let v = &inner.nodes[self.id].value;
            let shape = v.shape();
            assert_eq!(shape.len(), 3, "slice_channels expects [C,H,W]");
            assert!(c0 < c1 && c1 <= shape[0], "channel range out of bounds");
            let hw = shape[1] * shape[2];
            Tensor::new(
                &[c1 - c0, shape[1], shape[2]],
                v.data()[c0 * hw..c1 * hw].to_vec(),
            )
        };
        let needs = self.graph.needs_grad_of(&[self.id]);
        Ok(self.graph.push(
            out,
            Op::SliceChannels {
                input: self.id,
                c0,
            },
            needs,
        ))
    }

    /// Spatial crop of the trailing two axes of `[H, W]` or `[C, H, W]`.
    pub fn crop2d(&self, y0: usize, x0: usize, h: usize, w: usize) -> Result<DiffValue> {
        let out = {
            let inner = self.graph.inner.borrow();
            let v = &inner.nodes[self.id].value;
            let shape = v.shape();
            let (c, ih, iw) = spatial_dims(shape);
            assert!(y0 + h <= ih && x0 + w <= iw, "crop out of bounds");
            let mut data = Vec::with_capacity(c * h * w);
            for ch in 0..c {
                for y in 0..h {
                    let base = (ch * ih + y0 + y) * iw + x0;
                    data.extend_from_slice(&v.data()[base..base + w]);
                }
            }
            if shape.len() == 3 {
                Tensor::new(&[c, h, w], data)
            } else {
                Tensor::new(&[h, w], data)
            }
        };
        let needs = self.graph.needs_grad_of(&[self.id]);
        Ok(self.graph.push(
            out,
            Op::Crop2d {
                input: self.id,
                y0,
                x0,
            },
            needs,
        ))
    }

    /// Cross-correlation with zero padding.
    /// input `[Cin, H, W]`, weight `[Cout, Cin, Kh, Kw]`, bias `[Cout]`.
    pub fn conv2d(
        &self,
        weight: &DiffValue,
        bias: &DiffValue,
        stride: usize,
        pad: usize,
    ) -> Result<DiffValue> {
        self.expect_same_graph(weight);
        self.expect_same_graph(bias);
        assert!(stride == 1 || stride == 2, "conv2d stride must be 1 or 2");
        let out = {
            let inner = self.graph.inner.borrow();
            let x = &inner.nodes[self.id].value;
            let w = &inner.nodes[weight.id].value;
            let b = &inner.nodes[bias.id].value;
            conv2d_forward(x, w, b, stride, pad)?
        };
        if !out.all_finite() {
            return Err(DiffError::NonFinite { op: "conv2d" });
        }
        let needs = self
            .graph
            .needs_grad_of(&[self.id, weight.id, bias.id]);
        Ok(self.graph.push(
            out,
            Op::Conv2d {
                input: self.id,
                weight: weight.id,
                bias: bias.id,
                stride,
                pad,
            },
            needs,
        ))
    }

    /// Bilinear sampling with border clamping. `self` is the map `[C, H, W]`,
    /// `positions` is `[2, Hp, Wp]` in pixel units (channel 0 = x, 1 = y).
    /// Differentiable with respect to both the map and the positions.
    pub fn grid_sample(&self, positions: &DiffValue) -> Result<DiffValue> {
        self.expect_same_graph(positions);
        let out = {
            let inner = self.graph.inner.borrow();
            let map = &inner.nodes[self.id].value;
            let pos = &inner.nodes[positions.id].value;
            assert_eq!(map.shape().len(), 3, "grid_sample map must be [C,H,W]");
            assert_eq!(pos.shape().len(), 3, "grid_sample positions must be [2,Hp,Wp]");
            assert_eq!(pos.shape()[0], 2, "positions carry (x, y) channels");
            if !pos.all_finite() {
                return Err(DiffError::NonFinite { op: "grid_sample" });
            }
            grid_sample_forward(map, pos)
        };
        if !out.all_finite() {
            return Err(DiffError::NonFinite { op: "grid_sample" });
        }
        let needs = self.graph.needs_grad_of(&[self.id, positions.id]);
        Ok(self.graph.push(
            out,
            Op::GridSample {
                map: self.id,
                positions: positions.id,
            },
            needs,
        ))
    }

    /// Bilinear resize to `(oh, ow)` via grid sampling at constant positions
    /// (corner-aligned).
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Result<DiffValue> {
        let (ih, iw) = {
            let shape = self.shape();
            assert_eq!(shape.len(), 3, "upsample expects [C,H,W]");
            (shape[1], shape[2])
        };
        let sx = if ow > 1 {
            (iw - 1) as f64 / (ow - 1) as f64
        } else {
            0.0
        };
        let sy = if oh > 1 {
            (ih - 1) as f64 / (oh - 1) as f64
        } else {
            0.0
        };
        let mut pos = Tensor::zeros(&[2, oh, ow]);
        for y in 0..oh {
            for x in 0..ow {
                pos.set3(0, y, x, x as f64 * sx);
                pos.set3(1, y, x, y as f64 * sy);
            }
        }
        let pos = self.graph.constant(pos);
        self.grid_sample(&pos)
    }

    /// Per-pixel unit L2 normalization along the channel axis of `[3, H, W]`,
    /// with the norm floored at EPS_NORM.
    pub fn normalize_channels(&self) -> Result<DiffValue> {
        let out = {
            let inner = self.graph.inner.borrow();
            let v = &inner.nodes[self.id].value;
            assert_eq!(v.shape().len(), 3, "normalize_channels expects [3,H,W]");
            assert_eq!(v.shape()[0], 3, "normalize_channels expects 3 channels");
            let (h, w) = (v.shape()[1], v.shape()[2]);
            let hw = h * w;
            let mut data = vec![0.0; 3 * hw];
            for i in 0..hw {
                let a = v.data()[i];
                let b = v.data()[hw + i];
                let c = v.data()[2 * hw + i];
                let s = a * a + b * b + c * c;
                if math::abs(s - 1.0) <= UNIT_SNAP {
                    // Already unit within rounding: pass through so the op is
                    // idempotent (needed for the exact zero-offset identity).
                    data[i] = a;
                    data[hw + i] = b;
                    data[2 * hw + i] = c;
                } else {
                    let n = math::sqrt(s).max(EPS_NORM);
                    data[i] = a / n;
                    data[hw + i] = b / n;
                    data[2 * hw + i] = c / n;
                }
            }
            Tensor::new(v.shape(), data)
        };
        if !out.all_finite() {
            return Err(DiffError::NonFinite {
                op: "normalize_channels",
            });
        }
        let needs = self.graph.needs_grad_of(&[self.id]);
        Ok(self
            .graph
            .push(out, Op::NormalizeChannels { input: self.id }, needs))
    }

    /// Closed-form solve of a symmetric 3x3 system (adjugate over
    /// determinant). `self` is the `[3, 3]` matrix, `rhs` is `[3]`.
    /// Fails with [`DiffError::SingularMatrix`] when |det| falls below
    /// `det_floor`.
    pub fn solve3x3(&self, rhs: &DiffValue, det_floor: f64) -> Result<DiffValue> {
        self.expect_same_graph(rhs);
        let (out, inv) = {
            let inner = self.graph.inner.borrow();
            let m = &inner.nodes[self.id].value;
            let b = &inner.nodes[rhs.id].value;
            assert_eq!(m.shape(), &[3, 3], "solve3x3 matrix must be [3,3]");
            assert_eq!(b.shape(), &[3], "solve3x3 rhs must be [3]");
            let inv = invert3x3(m.data(), det_floor)?;
            let bd = b.data();
            let x = [
                inv[0] * bd[0] + inv[1] * bd[1] + inv[2] * bd[2],
                inv[3] * bd[0] + inv[4] * bd[1] + inv[5] * bd[2],
                inv[6] * bd[0] + inv[7] * bd[1] + inv[8] * bd[2],
            ];
            (Tensor::new(&[3], x.to_vec()), inv)
        };
        if !out.all_finite() {
            return Err(DiffError::NonFinite { op: "solve3x3" });
        }
        let needs = self.graph.needs_grad_of(&[self.id, rhs.id]);
        Ok(self.graph.push(
            out,
            Op::Solve3x3 {
                mat: self.id,
                rhs: rhs.id,
                inv,
            },
            needs,
        ))
    }
}

impl Graph {
    /// Concatenate along the channel axis; parts are `[Ci, H, W]`.
    pub fn concat_channels(&self, parts: &[DiffValue]) -> Result<DiffValue> {
        assert!(!parts.is_empty());
        let out = {
            let inner = self.inner.borrow();
            let first = inner.nodes[parts[0].id].value.shape().to_vec();
            assert_eq!(first.len(), 3, "concat_channels expects [C,H,W] parts");
            let (h, w) = (first[1], first[2]);
            let mut data = Vec::new();
            for p in parts {
                let v = &inner.nodes[p.id].value;
                if v.shape().len() != 3 || v.shape()[1] != h || v.shape()[2] != w {
                    return Err(DiffError::ShapeMismatch {
                        op: "concat_channels",
                        lhs: first,
                        rhs: v.shape().to_vec(),
                    });
                }
                data.extend_from_slice(v.data());
            }
            let channels: usize = parts
                .iter()
                .map(|p| inner.nodes[p.id].value.shape()[0])
                .sum();
            Tensor::new(&[channels, h, w], data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs_grad_of(&ids);
        Ok(self.push(out, Op::ConcatChannels { inputs: ids }, needs))
    }

    /// Stack scalar values into a `[n]` vector.
    pub fn stack_scalars(&self, parts: &[DiffValue]) -> Result<DiffValue> {
        assert!(!parts.is_empty());
        let out = {
            let inner = self.inner.borrow();
            let mut data = Vec::with_capacity(parts.len());
            for p in parts {
                let v = &inner.nodes[p.id].value;
                if !v.is_scalar() {
                    return Err(DiffError::ShapeMismatch {
                        op: "stack_scalars",
                        lhs: vec![1],
                        rhs: v.shape().to_vec(),
                    });
                }
                data.push(v.item());
            }
            Tensor::new(&[parts.len()], data)
        };
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let needs = self.needs_grad_of(&ids);
        Ok(self.push(out, Op::StackScalars { inputs: ids }, needs))
    }
}

pub(crate) fn spatial_dims(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (1, shape[0], shape[1]),
        3 => (shape[0], shape[1], shape[2]),
        _ => panic!("expected [H,W] or [C,H,W], got {shape:?}"),
    }
}

pub(crate) fn reduce_axis_tensor(v: &Tensor, axis: usize, mean: bool) -> Tensor {
    let shape = v.shape();
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner_n: usize = shape[axis + 1..].iter().product();
    let mut out_shape: Vec<usize> = shape.to_vec();
    out_shape.remove(axis);
    let mut data = vec![0.0; outer * inner_n];
    for o in 0..outer {
        for m in 0..mid {
            let base = (o * mid + m) * inner_n;
            let dst = o * inner_n;
            for i in 0..inner_n {
                data[dst + i] += v.data()[base + i];
            }
        }
    }
    if mean {
        let k = 1.0 / mid as f64;
        for d in data.iter_mut() {
            *d *= k;
        }
    }
    Tensor::new(&out_shape, data)
}

pub(crate) fn conv2d_forward(
    x: &Tensor,
    w: &Tensor,
    b: &Tensor,
    stride: usize,
    pad: usize,
) -> Result<Tensor> {
    let xs = x.shape();
    let ws = w.shape();
    assert_eq!(xs.len(), 3, "conv2d input must be [Cin,H,W]");
    assert_eq!(ws.len(), 4, "conv2d weight must be [Cout,Cin,Kh,Kw]");
    let (cin, h, wd) = (xs[0], xs[1], xs[2]);
    let (cout, wcin, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    if cin != wcin {
        return Err(DiffError::ShapeMismatch {
            op: "conv2d",
            lhs: xs.to_vec(),
            rhs: ws.to_vec(),
        });
    }
    assert_eq!(b.shape(), &[cout], "conv2d bias must be [Cout]");
    let (hp, wp) = (h + 2 * pad, wd + 2 * pad);
    if kh > hp || kw > wp {
        return Err(DiffError::KernelTooLarge {
            kernel: (kh, kw),
            padded: (hp, wp),
        });
    }
    let ho = (hp - kh) / stride + 1;
    let wo = (wp - kw) / stride + 1;

    let xp = pad_input(x, pad);
    let mut out = vec![0.0; cout * ho * wo];
    for co in 0..cout {
        let bias = b.data()[co];
        let out_ch = &mut out[co * ho * wo..(co + 1) * ho * wo];
        for v in out_ch.iter_mut() {
            *v = bias;
        }
        for ci in 0..cin {
            let xch = &xp[ci * hp * wp..(ci + 1) * hp * wp];
            for ky in 0..kh {
                for kx in 0..kw {
                    let wv = w.data()[((co * cin + ci) * kh + ky) * kw + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    for oy in 0..ho {
                        let src_row = (oy * stride + ky) * wp + kx;
                        let dst_row = oy * wo;
                        if stride == 1 {
                            let src = &xch[src_row..src_row + wo];
                            let dst = &mut out_ch[dst_row..dst_row + wo];
                            for (d, s) in dst.iter_mut().zip(src) {
                                *d += wv * s;
                            }
                        } else {
                            for ox in 0..wo {
                                out_ch[dst_row + ox] += wv * xch[src_row + ox * stride];
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(Tensor::new(&[cout, ho, wo], out))
}

pub(crate) fn pad_input(x: &Tensor, pad: usize) -> Vec<f64> {
    let xs = x.shape();
    let (c, h, w) = (xs[0], xs[1], xs[2]);
    if pad == 0 {
        return x.data().to_vec();
    }
    let (hp, wp) = (h + 2 * pad, w + 2 * pad);
    let mut xp = vec![0.0; c * hp * wp];
    for ci in 0..c {
        for y in 0..h {
            let src = (ci * h + y) * w;
            let dst = (ci * hp + y + pad) * wp + pad;
            xp[dst..dst + w].copy_from_slice(&x.data()[src..src + w]);
        }
    }
    xp
}

/// Clamped bilinear cell: returns (floor index, fraction, gate) where gate is
/// the derivative of the clamp (0 outside the valid range).
#[inline]
pub(crate) fn bilin_cell(coord: f64, extent: usize) -> (usize, f64, f64) {
    let max = (extent - 1) as f64;
    let gate = if coord < 0.0 || coord > max { 0.0 } else { 1.0 };
    let c = coord.clamp(0.0, max);
    if extent == 1 {
        return (0, 0.0, 0.0);
    }
    let i0 = (math::floor(c) as usize).min(extent - 2);
    (i0, c - i0 as f64, gate)
}

pub(crate) fn grid_sample_forward(map: &Tensor, pos: &Tensor) -> Tensor {
    let (c, h, w) = (map.shape()[0], map.shape()[1], map.shape()[2]);
    let (hp, wp) = (pos.shape()[1], pos.shape()[2]);
    let np = hp * wp;
    let mut out = vec![0.0; c * np];
    for i in 0..np {
        let x = pos.data()[i];
        let y = pos.data()[np + i];
        let (x0, fx, _) = bilin_cell(x, w);
        let (y0, fy, _) = bilin_cell(y, h);
        let w00 = (1.0 - fy) * (1.0 - fx);
        let w01 = (1.0 - fy) * fx;
        let w10 = fy * (1.0 - fx);
        let w11 = fy * fx;
        let x1 = if w == 1 { 0 } else { x0 + 1 };
        let y1 = if h == 1 { 0 } else { y0 + 1 };
        for ch in 0..c {
            let m = map.channel(ch);
            out[ch * np + i] = w00 * m[y0 * w + x0]
                + w01 * m[y0 * w + x1]
                + w10 * m[y1 * w + x0]
                + w11 * m[y1 * w + x1];
        }
    }
    Tensor::new(&[c, hp, wp], out)
}

/// Inverse of a 3x3 matrix via adjugate / determinant.
pub(crate) fn invert3x3(m: &[f64], det_floor: f64) -> Result<[f64; 9]> {
    let det = m[0] * (m[4] * m[8] - m[5] * m[7]) - m[1] * (m[3] * m[8] - m[5] * m[6])
        + m[2] * (m[3] * m[7] - m[4] * m[6]);
    if math::abs(det) < det_floor || det == 0.0 {
        return Err(DiffError::SingularMatrix { det });
    }
    let inv_det = 1.0 / det;
    Ok([
        (m[4] * m[8] - m[5] * m[7]) * inv_det,
        (m[2] * m[7] - m[1] * m[8]) * inv_det,
        (m[1] * m[5] - m[2] * m[4]) * inv_det,
        (m[5] * m[6] - m[3] * m[8]) * inv_det,
        (m[0] * m[8] - m[2] * m[6]) * inv_det,
        (m[2] * m[3] - m[0] * m[5]) * inv_det,
        (m[3] * m[7] - m[4] * m[6]) * inv_det,
        (m[1] * m[6] - m[0] * m[7]) * inv_det,
        (m[0] * m[4] - m[1] * m[3]) * inv_det,
    ])
}
