//! Operation kinds, their forward evaluation and analytic vector-Jacobian
//! products.

use std::fmt;
use std::sync::Arc;

use crate::error::{invalid, shape_err, Result};
use crate::kernels::{self, ConvGeometry};
use crate::rule::VjpContext;
use crate::tensor::Tensor;

/// Smallest divisor magnitude used by the backward rule of [`OpKind::Div`].
pub const DIV_GUARD: f64 = 1e-12;

/// Spatial padding mode for [`OpKind::Conv2d`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

/// An operation defined outside this crate, with its own forward and
/// analytic backward rule.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;
    fn vjp(&self, ctx: &VjpContext<'_>) -> Result<Vec<Option<Tensor>>>;
}

/// Every operation the tape can record.
#[derive(Clone, Debug)]
pub enum OpKind {
    /// An input or constant; has no inputs.
    Leaf,
    Add,
    Sub,
    Mul,
    Div,
    /// `[m,k] · [k,n]`.
    MatMul,
    /// Adds a `[n]` vector along the last axis of its first input.
    BiasAdd,
    /// NHWC input with `[K,K,C_in,C_out]` kernel, stride 1.
    Conv2d { padding: Padding },
    Relu,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    /// 2×2 max pooling with stride 2 over NHWC input.
    MaxPool2,
    /// Per-row `-log softmax(z)_label` for `[N,C]` logits; output `[N]`.
    SoftmaxCrossEntropy { labels: Vec<usize> },
    /// Per-row logit margin, output `[N]`. Untargeted: `z_y - max_{i≠y} z_i`.
    /// Targeted: `max_{i≠t} z_i - z_t`.
    Margin { classes: Vec<usize>, targeted: bool },
    /// Sum of all elements to a scalar.
    Sum,
    /// Mean of all elements to a scalar.
    Mean,
    /// Sum over all but the leading axis: `[N,...] → [N]`.
    SumRows,
    /// Elementwise `scale·x + shift`.
    Affine { scale: f64, shift: f64 },
    Reshape { shape: Vec<usize> },
    /// Zero-pads NHWC images onto an `out_h×out_w` canvas at `(top, left)`.
    Pad { top: usize, left: usize, out_h: usize, out_w: usize },
    /// Extracts an `h×w` NHWC window at `(top, left)`.
    Crop { top: usize, left: usize, h: usize, w: usize },
    ResizeNearest { h: usize, w: usize },
    ResizeBilinear { h: usize, w: usize },
    /// Zero derivative almost everywhere.
    Floor,
    /// Zero derivative almost everywhere.
    Round,
    /// Gradient passes only strictly inside `(lo, hi)`.
    Clamp { lo: f64, hi: f64 },
    Custom(Arc<dyn CustomOp>),
}

impl OpKind {
    pub fn name(&self) -> &str {
        match self {
            OpKind::Leaf => "leaf",
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Div => "div",
            OpKind::MatMul => "matmul",
            OpKind::BiasAdd => "bias_add",
            OpKind::Conv2d { .. } => "conv2d",
            OpKind::Relu => "relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Exp => "exp",
            OpKind::Log => "log",
            OpKind::MaxPool2 => "max_pool2",
            OpKind::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            OpKind::Margin { .. } => "margin",
            OpKind::Sum => "sum",
            OpKind::Mean => "mean",
            OpKind::SumRows => "sum_rows",
            OpKind::Affine { .. } => "affine",
            OpKind::Reshape { .. } => "reshape",
            OpKind::Pad { .. } => "pad",
            OpKind::Crop { .. } => "crop",
            OpKind::ResizeNearest { .. } => "resize_nearest",
            OpKind::ResizeBilinear { .. } => "resize_bilinear",
            OpKind::Floor => "floor",
            OpKind::Round => "round",
            OpKind::Clamp { .. } => "clamp",
            OpKind::Custom(op) => op.name(),
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            OpKind::Leaf => Some(0),
            OpKind::Add
            | OpKind::Sub
            | OpKind::Mul
            | OpKind::Div
            | OpKind::MatMul
            | OpKind::BiasAdd
            | OpKind::Conv2d { .. } => Some(2),
            OpKind::Custom(_) => None,
            _ => Some(1),
        }
    }

    /// Evaluates the operation on concrete inputs.
    pub fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor> {
        let name = self.name();
        if let Some(n) = self.arity() {
            if inputs.len() != n {
                return Err(invalid(name, format!("expected {n} inputs, got {}", inputs.len())));
            }
        }
        match self {
            OpKind::Leaf => Err(invalid(name, "leaves are not computed")),
            OpKind::Add => binary(name, inputs[0], inputs[1], |a, b| a + b),
            OpKind::Sub => binary(name, inputs[0], inputs[1], |a, b| a - b),
            OpKind::Mul => binary(name, inputs[0], inputs[1], |a, b| a * b),
            OpKind::Div => binary(name, inputs[0], inputs[1], |a, b| a / b),
            OpKind::MatMul => {
                let (m, k, n) = matmul_dims(inputs[0], inputs[1])?;
                let mut out = vec![0.0; m * n];
                kernels::gemm(m, k, n, inputs[0].data(), false, inputs[1].data(), false, 0.0, &mut out);
                Tensor::new(vec![m, n], out)
            }
            OpKind::BiasAdd => {
                let (x, b) = (inputs[0], inputs[1]);
                let n = bias_width(x, b)?;
                let mut out = x.clone();
                for row in out.data_mut().chunks_mut(n) {
                    for (v, bi) in row.iter_mut().zip(b.data()) {
                        *v += bi;
                    }
                }
                Ok(out)
            }
            OpKind::Conv2d { padding } => {
                let g = conv_geometry(inputs[0], inputs[1], *padding)?;
                let cols = kernels::im2col(inputs[0].data(), &g);
                let mut out = vec![0.0; g.out_pixels() * g.out_ch];
                kernels::gemm(
                    g.out_pixels(),
                    g.patch_len(),
                    g.out_ch,
                    &cols,
                    false,
                    inputs[1].data(),
                    false,
                    0.0,
                    &mut out,
                );
                Tensor::new(vec![g.batch, g.out_h, g.out_w, g.out_ch], out)
            }
            OpKind::Relu => Ok(inputs[0].map(|v| v.max(0.0))),
            OpKind::Sigmoid => Ok(inputs[0].map(sigmoid)),
            OpKind::Tanh => Ok(inputs[0].map(f64::tanh)),
            OpKind::Exp => Ok(inputs[0].map(f64::exp)),
            OpKind::Log => Ok(inputs[0].map(f64::ln)),
            OpKind::MaxPool2 => {
                let [n, h, w, c] = nhwc(name, inputs[0])?;
                if h % 2 != 0 || w % 2 != 0 {
                    return Err(invalid(name, format!("spatial dims {h}×{w} must be even")));
                }
                let (out, _) = kernels::max_pool2(inputs[0].data(), n, h, w, c);
                Tensor::new(vec![n, h / 2, w / 2, c], out)
            }
            OpKind::SoftmaxCrossEntropy { labels } => {
                let z = inputs[0];
                let (n, c) = logits_dims(name, z, labels)?;
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let row = &z.data()[i * c..(i + 1) * c];
                    out.push(log_sum_exp(row) - row[labels[i]]);
                }
                Tensor::new(vec![n], out)
            }
            OpKind::Margin { classes, targeted } => {
                let z = inputs[0];
                let (n, c) = logits_dims(name, z, classes)?;
                if c < 2 {
                    return Err(invalid(name, "needs at least two classes"));
                }
                let mut out = Vec::with_capacity(n);
                for i in 0..n {
                    let row = &z.data()[i * c..(i + 1) * c];
                    let (other, _) = best_other(row, classes[i]);
                    let m = row[classes[i]] - other;
                    out.push(if *targeted { -m } else { m });
                }
                Tensor::new(vec![n], out)
            }
            OpKind::Sum => Ok(Tensor::scalar(inputs[0].sum())),
            OpKind::Mean => {
                let x = inputs[0];
                if x.numel() == 0 {
                    return Err(invalid(name, "mean of empty tensor"));
                }
                Ok(Tensor::scalar(x.sum() / x.numel() as f64))
            }
            OpKind::SumRows => {
                let x = inputs[0];
                if x.shape().is_empty() {
                    return Err(invalid(name, "needs a leading axis"));
                }
                let rows = (0..x.rows()).map(|i| x.row(i).iter().sum()).collect();
                Ok(Tensor::vector(rows))
            }
            OpKind::Affine { scale, shift } => Ok(inputs[0].map(|v| scale * v + shift)),
            OpKind::Reshape { shape } => {
                let x = inputs[0];
                if shape.iter().product::<usize>() != x.numel() {
                    return Err(shape_err(name, &[x.shape(), shape]));
                }
                x.clone().reshape(shape.clone())
            }
            OpKind::Pad { top, left, out_h, out_w } => {
                let [n, h, w, c] = nhwc(name, inputs[0])?;
                if top + h > *out_h || left + w > *out_w {
                    return Err(shape_err(name, &[inputs[0].shape(), &[*out_h, *out_w]]));
                }
                let mut big = vec![0.0; n * out_h * out_w * c];
                let mut small = inputs[0].data().to_vec();
                kernels::window_copy(&mut small, &mut big, n, *out_h, *out_w, c, *top, *left, h, w, true);
                Tensor::new(vec![n, *out_h, *out_w, c], big)
            }
            OpKind::Crop { top, left, h, w } => {
                let [n, bh, bw, c] = nhwc(name, inputs[0])?;
                if top + h > bh || left + w > bw || *h == 0 || *w == 0 {
                    return Err(shape_err(name, &[inputs[0].shape(), &[*top, *left, *h, *w]]));
                }
                let mut small = vec![0.0; n * h * w * c];
                let mut big = inputs[0].data().to_vec();
                kernels::window_copy(&mut small, &mut big, n, bh, bw, c, *top, *left, *h, *w, false);
                Tensor::new(vec![n, *h, *w, c], small)
            }
            OpKind::ResizeNearest { h: oh, w: ow } | OpKind::ResizeBilinear { h: oh, w: ow } => {
                let [n, h, w, c] = nhwc(name, inputs[0])?;
                if *oh == 0 || *ow == 0 || h == 0 || w == 0 {
                    return Err(invalid(name, "empty spatial dimension"));
                }
                let bilinear = matches!(self, OpKind::ResizeBilinear { .. });
                let x = inputs[0].data();
                let mut out = vec![0.0; n * oh * ow * c];
                kernels::for_each_resize_tap(bilinear, n, h, w, c, *oh, *ow, |s, d, wt| out[d] += wt * x[s]);
                Tensor::new(vec![n, *oh, *ow, c], out)
            }
            OpKind::Floor => Ok(inputs[0].map(f64::floor)),
            OpKind::Round => Ok(inputs[0].map(f64::round)),
            OpKind::Clamp { lo, hi } => {
                if lo > hi {
                    return Err(invalid(name, format!("lower bound {lo} exceeds upper bound {hi}")));
                }
                Ok(inputs[0].map(|v| v.clamp(*lo, *hi)))
            }
            OpKind::Custom(op) => op.forward(inputs),
        }
    }

    /// The analytic vector-Jacobian product of this operation.
    pub fn vjp(&self, ctx: &VjpContext<'_>) -> Result<Vec<Option<Tensor>>> {
        let inputs = ctx.inputs;
        let g = ctx.grad;
        let want = |i: usize| ctx.wants.get(i).copied().unwrap_or(false);
        let name = self.name();
        match self {
            OpKind::Leaf => Ok(Vec::new()),
            OpKind::Add | OpKind::Sub => {
                let sign = if matches!(self, OpKind::Sub) { -1.0 } else { 1.0 };
                Ok(vec![
                    want(0).then(|| reduce_to(g.clone(), inputs[0])),
                    want(1).then(|| reduce_to(g.scale(sign), inputs[1])),
                ])
            }
            OpKind::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                Ok(vec![
                    if want(0) { Some(reduce_to(binary(name, g, b, |g, b| g * b)?, a)) } else { None },
                    if want(1) { Some(reduce_to(binary(name, g, a, |g, a| g * a)?, b)) } else { None },
                ])
            }
            OpKind::Div => {
                let (a, b) = (inputs[0], inputs[1]);
                let guarded = b.map(guard_divisor);
                let ga = if want(0) {
                    Some(reduce_to(binary(name, g, &guarded, |g, b| g / b)?, a))
                } else {
                    None
                };
                let gb = if want(1) {
                    let ga_full = binary(name, g, a, |g, a| g * a)?;
                    Some(reduce_to(binary(name, &ga_full, &guarded, |ga, b| -ga / (b * b))?, b))
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }
            OpKind::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k, n) = matmul_dims(a, b)?;
                let ga = if want(0) {
                    let mut out = vec![0.0; m * k];
                    kernels::gemm(m, n, k, g.data(), false, b.data(), true, 0.0, &mut out);
                    Some(Tensor::new(vec![m, k], out)?)
                } else {
                    None
                };
                let gb = if want(1) {
                    let mut out = vec![0.0; k * n];
                    kernels::gemm(k, m, n, a.data(), true, g.data(), false, 0.0, &mut out);
                    Some(Tensor::new(vec![k, n], out)?)
                } else {
                    None
                };
                Ok(vec![ga, gb])
            }
            OpKind::BiasAdd => {
                let n = bias_width(inputs[0], inputs[1])?;
                let gb = want(1).then(|| {
                    let mut acc = vec![0.0; n];
                    for row in g.data().chunks(n) {
                        for (a, v) in acc.iter_mut().zip(row) {
                            *a += v;
                        }
                    }
                    Tensor::vector(acc)
                });
                Ok(vec![want(0).then(|| g.clone()), gb])
            }
            OpKind::Conv2d { padding } => {
                let geo = conv_geometry(inputs[0], inputs[1], *padding)?;
                let cols = kernels::im2col(inputs[0].data(), &geo);
                let gw = if want(1) {
                    let mut out = vec![0.0; geo.patch_len() * geo.out_ch];
                    kernels::gemm(
                        geo.patch_len(),
                        geo.out_pixels(),
                        geo.out_ch,
                        &cols,
                        true,
                        g.data(),
                        false,
                        0.0,
                        &mut out,
                    );
                    Some(Tensor::new(inputs[1].shape().to_vec(), out)?)
                } else {
                    None
                };
                let gx = if want(0) {
                    let mut gcols = vec![0.0; geo.out_pixels() * geo.patch_len()];
                    kernels::gemm(
                        geo.out_pixels(),
                        geo.out_ch,
                        geo.patch_len(),
                        g.data(),
                        false,
                        inputs[1].data(),
                        true,
                        0.0,
                        &mut gcols,
                    );
                    Some(Tensor::new(inputs[0].shape().to_vec(), kernels::col2im(&gcols, &geo))?)
                } else {
                    None
                };
                Ok(vec![gx, gw])
            }
            OpKind::Relu => unary_grad(ctx, |x, _, g| if x > 0.0 { g } else { 0.0 }),
            OpKind::Sigmoid => unary_grad(ctx, |_, y, g| g * y * (1.0 - y)),
            OpKind::Tanh => unary_grad(ctx, |_, y, g| g * (1.0 - y * y)),
            OpKind::Exp => unary_grad(ctx, |_, y, g| g * y),
            OpKind::Log => unary_grad(ctx, |x, _, g| g / x),
            OpKind::Floor | OpKind::Round => unary_grad(ctx, |_, _, _| 0.0),
            OpKind::Clamp { lo, hi } => {
                unary_grad(ctx, |x, _, g| if x > *lo && x < *hi { g } else { 0.0 })
            }
            OpKind::Affine { scale, .. } => unary_grad(ctx, |_, _, g| g * scale),
            OpKind::MaxPool2 => {
                let [n, h, w, c] = nhwc(name, inputs[0])?;
                let (_, arg) = kernels::max_pool2(inputs[0].data(), n, h, w, c);
                let mut gx = vec![0.0; inputs[0].numel()];
                for (o, &i) in arg.iter().enumerate() {
                    gx[i] += g.data()[o];
                }
                Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), gx)?)])
            }
            OpKind::SoftmaxCrossEntropy { labels } => {
                let z = inputs[0];
                let (n, c) = logits_dims(name, z, labels)?;
                let mut gz = vec![0.0; n * c];
                for i in 0..n {
                    let row = &z.data()[i * c..(i + 1) * c];
                    let lse = log_sum_exp(row);
                    for j in 0..c {
                        let p = (row[j] - lse).exp();
                        let t = if j == labels[i] { 1.0 } else { 0.0 };
                        gz[i * c + j] = g.data()[i] * (p - t);
                    }
                }
                Ok(vec![Some(Tensor::new(z.shape().to_vec(), gz)?)])
            }
            OpKind::Margin { classes, targeted } => {
                let z = inputs[0];
                let (n, c) = logits_dims(name, z, classes)?;
                let sign = if *targeted { -1.0 } else { 1.0 };
                let mut gz = vec![0.0; n * c];
                for i in 0..n {
                    let row = &z.data()[i * c..(i + 1) * c];
                    let (_, other) = best_other(row, classes[i]);
                    gz[i * c + classes[i]] += sign * g.data()[i];
                    gz[i * c + other] -= sign * g.data()[i];
                }
                Ok(vec![Some(Tensor::new(z.shape().to_vec(), gz)?)])
            }
            OpKind::Sum => {
                let v = g.data()[0];
                Ok(vec![Some(Tensor::full(inputs[0].shape(), v))])
            }
            OpKind::Mean => {
                let v = g.data()[0] / inputs[0].numel() as f64;
                Ok(vec![Some(Tensor::full(inputs[0].shape(), v))])
            }
            OpKind::SumRows => {
                let x = inputs[0];
                let len = x.row_len();
                let mut gx = Vec::with_capacity(x.numel());
                for &gi in g.data() {
                    gx.extend(std::iter::repeat_n(gi, len));
                }
                Ok(vec![Some(Tensor::new(x.shape().to_vec(), gx)?)])
            }
            OpKind::Reshape { .. } => Ok(vec![Some(g.clone().reshape(inputs[0].shape().to_vec())?)]),
            OpKind::Pad { top, left, out_h, out_w } => {
                let [n, h, w, c] = nhwc(name, inputs[0])?;
                let mut small = vec![0.0; inputs[0].numel()];
                let mut big = g.data().to_vec();
                kernels::window_copy(&mut small, &mut big, n, *out_h, *out_w, c, *top, *left, h, w, false);
                Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), small)?)])
            }
            OpKind::Crop { top, left, h, w } => {
                let [n, bh, bw, c] = nhwc(name, inputs[0])?;
                let mut small = g.data().to_vec();
                let mut big = vec![0.0; inputs[0].numel()];
                kernels::window_copy(&mut small, &mut big, n, bh, bw, c, *top, *left, *h, *w, true);
                Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), big)?)])
            }
            OpKind::ResizeNearest { h: oh, w: ow } | OpKind::ResizeBilinear { h: oh, w: ow } => {
                let [n, h, w, c] = nhwc(name, inputs[0])?;
                let bilinear = matches!(self, OpKind::ResizeBilinear { .. });
                let gd = g.data();
                let mut gx = vec![0.0; inputs[0].numel()];
                kernels::for_each_resize_tap(bilinear, n, h, w, c, *oh, *ow, |s, d, wt| gx[s] += wt * gd[d]);
                Ok(vec![Some(Tensor::new(inputs[0].shape().to_vec(), gx)?)])
            }
            OpKind::Custom(op) => op.vjp(ctx),
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Clamps a divisor's magnitude to at least [`DIV_GUARD`], keeping its sign.
pub fn guard_divisor(b: f64) -> f64 {
    if b.abs() >= DIV_GUARD {
        b
    } else if b < 0.0 {
        -DIV_GUARD
    } else {
        DIV_GUARD
    }
}

pub fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Largest entry other than `skip`, with its index (first on ties).
pub fn best_other(row: &[f64], skip: usize) -> (f64, usize) {
    let mut best = f64::NEG_INFINITY;
    let mut idx = if skip == 0 { 1 } else { 0 };
    for (i, &v) in row.iter().enumerate() {
        if i != skip && v > best {
            best = v;
            idx = i;
        }
    }
    (best, idx)
}

fn binary(op: &str, a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() || (a.numel() == b.numel() && a.numel() == 1) {
        return Tensor::new(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect(),
        );
    }
    if b.numel() == 1 {
        let s = b.data()[0];
        return Ok(a.map(|x| f(x, s)));
    }
    if a.numel() == 1 {
        let s = a.data()[0];
        return Ok(b.map(|y| f(s, y)));
    }
    Err(shape_err(op, &[a.shape(), b.shape()]))
}

/// Sums a gradient down to a scalar input that was broadcast.
fn reduce_to(g: Tensor, input: &Tensor) -> Tensor {
    if input.numel() == 1 && g.numel() != 1 {
        let mut t = Tensor::scalar(g.sum());
        if !input.shape().is_empty() {
            t = t.reshape(input.shape().to_vec()).expect("single element");
        }
        t
    } else if g.shape() != input.shape() {
        g.reshape(input.shape().to_vec()).expect("equal element count")
    } else {
        g
    }
}

fn unary_grad(ctx: &VjpContext<'_>, f: impl Fn(f64, f64, f64) -> f64) -> Result<Vec<Option<Tensor>>> {
    let x = ctx.inputs[0];
    let data = x
        .data()
        .iter()
        .zip(ctx.output.data())
        .zip(ctx.grad.data())
        .map(|((&x, &y), &g)| f(x, y, g))
        .collect();
    Ok(vec![Some(Tensor::new(x.shape().to_vec(), data)?)])
}

fn matmul_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize, usize)> {
    match (a.shape(), b.shape()) {
        ([m, k], [k2, n]) if k == k2 => Ok((*m, *k, *n)),
        _ => Err(shape_err("matmul", &[a.shape(), b.shape()])),
    }
}

fn bias_width(x: &Tensor, b: &Tensor) -> Result<usize> {
    match (x.shape().last(), b.shape()) {
        (Some(&n), [m]) if n == *m && n > 0 => Ok(n),
        _ => Err(shape_err("bias_add", &[x.shape(), b.shape()])),
    }
}

fn nhwc(op: &str, x: &Tensor) -> Result<[usize; 4]> {
    match x.shape() {
        [n, h, w, c] => Ok([*n, *h, *w, *c]),
        s => Err(invalid(op, format!("expected NHWC input, got shape {s:?}"))),
    }
}

fn conv_geometry(x: &Tensor, w: &Tensor, padding: Padding) -> Result<ConvGeometry> {
    let [n, h, wd, c] = nhwc("conv2d", x)?;
    let (k, k2, cin, cout) = match w.shape() {
        [k, k2, cin, cout] => (*k, *k2, *cin, *cout),
        _ => return Err(shape_err("conv2d", &[x.shape(), w.shape()])),
    };
    if k != k2 || cin != c || k == 0 {
        return Err(shape_err("conv2d", &[x.shape(), w.shape()]));
    }
    let (pad, out_h, out_w) = match padding {
        Padding::Valid => {
            if k > h || k > wd {
                return Err(shape_err("conv2d", &[x.shape(), w.shape()]));
            }
            (0, h - k + 1, wd - k + 1)
        }
        Padding::Same => {
            if k % 2 == 0 {
                return Err(invalid("conv2d", "same padding needs an odd kernel"));
            }
            ((k - 1) / 2, h, wd)
        }
    };
    Ok(ConvGeometry {
        batch: n,
        height: h,
        width: wd,
        in_ch: c,
        kernel: k,
        out_ch: cout,
        pad,
        out_h,
        out_w,
    })
}

fn logits_dims(op: &str, z: &Tensor, labels: &[usize]) -> Result<(usize, usize)> {
    let (n, c) = match z.shape() {
        [n, c] => (*n, *c),
        s => return Err(invalid(op, format!("expected [N, C] logits, got {s:?}"))),
    };
    if labels.len() != n {
        return Err(invalid(op, format!("{} labels for batch of {n}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(invalid(op, format!("label {bad} out of range for {c} classes")));
    }
    Ok((n, c))
}
