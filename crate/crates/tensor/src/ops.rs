//! Forward kernels and their adjoints.

use crate::error::{Result, TensorError};
use crate::graph::Op;
use crate::session::{BatchStats, Diagnostic, DiagnosticKind};
use crate::tensor::Tensor;
use crate::EPS_DIV;

pub(crate) const BN_EPS: f64 = 1e-5;

/// Where each output element reads from in a (possibly broadcast) operand.
enum Gather {
    Same,
    Scalar,
    Map(Vec<usize>),
}

impl Gather {
    fn new(out: &[usize], shape: &[usize]) -> Self {
        if out == shape {
            return Gather::Same;
        }
        if shape.iter().product::<usize>() == 1 {
            return Gather::Scalar;
        }
        let rank = out.len();
        let offset = rank - shape.len();
        let mut strides = vec![0usize; rank];
        let mut acc = 1;
        for i in (0..shape.len()).rev() {
            strides[i + offset] = if shape[i] == 1 { 0 } else { acc };
            acc *= shape[i];
        }
        let total: usize = out.iter().product();
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        let mut pos = 0usize;
        for _ in 0..total {
            map.push(pos);
            for d in (0..rank).rev() {
                idx[d] += 1;
                pos += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                pos -= strides[d] * out[d];
                idx[d] = 0;
            }
        }
        Gather::Map(map)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Gather::Same => i,
            Gather::Scalar => 0,
            Gather::Map(m) => m[i],
        }
    }
}

pub(crate) struct Ctx<'a> {
    pub node: usize,
    pub diagnostics: &'a mut Vec<Diagnostic>,
    pub stats: &'a mut Vec<BatchStats>,
}

impl Ctx<'_> {
    fn flag(&mut self, kind: DiagnosticKind, count: usize) {
        if count > 0 {
            self.diagnostics.push(Diagnostic {
                node: self.node,
                kind,
                count,
            });
        }
    }
}

fn binary_forward(a: &Tensor, b: &Tensor, shape: &[usize], f: impl Fn(f64, f64) -> f64) -> Tensor {
    let total: usize = shape.iter().product();
    let (ga, gb) = (Gather::new(shape, a.shape()), Gather::new(shape, b.shape()));
    let (ad, bd) = (a.data(), b.data());
    let data = match (&ga, &gb) {
        (Gather::Same, Gather::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        (Gather::Same, Gather::Scalar) => ad.iter().map(|&x| f(x, bd[0])).collect(),
        _ => (0..total).map(|i| f(ad[ga.at(i)], bd[gb.at(i)])).collect(),
    };
    Tensor::from_parts(shape.to_vec(), data)
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
}

/// Splits `shape` around `axis` into (outer, len, inner) extents.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last(shape: &[usize]) -> (usize, usize) {
    let len = *shape.last().unwrap();
    (shape.iter().product::<usize>() / len, len)
}

pub(crate) fn forward(op: &Op, ins: &[&Tensor], shape: &[usize], ctx: &mut Ctx) -> Result<Tensor> {
    let out = match op {
        Op::Input(_) | Op::Constant(_) => unreachable!("leaves are not computed"),
        Op::Add => binary_forward(ins[0], ins[1], shape, |x, y| x + y),
        Op::Sub => binary_forward(ins[0], ins[1], shape, |x, y| x - y),
        Op::Mul => binary_forward(ins[0], ins[1], shape, |x, y| x * y),
        Op::Div => {
            if let Some(&v) = ins[1].data().iter().find(|v| v.abs() < EPS_DIV) {
                return Err(TensorError::DivisionGuard {
                    node: ctx.node,
                    op: op.name(),
                    value: v,
                    guard: EPS_DIV,
                });
            }
            binary_forward(ins[0], ins[1], shape, |x, y| x / y)
        }
        Op::DivClamped => {
            let clamped = ins[1].data().iter().filter(|&&v| v < EPS_DIV).count();
            ctx.flag(DiagnosticKind::ClampedDenominator, clamped);
            binary_forward(ins[0], ins[1], shape, |x, y| x / y.max(EPS_DIV))
        }
        Op::Neg => map(ins[0], |x| -x),
        Op::Square => map(ins[0], |x| x * x),
        Op::Sqrt => {
            let clamped = ins[0].data().iter().filter(|&&v| v < EPS_DIV).count();
            ctx.flag(DiagnosticKind::ClampedSqrt, clamped);
            map(ins[0], |x| x.max(EPS_DIV).sqrt())
        }
        Op::Log => {
            if let Some(&v) = ins[0].data().iter().find(|&&v| v <= 0.0) {
                return Err(TensorError::Domain {
                    node: ctx.node,
                    op: op.name(),
                    value: v,
                });
            }
            map(ins[0], f64::ln)
        }
        Op::Exp => map(ins[0], f64::exp),
        Op::Reciprocal => {
            let clamped = ins[0].data().iter().filter(|&&v| v < EPS_DIV).count();
            ctx.flag(DiagnosticKind::ClampedDenominator, clamped);
            map(ins[0], |x| 1.0 / x.max(EPS_DIV))
        }
        Op::Relu => map(ins[0], |x| if x > 0.0 { x } else { 0.0 }),
        Op::Scale(c) => map(ins[0], |x| x * c),
        Op::AddScalar(c) => map(ins[0], |x| x + c),
        Op::Detach | Op::Reshape => Tensor::from_parts(shape.to_vec(), ins[0].data().to_vec()),
        Op::Sum => Tensor::scalar(ins[0].data().iter().sum()),
        Op::SumAxis(axis) => {
            let (outer, len, inner) = around(ins[0].shape(), *axis);
            let x = ins[0].data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for k in 0..len {
                    let src = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                    for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *dst += v;
                    }
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::CumSum => {
            let (_, len) = last(shape);
            let mut out = ins[0].data().to_vec();
            for row in out.chunks_mut(len) {
                let mut acc = 0.0;
                for v in row.iter_mut() {
                    acc += *v;
                    *v = acc;
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::Slice { start, end } => {
            let (_, len) = last(ins[0].shape());
            let data = ins[0]
                .data()
                .chunks(len)
                .flat_map(|row| row[*start..*end].iter().copied())
                .collect();
            Tensor::from_parts(shape.to_vec(), data)
        }
        Op::PadFront(count) => {
            let (_, len) = last(ins[0].shape());
            let mut data = Vec::with_capacity(shape.iter().product());
            for row in ins[0].data().chunks(len) {
                data.extend(std::iter::repeat_n(0.0, *count));
                data.extend_from_slice(row);
            }
            Tensor::from_parts(shape.to_vec(), data)
        }
        Op::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let (p, q, r) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let mut out = vec![0.0; p * r];
            for i in 0..p {
                let row = &mut out[i * r..(i + 1) * r];
                for k in 0..q {
                    let av = a.data()[i * q + k];
                    if av == 0.0 {
                        continue;
                    }
                    for (o, &bv) in row.iter_mut().zip(&b.data()[k * r..(k + 1) * r]) {
                        *o += av * bv;
                    }
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::MatVec => {
            let (m, x) = (ins[0], ins[1]);
            let (rows, cols) = (m.shape()[0], m.shape()[1]);
            let mut out = Vec::with_capacity(shape.iter().product());
            for xr in x.data().chunks(cols) {
                for i in 0..rows {
                    out.push(dot(&m.data()[i * cols..(i + 1) * cols], xr));
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::Linear => {
            let (x, w, b) = (ins[0], ins[1], ins[2]);
            let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
            let mut out = Vec::with_capacity(shape.iter().product());
            for xr in x.data().chunks(in_dim) {
                for o in 0..out_dim {
                    out.push(b.data()[o] + dot(&w.data()[o * in_dim..(o + 1) * in_dim], xr));
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::Conv1d => conv1d_forward(ins[0], ins[1], ins[2]),
        Op::MaxPool => {
            let (_, len) = last(ins[0].shape());
            let half = len / 2;
            let mut out = Vec::with_capacity(shape.iter().product());
            for row in ins[0].data().chunks(len) {
                for i in 0..half {
                    out.push(row[2 * i].max(row[2 * i + 1]));
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::BatchNormTrain => {
            let (mean, var) = bn_stats(ins[0]);
            let out = bn_apply(ins[0], ins[1], ins[2], &mean, &var);
            ctx.stats.push(BatchStats {
                node: ctx.node,
                count: bn_count(ins[0].shape()),
                mean,
                var,
            });
            out
        }
        Op::BatchNormEval => bn_apply(ins[0], ins[1], ins[2], ins[3].data(), ins[4].data()),
        Op::GlobalAvg => {
            let (_, len) = last(ins[0].shape());
            let data = ins[0]
                .data()
                .chunks(len)
                .map(|row| row.iter().sum::<f64>() / len as f64)
                .collect();
            Tensor::from_parts(shape.to_vec(), data)
        }
        Op::Softmax => {
            let (_, len) = last(shape);
            let mut out = ins[0].data().to_vec();
            for row in out.chunks_mut(len) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    total += *v;
                }
                for v in row.iter_mut() {
                    *v /= total;
                }
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::Norm => {
            let (_, len) = last(ins[0].shape());
            let data = ins[0].data().chunks(len).map(|row| dot(row, row).sqrt()).collect();
            Tensor::from_parts(shape.to_vec(), data)
        }
        Op::Interp => interp_forward(ins[0], ins[1], ins[2], shape, ctx),
        Op::CentralDiff(grid) => {
            let (_, len) = last(shape);
            let mut out = Vec::with_capacity(ins[0].len());
            for row in ins[0].data().chunks(len) {
                out.push((row[1] - row[0]) / (grid[1] - grid[0]));
                for k in 1..len - 1 {
                    out.push((row[k + 1] - row[k - 1]) / (grid[k + 1] - grid[k - 1]));
                }
                out.push((row[len - 1] - row[len - 2]) / (grid[len - 1] - grid[len - 2]));
            }
            Tensor::from_parts(shape.to_vec(), out)
        }
        Op::WarpGuard(grid) => {
            let (_, len) = last(shape);
            let mut out = ins[0].data().to_vec();
            let mut ramped = 0;
            let mut degenerate = 0;
            for row in out.chunks_mut(len) {
                let flat = row[len - 1] - row[0] < EPS_DIV;
                if guard_warp_row(row, grid) {
                    ramped += 1;
                    degenerate += usize::from(flat);
                }
            }
            ctx.flag(DiagnosticKind::WarpRamp, ramped);
            ctx.flag(DiagnosticKind::DegenerateWarp, degenerate);
            Tensor::from_parts(shape.to_vec(), out)
        }
    };
    if !out.all_finite() {
        return Err(TensorError::NonFinite {
            node: ctx.node,
            op: op.name(),
        });
    }
    Ok(out)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn conv1d_forward(x: &Tensor, w: &Tensor, bias: &Tensor) -> Tensor {
    let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, ksize) = (w.shape()[0], w.shape()[2]);
    let pad = ksize / 2;
    let mut out = vec![0.0; batch * cout * len];
    for b in 0..batch {
        for co in 0..cout {
            let dst = &mut out[(b * cout + co) * len..(b * cout + co + 1) * len];
            dst.fill(bias.data()[co]);
            for ci in 0..cin {
                let src = &x.data()[(b * cin + ci) * len..(b * cin + ci + 1) * len];
                for k in 0..ksize {
                    let wv = w.data()[(co * cin + ci) * ksize + k];
                    // out[l] += w * src[l + k - pad] for valid indices
                    let (lo, hi) = conv_range(len, k, pad);
                    let shift = k as isize - pad as isize;
                    let s = (lo as isize + shift) as usize;
                    for (o, &v) in dst[lo..hi].iter_mut().zip(&src[s..s + (hi - lo)]) {
                        *o += wv * v;
                    }
                }
            }
        }
    }
    Tensor::from_parts(vec![batch, cout, len], out)
}

/// Output positions `l` for which `l + k - pad` is in bounds.
#[inline]
fn conv_range(len: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = pad.saturating_sub(k);
    let hi = (len + pad).saturating_sub(k).min(len);
    (lo, hi.max(lo))
}

fn bn_count(shape: &[usize]) -> usize {
    shape[0] * shape.get(2).copied().unwrap_or(1)
}

/// Per-channel mean and biased variance over batch and time.
fn bn_stats(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let s = x.shape();
    let (batch, ch, len) = (s[0], s[1], s.get(2).copied().unwrap_or(1));
    let count = (batch * len) as f64;
    let mut mean = vec![0.0; ch];
    let mut var = vec![0.0; ch];
    for c in 0..ch {
        let mut acc = 0.0;
        for b in 0..batch {
            acc += x.data()[(b * ch + c) * len..(b * ch + c + 1) * len].iter().sum::<f64>();
        }
        let m = acc / count;
        let mut sq = 0.0;
        for b in 0..batch {
            sq += x.data()[(b * ch + c) * len..(b * ch + c + 1) * len]
                .iter()
                .map(|v| (v - m) * (v - m))
                .sum::<f64>();
        }
        mean[c] = m;
        var[c] = sq / count;
    }
    (mean, var)
}

fn bn_apply(x: &Tensor, gamma: &Tensor, beta: &Tensor, mean: &[f64], var: &[f64]) -> Tensor {
    let s = x.shape();
    let (ch, len) = (s[1], s.get(2).copied().unwrap_or(1));
    let mut out = x.data().to_vec();
    for (i, row) in out.chunks_mut(len).enumerate() {
        let c = i % ch;
        let inv = 1.0 / (var[c] + BN_EPS).sqrt();
        let (g, b) = (gamma.data()[c], beta.data()[c]);
        for v in row.iter_mut() {
            *v = g * (*v - mean[c]) * inv + b;
        }
    }
    Tensor::from_parts(s.to_vec(), out)
}

/// Cell `r` with `xk[r] <= q < xk[r + 1]` (clamped to the valid cells).
#[inline]
fn find_cell(xk: &[f64], q: f64) -> usize {
    let idx = xk.partition_point(|&v| v <= q);
    idx.saturating_sub(1).min(xk.len() - 2)
}

/// Interpolation weight and whether it lies strictly inside its cell's
/// differentiable range.
#[inline]
fn cell_weight(x0: f64, x1: f64, q: f64) -> (f64, f64, bool) {
    let h = (x1 - x0).max(EPS_DIV);
    let raw = (q - x0) / h;
    if raw < 0.0 {
        (0.0, h, false)
    } else if raw > 1.0 {
        (1.0, h, false)
    } else {
        (raw, h, true)
    }
}

fn interp_forward(xk: &Tensor, yk: &Tensor, xq: &Tensor, shape: &[usize], ctx: &mut Ctx) -> Tensor {
    let (batch, dims, nq) = (shape[0], shape[1], shape[2]);
    let m = xk.shape()[1];
    let mut out = vec![0.0; batch * dims * nq];
    let mut narrow = 0;
    for b in 0..batch {
        let knots = &xk.data()[b * m..(b + 1) * m];
        narrow += knots.windows(2).filter(|w| w[1] - w[0] < EPS_DIV).count();
        let queries = &xq.data()[b * nq..(b + 1) * nq];
        for (j, &q) in queries.iter().enumerate() {
            let r = find_cell(knots, q);
            let (w, _, _) = cell_weight(knots[r], knots[r + 1], q);
            for c in 0..dims {
                let y = &yk.data()[(b * dims + c) * m..(b * dims + c + 1) * m];
                out[(b * dims + c) * nq + j] = y[r] + w * (y[r + 1] - y[r]);
            }
        }
    }
    ctx.flag(DiagnosticKind::NarrowInterpolationCell, narrow);
    Tensor::from_parts(shape.to_vec(), out)
}

/// Blend weight toward the identity for a warp row, or `None` when the row is
/// already strictly increasing by at least `EPS_DIV`.
pub(crate) fn ramp_weight(row: &[f64], grid: &[f64]) -> Option<f64> {
    let min_step = row.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    if min_step >= EPS_DIV {
        return None;
    }
    let span = row[row.len() - 1] - row[0];
    if span < EPS_DIV {
        return Some(1.0);
    }
    let min_dt = grid.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
    Some(2.0 * EPS_DIV * span / min_dt)
}

/// Applies the warp guard to one row in place; returns whether it fired.
pub fn guard_warp_row(row: &mut [f64], grid: &[f64]) -> bool {
    let Some(lambda) = ramp_weight(row, grid) else {
        return false;
    };
    let d = ramp_denominator(row, grid, lambda);
    let (g0, t0) = (row[0], grid[0]);
    for (v, &t) in row.iter_mut().zip(grid) {
        *v = ramp_numerator(*v, g0, t, t0, lambda) / d;
    }
    true
}

#[inline]
fn ramp_numerator(v: f64, g0: f64, t: f64, t0: f64, lambda: f64) -> f64 {
    (v - g0) + lambda * (t - t0)
}

fn ramp_denominator(row: &[f64], grid: &[f64], lambda: f64) -> f64 {
    let n = row.len() - 1;
    ramp_numerator(row[n], row[0], grid[n], grid[0], lambda)
}

/// Computes input gradients given the output gradient. Entries for inputs that
/// do not need a gradient are `None`.
pub(crate) fn backward(op: &Op, ins: &[&Tensor], out: &Tensor, g: &Tensor, needs: &[bool]) -> Vec<Option<Tensor>> {
    let want = |i: usize| needs.get(i).copied().unwrap_or(false);
    match op {
        Op::Input(_) | Op::Constant(_) | Op::Detach => vec![],
        Op::Add | Op::Sub | Op::Mul | Op::Div | Op::DivClamped => {
            let (a, b) = (ins[0], ins[1]);
            let total = g.len();
            let (ga_idx, gb_idx) = (Gather::new(g.shape(), a.shape()), Gather::new(g.shape(), b.shape()));
            let mut ga = want(0).then(|| vec![0.0; a.len()]);
            let mut gb = want(1).then(|| vec![0.0; b.len()]);
            for i in 0..total {
                let (ia, ib) = (ga_idx.at(i), gb_idx.at(i));
                let (x, y, gi) = (a.data()[ia], b.data()[ib], g.data()[i]);
                let (da, db) = match op {
                    Op::Add => (1.0, 1.0),
                    Op::Sub => (1.0, -1.0),
                    Op::Mul => (y, x),
                    Op::Div => (1.0 / y, -x / (y * y)),
                    _ => {
                        if y < EPS_DIV {
                            (1.0 / EPS_DIV, 0.0)
                        } else {
                            (1.0 / y, -x / (y * y))
                        }
                    }
                };
                if let Some(ga) = ga.as_mut() {
                    ga[ia] += gi * da;
                }
                if let Some(gb) = gb.as_mut() {
                    gb[ib] += gi * db;
                }
            }
            vec![
                ga.map(|d| Tensor::from_parts(a.shape().to_vec(), d)),
                gb.map(|d| Tensor::from_parts(b.shape().to_vec(), d)),
            ]
        }
        Op::Neg => vec![Some(map(g, |v| -v))],
        Op::Scale(c) => vec![Some(map(g, |v| v * c))],
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::Reshape => vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), g.data().to_vec()))],
        Op::Square => vec![Some(zip_map(g, ins[0], |gv, x| 2.0 * x * gv))],
        Op::Sqrt => vec![Some(zip3(
            g,
            ins[0],
            out,
            |gv, x, y| {
                if x < EPS_DIV {
                    0.0
                } else {
                    0.5 * gv / y
                }
            },
        ))],
        Op::Log => vec![Some(zip_map(g, ins[0], |gv, x| gv / x))],
        Op::Exp => vec![Some(zip_map(g, out, |gv, y| gv * y))],
        Op::Reciprocal => vec![Some(zip3(
            g,
            ins[0],
            out,
            |gv, x, y| {
                if x < EPS_DIV {
                    0.0
                } else {
                    -gv * y * y
                }
            },
        ))],
        Op::Relu => vec![Some(zip_map(g, ins[0], |gv, x| if x > 0.0 { gv } else { 0.0 }))],
        Op::Sum => vec![Some(Tensor::full(ins[0].shape(), g.item()))],
        Op::SumAxis(axis) => {
            let (outer, len, inner) = around(ins[0].shape(), *axis);
            let mut gx = vec![0.0; ins[0].len()];
            for o in 0..outer {
                for k in 0..len {
                    gx[(o * len + k) * inner..(o * len + k + 1) * inner]
                        .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), gx))]
        }
        Op::CumSum => {
            let (_, len) = last(g.shape());
            let mut gx = g.data().to_vec();
            for row in gx.chunks_mut(len) {
                let mut acc = 0.0;
                for v in row.iter_mut().rev() {
                    acc += *v;
                    *v = acc;
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        }
        Op::Slice { start, end } => {
            let (_, len) = last(ins[0].shape());
            let width = end - start;
            let mut gx = vec![0.0; ins[0].len()];
            for (row, grow) in gx.chunks_mut(len).zip(g.data().chunks(width)) {
                row[*start..*end].copy_from_slice(grow);
            }
            vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), gx))]
        }
        Op::PadFront(count) => {
            let (_, len) = last(g.shape());
            let gx = g
                .data()
                .chunks(len)
                .flat_map(|row| row[*count..].iter().copied())
                .collect();
            vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), gx))]
        }
        Op::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            let (p, q, r) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            let ga = want(0).then(|| {
                let mut ga = vec![0.0; p * q];
                for i in 0..p {
                    for k in 0..q {
                        ga[i * q + k] = dot(&g.data()[i * r..(i + 1) * r], &b.data()[k * r..(k + 1) * r]);
                    }
                }
                Tensor::from_parts(vec![p, q], ga)
            });
            let gb = want(1).then(|| {
                let mut gb = vec![0.0; q * r];
                for i in 0..p {
                    for k in 0..q {
                        let av = a.data()[i * q + k];
                        for (o, &gv) in gb[k * r..(k + 1) * r].iter_mut().zip(&g.data()[i * r..(i + 1) * r]) {
                            *o += av * gv;
                        }
                    }
                }
                Tensor::from_parts(vec![q, r], gb)
            });
            vec![ga, gb]
        }
        Op::MatVec => {
            let (m, x) = (ins[0], ins[1]);
            let (rows, cols) = (m.shape()[0], m.shape()[1]);
            let gm = want(0).then(|| {
                let mut gm = vec![0.0; rows * cols];
                for (xr, gr) in x.data().chunks(cols).zip(g.data().chunks(rows)) {
                    for (i, &gv) in gr.iter().enumerate() {
                        for (o, &xv) in gm[i * cols..(i + 1) * cols].iter_mut().zip(xr) {
                            *o += gv * xv;
                        }
                    }
                }
                Tensor::from_parts(vec![rows, cols], gm)
            });
            let gx = want(1).then(|| {
                let mut gx = vec![0.0; x.len()];
                for (xr, gr) in gx.chunks_mut(cols).zip(g.data().chunks(rows)) {
                    for (i, &gv) in gr.iter().enumerate() {
                        for (o, &mv) in xr.iter_mut().zip(&m.data()[i * cols..(i + 1) * cols]) {
                            *o += gv * mv;
                        }
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), gx)
            });
            vec![gm, gx]
        }
        Op::Linear => {
            let (x, w) = (ins[0], ins[1]);
            let (out_dim, in_dim) = (w.shape()[0], w.shape()[1]);
            let gx = want(0).then(|| {
                let mut gx = vec![0.0; x.len()];
                for (xr, gr) in gx.chunks_mut(in_dim).zip(g.data().chunks(out_dim)) {
                    for (o, &gv) in gr.iter().enumerate() {
                        for (dst, &wv) in xr.iter_mut().zip(&w.data()[o * in_dim..(o + 1) * in_dim]) {
                            *dst += gv * wv;
                        }
                    }
                }
                Tensor::from_parts(x.shape().to_vec(), gx)
            });
            let gw = want(1).then(|| {
                let mut gw = vec![0.0; w.len()];
                for (xr, gr) in x.data().chunks(in_dim).zip(g.data().chunks(out_dim)) {
                    for (o, &gv) in gr.iter().enumerate() {
                        for (dst, &xv) in gw[o * in_dim..(o + 1) * in_dim].iter_mut().zip(xr) {
                            *dst += gv * xv;
                        }
                    }
                }
                Tensor::from_parts(w.shape().to_vec(), gw)
            });
            let gb = want(2).then(|| {
                let mut gb = vec![0.0; out_dim];
                for gr in g.data().chunks(out_dim) {
                    for (dst, &gv) in gb.iter_mut().zip(gr) {
                        *dst += gv;
                    }
                }
                Tensor::from_parts(vec![out_dim], gb)
            });
            vec![gx, gw, gb]
        }
        Op::Conv1d => conv1d_backward(ins[0], ins[1], g, [want(0), want(1), want(2)]),
        Op::MaxPool => {
            let (_, len) = last(ins[0].shape());
            let half = len / 2;
            let mut gx = vec![0.0; ins[0].len()];
            for (row, (grow, xrow)) in gx
                .chunks_mut(len)
                .zip(g.data().chunks(half).zip(ins[0].data().chunks(len)))
            {
                for i in 0..half {
                    // ties route to the earlier index
                    let k = if xrow[2 * i] >= xrow[2 * i + 1] {
                        2 * i
                    } else {
                        2 * i + 1
                    };
                    row[k] += grow[i];
                }
            }
            vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), gx))]
        }
        Op::BatchNormTrain => {
            let (mean, var) = bn_stats(ins[0]);
            bn_backward(ins[0], ins[1], g, &mean, &var, true, [want(0), want(1), want(2)])
        }
        Op::BatchNormEval => bn_backward(
            ins[0],
            ins[1],
            g,
            ins[3].data(),
            ins[4].data(),
            false,
            [want(0), want(1), want(2)],
        ),
        Op::GlobalAvg => {
            let (_, len) = last(ins[0].shape());
            let gx = g
                .data()
                .iter()
                .flat_map(|&gv| std::iter::repeat_n(gv / len as f64, len))
                .collect();
            vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), gx))]
        }
        Op::Softmax => {
            let (_, len) = last(out.shape());
            let mut gx = vec![0.0; out.len()];
            for ((dst, yr), gr) in gx.chunks_mut(len).zip(out.data().chunks(len)).zip(g.data().chunks(len)) {
                let s = dot(yr, gr);
                for ((d, &y), &gv) in dst.iter_mut().zip(yr).zip(gr) {
                    *d = y * (gv - s);
                }
            }
            vec![Some(Tensor::from_parts(out.shape().to_vec(), gx))]
        }
        Op::Norm => {
            let (_, len) = last(ins[0].shape());
            let mut gx = vec![0.0; ins[0].len()];
            for ((dst, xr), (&gv, &nrm)) in gx
                .chunks_mut(len)
                .zip(ins[0].data().chunks(len))
                .zip(g.data().iter().zip(out.data()))
            {
                if nrm > EPS_DIV {
                    for (d, &x) in dst.iter_mut().zip(xr) {
                        *d = gv * x / nrm;
                    }
                }
            }
            vec![Some(Tensor::from_parts(ins[0].shape().to_vec(), gx))]
        }
        Op::Interp => interp_backward(ins[0], ins[1], ins[2], g, [want(0), want(1), want(2)]),
        Op::CentralDiff(grid) => {
            let (_, len) = last(g.shape());
            let mut gx = vec![0.0; g.len()];
            for (dst, gr) in gx.chunks_mut(len).zip(g.data().chunks(len)) {
                let h0 = grid[1] - grid[0];
                dst[1] += gr[0] / h0;
                dst[0] -= gr[0] / h0;
                for k in 1..len - 1 {
                    let h = grid[k + 1] - grid[k - 1];
                    dst[k + 1] += gr[k] / h;
                    dst[k - 1] -= gr[k] / h;
                }
                let hn = grid[len - 1] - grid[len - 2];
                dst[len - 1] += gr[len - 1] / hn;
                dst[len - 2] -= gr[len - 1] / hn;
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        }
        Op::WarpGuard(grid) => {
            let (_, len) = last(g.shape());
            let mut gx = g.data().to_vec();
            for ((dst, xr), yr) in gx
                .chunks_mut(len)
                .zip(ins[0].data().chunks(len))
                .zip(out.data().chunks(len))
            {
                let Some(lambda) = ramp_weight(xr, grid) else {
                    continue;
                };
                let d = ramp_denominator(xr, grid, lambda);
                let sum_g: f64 = dst.iter().sum();
                let sum_gy = dot(dst, yr);
                for v in dst.iter_mut() {
                    *v /= d;
                }
                dst[0] += (-sum_g + sum_gy) / d;
                dst[len - 1] -= sum_gy / d;
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        }
    }
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect(),
    )
}

fn zip3(g: &Tensor, x: &Tensor, y: &Tensor, f: impl Fn(f64, f64, f64) -> f64) -> Tensor {
    Tensor::from_parts(
        x.shape().to_vec(),
        g.data()
            .iter()
            .zip(x.data())
            .zip(y.data())
            .map(|((&a, &b), &c)| f(a, b, c))
            .collect(),
    )
}

fn conv1d_backward(x: &Tensor, w: &Tensor, g: &Tensor, want: [bool; 3]) -> Vec<Option<Tensor>> {
    let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, ksize) = (w.shape()[0], w.shape()[2]);
    let pad = ksize / 2;
    let mut gx = want[0].then(|| vec![0.0; x.len()]);
    let mut gw = want[1].then(|| vec![0.0; w.len()]);
    for b in 0..batch {
        for co in 0..cout {
            let grow = &g.data()[(b * cout + co) * len..(b * cout + co + 1) * len];
            for ci in 0..cin {
                let xoff = (b * cin + ci) * len;
                for k in 0..ksize {
                    let (lo, hi) = conv_range(len, k, pad);
                    let s = (lo as isize + k as isize - pad as isize) as usize;
                    let widx = (co * cin + ci) * ksize + k;
                    if let Some(gw) = gw.as_mut() {
                        gw[widx] += dot(&grow[lo..hi], &x.data()[xoff + s..xoff + s + (hi - lo)]);
                    }
                    if let Some(gx) = gx.as_mut() {
                        let wv = w.data()[widx];
                        for (d, &gv) in gx[xoff + s..xoff + s + (hi - lo)].iter_mut().zip(&grow[lo..hi]) {
                            *d += wv * gv;
                        }
                    }
                }
            }
        }
    }
    let gb = want[2].then(|| {
        let mut gb = vec![0.0; cout];
        for (i, row) in g.data().chunks(len).enumerate() {
            gb[i % cout] += row.iter().sum::<f64>();
        }
        Tensor::from_parts(vec![cout], gb)
    });
    vec![
        gx.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
        gw.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
        gb,
    ]
}

fn bn_backward(
    x: &Tensor,
    gamma: &Tensor,
    g: &Tensor,
    mean: &[f64],
    var: &[f64],
    batch_stats: bool,
    want: [bool; 3],
) -> Vec<Option<Tensor>> {
    let s = x.shape();
    let (batch, ch, len) = (s[0], s[1], s.get(2).copied().unwrap_or(1));
    let count = (batch * len) as f64;
    let mut sum_g = vec![0.0; ch];
    let mut sum_gx = vec![0.0; ch];
    let inv: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    for (i, (xr, gr)) in x.data().chunks(len).zip(g.data().chunks(len)).enumerate() {
        let c = i % ch;
        for (&xv, &gv) in xr.iter().zip(gr) {
            sum_g[c] += gv;
            sum_gx[c] += gv * (xv - mean[c]) * inv[c];
        }
    }
    let gx = want[0].then(|| {
        let mut gx = vec![0.0; x.len()];
        for (i, ((dst, xr), gr)) in gx
            .chunks_mut(len)
            .zip(x.data().chunks(len))
            .zip(g.data().chunks(len))
            .enumerate()
        {
            let c = i % ch;
            let scale = gamma.data()[c] * inv[c];
            for ((d, &xv), &gv) in dst.iter_mut().zip(xr).zip(gr) {
                *d = if batch_stats {
                    let xhat = (xv - mean[c]) * inv[c];
                    scale * (gv - sum_g[c] / count - xhat * sum_gx[c] / count)
                } else {
                    scale * gv
                };
            }
        }
        Tensor::from_parts(s.to_vec(), gx)
    });
    vec![
        gx,
        want[1].then(|| Tensor::from_parts(vec![ch], sum_gx)),
        want[2].then(|| Tensor::from_parts(vec![ch], sum_g)),
    ]
}

fn interp_backward(xk: &Tensor, yk: &Tensor, xq: &Tensor, g: &Tensor, want: [bool; 3]) -> Vec<Option<Tensor>> {
    let (batch, dims, nq) = (g.shape()[0], g.shape()[1], g.shape()[2]);
    let m = xk.shape()[1];
    let mut gk = want[0].then(|| vec![0.0; xk.len()]);
    let mut gy = want[1].then(|| vec![0.0; yk.len()]);
    let mut gq = want[2].then(|| vec![0.0; xq.len()]);
    for b in 0..batch {
        let knots = &xk.data()[b * m..(b + 1) * m];
        for j in 0..nq {
            let q = xq.data()[b * nq + j];
            let r = find_cell(knots, q);
            let (w, h, inside) = cell_weight(knots[r], knots[r + 1], q);
            for c in 0..dims {
                let yoff = (b * dims + c) * m;
                let gv = g.data()[(b * dims + c) * nq + j];
                if let Some(gy) = gy.as_mut() {
                    gy[yoff + r] += gv * (1.0 - w);
                    gy[yoff + r + 1] += gv * w;
                }
                if !inside {
                    continue;
                }
                let slope = (yk.data()[yoff + r + 1] - yk.data()[yoff + r]) / h;
                if let Some(gq) = gq.as_mut() {
                    gq[b * nq + j] += gv * slope;
                }
                if let Some(gk) = gk.as_mut() {
                    gk[b * m + r] += gv * slope * (w - 1.0);
                    gk[b * m + r + 1] -= gv * slope * w;
                }
            }
        }
    }
    vec![
        gk.map(|d| Tensor::from_parts(xk.shape().to_vec(), d)),
        gy.map(|d| Tensor::from_parts(yk.shape().to_vec(), d)),
        gq.map(|d| Tensor::from_parts(xq.shape().to_vec(), d)),
    ]
}
