//! Op records and their forward/backward kernels.
//!
//! Every op is recomputable from its record plus the values of its inputs,
//! which is what makes [`super::Graph::replay`] possible.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::NodeId;

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad_scalar(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

#[derive(Debug, Clone)]
pub(crate) enum BatchStats {
    /// Normalize with statistics of the current batch.
    Batch,
    /// Normalize with fixed running statistics.
    Running { mean: Arc<Vec<f64>>, var: Arc<Vec<f64>> },
}

#[derive(Debug, Clone)]
pub(crate) enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    Pow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Transpose(NodeId),
    Exp(NodeId),
    Log(NodeId),
    PowScalar(NodeId, f64),
    Scale(NodeId, f64),
    AddScalar(NodeId, f64),
    MaxScalar(NodeId, f64),
    Gelu(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    SumAxis(NodeId, usize),
    Reshape(NodeId, Vec<usize>),
    LogSoftmax(NodeId),
    BatchNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
        stats: BatchStats,
    },
    Dropout { x: NodeId, scale: Arc<Vec<f64>> },
    DepthwiseConv { x: NodeId, w: NodeId },
    PointwiseConv { x: NodeId, w: NodeId },
    PatchConv { x: NodeId, w: NodeId },
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<NodeId> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | Pow(a, b) | MatMul(a, b) => {
                vec![*a, *b]
            }
            Transpose(a) | Exp(a) | Log(a) | PowScalar(a, _) | Scale(a, _) | AddScalar(a, _)
            | MaxScalar(a, _) | Gelu(a) | Sum(a) | Mean(a) | SumAxis(a, _) | Reshape(a, _)
            | LogSoftmax(a) => vec![*a],
            BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Dropout { x, .. } => vec![*x],
            DepthwiseConv { x, w } | PointwiseConv { x, w } | PatchConv { x, w } => vec![*x, *w],
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return Err(Error::shape(op, a, b)),
        };
    }
    Ok(out)
}

/// For every element of `out`, the linear index of the element of an operand
/// of shape `src` that broadcasts onto it.
fn broadcast_index(out: &[usize], src: &[usize]) -> Vec<usize> {
    let n: usize = out.iter().product();
    if out == src {
        return (0..n).collect();
    }
    let rank = out.len();
    let mut strides = vec![0usize; rank];
    let mut acc = 1;
    for i in (0..src.len()).rev() {
        let oi = i + rank - src.len();
        strides[oi] = if src[i] == 1 { 0 } else { acc };
        acc *= src[i];
    }
    let mut idx = vec![0usize; rank];
    let mut res = Vec::with_capacity(n);
    let mut lin = 0usize;
    for _ in 0..n {
        res.push(lin);
        for d in (0..rank).rev() {
            idx[d] += 1;
            lin += strides[d];
            if idx[d] < out[d] {
                break;
            }
            lin -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    res
}

fn binary(
    op: &'static str,
    a: &Tensor,
    b: &Tensor,
    f: impl Fn(f64, f64) -> f64,
) -> Result<Tensor> {
    let shape = broadcast_shape(op, a.shape(), b.shape())?;
    let ia = broadcast_index(&shape, a.shape());
    let ib = broadcast_index(&shape, b.shape());
    let (da, db) = (a.data(), b.data());
    let data = ia.iter().zip(&ib).map(|(&i, &j)| f(da[i], db[j])).collect();
    Tensor::new(shape, data)
}

/// Accumulates `g` (shaped like the broadcast output) back onto an operand.
fn unbroadcast(g: &Tensor, src: &[usize], f: impl Fn(usize, f64) -> f64) -> Tensor {
    let idx = broadcast_index(g.shape(), src);
    let mut out = Tensor::zeros(src);
    let od = out.data_mut();
    for (o, (&i, &gv)) in idx.iter().zip(g.data()).enumerate() {
        od[i] += f(o, gv);
    }
    out
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let row = &b[p * n..(p + 1) * n];
            let dst = &mut out[i * n..(i + 1) * n];
            for (d, &bv) in dst.iter_mut().zip(row) {
                *d += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

fn require_rank(op: &'static str, t: &Tensor, rank: usize) -> Result<()> {
    if t.rank() != rank {
        return Err(Error::domain(
            op,
            format!("expected rank {rank}, got shape {:?}", t.shape()),
        ));
    }
    Ok(())
}

/// Channel layout of a `[N, C, ...]` tensor: (batch, channels, spatial size).
fn channel_layout(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize)> {
    if x.rank() < 2 {
        return Err(Error::domain(op, format!("need [N, C, ..], got {:?}", x.shape())));
    }
    let s = x.shape()[2..].iter().product();
    Ok((x.shape()[0], x.shape()[1], s))
}

struct BnCache {
    mean: Vec<f64>,
    inv_std: Vec<f64>,
}

fn bn_statistics(x: &Tensor, eps: f64, stats: &BatchStats) -> Result<BnCache> {
    let (n, c, s) = channel_layout("batchnorm", x)?;
    let d = x.data();
    let (mean, var) = match stats {
        BatchStats::Batch => {
            let m = (n * s) as f64;
            let mut mean = vec![0.0; c];
            let mut var = vec![0.0; c];
            for ch in 0..c {
                let mut acc = 0.0;
                for b in 0..n {
                    acc += d[(b * c + ch) * s..(b * c + ch + 1) * s].iter().sum::<f64>();
                }
                mean[ch] = acc / m;
                let mut sq = 0.0;
                for b in 0..n {
                    for v in &d[(b * c + ch) * s..(b * c + ch + 1) * s] {
                        sq += (v - mean[ch]) * (v - mean[ch]);
                    }
                }
                var[ch] = sq / m;
            }
            (mean, var)
        }
        BatchStats::Running { mean, var } => {
            if mean.len() != c || var.len() != c {
                return Err(Error::shape("batchnorm", &[c], &[mean.len()]));
            }
            (mean.to_vec(), var.to_vec())
        }
    };
    let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
    Ok(BnCache { mean, inv_std })
}

/// Per-channel biased mean and variance of a `[N, C, ...]` tensor.
pub fn channel_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let cache = bn_statistics(x, 0.0, &BatchStats::Batch)?;
    let var = cache.inv_std.iter().map(|s| 1.0 / (s * s)).collect();
    Ok((cache.mean, var))
}

fn conv_dims(op: &'static str, x: &Tensor) -> Result<(usize, usize, usize, usize)> {
    require_rank(op, x, 4)?;
    let s = x.shape();
    Ok((s[0], s[1], s[2], s[3]))
}

fn depthwise_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, c, h, wd) = conv_dims("depthwise_conv", x)?;
    require_rank("depthwise_conv", w, 3)?;
    let k = w.shape()[1];
    if w.shape()[0] != c || w.shape()[2] != k {
        return Err(Error::shape("depthwise_conv", x.shape(), w.shape()));
    }
    let pad = (k - 1) / 2;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * wd;
            let kern = &wdat[ch * k * k..(ch + 1) * k * k];
            for i in 0..h {
                for j in 0..wd {
                    let mut acc = 0.0;
                    for u in 0..k {
                        let si = i + u;
                        if si < pad || si - pad >= h {
                            continue;
                        }
                        for v in 0..k {
                            let sj = j + v;
                            if sj < pad || sj - pad >= wd {
                                continue;
                            }
                            acc += kern[u * k + v] * xd[base + (si - pad) * wd + sj - pad];
                        }
                    }
                    out[base + i * wd + j] = acc;
                }
            }
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

fn depthwise_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let s = x.shape();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let k = w.shape()[1];
    let pad = (k - 1) / 2;
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for b in 0..n {
        for ch in 0..c {
            let base = (b * c + ch) * h * wd;
            for i in 0..h {
                for j in 0..wd {
                    let go = gd[base + i * wd + j];
                    if go == 0.0 {
                        continue;
                    }
                    for u in 0..k {
                        let si = i + u;
                        if si < pad || si - pad >= h {
                            continue;
                        }
                        for v in 0..k {
                            let sj = j + v;
                            if sj < pad || sj - pad >= wd {
                                continue;
                            }
                            let xi = base + (si - pad) * wd + sj - pad;
                            let wi = ch * k * k + u * k + v;
                            gw[wi] += go * xd[xi];
                            gx[xi] += go * wdat[wi];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
    )
}

fn pointwise_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, c, h, wd) = conv_dims("pointwise_conv", x)?;
    require_rank("pointwise_conv", w, 2)?;
    if w.shape()[1] != c {
        return Err(Error::shape("pointwise_conv", x.shape(), w.shape()));
    }
    let co = w.shape()[0];
    let s = h * wd;
    let mut out = vec![0.0; n * co * s];
    for b in 0..n {
        let xb = &x.data()[b * c * s..(b + 1) * c * s];
        let prod = matmul_raw(w.data(), xb, co, c, s);
        out[b * co * s..(b + 1) * co * s].copy_from_slice(&prod);
    }
    Tensor::new(vec![n, co, h, wd], out)
}

fn pointwise_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let s = x.shape();
    let (n, c, sp) = (s[0], s[1], s[2] * s[3]);
    let co = w.shape()[0];
    let wt = transpose_raw(w.data(), co, c);
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for b in 0..n {
        let xb = &x.data()[b * c * sp..(b + 1) * c * sp];
        let gb = &g.data()[b * co * sp..(b + 1) * co * sp];
        let dx = matmul_raw(&wt, gb, c, co, sp);
        gx[b * c * sp..(b + 1) * c * sp].copy_from_slice(&dx);
        let xt = transpose_raw(xb, c, sp);
        let dw = matmul_raw(gb, &xt, co, sp, c);
        for (a, d) in gw.iter_mut().zip(dw) {
            *a += d;
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
    )
}

fn patch_forward(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (n, c, h, wd) = conv_dims("patch_conv", x)?;
    require_rank("patch_conv", w, 4)?;
    let (co, ci, p) = (w.shape()[0], w.shape()[1], w.shape()[2]);
    if ci != c || w.shape()[3] != p || p == 0 || h % p != 0 || wd % p != 0 {
        return Err(Error::shape("patch_conv", x.shape(), w.shape()));
    }
    let (ho, wo) = (h / p, wd / p);
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![0.0; n * co * ho * wo];
    for b in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let mut acc = 0.0;
                    for ch in 0..c {
                        for u in 0..p {
                            for v in 0..p {
                                acc += wdat[((o * c + ch) * p + u) * p + v]
                                    * xd[((b * c + ch) * h + i * p + u) * wd + j * p + v];
                            }
                        }
                    }
                    out[((b * co + o) * ho + i) * wo + j] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, ho, wo], out)
}

fn patch_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let s = x.shape();
    let (n, c, h, wd) = (s[0], s[1], s[2], s[3]);
    let (co, p) = (w.shape()[0], w.shape()[2]);
    let (ho, wo) = (h / p, wd / p);
    let (xd, wdat, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    for b in 0..n {
        for o in 0..co {
            for i in 0..ho {
                for j in 0..wo {
                    let go = gd[((b * co + o) * ho + i) * wo + j];
                    for ch in 0..c {
                        for u in 0..p {
                            for v in 0..p {
                                let wi = ((o * c + ch) * p + u) * p + v;
                                let xi = ((b * c + ch) * h + i * p + u) * wd + j * p + v;
                                gw[wi] += go * xd[xi];
                                gx[xi] += go * wdat[wi];
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(x.shape().to_vec(), gx).expect("shape"),
        Tensor::new(w.shape().to_vec(), gw).expect("shape"),
    )
}

/// Computes the value of `op` from the values of earlier nodes.
pub(crate) fn forward(op: &Op, values: &[Tensor]) -> Result<Tensor> {
    use Op::*;
    let v = |id: &NodeId| &values[id.0];
    let out = match op {
        Leaf => unreachable!("leaves carry their own value"),
        Add(a, b) => binary("add", v(a), v(b), |x, y| x + y)?,
        Sub(a, b) => binary("sub", v(a), v(b), |x, y| x - y)?,
        Mul(a, b) => binary("mul", v(a), v(b), |x, y| x * y)?,
        Div(a, b) => {
            if v(b).data().iter().any(|&d| d == 0.0) {
                return Err(Error::domain("div", "division by zero"));
            }
            binary("div", v(a), v(b), |x, y| x / y)?
        }
        Pow(a, b) => {
            if v(a).data().iter().any(|&d| d <= 0.0) {
                return Err(Error::domain("pow", "base must be positive"));
            }
            binary("pow", v(a), v(b), f64::powf)?
        }
        MatMul(a, b) => {
            let (a, b) = (v(a), v(b));
            if a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0] {
                return Err(Error::shape("matmul", a.shape(), b.shape()));
            }
            let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            Tensor::new(vec![m, n], matmul_raw(a.data(), b.data(), m, k, n))?
        }
        Transpose(a) => {
            let a = v(a);
            require_rank("transpose", a, 2)?;
            let (m, n) = (a.shape()[0], a.shape()[1]);
            Tensor::new(vec![n, m], transpose_raw(a.data(), m, n))?
        }
        Exp(a) => v(a).map(f64::exp),
        Log(a) => {
            if v(a).data().iter().any(|&d| d <= 0.0) {
                return Err(Error::domain("log", "argument must be positive"));
            }
            v(a).map(f64::ln)
        }
        PowScalar(a, p) => {
            let r = v(a).map(|x| x.powf(*p));
            if !r.all_finite() && v(a).all_finite() {
                return Err(Error::domain("pow", format!("undefined for exponent {p}")));
            }
            r
        }
        Scale(a, c) => v(a).map(|x| x * c),
        AddScalar(a, c) => v(a).map(|x| x + c),
        MaxScalar(a, c) => v(a).map(|x| x.max(*c)),
        Gelu(a) => v(a).map(gelu_scalar),
        Sum(a) => Tensor::scalar(v(a).sum()),
        Mean(a) => {
            let a = v(a);
            if a.is_empty() {
                return Err(Error::domain("mean", "empty tensor"));
            }
            Tensor::scalar(a.sum() / a.len() as f64)
        }
        SumAxis(a, axis) => {
            let a = v(a);
            if *axis >= a.rank() {
                return Err(Error::domain("sum_axis", format!("axis {axis} of {:?}", a.shape())));
            }
            let outer: usize = a.shape()[..*axis].iter().product();
            let len = a.shape()[*axis];
            let inner: usize = a.shape()[axis + 1..].iter().product();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for i in 0..inner {
                        out[o * inner + i] += a.data()[(o * len + l) * inner + i];
                    }
                }
            }
            let mut shape = a.shape().to_vec();
            shape.remove(*axis);
            Tensor::new(shape, out)?
        }
        Reshape(a, shape) => {
            let a = v(a);
            if shape.iter().product::<usize>() != a.len() {
                return Err(Error::shape("reshape", a.shape(), shape));
            }
            a.reshape(shape)?
        }
        LogSoftmax(a) => {
            let a = v(a);
            require_rank("log_softmax", a, 2)?;
            let mut out = Vec::with_capacity(a.len());
            for row in a.rows() {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + row.iter().map(|x| (x - m).exp()).sum::<f64>().ln();
                out.extend(row.iter().map(|x| x - lse));
            }
            Tensor::new(a.shape().to_vec(), out)?
        }
        BatchNorm {
            x,
            gamma,
            beta,
            eps,
            stats,
        } => {
            let (x, gm, bt) = (v(x), v(gamma), v(beta));
            let (n, c, s) = channel_layout("batchnorm", x)?;
            if gm.shape() != [c] || bt.shape() != [c] {
                return Err(Error::shape("batchnorm", x.shape(), gm.shape()));
            }
            let cache = bn_statistics(x, *eps, stats)?;
            let mut out = vec![0.0; x.len()];
            for b in 0..n {
                for ch in 0..c {
                    let (m, is) = (cache.mean[ch], cache.inv_std[ch]);
                    let (g, bb) = (gm.data()[ch], bt.data()[ch]);
                    let r = (b * c + ch) * s..(b * c + ch + 1) * s;
                    for (o, xv) in out[r.clone()].iter_mut().zip(&x.data()[r]) {
                        *o = g * (xv - m) * is + bb;
                    }
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        }
        Dropout { x, scale } => {
            let x = v(x);
            if scale.len() != x.len() {
                return Err(Error::shape("dropout", x.shape(), &[scale.len()]));
            }
            let data = x.data().iter().zip(scale.iter()).map(|(a, s)| a * s).collect();
            Tensor::new(x.shape().to_vec(), data)?
        }
        DepthwiseConv { x, w } => depthwise_forward(v(x), v(w))?,
        PointwiseConv { x, w } => pointwise_forward(v(x), v(w))?,
        PatchConv { x, w } => patch_forward(v(x), v(w))?,
    };
    Ok(out)
}

/// Gradients of `op`'s inputs given the upstream gradient `g` of its output.
/// The returned list is aligned with [`Op::inputs`].
pub(crate) fn backward(op: &Op, values: &[Tensor], out: &Tensor, g: &Tensor) -> Vec<Tensor> {
    use Op::*;
    let v = |id: &NodeId| &values[id.0];
    match op {
        Leaf => vec![],
        Add(a, b) => vec![
            unbroadcast(g, v(a).shape(), |_, gv| gv),
            unbroadcast(g, v(b).shape(), |_, gv| gv),
        ],
        Sub(a, b) => vec![
            unbroadcast(g, v(a).shape(), |_, gv| gv),
            unbroadcast(g, v(b).shape(), |_, gv| -gv),
        ],
        Mul(a, b) | Div(a, b) | Pow(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let ia = broadcast_index(g.shape(), ta.shape());
            let ib = broadcast_index(g.shape(), tb.shape());
            let (da, db, od) = (ta.data(), tb.data(), out.data());
            let (fa, fb): (Box<dyn Fn(usize, f64) -> f64>, Box<dyn Fn(usize, f64) -> f64>) =
                match op {
                    Mul(..) => (
                        Box::new(|o, gv| gv * db[ib[o]]),
                        Box::new(|o, gv| gv * da[ia[o]]),
                    ),
                    Div(..) => (
                        Box::new(|o, gv| gv / db[ib[o]]),
                        Box::new(|o, gv| -gv * da[ia[o]] / (db[ib[o]] * db[ib[o]])),
                    ),
                    _ => (
                        Box::new(|o, gv| gv * db[ib[o]] * da[ia[o]].powf(db[ib[o]] - 1.0)),
                        Box::new(|o, gv| gv * od[o] * da[ia[o]].ln()),
                    ),
                };
            vec![
                unbroadcast(g, ta.shape(), fa),
                unbroadcast(g, tb.shape(), fb),
            ]
        }
        MatMul(a, b) => {
            let (ta, tb) = (v(a), v(b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let bt = transpose_raw(tb.data(), k, n);
            let at = transpose_raw(ta.data(), m, k);
            vec![
                Tensor::new(vec![m, k], matmul_raw(g.data(), &bt, m, n, k)).expect("shape"),
                Tensor::new(vec![k, n], matmul_raw(&at, g.data(), k, m, n)).expect("shape"),
            ]
        }
        Transpose(a) => {
            let s = v(a).shape();
            vec![Tensor::new(s.to_vec(), transpose_raw(g.data(), s[1], s[0])).expect("shape")]
        }
        Exp(_) => vec![mul_elem(g, out)],
        Log(a) => vec![zip_map(g, v(a), |gv, x| gv / x)],
        PowScalar(a, p) => vec![zip_map(g, v(a), |gv, x| {
            if *p == 0.0 {
                0.0
            } else {
                gv * p * x.powf(p - 1.0)
            }
        })],
        Scale(_, c) => vec![g.map(|gv| gv * c)],
        AddScalar(..) | Reshape(..) => {
            let src = op.inputs()[0];
            vec![g.reshape(v(&src).shape()).expect("shape")]
        }
        // Exact ties route the gradient to the pass-through side.
        MaxScalar(a, c) => vec![zip_map(g, v(a), |gv, x| if x >= *c { gv } else { 0.0 })],
        Gelu(a) => vec![zip_map(g, v(a), |gv, x| gv * gelu_grad_scalar(x))],
        Sum(a) => vec![Tensor::full(v(a).shape(), g.data()[0])],
        Mean(a) => {
            let ta = v(a);
            vec![Tensor::full(ta.shape(), g.data()[0] / ta.len() as f64)]
        }
        SumAxis(a, axis) => {
            let ta = v(a);
            let outer: usize = ta.shape()[..*axis].iter().product();
            let len = ta.shape()[*axis];
            let inner: usize = ta.shape()[axis + 1..].iter().product();
            let mut gx = vec![0.0; ta.len()];
            for o in 0..outer {
                for l in 0..len {
                    gx[(o * len + l) * inner..(o * len + l + 1) * inner]
                        .copy_from_slice(&g.data()[o * inner..(o + 1) * inner]);
                }
            }
            vec![Tensor::new(ta.shape().to_vec(), gx).expect("shape")]
        }
        LogSoftmax(_) => {
            let cols = out.shape()[1];
            let mut gx = Vec::with_capacity(out.len());
            for (orow, grow) in out.data().chunks(cols).zip(g.data().chunks(cols)) {
                let gs: f64 = grow.iter().sum();
                gx.extend(orow.iter().zip(grow).map(|(o, gv)| gv - o.exp() * gs));
            }
            vec![Tensor::new(out.shape().to_vec(), gx).expect("shape")]
        }
        BatchNorm {
            x,
            gamma,
            eps,
            stats,
            ..
        } => {
            let tx = v(x);
            let gm = v(gamma).data();
            let s = tx.shape();
            let (n, c) = (s[0], s[1]);
            let sp: usize = s[2..].iter().product();
            let cache = bn_statistics(tx, *eps, stats).expect("validated in forward");
            let m = (n * sp) as f64;
            let mut gx = vec![0.0; tx.len()];
            let mut ggamma = vec![0.0; c];
            let mut gbeta = vec![0.0; c];
            for ch in 0..c {
                let (mu, is) = (cache.mean[ch], cache.inv_std[ch]);
                let (mut sg, mut sgx) = (0.0, 0.0);
                for b in 0..n {
                    let r = (b * c + ch) * sp..(b * c + ch + 1) * sp;
                    for (gv, xv) in g.data()[r.clone()].iter().zip(&tx.data()[r]) {
                        sg += gv;
                        sgx += gv * (xv - mu) * is;
                    }
                }
                ggamma[ch] = sgx;
                gbeta[ch] = sg;
                for b in 0..n {
                    let r = (b * c + ch) * sp..(b * c + ch + 1) * sp;
                    for i in r {
                        let gv = g.data()[i];
                        gx[i] = match stats {
                            BatchStats::Batch => {
                                let xh = (tx.data()[i] - mu) * is;
                                gm[ch] * is / m * (m * gv - sg - xh * sgx)
                            }
                            BatchStats::Running { .. } => gm[ch] * is * gv,
                        };
                    }
                }
            }
            vec![
                Tensor::new(s.to_vec(), gx).expect("shape"),
                Tensor::vector(ggamma),
                Tensor::vector(gbeta),
            ]
        }
        Dropout { scale, .. } => {
            let data = g.data().iter().zip(scale.iter()).map(|(a, s)| a * s).collect();
            vec![Tensor::new(g.shape().to_vec(), data).expect("shape")]
        }
        DepthwiseConv { x, w } => {
            let (gx, gw) = depthwise_backward(v(x), v(w), g);
            vec![gx, gw]
        }
        PointwiseConv { x, w } => {
            let (gx, gw) = pointwise_backward(v(x), v(w), g);
            vec![gx, gw]
        }
        PatchConv { x, w } => {
            let (gx, gw) = patch_backward(v(x), v(w), g);
            vec![gx, gw]
        }
    }
}

fn mul_elem(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(b.shape().to_vec(), data).expect("same length")
}
