use std::cell::{Ref, RefCell};
use std::ops::Range;

use super::{gemm, Tensor};
use crate::error::{Result, WaveError};

const LAYERNORM_EPS: f64 = 1e-5;

type NodeId = usize;

/// Backward rule and saved forward state of one tape node.
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    ScaleBy {
        x: NodeId,
        s: NodeId,
        index: usize,
    },
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    Sum(NodeId),
    Mean(NodeId),
    RowSums(NodeId),
    NormalizeRows {
        x: NodeId,
        norms: Vec<f64>,
    },
    Concat {
        parts: Vec<NodeId>,
        axis: usize,
    },
    Slice {
        x: NodeId,
        axis: usize,
        start: usize,
    },
    GatherRows {
        x: NodeId,
        indices: Vec<usize>,
    },
    Transpose(NodeId),
    Reshape(NodeId),
    Rotary {
        x: NodeId,
        cos: Vec<f64>,
        sin: Vec<f64>,
        n_heads: usize,
        rotary_dim: usize,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segments: Vec<Range<usize>>,
        n_heads: usize,
        probs: Vec<f64>,
    },
}

struct Node {
    value: Tensor,
    requires_grad: bool,
    op: Op,
}

/// Arena recording every value created during one forward pass.
///
/// A tape is single-owner and single-threaded; build a fresh one per
/// forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: NodeId,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

fn dim_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> WaveError {
    WaveError::Dimension {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn erf_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact-erf GELU, `x·Φ(x)`.
pub(crate) fn gelu_scalar(x: f64) -> f64 {
    x * erf_cdf(x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, requires_grad: bool, op: Op) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn needs(&self, ids: &[NodeId]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].requires_grad)
    }

    /// Registers a differentiable input.
    pub fn leaf(&self, value: Tensor) -> Var<'_> {
        self.push(value, true, Op::Leaf)
    }

    /// Registers an input that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, false, Op::Leaf)
    }

    /// Concatenates 1-D tensors along axis 0, or matrices along axis 0 (rows)
    /// or axis 1 (columns).
    pub fn concat<'t>(&'t self, parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| WaveError::Argument("concat of zero tensors".into()))?;
        let ids: Vec<NodeId> = parts.iter().map(|p| p.id).collect();
        let value = {
            let nodes = self.nodes.borrow();
            let shape0 = nodes[first.id].value.shape().to_vec();
            match (shape0.len(), axis) {
                (1, 0) => {
                    let mut data = Vec::new();
                    for &i in &ids {
                        let v = &nodes[i].value;
                        if v.rank() != 1 {
                            return Err(dim_err("concat", &shape0, v.shape()));
                        }
                        data.extend_from_slice(v.data());
                    }
                    Tensor::from_vec(data)
                }
                (2, 0) => {
                    let cols = shape0[1];
                    let mut rows = 0;
                    let mut data = Vec::new();
                    for &i in &ids {
                        let v = &nodes[i].value;
                        let (m, n) = v.dims2()?;
                        if n != cols {
                            return Err(dim_err("concat", &shape0, v.shape()));
                        }
                        rows += m;
                        data.extend_from_slice(v.data());
                    }
                    Tensor::new(vec![rows, cols], data)?
                }
                (2, 1) => {
                    let rows = shape0[0];
                    let mut widths = Vec::with_capacity(ids.len());
                    for &i in &ids {
                        let v = &nodes[i].value;
                        let (m, n) = v.dims2()?;
                        if m != rows {
                            return Err(dim_err("concat", &shape0, v.shape()));
                        }
                        widths.push(n);
                    }
                    let total: usize = widths.iter().sum();
                    let mut data = Vec::with_capacity(rows * total);
                    for r in 0..rows {
                        for (&i, &w) in ids.iter().zip(&widths) {
                            data.extend_from_slice(&nodes[i].value.data()[r * w..(r + 1) * w]);
                        }
                    }
                    Tensor::new(vec![rows, total], data)?
                }
                _ => {
                    return Err(WaveError::Argument(format!(
                        "concat along axis {axis} of rank-{} tensors",
                        shape0.len()
                    )))
                }
            }
        };
        let rg = self.needs(&ids);
        Ok(self.push(value, rg, Op::Concat { parts: ids, axis }))
    }

    /// Rotary position rotation of every head's leading `rotary_dim`
    /// channels. `cos`/`sin` hold one angle per (token, channel pair), laid
    /// out `[tokens × rotary_dim/2]`; pair `m` rotates channels `2m, 2m+1`.
    pub fn rotary<'t>(
        &'t self,
        x: Var<'t>,
        cos: Vec<f64>,
        sin: Vec<f64>,
        n_heads: usize,
        rotary_dim: usize,
    ) -> Result<Var<'t>> {
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.id].value;
            let (t, d) = xv.dims2()?;
            if n_heads == 0 || d % n_heads != 0 || rotary_dim > d / n_heads || rotary_dim % 2 != 0 {
                return Err(WaveError::Argument(format!(
                    "rotary: width {d}, {n_heads} heads, rotary dim {rotary_dim}"
                )));
            }
            let pairs = rotary_dim / 2;
            if cos.len() != t * pairs || sin.len() != t * pairs {
                return Err(dim_err("rotary", &[t, pairs], &[cos.len()]));
            }
            let mut out = xv.data().to_vec();
            rotate(&mut out, &cos, &sin, t, d, n_heads, pairs, false);
            Tensor::new(vec![t, d], out)?
        };
        let rg = self.needs(&[x.id]);
        Ok(self.push(
            value,
            rg,
            Op::Rotary {
                x: x.id,
                cos,
                sin,
                n_heads,
                rotary_dim,
            },
        ))
    }

    /// Causal multi-head scaled dot-product attention over packed sequences.
    /// Each range in `segments` is one independent sequence of rows.
    pub fn attention<'t>(
        &'t self,
        q: Var<'t>,
        k: Var<'t>,
        v: Var<'t>,
        segments: Vec<Range<usize>>,
        n_heads: usize,
    ) -> Result<Var<'t>> {
        let (value, probs, t, d) = {
            let nodes = self.nodes.borrow();
            let (qv, kv, vv) = (&nodes[q.id].value, &nodes[k.id].value, &nodes[v.id].value);
            let (t, d) = qv.dims2()?;
            if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
                return Err(dim_err("attention", qv.shape(), kv.shape()));
            }
            if n_heads == 0 || d % n_heads != 0 {
                return Err(WaveError::Argument(format!(
                    "attention: width {d} not divisible by {n_heads} heads"
                )));
            }
            if segments.iter().any(|s| s.end > t || s.start > s.end) {
                return Err(WaveError::Argument("attention segment out of range".into()));
            }
            let (out, probs) =
                attention_forward(qv.data(), kv.data(), vv.data(), d, &segments, n_heads);
            (out, probs, t, d)
        };
        let rg = self.needs(&[q.id, k.id, v.id]);
        Ok(self.push(
            Tensor::new(vec![t, d], value)?,
            rg,
            Op::Attention {
                q: q.id,
                k: k.id,
                v: v.id,
                segments,
                n_heads,
                probs,
            },
        ))
    }

    /// Reverse-mode sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(WaveError::Argument(format!(
                "backward from non-scalar of shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            backward_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let shapes = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }
}

#[allow(clippy::too_many_arguments)]
fn rotate(
    buf: &mut [f64],
    cos: &[f64],
    sin: &[f64],
    t: usize,
    d: usize,
    n_heads: usize,
    pairs: usize,
    inverse: bool,
) {
    let dh = d / n_heads;
    let sign = if inverse { -1.0 } else { 1.0 };
    for tok in 0..t {
        for h in 0..n_heads {
            for m in 0..pairs {
                let c = cos[tok * pairs + m];
                let s = sign * sin[tok * pairs + m];
                let i0 = tok * d + h * dh + 2 * m;
                let (x0, x1) = (buf[i0], buf[i0 + 1]);
                buf[i0] = x0 * c - x1 * s;
                buf[i0 + 1] = x0 * s + x1 * c;
            }
        }
    }
}

fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    d: usize,
    segments: &[Range<usize>],
    n_heads: usize,
) -> (Vec<f64>, Vec<f64>) {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut probs = Vec::new();
    let mut row = Vec::new();
    for seg in segments {
        let s = seg.start;
        let n = seg.len();
        for h in 0..n_heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &q[(s + i) * d + off..(s + i) * d + off + dh];
                row.clear();
                let mut max = f64::NEG_INFINITY;
                for j in 0..=i {
                    let kj = &k[(s + j) * d + off..(s + j) * d + off + dh];
                    let score = scale * qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>();
                    max = max.max(score);
                    row.push(score);
                }
                let mut z = 0.0;
                for r in row.iter_mut() {
                    *r = (*r - max).exp();
                    z += *r;
                }
                let oi = (s + i) * d + off;
                for (j, r) in row.iter_mut().enumerate() {
                    *r /= z;
                    let vj = &v[(s + j) * d + off..(s + j) * d + off + dh];
                    for c in 0..dh {
                        out[oi + c] += *r * vj[c];
                    }
                }
                probs.extend_from_slice(&row);
            }
        }
    }
    (out, probs)
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], id: NodeId, g: Vec<f64>) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn backward_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |id: NodeId| &nodes[id].value;
    let rg = |id: NodeId| nodes[id].requires_grad;
    match &node.op {
        Op::Leaf => {}
        &Op::MatMul(a, b) => {
            let (m, k) = val(a).dims2().expect("matmul lhs");
            let n = val(b).shape()[1];
            if rg(a) {
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, val(b).data(), true, &mut ga, 0.0);
                accumulate(grads, nodes, a, ga);
            }
            if rg(b) {
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, val(a).data(), true, g, false, &mut gb, 0.0);
                accumulate(grads, nodes, b, gb);
            }
        }
        &Op::Add(a, b) => {
            accumulate(grads, nodes, a, g.to_vec());
            accumulate(grads, nodes, b, g.to_vec());
        }
        &Op::Sub(a, b) => {
            accumulate(grads, nodes, a, g.to_vec());
            accumulate(grads, nodes, b, g.iter().map(|x| -x).collect());
        }
        &Op::Mul(a, b) => {
            if rg(a) {
                let gb: Vec<f64> = g.iter().zip(val(b).data()).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, a, gb);
            }
            if rg(b) {
                let ga: Vec<f64> = g.iter().zip(val(a).data()).map(|(x, y)| x * y).collect();
                accumulate(grads, nodes, b, ga);
            }
        }
        &Op::AddRow(a, bias) => {
            accumulate(grads, nodes, a, g.to_vec());
            if rg(bias) {
                let n = val(bias).numel();
                let mut gb = vec![0.0; n];
                for row in g.chunks(n) {
                    gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                }
                accumulate(grads, nodes, bias, gb);
            }
        }
        &Op::Scale(a, f) => accumulate(grads, nodes, a, g.iter().map(|x| x * f).collect()),
        &Op::ScaleBy { x, s, index } => {
            let sv = val(s).data()[index];
            if rg(x) {
                accumulate(grads, nodes, x, g.iter().map(|v| v * sv).collect());
            }
            if rg(s) {
                let mut gs = vec![0.0; val(s).numel()];
                gs[index] = g.iter().zip(val(x).data()).map(|(a, b)| a * b).sum();
                accumulate(grads, nodes, s, gs);
            }
        }
        &Op::Gelu(a) => {
            let gx = g
                .iter()
                .zip(val(a).data())
                .map(|(gi, &x)| gi * (erf_cdf(x) + x * normal_pdf(x)))
                .collect();
            accumulate(grads, nodes, a, gx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let n = val(*gamma).numel();
            let gam = val(*gamma).data();
            if rg(*gamma) {
                let mut gg = vec![0.0; n];
                for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                    for j in 0..n {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
                accumulate(grads, nodes, *gamma, gg);
            }
            if rg(*beta) {
                let mut gb = vec![0.0; n];
                for grow in g.chunks(n) {
                    gb.iter_mut().zip(grow).for_each(|(s, x)| *s += x);
                }
                accumulate(grads, nodes, *beta, gb);
            }
            if rg(*x) {
                let mut gx = vec![0.0; g.len()];
                for (r, ((grow, hrow), out)) in
                    g.chunks(n).zip(xhat.chunks(n)).zip(gx.chunks_mut(n)).enumerate()
                {
                    let dxhat: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                    let mean_dh =
                        dxhat.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                    for j in 0..n {
                        out[j] = rstd[r] * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                    }
                }
                accumulate(grads, nodes, *x, gx);
            }
        }
        &Op::Softmax(a) => {
            let p = node.value.data();
            let n = *node.value.shape().last().unwrap_or(&1);
            let mut gx = vec![0.0; p.len()];
            for ((prow, grow), out) in p.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)) {
                let dot: f64 = prow.iter().zip(grow).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    out[j] = prow[j] * (grow[j] - dot);
                }
            }
            accumulate(grads, nodes, a, gx);
        }
        Op::SoftmaxCrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let rows = targets.len();
            let c = probs.len() / rows;
            let scale = g[0] / rows as f64;
            let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                gx[r * c + t] -= scale;
            }
            accumulate(grads, nodes, *logits, gx);
        }
        &Op::Sum(a) => accumulate(grads, nodes, a, vec![g[0]; val(a).numel()]),
        &Op::Mean(a) => {
            let n = val(a).numel();
            accumulate(grads, nodes, a, vec![g[0] / n as f64; n]);
        }
        &Op::RowSums(a) => {
            let (_, n) = val(a).dims2().expect("row_sums input");
            let gx = g.iter().flat_map(|&x| std::iter::repeat(x).take(n)).collect();
            accumulate(grads, nodes, a, gx);
        }
        Op::NormalizeRows { x, norms } => {
            let y = node.value.data();
            let n = y.len() / norms.len();
            let mut gx = vec![0.0; y.len()];
            for (r, ((yrow, grow), out)) in
                y.chunks(n).zip(g.chunks(n)).zip(gx.chunks_mut(n)).enumerate()
            {
                let dot: f64 = yrow.iter().zip(grow).map(|(a, b)| a * b).sum();
                for j in 0..n {
                    out[j] = (grow[j] - yrow[j] * dot) / norms[r];
                }
            }
            accumulate(grads, nodes, *x, gx);
        }
        Op::Concat { parts, axis } => match (node.value.rank(), axis) {
            (1, 0) | (2, 0) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).numel();
                    accumulate(grads, nodes, p, g[off..off + len].to_vec());
                    off += len;
                }
            }
            _ => {
                let rows = node.value.shape()[0];
                let total = node.value.shape()[1];
                let mut col = 0;
                for &p in parts {
                    let w = val(p).shape()[1];
                    if rg(p) {
                        let mut gp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            gp.extend_from_slice(&g[r * total + col..r * total + col + w]);
                        }
                        accumulate(grads, nodes, p, gp);
                    }
                    col += w;
                }
            }
        },
        &Op::Slice { x, axis, start } => {
            let xs = val(x).shape();
            let mut gx = vec![0.0; val(x).numel()];
            if axis == 0 {
                let inner: usize = xs[1..].iter().product();
                gx[start * inner..start * inner + g.len()].copy_from_slice(g);
            } else {
                let (rows, cols) = (xs[0], xs[1]);
                let w = node.value.shape()[1];
                for r in 0..rows {
                    gx[r * cols + start..r * cols + start + w]
                        .copy_from_slice(&g[r * w..(r + 1) * w]);
                }
            }
            accumulate(grads, nodes, x, gx);
        }
        Op::GatherRows { x, indices } => {
            let n = val(*x).shape()[1];
            let mut gx = vec![0.0; val(*x).numel()];
            for (r, &src) in indices.iter().enumerate() {
                gx[src * n..(src + 1) * n]
                    .iter_mut()
                    .zip(&g[r * n..(r + 1) * n])
                    .for_each(|(a, b)| *a += b);
            }
            accumulate(grads, nodes, *x, gx);
        }
        &Op::Transpose(a) => {
            let (m, n) = val(a).dims2().expect("transpose input");
            let mut gx = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    gx[i * n + j] = g[j * m + i];
                }
            }
            accumulate(grads, nodes, a, gx);
        }
        &Op::Reshape(a) => accumulate(grads, nodes, a, g.to_vec()),
        Op::Rotary {
            x,
            cos,
            sin,
            n_heads,
            rotary_dim,
        } => {
            let (t, d) = node.value.dims2().expect("rotary output");
            let mut gx = g.to_vec();
            rotate(&mut gx, cos, sin, t, d, *n_heads, rotary_dim / 2, true);
            accumulate(grads, nodes, *x, gx);
        }
        Op::Attention {
            q,
            k,
            v,
            segments,
            n_heads,
            probs,
        } => {
            let (qv, kv, vv) = (val(*q).data(), val(*k).data(), val(*v).data());
            let d = node.value.shape()[1];
            let dh = d / n_heads;
            let scale = 1.0 / (dh as f64).sqrt();
            let mut gq = vec![0.0; qv.len()];
            let mut gk = vec![0.0; kv.len()];
            let mut gv = vec![0.0; vv.len()];
            let mut pi = 0;
            let mut dp = Vec::new();
            for seg in segments {
                let s = seg.start;
                let n = seg.len();
                for h in 0..*n_heads {
                    let off = h * dh;
                    for i in 0..n {
                        let p = &probs[pi..pi + i + 1];
                        pi += i + 1;
                        let gi = &g[(s + i) * d + off..(s + i) * d + off + dh];
                        dp.clear();
                        for (j, &pij) in p.iter().enumerate() {
                            let base = (s + j) * d + off;
                            let vj = &vv[base..base + dh];
                            dp.push(gi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>());
                            for c in 0..dh {
                                gv[base + c] += pij * gi[c];
                            }
                        }
                        let dot: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                        let qbase = (s + i) * d + off;
                        for (j, &pij) in p.iter().enumerate() {
                            let ds = pij * (dp[j] - dot) * scale;
                            if ds == 0.0 {
                                continue;
                            }
                            let kbase = (s + j) * d + off;
                            for c in 0..dh {
                                gq[qbase + c] += ds * kv[kbase + c];
                                gk[kbase + c] += ds * qv[qbase + c];
                            }
                        }
                    }
                }
            }
            accumulate(grads, nodes, *q, gq);
            accumulate(grads, nodes, *k, gk);
            accumulate(grads, nodes, *v, gv);
        }
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`; all zeros when `var` is
    /// not on a path to the loss.
    pub fn get(&self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match &self.grads[var.id] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, var: Var<'_>) -> Tensor {
        let shape = self.shapes[var.id].clone();
        match self.grads[var.id].take() {
            Some(g) => Tensor::new(shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    /// Borrow of the forward value.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, rg, op)
    }

    fn binary(self, other: Var<'t>, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.tape.needs(&[self.id, other.id]);
        self.tape.push(value, rg, op)
    }

    fn zip_same(self, other: Var<'t>, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let a = self.value();
        let b = other.value();
        if a.shape() != b.shape() {
            return Err(dim_err(op, a.shape(), b.shape()));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(a.shape().to_vec(), data)
    }

    fn map(self, f: impl Fn(f64) -> f64) -> Tensor {
        let a = self.value();
        Tensor::new(a.shape().to_vec(), a.data().iter().map(|&x| f(x)).collect())
            .expect("same shape")
    }

    /// Matrix product `[m×k]·[k×n]`.
    pub fn matmul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = self.value().matmul(&rhs.value())?;
        Ok(self.binary(rhs, value, Op::MatMul(self.id, rhs.id)))
    }

    pub fn add(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_same(rhs, "add", |a, b| a + b)?;
        Ok(self.binary(rhs, value, Op::Add(self.id, rhs.id)))
    }

    pub fn sub(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_same(rhs, "sub", |a, b| a - b)?;
        Ok(self.binary(rhs, value, Op::Sub(self.id, rhs.id)))
    }

    /// Elementwise product.
    pub fn mul(self, rhs: Var<'t>) -> Result<Var<'t>> {
        let value = self.zip_same(rhs, "mul", |a, b| a * b)?;
        Ok(self.binary(rhs, value, Op::Mul(self.id, rhs.id)))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(self, bias: Var<'t>) -> Result<Var<'t>> {
        let value = {
            let a = self.value();
            let b = bias.value();
            let (_, n) = a.dims2()?;
            if b.numel() != n || b.rank() != 1 {
                return Err(dim_err("add_row", a.shape(), b.shape()));
            }
            let data = a
                .data()
                .chunks(n)
                .flat_map(|row| row.iter().zip(b.data()).map(|(x, y)| x + y))
                .collect();
            Tensor::new(a.shape().to_vec(), data)?
        };
        Ok(self.binary(bias, value, Op::AddRow(self.id, bias.id)))
    }

    pub fn scale(self, factor: f64) -> Var<'t> {
        let value = self.map(|x| x * factor);
        self.unary(value, Op::Scale(self.id, factor))
    }

    /// Multiplies every element by the single entry `s[index]`.
    pub fn scale_by(self, s: Var<'t>, index: usize) -> Result<Var<'t>> {
        let sv = {
            let sval = s.value();
            *sval.data().get(index).ok_or_else(|| {
                WaveError::Argument(format!("scale_by index {index} of {:?}", sval.shape()))
            })?
        };
        let value = self.map(|x| x * sv);
        Ok(self.binary(
            s,
            value,
            Op::ScaleBy {
                x: self.id,
                s: s.id,
                index,
            },
        ))
    }

    /// Exact-erf GELU.
    pub fn gelu(self) -> Var<'t> {
        let value = self.map(gelu_scalar);
        self.unary(value, Op::Gelu(self.id))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` (length `n`).
    pub fn layer_norm(self, gamma: Var<'t>, beta: Var<'t>) -> Result<Var<'t>> {
        let (value, xhat, rstd) = {
            let x = self.value();
            let (_, n) = x.dims2()?;
            let (gv, bv) = (gamma.value(), beta.value());
            if gv.numel() != n || bv.numel() != n {
                return Err(dim_err("layer_norm", x.shape(), gv.shape()));
            }
            let mut out = Vec::with_capacity(x.numel());
            let mut xhat = Vec::with_capacity(x.numel());
            let mut rstd = Vec::new();
            for row in x.data().chunks(n) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
                let r = 1.0 / (var + LAYERNORM_EPS).sqrt();
                rstd.push(r);
                for j in 0..n {
                    let h = (row[j] - mean) * r;
                    xhat.push(h);
                    out.push(h * gv.data()[j] + bv.data()[j]);
                }
            }
            (Tensor::new(x.shape().to_vec(), out)?, xhat, rstd)
        };
        let rg = self.tape.needs(&[self.id, gamma.id, beta.id]);
        Ok(self.tape.push(
            value,
            rg,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                xhat,
                rstd,
            },
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(self) -> Var<'t> {
        let value = {
            let x = self.value();
            let n = *x.shape().last().unwrap_or(&1);
            let mut out = Vec::with_capacity(x.numel());
            for row in x.data().chunks(n.max(1)) {
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = exps.iter().sum();
                out.extend(exps.into_iter().map(|e| e / z));
            }
            Tensor::new(x.shape().to_vec(), out).expect("same shape")
        };
        self.unary(value, Op::Softmax(self.id))
    }

    /// Mean over rows of `-log softmax(row)[target]`, via log-sum-exp.
    pub fn softmax_cross_entropy(self, targets: &[usize]) -> Result<Var<'t>> {
        let (loss, probs) = {
            let x = self.value();
            let (m, c) = x.dims2()?;
            if targets.len() != m {
                return Err(dim_err("softmax_cross_entropy", x.shape(), &[targets.len()]));
            }
            if m == 0 {
                return Err(WaveError::EmptyBatch);
            }
            let mut probs = Vec::with_capacity(m * c);
            let mut total = 0.0;
            for (row, &t) in x.data().chunks(c).zip(targets) {
                if t >= c {
                    return Err(WaveError::Argument(format!(
                        "target index {t} out of range for {c} classes"
                    )));
                }
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
                let lse = max + z.ln();
                total += lse - row[t];
                probs.extend(row.iter().map(|v| (v - lse).exp()));
            }
            (total / m as f64, probs)
        };
        Ok(self.unary(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: self.id,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    pub fn sum(self) -> Var<'t> {
        let s = self.value().data().iter().sum();
        self.unary(Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let m = {
            let v = self.value();
            v.data().iter().sum::<f64>() / v.numel() as f64
        };
        self.unary(Tensor::scalar(m), Op::Mean(self.id))
    }

    /// Sums each row of a matrix into a vector of length `m`.
    pub fn row_sums(self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let (_, n) = x.dims2()?;
            Tensor::from_vec(x.data().chunks(n.max(1)).map(|r| r.iter().sum()).collect())
        };
        Ok(self.unary(value, Op::RowSums(self.id)))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(self) -> Result<Var<'t>> {
        let (value, norms) = {
            let x = self.value();
            let (_, n) = x.dims2()?;
            let mut out = Vec::with_capacity(x.numel());
            let mut norms = Vec::new();
            for (r, row) in x.data().chunks(n).enumerate() {
                let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                if norm == 0.0 {
                    return Err(WaveError::Degenerate(format!("row {r} has norm {norm}")));
                }
                norms.push(norm);
                out.extend(row.iter().map(|v| v / norm));
            }
            (Tensor::new(x.shape().to_vec(), out)?, norms)
        };
        Ok(self.unary(value, Op::NormalizeRows { x: self.id, norms }))
    }

    /// `len` entries starting at `start` along `axis` (0 or 1).
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let shape = x.shape();
            if axis >= shape.len() || axis > 1 || start + len > shape[axis] {
                return Err(dim_err("slice", shape, &[axis, start, len]));
            }
            if axis == 0 {
                let inner: usize = shape[1..].iter().product();
                let mut s = shape.to_vec();
                s[0] = len;
                Tensor::new(s, x.data()[start * inner..(start + len) * inner].to_vec())?
            } else {
                let (rows, cols) = (shape[0], shape[1]);
                let mut data = Vec::with_capacity(rows * len);
                for r in 0..rows {
                    data.extend_from_slice(&x.data()[r * cols + start..r * cols + start + len]);
                }
                Tensor::new(vec![rows, len], data)?
            }
        };
        Ok(self.unary(
            value,
            Op::Slice {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Selects (possibly repeated) rows of a matrix.
    pub fn gather_rows(self, indices: &[usize]) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let (m, n) = x.dims2()?;
            let mut data = Vec::with_capacity(indices.len() * n);
            for &i in indices {
                if i >= m {
                    return Err(WaveError::Argument(format!("row {i} of {m}-row matrix")));
                }
                data.extend_from_slice(x.row(i));
            }
            Tensor::new(vec![indices.len(), n], data)?
        };
        Ok(self.unary(
            value,
            Op::GatherRows {
                x: self.id,
                indices: indices.to_vec(),
            },
        ))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            let (m, n) = x.dims2()?;
            let mut data = vec![0.0; m * n];
            for i in 0..m {
                for j in 0..n {
                    data[j * m + i] = x.data()[i * n + j];
                }
            }
            Tensor::new(vec![n, m], data)?
        };
        Ok(self.unary(value, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.value().clone().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }
}
