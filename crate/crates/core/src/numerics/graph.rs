//! Reverse-mode automatic differentiation over a recorded tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op appends a node
//! holding its output value plus whatever it needs for the backward sweep.
//! Parameters are pulled in lazily from a borrowed [`ParamStore`]; after
//! [`Graph::backward`] their gradients are read back with
//! [`Graph::param_grads`].

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::numerics::gemm::gemm;
use crate::numerics::tensor::axis_split;
use crate::numerics::{ParamId, ParamStore, Tensor};

/// Rows whose L2 norm falls below this are treated as degenerate.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.cin * self.kh * self.kw
    }
    fn out_plane(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    GlobalAvgPool(Var),
    Relu(Var),
    Softmax(Var, usize),
    Log(Var),
    Exp(Var),
    Concat(Vec<Var>, usize),
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    L2Normalize {
        x: Var,
        axis: usize,
        norms: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        probs: Vec<f64>,
        scale: f64,
    },
    Sum(Var),
    SumAxis(Var, usize),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    LogSumExpMasked {
        x: Var,
        weights: Vec<f64>,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::Add(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
            Op::Concat(xs, _) => xs.clone(),
            Op::Scale(x, _)
            | Op::MaxPool { x, .. }
            | Op::GlobalAvgPool(x)
            | Op::Relu(x)
            | Op::Softmax(x, _)
            | Op::Log(x)
            | Op::Exp(x)
            | Op::Narrow { x, .. }
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::L2Normalize { x, .. }
            | Op::Sum(x)
            | Op::SumAxis(x, _)
            | Op::CrossEntropy { logits: x, .. }
            | Op::LogSumExpMasked { x, .. } => vec![*x],
        }
    }

    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Param => "param",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::MaxPool { .. } => "max_pool2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::Relu(_) => "relu",
            Op::Softmax(..) => "softmax",
            Op::Log(_) => "log",
            Op::Exp(_) => "exp",
            Op::Concat(..) => "concat",
            Op::Narrow { .. } => "narrow",
            Op::Reshape(_) => "reshape",
            Op::Permute(..) => "permute",
            Op::L2Normalize { .. } => "l2_normalize",
            Op::Attention { .. } => "attention",
            Op::Sum(_) => "sum",
            Op::SumAxis(..) => "sum_axis",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::LogSumExpMasked { .. } => "logsumexp_masked",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation. See the module docs.
pub struct Graph<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParamStore>,
    bound: Vec<Option<Var>>,
    track_params: bool,
    grads: Vec<Option<Vec<f64>>>,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph<'static> {
    /// A graph with no parameter store; inputs come in through [`Graph::leaf`].
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            bound: Vec::new(),
            track_params: false,
            grads: Vec::new(),
        }
    }
}

impl<'s> Graph<'s> {
    /// A graph reading parameters from `store`. With `track` off, parameters
    /// enter as constants and nothing is recorded for backward.
    pub fn with_params(store: &'s ParamStore, track: bool) -> Self {
        Graph {
            nodes: Vec::new(),
            store: Some(store),
            bound: vec![None; store.len()],
            track_params: track,
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Gradient of the last backward's loss with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copies `v`'s value into a new constant node, cutting the gradient path.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::invalid("param", "graph has no parameter store"))?;
        if id.0 >= self.bound.len() {
            return Err(Error::invalid("param", format!("unknown parameter {}", id.0)));
        }
        if let Some(v) = self.bound[id.0] {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param,
            needs_grad: self.track_params,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound[id.0] = Some(v);
        Ok(v)
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        let inputs = op.inputs();
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        if cfg!(debug_assertions)
            && !value.all_finite()
            && inputs.iter().all(|v| self.nodes[v.0].value.all_finite())
        {
            return Err(Error::invalid(op.name(), "non-finite output from finite inputs"));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn resolve_axis(&self, op: &'static str, v: Var, axis: isize) -> Result<usize> {
        let nd = self.shape(v).len() as isize;
        let a = if axis < 0 { nd + axis } else { axis };
        if a < 0 || a >= nd {
            return Err(Error::invalid(op, format!("axis {axis} out of range for {nd}-d tensor")));
        }
        Ok(a as usize)
    }

    // ----- elementwise -----------------------------------------------------

    /// `a + b`, where `b` may match a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(Error::shape("add", sa, sb));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        let nb = bd.len();
        for chunk in out.data_mut().chunks_mut(nb) {
            chunk.iter_mut().zip(bd).for_each(|(x, y)| *x += y);
        }
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0)?;
        self.add(a, nb)
    }

    /// `a ⊙ b`, with the same suffix broadcasting as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !is_suffix(sb, sa) {
            return Err(Error::shape("mul", sa, sb));
        }
        let bd = self.value(b).data();
        let mut out = self.value(a).clone();
        let nb = bd.len();
        for chunk in out.data_mut().chunks_mut(nb) {
            chunk.iter_mut().zip(bd).for_each(|(x, y)| *x *= y);
        }
        self.push(out, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x *= s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = x.max(0.0));
        self.push(out, Op::Relu(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = x.exp());
        self.push(out, Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|x| *x = x.ln());
        self.push(out, Op::Log(a))
    }

    // ----- linear algebra --------------------------------------------------

    /// `[M,K]·[K,N]`, or batched `[B,M,K]·[B,K,N]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) if k == k2 => (1, *m, *k, *n),
            ([b, m, k], [b2, k2, n]) if b == b2 && k == k2 => (*b, *m, *k, *n),
            _ => return Err(Error::shape("matmul", &sa, &sb)),
        };
        let mut out = vec![0.0; batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..],
                    false,
                    &bd[i * k * n..],
                    false,
                    &mut out[i * m * n..],
                    0.0,
                );
            }
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            },
        )
    }

    /// `x·w + b` for `x: [N, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add(y, b)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 2 {
            return Err(Error::invalid("transpose", "expects a 2-d tensor"));
        }
        self.permute(a, &[1, 0])
    }

    // ----- convolution and pooling ----------------------------------------

    /// 2-D cross-correlation. `x: [B,C,H,W]`, `w: [O,C,kh,kw]`, `b: [O]`.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        let ([batch, cin, h, wd], [cout, cin2, kh, kw]) = (sx.as_slice(), sw.as_slice()) else {
            return Err(Error::shape("conv2d", &sx, &sw));
        };
        if cin != cin2 || stride == 0 || h + 2 * pad < *kh || wd + 2 * pad < *kw {
            return Err(Error::shape("conv2d", &sx, &sw));
        }
        if let Some(b) = b {
            if self.shape(b) != [*cout] {
                return Err(Error::shape("conv2d", &sw, self.shape(b)));
            }
        }
        let geom = ConvGeom {
            batch: *batch,
            cin: *cin,
            h: *h,
            w: *wd,
            cout: *cout,
            kh: *kh,
            kw: *kw,
            stride,
            pad,
            ho: (h + 2 * pad - kh) / stride + 1,
            wo: (wd + 2 * pad - kw) / stride + 1,
        };
        let (patch, plane) = (geom.patch(), geom.out_plane());
        let mut cols = vec![0.0; geom.batch * patch * plane];
        let mut out = vec![0.0; geom.batch * geom.cout * plane];
        {
            let xd = self.value(x).data();
            let wdata = self.value(w).data();
            let bias = b.map(|b| self.value(b).data());
            for n in 0..geom.batch {
                let col = &mut cols[n * patch * plane..(n + 1) * patch * plane];
                im2col(&geom, &xd[n * geom.cin * geom.h * geom.w..], col);
                let o = &mut out[n * geom.cout * plane..(n + 1) * geom.cout * plane];
                if let Some(bias) = bias {
                    for (c, row) in o.chunks_mut(plane).enumerate() {
                        row.fill(bias[c]);
                    }
                }
                gemm(geom.cout, patch, plane, wdata, false, col, false, o, 1.0);
            }
        }
        let value = Tensor::new(vec![geom.batch, geom.cout, geom.ho, geom.wo], out)?;
        self.push(
            value,
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            },
        )
    }

    /// Max pooling with a square window. Ties go to the first maximal element
    /// in row-major window order.
    pub fn max_pool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, c, h, w] = s.as_slice() else {
            return Err(Error::invalid("max_pool2d", format!("expects 4-d input, got {s:?}")));
        };
        if kernel == 0 || stride == 0 || *h < kernel || *w < kernel {
            return Err(Error::invalid("max_pool2d", format!("window {kernel} does not fit {s:?}")));
        }
        let (ho, wo) = ((h - kernel) / stride + 1, (w - kernel) / stride + 1);
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(b * c * ho * wo);
        let mut argmax = Vec::with_capacity(b * c * ho * wo);
        for plane in 0..b * c {
            let base = plane * h * w;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_at = base + oy * stride * w + ox * stride;
                    for ky in 0..kernel {
                        for kx in 0..kernel {
                            let at = base + (oy * stride + ky) * w + ox * stride + kx;
                            if xd[at] > best {
                                best = xd[at];
                                best_at = at;
                            }
                        }
                    }
                    out.push(best);
                    argmax.push(best_at);
                }
            }
        }
        let value = Tensor::new(vec![*b, *c, ho, wo], out)?;
        self.push(value, Op::MaxPool { x, argmax })
    }

    /// `[B,C,H,W] -> [B,C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let [b, c, h, w] = s.as_slice() else {
            return Err(Error::invalid("global_avg_pool", format!("expects 4-d input, got {s:?}")));
        };
        let hw = h * w;
        let out: Vec<f64> = self
            .value(x)
            .data()
            .chunks(hw)
            .map(|p| p.iter().sum::<f64>() / hw as f64)
            .collect();
        self.push(Tensor::new(vec![*b, *c], out)?, Op::GlobalAvgPool(x))
    }

    // ----- reductions and normalisations ----------------------------------

    pub fn softmax(&mut self, x: Var, axis: isize) -> Result<Var> {
        let axis = self.resolve_axis("softmax", x, axis)?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let m = (0..n).map(|j| d[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for j in 0..n {
                    let e = (d[at(j)] - m).exp();
                    d[at(j)] = e;
                    z += e;
                }
                for j in 0..n {
                    d[at(j)] /= z;
                }
            }
        }
        self.push(out, Op::Softmax(x, axis))
    }

    /// Divides each slice along `axis` by its L2 norm. Slices with norm below
    /// [`NORM_EPS`] become zero and are reported by [`Graph::degenerate_rows`].
    pub fn l2_normalize(&mut self, x: Var, axis: isize) -> Result<Var> {
        let axis = self.resolve_axis("l2_normalize", x, axis)?;
        let (outer, n, inner) = axis_split(self.shape(x), axis);
        let mut out = self.value(x).clone();
        let d = out.data_mut();
        let mut norms = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * n * inner + j * inner + i;
                let norm = (0..n).map(|j| d[at(j)] * d[at(j)]).sum::<f64>().sqrt();
                for j in 0..n {
                    d[at(j)] = if norm < NORM_EPS { 0.0 } else { d[at(j)] / norm };
                }
                norms.push(norm);
            }
        }
        self.push(out, Op::L2Normalize { x, axis, norms })
    }

    /// Indices of slices that [`Graph::l2_normalize`] zeroed out.
    pub fn degenerate_rows(&self, v: Var) -> Vec<usize> {
        match &self.nodes[v.0].op {
            Op::L2Normalize { norms, .. } => norms
                .iter()
                .enumerate()
                .filter(|(_, n)| **n < NORM_EPS)
                .map(|(i, _)| i)
                .collect(),
            _ => Vec::new(),
        }
    }

    /// Fingerprint of every piecewise choice made so far: relu signs,
    /// max-pool winners and zeroed normalisation slices. Two evaluations with
    /// equal fingerprints lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(a) => self.value(*a).data().iter().for_each(|v| (*v > 0.0).hash(&mut h)),
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                Op::L2Normalize { norms, .. } => norms.iter().for_each(|n| (*n < NORM_EPS).hash(&mut h)),
                _ => {}
            }
        }
        h.finish()
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums over `axis`, removing it (a 1-d input yields shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: isize) -> Result<Var> {
        let axis = self.resolve_axis("sum_axis", x, axis)?;
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let src = &d[o * n * inner + j * inner..][..inner];
                out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(a, b)| *a += b);
            }
        }
        let mut new_shape: Vec<usize> = shape;
        new_shape.remove(axis);
        if new_shape.is_empty() {
            new_shape.push(1);
        }
        self.push(Tensor::new(new_shape, out)?, Op::SumAxis(x, axis))
    }

    /// Row-wise log-sum-exp over the last axis, skipping masked-out entries.
    /// `include` has one flag per element; every row needs at least one.
    pub fn logsumexp_masked(&mut self, x: Var, include: &[bool]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().unwrap();
        if include.len() != self.value(x).len() {
            return Err(Error::invalid(
                "logsumexp_masked",
                format!("mask has {} entries for shape {shape:?}", include.len()),
            ));
        }
        let d = self.value(x).data();
        let rows = d.len() / n;
        let mut out = Vec::with_capacity(rows);
        let mut weights = vec![0.0; d.len()];
        for r in 0..rows {
            let row = &d[r * n..(r + 1) * n];
            let mask = &include[r * n..(r + 1) * n];
            let (lse, w) = masked_lse(row, mask)
                .ok_or_else(|| Error::invalid("logsumexp_masked", format!("row {r} is fully masked")))?;
            weights[r * n..(r + 1) * n].copy_from_slice(&w);
            out.push(lse);
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(Tensor::new(out_shape, out)?, Op::LogSumExpMasked { x, weights })
    }

    /// Mean softmax cross-entropy of `logits: [B,K]` against class ids.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        let [b, k] = s.as_slice() else {
            return Err(Error::invalid("cross_entropy", format!("expects [B,K] logits, got {s:?}")));
        };
        if labels.len() != *b || labels.iter().any(|&y| y >= *k) {
            return Err(Error::invalid("cross_entropy", "labels do not match logits"));
        }
        let d = self.value(logits).data();
        let mut probs = vec![0.0; b * k];
        let mut total = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            let row = &d[i * k..(i + 1) * k];
            let (lse, w) = masked_lse(row, &vec![true; *k]).expect("non-empty row");
            total += lse - row[y];
            probs[i * k..(i + 1) * k].copy_from_slice(&w);
        }
        self.push(
            Tensor::scalar(total / *b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        )
    }

    // ----- shape manipulation ---------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        self.push(value, Op::Reshape(x))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::invalid("permute", format!("bad axes {axes:?} for {shape:?}")));
        }
        let out = permute_data(self.value(x).data(), &shape, axes);
        let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
        self.push(Tensor::new(new_shape, out)?, Op::Permute(x, axes.to_vec()))
    }

    pub fn concat(&mut self, xs: &[Var], axis: isize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::invalid("concat", "no inputs"))?;
        let axis = self.resolve_axis("concat", first, axis)?;
        let base = self.shape(first).to_vec();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != base.len()
                || s.iter().zip(&base).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let n = self.shape(v)[axis];
                out.extend_from_slice(&self.value(v).data()[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(Tensor::new(shape, out)?, Op::Concat(xs.to_vec(), axis))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: isize, start: usize, len: usize) -> Result<Var> {
        let axis = self.resolve_axis("narrow", x, axis)?;
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[axis] {
            return Err(Error::invalid(
                "narrow",
                format!("range {start}..{} exceeds axis {axis} of {shape:?}", start + len),
            ));
        }
        let (outer, n, inner) = axis_split(&shape, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&d[(o * n + start) * inner..(o * n + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        self.push(Tensor::new(new_shape, out)?, Op::Narrow { x, axis, start })
    }

    /// Inverse of [`Graph::concat`]: splits `x` into pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: isize, sizes: &[usize]) -> Result<Vec<Var>> {
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    // ----- attention -------------------------------------------------------

    /// Batched scaled dot-product attention over `[B, T, D]` inputs:
    /// `softmax(q·kᵀ / √D)·v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (sq, sk, sv) = (
            self.shape(q).to_vec(),
            self.shape(k).to_vec(),
            self.shape(v).to_vec(),
        );
        let ([b, t, d], true) = (sq.as_slice(), sq == sk && sq == sv) else {
            return Err(Error::shape("attention", &sq, if sq != sk { &sk } else { &sv }));
        };
        let (b, t, d) = (*b, *t, *d);
        let scale = 1.0 / (d as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut probs = vec![0.0; b * t * t];
        let mut out = vec![0.0; b * t * d];
        for n in 0..b {
            let (qn, kn, vn) = (&qd[n * t * d..], &kd[n * t * d..], &vd[n * t * d..]);
            let p = &mut probs[n * t * t..(n + 1) * t * t];
            gemm(t, d, t, qn, false, kn, true, p, 0.0);
            for row in p.chunks_mut(t) {
                let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for s in row.iter_mut() {
                    *s = ((*s - m) * scale).exp();
                    z += *s;
                }
                row.iter_mut().for_each(|s| *s /= z);
            }
            gemm(t, t, d, p, false, vn, false, &mut out[n * t * d..], 0.0);
        }
        let value = Tensor::new(vec![b, t, d], out)?;
        self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            },
        )
    }

    // ----- backward ----------------------------------------------------------

    /// Accumulates `∂loss/∂v` for every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let ls = self.value(loss);
        if !ls.is_scalar() {
            return Err(Error::NonScalarLoss(ls.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.needs_grad {
                self.backprop_node(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradients of all tracked parameters touched by the last backward.
    pub fn param_grads(&self) -> Vec<(ParamId, Vec<f64>)> {
        self.bound
            .iter()
            .enumerate()
            .filter_map(|(i, v)| {
                let v = (*v)?;
                let g = self.grad(v)?;
                Some((ParamId(i), g.to_vec()))
            })
            .collect()
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let needs = |v: Var| self.nodes[v.0].needs_grad;
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, contrib: Vec<f64>| accumulate(grads, v, contrib);
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                if needs(*a) {
                    acc(*a, g.to_vec());
                }
                if needs(*b) {
                    acc(*b, reduce_to_suffix(g, val(*b).len()));
                }
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (val(*a).data(), val(*b).data());
                let nb = bd.len();
                if needs(*a) {
                    let mut ga = g.to_vec();
                    for chunk in ga.chunks_mut(nb) {
                        chunk.iter_mut().zip(bd).for_each(|(x, y)| *x *= y);
                    }
                    acc(*a, ga);
                }
                if needs(*b) {
                    let prod: Vec<f64> = g.iter().zip(ad).map(|(x, y)| x * y).collect();
                    acc(*b, reduce_to_suffix(&prod, nb));
                }
            }
            Op::Scale(a, s) => acc(*a, g.iter().map(|x| x * s).collect()),
            Op::MatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
            } => {
                let (m, k, n) = (*m, *k, *n);
                if needs(*a) {
                    let bd = val(*b).data();
                    let mut ga = vec![0.0; batch * m * k];
                    for i in 0..*batch {
                        gemm(m, n, k, &g[i * m * n..], false, &bd[i * k * n..], true, &mut ga[i * m * k..], 0.0);
                    }
                    acc(*a, ga);
                }
                if needs(*b) {
                    let ad = val(*a).data();
                    let mut gb = vec![0.0; batch * k * n];
                    for i in 0..*batch {
                        gemm(k, m, n, &ad[i * m * k..], true, &g[i * m * n..], false, &mut gb[i * k * n..], 0.0);
                    }
                    acc(*b, gb);
                }
            }
            Op::Conv2d {
                x,
                w,
                b,
                geom,
                cols,
            } => {
                let (patch, plane) = (geom.patch(), geom.out_plane());
                if needs(*w) {
                    let mut gw = vec![0.0; geom.cout * patch];
                    for n in 0..geom.batch {
                        gemm(
                            geom.cout,
                            plane,
                            patch,
                            &g[n * geom.cout * plane..],
                            false,
                            &cols[n * patch * plane..],
                            true,
                            &mut gw,
                            1.0,
                        );
                    }
                    acc(*w, gw);
                }
                if let Some(b) = b.filter(|b| needs(*b)) {
                    let mut gb = vec![0.0; geom.cout];
                    for (i, row) in g.chunks(plane).enumerate() {
                        gb[i % geom.cout] += row.iter().sum::<f64>();
                    }
                    acc(b, gb);
                }
                if needs(*x) {
                    let wd = val(*w).data();
                    let img = geom.cin * geom.h * geom.w;
                    let mut gx = vec![0.0; geom.batch * img];
                    let mut dcol = vec![0.0; patch * plane];
                    for n in 0..geom.batch {
                        gemm(patch, geom.cout, plane, wd, true, &g[n * geom.cout * plane..], false, &mut dcol, 0.0);
                        col2im(geom, &dcol, &mut gx[n * img..(n + 1) * img]);
                    }
                    acc(*x, gx);
                }
            }
            Op::MaxPool { x, argmax } => {
                let mut gx = vec![0.0; val(*x).len()];
                for (gi, &at) in g.iter().zip(argmax) {
                    gx[at] += gi;
                }
                acc(*x, gx);
            }
            Op::GlobalAvgPool(x) => {
                let s = val(*x).shape();
                let hw = s[2] * s[3];
                let mut gx = Vec::with_capacity(val(*x).len());
                for gi in g {
                    gx.extend(std::iter::repeat_n(gi / hw as f64, hw));
                }
                acc(*x, gx);
            }
            Op::Relu(x) => {
                let xd = val(*x).data();
                acc(*x, g.iter().zip(xd).map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 }).collect());
            }
            Op::Exp(x) => {
                let y = node.value.data();
                acc(*x, g.iter().zip(y).map(|(a, b)| a * b).collect());
            }
            Op::Log(x) => {
                let xd = val(*x).data();
                acc(*x, g.iter().zip(xd).map(|(a, b)| a / b).collect());
            }
            Op::Softmax(x, axis) => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::L2Normalize { x, axis, norms } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let y = node.value.data();
                let mut gx = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let norm = norms[o * inner + i];
                        if norm < NORM_EPS {
                            continue;
                        }
                        let at = |j: usize| o * n * inner + j * inner + i;
                        let dot: f64 = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                        for j in 0..n {
                            gx[at(j)] = (g[at(j)] - y[at(j)] * dot) / norm;
                        }
                    }
                }
                acc(*x, gx);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; val(*x).len()]),
            Op::SumAxis(x, axis) => {
                let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
                let mut gx = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    for _ in 0..n {
                        gx.extend_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                acc(*x, gx);
            }
            Op::LogSumExpMasked { x, weights } => {
                let n = *val(*x).shape().last().unwrap();
                let gx = weights
                    .iter()
                    .enumerate()
                    .map(|(i, w)| w * g[i / n])
                    .collect();
                acc(*x, gx);
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let k = val(*logits).shape()[1];
                let scale = g[0] / labels.len() as f64;
                let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &y) in labels.iter().enumerate() {
                    gx[i * k + y] -= scale;
                }
                acc(*logits, gx);
            }
            Op::Reshape(x) => acc(*x, g.to_vec()),
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                acc(*x, permute_data(g, node.value.shape(), &inverse));
            }
            Op::Concat(xs, axis) => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &v in xs {
                    let n = val(v).shape()[*axis];
                    if needs(v) {
                        let mut gv = Vec::with_capacity(outer * n * inner);
                        for o in 0..outer {
                            let from = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[from..from + n * inner]);
                        }
                        acc(v, gv);
                    }
                    offset += n;
                }
            }
            Op::Narrow { x, axis, start } => {
                let (outer, n, inner) = axis_split(val(*x).shape(), *axis);
                let len = node.value.shape()[*axis];
                let mut gx = vec![0.0; val(*x).len()];
                for o in 0..outer {
                    let to = (o * n + start) * inner;
                    gx[to..to + len * inner].copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                acc(*x, gx);
            }
            Op::Attention {
                q,
                k,
                v,
                probs,
                scale,
            } => {
                let s = val(*q).shape();
                let (b, t, d) = (s[0], s[1], s[2]);
                let (qd, kd, vd) = (val(*q).data(), val(*k).data(), val(*v).data());
                let mut gq = vec![0.0; b * t * d];
                let mut gk = vec![0.0; b * t * d];
                let mut gv = vec![0.0; b * t * d];
                let mut dp = vec![0.0; t * t];
                for n in 0..b {
                    let off = n * t * d;
                    let p = &probs[n * t * t..(n + 1) * t * t];
                    let go = &g[off..off + t * d];
                    // dV = Pᵀ·dO
                    gemm(t, t, d, p, true, go, false, &mut gv[off..], 0.0);
                    // dP = dO·Vᵀ, then through the row softmax and the scale
                    gemm(t, d, t, go, false, &vd[off..], true, &mut dp, 0.0);
                    for (prow, drow) in p.chunks(t).zip(dp.chunks_mut(t)) {
                        let dot: f64 = prow.iter().zip(drow.iter()).map(|(a, b)| a * b).sum();
                        for (pi, di) in prow.iter().zip(drow.iter_mut()) {
                            *di = pi * (*di - dot) * scale;
                        }
                    }
                    gemm(t, t, d, &dp, false, &kd[off..], false, &mut gq[off..], 0.0);
                    gemm(t, t, d, &dp, true, &qd[off..], false, &mut gk[off..], 0.0);
                }
                if needs(*q) {
                    acc(*q, gq);
                }
                if needs(*k) {
                    acc(*k, gk);
                }
                if needs(*v) {
                    acc(*v, gv);
                }
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(contrib),
    }
}

fn is_suffix(suffix: &[usize], shape: &[usize]) -> bool {
    suffix.len() <= shape.len() && shape[shape.len() - suffix.len()..] == *suffix
}

fn reduce_to_suffix(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(a, b)| *a += b);
    }
    out
}

/// Stable log-sum-exp over the entries where `mask` is set, plus the
/// softmax weights of those entries (zero elsewhere). `None` if fully masked.
pub(crate) fn masked_lse(row: &[f64], mask: &[bool]) -> Option<(f64, Vec<f64>)> {
    let m = row
        .iter()
        .zip(mask)
        .filter(|(_, &keep)| keep)
        .map(|(x, _)| *x)
        .fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return None;
    }
    let mut w: Vec<f64> = row
        .iter()
        .zip(mask)
        .map(|(x, &keep)| if keep { (x - m).exp() } else { 0.0 })
        .collect();
    let z: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= z);
    Some((m + z.ln(), w))
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0; nd];
    let mut offset = 0;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..nd).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    out
}

fn im2col(g: &ConvGeom, x: &[f64], col: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let img = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    let line = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    if iy < 0 || iy >= g.h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &img[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for (ox, out) in line.iter_mut().enumerate() {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        *out = if ix < 0 || ix >= g.w as isize { 0.0 } else { src[ix as usize] };
                    }
                }
            }
        }
    }
}

fn col2im(g: &ConvGeom, col: &[f64], x: &mut [f64]) {
    let plane = g.out_plane();
    for c in 0..g.cin {
        let img = &mut x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.wo {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            img[iy as usize * g.w + ix as usize] += src[oy * g.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
