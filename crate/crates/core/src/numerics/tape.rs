//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its output value and the recipe for
//! its vector-Jacobian product. Nodes are appended after their inputs, so the
//! tape order is a topological order and [`GradTape::backward`] is one reverse
//! sweep. Leaves created with [`GradTape::constant`] never receive gradients,
//! and nodes whose inputs are all constant are skipped during the sweep.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use super::kernels::{self, gemm, matmul_dims, MatRef};
use super::math;
use super::tensor::{self, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`GradTape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBroadcast {
        x: Var,
        b: Var,
    },
    MulBroadcast {
        x: Var,
        b: Var,
    },
    Scale(Var, f64),
    AddScalar(Var),
    Abs(Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Maximum(Var, Var),
    Minimum(Var, Var),
    Softmax(Var),
    LogSoftmax(Var),
    MaskedSoftmax {
        x: Var,
        mask: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Select {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    StraightThrough {
        soft: Var,
    },
    SymNormAdjacency {
        e: Var,
        self_loop_degree: bool,
    },
    Im2Col3x3 {
        x: Var,
        h: usize,
        w: usize,
    },
    FocalLoss {
        logits: Var,
        target: Tensor,
        alpha: f64,
        beta: f64,
    },
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Recorded computation graph with per-node values.
#[derive(Clone, Debug, Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar output with respect to the tape's trainable leaves.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    visited: usize,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Number of nodes whose adjoint was propagated.
    pub fn visited(&self) -> usize {
        self.visited
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn masked_softmax_row(x: &[f64], m: &[f64], out: &mut [f64], e: &mut [f64]) -> f64 {
    let max = x
        .iter()
        .zip(m)
        .filter(|(_, &mv)| mv != 0.0)
        .map(|(&xv, _)| xv)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        out.iter_mut().for_each(|o| *o = 0.0);
        return 0.0;
    }
    let mut s = 0.0;
    for j in 0..x.len() {
        e[j] = math::exp((x[j] - max).min(50.0));
        s += m[j] * e[j];
    }
    for j in 0..x.len() {
        out[j] = m[j] * e[j] / s;
    }
    s
}

fn sym_norm_forward(e: &[f64], n: usize, self_loop_degree: bool) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut d = vec![0.0; n];
    for i in 0..n {
        let mut s: f64 = e[i * n..(i + 1) * n].iter().sum();
        if self_loop_degree {
            s += 1.0;
        }
        if s <= 0.0 {
            return Err(Error::Degenerate(format!(
                "node {i} has zero degree; the literal degree matrix is singular"
            )));
        }
        d[i] = 1.0 / math::sqrt(s);
    }
    let mut out = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            let hat = e[i * n + j] + if i == j { 1.0 } else { 0.0 };
            out[i * n + j] = d[i] * hat * d[j];
        }
    }
    Ok((out, d))
}

impl GradTape {
    pub fn new() -> Self {
        Self::default()
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

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, parents: &[Var]) -> Result<Var> {
        check_finite(name, &data)?;
        Ok(self.push(Tensor::from_parts(shape, data), op, parents))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is reported by [`GradTape::backward`].
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.constant(Tensor::scalar(v))
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a @ b^T` over the last two axes.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let d = matmul_dims(self.shape(a), self.shape(b), trans_b)?;
        let out = kernels::matmul_raw(self.value(a).data(), self.value(b).data(), &d, trans_b);
        self.push_checked("matmul", d.out_shape, out, Op::MatMul { a, b, trans_b }, &[a, b])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x).permute(perm)?;
        Ok(self.push(t, Op::Permute { x, perm: perm.to_vec() }, &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let n = self.shape(x).len();
        if n < 2 {
            return Err(Error::shape("transpose", "needs at least two axes"));
        }
        let mut perm: Vec<usize> = (0..n).collect();
        perm.swap(n - 2, n - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    // ----- elementwise ----------------------------------------------------

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push_checked(name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("maximum", a, b, f64::max, Op::Maximum(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("minimum", a, b, f64::min, Op::Minimum(a, b))
    }

    fn check_suffix(&self, name: &'static str, x: Var, b: Var) -> Result<()> {
        let xs = self.shape(x);
        let bs = self.shape(b);
        if bs.len() > xs.len() || xs[xs.len() - bs.len()..] != *bs {
            return Err(Error::shape(name, format!("{bs:?} is not a suffix of {xs:?}")));
        }
        Ok(())
    }

    /// `x + b` where `b`'s shape is a trailing suffix of `x`'s shape.
    pub fn add_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_suffix("add_broadcast", x, b)?;
        let bd = self.value(b).data();
        let n = bd.len();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(bd).for_each(|(v, bv)| *v += bv);
        }
        let shape = self.shape(x).to_vec();
        self.push_checked("add_broadcast", shape, data, Op::AddBroadcast { x, b }, &[x, b])
    }

    /// `x * b` where `b`'s shape is a trailing suffix of `x`'s shape.
    pub fn mul_broadcast(&mut self, x: Var, b: Var) -> Result<Var> {
        self.check_suffix("mul_broadcast", x, b)?;
        let bd = self.value(b).data();
        let n = bd.len();
        let mut data = self.value(x).data().to_vec();
        for chunk in data.chunks_mut(n) {
            chunk.iter_mut().zip(bd).for_each(|(v, bv)| *v *= bv);
        }
        let shape = self.shape(x).to_vec();
        self.push_checked("mul_broadcast", shape, data, Op::MulBroadcast { x, b }, &[x, b])
    }

    fn unary(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push_checked(name, shape, data, op, &[x])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("scale", x, |v| v * c, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", x, |v| v + c, Op::AddScalar(x))
    }

    pub fn abs(&mut self, x: Var) -> Result<Var> {
        self.unary("abs", x, f64::abs, Op::Abs(x))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary("relu", x, |v| v.max(0.0), Op::Relu(x))
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.unary("gelu", x, kernels::gelu_scalar, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary("sigmoid", x, math::sigmoid, Op::Sigmoid(x))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary("exp", x, math::exp, Op::Exp(x))
    }

    pub fn ln(&mut self, x: Var) -> Result<Var> {
        self.unary("ln", x, math::ln, Op::Ln(x))
    }

    // ----- normalizations -------------------------------------------------

    fn last_dim(&self, name: &'static str, x: Var) -> Result<usize> {
        self.shape(x)
            .last()
            .copied()
            .ok_or_else(|| Error::shape(name, "scalar input"))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.last_dim("softmax", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (s, d) in src.chunks(n).zip(out.chunks_mut(n)) {
            kernels::softmax_row(s, d);
        }
        let shape = self.shape(x).to_vec();
        self.push_checked("softmax", shape, out, Op::Softmax(x), &[x])
    }

    /// Log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let n = self.last_dim("log_softmax", x)?;
        let src = self.value(x).data();
        let mut out = vec![0.0; src.len()];
        for (s, d) in src.chunks(n).zip(out.chunks_mut(n)) {
            kernels::log_softmax_row(s, d);
        }
        let shape = self.shape(x).to_vec();
        self.push_checked("log_softmax", shape, out, Op::LogSoftmax(x), &[x])
    }

    /// Softmax over the last axis with multiplicative key weights:
    /// `w_j = m_j e^{x_j} / sum_k m_k e^{x_k}`. A zero weight removes the key
    /// exactly; rows with no live key produce zeros. `mask` has the shape of a
    /// trailing suffix of `x`.
    pub fn masked_softmax(&mut self, x: Var, mask: Var) -> Result<Var> {
        self.check_suffix("masked_softmax", x, mask)?;
        let n = self.last_dim("masked_softmax", x)?;
        let src = self.value(x).data();
        let m = self.value(mask).data();
        let mut out = vec![0.0; src.len()];
        let mut e = vec![0.0; n];
        for (r, (s, d)) in src.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let mo = (r * n) % m.len();
            masked_softmax_row(s, &m[mo..mo + n], d, &mut e);
        }
        let shape = self.shape(x).to_vec();
        self.push_checked("masked_softmax", shape, out, Op::MaskedSoftmax { x, mask }, &[x, mask])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = self.last_dim("layer_norm", x)?;
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", format!("affine params for width {n}")));
        }
        let (y, xhat, rstd) = kernels::layer_norm_raw(
            self.value(x).data(),
            n,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let shape = self.shape(x).to_vec();
        self.push_checked(
            "layer_norm",
            shape,
            y,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    // ----- indexing and reductions ---------------------------------------

    pub fn select(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let t = self.value(x).select(axis, indices)?;
        Ok(self.push(
            t,
            Op::Select {
                x,
                axis,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.select(x, axis, &idx)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor> = parts.iter().map(|p| self.value(*p)).collect();
        let t = Tensor::concat(&values, axis)?;
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape("mean_axis", format!("axis {axis} of {shape:?}")));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let ext = shape[axis];
        let src = self.value(x).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..ext {
                let base = (o * ext + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] += src[base + i];
                }
            }
        }
        let inv = 1.0 / ext as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push_checked("mean_axis", out_shape, out, Op::MeanAxis { x, axis }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push_checked("sum", vec![1], vec![s], Op::SumAll(x), &[x])
    }

    // ----- model-specific fused ops --------------------------------------

    /// Forward value `hard`, gradient routed to `soft` unchanged.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Result<Var> {
        if hard.shape() != self.shape(soft) {
            return Err(Error::shape(
                "straight_through",
                format!("{:?} vs {:?}", hard.shape(), self.shape(soft)),
            ));
        }
        check_finite("straight_through", hard.data())?;
        Ok(self.push(hard, Op::StraightThrough { soft }, &[soft]))
    }

    /// `D^-1/2 (E + I) D^-1/2` for a square `E`. With `self_loop_degree` the
    /// degrees come from `E + I`; otherwise from `E` alone, which fails on
    /// isolated nodes.
    pub fn sym_norm_adjacency(&mut self, e: Var, self_loop_degree: bool) -> Result<Var> {
        let shape = self.shape(e).to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::shape("sym_norm_adjacency", format!("{shape:?} is not square")));
        }
        let (out, _) = sym_norm_forward(self.value(e).data(), shape[0], self_loop_degree)?;
        self.push_checked(
            "sym_norm_adjacency",
            shape,
            out,
            Op::SymNormAdjacency { e, self_loop_degree },
            &[e],
        )
    }

    /// Unfolds 3x3 zero-padded neighbourhoods of an `h x w` token grid
    /// `[h*w, c]` into `[h*w, 9c]`, ordered (dy, dx, channel).
    pub fn im2col3x3(&mut self, x: Var, h: usize, w: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != h * w {
            return Err(Error::shape("im2col3x3", format!("{shape:?} for grid {h}x{w}")));
        }
        let c = shape[1];
        let src = self.value(x).data();
        let mut out = vec![0.0; h * w * 9 * c];
        for py in 0..h {
            for px in 0..w {
                let row = &mut out[(py * w + px) * 9 * c..(py * w + px + 1) * 9 * c];
                for dy in 0..3 {
                    for dx in 0..3 {
                        let (sy, sx) = (py + dy, px + dx);
                        if sy == 0 || sx == 0 || sy > h || sx > w {
                            continue;
                        }
                        let s = ((sy - 1) * w + (sx - 1)) * c;
                        let d = (dy * 3 + dx) * c;
                        row[d..d + c].copy_from_slice(&src[s..s + c]);
                    }
                }
            }
        }
        self.push_checked("im2col3x3", vec![h * w, 9 * c], out, Op::Im2Col3x3 { x, h, w }, &[x])
    }

    /// Penalty-reduced focal loss on sigmoid logits against a heatmap target
    /// in `[0, 1]`; cells equal to 1 are positives. Normalized by the
    /// positive count (at least 1).
    pub fn focal_loss(&mut self, logits: Var, target: &Tensor, alpha: f64, beta: f64) -> Result<Var> {
        if target.shape() != self.shape(logits) {
            return Err(Error::shape(
                "focal_loss",
                format!("{:?} vs {:?}", target.shape(), self.shape(logits)),
            ));
        }
        let x = self.value(logits).data();
        let mut total = 0.0;
        let mut n_pos = 0usize;
        for (&xv, &y) in x.iter().zip(target.data()) {
            let p = math::sigmoid(xv);
            if y >= 1.0 {
                n_pos += 1;
                total += math::pow(1.0 - p, alpha) * math::softplus(-xv);
            } else {
                total += math::pow(1.0 - y, beta) * math::pow(p, alpha) * math::softplus(xv);
            }
        }
        let loss = total / n_pos.max(1) as f64;
        self.push_checked(
            "focal_loss",
            vec![1],
            vec![loss],
            Op::FocalLoss {
                logits,
                target: target.clone(),
                alpha,
                beta,
            },
            &[logits],
        )
    }

    // ----- reverse sweep --------------------------------------------------

    /// Gradients of the scalar `output` with respect to every variable leaf.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out_node = &self.nodes[output.0];
        if out_node.value.len() != 1 {
            return Err(Error::NonScalar(out_node.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(vec![1.0]);
        let mut visited = 0;
        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            visited += 1;
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { grads, visited })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => self.matmul_backward(*a, *b, *trans_b, g, grads),
            Op::Permute { x, perm } => {
                if let Some(buf) = self.acc(grads, *x) {
                    let mut inv = vec![0; perm.len()];
                    for (o, &p) in perm.iter().enumerate() {
                        inv[p] = o;
                    }
                    let gt = tensor::permute_data(node.value.shape(), g, &inv);
                    add_into(buf, gt.data());
                }
            }
            Op::Reshape(x) | Op::AddScalar(x) | Op::StraightThrough { soft: x } => {
                if let Some(buf) = self.acc(grads, *x) {
                    add_into(buf, g);
                }
            }
            Op::Add(a, b) => {
                if let Some(buf) = self.acc(grads, *a) {
                    add_into(buf, g);
                }
                if let Some(buf) = self.acc(grads, *b) {
                    add_into(buf, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(buf) = self.acc(grads, *a) {
                    add_into(buf, g);
                }
                if let Some(buf) = self.acc(grads, *b) {
                    buf.iter_mut().zip(g).for_each(|(d, gv)| *d -= gv);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(buf) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        buf[k] += g[k] * bv[k];
                    }
                }
                if let Some(buf) = self.acc(grads, *b) {
                    for k in 0..g.len() {
                        buf[k] += g[k] * av[k];
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(buf) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        buf[k] += g[k] / bv[k];
                    }
                }
                if let Some(buf) = self.acc(grads, *b) {
                    for k in 0..g.len() {
                        buf[k] -= g[k] * av[k] / (bv[k] * bv[k]);
                    }
                }
            }
            Op::AddBroadcast { x, b } => {
                if let Some(buf) = self.acc(grads, *x) {
                    add_into(buf, g);
                }
                if let Some(buf) = self.acc(grads, *b) {
                    let n = buf.len();
                    for chunk in g.chunks(n) {
                        add_into(buf, chunk);
                    }
                }
            }
            Op::MulBroadcast { x, b } => {
                let (xv, bv) = (self.value(*x).data(), self.value(*b).data());
                let n = bv.len();
                if let Some(buf) = self.acc(grads, *x) {
                    for k in 0..g.len() {
                        buf[k] += g[k] * bv[k % n];
                    }
                }
                if let Some(buf) = self.acc(grads, *b) {
                    for k in 0..g.len() {
                        buf[k % n] += g[k] * xv[k];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(buf) = self.acc(grads, *x) {
                    buf.iter_mut().zip(g).for_each(|(d, gv)| *d += c * gv);
                }
            }
            Op::Abs(x) => self.pointwise(*x, g, grads, |xv, _| {
                if xv > 0.0 {
                    1.0
                } else if xv < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }),
            Op::Relu(x) => self.pointwise(*x, g, grads, |xv, _| if xv > 0.0 { 1.0 } else { 0.0 }),
            Op::Gelu(x) => self.pointwise(*x, g, grads, |xv, _| kernels::gelu_grad_scalar(xv)),
            Op::Sigmoid(x) => self.pointwise_y(*x, y, g, grads, |yv| yv * (1.0 - yv)),
            Op::Exp(x) => self.pointwise_y(*x, y, g, grads, |yv| yv),
            Op::Ln(x) => self.pointwise(*x, g, grads, |xv, _| 1.0 / xv),
            Op::Maximum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(buf) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        if av[k] >= bv[k] {
                            buf[k] += g[k];
                        }
                    }
                }
                if let Some(buf) = self.acc(grads, *b) {
                    for k in 0..g.len() {
                        if av[k] < bv[k] {
                            buf[k] += g[k];
                        }
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if let Some(buf) = self.acc(grads, *a) {
                    for k in 0..g.len() {
                        if av[k] <= bv[k] {
                            buf[k] += g[k];
                        }
                    }
                }
                if let Some(buf) = self.acc(grads, *b) {
                    for k in 0..g.len() {
                        if av[k] > bv[k] {
                            buf[k] += g[k];
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                if let Some(buf) = self.acc(grads, *x) {
                    for ((yr, gr), br) in y.chunks(n).zip(g.chunks(n)).zip(buf.chunks_mut(n)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            br[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap();
                if let Some(buf) = self.acc(grads, *x) {
                    for ((yr, gr), br) in y.chunks(n).zip(g.chunks(n)).zip(buf.chunks_mut(n)) {
                        let gs: f64 = gr.iter().sum();
                        for j in 0..n {
                            br[j] += gr[j] - math::exp(yr[j]) * gs;
                        }
                    }
                }
            }
            Op::MaskedSoftmax { x, mask } => self.masked_softmax_backward(*x, *mask, y, g, grads),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if let Some(buf) = self.acc(grads, *beta) {
                    for gr in g.chunks(n) {
                        add_into(buf, gr);
                    }
                }
                if let Some(buf) = self.acc(grads, *gamma) {
                    for (gr, hr) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            buf[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(buf) = self.acc(grads, *x) {
                    let mut dh = vec![0.0; n];
                    for (r, (gr, hr)) in g.chunks(n).zip(xhat.chunks(n)).enumerate() {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..n {
                            dh[j] = gr[j] * gam[j];
                            m1 += dh[j];
                            m2 += dh[j] * hr[j];
                        }
                        m1 /= n as f64;
                        m2 /= n as f64;
                        let br = &mut buf[r * n..(r + 1) * n];
                        for j in 0..n {
                            br[j] += rstd[r] * (dh[j] - m1 - hr[j] * m2);
                        }
                    }
                }
            }
            Op::Select { x, axis, indices } => {
                let shape = self.shape(*x).to_vec();
                if let Some(buf) = self.acc(grads, *x) {
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let ext = shape[*axis];
                    let k = indices.len();
                    for o in 0..outer {
                        for (p, &ix) in indices.iter().enumerate() {
                            let src = (o * k + p) * inner;
                            let dst = (o * ext + ix) * inner;
                            add_into(&mut buf[dst..dst + inner], &g[src..src + inner]);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let out_shape = node.value.shape();
                let outer: usize = out_shape[..*axis].iter().product();
                let inner: usize = out_shape[*axis + 1..].iter().product();
                let total = out_shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let ext = self.shape(*p)[*axis];
                    if let Some(buf) = self.acc(grads, *p) {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * ext * inner;
                            add_into(&mut buf[dst..dst + ext * inner], &g[src..src + ext * inner]);
                        }
                    }
                    offset += ext;
                }
            }
            Op::MeanAxis { x, axis } => {
                let shape = self.shape(*x).to_vec();
                if let Some(buf) = self.acc(grads, *x) {
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[*axis + 1..].iter().product();
                    let ext = shape[*axis];
                    let inv = 1.0 / ext as f64;
                    for o in 0..outer {
                        for a in 0..ext {
                            let base = (o * ext + a) * inner;
                            for j in 0..inner {
                                buf[base + j] += g[o * inner + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if let Some(buf) = self.acc(grads, *x) {
                    buf.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::SymNormAdjacency { e, self_loop_degree } => {
                let n = node.value.shape()[0];
                let ev = self.value(*e).data();
                let (_, d) = sym_norm_forward(ev, n, *self_loop_degree).expect("validated in forward");
                if let Some(buf) = self.acc(grads, *e) {
                    let hat = |i: usize, j: usize| ev[i * n + j] + if i == j { 1.0 } else { 0.0 };
                    let mut dd = vec![0.0; n];
                    for i in 0..n {
                        for j in 0..n {
                            let gij = g[i * n + j];
                            dd[i] += gij * hat(i, j) * d[j];
                            dd[j] += gij * d[i] * hat(i, j);
                        }
                    }
                    for i in 0..n {
                        // d(s^-1/2)/ds = -1/2 s^-3/2 = -1/2 d^3
                        let ds = dd[i] * -0.5 * d[i] * d[i] * d[i];
                        for j in 0..n {
                            buf[i * n + j] += g[i * n + j] * d[i] * d[j] + ds;
                        }
                    }
                }
            }
            Op::Im2Col3x3 { x, h, w } => {
                let (h, w) = (*h, *w);
                let c = self.shape(*x)[1];
                if let Some(buf) = self.acc(grads, *x) {
                    for py in 0..h {
                        for px in 0..w {
                            let row = &g[(py * w + px) * 9 * c..(py * w + px + 1) * 9 * c];
                            for dy in 0..3 {
                                for dx in 0..3 {
                                    let (sy, sx) = (py + dy, px + dx);
                                    if sy == 0 || sx == 0 || sy > h || sx > w {
                                        continue;
                                    }
                                    let s = ((sy - 1) * w + (sx - 1)) * c;
                                    let d = (dy * 3 + dx) * c;
                                    add_into(&mut buf[s..s + c], &row[d..d + c]);
                                }
                            }
                        }
                    }
                }
            }
            Op::FocalLoss {
                logits,
                target,
                alpha,
                beta,
            } => {
                let x = self.value(*logits).data();
                let n_pos = target.data().iter().filter(|&&t| t >= 1.0).count().max(1) as f64;
                if let Some(buf) = self.acc(grads, *logits) {
                    for k in 0..x.len() {
                        let p = math::sigmoid(x[k]);
                        let q = math::sigmoid(-x[k]);
                        let y = target.data()[k];
                        let d = if y >= 1.0 {
                            // d/dx [-(1-p)^a ln p]
                            alpha * p * math::pow(q, *alpha) * -math::softplus(-x[k]) - math::pow(q, alpha + 1.0)
                        } else {
                            // d/dx [-(1-y)^b p^a ln(1-p)]
                            let wgt = math::pow(1.0 - y, *beta);
                            wgt * (math::pow(p, alpha + 1.0) + alpha * math::pow(p, *alpha) * q * math::softplus(x[k]))
                        };
                        buf[k] += g[0] * d / n_pos;
                    }
                }
            }
        }
    }

    fn pointwise(&self, x: Var, g: &[f64], grads: &mut [Option<Vec<f64>>], d: impl Fn(f64, usize) -> f64) {
        let xv = self.value(x).data();
        if let Some(buf) = self.acc(grads, x) {
            for k in 0..g.len() {
                buf[k] += g[k] * d(xv[k], k);
            }
        }
    }

    fn pointwise_y(&self, x: Var, y: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>], d: impl Fn(f64) -> f64) {
        if let Some(buf) = self.acc(grads, x) {
            for k in 0..g.len() {
                buf[k] += g[k] * d(y[k]);
            }
        }
    }

    fn masked_softmax_backward(&self, x: Var, mask: Var, w: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let n = *self.shape(x).last().unwrap();
        let xv = self.value(x).data();
        let mv = self.value(mask).data();
        let mut dx = vec![0.0; xv.len()];
        let mut dm = vec![0.0; mv.len()];
        let mut e = vec![0.0; n];
        let mut scratch = vec![0.0; n];
        for r in 0..xv.len() / n {
            let xs = &xv[r * n..(r + 1) * n];
            let gs = &g[r * n..(r + 1) * n];
            let ws = &w[r * n..(r + 1) * n];
            let mo = (r * n) % mv.len();
            let ms = &mv[mo..mo + n];
            let s = masked_softmax_row(xs, ms, &mut scratch, &mut e);
            if s == 0.0 {
                // No live key: use the unmasked softmax as the mask's surrogate slope.
                kernels::softmax_row(xs, &mut scratch);
                for j in 0..n {
                    dm[mo + j] += scratch[j] * gs[j];
                }
                continue;
            }
            let dot: f64 = gs.iter().zip(ws).map(|(a, b)| a * b).sum();
            for j in 0..n {
                dx[r * n + j] += ws[j] * (gs[j] - dot);
                dm[mo + j] += e[j] / s * (gs[j] - dot);
            }
        }
        if let Some(buf) = self.acc(grads, x) {
            add_into(buf, &dx);
        }
        if let Some(buf) = self.acc(grads, mask) {
            add_into(buf, &dm);
        }
    }

    fn matmul_backward(&self, a: Var, b: Var, trans_b: bool, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let d = matmul_dims(self.shape(a), self.shape(b), trans_b).expect("validated in forward");
        let (m, k, n) = (d.m, d.k, d.n);
        // (B)^T as an n x k operand.
        let b_op_t = |off: usize| {
            let s = &bv[off..off + k * n];
            if trans_b {
                MatRef::rows(s, k)
            } else {
                MatRef::rows_t(s, n)
            }
        };
        if let Some(buf) = self.acc(grads, a) {
            if d.a_batched && !d.b_batched {
                gemm(d.batch * m, n, k, MatRef::rows(g, n), b_op_t(0), 1.0, buf);
            } else {
                for bi in 0..d.batch {
                    let ao = if d.a_batched { bi * m * k } else { 0 };
                    let bo = if d.b_batched { bi * k * n } else { 0 };
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    gemm(m, n, k, MatRef::rows(gs, n), b_op_t(bo), 1.0, &mut buf[ao..ao + m * k]);
                }
            }
        }
        if let Some(buf) = self.acc(grads, b) {
            if d.a_batched && !d.b_batched {
                let rows = d.batch * m;
                if trans_b {
                    // dB (n x k) = G^T A
                    gemm(n, rows, k, MatRef::rows_t(g, n), MatRef::rows(av, k), 1.0, buf);
                } else {
                    // dB (k x n) = A^T G
                    gemm(k, rows, n, MatRef::rows_t(av, k), MatRef::rows(g, n), 1.0, buf);
                }
            } else {
                for bi in 0..d.batch {
                    let ao = if d.a_batched { bi * m * k } else { 0 };
                    let bo = if d.b_batched { bi * k * n } else { 0 };
                    let gs = &g[bi * m * n..(bi + 1) * m * n];
                    let asl = &av[ao..ao + m * k];
                    let dst = &mut buf[bo..bo + k * n];
                    if trans_b {
                        gemm(n, m, k, MatRef::rows_t(gs, n), MatRef::rows(asl, k), 1.0, dst);
                    } else {
                        gemm(k, m, n, MatRef::rows_t(asl, k), MatRef::rows(gs, n), 1.0, dst);
                    }
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}
