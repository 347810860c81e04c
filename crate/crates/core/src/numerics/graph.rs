//! Dynamic reverse-mode tape.
//!
//! A [`Graph`] is rebuilt for every forward pass. Each operation appends a node
//! holding its value and whatever it needs for the backward sweep; [`Var`] is a
//! copyable handle into that list. Nodes are only ever appended, so inputs
//! always precede their consumers and a single reverse sweep is a valid
//! topological traversal.

use super::tensor::{
    expand_data, inverse_perm, numel, permute_data, reduce_to, split_axis, Tensor,
};
use super::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Ln(Var),
    Gelu(Var),
    Silu(Var),
    Expand(Var),
    MatMul {
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    Rope {
        x: Var,
        cos: Vec<T>,
        sin: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Ln(..) => "ln",
            Op::Gelu(..) => "gelu",
            Op::Silu(..) => "silu",
            Op::Expand(..) => "expand",
            Op::MatMul { .. } => "matmul",
            Op::Softmax { .. } => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Reshape(..) => "reshape",
            Op::Permute(..) => "permute",
            Op::Slice { .. } => "slice",
            Op::Concat { .. } => "concat",
            Op::Gather { .. } => "gather",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Mse(..) => "mse",
            Op::Rope { .. } => "rope",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Mse(a, b) => vec![*a, *b],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Scale(x, _)
            | Op::AddScalar(x)
            | Op::Ln(x)
            | Op::Gelu(x)
            | Op::Silu(x)
            | Op::Expand(x)
            | Op::Reshape(x)
            | Op::Permute(x, _)
            | Op::Sum(x)
            | Op::Mean(x) => vec![*x],
            Op::Softmax { x, .. } | Op::Slice { x, .. } | Op::Rope { x, .. } => vec![*x],
            Op::LayerNorm { x, gain, bias, .. } => {
                std::iter::once(*x).chain(*gain).chain(*bias).collect()
            }
            Op::Concat { parts, .. } => parts.clone(),
            Op::Gather { table, .. } => vec![*table],
        }
    }
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only computation tape. Not shareable across threads.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
    first_nonfinite: Option<(usize, &'static str)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

impl<T: Real> Graph<T> {
    /// Finite-value checking follows `debug_assertions`.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            check_finite: cfg!(debug_assertions),
            first_nonfinite: None,
        }
    }

    pub fn with_finite_check(mut self, on: bool) -> Self {
        self.check_finite = on;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Error for the first op that produced a NaN or infinity, if any.
    pub fn check(&self) -> Result<()> {
        match self.first_nonfinite {
            Some((node, op)) => Err(Error::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        let id = self.nodes.len();
        if self.check_finite && self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((id, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(id)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        if self.check_finite && self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((id, "leaf"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(id)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let name = op.name();
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).scale(c);
        self.push(value, Op::Scale(x, c))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        self.push(value, Op::AddScalar(x))
    }

    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.ln());
        self.push(value, Op::Ln(x))
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_K));
        let half = T::from_f64(0.5);
        let value = self
            .value(x)
            .map(|v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()));
        self.push(value, Op::Gelu(x))
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        self.push(value, Op::Silu(x))
    }

    /// Broadcasts along axes of extent 1. Ranks must match.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let from = self.shape(x);
        let ok =
            from.len() == shape.len() && from.iter().zip(shape).all(|(&a, &b)| a == b || a == 1);
        if !ok {
            return Err(Error::shape("expand", from, shape));
        }
        if from == shape {
            return Ok(x);
        }
        let data = expand_data(self.value(x).data(), from, shape);
        Ok(self.push(Tensor::from_parts(shape.to_vec(), data), Op::Expand(x)))
    }

    pub fn mm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul(a, b, false, false)
    }

    /// `op(a) · op(b)` over the last two axes; leading axes are batch axes and
    /// must agree exactly.
    pub fn matmul(&mut self, a: Var, b: Var, trans_a: bool, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ra = sa.len();
        if ra < 2 || ra != sb.len() || sa[..ra - 2] != sb[..ra - 2] {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (m, ka) = if trans_a {
            (sa[ra - 1], sa[ra - 2])
        } else {
            (sa[ra - 2], sa[ra - 1])
        };
        let (kb, n) = if trans_b {
            (sb[ra - 1], sb[ra - 2])
        } else {
            (sb[ra - 2], sb[ra - 1])
        };
        if ka != kb {
            return Err(Error::shape("matmul", sa, sb));
        }
        let batch = numel(&sa[..ra - 2]);
        let mut shape = sa[..ra - 2].to_vec();
        shape.extend([m, n]);
        let mut out = vec![T::zero(); batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            T::gemm(
                m,
                ka,
                n,
                &ad[i * m * ka..(i + 1) * m * ka],
                trans_a,
                &bd[i * ka * n..(i + 1) * ka * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            },
        ))
    }

    /// Numerically stable softmax along `axis` (max subtracted per slice).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidArgument(format!(
                "softmax axis {axis} for shape {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut max = T::neg_infinity();
                for j in 0..len {
                    max = max.max(src[at(j)]);
                }
                let mut total = T::zero();
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax { x, axis }))
    }

    /// Normalizes each row over the last axis (population variance plus `eps`),
    /// then applies the optional elementwise affine.
    pub fn layer_norm(
        &mut self,
        x: Var,
        gain: Option<Var>,
        bias: Option<Var>,
        eps: f64,
    ) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape
            .last()
            .ok_or_else(|| Error::InvalidArgument("layer_norm on a scalar".into()))?;
        for p in [gain, bias].into_iter().flatten() {
            if self.shape(p) != [width] {
                return Err(Error::shape("layer_norm", &shape, self.shape(p)));
            }
        }
        let rows = numel(&shape) / width;
        let src = self.value(x).data();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let w = T::from_f64(width as f64);
        let eps = T::from_f64(eps);
        for r in 0..rows {
            let row = &src[r * width..(r + 1) * width];
            let mean = row.iter().copied().sum::<T>() / w;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / w;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for (o, &v) in xhat[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
        }
        let mut out = xhat.clone();
        if let Some(g) = gain {
            let g = self.value(g).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o = *o * g[i % width];
            }
        }
        if let Some(b) = bias {
            let b = self.value(b).data();
            for (i, o) in out.iter_mut().enumerate() {
                *o = *o + b[i % width];
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Generalized transpose: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(perm)?;
        Ok(self.push(value, Op::Permute(x, perm.to_vec())))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::InvalidArgument("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let value = self.value(x).slice(axis, start, len)?;
        Ok(self.push(value, Op::Slice { x, axis, start }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat(&tensors, axis)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Row lookup in a `[vocab, width]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::InvalidArgument(format!(
                "gather table must be 2-D, got {shape:?}"
            )));
        }
        let (vocab, width) = (shape[0], shape[1]);
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Vocabulary { id: bad, vocab });
        }
        if ids.is_empty() {
            return Err(Error::InvalidArgument("gather with no ids".into()));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * width);
        for &i in ids {
            out.extend_from_slice(&src[i * width..(i + 1) * width]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), width], out),
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).mean());
        self.push(value, Op::Mean(x))
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape("mse", va.shape(), vb.shape()));
        }
        let total: T = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let value = Tensor::scalar(total / T::from_f64(va.numel() as f64));
        Ok(self.push(value, Op::Mse(a, b)))
    }

    /// Rotates adjacent channel pairs of `x: [batch, tokens, heads, head_dim]`
    /// by per-token angles given as `cos`/`sin` tables of shape
    /// `[tokens, head_dim / 2]`.
    pub fn rope(&mut self, x: Var, cos: &Tensor<T>, sin: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || !shape[3].is_multiple_of(2) {
            return Err(Error::InvalidArgument(format!(
                "rope expects [batch, tokens, heads, even head_dim], got {shape:?}"
            )));
        }
        let (tokens, half) = (shape[1], shape[3] / 2);
        if cos.shape() != [tokens, half] || sin.shape() != [tokens, half] {
            return Err(Error::shape("rope", &shape, cos.shape()));
        }
        let out = rotate(self.value(x).data(), &shape, cos.data(), sin.data(), false);
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::Rope {
                x,
                cos: cos.data().to_vec(),
                sin: sin.data().to_vec(),
            },
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        self.check()?;
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients {
            grads,
            shapes: self
                .nodes
                .iter()
                .map(|n| n.value.shape().to_vec())
                .collect(),
        })
    }

    fn propagate(&self, id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[id];
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !needs(v) {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.value(v).numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |s| add_into(s, g));
                acc(*b, &mut |s| {
                    s.iter_mut().zip(g).for_each(|(o, &d)| *o = *o - d)
                });
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * vb[i];
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] * va[i];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &mut |s| {
                s.iter_mut().zip(g).for_each(|(o, &d)| *o = *o + d * *c)
            }),
            Op::AddScalar(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Ln(x) => {
                let vx = self.value(*x).data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + g[i] / vx[i];
                    }
                })
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                let (c, k) = (T::from_f64(GELU_C), T::from_f64(GELU_K));
                let half = T::from_f64(0.5);
                let three = T::from_f64(3.0);
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        let v = vx[i];
                        let th = (c * (v + k * v * v * v)).tanh();
                        let d = half * (T::one() + th)
                            + half * v * (T::one() - th * th) * c * (T::one() + three * k * v * v);
                        s[i] = s[i] + g[i] * d;
                    }
                })
            }
            Op::Silu(x) => {
                let vx = self.value(*x).data();
                acc(*x, &mut |s| {
                    for i in 0..s.len() {
                        let sg = sigmoid(vx[i]);
                        s[i] = s[i] + g[i] * sg * (T::one() + vx[i] * (T::one() - sg));
                    }
                })
            }
            Op::Expand(x) => {
                let from = self.shape(*x);
                let red = reduce_to(g, from, node.value.shape());
                acc(*x, &mut |s| add_into(s, &red));
            }
            Op::MatMul {
                a,
                b,
                trans_a,
                trans_b,
            } => self.matmul_backward(node, *a, *b, *trans_a, *trans_b, g, grads),
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: T = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                s[at(j)] = s[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let width = *node.value.shape().last().unwrap();
                let rows = rstd.len();
                if let Some(b) = bias {
                    acc(*b, &mut |s| {
                        for (i, &d) in g.iter().enumerate() {
                            s[i % width] = s[i % width] + d;
                        }
                    });
                }
                if let Some(gn) = gain {
                    acc(*gn, &mut |s| {
                        for (i, &d) in g.iter().enumerate() {
                            s[i % width] = s[i % width] + d * xhat[i];
                        }
                    });
                }
                let gain_vals = gain.map(|v| self.value(v).data());
                let w = T::from_f64(width as f64);
                acc(*x, &mut |s| {
                    let mut dxhat = vec![T::zero(); width];
                    for r in 0..rows {
                        let base = r * width;
                        for j in 0..width {
                            dxhat[j] = match gain_vals {
                                Some(gv) => g[base + j] * gv[j],
                                None => g[base + j],
                            };
                        }
                        let mean_d = dxhat.iter().copied().sum::<T>() / w;
                        let mean_dx = (0..width).map(|j| dxhat[j] * xhat[base + j]).sum::<T>() / w;
                        for j in 0..width {
                            s[base + j] = s[base + j]
                                + rstd[r] * (dxhat[j] - mean_d - xhat[base + j] * mean_dx);
                        }
                    }
                })
            }
            Op::Reshape(x) => acc(*x, &mut |s| add_into(s, g)),
            Op::Permute(x, perm) => {
                let (_, back) = permute_data(g, node.value.shape(), &inverse_perm(perm));
                acc(*x, &mut |s| add_into(s, &back));
            }
            Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let extent = self.shape(*x)[*axis];
                acc(*x, &mut |s| {
                    for o in 0..outer {
                        let dst = (o * extent + start) * inner;
                        let src = o * len * inner;
                        add_into(&mut s[dst..dst + len * inner], &g[src..src + len * inner]);
                    }
                })
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    acc(p, &mut |s| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            add_into(&mut s[dst..dst + len * inner], &g[src..src + len * inner]);
                        }
                    });
                    offset += len;
                }
            }
            Op::Gather { table, ids } => {
                let width = self.shape(*table)[1];
                acc(*table, &mut |s| {
                    for (r, &i) in ids.iter().enumerate() {
                        add_into(
                            &mut s[i * width..(i + 1) * width],
                            &g[r * width..(r + 1) * width],
                        );
                    }
                })
            }
            Op::Sum(x) => acc(*x, &mut |s| s.iter_mut().for_each(|o| *o = *o + g[0])),
            Op::Mean(x) => {
                let n = T::from_f64(self.value(*x).numel() as f64);
                acc(*x, &mut |s| s.iter_mut().for_each(|o| *o = *o + g[0] / n))
            }
            Op::Mse(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let k = T::from_f64(2.0) * g[0] / T::from_f64(va.len() as f64);
                acc(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] + k * (va[i] - vb[i]);
                    }
                });
                acc(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] = s[i] - k * (va[i] - vb[i]);
                    }
                });
            }
            Op::Rope { x, cos, sin } => {
                let back = rotate(g, node.value.shape(), cos, sin, true);
                acc(*x, &mut |s| add_into(s, &back));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn matmul_backward(
        &self,
        node: &Node<T>,
        a: Var,
        b: Var,
        trans_a: bool,
        trans_b: bool,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let shape = node.value.shape();
        let r = shape.len();
        let (m, n) = (shape[r - 2], shape[r - 1]);
        let batch = numel(&shape[..r - 2]);
        let va = self.value(a).data();
        let vb = self.value(b).data();
        let k = va.len() / (batch * m);
        if self.nodes[a.0].requires_grad {
            let slot = grads[a.0].get_or_insert_with(|| vec![T::zero(); va.len()]);
            for i in 0..batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let bi = &vb[i * k * n..(i + 1) * k * n];
                let si = &mut slot[i * m * k..(i + 1) * m * k];
                if trans_a {
                    // stored [k, m] = op(b) · gᵀ
                    T::gemm(k, n, m, bi, trans_b, gi, true, si, T::one());
                } else {
                    T::gemm(m, n, k, gi, false, bi, !trans_b, si, T::one());
                }
            }
        }
        if self.nodes[b.0].requires_grad {
            let slot = grads[b.0].get_or_insert_with(|| vec![T::zero(); vb.len()]);
            for i in 0..batch {
                let gi = &g[i * m * n..(i + 1) * m * n];
                let ai = &va[i * m * k..(i + 1) * m * k];
                let si = &mut slot[i * k * n..(i + 1) * k * n];
                if trans_b {
                    // stored [n, k] = gᵀ · op(a)
                    T::gemm(n, m, k, gi, true, ai, trans_a, si, T::one());
                } else {
                    T::gemm(k, m, n, ai, !trans_a, gi, false, si, T::one());
                }
            }
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &d)| *o = *o + d);
}

/// Pairwise rotation of the last axis; `inverse` rotates by the negated angle.
fn rotate<T: Real>(src: &[T], shape: &[usize], cos: &[T], sin: &[T], inverse: bool) -> Vec<T> {
    let (batch, tokens, heads, dim) = (shape[0], shape[1], shape[2], shape[3]);
    let half = dim / 2;
    let mut out = vec![T::zero(); src.len()];
    for b in 0..batch {
        for t in 0..tokens {
            let table = t * half;
            for h in 0..heads {
                let base = ((b * tokens + t) * heads + h) * dim;
                for p in 0..half {
                    let (c, s) = (cos[table + p], sin[table + p]);
                    let s = if inverse { -s } else { s };
                    let x = src[base + 2 * p];
                    let y = src[base + 2 * p + 1];
                    out[base + 2 * p] = x * c - y * s;
                    out[base + 2 * p + 1] = x * s + y * c;
                }
            }
        }
    }
    out
}

/// Result of a backward sweep.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient with respect to `v`, zeros when `v` is not on any path to the root.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(w).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_is_twice_input() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::from_f64(vec![3], &[1.0, -2.0, 0.5]).unwrap());
        let sq = g.mul(w, w).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(w).data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn unused_leaf_gets_zero_grad() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::ones(vec![2]));
        let unused = g.param(Tensor::ones(vec![4]));
        let s = g.sum(w);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(unused).is_none());
        assert_eq!(grads.wrt(unused).data(), &[0.0; 4]);
    }

    #[test]
    fn non_scalar_root_is_rejected() {
        let mut g = Graph::<f64>::new();
        let w = g.param(Tensor::ones(vec![2]));
        assert!(g.backward(w).is_err());
    }

    #[test]
    fn softmax_symmetric_and_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![3]));
        let y = g.softmax(x, 0).unwrap();
        for &v in g.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::from_f64(vec![2], &[1000.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data()[0], 1.0);
        assert!(g.value(y).data()[1] < 1e-300);
        g.check().unwrap();
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![3], &[1.0, 2.0, 3.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let z: f64 = [1f64, 2., 3.].iter().map(|v| v.exp()).sum();
        for (i, &v) in g.value(y).data().iter().enumerate() {
            assert!((v - ((i + 1) as f64).exp() / z).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_on_inner_axis_sums_to_one() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![2, 3], &[0.1, 5.0, -1.0, 2.0, 2.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y);
        for c in 0..3 {
            assert!((v.at(&[0, c]) + v.at(&[1, c]) - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_cases() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![1, 3], &[5.0, 5.0, 5.0]).unwrap());
        let y = g.layer_norm(x, None, None, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);
        let x = g.constant(Tensor::from_f64(vec![1, 2], &[1.0, -1.0]).unwrap());
        let y = g.layer_norm(x, None, None, 1e-5).unwrap();
        for (a, b) in g.value(y).data().iter().zip([1.0, -1.0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_matches_two_pass_oracle() {
        let row = [0.3, -1.2, 2.5, 0.7, 0.0];
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![1, 5], &row).unwrap());
        let gain = g.constant(Tensor::from_f64(vec![5], &[1., 2., 3., 4., 5.]).unwrap());
        let bias = g.constant(Tensor::from_f64(vec![5], &[0.1; 5]).unwrap());
        let y = g.layer_norm(x, Some(gain), Some(bias), 1e-5).unwrap();
        let mean = row.iter().sum::<f64>() / 5.0;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 5.0;
        for (j, &v) in g.value(y).data().iter().enumerate() {
            let want = (row[j] - mean) / (var + 1e-5).sqrt() * (j + 1) as f64 + 0.1;
            assert!((v - want).abs() < 1e-12);
        }
    }

    #[test]
    fn quarter_turn_rope() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::from_f64(vec![1, 1, 1, 2], &[1.0, 0.0]).unwrap());
        let half_pi = std::f64::consts::FRAC_PI_2;
        let cos = Tensor::from_f64(vec![1, 1], &[half_pi.cos()]).unwrap();
        let sin = Tensor::from_f64(vec![1, 1], &[half_pi.sin()]).unwrap();
        let y = g.rope(x, &cos, &sin).unwrap();
        let v = g.value(y).data();
        assert!(v[0].abs() < 1e-15 && (v[1] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn nonfinite_values_are_reported() {
        let mut g = Graph::<f64>::new().with_finite_check(true);
        let x = g.param(Tensor::from_f64(vec![2], &[0.0, 1.0]).unwrap());
        let y = g.ln(x);
        let s = g.sum(y);
        let err = g.backward(s).unwrap_err();
        assert!(matches!(err, Error::NonFinite { op: "ln", .. }), "{err}");
    }

    #[test]
    fn gather_out_of_vocab() {
        let mut g = Graph::<f32>::new();
        let t = g.param(Tensor::zeros(vec![3, 2]));
        assert!(matches!(
            g.gather(t, &[0, 3]),
            Err(Error::Vocabulary { id: 3, vocab: 3 })
        ));
    }
}
