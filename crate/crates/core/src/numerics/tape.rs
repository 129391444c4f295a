//! Reverse-mode differentiation over a fixed set of 2-D primitives.
//!
//! A [`Tape`] records every operation eagerly (values are computed on push)
//! and [`Tape::backward`] walks the record in reverse to accumulate exact
//! gradients. Every tensor is treated as a matrix: leading dimensions fold
//! into rows.

use std::collections::BTreeMap;
use std::fmt;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The supported primitive operations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Primitive {
    MatMul,
    Add,
    AddRow,
    Sub,
    Mul,
    Scale,
    AddScalar,
    Tanh,
    Gelu,
    Sigmoid,
    Softmax,
    LayerNorm,
    SliceCols,
    ConcatCols,
    GatherRows,
    ConcatRows,
    RepeatRows,
    MeanGroups,
    Attention,
    MeanSquare,
}

impl Primitive {
    pub const ALL: [Primitive; 20] = [
        Primitive::MatMul,
        Primitive::Add,
        Primitive::AddRow,
        Primitive::Sub,
        Primitive::Mul,
        Primitive::Scale,
        Primitive::AddScalar,
        Primitive::Tanh,
        Primitive::Gelu,
        Primitive::Sigmoid,
        Primitive::Softmax,
        Primitive::LayerNorm,
        Primitive::SliceCols,
        Primitive::ConcatCols,
        Primitive::GatherRows,
        Primitive::ConcatRows,
        Primitive::RepeatRows,
        Primitive::MeanGroups,
        Primitive::Attention,
        Primitive::MeanSquare,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Primitive::MatMul => "matmul",
            Primitive::Add => "add",
            Primitive::AddRow => "add_row",
            Primitive::Sub => "sub",
            Primitive::Mul => "mul",
            Primitive::Scale => "scale",
            Primitive::AddScalar => "add_scalar",
            Primitive::Tanh => "tanh",
            Primitive::Gelu => "gelu",
            Primitive::Sigmoid => "sigmoid",
            Primitive::Softmax => "softmax",
            Primitive::LayerNorm => "layer_norm",
            Primitive::SliceCols => "slice_cols",
            Primitive::ConcatCols => "concat_cols",
            Primitive::GatherRows => "gather_rows",
            Primitive::ConcatRows => "concat_rows",
            Primitive::RepeatRows => "repeat_rows",
            Primitive::MeanGroups => "mean_groups",
            Primitive::Attention => "attention",
            Primitive::MeanSquare => "mean_square",
        }
    }
}

impl fmt::Display for Primitive {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    AddScalar(Var),
    Tanh(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm(Var, Vec<S>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    RepeatRows(Var, usize),
    MeanGroups(Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: Vec<S>,
    },
    MeanSquare(Var, Var),
}

impl<S> Op<S> {
    fn primitive(&self) -> Option<Primitive> {
        Some(match self {
            Op::Leaf => return None,
            Op::MatMul(..) => Primitive::MatMul,
            Op::Add(..) => Primitive::Add,
            Op::AddRow(..) => Primitive::AddRow,
            Op::Sub(..) => Primitive::Sub,
            Op::Mul(..) => Primitive::Mul,
            Op::Scale(..) => Primitive::Scale,
            Op::AddScalar(..) => Primitive::AddScalar,
            Op::Tanh(..) => Primitive::Tanh,
            Op::Gelu(..) => Primitive::Gelu,
            Op::Sigmoid(..) => Primitive::Sigmoid,
            Op::Softmax(..) => Primitive::Softmax,
            Op::LayerNorm(..) => Primitive::LayerNorm,
            Op::SliceCols(..) => Primitive::SliceCols,
            Op::ConcatCols(..) => Primitive::ConcatCols,
            Op::GatherRows(..) => Primitive::GatherRows,
            Op::ConcatRows(..) => Primitive::ConcatRows,
            Op::RepeatRows(..) => Primitive::RepeatRows,
            Op::MeanGroups(..) => Primitive::MeanGroups,
            Op::Attention { .. } => Primitive::Attention,
            Op::MeanSquare(..) => Primitive::MeanSquare,
        })
    }
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`].
pub struct Grads<S> {
    by_var: Vec<Option<Tensor<S>>>,
    names: BTreeMap<String, Var>,
}

impl<S: Scalar> Grads<S> {
    /// Gradient with respect to a leaf, if it was reachable.
    pub fn get(&self, var: Var) -> Option<&Tensor<S>> {
        self.by_var.get(var.0).and_then(|g| g.as_ref())
    }

    pub fn named(&self, name: &str) -> Option<&Tensor<S>> {
        self.names.get(name).and_then(|v| self.get(*v))
    }

    /// Gradients of every named parameter; unreachable parameters get zeros.
    pub fn into_named(mut self) -> BTreeMap<String, Tensor<S>> {
        let names = std::mem::take(&mut self.names);
        names
            .into_iter()
            .map(|(name, var)| {
                let g = self.by_var[var.0].take();
                (name, g.expect("parameter gradient initialised"))
            })
            .collect()
    }
}

/// Eager computation record supporting reverse-mode gradients.
pub struct Tape<S = f32> {
    nodes: Vec<Node<S>>,
    params: BTreeMap<String, Var>,
    non_finite: Option<(usize, Primitive)>,
    fault: Option<Primitive>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: BTreeMap::new(),
            non_finite: None,
            fault: None,
        }
    }

    /// Test hook: perturbs the backward rule of one primitive so the
    /// gradient checker can demonstrate that it catches a wrong rule.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, primitive: Primitive) {
        self.fault = Some(primitive);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<S> {
        &self.nodes[var.0].value
    }

    /// Scalar value of a 1-element node.
    pub fn scalar(&self, var: Var) -> S {
        let v = self.value(var);
        assert_eq!(v.len(), 1, "scalar() on non-scalar node");
        v.data()[0]
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, false)
    }

    /// Registers a trainable leaf under `name`.
    pub fn param(&mut self, name: impl Into<String>, value: Tensor<S>) -> Var {
        let var = self.push_leaf(value, true);
        self.params.insert(name.into(), var);
        var
    }

    /// A differentiable leaf without a name (used by the gradient checker).
    pub fn input(&mut self, value: Tensor<S>) -> Var {
        self.push_leaf(value, true)
    }

    /// Returns an error naming the first node that produced NaN/Inf.
    pub fn check_finite(&self) -> Result<()> {
        match self.non_finite {
            Some((index, p)) => Err(Error::NonFinite {
                index,
                op: p.name().to_string(),
            }),
            None => Ok(()),
        }
    }

    fn push_leaf(&mut self, value: Tensor<S>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        let index = self.nodes.len();
        if self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = op.primitive().map(|p| (index, p));
        }
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(index)
    }

    fn dims(&self, var: Var) -> (usize, usize) {
        let v = self.value(var);
        (v.rows(), v.cols())
    }

    // ---- primitives -------------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
        let mut out = vec![S::zero(); m * n];
        S::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            S::zero(),
            &mut out,
        );
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    /// Adds a `[1,n]` (or `[n]`) row vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (m, n) = self.dims(a);
        let bv = self.value(bias);
        assert_eq!(bv.len(), n, "add_row bias width");
        let bd = bv.data().to_vec();
        let mut out = self.value(a).data().to_vec();
        for r in 0..m {
            for (o, b) in out[r * n..(r + 1) * n].iter_mut().zip(&bd) {
                *o += *b;
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::AddRow(a, bias), &[a, bias])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let c = S::from_f64(c);
        let out = self.value(a).map(|x| x * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let c = S::from_f64(c);
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::AddScalar(a), &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        self.push(out, Op::Gelu(a), &[a])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), &[a])
    }

    /// Row-wise softmax.
    pub fn softmax(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let mut out = self.value(a).data().to_vec();
        for r in 0..m {
            softmax_in_place(&mut out[r * n..(r + 1) * n]);
        }
        self.push(Tensor::matrix(m, n, out), Op::Softmax(a), &[a])
    }

    /// Row-wise normalization to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a).data();
        let mut out = vec![S::zero(); m * n];
        let mut inv_std = Vec::with_capacity(m);
        let nf = S::from_f64(n as f64);
        let eps = S::from_f64(LN_EPS);
        for r in 0..m {
            let row = &x[r * n..(r + 1) * n];
            let mut mean = S::zero();
            for &v in row {
                mean += v;
            }
            mean = mean / nf;
            let mut var = S::zero();
            for &v in row {
                let d = v - mean;
                var += d * d;
            }
            var = var / nf;
            let is = S::one() / (var + eps).sqrt();
            inv_std.push(is);
            for (o, &v) in out[r * n..(r + 1) * n].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::LayerNorm(a, inv_std), &[a])
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let (m, n) = self.dims(a);
        assert!(start + len <= n, "slice_cols out of range");
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&x[r * n + start..r * n + start + len]);
        }
        self.push(Tensor::matrix(m, len, out), Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let m = self.dims(parts[0]).0;
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = self.dims(p);
                assert_eq!(pm, m, "concat_cols row mismatch");
                pn
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        self.push(Tensor::matrix(m, n, out), Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Selects rows by index (indices may repeat).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            assert!(i < m, "gather_rows index {i} >= {m}");
            out.extend_from_slice(&x[i * n..(i + 1) * n]);
        }
        self.push(
            Tensor::matrix(idx.len(), n, out),
            Op::GatherRows(a, idx.to_vec()),
            &[a],
        )
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather_rows(a, &idx)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let n = self.dims(parts[0]).1;
        let mut out = Vec::new();
        let mut m = 0;
        for &p in parts {
            let (pm, pn) = self.dims(p);
            assert_eq!(pn, n, "concat_rows width mismatch");
            out.extend_from_slice(self.value(p).data());
            m += pm;
        }
        self.push(Tensor::matrix(m, n, out), Op::ConcatRows(parts.to_vec()), parts)
    }

    /// `[b,n] -> [b*k,n]`, each row repeated `k` times consecutively.
    pub fn repeat_rows(&mut self, a: Var, k: usize) -> Var {
        let (m, n) = self.dims(a);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(m * k * n);
        for r in 0..m {
            for _ in 0..k {
                out.extend_from_slice(&x[r * n..(r + 1) * n]);
            }
        }
        self.push(Tensor::matrix(m * k, n, out), Op::RepeatRows(a, k), &[a])
    }

    /// `[b*k,n] -> [b,n]`, mean over each consecutive group of `k` rows.
    pub fn mean_groups(&mut self, a: Var, k: usize) -> Var {
        let (m, n) = self.dims(a);
        assert!(k > 0 && m % k == 0, "mean_groups: {m} rows not divisible by {k}");
        let x = self.value(a).data();
        let inv = S::from_f64(1.0 / k as f64);
        let mut out = vec![S::zero(); (m / k) * n];
        for r in 0..m {
            let g = r / k;
            for c in 0..n {
                out[g * n + c] += x[r * n + c] * inv;
            }
        }
        self.push(Tensor::matrix(m / k, n, out), Op::MeanGroups(a, k), &[a])
    }

    /// Multi-head scaled dot-product self-attention over independent
    /// sequences of length `seq` stacked along rows. `q`, `k`, `v` are
    /// `[batch*seq, width]`; `width` must be divisible by `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq: usize, heads: usize) -> Var {
        let (m, w) = self.dims(q);
        assert_eq!(self.dims(k), (m, w));
        assert_eq!(self.dims(v), (m, w));
        assert!(seq > 0 && m % seq == 0, "attention: rows not a multiple of seq");
        assert!(heads > 0 && w % heads == 0, "attention: width not divisible by heads");
        let batch = m / seq;
        let dh = w / heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut out = vec![S::zero(); m * w];
        let mut probs = vec![S::zero(); batch * heads * seq * seq];
        let mut qh = vec![S::zero(); seq * dh];
        let mut kh = vec![S::zero(); seq * dh];
        let mut vh = vec![S::zero(); seq * dh];
        let mut oh = vec![S::zero(); seq * dh];
        for b in 0..batch {
            for h in 0..heads {
                extract_head(qd, w, b * seq, seq, h * dh, dh, &mut qh);
                extract_head(kd, w, b * seq, seq, h * dh, dh, &mut kh);
                extract_head(vd, w, b * seq, seq, h * dh, dh, &mut vh);
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                S::gemm(seq, dh, seq, &qh, false, &kh, true, S::zero(), p);
                for row in p.chunks_mut(seq) {
                    for x in row.iter_mut() {
                        *x *= scale;
                    }
                    softmax_in_place(row);
                }
                S::gemm(seq, seq, dh, p, false, &vh, false, S::zero(), &mut oh);
                scatter_head(&oh, w, b * seq, seq, h * dh, dh, &mut out);
            }
        }
        self.push(
            Tensor::matrix(m, w, out),
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            },
            &[q, k, v],
        )
    }

    /// `mean((a - b)^2)` as a `[1]` tensor.
    pub fn mean_square(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.len(), bv.len(), "mean_square length mismatch");
        let mut acc = 0.0f64;
        for (&x, &y) in av.data().iter().zip(bv.data()) {
            let d = (x - y).to_f64();
            acc += d * d;
        }
        let n = av.len().max(1) as f64;
        let out = Tensor::new(&[1], vec![S::from_f64(acc / n)]);
        self.push(out, Op::MeanSquare(a, b), &[a, b])
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Tensor<S> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(
            av.shape(),
            bv.shape(),
            "elementwise shape mismatch {:?} vs {:?}",
            av.shape(),
            bv.shape()
        );
        Tensor::new(
            av.shape(),
            av.data()
                .iter()
                .zip(bv.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Exact gradients of the scalar `loss` with respect to every leaf that
    /// requires gradients. Fails if any node produced a non-finite value.
    pub fn backward(&self, loss: Var) -> Result<Grads<S>> {
        self.check_finite()?;
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Vec<S>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![S::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let mut contrib = self.node_backward(i, &g);
            if let Some(fault) = self.fault {
                if node.op.primitive() == Some(fault) {
                    if let Some((_, first)) = contrib.first_mut() {
                        for x in first.iter_mut() {
                            *x *= S::from_f64(1.1);
                        }
                    }
                }
            }
            for (var, d) in contrib {
                if !self.nodes[var.0].needs_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => {
                        for (a, x) in acc.iter_mut().zip(&d) {
                            *a += *x;
                        }
                    }
                    slot @ None => *slot = Some(d),
                }
            }
        }

        let by_var: Vec<Option<Tensor<S>>> = self
            .nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                if !(matches!(node.op, Op::Leaf) && node.needs_grad) {
                    return None;
                }
                let shape = node.value.shape();
                Some(match grads.get_mut(i).and_then(|g| g.take()) {
                    Some(g) => Tensor::new(shape, g),
                    None => Tensor::zeros(shape),
                })
            })
            .collect();
        let grads = Grads {
            by_var,
            names: self.params.clone(),
        };
        for (name, var) in &grads.names {
            if let Some(g) = grads.get(*var) {
                if !g.all_finite() {
                    return Err(Error::NonFinite {
                        index: var.0,
                        op: format!("gradient of {name}"),
                    });
                }
            }
        }
        Ok(grads)
    }

    fn node_backward(&self, i: usize, g: &[S]) -> Vec<(Var, Vec<S>)> {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => Vec::new(),
            Op::MatMul(a, b) => {
                let (m, k) = self.dims(*a);
                let n = self.dims(*b).1;
                let mut da = vec![S::zero(); m * k];
                let mut db = vec![S::zero(); k * n];
                // dA = G B^T, dB = A^T G
                S::gemm(m, n, k, g, false, self.value(*b).data(), true, S::zero(), &mut da);
                S::gemm(k, m, n, self.value(*a).data(), true, g, false, S::zero(), &mut db);
                vec![(*a, da), (*b, db)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|&x| -x).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                let db = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                vec![(*a, da), (*b, db)]
            }
            Op::AddRow(a, bias) => {
                let n = self.dims(*a).1;
                let mut db = vec![S::zero(); n];
                for row in g.chunks(n) {
                    for (d, &x) in db.iter_mut().zip(row) {
                        *d += x;
                    }
                }
                vec![(*a, g.to_vec()), (*bias, db)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|&x| x * *c).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Tanh(a) => vec![(
                *a,
                g.iter()
                    .zip(out)
                    .map(|(&x, &y)| x * (S::one() - y * y))
                    .collect(),
            )],
            Op::Gelu(a) => vec![(
                *a,
                g.iter()
                    .zip(self.value(*a).data())
                    .map(|(&x, &v)| x * gelu_grad(v))
                    .collect(),
            )],
            Op::Sigmoid(a) => vec![(
                *a,
                g.iter()
                    .zip(out)
                    .map(|(&x, &y)| x * y * (S::one() - y))
                    .collect(),
            )],
            Op::Softmax(a) => {
                let n = self.dims(*a).1;
                let mut d = vec![S::zero(); g.len()];
                for ((dr, gr), yr) in d.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                    softmax_backward_row(gr, yr, dr);
                }
                vec![(*a, d)]
            }
            Op::LayerNorm(a, inv_std) => {
                let n = self.dims(*a).1;
                let nf = S::from_f64(n as f64);
                let mut d = vec![S::zero(); g.len()];
                for (r, ((dr, gr), yr)) in d
                    .chunks_mut(n)
                    .zip(g.chunks(n))
                    .zip(out.chunks(n))
                    .enumerate()
                {
                    let mut mean_g = S::zero();
                    let mut mean_gy = S::zero();
                    for (&gv, &yv) in gr.iter().zip(yr) {
                        mean_g += gv;
                        mean_gy += gv * yv;
                    }
                    mean_g = mean_g / nf;
                    mean_gy = mean_gy / nf;
                    for ((o, &gv), &yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gv - mean_g - yv * mean_gy);
                    }
                }
                vec![(*a, d)]
            }
            Op::SliceCols(a, start) => {
                let (m, n) = self.dims(*a);
                let len = node.value.cols();
                let mut d = vec![S::zero(); m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len]
                        .copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                vec![(*a, d)]
            }
            Op::ConcatCols(parts) => {
                let m = node.value.rows();
                let n = node.value.cols();
                let mut offset = 0;
                let mut res = Vec::with_capacity(parts.len());
                for &p in parts {
                    let w = self.dims(p).1;
                    let mut d = Vec::with_capacity(m * w);
                    for r in 0..m {
                        d.extend_from_slice(&g[r * n + offset..r * n + offset + w]);
                    }
                    offset += w;
                    res.push((p, d));
                }
                res
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = self.dims(*a);
                let mut d = vec![S::zero(); m * n];
                for (j, &i) in idx.iter().enumerate() {
                    for c in 0..n {
                        d[i * n + c] += g[j * n + c];
                    }
                }
                vec![(*a, d)]
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let len = self.value(p).len();
                        let d = g[offset..offset + len].to_vec();
                        offset += len;
                        (p, d)
                    })
                    .collect()
            }
            Op::RepeatRows(a, k) => {
                let (m, n) = self.dims(*a);
                let mut d = vec![S::zero(); m * n];
                for (r, row) in g.chunks(n).enumerate() {
                    let src = r / k;
                    for c in 0..n {
                        d[src * n + c] += row[c];
                    }
                }
                vec![(*a, d)]
            }
            Op::MeanGroups(a, k) => {
                let (m, n) = self.dims(*a);
                let inv = S::from_f64(1.0 / *k as f64);
                let mut d = vec![S::zero(); m * n];
                for r in 0..m {
                    let gr = r / k;
                    for c in 0..n {
                        d[r * n + c] = g[gr * n + c] * inv;
                    }
                }
                vec![(*a, d)]
            }
            Op::Attention {
                q,
                k,
                v,
                seq,
                heads,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *seq, *heads, probs),
            Op::MeanSquare(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = g[0] * S::from_f64(2.0 / av.len().max(1) as f64);
                let da: Vec<S> = av.iter().zip(bv).map(|(&x, &y)| c * (x - y)).collect();
                let db = da.iter().map(|&x| -x).collect();
                vec![(*a, da), (*b, db)]
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[S],
        q: Var,
        k: Var,
        v: Var,
        seq: usize,
        heads: usize,
        probs: &[S],
    ) -> Vec<(Var, Vec<S>)> {
        let (m, w) = self.dims(q);
        let batch = m / seq;
        let dh = w / heads;
        let scale = S::from_f64(1.0 / (dh as f64).sqrt());
        let (qd, kd, vd) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut dq = vec![S::zero(); m * w];
        let mut dk = vec![S::zero(); m * w];
        let mut dv = vec![S::zero(); m * w];
        let mut qh = vec![S::zero(); seq * dh];
        let mut kh = vec![S::zero(); seq * dh];
        let mut vh = vec![S::zero(); seq * dh];
        let mut gh = vec![S::zero(); seq * dh];
        let mut dp = vec![S::zero(); seq * seq];
        let mut ds = vec![S::zero(); seq * seq];
        let mut tmp = vec![S::zero(); seq * dh];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                extract_head(qd, w, b * seq, seq, h * dh, dh, &mut qh);
                extract_head(kd, w, b * seq, seq, h * dh, dh, &mut kh);
                extract_head(vd, w, b * seq, seq, h * dh, dh, &mut vh);
                extract_head(g, w, b * seq, seq, h * dh, dh, &mut gh);
                // dV = P^T G
                S::gemm(seq, seq, dh, p, true, &gh, false, S::zero(), &mut tmp);
                scatter_head(&tmp, w, b * seq, seq, h * dh, dh, &mut dv);
                // dP = G V^T
                S::gemm(seq, dh, seq, &gh, false, &vh, true, S::zero(), &mut dp);
                for ((dsr, dpr), pr) in ds.chunks_mut(seq).zip(dp.chunks(seq)).zip(p.chunks(seq)) {
                    softmax_backward_row(dpr, pr, dsr);
                    for x in dsr.iter_mut() {
                        *x *= scale;
                    }
                }
                // dQ = dS K, dK = dS^T Q
                S::gemm(seq, seq, dh, &ds, false, &kh, false, S::zero(), &mut tmp);
                scatter_head(&tmp, w, b * seq, seq, h * dh, dh, &mut dq);
                S::gemm(seq, seq, dh, &ds, true, &qh, false, S::zero(), &mut tmp);
                scatter_head(&tmp, w, b * seq, seq, h * dh, dh, &mut dk);
            }
        }
        vec![(q, dq), (k, dk), (v, dv)]
    }
}

fn extract_head<S: Scalar>(
    src: &[S],
    width: usize,
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
    dst: &mut [S],
) {
    for r in 0..rows {
        let s = (row0 + r) * width + col0;
        dst[r * cols..(r + 1) * cols].copy_from_slice(&src[s..s + cols]);
    }
}

fn scatter_head<S: Scalar>(
    src: &[S],
    width: usize,
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
    dst: &mut [S],
) {
    for r in 0..rows {
        let s = (row0 + r) * width + col0;
        dst[s..s + cols].copy_from_slice(&src[r * cols..(r + 1) * cols]);
    }
}

fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let mut max = row[0];
    for &x in row.iter() {
        max = max.max(x);
    }
    let mut sum = S::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in row.iter_mut() {
        *x = *x / sum;
    }
}

fn softmax_backward_row<S: Scalar>(g: &[S], y: &[S], d: &mut [S]) {
    let mut dot = S::zero();
    for (&gv, &yv) in g.iter().zip(y) {
        dot += gv * yv;
    }
    for ((o, &gv), &yv) in d.iter_mut().zip(g).zip(y) {
        *o = yv * (gv - dot);
    }
}

fn gelu<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    half * x * (S::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let c = S::from_f64(GELU_C);
    let a = S::from_f64(GELU_A);
    let half = S::from_f64(0.5);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + th)
        + half * x * (S::one() - th * th) * c * (S::one() + S::from_f64(3.0) * a * x * x)
}

fn sigmoid<S: Scalar>(x: S) -> S {
    S::one() / (S::one() + (-x).exp())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_mse_hand_derivative() {
        // loss = mean((W x - y)^2), W=[[1]], x=[2], y=[0]
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::matrix(1, 1, vec![2.0]));
        let w = tape.param("w", Tensor::matrix(1, 1, vec![1.0]));
        let y = tape.constant(Tensor::matrix(1, 1, vec![0.0]));
        let wx = tape.matmul(x, w);
        let loss = tape.mean_square(wx, y);
        assert_eq!(tape.scalar(loss), 4.0);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.named("w").unwrap().data(), &[8.0]);
    }

    #[test]
    fn unused_parameter_gets_exact_zero() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param("a", Tensor::matrix(1, 2, vec![1.0, 2.0]));
        let _unused = tape.param("b", Tensor::matrix(1, 2, vec![3.0, 4.0]));
        let z = tape.constant(Tensor::zeros(&[1, 2]));
        let loss = tape.mean_square(a, z);
        let grads = tape.backward(loss).unwrap().into_named();
        assert_eq!(grads["b"].data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_finite_value_is_reported_with_its_node() {
        let mut tape = Tape::<f32>::new();
        let a = tape.param("a", Tensor::matrix(1, 1, vec![f32::MAX]));
        let b = tape.scale(a, 10.0);
        let z = tape.constant(Tensor::zeros(&[1, 1]));
        let loss = tape.mean_square(b, z);
        match tape.backward(loss) {
            Err(Error::NonFinite { index, op }) => {
                assert_eq!(index, b.index());
                assert_eq!(op, "scale");
            }
            other => panic!("expected non-finite error, got {:?}", other.err()),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.0, 100.0]));
        let s = tape.softmax(a);
        for r in 0..2 {
            let sum: f64 = tape.value(s).row(r).iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_with_identical_keys_averages_values() {
        let mut tape = Tape::<f64>::new();
        let q = tape.constant(Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]));
        let k = tape.constant(Tensor::matrix(2, 2, vec![1.0, 1.0, 1.0, 1.0]));
        let v = tape.constant(Tensor::matrix(2, 2, vec![0.0, 2.0, 4.0, 6.0]));
        let o = tape.attention(q, k, v, 2, 1);
        assert_eq!(tape.value(o).data(), &[2.0, 4.0, 2.0, 4.0]);
    }
}
