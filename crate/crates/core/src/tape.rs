//! Reverse-mode differentiation over a linear tape of primitive ops.
//!
//! Every primitive is a method on [`Tape`] that evaluates eagerly and
//! appends a node holding its value. A node remembers its inputs only when
//! at least one of them requires a gradient, so a tape built from constant
//! leaves is a plain evaluator. [`Tape::backward`] walks the nodes in exact
//! reverse order, visiting each taped op once.
//!
//! Broadcasting for `add`, `sub`, `mul` and `div` follows the usual
//! right-aligned rule: a dimension of size 1 stretches to match the other
//! operand, and a shorter shape is padded with leading 1s.

use crate::error::{ensure, Error, Result};
use crate::tensor::{check_shape, numel, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Sigmoid,
    Exp,
    Log,
    Silu,
    LogSigmoid,
}

enum Op {
    /// Leaf or a value computed without any grad-requiring input.
    Const,
    Matmul(Var, Var),
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
    },
    Scale(Var, f64),
    Unary(UnaryKind, Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        inv_std: Vec<f64>,
    },
    RmsNorm {
        x: Var,
        inv_rms: Vec<f64>,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Concat {
        xs: Vec<Var>,
        axis: usize,
    },
    Transpose(Var),
    Reshape(Var),
    Cumsum {
        x: Var,
        axis: usize,
    },
    Cumprod {
        x: Var,
        axis: usize,
    },
    Sum(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Rope {
        x: Var,
        positions: Vec<usize>,
        base: f64,
    },
    DepthwiseConv {
        x: Var,
        w: Var,
        causal: bool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    GlaRecurrent {
        q: Var,
        k: Var,
        v: Var,
        alpha: Var,
        s0: Var,
        dims: GlaDims,
        /// States S_0..S_N for every head, `(N + 1) * heads * dk * dv` values.
        states: Vec<f64>,
    },
    #[cfg(test)]
    BrokenSquare(Var),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct GlaDims {
    pub n: usize,
    pub heads: usize,
    pub dk: usize,
    pub dv: usize,
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// The computation tape: an append-only list of evaluated nodes.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

// ── kernels shared with the tape-free paths ─────────────────────────

/// `out[m, n] += a[m, k] * b[k, n]`, row-major. Each output row depends only
/// on the matching row of `a`, so a one-row product is bit-identical to the
/// same row of a many-row product.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (p, &av) in a_row.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = if i + a.len() >= rank { a[i + a.len() - rank] } else { 1 };
        let db = if i + b.len() >= rank { b[i + b.len() - rank] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::contract(format!(
                    "shapes {a:?} and {b:?} do not broadcast"
                )))
            }
        };
    }
    Ok(out)
}

/// For each flat output index, the flat index into an input of shape `inp`
/// broadcast to `out`.
fn broadcast_offsets(out: &[usize], inp: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let pad = rank - inp.len();
    let mut strides = vec![0usize; rank];
    let mut s = 1;
    for i in (0..inp.len()).rev() {
        strides[i + pad] = if inp[i] == 1 { 0 } else { s };
        s *= inp[i];
    }
    let total = numel(out);
    let mut offsets = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    let mut off = 0usize;
    for _ in 0..total {
        offsets.push(off);
        for d in (0..rank).rev() {
            idx[d] += 1;
            off += strides[d];
            if idx[d] < out[d] {
                break;
            }
            off -= strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    offsets
}

/// Splits `shape` around `axis` into (outer, len, inner).
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(acc: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match acc {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Number of nodes that will be visited by `backward`.
    pub fn taped_ops(&self) -> usize {
        self.nodes
            .iter()
            .filter(|n| !matches!(n.op, Op::Const))
            .count()
    }

    fn push(&mut self, name: &str, shape: Vec<usize>, value: Vec<f64>, op: Op) -> Result<Var> {
        debug_assert_eq!(numel(&shape), value.len());
        if let Some(bad) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::numeric(
                name,
                format!("non-finite output {} at flat index {bad}", value[bad]),
            ));
        }
        let requires_grad = !matches!(op, Op::Const);
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records `op` only when some input requires a gradient.
    fn record(&self, inputs: &[Var], op: Op) -> Op {
        if self.needs(inputs) {
            op
        } else {
            Op::Const
        }
    }

    fn node(&self, v: Var) -> Result<&Node> {
        self.nodes
            .get(v.0)
            .ok_or_else(|| Error::contract(format!("variable {} is not on this tape", v.0)))
    }

    // ── leaves and accessors ────────────────────────────────────────

    /// Copies a tensor onto the tape. Its `requires_grad` flag decides
    /// whether gradients flow back to it.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.nodes.push(Node {
            shape: t.shape().to_vec(),
            value: t.data().to_vec(),
            requires_grad: t.requires_grad(),
            op: Op::Const,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, shape: impl Into<Vec<usize>>, value: Vec<f64>) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape)?;
        ensure!(
            numel(&shape) == value.len(),
            "constant of shape {shape:?} given {} values",
            value.len()
        );
        self.push("constant", shape, value, Op::Const)
    }

    pub fn scalar_const(&mut self, v: f64) -> Result<Var> {
        self.constant([1], vec![v])
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape node with invalid shape")
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    fn dims2(&self, v: Var, op: &str) -> Result<(usize, usize)> {
        match self.node(v)?.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::contract(format!("{op} expects a 2-D input, got {s:?}"))),
        }
    }

    // ── primitives ──────────────────────────────────────────────────

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        ensure!(k == k2, "matmul inner dimensions differ: [{m}, {k}] x [{k2}, {n}]");
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let op = self.record(&[a, b], Op::Matmul(a, b));
        self.push("matmul", vec![m, n], out, op)
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let sa = self.node(a)?.shape.clone();
        let sb = self.node(b)?.shape.clone();
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let (shape, out) = if sa == sb {
            let out = self
                .value(a)
                .iter()
                .zip(self.value(b))
                .map(|(&x, &y)| f(x, y))
                .collect();
            (sa, out)
        } else {
            let shape = broadcast_shape(&sa, &sb)?;
            let oa = broadcast_offsets(&shape, &sa);
            let ob = broadcast_offsets(&shape, &sb);
            let (va, vb) = (self.value(a), self.value(b));
            let out = oa.iter().zip(&ob).map(|(&i, &j)| f(va[i], vb[j])).collect();
            (shape, out)
        };
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
            BinaryKind::Div => "div",
        };
        let op = self.record(&[a, b], Op::Binary { kind, a, b });
        self.push(name, shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    /// Multiplication by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = self.node(x)?.value.iter().map(|v| v * c).collect();
        let shape = self.shape(x).to_vec();
        let op = self.record(&[x], Op::Scale(x, c));
        self.push("scale", shape, out, op)
    }

    fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let f = |v: f64| match kind {
            UnaryKind::Sigmoid => sigmoid(v),
            UnaryKind::Exp => v.exp(),
            UnaryKind::Log => v.ln(),
            UnaryKind::Silu => v * sigmoid(v),
            UnaryKind::LogSigmoid => log_sigmoid(v),
        };
        let out = self.node(x)?.value.iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let name = match kind {
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Silu => "silu",
            UnaryKind::LogSigmoid => "log_sigmoid",
        };
        let op = self.record(&[x], Op::Unary(kind, x));
        self.push(name, shape, out, op)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn silu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Silu, x)
    }

    pub fn log_sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::LogSigmoid, x)
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let shape = self.node(x)?.shape.clone();
        let c = *shape.last().expect("non-empty shape");
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            softmax_in_place(row);
        }
        let op = self.record(&[x], Op::Softmax(x));
        self.push("softmax_lastdim", shape, out, op)
    }

    /// Zero-mean unit-variance normalization over the last axis (no affine).
    pub fn layernorm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.node(x)?.shape.clone();
        let c = *shape.last().expect("non-empty shape");
        let mut out = self.value(x).to_vec();
        let mut inv_std = Vec::with_capacity(out.len() / c);
        for row in out.chunks_mut(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            inv_std.push(r);
        }
        let op = self.record(&[x], Op::LayerNorm { x, inv_std });
        self.push("layernorm", shape, out, op)
    }

    /// Root-mean-square normalization over the last axis (no affine).
    pub fn rmsnorm(&mut self, x: Var, eps: f64) -> Result<Var> {
        let shape = self.node(x)?.shape.clone();
        let c = *shape.last().expect("non-empty shape");
        let mut out = self.value(x).to_vec();
        let mut inv_rms = Vec::with_capacity(out.len() / c);
        for row in out.chunks_mut(c) {
            let ms = row.iter().map(|v| v * v).sum::<f64>() / c as f64;
            let r = 1.0 / (ms + eps).sqrt();
            row.iter_mut().for_each(|v| *v *= r);
            inv_rms.push(r);
        }
        let op = self.record(&[x], Op::RmsNorm { x, inv_rms });
        self.push("rmsnorm", shape, out, op)
    }

    /// `x[.., start..end, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let shape = self.node(x)?.shape.clone();
        ensure!(axis < shape.len(), "slice axis {axis} out of range for {shape:?}");
        ensure!(
            start < end && end <= shape[axis],
            "slice {start}..{end} invalid for axis of length {}",
            shape[axis]
        );
        let (outer, len, inner) = axis_split(&shape, axis);
        let width = end - start;
        let src = self.value(x);
        let mut out = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            out.extend_from_slice(&src[base + start * inner..base + end * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = width;
        let op = self.record(&[x], Op::Slice { x, axis, start });
        self.push("slice", out_shape, out, op)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        ensure!(!xs.is_empty(), "concat of zero tensors");
        let first = self.node(xs[0])?.shape.clone();
        ensure!(axis < first.len(), "concat axis {axis} out of range for {first:?}");
        let mut total = 0;
        for &x in xs {
            let s = &self.node(x)?.shape;
            ensure!(
                s.len() == first.len()
                    && s.iter()
                        .zip(&first)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b),
                "concat shapes {first:?} and {s:?} disagree off axis {axis}"
            );
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = axis_split(&first, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &x in xs {
                let len = self.nodes[x.0].shape[axis];
                let src = &self.nodes[x.0].value;
                out.extend_from_slice(&src[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let op = self.record(
            xs,
            Op::Concat {
                xs: xs.to_vec(),
                axis,
            },
        );
        self.push("concat", shape, out, op)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims2(x, "transpose")?;
        let src = self.value(x);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let op = self.record(&[x], Op::Transpose(x));
        self.push("transpose", vec![c, r], out, op)
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        check_shape(&shape)?;
        let n = self.node(x)?.value.len();
        ensure!(
            numel(&shape) == n,
            "cannot reshape {:?} into {shape:?}",
            self.shape(x)
        );
        let out = self.value(x).to_vec();
        let op = self.record(&[x], Op::Reshape(x));
        self.push("reshape", shape, out, op)
    }

    pub fn cumsum(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.node(x)?.shape.clone();
        ensure!(axis < shape.len(), "cumsum axis {axis} out of range for {shape:?}");
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = self.value(x).to_vec();
        for o in 0..outer {
            for t in 1..len {
                for i in 0..inner {
                    let prev = out[(o * len + t - 1) * inner + i];
                    out[(o * len + t) * inner + i] += prev;
                }
            }
        }
        let op = self.record(&[x], Op::Cumsum { x, axis });
        self.push("cumsum", shape, out, op)
    }

    pub fn cumprod(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.node(x)?.shape.clone();
        ensure!(axis < shape.len(), "cumprod axis {axis} out of range for {shape:?}");
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = self.value(x).to_vec();
        for o in 0..outer {
            for t in 1..len {
                for i in 0..inner {
                    let prev = out[(o * len + t - 1) * inner + i];
                    out[(o * len + t) * inner + i] *= prev;
                }
            }
        }
        let op = self.record(&[x], Op::Cumprod { x, axis });
        self.push("cumprod", shape, out, op)
    }

    /// Sum of all entries, shape `[1]`.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.node(x)?.value.iter().sum();
        let op = self.record(&[x], Op::Sum(x));
        self.push("sum", vec![1], vec![s], op)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.node(x)?.value.len() as f64;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sums out `axis`; the result drops that dimension (a rank-1 input
    /// becomes shape `[1]`).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.node(x)?.shape.clone();
        ensure!(axis < shape.len(), "sum axis {axis} out of range for {shape:?}");
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for t in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += src[(o * len + t) * inner + i];
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let op = self.record(&[x], Op::SumAxis { x, axis });
        self.push("sum_axis", out_shape, out, op)
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        ensure!(lo < hi, "clamp bounds {lo} >= {hi}");
        let out = self.node(x)?.value.iter().map(|v| v.clamp(lo, hi)).collect();
        let shape = self.shape(x).to_vec();
        let op = self.record(&[x], Op::Clamp { x, lo, hi });
        self.push("clamp", shape, out, op)
    }

    /// Row gather: `table[ids[i]]` for each `i`, giving `[len(ids), d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.dims2(table, "embedding")?;
        ensure!(!ids.is_empty(), "embedding lookup of an empty id list");
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "embedding id {bad} out of range for table with {rows} rows"
            )));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let op = self.record(
            &[table],
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        );
        self.push("embedding", vec![ids.len(), d], out, op)
    }

    /// Rotary position embedding on `[N, d]` rows, rotating adjacent pairs
    /// `(2i, 2i+1)` by `pos * base^(-2i/d)`.
    pub fn rope(&mut self, x: Var, positions: &[usize], base: f64) -> Result<Var> {
        let (n, d) = self.dims2(x, "rope")?;
        ensure!(d % 2 == 0, "rope needs an even feature dimension, got {d}");
        ensure!(
            positions.len() == n,
            "rope given {} positions for {n} rows",
            positions.len()
        );
        let mut out = self.value(x).to_vec();
        rope_rows(&mut out, d, positions, base, false);
        let op = self.record(
            &[x],
            Op::Rope {
                x,
                positions: positions.to_vec(),
                base,
            },
        );
        self.push("rope", vec![n, d], out, op)
    }

    /// Per-channel convolution over time of `x: [N, d]` with `w: [K, d]`.
    ///
    /// Causal: `y[t] = sum_j w[j] * x[t - (K-1) + j]`. Centered (odd `K`):
    /// `y[t] = sum_j w[j] * x[t + j - K/2]`. Out-of-range inputs are zero.
    pub fn depthwise_conv1d(&mut self, x: Var, w: Var, causal: bool) -> Result<Var> {
        let (n, d) = self.dims2(x, "depthwise_conv1d")?;
        let (kk, d2) = self.dims2(w, "depthwise_conv1d")?;
        ensure!(d == d2, "conv kernel has {d2} channels, input has {d}");
        ensure!(
            causal || kk % 2 == 1,
            "centered convolution needs an odd kernel, got {kk}"
        );
        let mut out = vec![0.0; n * d];
        conv_forward(self.value(x), self.value(w), &mut out, n, d, kk, causal);
        let op = self.record(&[x, w], Op::DepthwiseConv { x, w, causal });
        self.push("depthwise_conv1d", vec![n, d], out, op)
    }

    /// Mean over rows of `-log softmax(logits[t])[targets[t]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.dims2(logits, "cross_entropy")?;
        ensure!(
            targets.len() == n,
            "cross_entropy given {} targets for {n} rows",
            targets.len()
        );
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::contract(format!(
                "target id {bad} out of range for {v} classes"
            )));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            row.iter_mut().for_each(|z| *z = (*z - lse).exp());
        }
        loss /= n as f64;
        let op = self.record(
            &[logits],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        );
        self.push("cross_entropy", vec![1], vec![loss], op)
    }

    /// Multi-head gated linear recurrence fused into one node.
    ///
    /// `q, k, alpha: [N, H*dk]`, `v: [N, H*dv]`, `s0: [H*dk, dv]` (head `h`
    /// owns rows `h*dk..(h+1)*dk`). Per head and step:
    /// `S_t = diag(alpha_t) S_{t-1} + k_t^T v_t`, `o_t = q_t S_t`.
    /// Returns `(O: [N, H*dv], S_N: [H*dk, dv])`.
    pub fn gla_recurrent(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        alpha: Var,
        s0: Var,
        heads: usize,
    ) -> Result<(Var, Var)> {
        ensure!(heads >= 1, "gla needs at least one head");
        let (n, qk) = self.dims2(q, "gla_recurrent")?;
        let (nk, kk) = self.dims2(k, "gla_recurrent")?;
        let (nv, vv) = self.dims2(v, "gla_recurrent")?;
        let (na, ak) = self.dims2(alpha, "gla_recurrent")?;
        let (sr, sc) = self.dims2(s0, "gla_recurrent")?;
        ensure!(
            n == nk && n == nv && n == na,
            "gla inputs disagree on sequence length: q {n}, k {nk}, v {nv}, alpha {na}"
        );
        ensure!(
            qk == kk && qk == ak,
            "gla q/k/alpha widths differ: {qk}, {kk}, {ak}"
        );
        ensure!(
            qk % heads == 0 && vv % heads == 0,
            "gla widths {qk}/{vv} not divisible by {heads} heads"
        );
        let dims = GlaDims {
            n,
            heads,
            dk: qk / heads,
            dv: vv / heads,
        };
        ensure!(
            sr == qk && sc == dims.dv,
            "gla state has shape [{sr}, {sc}], expected [{qk}, {}]",
            dims.dv
        );
        if let Some(bad) = self.value(alpha).iter().position(|&a| !(a > 0.0 && a < 1.0)) {
            return Err(Error::contract(format!(
                "decay gate {} at step {} outside (0, 1)",
                self.value(alpha)[bad],
                bad / qk
            )));
        }
        let (out, states) = gla_forward(
            self.value(q),
            self.value(k),
            self.value(v),
            self.value(alpha),
            self.value(s0),
            dims,
        );
        let o_len = n * vv;
        let needs = self.needs(&[q, k, v, alpha, s0]);
        let op = if needs {
            Op::GlaRecurrent {
                q,
                k,
                v,
                alpha,
                s0,
                dims,
                states,
            }
        } else {
            Op::Const
        };
        let packed_len = out.len();
        let packed = self.push("gla_recurrent", vec![packed_len], out, op)?;
        let o = self.slice(packed, 0, 0, o_len)?;
        let o = self.reshape(o, [n, vv])?;
        let s = self.slice(packed, 0, o_len, packed_len)?;
        let s = self.reshape(s, [qk, dims.dv])?;
        Ok((o, s))
    }

    #[cfg(test)]
    pub(crate) fn broken_square(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).iter().map(|v| v * v).collect();
        let shape = self.shape(x).to_vec();
        let op = self.record(&[x], Op::BrokenSquare(x));
        self.push("broken_square", shape, out, op)
    }

    // ── backward ────────────────────────────────────────────────────

    /// Propagates d(root)/d(node) to every node on the tape. `root` must be
    /// a single-element tensor. Leaves that require a gradient but are not
    /// reachable from `root` receive zeros.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let rn = self.node(root)?;
        ensure!(
            rn.value.len() == 1,
            "backward root must be a scalar, got shape {:?}",
            rn.shape
        );
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backward_node(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        self.grads = grads;
        Ok(())
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` into `t`'s gradient slot.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match self.grad(v) {
            Some(g) => t.accumulate_grad(g),
            None => Err(Error::contract(format!(
                "no gradient recorded for variable {}",
                v.0
            ))),
        }
    }

    fn send(&self, grads: &mut [Option<Vec<f64>>], to: Var, g: Vec<f64>) {
        if self.nodes[to.0].requires_grad {
            add_into(&mut grads[to.0], g);
        }
    }

    fn backward_node(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Const => {}
            Op::Matmul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let b_row = &vb[p * n..(p + 1) * n];
                            ga[i * k + p] = g_row.iter().zip(b_row).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let g_row = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = va[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(g_row) {
                                *o += av * gv;
                            }
                        }
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::Binary { kind, a, b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (va, vb) = (self.value(*a), self.value(*b));
                let same = sa == node.shape.as_slice() && sb == node.shape.as_slice();
                let (oa, ob) = if same {
                    (None, None)
                } else {
                    (
                        Some(broadcast_offsets(&node.shape, sa)),
                        Some(broadcast_offsets(&node.shape, sb)),
                    )
                };
                let ia = |o: usize| oa.as_ref().map_or(o, |v| v[o]);
                let ib = |o: usize| ob.as_ref().map_or(o, |v| v[o]);
                if self.requires_grad(*a) {
                    let mut ga = vec![0.0; va.len()];
                    for (o, &gv) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add | BinaryKind::Sub => gv,
                            BinaryKind::Mul => gv * vb[ib(o)],
                            BinaryKind::Div => gv / vb[ib(o)],
                        };
                        ga[ia(o)] += d;
                    }
                    self.send(grads, *a, ga);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![0.0; vb.len()];
                    for (o, &gv) in g.iter().enumerate() {
                        let d = match kind {
                            BinaryKind::Add => gv,
                            BinaryKind::Sub => -gv,
                            BinaryKind::Mul => gv * va[ia(o)],
                            BinaryKind::Div => {
                                let y = vb[ib(o)];
                                -gv * va[ia(o)] / (y * y)
                            }
                        };
                        gb[ib(o)] += d;
                    }
                    self.send(grads, *b, gb);
                }
            }
            Op::Scale(x, c) => {
                let gx = g.iter().map(|v| v * c).collect();
                self.send(grads, *x, gx);
            }
            Op::Unary(kind, x) => {
                let vx = self.value(*x);
                let y = &node.value;
                let gx = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gv)| {
                        gv * match kind {
                            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
                            UnaryKind::Exp => y[i],
                            UnaryKind::Log => 1.0 / vx[i],
                            UnaryKind::Silu => {
                                let s = sigmoid(vx[i]);
                                s * (1.0 + vx[i] * (1.0 - s))
                            }
                            UnaryKind::LogSigmoid => sigmoid(-vx[i]),
                        }
                    })
                    .collect();
                self.send(grads, *x, gx);
            }
            Op::Softmax(x) => {
                let c = *node.shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for ((gr, yr), out) in g.chunks(c).zip(node.value.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::LayerNorm { x, inv_std } => {
                let c = *node.shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for (r, ((gr, yr), out)) in g
                    .chunks(c)
                    .zip(node.value.chunks(c))
                    .zip(gx.chunks_mut(c))
                    .enumerate()
                {
                    let mg = gr.iter().sum::<f64>() / c as f64;
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        out[j] = inv_std[r] * (gr[j] - mg - yr[j] * mgy);
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::RmsNorm { x, inv_rms } => {
                let c = *node.shape.last().unwrap();
                let mut gx = vec![0.0; g.len()];
                for (r, ((gr, yr), out)) in g
                    .chunks(c)
                    .zip(node.value.chunks(c))
                    .zip(gx.chunks_mut(c))
                    .enumerate()
                {
                    let mgy = gr.iter().zip(yr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        out[j] = inv_rms[r] * (gr[j] - yr[j] * mgy);
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::Slice { x, axis, start } => {
                let sx = self.shape(*x);
                let (outer, len, inner) = axis_split(sx, *axis);
                let width = node.shape[*axis];
                let mut gx = vec![0.0; numel(sx)];
                for o in 0..outer {
                    let dst = o * len * inner + start * inner;
                    let src = o * width * inner;
                    gx[dst..dst + width * inner].copy_from_slice(&g[src..src + width * inner]);
                }
                self.send(grads, *x, gx);
            }
            Op::Concat { xs, axis } => {
                let (outer, total, inner) = axis_split(&node.shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let len = self.shape(x)[*axis];
                    if self.requires_grad(x) {
                        let mut gx = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[base..base + len * inner]);
                        }
                        self.send(grads, x, gx);
                    }
                    offset += len;
                }
            }
            Op::Transpose(x) => {
                let (r, c) = (self.shape(*x)[0], self.shape(*x)[1]);
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        gx[i * c + j] = g[j * r + i];
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::Reshape(x) => self.send(grads, *x, g.to_vec()),
            Op::Cumsum { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let mut gx = g.to_vec();
                for o in 0..outer {
                    for t in (0..len.saturating_sub(1)).rev() {
                        for i in 0..inner {
                            let next = gx[(o * len + t + 1) * inner + i];
                            gx[(o * len + t) * inner + i] += next;
                        }
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::Cumprod { x, axis } => {
                // dx_i = y_{i-1} * r_i with r_i = g_i + x_{i+1} r_{i+1}; no division.
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let vx = self.value(*x);
                let y = &node.value;
                let mut gx = vec![0.0; g.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |t: usize| (o * len + t) * inner + i;
                        let mut r = 0.0;
                        for t in (0..len).rev() {
                            r = if t + 1 < len { g[at(t)] + vx[at(t + 1)] * r } else { g[at(t)] };
                            let prev = if t == 0 { 1.0 } else { y[at(t - 1)] };
                            gx[at(t)] = prev * r;
                        }
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.send(grads, *x, vec![g[0]; n]);
            }
            Op::SumAxis { x, axis } => {
                let sx = self.shape(*x);
                let (outer, len, inner) = axis_split(sx, *axis);
                let mut gx = vec![0.0; numel(sx)];
                for o in 0..outer {
                    for t in 0..len {
                        for i in 0..inner {
                            gx[(o * len + t) * inner + i] = g[o * inner + i];
                        }
                    }
                }
                self.send(grads, *x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let vx = self.value(*x);
                let gx = g
                    .iter()
                    .zip(vx)
                    .map(|(&gv, &xv)| if xv > *lo && xv < *hi { gv } else { 0.0 })
                    .collect();
                self.send(grads, *x, gx);
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![0.0; self.value(*table).len()];
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] += g[r * d + j];
                    }
                }
                self.send(grads, *table, gt);
            }
            Op::Rope { x, positions, base } => {
                let d = node.shape[1];
                let mut gx = g.to_vec();
                rope_rows(&mut gx, d, positions, *base, true);
                self.send(grads, *x, gx);
            }
            Op::DepthwiseConv { x, w, causal } => {
                let (n, d) = (node.shape[0], node.shape[1]);
                let kk = self.shape(*w)[0];
                let (vx, vw) = (self.value(*x), self.value(*w));
                let mut gx = vec![0.0; n * d];
                let mut gw = vec![0.0; kk * d];
                for t in 0..n {
                    for j in 0..kk {
                        let Some(s) = conv_source(t, j, kk, n, *causal) else { continue };
                        for c in 0..d {
                            let gv = g[t * d + c];
                            gx[s * d + c] += vw[j * d + c] * gv;
                            gw[j * d + c] += vx[s * d + c] * gv;
                        }
                    }
                }
                self.send(grads, *x, gx);
                self.send(grads, *w, gw);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let v = self.shape(*logits)[1];
                let scale = g[0] / targets.len() as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * v + t] -= scale;
                }
                self.send(grads, *logits, gl);
            }
            Op::GlaRecurrent {
                q,
                k,
                v,
                alpha,
                s0,
                dims,
                states,
            } => {
                let (dq, dk, dv, da, ds0) = gla_backward(
                    self.value(*q),
                    self.value(*k),
                    self.value(*v),
                    self.value(*alpha),
                    states,
                    g,
                    *dims,
                );
                self.send(grads, *q, dq);
                self.send(grads, *k, dk);
                self.send(grads, *v, dv);
                self.send(grads, *alpha, da);
                self.send(grads, *s0, ds0);
            }
            #[cfg(test)]
            Op::BrokenSquare(x) => {
                // Deliberately wrong: should be 2x.
                let gx = g.iter().zip(self.value(*x)).map(|(gv, xv)| gv * xv).collect();
                self.send(grads, *x, gx);
            }
        }
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    row.iter_mut().for_each(|v| *v /= total);
}

fn rope_rows(data: &mut [f64], d: usize, positions: &[usize], base: f64, inverse: bool) {
    let half = d / 2;
    let freqs: Vec<f64> = (0..half)
        .map(|i| base.powf(-((2 * i) as f64) / d as f64))
        .collect();
    for (row, &pos) in data.chunks_mut(d).zip(positions) {
        for (i, f) in freqs.iter().enumerate() {
            let angle = pos as f64 * f;
            let (s, c) = angle.sin_cos();
            let s = if inverse { -s } else { s };
            let (x0, x1) = (row[2 * i], row[2 * i + 1]);
            row[2 * i] = x0 * c - x1 * s;
            row[2 * i + 1] = x0 * s + x1 * c;
        }
    }
}

fn conv_source(t: usize, j: usize, kk: usize, n: usize, causal: bool) -> Option<usize> {
    let s = if causal {
        (t + j).checked_sub(kk - 1)?
    } else {
        (t + j).checked_sub(kk / 2)?
    };
    (s < n).then_some(s)
}

fn conv_forward(x: &[f64], w: &[f64], out: &mut [f64], n: usize, d: usize, kk: usize, causal: bool) {
    for t in 0..n {
        for j in 0..kk {
            let Some(s) = conv_source(t, j, kk, n, causal) else { continue };
            for c in 0..d {
                out[t * d + c] += w[j * d + c] * x[s * d + c];
            }
        }
    }
}

/// Forward pass of the fused recurrence. Returns the packed output
/// `[O (N*H*dv), S_N (H*dk*dv)]` and the saved state trajectory.
pub(crate) fn gla_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    alpha: &[f64],
    s0: &[f64],
    dims: GlaDims,
) -> (Vec<f64>, Vec<f64>) {
    let GlaDims { n, heads, dk, dv } = dims;
    let hk = heads * dk;
    let hv = heads * dv;
    let state_len = hk * dv;
    let mut states = Vec::with_capacity((n + 1) * state_len);
    states.extend_from_slice(s0);
    let mut out = vec![0.0; n * hv + state_len];
    let mut s = s0.to_vec();
    for t in 0..n {
        gla_step(
            &mut s,
            &q[t * hk..(t + 1) * hk],
            &k[t * hk..(t + 1) * hk],
            &v[t * hv..(t + 1) * hv],
            &alpha[t * hk..(t + 1) * hk],
            &mut out[t * hv..(t + 1) * hv],
            heads,
            dk,
            dv,
        );
        states.extend_from_slice(&s);
    }
    out[n * hv..].copy_from_slice(&s);
    (out, states)
}

/// One recurrence step for all heads, in place on `s`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gla_step(
    s: &mut [f64],
    q: &[f64],
    k: &[f64],
    v: &[f64],
    alpha: &[f64],
    o: &mut [f64],
    heads: usize,
    dk: usize,
    dv: usize,
) {
    for h in 0..heads {
        let vt = &v[h * dv..(h + 1) * dv];
        let ot = &mut o[h * dv..(h + 1) * dv];
        ot.iter_mut().for_each(|x| *x = 0.0);
        for j in 0..dk {
            let r = h * dk + j;
            let row = &mut s[r * dv..(r + 1) * dv];
            let (a, kj, qj) = (alpha[r], k[r], q[r]);
            for (sm, &vm) in row.iter_mut().zip(vt) {
                *sm = a * *sm + kj * vm;
            }
            for (om, &sm) in ot.iter_mut().zip(row.iter()) {
                *om += qj * sm;
            }
        }
    }
}

#[allow(clippy::type_complexity)]
fn gla_backward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    alpha: &[f64],
    states: &[f64],
    g: &[f64],
    dims: GlaDims,
) -> (Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>) {
    let GlaDims { n, heads, dk, dv } = dims;
    let hk = heads * dk;
    let hv = heads * dv;
    let state_len = hk * dv;
    let mut dq = vec![0.0; n * hk];
    let mut dkk = vec![0.0; n * hk];
    let mut dvv = vec![0.0; n * hv];
    let mut da = vec![0.0; n * hk];
    // Gradient flowing into S_N from outside.
    let mut ds = g[n * hv..].to_vec();
    for t in (0..n).rev() {
        let s_t = &states[(t + 1) * state_len..(t + 2) * state_len];
        let s_prev = &states[t * state_len..(t + 1) * state_len];
        let go = &g[t * hv..(t + 1) * hv];
        for h in 0..heads {
            let go_h = &go[h * dv..(h + 1) * dv];
            let v_h = &v[t * hv + h * dv..t * hv + (h + 1) * dv];
            for j in 0..dk {
                let r = h * dk + j;
                let row_s = &s_t[r * dv..(r + 1) * dv];
                let row_prev = &s_prev[r * dv..(r + 1) * dv];
                let row_ds = &mut ds[r * dv..(r + 1) * dv];
                let qj = q[t * hk + r];
                let mut dq_acc = 0.0;
                for m in 0..dv {
                    dq_acc += go_h[m] * row_s[m];
                    row_ds[m] += qj * go_h[m];
                }
                dq[t * hk + r] = dq_acc;
                let kj = k[t * hk + r];
                let mut dk_acc = 0.0;
                let mut da_acc = 0.0;
                for m in 0..dv {
                    dk_acc += row_ds[m] * v_h[m];
                    da_acc += row_ds[m] * row_prev[m];
                    dvv[t * hv + h * dv + m] += kj * row_ds[m];
                }
                dkk[t * hk + r] = dk_acc;
                da[t * hk + r] = da_acc;
                let a = alpha[t * hk + r];
                row_ds.iter_mut().for_each(|x| *x *= a);
            }
        }
    }
    (dq, dkk, dvv, da, ds)
}
