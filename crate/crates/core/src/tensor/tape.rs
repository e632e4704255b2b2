//! Reverse-mode tape.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! nodes once in reverse creation order. Nodes whose inputs never require a
//! gradient are marked constant and skipped during the backward sweep.

use super::kernels::{self, gelu, gelu_grad};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f32>,
        rstd: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<f32>,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    MeanRows(Var),
    Sum(Var),
    CausalMask {
        x: Var,
        offset: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f32>,
    requires_grad: bool,
    name: Option<String>,
    op: Op,
}

/// Operation recorder for one forward/backward pass. Single-threaded.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of every `requires_grad` leaf, produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    leaves: Vec<(Var, Option<String>, Vec<f32>)>,
}

impl Gradients {
    /// Gradient for a leaf; `None` if the leaf does not require grad.
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.leaves
            .iter()
            .find(|(var, _, _)| *var == v)
            .map(|(_, _, g)| g.as_slice())
    }

    /// `(name, gradient)` for every named leaf, in creation order.
    pub fn named(&self) -> impl Iterator<Item = (&str, &[f32])> {
        self.leaves
            .iter()
            .filter_map(|(_, n, g)| n.as_deref().map(|n| (n, g.as_slice())))
    }

    pub fn len(&self) -> usize {
        self.leaves.len()
    }

    pub fn is_empty(&self) -> bool {
        self.leaves.is_empty()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.to_vec(),
        rhs: b.to_vec(),
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

    fn push(&mut self, shape: Vec<usize>, data: Vec<f32>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            shape,
            data,
            requires_grad,
            name: None,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf copied from a tensor; inherits its `requires_grad` flag.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), t.requires_grad(), Op::Leaf)
    }

    /// Named leaf; the name is reported back by [`Gradients::named`].
    pub fn param(&mut self, name: &str, t: &Tensor) -> Var {
        let v = self.leaf(t);
        self.nodes[v.0].name = Some(name.to_string());
        v
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f32>) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::DataLength { shape, len: data.len() });
        }
        Ok(self.push(shape, data, false, Op::Leaf))
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.data.clone()).expect("node shape is consistent")
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape[..] {
            [r, c] => Ok((r, c)),
            ref s => Err(mismatch(op, s, &[0, 0])),
        }
    }

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul_nt")?;
        let (n, k2) = self.dims2(b, "matmul_nt")?;
        if k != k2 {
            return Err(mismatch("matmul_nt", self.shape(a), self.shape(b)));
        }
        let out = kernels::matmul_nt(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMulNt(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let out = kernels::transpose(self.value(a), r, c);
        let rg = self.rg(&[a]);
        Ok(self.push(vec![c, r], out, rg, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Add(a, b)))
    }

    /// Adds a row vector (length = last dim of `a`) to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let c = *self.shape(a).last().unwrap_or(&0);
        if self.value(row).len() != c || c == 0 {
            return Err(mismatch("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row);
        let out = self
            .value(a)
            .chunks(c)
            .flat_map(|x| x.iter().zip(r).map(|(x, y)| x + y))
            .collect();
        let rg = self.rg(&[a, row]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::AddRow(a, row)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("mul", self.shape(a), self.shape(b)));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, rg, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| gelu(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, rg, Op::Gelu(a))
    }

    /// Softmax along `axis`, stabilised by max-subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidAxis {
                axis,
                rank: shape.len(),
            });
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let src = self.value(x);
        let out = if inner == 1 {
            kernels::softmax_rows(src, len)
        } else {
            let mut out = vec![0.0f32; src.len()];
            let mut buf = vec![0.0f32; len];
            let mut res = vec![0.0f32; len];
            for o in 0..outer {
                for i in 0..inner {
                    for l in 0..len {
                        buf[l] = src[(o * len + l) * inner + i];
                    }
                    kernels::softmax_into(&buf, &mut res);
                    for l in 0..len {
                        out[(o * len + l) * inner + i] = res[l];
                    }
                }
            }
            out
        };
        let rg = self.rg(&[x]);
        Ok(self.push(shape, out, rg, Op::Softmax { x, axis }))
    }

    /// Layer normalisation over the last dimension (population variance).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let c = *shape.last().unwrap_or(&0);
        if c == 0 || self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(mismatch("layer_norm", &shape, self.shape(gamma)));
        }
        let src = self.value(x);
        let g = self.value(gamma);
        let b = self.value(beta);
        let rows = src.len() / c;
        let mut xhat = vec![0.0f32; src.len()];
        let mut rstd = vec![0.0f32; rows];
        let mut out = vec![0.0f32; src.len()];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|&v| {
                    let d = v as f64 - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..c {
                let xh = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            shape,
            out,
            rg,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
        ))
    }

    /// Mean negative log-likelihood over unmasked rows of `logits[T×V]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims2(logits, "cross_entropy")?;
        if targets.len() != t || mask.len() != t {
            return Err(mismatch("cross_entropy", &[t, v], &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::AllMasked);
        }
        let src = self.value(logits);
        let mut probs = vec![0.0f32; t * v];
        let mut total = 0.0f64;
        for r in 0..t {
            if !mask[r] {
                continue;
            }
            let tgt = targets[r];
            if tgt >= v {
                return Err(Error::TargetOutOfRange {
                    target: tgt,
                    classes: v,
                });
            }
            let row = &src[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
            let sum: f64 = row.iter().map(|&x| (x as f64 - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[tgt] as f64;
            for j in 0..v {
                probs[r * v + j] = ((row[j] as f64 - max).exp() / sum) as f32;
            }
        }
        let loss = (total / count as f64) as f32;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            rg,
            Op::CrossEntropy {
                logits,
                probs,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Row lookup into `table[V×D]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.dims2(table, "embedding")?;
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TargetOutOfRange {
                    target: id,
                    classes: vocab,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), d],
            out,
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Mean over rows: `[R×C] → [1×C]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "mean_rows")?;
        if r == 0 {
            return Err(mismatch("mean_rows", &[r, c], &[1, c]));
        }
        let src = self.value(a);
        let mut acc = vec![0.0f64; c];
        for row in src.chunks(c) {
            for (s, &x) in acc.iter_mut().zip(row) {
                *s += x as f64;
            }
        }
        let out = acc.into_iter().map(|s| (s / r as f64) as f32).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![1, c], out, rg, Op::MeanRows(a)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().map(|&x| x as f64).sum::<f64>() as f32;
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    /// Sets `a[i][j]` to −∞ wherever `j > i + offset`, so query row `i`
    /// (absolute position `i + offset`) only sees keys at or before it.
    pub fn causal_mask(&mut self, a: Var, offset: usize) -> Result<Var> {
        let (r, c) = self.dims2(a, "causal_mask")?;
        let mut out = self.value(a).to_vec();
        for i in 0..r {
            for j in (i + offset + 1).min(c)..c {
                out[i * c + j] = f32::NEG_INFINITY;
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![r, c], out, rg, Op::CausalMask { x: a, offset }))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_cols")?;
        if start + len > c {
            return Err(mismatch("slice_cols", &[r, c], &[start, len]));
        }
        let src = self.value(x);
        let out = (0..r)
            .flat_map(|i| src[i * c + start..i * c + start + len].iter().copied())
            .collect();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![r, len], out, rg, Op::SliceCols { x, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Config("concat of nothing".into()))?;
        let (r, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_cols")?;
            if pr != r {
                return Err(mismatch("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![r, total], out, rg, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2(x, "slice_rows")?;
        if start + len > r {
            return Err(mismatch("slice_rows", &[r, c], &[start, len]));
        }
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(vec![len, c], out, rg, Op::SliceRows { x, start }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Config("concat of nothing".into()))?;
        let (_, c) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (pr, pc) = self.dims2(p, "concat_rows")?;
            if pc != c {
                return Err(mismatch("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += pr;
            out.extend_from_slice(self.value(p));
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![rows, c], out, rg, Op::ConcatRows(parts.to_vec())))
    }

    /// `x · wᵀ (+ b)` for a weight stored as `[out×in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul_nt(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.data.len() != 1 {
            return Err(Error::NotScalar(ln.shape.clone()));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; loss.0 + 1];
        if ln.requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop(node, &g, &mut grads);
        }
        let leaves = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.requires_grad && matches!(n.op, Op::Leaf))
            .map(|(i, n)| {
                let g = grads
                    .get_mut(i)
                    .and_then(Option::take)
                    .unwrap_or_else(|| vec![0.0; n.data.len()]);
                (Var(i), n.name.clone(), g)
            })
            .collect();
        Ok(Gradients { leaves })
    }

    fn backprop(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if wants(a) {
                    acc(grads, *a, kernels::matmul_nt(g, &nodes[b.0].data, m, n, k));
                }
                if wants(b) {
                    acc(grads, *b, kernels::matmul_tn(&nodes[a.0].data, g, k, m, n));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                if wants(a) {
                    acc(grads, *a, kernels::matmul(g, &nodes[b.0].data, m, n, k));
                }
                if wants(b) {
                    acc(grads, *b, kernels::matmul_tn(g, &nodes[a.0].data, n, m, k));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                acc(grads, *a, kernels::transpose(g, c, r));
            }
            Op::Add(a, b) => {
                if wants(a) {
                    acc(grads, *a, g.to_vec());
                }
                if wants(b) {
                    acc(grads, *b, g.to_vec());
                }
            }
            Op::AddRow(a, row) => {
                if wants(a) {
                    acc(grads, *a, g.to_vec());
                }
                if wants(row) {
                    let c = nodes[row.0].data.len();
                    let mut s = vec![0.0f32; c];
                    for chunk in g.chunks(c) {
                        s.iter_mut().zip(chunk).for_each(|(s, &x)| *s += x);
                    }
                    acc(grads, *row, s);
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].data, &nodes[b.0].data);
                if wants(a) {
                    acc(grads, *a, g.iter().zip(bv).map(|(g, b)| g * b).collect());
                }
                if wants(b) {
                    acc(grads, *b, g.iter().zip(av).map(|(g, a)| g * a).collect());
                }
            }
            Op::Scale(a, s) => acc(grads, *a, g.iter().map(|x| x * s).collect()),
            Op::Gelu(a) => {
                let x = &nodes[a.0].data;
                acc(grads, *a, g.iter().zip(x).map(|(g, &x)| g * gelu_grad(x)).collect());
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(&node.shape, *axis);
                let y = &node.data;
                let mut dx = vec![0.0f32; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: f32 = (0..len).map(|l| y[idx(l)] * g[idx(l)]).sum();
                        for l in 0..len {
                            dx[idx(l)] = y[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
                acc(grads, *x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = nodes[gamma.0].data.len();
                let gm = &nodes[gamma.0].data;
                if wants(x) {
                    let mut dx = vec![0.0f32; g.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let xr = &xhat[r * c..(r + 1) * c];
                        let mut m1 = 0.0f64;
                        let mut m2 = 0.0f64;
                        for j in 0..c {
                            let d = (gr[j] * gm[j]) as f64;
                            m1 += d;
                            m2 += d * xr[j] as f64;
                        }
                        m1 /= c as f64;
                        m2 /= c as f64;
                        for j in 0..c {
                            let d = (gr[j] * gm[j]) as f64;
                            dx[r * c + j] = (rs as f64 * (d - m1 - xr[j] as f64 * m2)) as f32;
                        }
                    }
                    acc(grads, *x, dx);
                }
                if wants(gamma) {
                    let mut dg = vec![0.0f32; c];
                    for (gr, xr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j];
                        }
                    }
                    acc(grads, *gamma, dg);
                }
                if wants(beta) {
                    let mut db = vec![0.0f32; c];
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(d, &x)| *d += x);
                    }
                    acc(grads, *beta, db);
                }
            }
            Op::CrossEntropy {
                logits,
                probs,
                targets,
                mask,
                count,
            } => {
                let v = nodes[logits.0].shape[1];
                let scale = g[0] / *count as f32;
                let mut dl = vec![0.0f32; probs.len()];
                for (r, &m) in mask.iter().enumerate() {
                    if !m {
                        continue;
                    }
                    for j in 0..v {
                        dl[r * v + j] = probs[r * v + j] * scale;
                    }
                    dl[r * v + targets[r]] -= scale;
                }
                acc(grads, *logits, dl);
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].shape[1];
                let mut dt = vec![0.0f32; nodes[table.0].data.len()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                acc(grads, *table, dt);
            }
            Op::MeanRows(a) => {
                let r = nodes[a.0].shape[0];
                let inv = 1.0 / r as f32;
                let row: Vec<f32> = g.iter().map(|x| x * inv).collect();
                acc(grads, *a, row.repeat(r));
            }
            Op::Sum(a) => acc(grads, *a, vec![g[0]; nodes[a.0].data.len()]),
            Op::CausalMask { x: a, offset } => {
                let (r, c) = (node.shape[0], node.shape[1]);
                let mut dx = g.to_vec();
                for i in 0..r {
                    for j in (i + offset + 1).min(c)..c {
                        dx[i * c + j] = 0.0;
                    }
                }
                acc(grads, *a, dx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = (nodes[x.0].shape[0], nodes[x.0].shape[1]);
                let len = node.shape[1];
                let mut dx = vec![0.0f32; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(grads, *x, dx);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = (node.shape[0], node.shape[1]);
                let mut off = 0;
                for p in parts {
                    let w = nodes[p.0].shape[1];
                    if wants(p) {
                        let dx = (0..r)
                            .flat_map(|i| g[i * total + off..i * total + off + w].iter().copied())
                            .collect();
                        acc(grads, *p, dx);
                    }
                    off += w;
                }
            }
            Op::SliceRows { x, start } => {
                let c = node.shape[1];
                let mut dx = vec![0.0f32; nodes[x.0].data.len()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                acc(grads, *x, dx);
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = nodes[p.0].data.len();
                    if wants(p) {
                        acc(grads, *p, g[off..off + n].to_vec());
                    }
                    off += n;
                }
            }
        }
    }
}

fn acc(grads: &mut [Option<Vec<f32>>], v: Var, g: Vec<f32>) {
    match &mut grads[v.0] {
        Some(buf) => buf.iter_mut().zip(&g).for_each(|(a, b)| *a += *b),
        slot @ None => *slot = Some(g),
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
