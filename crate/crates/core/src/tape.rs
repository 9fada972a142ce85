//! Reverse-mode automatic differentiation over dense 2-D tensors.
//!
//! A [`Tape`] owns every intermediate value of one computation. Operations
//! append a node holding the output value and enough saved state to run the
//! backward rule; nodes are appended in evaluation order, so the tape is
//! topologically sorted by construction. [`Tape::backward`] walks it once in
//! reverse.
//!
//! Each operation checks its output for non-finite values and reports a
//! [`Error::Numeric`] naming the operation rather than letting NaN travel.

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Masked-out attention scores are pushed to this value before the softmax.
/// It is finite so the no-infinity invariant holds, and far enough below any
/// real score that `exp` underflows to exactly zero.
const MASKED: f64 = -1.0e30;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MulScalar(Var, Var),
    Exp(Var),
    Clamp(Var, f64, f64),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    Transpose(Var),
    SoftmaxRows(Var),
    CausalMask(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Gather(Var, Vec<usize>),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    RowNorms(Var),
    NormalizeRows(Var, Vec<f64>),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros when nothing flowed into it.
    pub fn tensor(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match self.get(v) {
            Some(g) => Tensor::new(shape.clone(), g.to_vec()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dims2()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(format!("non-finite output from {name}")));
        }
        let requires_grad = inputs.iter().any(|&v| self.needs(v));
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, &[sa.0, sa.1], &[sb.0, sb.1]));
        }
        Ok(sa)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        if k != k2 {
            return Err(Error::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("add", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x + y);
        self.push("add", Tensor::new(vec![r, c], out)?, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("sub", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x - y);
        self.push("sub", Tensor::new(vec![r, c], out)?, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, c) = self.same_shape("mul", a, b)?;
        let out = zip_map(self.data(a), self.data(b), |x, y| x * y);
        self.push("mul", Tensor::new(vec![r, c], out)?, Op::Mul(a, b), &[a, b])
    }

    /// `x[m×n] + row[1×n]` broadcast over rows (bias add).
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (m, n) = self.shape(x);
        let (r1, n2) = self.shape(row);
        if r1 != 1 || n != n2 {
            return Err(Error::shape("add_row", &[m, n], &[r1, n2]));
        }
        let b = self.data(row);
        let out: Vec<f64> = self
            .data(x)
            .chunks(n)
            .flat_map(|r| r.iter().zip(b).map(|(x, y)| x + y))
            .collect();
        self.push("add_row", Tensor::new(vec![m, n], out)?, Op::AddRow(x, row), &[x, row])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.data(x).iter().map(|v| v * s).collect();
        self.push("scale", Tensor::new(vec![r, c], out)?, Op::Scale(x, s), &[x])
    }

    /// `x * s` where `s` is a `[1×1]` node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            let (a, b) = self.shape(s);
            return Err(Error::shape("mul_scalar", &[1, 1], &[a, b]));
        }
        let sv = self.data(s)[0];
        let (r, c) = self.shape(x);
        let out = self.data(x).iter().map(|v| v * sv).collect();
        self.push("mul_scalar", Tensor::new(vec![r, c], out)?, Op::MulScalar(x, s), &[x, s])
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.data(x).iter().map(|v| v.exp()).collect();
        self.push("exp", Tensor::new(vec![r, c], out)?, Op::Exp(x), &[x])
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self.data(x).iter().map(|v| v.clamp(lo, hi)).collect();
        self.push("clamp", Tensor::new(vec![r, c], out)?, Op::Clamp(x, lo, hi), &[x])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let cols = self.shape(parts[0]).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.shape(p);
            if c != cols {
                return Err(Error::shape("concat_rows", &[rows, cols], &[r, c]));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        self.push(
            "concat_rows",
            Tensor::new(vec![rows, cols], out)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0]).0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.shape(p);
            if r != rows {
                return Err(Error::shape("concat_cols", &[rows, 0], &[r, c]));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        self.push(
            "concat_cols",
            Tensor::new(vec![rows, total], out)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    /// Rows `start..end`.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start >= end || end > r {
            return Err(Error::shape("slice_rows", &[r, c], &[start, end]));
        }
        let out = self.data(x)[start * c..end * c].to_vec();
        self.push(
            "slice_rows",
            Tensor::new(vec![end - start, c], out)?,
            Op::SliceRows(x, start),
            &[x],
        )
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start >= end || end > c {
            return Err(Error::shape("slice_cols", &[r, c], &[start, end]));
        }
        let w = end - start;
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * w);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + end]);
        }
        self.push(
            "slice_cols",
            Tensor::new(vec![r, w], out)?,
            Op::SliceCols(x, start),
            &[x],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = transposed(self.data(x), r, c);
        self.push("transpose", Tensor::new(vec![c, r], out)?, Op::Transpose(x), &[x])
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut out = Vec::with_capacity(r * c);
        for row in self.data(x).chunks(c) {
            out.extend(softmax(row));
        }
        self.push("softmax_rows", Tensor::new(vec![r, c], out)?, Op::SoftmaxRows(x), &[x])
    }

    /// Causal mask for a block of queries that starts at absolute position
    /// `offset`: row `i` may see columns `0..=offset + i`, the rest are set
    /// to a large negative value.
    pub fn causal_mask(&mut self, x: Var, offset: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if offset + r > c {
            return Err(Error::shape("causal_mask", &[r, c], &[offset + r, c]));
        }
        let mut out = self.data(x).to_vec();
        for i in 0..r {
            for v in &mut out[i * c + offset + i + 1..(i + 1) * c] {
                *v = MASKED;
            }
        }
        self.push("causal_mask", Tensor::new(vec![r, c], out)?, Op::CausalMask(x, offset), &[x])
    }

    /// Row-wise layer normalisation with learned gain and bias (`[1×n]`).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (r, c) = self.shape(x);
        for p in [gain, bias] {
            let s = self.shape(p);
            if s != (1, c) {
                return Err(Error::shape("layer_norm", &[r, c], &[s.0, s.1]));
            }
        }
        let g = self.data(gain);
        let b = self.data(bias);
        let mut out = Vec::with_capacity(r * c);
        let mut xhat = Vec::with_capacity(r * c);
        let mut rstd = Vec::with_capacity(r);
        for row in self.data(x).chunks(c) {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        self.push(
            "layer_norm",
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out = self
            .data(x)
            .iter()
            .map(|&v| 0.5 * v * (1.0 + (GELU_C * (v + 0.044715 * v * v * v)).tanh()))
            .collect();
        self.push("gelu", Tensor::new(vec![r, c], out)?, Op::Gelu(x), &[x])
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (r, c) = self.shape(table);
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= r) {
            return Err(Error::Data(format!("token id {bad} outside table of {r} rows")));
        }
        let src = self.data(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        self.push(
            "gather_rows",
            Tensor::new(vec![ids.len(), c], out)?,
            Op::Gather(table, ids.to_vec()),
            &[table],
        )
    }

    /// Mean softmax cross-entropy over the rows that carry a target.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, c) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", &[r, c], &[targets.len()]));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::Contract("cross_entropy needs at least one target".into()));
        }
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for (i, (row, t)) in self.data(logits).chunks(c).zip(targets).enumerate() {
            let Some(t) = *t else { continue };
            if t >= c {
                return Err(Error::Data(format!("target {t} outside {c} classes")));
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            total += lse - row[t];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(total / count as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Euclidean norm of every row, as an `[r×1]` column.
    pub fn row_norms(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let out: Vec<f64> = self
            .data(x)
            .chunks(c)
            .map(|row| row.iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if out.contains(&0.0) {
            return Err(Error::Data("zero-norm row in row_norms".into()));
        }
        self.push("row_norms", Tensor::new(vec![r, 1], out)?, Op::RowNorms(x), &[x])
    }

    /// Scales every row to unit Euclidean norm.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let mut norms = Vec::with_capacity(r);
        let mut out = Vec::with_capacity(r * c);
        for row in self.data(x).chunks(c) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::Data("zero-norm vector cannot be normalised".into()));
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        self.push(
            "normalize_rows",
            Tensor::new(vec![r, c], out)?,
            Op::NormalizeRows(x, norms),
            &[x],
        )
    }

    /// Pairwise cosine similarity between the rows of `a` and `b`.
    pub fn cosine_similarity(&mut self, a: Var, b: Var) -> Result<Var> {
        let na = self.normalize_rows(a)?;
        let nb = self.normalize_rows(b)?;
        let nbt = self.transpose(nb)?;
        self.matmul(na, nbt)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.data(x).iter().sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let d = self.data(x);
        let s = d.iter().sum::<f64>() / d.len() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Backpropagates from the scalar `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.shape(root) != (1, 1) {
            let (r, c) = self.shape(root);
            return Err(Error::Contract(format!(
                "backward needs a scalar output, got [{r}x{c}]"
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        let (r, c) = node.value.dims2();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = c;
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    let bt = transposed(self.data(*b), k, n);
                    let mut da = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut da, m, n, k);
                    self.accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    let at = transposed(self.data(*a), m, k);
                    let mut db = vec![0.0; k * n];
                    matmul_into(&at, g, &mut db, k, m, n);
                    self.accum(grads, *b, &db);
                }
            }
            Op::Add(a, b) => {
                self.accum(grads, *a, g);
                self.accum(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, g);
                if self.needs(*b) {
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    self.accum(grads, *b, &neg);
                }
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let da = zip_map(g, self.data(*b), |x, y| x * y);
                    self.accum(grads, *a, &da);
                }
                if self.needs(*b) {
                    let db = zip_map(g, self.data(*a), |x, y| x * y);
                    self.accum(grads, *b, &db);
                }
            }
            Op::AddRow(x, row) => {
                self.accum(grads, *x, g);
                if self.needs(*row) {
                    let mut db = vec![0.0; c];
                    for gr in g.chunks(c) {
                        db.iter_mut().zip(gr).for_each(|(d, v)| *d += v);
                    }
                    self.accum(grads, *row, &db);
                }
            }
            Op::Scale(x, s) => {
                let dx: Vec<f64> = g.iter().map(|v| v * s).collect();
                self.accum(grads, *x, &dx);
            }
            Op::MulScalar(x, s) => {
                let sv = self.data(*s)[0];
                if self.needs(*x) {
                    let dx: Vec<f64> = g.iter().map(|v| v * sv).collect();
                    self.accum(grads, *x, &dx);
                }
                if self.needs(*s) {
                    let ds: f64 = g.iter().zip(self.data(*x)).map(|(a, b)| a * b).sum();
                    self.accum(grads, *s, &[ds]);
                }
            }
            Op::Exp(x) => {
                let dx = zip_map(g, out, |a, b| a * b);
                self.accum(grads, *x, &dx);
            }
            Op::Clamp(x, lo, hi) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(gv, xv)| if xv < lo || xv > hi { 0.0 } else { *gv })
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    self.accum(grads, p, &g[offset..offset + n]);
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let mut col = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.needs(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g[i * c + col..i * c + col + w]);
                        }
                        self.accum(grads, p, &dp);
                    }
                    col += w;
                }
            }
            Op::SliceRows(x, start) => {
                if self.needs(*x) {
                    let (_, xc) = self.shape(*x);
                    let slot = self.slot(grads, *x);
                    slot[start * xc..start * xc + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(d, v)| *d += v);
                }
            }
            Op::SliceCols(x, start) => {
                if self.needs(*x) {
                    let (_, xc) = self.shape(*x);
                    let slot = self.slot(grads, *x);
                    for i in 0..r {
                        for j in 0..c {
                            slot[i * xc + start + j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                let dx = transposed(g, r, c);
                self.accum(grads, *x, &dx);
            }
            Op::SoftmaxRows(x) => {
                let mut dx = Vec::with_capacity(r * c);
                for (yr, gr) in out.chunks(c).zip(g.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                self.accum(grads, *x, &dx);
            }
            Op::CausalMask(x, offset) => {
                let mut dx = g.to_vec();
                for i in 0..r {
                    for v in &mut dx[i * c + offset + i + 1..(i + 1) * c] {
                        *v = 0.0;
                    }
                }
                self.accum(grads, *x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.data(*gain);
                if self.needs(*gain) || self.needs(*bias) {
                    let mut dg = vec![0.0; c];
                    let mut db = vec![0.0; c];
                    for (gr, hr) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.accum(grads, *gain, &dg);
                    self.accum(grads, *bias, &db);
                }
                if self.needs(*x) {
                    let mut dx = Vec::with_capacity(r * c);
                    for i in 0..r {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &xhat[i * c..(i + 1) * c];
                        let dh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h =
                            dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        dx.extend(
                            dh.iter()
                                .zip(hr)
                                .map(|(d, h)| rstd[i] * (d - mean_dh - h * mean_dh_h)),
                        );
                    }
                    self.accum(grads, *x, &dx);
                }
            }
            Op::Gelu(x) => {
                let dx: Vec<f64> = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(gv, &v)| {
                        let u = GELU_C * (v + 0.044715 * v * v * v);
                        let t = u.tanh();
                        let du = GELU_C * (1.0 + 3.0 * 0.044715 * v * v);
                        gv * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accum(grads, *x, &dx);
            }
            Op::Gather(table, ids) => {
                if self.needs(*table) {
                    let slot = self.slot(grads, *table);
                    for (i, &id) in ids.iter().enumerate() {
                        slot[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(&g[i * c..(i + 1) * c])
                            .for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let (_, lc) = self.shape(*logits);
                let scale = g[0] / *count as f64;
                let mut dx = vec![0.0; probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..lc {
                        dx[i * lc + j] = probs[i * lc + j] * scale;
                    }
                    dx[i * lc + t] -= scale;
                }
                self.accum(grads, *logits, &dx);
            }
            Op::RowNorms(x) => {
                let (_, xc) = self.shape(*x);
                let xs = self.data(*x);
                let mut dx = Vec::with_capacity(xs.len());
                for (i, row) in xs.chunks(xc).enumerate() {
                    let k = g[i] / out[i];
                    dx.extend(row.iter().map(|v| v * k));
                }
                self.accum(grads, *x, &dx);
            }
            Op::NormalizeRows(x, norms) => {
                let mut dx = Vec::with_capacity(r * c);
                for i in 0..r {
                    let yr = &out[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    dx.extend(yr.iter().zip(gr).map(|(y, g)| (g - y * dot) / norms[i]));
                }
                self.accum(grads, *x, &dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accum(grads, *x, &vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accum(grads, *x, &vec![g[0] / n as f64; n]);
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> &'g mut Vec<f64> {
        let n = self.value(v).len();
        grads[v.0].get_or_insert_with(|| vec![0.0; n])
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(d, s)| *d += s),
            slot @ None => *slot = Some(g.to_vec()),
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn transposed(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}
