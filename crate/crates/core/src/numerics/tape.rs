//! Dynamic tape for reverse-mode differentiation.
//!
//! Nodes are appended in evaluation order, so walking the tape backward from
//! the loss visits every node after all of its consumers. Leaves may borrow
//! their data (model parameters) for the lifetime of the tape.

use std::borrow::Cow;

use super::kernels::{self, AttnMask};
use super::{NumericsError, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Sum(Var),
    Mean(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        stats: Vec<(f64, f64)>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: Vec<f64>,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
    KlDiv {
        logits: Var,
        teacher: Var,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
}

impl Node<'_> {
    fn rows(&self) -> usize {
        self.value.len() / self.cols()
    }
    fn cols(&self) -> usize {
        *self.shape.last().unwrap()
    }
}

/// Records operations for one forward pass.
#[derive(Debug)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    record: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
        }
    }

    /// A tape that never tracks gradients, for inference.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            record: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(
        &mut self,
        shape: Vec<usize>,
        value: Cow<'a, [f64]>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad: requires_grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf borrowing a tensor; tracks gradients when the tensor requires them.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.borrowed(t.shape(), t.data(), t.requires_grad())
    }

    pub fn borrowed(&mut self, shape: &[usize], data: &'a [f64], requires_grad: bool) -> Var {
        self.push(shape.to_vec(), Cow::Borrowed(data), Op::Leaf, requires_grad)
    }

    pub fn leaf_owned(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, rg)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf_owned(t))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn rows(&self, v: Var) -> usize {
        self.node(v).rows()
    }

    pub fn cols(&self, v: Var) -> usize {
        self.node(v).cols()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("node shape is valid")
    }

    fn shape_err(&self, op: &'static str, a: Var, b: Var) -> NumericsError {
        NumericsError::Shape {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = (self.rows(a), self.cols(a));
        let bs = self.shape(b);
        if bs.len() != 2 || bs[0] != k {
            return Err(self.shape_err("matmul", a, b));
        }
        let n = bs[1];
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("add", a, b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Add(a, b), rg))
    }

    /// Adds a vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let c = self.cols(x);
        if self.value(bias).len() != c {
            return Err(self.shape_err("add_row", x, bias));
        }
        let b = self.value(bias);
        let mut out = self.value(x).to_vec();
        for row in out.chunks_mut(c) {
            row.iter_mut().zip(b).for_each(|(o, bi)| *o += bi);
        }
        let rg = self.rg(&[x, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::AddRow(x, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(self.shape_err("mul", a, b));
        }
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.rg(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, Cow::Owned(out), Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Scale(x, c), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(&[x]);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let vals = self.value(x);
        let s = vals.iter().sum::<f64>() / vals.len() as f64;
        let rg = self.rg(&[x]);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Mean(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| kernels::gelu(v)).collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Gelu(x), rg)
    }

    /// Row-wise layer normalization with epsilon 1e-5.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let c = self.cols(x);
        if self.value(gain).len() != c {
            return Err(self.shape_err("layer_norm", x, gain));
        }
        if self.value(bias).len() != c {
            return Err(self.shape_err("layer_norm", x, bias));
        }
        let xs = self.value(x);
        let mut out = vec![0.0; xs.len()];
        let stats = xs
            .chunks(c)
            .zip(out.chunks_mut(c))
            .map(|(row, o)| kernels::layer_norm_row(row, self.value(gain), self.value(bias), o))
            .collect();
        let rg = self.rg(&[x, gain, bias]);
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            },
            rg,
        ))
    }

    /// Gathers rows of `table` by id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let rows = self.rows(table);
        let c = self.cols(table);
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::Index {
                op: "embedding",
                index: bad,
                extent: rows,
            });
        }
        if ids.is_empty() {
            return Err(NumericsError::Contract("embedding: no ids".into()));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * c);
        for &i in ids {
            out.extend_from_slice(&t[i * c..(i + 1) * c]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            vec![ids.len(), c],
            Cow::Owned(out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head attention over pre-projected queries, keys and values.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: AttnMask,
    ) -> Result<Var> {
        let d = self.cols(q);
        if heads == 0 || d % heads != 0 {
            return Err(NumericsError::Contract(format!(
                "attention: {heads} heads do not divide width {d}"
            )));
        }
        if self.cols(k) != d || self.shape(k) != self.shape(v) {
            return Err(self.shape_err("attention", k, v));
        }
        let (n, m) = (self.rows(q), self.rows(k));
        if mask == AttnMask::SelfOnly && n != m {
            return Err(self.shape_err("attention", q, k));
        }
        let (out, probs) = kernels::attention(
            self.value(q),
            self.value(k),
            self.value(v),
            n,
            m,
            d,
            heads,
            mask,
        );
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![n, d],
            Cow::Owned(out),
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let rows = self.rows(x);
        if len == 0 || start + len > rows {
            return Err(NumericsError::Index {
                op: "slice_rows",
                index: start + len,
                extent: rows,
            });
        }
        let c = self.cols(x);
        let out = self.value(x)[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(
            vec![len, c],
            Cow::Owned(out),
            Op::SliceRows { x, start },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(NumericsError::Contract("concat_rows: no inputs".into()));
        };
        let c = self.cols(first);
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            if self.cols(p) != c {
                return Err(self.shape_err("concat_rows", first, p));
            }
            out.extend_from_slice(self.value(p));
            rows += self.rows(p);
        }
        let rg = self.rg(parts);
        Ok(self.push(
            vec![rows, c],
            Cow::Owned(out),
            Op::ConcatRows(parts.to_vec()),
            rg,
        ))
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let c = self.cols(x);
        let mut out = self.value(x).to_vec();
        out.chunks_mut(c).for_each(kernels::softmax_in_place);
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::Softmax(x), rg)
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let c = self.cols(x);
        let out = self
            .value(x)
            .chunks(c)
            .flat_map(kernels::log_softmax)
            .collect();
        let rg = self.rg(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(shape, Cow::Owned(out), Op::LogSoftmax(x), rg)
    }

    /// Mean over rows of `-log_softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let rows = self.rows(logits);
        let c = self.cols(logits);
        if targets.len() != rows {
            return Err(NumericsError::Shape {
                op: "cross_entropy",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(NumericsError::Index {
                op: "cross_entropy",
                index: bad,
                extent: c,
            });
        }
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0;
        for (row, &t) in probs.chunks_mut(c).zip(targets) {
            total += kernels::log_sum_exp(row) - row[t];
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![total / rows as f64]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean over rows of `KL(teacher[r] ‖ softmax(logits[r]))`. The teacher
    /// is treated as a constant.
    pub fn kl_divergence(&mut self, logits: Var, teacher: Var) -> Result<Var> {
        if self.shape(logits) != self.shape(teacher) {
            return Err(self.shape_err("kl_divergence", logits, teacher));
        }
        let c = self.cols(logits);
        let rows = self.rows(logits);
        let mut probs = self.value(logits).to_vec();
        let mut total = 0.0;
        for (row, t) in probs.chunks_mut(c).zip(self.value(teacher).chunks(c)) {
            let lse = kernels::log_sum_exp(row);
            for (s, &ti) in row.iter().zip(t) {
                if ti > 0.0 {
                    total += ti * (ti.ln() - (s - lse));
                }
            }
            kernels::softmax_in_place(row);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            Cow::Owned(vec![total / rows as f64]),
            Op::KlDiv {
                logits,
                teacher,
                probs,
            },
            rg,
        ))
    }

    /// Propagates gradients from a scalar `loss` to every node that tracks them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(NumericsError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.node(loss).requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.cols(*b);
                if let Some(ga) = self.acc(grads, *a) {
                    let bt = kernels::transpose(self.value(*b), k, n);
                    let prod = kernels::matmul(g, &bt, m, n, k);
                    ga.iter_mut().zip(prod).for_each(|(x, y)| *x += y);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    kernels::matmul_tn_acc(self.value(*a), g, m, k, n, gb);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow(x, bias) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
                let c = self.cols(*x);
                if let Some(gb) = self.acc(grads, *bias) {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(ga) = self.acc(grads, *a) {
                    let bv = self.value(*b);
                    for i in 0..g.len() {
                        ga[i] += g[i] * bv[i];
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    let av = self.value(*a);
                    for i in 0..g.len() {
                        gb[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().zip(g).for_each(|(a, b)| *a += c * b);
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
            Op::Mean(x) => {
                if let Some(gx) = self.acc(grads, *x) {
                    let s = g[0] / gx.len() as f64;
                    gx.iter_mut().for_each(|a| *a += s);
                }
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..g.len() {
                        gx[i] += g[i] * kernels::gelu_grad(xv[i]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                stats,
            } => self.layer_norm_backward(*x, *gain, *bias, stats, g, grads),
            Op::Embedding { table, ids } => {
                let c = self.cols(*table);
                if let Some(gt) = self.acc(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * c..(id + 1) * c];
                        dst.iter_mut()
                            .zip(&g[r * c..(r + 1) * c])
                            .for_each(|(a, b)| *a += b);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                probs,
            } => self.attention_backward(*q, *k, *v, *heads, probs, g, grads),
            Op::SliceRows { x, start } => {
                let c = self.cols(*x);
                if let Some(gx) = self.acc(grads, *x) {
                    let dst = &mut gx[start * c..start * c + g.len()];
                    dst.iter_mut().zip(g).for_each(|(a, b)| *a += b);
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + len])
                            .for_each(|(a, b)| *a += b);
                    }
                    offset += len;
                }
            }
            Op::Softmax(x) => {
                let c = self.cols(*x);
                let y = &node.value;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gr, yr), gxr) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let s: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for i in 0..c {
                            gxr[i] += yr[i] * (gr[i] - s);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let c = self.cols(*x);
                let y = &node.value;
                if let Some(gx) = self.acc(grads, *x) {
                    for ((gr, yr), gxr) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                        let s: f64 = gr.iter().sum();
                        for i in 0..c {
                            gxr[i] += gr[i] - yr[i].exp() * s;
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let c = self.cols(*logits);
                let scale = g[0] / targets.len() as f64;
                if let Some(gl) = self.acc(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * c..(r + 1) * c];
                        let p = &probs[r * c..(r + 1) * c];
                        for i in 0..c {
                            row[i] += scale * p[i];
                        }
                        row[t] -= scale;
                    }
                }
            }
            Op::KlDiv {
                logits,
                teacher,
                probs,
            } => {
                let c = self.cols(*logits);
                let rows = self.rows(*logits);
                let scale = g[0] / rows as f64;
                let t = self.value(*teacher);
                if let Some(gl) = self.acc(grads, *logits) {
                    for r in 0..rows {
                        let tr = &t[r * c..(r + 1) * c];
                        let mass: f64 = tr.iter().sum();
                        let p = &probs[r * c..(r + 1) * c];
                        let row = &mut gl[r * c..(r + 1) * c];
                        for i in 0..c {
                            row[i] += scale * (p[i] * mass - tr[i]);
                        }
                    }
                }
            }
        }
    }

    fn layer_norm_backward(
        &self,
        x: Var,
        gain: Var,
        bias: Var,
        stats: &[(f64, f64)],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let c = self.cols(x);
        let xv = self.value(x);
        let gv = self.value(gain);
        let mut xhat = vec![0.0; c];
        let mut dxhat = vec![0.0; c];
        for (r, &(mean, rstd)) in stats.iter().enumerate() {
            let xr = &xv[r * c..(r + 1) * c];
            let gr = &g[r * c..(r + 1) * c];
            for i in 0..c {
                xhat[i] = (xr[i] - mean) * rstd;
                dxhat[i] = gr[i] * gv[i];
            }
            if let Some(gg) = self.acc(grads, gain) {
                for i in 0..c {
                    gg[i] += gr[i] * xhat[i];
                }
            }
            if let Some(gb) = self.acc(grads, bias) {
                gb.iter_mut().zip(gr).for_each(|(a, b)| *a += b);
            }
            if let Some(gx) = self.acc(grads, x) {
                let n = c as f64;
                let mean_d = dxhat.iter().sum::<f64>() / n;
                let mean_dx = dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
                let row = &mut gx[r * c..(r + 1) * c];
                for i in 0..c {
                    row[i] += rstd * (dxhat[i] - mean_d - xhat[i] * mean_dx);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let d = self.cols(q);
        let (n, m) = (self.rows(q), self.rows(k));
        let (dq, dk, dv) = kernels::attention_backward(
            self.value(q),
            self.value(k),
            self.value(v),
            probs,
            g,
            n,
            m,
            d,
            heads,
        );
        for (var, delta) in [(q, dq), (k, dk), (v, dv)] {
            if let Some(gv) = self.acc(grads, var) {
                gv.iter_mut().zip(delta).for_each(|(a, b)| *a += b);
            }
        }
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of `v` (if any) into `t.grad`.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor) {
        if let Some(g) = self.get(v) {
            t.accumulate_grad(g);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::matrix(2, 3, vec![1.0, -2.0, 3.0, 0.5, 0.0, 9.0])
            .unwrap()
            .with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let s = tape.sum(xv);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(xv).unwrap(), &[1.0; 6]);
    }

    #[test]
    fn half_square_gives_identity() {
        let x = Tensor::vector(vec![1.5, -2.0, 0.25])
            .unwrap()
            .with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        let sq = tape.mul(xv, xv).unwrap();
        let s = tape.sum(sq);
        let half = tape.scale(s, 0.5);
        let g = tape.backward(half).unwrap();
        assert_eq!(g.get(xv).unwrap(), x.data());
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut x = Tensor::vector(vec![1.0, 2.0])
            .unwrap()
            .with_requires_grad(true);
        let grads = {
            let mut tape = Tape::new();
            let xv = tape.leaf(&x);
            let s = tape.sum(xv);
            let a = tape.backward(s).unwrap();
            let b = tape.backward(s).unwrap();
            (xv, a, b)
        };
        grads.1.accumulate_into(grads.0, &mut x);
        grads.2.accumulate_into(grads.0, &mut x);
        assert_eq!(x.grad().unwrap(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::vector(vec![1.0, 2.0])
            .unwrap()
            .with_requires_grad(true);
        let mut tape = Tape::new();
        let xv = tape.leaf(&x);
        assert!(matches!(tape.backward(xv), Err(NumericsError::Contract(_))));
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let w = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 1.0])
            .unwrap()
            .with_requires_grad(true);
        let mut tape = Tape::new();
        let (wv, xv) = (tape.leaf(&w), tape.leaf(&x));
        let y = tape.matmul(xv, wv).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert!(g.get(wv).is_none());
        assert_eq!(g.get(xv).unwrap(), &[3.0, 7.0]);
    }

    #[test]
    fn layer_norm_of_constant_row_is_bias() {
        let x = Tensor::vector(vec![2.0; 4]).unwrap();
        let gain = Tensor::vector(vec![1.0; 4]).unwrap();
        let bias = Tensor::vector(vec![0.0; 4]).unwrap();
        let mut tape = Tape::no_grad();
        let (a, b, c) = (tape.leaf(&x), tape.leaf(&gain), tape.leaf(&bias));
        let y = tape.layer_norm(a, b, c).unwrap();
        assert_eq!(tape.value(y), &[0.0; 4]);
    }
}
