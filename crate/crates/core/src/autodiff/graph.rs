//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation appends a node holding its forward value; node order is
//! therefore a topological order and `backward` simply walks it in reverse.
//! Parameters are borrowed leaves, so building a graph never copies weights.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{dot, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Sentinel added to disallowed attention scores before the softmax.
pub const MASK_SENTINEL: f64 = -1e9;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    /// rhs is `n×1` against an `n×d` lhs
    Col,
    /// rhs holds a single element
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Binary(BinaryOp, Var, Var, Bcast),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    AddBias(Var, Var),
    SoftmaxRows(Var),
    MaskedMeanRows {
        x: Var,
        mask: Vec<bool>,
        count: usize,
    },
    PrefixMeanRows(Var),
    RepeatRows(Var),
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        ignore_id: usize,
        probs: Vec<f64>,
        count: usize,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Operation record for one forward pass.
#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
    grads: Vec<Option<Vec<f64>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [d] => (1, *d),
        [n, d] => (*n, *d),
        _ => {
            let d = shape[shape.len() - 1];
            (shape.iter().product::<usize>() / d, d)
        }
    }
}

fn matrix(shape: &[usize], op: &'static str) -> Result<(usize, usize)> {
    match shape {
        [n, d] => Ok((*n, *d)),
        _ => Err(Error::dim(op, shape, &[])),
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, [f64]>, shape: Vec<usize>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf borrowing `t`'s storage.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t.data()), t.shape().to_vec(), Op::Leaf, true)
    }

    /// Leaf owning its data.
    pub fn input(&mut self, t: Tensor, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(Cow::Owned(t.into_data()), shape, Op::Leaf, requires_grad)
    }

    /// Non-trainable owned leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.input(t, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    /// Copies a node's value out as a tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("graph node shape is consistent")
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` call with respect to `v`, if it was reached.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix(self.shape(a), "matmul")?;
        let (k2, p) = matrix(self.shape(b), "matmul")?;
        if k != k2 {
            return Err(Error::dim("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * p];
        gemm_nn(m, k, p, self.value(a), self.value(b), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, p], Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix(self.shape(a), "matmul_nt")?;
        let (p, k2) = matrix(self.shape(b), "matmul_nt")?;
        if k != k2 {
            return Err(Error::dim("matmul_nt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * p];
        gemm_nt(m, k, p, self.value(a), self.value(b), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), vec![m, p], Op::MatMulNT(a, b), rg))
    }

    fn bcast(&self, a: Var, b: Var, op: &'static str) -> Result<Bcast> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa == sb {
            return Ok(Bcast::Same);
        }
        if self.value(b).len() == 1 {
            return Ok(Bcast::Scalar);
        }
        if let ([n, _], [n2, 1]) = (sa, sb) {
            if n == n2 {
                return Ok(Bcast::Col);
            }
        }
        Err(Error::dim(op, sa, sb))
    }

    pub fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let name = match op {
            BinaryOp::Add => "add",
            BinaryOp::Sub => "sub",
            BinaryOp::Mul => "mul",
        };
        let bc = self.bcast(a, b, name)?;
        let f = match op {
            BinaryOp::Add => |x: f64, y: f64| x + y,
            BinaryOp::Sub => |x: f64, y: f64| x - y,
            BinaryOp::Mul => |x: f64, y: f64| x * y,
        };
        let (av, bv) = (self.value(a), self.value(b));
        let cols = rows_cols(self.shape(a)).1;
        let out: Vec<f64> = match bc {
            Bcast::Same => av.iter().zip(bv.iter()).map(|(&x, &y)| f(x, y)).collect(),
            Bcast::Scalar => av.iter().map(|&x| f(x, bv[0])).collect(),
            Bcast::Col => av.iter().enumerate().map(|(i, &x)| f(x, bv[i / cols])).collect(),
        };
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(out), shape, Op::Binary(op, a, b, bc), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), shape, Op::Scale(a, s), rg)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|&x| x + s).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), shape, Op::AddScalar(a), rg)
    }

    /// `1 − a`, elementwise.
    pub fn one_minus(&mut self, a: Var) -> Var {
        let neg = self.scale(a, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| sigmoid(x)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), shape, Op::Sigmoid(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(0.0)).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(Cow::Owned(out), shape, Op::Relu(a), rg)
    }

    /// `x[n×d] + bias[d]` applied to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, d) = matrix(self.shape(x), "add_bias")?;
        if self.value(bias).len() != d {
            return Err(Error::dim("add_bias", self.shape(x), self.shape(bias)));
        }
        let b = self.value(bias);
        let out = self.value(x).iter().enumerate().map(|(i, &v)| v + b[i % d]).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Cow::Owned(out), shape, Op::AddBias(x, bias), rg))
    }

    /// Row-wise softmax, stabilized by subtracting each row's maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = matrix(self.shape(x), "softmax_rows")?;
        let xv = self.value(x);
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let row = &xv[i * m..(i + 1) * m];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * m..(i + 1) * m];
            let mut sum = 0.0;
            for (o, &v) in orow.iter_mut().zip(row) {
                *o = (v - max).exp();
                sum += *o;
            }
            for o in orow.iter_mut() {
                *o /= sum;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), vec![n, m], Op::SoftmaxRows(x), rg))
    }

    /// Mean of the rows selected by `mask`; returns a `[d]` vector.
    pub fn masked_mean_rows(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, d) = matrix(self.shape(x), "masked_mean_rows")?;
        if mask.len() != n {
            return Err(Error::dim("masked_mean_rows", self.shape(x), &[mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMean);
        }
        let xv = self.value(x);
        let mut out = vec![0.0; d];
        for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            for (o, &v) in out.iter_mut().zip(&xv[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(x);
        Ok(self.push(
            Cow::Owned(out),
            vec![d],
            Op::MaskedMeanRows {
                x,
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Row `t` of the output is the mean of input rows `0..=t`.
    pub fn prefix_mean_rows(&mut self, x: Var) -> Result<Var> {
        let (n, d) = matrix(self.shape(x), "prefix_mean_rows")?;
        let xv = self.value(x);
        let mut out = vec![0.0; n * d];
        let mut run = vec![0.0; d];
        for t in 0..n {
            let inv = 1.0 / (t + 1) as f64;
            for j in 0..d {
                run[j] += xv[t * d + j];
                out[t * d + j] = run[j] * inv;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), vec![n, d], Op::PrefixMeanRows(x), rg))
    }

    /// Materializes a `[d]` (or `1×d`) vector as `n` identical rows.
    pub fn repeat_rows(&mut self, v: Var, n: usize) -> Result<Var> {
        let (r, d) = rows_cols(self.shape(v));
        if r != 1 || n == 0 {
            return Err(Error::dim("repeat_rows", self.shape(v), &[n]));
        }
        let src = self.value(v);
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(src);
        }
        let rg = self.rg(v);
        Ok(self.push(Cow::Owned(out), vec![n, d], Op::RepeatRows(v), rg))
    }

    /// Lays the parts' columns side by side. All-vector inputs give a vector.
    pub fn concat_last_dim(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyConcat)?;
        if parts.len() == 1 {
            // identity, but still a distinct node so gradients route the same way
            let shape = self.shape(first).to_vec();
            let out = self.value(first).to_vec();
            let rg = self.rg(first);
            return Ok(self.push(Cow::Owned(out), shape, Op::Concat(parts.to_vec()), rg));
        }
        let vector = self.shape(first).len() == 1;
        let (n, _) = rows_cols(self.shape(first));
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            let ok = if vector {
                s.len() == 1
            } else {
                s.len() == 2 && s[0] == n
            };
            if !ok {
                return Err(Error::dim("concat_last_dim", self.shape(first), s));
            }
            widths.push(rows_cols(s).1);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; n * total];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            for i in 0..n {
                out[i * total + off..i * total + off + w].copy_from_slice(&pv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let shape = if vector { vec![total] } else { vec![n, total] };
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(out), shape, Op::Concat(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (n, d) = matrix(self.shape(x), "slice_cols")?;
        if width == 0 || start + width > d {
            return Err(Error::dim("slice_cols", self.shape(x), &[start, width]));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * width);
        for i in 0..n {
            out.extend_from_slice(&xv[i * d + start..i * d + start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(out), vec![n, width], Op::SliceCols { x, start }, rg))
    }

    /// Per-row normalization with population variance, then `gain ⊙ x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (n, d) = matrix(self.shape(x), "layer_norm")?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gain)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract("layer_norm eps must be positive".into()));
        }
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        let mut xhat = vec![0.0; n * d];
        let mut rstd = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &xv[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = gv[j] * h + bv[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Cow::Owned(out),
            vec![n, d],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Mean negative log-likelihood over positions whose target is not `ignore_id`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_id: usize) -> Result<Var> {
        let (n, v) = matrix(self.shape(logits), "cross_entropy")?;
        if targets.len() != n {
            return Err(Error::dim("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        let lv = self.value(logits);
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        let mut count = 0;
        for (i, &t) in targets.iter().enumerate() {
            if t == ignore_id {
                continue;
            }
            if t >= v {
                return Err(Error::Vocab { id: t, size: v });
            }
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..v {
                probs[i * v + j] = (row[j] - lse).exp();
            }
            total += lse - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::EmptyLoss);
        }
        let rg = self.rg(logits);
        Ok(self.push(
            Cow::Owned(vec![total / count as f64]),
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                ignore_id,
                probs,
                count,
            },
            rg,
        ))
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes output row `i`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = matrix(self.shape(table), "gather_rows")?;
        if ids.is_empty() {
            return Err(Error::Contract("gather_rows with no ids".into()));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocab { id, size: vocab });
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Cow::Owned(out),
            vec![ids.len(), d],
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Mean(x), rg)
    }

    // ----------------------------------------------------------- backward

    /// Populates gradients of `loss` for every node that requires them.
    /// Gradients from multiple uses of a node accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                backprop_node(&self.nodes, node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn slot<'g>(nodes: &[Node<'_>], grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn backprop_node(nodes: &[Node<'_>], node: &Node<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| -> &[f64] { &nodes[v.0].value };
    let shape = |v: Var| -> &[usize] { &nodes[v.0].shape };
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k) = rows_cols(shape(*a));
            let p = rows_cols(shape(*b)).1;
            if let Some(da) = slot(nodes, grads, *a) {
                // dA = dO · Bᵀ
                gemm_nt(m, p, k, g, val(*b), da);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                // dB = Aᵀ · dO
                gemm_tn(k, m, p, val(*a), g, db);
            }
        }
        Op::MatMulNT(a, b) => {
            let (m, k) = rows_cols(shape(*a));
            let p = rows_cols(shape(*b)).0;
            if let Some(da) = slot(nodes, grads, *a) {
                // dA = dO · B
                gemm_nn(m, p, k, g, val(*b), da);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                // dB = dOᵀ · A
                gemm_tn(p, m, k, g, val(*a), db);
            }
        }
        Op::Binary(op, a, b, bc) => {
            let cols = rows_cols(shape(*a)).1;
            let bidx = |i: usize| match bc {
                Bcast::Same => i,
                Bcast::Scalar => 0,
                Bcast::Col => i / cols,
            };
            if let Some(da) = slot(nodes, grads, *a) {
                match op {
                    BinaryOp::Add | BinaryOp::Sub => da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi),
                    BinaryOp::Mul => {
                        let bv = val(*b);
                        for (i, (d, &gi)) in da.iter_mut().zip(g).enumerate() {
                            *d += gi * bv[bidx(i)];
                        }
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *b) {
                let av = val(*a);
                for (i, &gi) in g.iter().enumerate() {
                    let contrib = match op {
                        BinaryOp::Add => gi,
                        BinaryOp::Sub => -gi,
                        BinaryOp::Mul => gi * av[i],
                    };
                    db[bidx(i)] += contrib;
                }
            }
        }
        Op::Scale(a, s) => {
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi * s);
            }
        }
        Op::AddScalar(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                da.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
            }
        }
        Op::Sigmoid(a) => {
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gi), &y) in da.iter_mut().zip(g).zip(node.value.iter()) {
                    *d += gi * y * (1.0 - y);
                }
            }
        }
        Op::Relu(a) => {
            let av = val(*a);
            if let Some(da) = slot(nodes, grads, *a) {
                for ((d, &gi), &x) in da.iter_mut().zip(g).zip(av) {
                    if x > 0.0 {
                        *d += gi;
                    }
                }
            }
        }
        Op::AddBias(x, b) => {
            let d = rows_cols(shape(*x)).1;
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().zip(g).for_each(|(d, &gi)| *d += gi);
            }
            if let Some(db) = slot(nodes, grads, *b) {
                for (i, &gi) in g.iter().enumerate() {
                    db[i % d] += gi;
                }
            }
        }
        Op::SoftmaxRows(x) => {
            let (n, m) = rows_cols(&node.shape);
            if let Some(dx) = slot(nodes, grads, *x) {
                let y = &node.value;
                for i in 0..n {
                    let yr = &y[i * m..(i + 1) * m];
                    let gr = &g[i * m..(i + 1) * m];
                    let s = dot(yr, gr);
                    for j in 0..m {
                        dx[i * m + j] += yr[j] * (gr[j] - s);
                    }
                }
            }
        }
        Op::MaskedMeanRows { x, mask, count } => {
            let d = node.value.len();
            if let Some(dx) = slot(nodes, grads, *x) {
                let inv = 1.0 / *count as f64;
                for (i, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                    for j in 0..d {
                        dx[i * d + j] += g[j] * inv;
                    }
                }
            }
        }
        Op::PrefixMeanRows(x) => {
            let (n, d) = rows_cols(&node.shape);
            if let Some(dx) = slot(nodes, grads, *x) {
                // dx[s] = Σ_{t≥s} g[t] / (t+1)
                let mut suffix = vec![0.0; d];
                for t in (0..n).rev() {
                    let inv = 1.0 / (t + 1) as f64;
                    for j in 0..d {
                        suffix[j] += g[t * d + j] * inv;
                        dx[t * d + j] += suffix[j];
                    }
                }
            }
        }
        Op::RepeatRows(v) => {
            let d = nodes[v.0].value.len();
            if let Some(dv) = slot(nodes, grads, *v) {
                for (i, &gi) in g.iter().enumerate() {
                    dv[i % d] += gi;
                }
            }
        }
        Op::Concat(parts) => {
            let (n, total) = rows_cols(&node.shape);
            let mut off = 0;
            for &p in parts {
                let w = rows_cols(shape(p)).1;
                if let Some(dp) = slot(nodes, grads, p) {
                    for i in 0..n {
                        for j in 0..w {
                            dp[i * w + j] += g[i * total + off + j];
                        }
                    }
                }
                off += w;
            }
        }
        Op::SliceCols { x, start } => {
            let (n, w) = rows_cols(&node.shape);
            let d = rows_cols(shape(*x)).1;
            if let Some(dx) = slot(nodes, grads, *x) {
                for i in 0..n {
                    for j in 0..w {
                        dx[i * d + start + j] += g[i * w + j];
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let (n, d) = rows_cols(&node.shape);
            let gv = val(*gain);
            if let Some(dx) = slot(nodes, grads, *x) {
                let mut dxhat = vec![0.0; d];
                for i in 0..n {
                    let gr = &g[i * d..(i + 1) * d];
                    let hr = &xhat[i * d..(i + 1) * d];
                    for j in 0..d {
                        dxhat[j] = gr[j] * gv[j];
                    }
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dh = dot(&dxhat, hr) / d as f64;
                    for j in 0..d {
                        dx[i * d + j] += rstd[i] * (dxhat[j] - mean_d - hr[j] * mean_dh);
                    }
                }
            }
            if let Some(dg) = slot(nodes, grads, *gain) {
                for i in 0..n {
                    for j in 0..d {
                        dg[j] += g[i * d + j] * xhat[i * d + j];
                    }
                }
            }
            if let Some(db) = slot(nodes, grads, *bias) {
                for i in 0..n {
                    for j in 0..d {
                        db[j] += g[i * d + j];
                    }
                }
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            ignore_id,
            probs,
            count,
        } => {
            let v = rows_cols(shape(*logits)).1;
            if let Some(dl) = slot(nodes, grads, *logits) {
                let s = g[0] / *count as f64;
                for (i, &t) in targets.iter().enumerate() {
                    if t == *ignore_id {
                        continue;
                    }
                    for j in 0..v {
                        dl[i * v + j] += s * probs[i * v + j];
                    }
                    dl[i * v + t] -= s;
                }
            }
        }
        Op::GatherRows { table, ids } => {
            let d = rows_cols(&node.shape).1;
            if let Some(dt) = slot(nodes, grads, *table) {
                for (i, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[i * d + j];
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(dx) = slot(nodes, grads, *x) {
                let s = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += s);
            }
        }
    }
}
