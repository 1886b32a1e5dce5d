//! Reverse-mode differentiation over a tape of tensor operations.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles during a
//! forward pass. Parameters enter as borrowed leaves, so building a graph never
//! copies model weights. [`Tape::backward`] walks the tape in reverse and
//! returns additive gradients for every leaf that requires them.

use std::borrow::Cow;

use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

type Segments = Vec<(usize, usize)>;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    MatVec(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Identity(Var),
    Relu(Var),
    MaskFill(Var, Vec<bool>),
    SoftmaxRows(Var, f64),
    LogSoftmaxRows(Var),
    LayerNormRows {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    GatherRows(Var, Vec<usize>),
    ScatterRows(Var, Vec<usize>),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    PickCols(Var, Vec<usize>),
    ScaleRows(Var, Var),
    SegmentSoftmax(Var, Segments),
    SegmentWeightedSum(Var, Var, Segments),
    SumRows(Var),
    Sum(Var),
    CrossEntropyRows {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, delta: &[f64]) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta.to_vec()),
    }
}

fn accumulate_owned(grads: &mut [Option<Vec<f64>>], v: Var, delta: Vec<f64>) {
    match &mut grads[v.0] {
        Some(g) => g.iter_mut().zip(&delta).for_each(|(a, d)| *a += d),
        slot @ None => *slot = Some(delta),
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Tensor>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A borrowed leaf that receives gradients.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, true)
    }

    /// An owned leaf that receives gradients.
    pub fn param_owned(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::MatMul(a, b), ng))
    }

    /// `a[m×k] · b[n×k]ᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("matmul_nt", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
        let out = Tensor::from_parts(vec![m, n], tensor::matmul_nt_raw(ta.data(), tb.data(), m, k, n));
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::MatMulNT(a, b), ng))
    }

    /// `x[m×k] · w[k] -> [m]`.
    pub fn matvec(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (m, k) = tx.dims2();
        if tx.rank() != 2 || tw.rank() != 1 || tw.len() != k {
            return Err(shape_err("matvec", tx, tw));
        }
        let out: Vec<f64> = (0..m).map(|i| tensor::dot(tx.row(i), tw.data())).collect();
        let ng = self.needs(x) || self.needs(w);
        Ok(self.push(Cow::Owned(Tensor::vector(out)), Op::MatVec(x, w), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::Add(a, b), ng))
    }

    /// `x[m×n] + bias[n]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, n) = tx.dims2();
        if tb.len() != n {
            return Err(shape_err("add_row", tx, tb));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, v)| v + tb.data()[i % n])
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Cow::Owned(out), Op::AddRow(x, bias), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Cow::Owned(out), Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let tx = self.value(x);
        let out = Tensor::from_parts(tx.shape().to_vec(), tx.data().iter().map(|v| v * c).collect());
        let ng = self.needs(x);
        self.push(Cow::Owned(out), Op::Scale(x, c), ng)
    }

    /// `x + c` for a constant `c` of the same shape; `c` carries no gradient.
    pub fn add_const(&mut self, x: Var, c: &[f64]) -> Result<Var> {
        let tx = self.value(x);
        if tx.len() != c.len() {
            return Err(Error::Shape {
                op: "add_const",
                left: tx.shape().to_vec(),
                right: vec![c.len()],
            });
        }
        let data = tx.data().iter().zip(c).map(|(a, b)| a + b).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::Identity(x), ng))
    }

    /// Straight-through composition: the output takes the value `forward`
    /// while gradients pass to `target` unchanged, i.e.
    /// `target + stop_gradient(forward - target)`.
    pub fn detach_to(&mut self, target: Var, forward: Tensor) -> Result<Var> {
        let tt = self.value(target);
        if tt.shape() != forward.shape() {
            return Err(shape_err("detach_to", tt, &forward));
        }
        let ng = self.needs(target);
        Ok(self.push(Cow::Owned(forward), Op::Identity(target), ng))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let out = Tensor::from_parts(tx.shape().to_vec(), tx.data().iter().map(|v| v.max(0.0)).collect());
        let ng = self.needs(x);
        self.push(Cow::Owned(out), Op::Relu(x), ng)
    }

    /// Replaces entries where `keep` is false by `fill`; those entries carry no gradient.
    pub fn mask_fill(&mut self, x: Var, keep: Vec<bool>, fill: f64) -> Result<Var> {
        let tx = self.value(x);
        if keep.len() != tx.len() {
            return Err(Error::Shape {
                op: "mask_fill",
                left: tx.shape().to_vec(),
                right: vec![keep.len()],
            });
        }
        let data = tx
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v } else { fill })
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::MaskFill(x, keep), ng))
    }

    /// Row-wise temperature softmax. When `admissible` is given, entries marked
    /// false are excluded and come out exactly zero.
    pub fn softmax_rows(&mut self, x: Var, tau: f64, admissible: Option<&[bool]>) -> Result<Var> {
        if !(tau > 0.0) {
            return Err(Error::Domain(format!("temperature must be positive, got {tau}")));
        }
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        let all = vec![true; n];
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            let adm = admissible.map_or(all.as_slice(), |a| &a[i * n..(i + 1) * n]);
            match tensor::masked_softmax_slice(tx.row(i), tau, adm) {
                Some(row) => data.extend(row),
                None => return Err(Error::NoAdmissibleExpert { token: i }),
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::SoftmaxRows(x, tau), ng))
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (m, _) = tx.dims2();
        let data: Vec<f64> = (0..m).flat_map(|i| tensor::log_softmax_slice(tx.row(i))).collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.needs(x);
        self.push(Cow::Owned(out), Op::LogSoftmaxRows(x), ng)
    }

    pub fn layer_norm_rows(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, n) = tx.dims2();
        if tg.len() != n || tb.len() != n {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut data = Vec::with_capacity(m * n);
        let mut xhat = Vec::with_capacity(m * n);
        let mut inv_std = Vec::with_capacity(m);
        for i in 0..m {
            let s = tensor::layer_norm_slice(tx.row(i), tg.data(), tb.data(), eps);
            data.extend(s.out);
            xhat.extend(s.xhat);
            inv_std.push(s.inv_std);
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.needs(x) || self.needs(gain) || self.needs(bias);
        Ok(self.push(
            Cow::Owned(out),
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            ng,
        ))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(Error::Index {
                    what: "row",
                    index: i,
                    size: m,
                });
            }
            data.extend_from_slice(tx.row(i));
        }
        let out = Tensor::from_parts(vec![idx.len(), n], data);
        let ng = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::GatherRows(x, idx.to_vec()), ng))
    }

    /// Places row `r` of `x` at row `idx[r]` of a zero `[rows×n]` matrix.
    pub fn scatter_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        if idx.len() != m {
            return Err(Error::Shape {
                op: "scatter_rows",
                left: tx.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        let mut data = vec![0.0; rows * n];
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::Index {
                    what: "row",
                    index: i,
                    size: rows,
                });
            }
            data[i * n..(i + 1) * n]
                .iter_mut()
                .zip(tx.row(r))
                .for_each(|(d, s)| *d += s);
        }
        let out = Tensor::from_parts(vec![rows, n], data);
        let ng = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::ScatterRows(x, idx.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        if start > end || end > n {
            return Err(Error::Index {
                what: "column",
                index: end,
                size: n,
            });
        }
        let data: Vec<f64> = (0..m).flat_map(|i| tx.row(i)[start..end].to_vec()).collect();
        let out = Tensor::from_parts(vec![m, end - start], data);
        let ng = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::SliceCols(x, start, end), ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.value(parts[0]).dims2().0;
        let mut width = 0;
        for &p in parts {
            let (pm, pn) = self.value(p).dims2();
            if pm != m {
                return Err(shape_err("concat_cols", self.value(parts[0]), self.value(p)));
            }
            width += pn;
        }
        let mut data = Vec::with_capacity(m * width);
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::from_parts(vec![m, width], data);
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Cow::Owned(out), Op::ConcatCols(parts.to_vec()), ng))
    }

    /// `out[i] = x[i, cols[i]]`.
    pub fn pick_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        if cols.len() != m {
            return Err(Error::Shape {
                op: "pick_cols",
                left: tx.shape().to_vec(),
                right: vec![cols.len()],
            });
        }
        let mut data = Vec::with_capacity(m);
        for (i, &c) in cols.iter().enumerate() {
            if c >= n {
                return Err(Error::Index {
                    what: "column",
                    index: c,
                    size: n,
                });
            }
            data.push(tx.row(i)[c]);
        }
        let ng = self.needs(x);
        Ok(self.push(Cow::Owned(Tensor::vector(data)), Op::PickCols(x, cols.to_vec()), ng))
    }

    /// `out[i, :] = s[i] * x[i, :]`.
    pub fn scale_rows(&mut self, x: Var, s: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(s));
        let (m, n) = tx.dims2();
        if ts.len() != m {
            return Err(shape_err("scale_rows", tx, ts));
        }
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(k, v)| v * ts.data()[k / n])
            .collect();
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.needs(x) || self.needs(s);
        Ok(self.push(Cow::Owned(out), Op::ScaleRows(x, s), ng))
    }

    /// Softmax of a vector within each `[start, end)` segment.
    pub fn segment_softmax(&mut self, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let tx = self.value(x);
        let mut data = vec![0.0; tx.len()];
        for &(s, e) in segments {
            if s >= e || e > tx.len() {
                return Err(Error::NoTokensToAggregate);
            }
            let sm = tensor::softmax_slice(&tx.data()[s..e], 1.0)?;
            data[s..e].copy_from_slice(&sm);
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        let ng = self.needs(x);
        Ok(self.push(Cow::Owned(out), Op::SegmentSoftmax(x, segments.to_vec()), ng))
    }

    /// `out[b, :] = Σ_{i ∈ seg_b} w[i] · x[i, :]`.
    pub fn segment_weighted_sum(&mut self, w: Var, x: Var, segments: &[(usize, usize)]) -> Result<Var> {
        let (tw, tx) = (self.value(w), self.value(x));
        let (m, n) = tx.dims2();
        if tw.len() != m {
            return Err(shape_err("segment_weighted_sum", tw, tx));
        }
        let mut data = vec![0.0; segments.len() * n];
        for (b, &(s, e)) in segments.iter().enumerate() {
            let orow = &mut data[b * n..(b + 1) * n];
            for i in s..e {
                let wi = tw.data()[i];
                orow.iter_mut().zip(tx.row(i)).for_each(|(o, v)| *o += wi * v);
            }
        }
        let out = Tensor::from_parts(vec![segments.len(), n], data);
        let ng = self.needs(w) || self.needs(x);
        Ok(self.push(
            Cow::Owned(out),
            Op::SegmentWeightedSum(w, x, segments.to_vec()),
            ng,
        ))
    }

    /// Column sums of a matrix: `[m×n] -> [n]`.
    pub fn sum_rows(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let (m, n) = tx.dims2();
        let mut data = vec![0.0; n];
        for i in 0..m {
            data.iter_mut().zip(tx.row(i)).for_each(|(d, v)| *d += v);
        }
        let ng = self.needs(x);
        self.push(Cow::Owned(Tensor::vector(data)), Op::SumRows(x), ng)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Cow::Owned(Tensor::scalar(total)), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Per-row cross-entropy `-ln softmax(logits_b)[label_b]`, as a vector.
    pub fn cross_entropy_rows(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let tl = self.value(logits);
        let (m, c) = tl.dims2();
        if labels.len() != m {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: tl.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let mut losses = Vec::with_capacity(m);
        let mut probs = Vec::with_capacity(m * c);
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return Err(Error::Index {
                    what: "class label",
                    index: y,
                    size: c,
                });
            }
            let ls = tensor::log_softmax_slice(tl.row(i));
            losses.push(-ls[y]);
            probs.extend(ls.iter().map(|v| v.exp()));
        }
        let ng = self.needs(logits);
        Ok(self.push(
            Cow::Owned(Tensor::vector(losses)),
            Op::CrossEntropyRows {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        ))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| {
                g.filter(|_| matches!(n.op, Op::Leaf))
                    .map(|g| Tensor::from_parts(n.value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &Tensor { &self.nodes[v.0].value };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    // dA = G · Bᵀ
                    accumulate_owned(grads, *a, tensor::matmul_nt_raw(g, tb.data(), m, n, k));
                }
                if self.needs(*b) {
                    // dB = Aᵀ · G
                    accumulate_owned(grads, *b, tensor::matmul_tn_raw(ta.data(), g, m, k, n));
                }
            }
            Op::MatMulNT(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[0]);
                if self.needs(*a) {
                    // dA = G · B
                    accumulate_owned(grads, *a, tensor::matmul_raw(g, tb.data(), m, n, k));
                }
                if self.needs(*b) {
                    // dB = Gᵀ · A
                    accumulate_owned(grads, *b, tensor::matmul_tn_raw(g, ta.data(), m, n, k));
                }
            }
            Op::MatVec(x, w) => {
                let (tx, tw) = (val(*x), val(*w));
                let (m, k) = tx.dims2();
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * k];
                    for i in 0..m {
                        dx[i * k..(i + 1) * k]
                            .iter_mut()
                            .zip(tw.data())
                            .for_each(|(d, wv)| *d = g[i] * wv);
                    }
                    accumulate_owned(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![0.0; k];
                    for i in 0..m {
                        dw.iter_mut().zip(tx.row(i)).for_each(|(d, xv)| *d += g[i] * xv);
                    }
                    accumulate_owned(grads, *w, dw);
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    accumulate(grads, *a, g);
                }
                if self.needs(*b) {
                    accumulate(grads, *b, g);
                }
            }
            Op::AddRow(x, b) => {
                if self.needs(*x) {
                    accumulate(grads, *x, g);
                }
                if self.needs(*b) {
                    let n = val(*b).len();
                    let mut db = vec![0.0; n];
                    g.iter().enumerate().for_each(|(i, v)| db[i % n] += v);
                    accumulate_owned(grads, *b, db);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if self.needs(*a) {
                    let d = g.iter().zip(tb.data()).map(|(x, y)| x * y).collect();
                    accumulate_owned(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = g.iter().zip(ta.data()).map(|(x, y)| x * y).collect();
                    accumulate_owned(grads, *b, d);
                }
            }
            Op::Scale(x, c) => {
                accumulate_owned(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::Identity(x) => accumulate(grads, *x, g),
            Op::Relu(x) => {
                let d = g
                    .iter()
                    .zip(val(*x).data())
                    .map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 })
                    .collect();
                accumulate_owned(grads, *x, d);
            }
            Op::MaskFill(x, keep) => {
                let d = g
                    .iter()
                    .zip(keep)
                    .map(|(gv, k)| if *k { *gv } else { 0.0 })
                    .collect();
                accumulate_owned(grads, *x, d);
            }
            Op::SoftmaxRows(x, tau) => {
                let y = node.value.data();
                let (m, n) = node.value.dims2();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let (yr, gr) = (&y[i * n..(i + 1) * n], &g[i * n..(i + 1) * n]);
                    let s = tensor::dot(yr, gr);
                    for j in 0..n {
                        d[i * n + j] = yr[j] * (gr[j] - s) / tau;
                    }
                }
                accumulate_owned(grads, *x, d);
            }
            Op::LogSoftmaxRows(x) => {
                let y = node.value.data();
                let (m, n) = node.value.dims2();
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    let gr = &g[i * n..(i + 1) * n];
                    let s: f64 = gr.iter().sum();
                    for j in 0..n {
                        d[i * n + j] = gr[j] - y[i * n + j].exp() * s;
                    }
                }
                accumulate_owned(grads, *x, d);
            }
            Op::LayerNormRows {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, n) = node.value.dims2();
                let gv = val(*gain).data();
                if self.needs(*x) {
                    let mut dx = vec![0.0; m * n];
                    for i in 0..m {
                        let r = i * n..(i + 1) * n;
                        let dxhat: Vec<f64> = g[r.clone()].iter().zip(gv).map(|(a, b)| a * b).collect();
                        let xh = &xhat[r.clone()];
                        let mean_d = dxhat.iter().sum::<f64>() / n as f64;
                        let mean_dx = tensor::dot(&dxhat, xh) / n as f64;
                        for j in 0..n {
                            dx[i * n + j] = inv_std[i] * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                    accumulate_owned(grads, *x, dx);
                }
                if self.needs(*gain) {
                    let mut dg = vec![0.0; n];
                    for (k, gv) in g.iter().enumerate() {
                        dg[k % n] += gv * xhat[k];
                    }
                    accumulate_owned(grads, *gain, dg);
                }
                if self.needs(*bias) {
                    let mut db = vec![0.0; n];
                    g.iter().enumerate().for_each(|(k, v)| db[k % n] += v);
                    accumulate_owned(grads, *bias, db);
                }
            }
            Op::GatherRows(x, idx) => {
                let tx = val(*x);
                let (m, n) = tx.dims2();
                let mut d = vec![0.0; m * n];
                for (r, &i) in idx.iter().enumerate() {
                    d[i * n..(i + 1) * n]
                        .iter_mut()
                        .zip(&g[r * n..(r + 1) * n])
                        .for_each(|(a, b)| *a += b);
                }
                accumulate_owned(grads, *x, d);
            }
            Op::ScatterRows(x, idx) => {
                let n = node.value.dims2().1;
                let d: Vec<f64> = idx.iter().flat_map(|&i| g[i * n..(i + 1) * n].to_vec()).collect();
                accumulate_owned(grads, *x, d);
            }
            Op::SliceCols(x, start, end) => {
                let (m, n) = val(*x).dims2();
                let w = end - start;
                let mut d = vec![0.0; m * n];
                for i in 0..m {
                    d[i * n + start..i * n + end].copy_from_slice(&g[i * w..(i + 1) * w]);
                }
                accumulate_owned(grads, *x, d);
            }
            Op::ConcatCols(parts) => {
                let (m, width) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let pn = val(p).dims2().1;
                    if self.needs(p) {
                        let d: Vec<f64> = (0..m)
                            .flat_map(|i| g[i * width + offset..i * width + offset + pn].to_vec())
                            .collect();
                        accumulate_owned(grads, p, d);
                    }
                    offset += pn;
                }
            }
            Op::PickCols(x, cols) => {
                let (m, n) = val(*x).dims2();
                let mut d = vec![0.0; m * n];
                for (i, &c) in cols.iter().enumerate() {
                    d[i * n + c] = g[i];
                }
                accumulate_owned(grads, *x, d);
            }
            Op::ScaleRows(x, s) => {
                let (tx, ts) = (val(*x), val(*s));
                let (m, n) = tx.dims2();
                if self.needs(*x) {
                    let d = g
                        .iter()
                        .enumerate()
                        .map(|(k, gv)| gv * ts.data()[k / n])
                        .collect();
                    accumulate_owned(grads, *x, d);
                }
                if self.needs(*s) {
                    let d = (0..m)
                        .map(|i| tensor::dot(&g[i * n..(i + 1) * n], tx.row(i)))
                        .collect();
                    accumulate_owned(grads, *s, d);
                }
            }
            Op::SegmentSoftmax(x, segs) => {
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for &(s, e) in segs {
                    let dotp = tensor::dot(&y[s..e], &g[s..e]);
                    for i in s..e {
                        d[i] = y[i] * (g[i] - dotp);
                    }
                }
                accumulate_owned(grads, *x, d);
            }
            Op::SegmentWeightedSum(w, x, segs) => {
                let (tw, tx) = (val(*w), val(*x));
                let (m, n) = tx.dims2();
                if self.needs(*w) {
                    let mut d = vec![0.0; m];
                    for (b, &(s, e)) in segs.iter().enumerate() {
                        let gb = &g[b * n..(b + 1) * n];
                        for (i, di) in d.iter_mut().enumerate().take(e).skip(s) {
                            *di = tensor::dot(gb, tx.row(i));
                        }
                    }
                    accumulate_owned(grads, *w, d);
                }
                if self.needs(*x) {
                    let mut d = vec![0.0; m * n];
                    for (b, &(s, e)) in segs.iter().enumerate() {
                        let gb = &g[b * n..(b + 1) * n];
                        for i in s..e {
                            let wi = tw.data()[i];
                            d[i * n..(i + 1) * n]
                                .iter_mut()
                                .zip(gb)
                                .for_each(|(a, gv)| *a += wi * gv);
                        }
                    }
                    accumulate_owned(grads, *x, d);
                }
            }
            Op::SumRows(x) => {
                let (m, n) = val(*x).dims2();
                let d: Vec<f64> = (0..m * n).map(|k| g[k % n]).collect();
                accumulate_owned(grads, *x, d);
            }
            Op::Sum(x) => {
                let d = vec![g[0]; val(*x).len()];
                accumulate_owned(grads, *x, d);
            }
            Op::CrossEntropyRows {
                logits,
                labels,
                probs,
            } => {
                let c = val(*logits).dims2().1;
                let mut d = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    d[i * c + y] -= 1.0;
                    d[i * c..(i + 1) * c].iter_mut().for_each(|v| *v *= g[i]);
                }
                accumulate_owned(grads, *logits, d);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gradient_is_ones() {
        let x = Tensor::vector(vec![1.0, 2.0, 3.0]);
        let mut t = Tape::new();
        let v = t.param(&x);
        let s = t.sum(v);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn square_gradient_accumulates_both_uses() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut t = Tape::new();
        let v = t.param(&x);
        let sq = t.mul(v, v).unwrap();
        let s = t.sum(sq);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_on_vector_is_contract_error() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let mut t = Tape::new();
        let v = t.param(&x);
        assert!(matches!(t.backward(v), Err(Error::Contract(_))));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let x = Tensor::vector(vec![1.0, 2.0]);
        let c = Tensor::vector(vec![3.0, 4.0]);
        let mut t = Tape::new();
        let v = t.param(&x);
        let k = t.constant_ref(&c);
        let p = t.mul(v, k).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(v).unwrap().data(), &[3.0, 4.0]);
        assert!(g.get(k).is_none());
    }

    #[test]
    fn detach_to_passes_gradient_unchanged() {
        let z = Tensor::vector(vec![0.2, 0.8]);
        let w = Tensor::vector(vec![5.0, -1.0]);
        let mut t = Tape::new();
        let vz = t.param(&z);
        let hard = t.detach_to(vz, Tensor::vector(vec![0.0, 1.0])).unwrap();
        assert_eq!(t.value(hard).data(), &[0.0, 1.0]);
        let vw = t.constant_ref(&w);
        let p = t.mul(hard, vw).unwrap();
        let s = t.sum(p);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(vz).unwrap().data(), &[5.0, -1.0]);
    }

    #[test]
    fn masked_softmax_rows_zero_mass_and_error() {
        let x = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 0.0, 0.0, 0.0]).unwrap();
        let mut t = Tape::new();
        let v = t.param(&x);
        let adm = [true, false, true, false, false, false];
        assert!(matches!(
            t.softmax_rows(v, 1.0, Some(&adm)),
            Err(Error::NoAdmissibleExpert { token: 1 })
        ));
        let adm = [true, false, true, false, true, true];
        let s = t.softmax_rows(v, 1.0, Some(&adm)).unwrap();
        let y = t.value(s).data();
        assert_eq!(y[1], 0.0);
        assert_eq!(y[3], 0.0);
        assert!((y[4] - 0.5).abs() < 1e-15);
    }
}
