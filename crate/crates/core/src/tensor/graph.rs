use super::kernels::{self, AttnDims};
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    MatMulBt {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
        broadcast: bool,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    Log {
        a: Var,
    },
    Exp {
        a: Var,
    },
    ClampMin {
        a: Var,
        floor: f64,
    },
    Gelu {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LogSoftmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        dims: AttnDims,
        probs: Vec<f64>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
    },
    SumLast {
        a: Var,
    },
    WeightedMean {
        a: Var,
        weights: Vec<f64>,
    },
    SumAll {
        a: Var,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A tape of tensor operations. Nodes are appended in evaluation order, which
/// is therefore a topological order; [`Graph::backward`] walks it in reverse.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0)?.as_deref()
    }

    pub fn tensor(&self, v: Var) -> Option<Tensor> {
        let g = self.get(v)?;
        Some(Tensor::new(self.shapes[v.0].clone(), g.to_vec()).expect("grad shape"))
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0)?.take()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(TensorError::ShapeMismatch {
            op,
            left: a.shape().to_vec(),
            right: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn softmax_rows(x: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(cols).zip(out.chunks_mut(cols)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for (oi, &xi) in o.iter_mut().zip(row) {
            *oi = (xi - max).exp();
            z += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= z;
        }
    }
    out
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

fn out_shape_with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input; no gradient is tracked through it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf; `backward` populates its gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// `a[.., k] · b[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() != 2 || ta.rank() == 0 || ta.cols() != tb.shape()[0] {
            return Err(mismatch("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
        let out = kernels::matmul(ta.data(), tb.data(), m, k, n);
        let shape = out_shape_with_last(ta.shape(), n);
        self.push("matmul", Tensor::new(shape, out)?, Op::MatMul { a, b }, &[a, b])
    }

    /// `a[.., k] · b[n, k]ᵀ`.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if tb.rank() != 2 || ta.rank() == 0 || ta.cols() != tb.shape()[1] {
            return Err(mismatch("matmul_bt", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[0]);
        let bt = kernels::transpose(tb.data(), n, k);
        let out = kernels::matmul(ta.data(), &bt, m, k, n);
        let shape = out_shape_with_last(ta.shape(), n);
        self.push("matmul_bt", Tensor::new(shape, out)?, Op::MatMulBt { a, b }, &[a, b])
    }

    /// Elementwise sum. A rank-1 `b` matching the trailing extent of `a` is
    /// broadcast across rows.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let broadcast = ta.shape() != tb.shape();
        if broadcast && !(tb.rank() == 1 && ta.rank() >= 2 && tb.numel() == ta.cols()) {
            return Err(mismatch("add", ta, tb));
        }
        let mut out = ta.data().to_vec();
        if broadcast {
            for row in out.chunks_mut(tb.numel()) {
                for (o, &bv) in row.iter_mut().zip(tb.data()) {
                    *o += bv;
                }
            }
        } else {
            for (o, &bv) in out.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        let shape = ta.shape().to_vec();
        self.push("add", Tensor::new(shape, out)?, Op::Add { a, b, broadcast }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x - y).collect();
        let shape = ta.shape().to_vec();
        self.push("sub", Tensor::new(shape, out)?, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let out = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let shape = ta.shape().to_vec();
        self.push("mul", Tensor::new(shape, out)?, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x * factor).collect();
        let shape = ta.shape().to_vec();
        self.push("scale", Tensor::new(shape, out)?, Op::Scale { a, factor }, &[a])
    }

    /// Natural log. Fails on any non-positive entry; callers floor with
    /// [`Graph::clamp_min`] first.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if let Some(&bad) = ta.data().iter().find(|&&x| x <= 0.0) {
            return Err(TensorError::NonPositiveLog { value: bad });
        }
        let out = ta.data().iter().map(|x| x.ln()).collect();
        let shape = ta.shape().to_vec();
        self.push("log", Tensor::new(shape, out)?, Op::Log { a }, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|x| x.exp()).collect();
        let shape = ta.shape().to_vec();
        self.push("exp", Tensor::new(shape, out)?, Op::Exp { a }, &[a])
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| x.max(floor)).collect();
        let shape = ta.shape().to_vec();
        self.push("clamp_min", Tensor::new(shape, out)?, Op::ClampMin { a, floor }, &[a])
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out = ta.data().iter().map(|&x| gelu(x)).collect();
        let shape = ta.shape().to_vec();
        self.push("gelu", Tensor::new(shape, out)?, Op::Gelu { a }, &[a])
    }

    /// Softmax over the trailing axis, max-subtracted.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if !ta.is_finite() {
            return Err(TensorError::NonFinite { op: "softmax input" });
        }
        let out = softmax_rows(ta.data(), ta.cols());
        let shape = ta.shape().to_vec();
        self.push("softmax", Tensor::new(shape, out)?, Op::Softmax { a }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let cols = ta.cols();
        let mut out = ta.data().to_vec();
        for row in out.chunks_mut(cols) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let shape = ta.shape().to_vec();
        self.push("log_softmax", Tensor::new(shape, out)?, Op::LogSoftmax { a }, &[a])
    }

    /// Layer normalization over the trailing axis followed by the affine
    /// `gain ⊙ x̂ + bias`.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.shape() != [d] || tb.shape() != [d] {
            return Err(mismatch("layernorm", tx, tg));
        }
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = Vec::with_capacity(tx.rows());
        let mut out = vec![0.0; tx.numel()];
        for ((row, xh), o) in tx.data().chunks(d).zip(xhat.chunks_mut(d)).zip(out.chunks_mut(d)) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for i in 0..d {
                xh[i] = (row[i] - mean) * r;
                o[i] = xh[i] * tg.data()[i] + tb.data()[i];
            }
        }
        let shape = tx.shape().to_vec();
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        };
        self.push("layernorm", Tensor::new(shape, out)?, op, &[x, gain, bias])
    }

    /// Gathers rows of `table[V, d]`; output shape is `id_shape + [d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize], id_shape: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 || id_shape.iter().product::<usize>() != ids.len() {
            return Err(TensorError::Invalid(format!(
                "embedding: table {:?}, {} ids for shape {id_shape:?}",
                tt.shape(),
                ids.len()
            )));
        }
        let (v, d) = (tt.shape()[0], tt.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    what: "token",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(tt.row(id));
        }
        let mut shape = id_shape.to_vec();
        shape.push(d);
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding", Tensor::new(shape, out)?, op, &[table])
    }

    /// Multi-head causal self-attention over `[batch, seq, d]` projections.
    /// Head `h` reads columns `h·d/heads .. (h+1)·d/heads`.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        same_shape("attention", tq, tk)?;
        same_shape("attention", tq, tv)?;
        if tq.rank() != 3 || heads == 0 || tq.shape()[2] % heads != 0 {
            return Err(TensorError::Invalid(format!(
                "attention: shape {:?} with {heads} heads",
                tq.shape()
            )));
        }
        let dims = AttnDims {
            batch: tq.shape()[0],
            seq: tq.shape()[1],
            heads,
            d: tq.shape()[2],
        };
        let (out, probs) = kernels::causal_attention(tq.data(), tk.data(), tv.data(), dims);
        let shape = tq.shape().to_vec();
        let op = Op::Attention { q, k, v, dims, probs };
        self.push("attention", Tensor::new(shape, out)?, op, &[q, k, v])
    }

    /// Token-averaged cross entropy of `logits[.., V]` against `targets`,
    /// counting only rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let tl = self.value(logits);
        let (rows, v) = (tl.rows(), tl.cols());
        if targets.len() != rows || mask.len() != rows {
            return Err(TensorError::Invalid(format!(
                "cross_entropy: {rows} rows, {} targets, {} mask",
                targets.len(),
                mask.len()
            )));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(TensorError::Invalid("cross_entropy: empty mask".into()));
        }
        let probs = softmax_rows(tl.data(), v);
        let mut loss = 0.0;
        let mut weights = vec![0.0; rows];
        for i in 0..rows {
            if !mask[i] {
                continue;
            }
            let t = targets[i];
            if t >= v {
                return Err(TensorError::IndexOutOfRange {
                    what: "target",
                    index: t,
                    bound: v,
                });
            }
            let row = tl.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[t];
            weights[i] = 1.0 / count as f64;
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            weights,
            probs,
        };
        self.push("cross_entropy", Tensor::scalar(loss / count as f64), op, &[logits])
    }

    /// Sums over the trailing axis, dropping it.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let out: Vec<f64> = ta.data().chunks(ta.cols()).map(|r| r.iter().sum()).collect();
        let shape = ta.shape()[..ta.rank().saturating_sub(1)].to_vec();
        self.push("sum_last", Tensor::new(shape, out)?, Op::SumLast { a }, &[a])
    }

    /// `Σ wᵢ aᵢ / Σ wᵢ` over all entries of `a`.
    pub fn weighted_mean(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let ta = self.value(a);
        let total: f64 = weights.iter().sum();
        if weights.len() != ta.numel() || total <= 0.0 {
            return Err(TensorError::Invalid(format!(
                "weighted_mean: {} weights (sum {total}) for {} values",
                weights.len(),
                ta.numel()
            )));
        }
        let norm: Vec<f64> = weights.iter().map(|w| w / total).collect();
        let value: f64 = ta.data().iter().zip(&norm).map(|(x, w)| x * w).sum();
        let op = Op::WeightedMean { a, weights: norm };
        self.push("weighted_mean", Tensor::scalar(value), op, &[a])
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).data().iter().sum();
        self.push("sum_all", Tensor::scalar(value), Op::SumAll { a }, &[a])
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let s = self.sum_all(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse-mode sweep from a scalar `loss`. Every node is visited at most
    /// once, in reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, &g, &mut grads);
        }

        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[1]);
                if self.wants(*a) {
                    let bt = kernels::transpose(tb.data(), k, n);
                    self.accumulate(grads, *a, kernels::matmul(g, &bt, m, n, k));
                }
                if self.wants(*b) {
                    let at = kernels::transpose(ta.data(), m, k);
                    self.accumulate(grads, *b, kernels::matmul(&at, g, k, m, n));
                }
            }
            Op::MatMulBt { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.shape()[0]);
                if self.wants(*a) {
                    self.accumulate(grads, *a, kernels::matmul(g, tb.data(), m, n, k));
                }
                if self.wants(*b) {
                    let gt = kernels::transpose(g, m, n);
                    self.accumulate(grads, *b, kernels::matmul(&gt, ta.data(), n, m, k));
                }
            }
            Op::Add { a, b, broadcast } => {
                self.accumulate(grads, *a, g.to_vec());
                if *broadcast {
                    let cols = self.value(*b).numel();
                    self.accumulate(grads, *b, kernels::sum_rows(g, cols));
                } else {
                    self.accumulate(grads, *b, g.to_vec());
                }
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|x| -x).collect());
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if self.wants(*a) {
                    self.accumulate(grads, *a, g.iter().zip(tb).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, g.iter().zip(ta).map(|(x, y)| x * y).collect());
                }
            }
            Op::Scale { a, factor } => {
                self.accumulate(grads, *a, g.iter().map(|x| x * factor).collect());
            }
            Op::Log { a } => {
                let ta = self.value(*a).data();
                self.accumulate(grads, *a, g.iter().zip(ta).map(|(x, y)| x / y).collect());
            }
            Op::Exp { a } => {
                self.accumulate(grads, *a, g.iter().zip(out).map(|(x, y)| x * y).collect());
            }
            Op::ClampMin { a, floor } => {
                let ta = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(ta)
                    .map(|(&x, &y)| if y >= *floor { x } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, d);
            }
            Op::Gelu { a } => {
                let ta = self.value(*a).data();
                let d = g.iter().zip(ta).map(|(x, &y)| x * gelu_grad(y)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::Softmax { a } => {
                let cols = node.value.cols();
                let mut d = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(cols).zip(out.chunks(cols)).zip(d.chunks_mut(cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(x, y)| x * y).sum();
                    for i in 0..cols {
                        dr[i] = yr[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LogSoftmax { a } => {
                let cols = node.value.cols();
                let mut d = vec![0.0; g.len()];
                for ((gr, yr), dr) in g.chunks(cols).zip(out.chunks(cols)).zip(d.chunks_mut(cols)) {
                    let s: f64 = gr.iter().sum();
                    for i in 0..cols {
                        dr[i] = gr[i] - yr[i].exp() * s;
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                if self.wants(*gain) {
                    let mut dg = vec![0.0; d];
                    for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for i in 0..d {
                            dg[i] += gr[i] * xr[i];
                        }
                    }
                    self.accumulate(grads, *gain, dg);
                }
                if self.wants(*bias) {
                    self.accumulate(grads, *bias, kernels::sum_rows(g, d));
                }
                if self.wants(*x) {
                    let mut dx = vec![0.0; g.len()];
                    for (((gr, xr), dr), &r) in g.chunks(d).zip(xhat.chunks(d)).zip(dx.chunks_mut(d)).zip(rstd) {
                        let mut mean_dxh = 0.0;
                        let mut mean_dxh_xh = 0.0;
                        for i in 0..d {
                            let dxh = gr[i] * gv[i];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * xr[i];
                        }
                        mean_dxh /= d as f64;
                        mean_dxh_xh /= d as f64;
                        for i in 0..d {
                            dr[i] = r * (gr[i] * gv[i] - mean_dxh - xr[i] * mean_dxh_xh);
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                let tt = self.value(*table);
                let d = tt.cols();
                let mut dt = vec![0.0; tt.numel()];
                for (gr, &id) in g.chunks(d).zip(ids) {
                    for (o, x) in dt[id * d..(id + 1) * d].iter_mut().zip(gr) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *table, dt);
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let (dq, dk, dv) = kernels::causal_attention_backward(tq.data(), tk.data(), tv.data(), probs, g, *dims);
                self.accumulate(grads, *q, dq);
                self.accumulate(grads, *k, dk);
                self.accumulate(grads, *v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
            } => {
                let v = self.value(*logits).cols();
                let mut d = vec![0.0; probs.len()];
                for (i, (dr, pr)) in d.chunks_mut(v).zip(probs.chunks(v)).enumerate() {
                    let w = weights[i] * g[0];
                    if w == 0.0 {
                        continue;
                    }
                    for j in 0..v {
                        dr[j] = w * pr[j];
                    }
                    dr[targets[i]] -= w;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::SumLast { a } => {
                let cols = self.value(*a).cols();
                let d = g.iter().flat_map(|&x| std::iter::repeat(x).take(cols)).collect();
                self.accumulate(grads, *a, d);
            }
            Op::WeightedMean { a, weights } => {
                self.accumulate(grads, *a, weights.iter().map(|w| w * g[0]).collect());
            }
            Op::SumAll { a } => {
                let n = self.value(*a).numel();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::finite_difference_grad;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let x = g.constant(t(&[3, 1], &[4., -2., 7.]));
        let y = g.matmul(eye, x).unwrap();
        assert_eq!(g.value(y).data(), &[4., -2., 7.]);

        let a = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let ones = g.constant(t(&[2, 1], &[1., 1.]));
        let y = g.matmul(a, ones).unwrap();
        assert_eq!(g.value(y).data(), &[3., 7.]);

        let z = g.constant(Tensor::zeros(&[2, 2]));
        let y = g.matmul(z, ones).unwrap();
        assert_eq!(g.value(y).data(), &[0., 0.]);
    }

    #[test]
    fn matmul_rejects_inner_mismatch() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.matmul(a, b), Err(TensorError::ShapeMismatch { .. })));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, 0.0, 0.0]));
        let y = g.softmax(x).unwrap();
        for &p in g.value(y).data() {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(Tensor::from_vec(vec![2f64.ln(), 0.0]));
        let y = g.softmax(x).unwrap();
        let p = g.value(y).data();
        assert!((p[0] - 2.0 / 3.0).abs() < 1e-15 && (p[1] - 1.0 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariant_and_normalized() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let base = Tensor::randn(&[5, 9], 3.0, &mut rng);
        let shifted = Tensor::new(vec![5, 9], base.data().iter().map(|x| x + 123.25).collect()).unwrap();
        let mut g = Graph::new();
        let (a, b) = (g.constant(base), g.constant(shifted));
        let (sa, sb) = (g.softmax(a).unwrap(), g.softmax(b).unwrap());
        assert!(g.value(sa).max_abs_diff(g.value(sb)) < 1e-12);
        for r in 0..5 {
            assert!((g.value(sa).row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rejects_nan() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.0, f64::NAN]));
        assert!(matches!(g.softmax(x), Err(TensorError::NonFinite { .. })));
    }

    #[test]
    fn log_exp_round_trip() {
        let xs: Vec<f64> = (0..=200).map(|i| -10.0 + 0.1 * i as f64).collect();
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(xs.clone()));
        let e = g.exp(x).unwrap();
        let l = g.log(e).unwrap();
        for (a, b) in g.value(l).data().iter().zip(&xs) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn log_of_nonpositive_is_an_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![0.5, 0.0]));
        assert!(matches!(g.log(x), Err(TensorError::NonPositiveLog { .. })));
        let c = g.clamp_min(x, 1e-12).unwrap();
        assert!(g.log(c).is_ok());
    }

    #[test]
    fn layernorm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[4, 16], 5.0, &mut rng));
        let gain = g.constant(Tensor::full(&[16], 1.0));
        let bias = g.constant(Tensor::zeros(&[16]));
        let y = g.layernorm(x, gain, bias, 0.0).unwrap();
        for r in 0..4 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-10 && (var - 1.0).abs() < 1e-10);
        }
    }

    #[test]
    fn cross_entropy_vanishes_with_growing_margin() {
        let mut prev = f64::INFINITY;
        for gap in [1.0, 5.0, 10.0, 20.0, 40.0] {
            let mut g = Graph::new();
            let x = g.constant(t(&[2, 3], &[gap, 0., 0., 0., 0., gap]));
            let ce = g.cross_entropy(x, &[0, 2], &[true, true]).unwrap();
            let v = g.value(ce).item();
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-15);
    }

    #[test]
    fn product_rule_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let y = g.param(Tensor::scalar(3.0));
        let z = g.mul(x, y).unwrap();
        let grads = g.backward(z).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0]);
        assert_eq!(grads.get(y).unwrap(), &[2.0]);
    }

    #[test]
    fn softmax_cross_entropy_gradient_is_probs_minus_onehot() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let logits = Tensor::randn(&[3, 5], 1.0, &mut rng);
        let targets = [4, 0, 2];
        let mut g = Graph::new();
        let x = g.param(logits.clone());
        let ce = g.cross_entropy(x, &targets, &[true; 3]).unwrap();
        let grads = g.backward(ce).unwrap();
        let gx = grads.get(x).unwrap();
        for r in 0..3 {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            for j in 0..5 {
                let p = (row[j] - max).exp() / z;
                let expect = (p - if j == targets[r] { 1.0 } else { 0.0 }) / 3.0;
                assert!((gx[r * 5 + j] - expect).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalar(_))));
    }

    #[test]
    fn attention_is_causal() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let q = Tensor::randn(&[1, 6, 8], 1.0, &mut rng);
        let k = Tensor::randn(&[1, 6, 8], 1.0, &mut rng);
        let v = Tensor::randn(&[1, 6, 8], 1.0, &mut rng);
        let run = |k: &Tensor, v: &Tensor| {
            let mut g = Graph::new();
            let (a, b, c) = (g.constant(q.clone()), g.constant(k.clone()), g.constant(v.clone()));
            let o = g.causal_attention(a, b, c, 2).unwrap();
            g.value(o).clone()
        };
        let base = run(&k, &v);
        let mut v2 = v.clone();
        let mut k2 = k.clone();
        for j in 0..8 {
            v2.data_mut()[5 * 8 + j] += 1.0;
            k2.data_mut()[5 * 8 + j] -= 2.0;
        }
        let pert = run(&k2, &v2);
        assert_eq!(&base.data()[..5 * 8], &pert.data()[..5 * 8]);
        assert_ne!(&base.data()[5 * 8..], &pert.data()[5 * 8..]);
    }

    /// Scalarizes op output against a fixed random weighting so every output
    /// coordinate contributes to the checked gradient.
    fn check_unary(build: impl Fn(&mut Graph, Var) -> Result<Var> + Copy, x0: &Tensor, tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let probe = {
            let mut g = Graph::new();
            let x = g.constant(x0.clone());
            let y = build(&mut g, x).unwrap();
            Tensor::randn(g.value(y).shape(), 1.0, &mut rng)
        };
        let eval = |x: &Tensor| {
            let mut g = Graph::new();
            let xv = g.constant(x.clone());
            let y = build(&mut g, xv).unwrap();
            g.value(y)
                .data()
                .iter()
                .zip(probe.data())
                .map(|(a, b)| a * b)
                .sum::<f64>()
        };
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let y = build(&mut g, x).unwrap();
        let w = g.constant(probe.clone());
        let prod = g.mul(y, w).unwrap();
        let loss = g.sum_all(prod).unwrap();
        let auto = g.backward(loss).unwrap().tensor(x).unwrap();
        let fd = finite_difference_grad(eval, x0, 1e-5);
        for (a, n) in auto.data().iter().zip(fd.data()) {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-3);
            assert!(rel <= tol, "autodiff {a} vs fd {n}");
        }
    }

    #[test]
    fn unary_ops_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2024);
        let x = Tensor::randn(&[3, 4], 1.0, &mut rng);
        check_unary(|g, x| g.exp(x), &x, 1e-6);
        check_unary(|g, x| g.gelu(x), &x, 1e-6);
        check_unary(|g, x| g.softmax(x), &x, 1e-6);
        check_unary(|g, x| g.log_softmax(x), &x, 1e-6);
        check_unary(|g, x| g.scale(x, -2.5), &x, 1e-6);
        check_unary(|g, x| g.sum_last(x), &x, 1e-6);
        check_unary(
            |g, x| g.weighted_mean(x, &[1., 2., 0., 1., 3., 1., 1., 1., 0.5, 1., 1., 2.]),
            &x,
            1e-6,
        );
        let pos = Tensor::new(vec![3, 4], x.data().iter().map(|v| v.abs() + 0.5).collect()).unwrap();
        check_unary(|g, x| g.log(x), &pos, 1e-6);
        check_unary(|g, x| g.clamp_min(x, -0.2), &x, 1e-6);
    }
}
