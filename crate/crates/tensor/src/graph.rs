//! Wengert-list reverse-mode differentiation.
//!
//! Every op appends a node holding its value and what its backward rule needs.
//! `backward` walks the list in reverse once.

use std::fmt;

use crate::error::{Result, TensorError};
use crate::kernels;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for a user-supplied op: given the input values, the output
/// value and the output gradient, return one gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&Tensor<T>], &Tensor<T>, &[T]) -> Vec<Vec<T>>>;

/// Shape and masking of a batched attention call.
///
/// Queries are `batch * q_len` rows, keys/values `batch * k_len` rows. Query `i`
/// of batch element `b` sees keys `0..k_valid[b]`, further limited to `0..=i`
/// when `causal`. Queries at or beyond `q_valid[b]` produce zero rows.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
    pub q_valid: Vec<usize>,
    pub k_valid: Vec<usize>,
    pub causal: bool,
}

impl AttentionLayout {
    fn visible(&self, b: usize, i: usize) -> usize {
        if self.causal {
            self.k_valid[b].min(i + 1)
        } else {
            self.k_valid[b]
        }
    }

    /// Flat offset of the probability block for query row `(b, i)`.
    fn prob_offset(&self, b: usize, i: usize) -> usize {
        (b * self.q_len + i) * self.heads * self.k_len
    }
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Dropout(Var, Vec<T>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        groups: Vec<usize>,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    GroupedLinear {
        x: Var,
        w: Var,
        groups: Vec<usize>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<T>,
        drop: Option<Vec<T>>,
    },
    SmoothedXent {
        logits: Var,
        gold: Vec<Option<usize>>,
        eps_ls: f64,
        probs: Vec<T>,
        count: usize,
    },
    WeightedSum(Var, Vec<T>),
    Custom(Vec<Var>, CustomBackward<T>),
}

impl<T: Scalar> fmt::Debug for Op<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let name = match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Scale(..) => "scale",
            Op::Relu(..) => "relu",
            Op::Dropout(..) => "dropout",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Embedding { .. } => "embedding",
            Op::GroupedLinear { .. } => "grouped_linear",
            Op::Attention { .. } => "attention",
            Op::SmoothedXent { .. } => "smoothed_xent",
            Op::WeightedSum(..) => "weighted_sum",
            Op::Custom(..) => "custom",
        };
        f.write_str(name)
    }
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Recording tape. Build the forward computation with the op methods, then
/// call [`Graph::backward`] on a scalar output.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf: gradients are computed for it.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant leaf: no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` call with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    fn two_d(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        if s.len() != 2 {
            return Err(TensorError::InvalidShape {
                shape: s.to_vec(),
                reason: format!("{op} expects a matrix"),
            });
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.two_d(a, "matmul")?;
        let (k2, n) = self.two_d(b, "matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            T::zero(),
            &mut out,
        );
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch("add", self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a length-`n` row vector to every row of `a` (last dimension `n`).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).cols();
        if self.value(row).numel() != n {
            return Err(mismatch("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let data = self
            .value(a)
            .data()
            .chunks_exact(n)
            .flat_map(|c| c.iter().zip(r).map(|(&x, &y)| x + y))
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let t = Tensor::new(self.shape(a), data).expect("same shape");
        self.push(t, Op::Relu(a), &[a])
    }

    /// Multiplies elementwise by a precomputed keep-mask (0 or 1/(1-p)).
    pub fn dropout(&mut self, a: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(a).numel() {
            return Err(mismatch("dropout", self.shape(a), &[mask.len()]));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(&mask)
            .map(|(&x, &m)| x * m)
            .collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(t, Op::Dropout(a, mask), &[a]))
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Var {
        let mut t = self.value(a).clone();
        t.grad = None;
        let n = t.cols();
        t.data_mut()
            .chunks_exact_mut(n)
            .for_each(kernels::softmax_in_place);
        self.push(t, Op::Softmax(a), &[a])
    }

    /// Layer normalization over the last dimension with a single gain/bias pair.
    pub fn layer_norm(&mut self, a: Var, gain: Var, bias: Var) -> Result<Var> {
        let rows = self.value(a).rows();
        self.layer_norm_grouped(a, gain, bias, vec![0; rows])
    }

    /// Layer normalization where row `r` uses gain/bias row `groups[r]` of the
    /// `[G × d]` tables.
    pub fn layer_norm_grouped(
        &mut self,
        a: Var,
        gain: Var,
        bias: Var,
        groups: Vec<usize>,
    ) -> Result<Var> {
        let x = self.value(a);
        let d = x.cols();
        let rows = x.rows();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.cols() != d || g.shape() != b.shape() {
            return Err(mismatch("layer_norm", x.shape(), g.shape()));
        }
        if groups.len() != rows {
            return Err(mismatch("layer_norm", x.shape(), &[groups.len()]));
        }
        let n_groups = g.rows();
        if let Some(&bad) = groups.iter().find(|&&r| r >= n_groups) {
            return Err(TensorError::IndexOutOfRange {
                op: "layer_norm",
                index: bad,
                size: n_groups,
            });
        }
        let mut y = vec![T::zero(); rows * d];
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        kernels::layer_norm_forward(
            x.data(),
            d,
            g.data(),
            b.data(),
            &groups,
            T::of(kernels::LAYER_NORM_EPS),
            &mut y,
            &mut xhat,
            &mut rstd,
        );
        let t = Tensor::new(x.shape(), y)?;
        let op = Op::LayerNorm {
            x: a,
            gain,
            bias,
            groups,
            xhat,
            rstd,
        };
        Ok(self.push(t, op, &[a, gain, bias]))
    }

    /// Gathers rows of a `[V × d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.two_d(table, "embedding")?;
        if ids.is_empty() {
            return Err(TensorError::Invalid("embedding: no ids".into()));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    size: v,
                });
            }
            out.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::new(&[ids.len(), d], out)?;
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        Ok(self.push(t, op, &[table]))
    }

    /// Row `r` of `x` (`[n × d]`) is multiplied by matrix `groups[r]` of
    /// `w` (`[G × d × e]`).
    pub fn grouped_linear(&mut self, x: Var, w: Var, groups: Vec<usize>) -> Result<Var> {
        let (n, d) = self.two_d(x, "grouped_linear")?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != d {
            return Err(mismatch("grouped_linear", self.shape(x), &ws));
        }
        if groups.len() != n {
            return Err(mismatch("grouped_linear", self.shape(x), &[groups.len()]));
        }
        let (g_count, e) = (ws[0], ws[2]);
        if let Some(&bad) = groups.iter().find(|&&g| g >= g_count) {
            return Err(TensorError::IndexOutOfRange {
                op: "grouped_linear",
                index: bad,
                size: g_count,
            });
        }
        let mut out = vec![T::zero(); n * e];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        for (g, rows) in group_rows(&groups, g_count) {
            let packed = gather_rows(xv, d, &rows);
            let mut y = vec![T::zero(); rows.len() * e];
            T::gemm(
                rows.len(),
                d,
                e,
                &packed,
                false,
                &wv[g * d * e..(g + 1) * d * e],
                false,
                T::zero(),
                &mut y,
            );
            scatter_rows(&y, e, &rows, &mut out);
        }
        let t = Tensor::new(&[n, e], out)?;
        Ok(self.push(t, Op::GroupedLinear { x, w, groups }, &[x, w]))
    }

    /// Multi-head scaled dot-product attention. `drop`, when given, is a
    /// keep-mask over `batch × q_len × heads × k_len` attention weights.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        drop: Option<Vec<T>>,
    ) -> Result<Var> {
        let (qr, d) = self.two_d(q, "attention")?;
        let (kr, kd) = self.two_d(k, "attention")?;
        if self.shape(v) != self.shape(k) || kd != d {
            return Err(mismatch("attention", self.shape(q), self.shape(k)));
        }
        let l = &layout;
        if qr != l.batch * l.q_len
            || kr != l.batch * l.k_len
            || l.heads == 0
            || d % l.heads != 0
            || l.q_valid.len() != l.batch
            || l.k_valid.len() != l.batch
        {
            return Err(TensorError::Invalid(format!(
                "attention layout {layout:?} does not fit q {:?} k {:?}",
                self.shape(q),
                self.shape(k)
            )));
        }
        if l.k_valid.iter().any(|&n| n > l.k_len) || l.q_valid.iter().any(|&n| n > l.q_len) {
            return Err(TensorError::Invalid("attention: valid length exceeds padding".into()));
        }
        let plen = l.batch * l.q_len * l.heads * l.k_len;
        if drop.as_ref().is_some_and(|m| m.len() != plen) {
            return Err(TensorError::Invalid("attention: dropout mask size".into()));
        }
        let (qv, kv, vv) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); qr * d];
        let mut probs = vec![T::zero(); plen];
        let mut scratch = vec![T::zero(); l.heads * l.k_len];
        for b in 0..l.batch {
            let kb = b * l.k_len * d;
            for i in 0..l.q_valid[b] {
                let n = l.visible(b, i);
                if n == 0 {
                    continue;
                }
                let row = (b * l.q_len + i) * d;
                let off = l.prob_offset(b, i);
                let dm = drop.as_ref().map(|m| {
                    compact(&m[off..off + l.heads * l.k_len], l.heads, l.k_len, n)
                });
                kernels::attend_row(
                    &qv[row..row + d],
                    &kv[kb..kb + n * d],
                    &vv[kb..kb + n * d],
                    n,
                    d,
                    l.heads,
                    &mut scratch[..l.heads * n],
                    dm.as_deref(),
                    &mut out[row..row + d],
                );
                for h in 0..l.heads {
                    probs[off + h * l.k_len..off + h * l.k_len + n]
                        .copy_from_slice(&scratch[h * n..(h + 1) * n]);
                }
            }
        }
        let t = Tensor::new(&[qr, d], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            layout,
            probs,
            drop,
        };
        Ok(self.push(t, op, &[q, k, v]))
    }

    /// Mean label-smoothed cross-entropy over rows whose gold label is `Some`.
    /// Smoothing puts `1 - eps_ls` on the gold class and `eps_ls / (V - 1)` on
    /// every other class.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        gold: &[Option<usize>],
        eps_ls: f64,
    ) -> Result<Var> {
        let (n, vocab) = self.two_d(logits, "smoothed_cross_entropy")?;
        if gold.len() != n {
            return Err(mismatch("smoothed_cross_entropy", self.shape(logits), &[gold.len()]));
        }
        if !(0.0..1.0).contains(&eps_ls) {
            return Err(TensorError::Invalid(format!(
                "label smoothing {eps_ls} outside [0, 1)"
            )));
        }
        if let Some(bad) = gold.iter().flatten().find(|&&g| g >= vocab) {
            return Err(TensorError::IndexOutOfRange {
                op: "smoothed_cross_entropy",
                index: *bad,
                size: vocab,
            });
        }
        let mut probs = vec![T::zero(); n * vocab];
        let (sum, count) = kernels::smoothed_xent_forward(
            self.value(logits).data(),
            vocab,
            gold,
            eps_ls,
            &mut probs,
        );
        let loss = if count == 0 { 0.0 } else { sum / count as f64 };
        let op = Op::SmoothedXent {
            logits,
            gold: gold.to_vec(),
            eps_ls,
            probs,
            count,
        };
        Ok(self.push(Tensor::scalar(T::of(loss)), op, &[logits]))
    }

    /// `sum(a ⊙ w)` for a constant weight vector.
    pub fn weighted_sum(&mut self, a: Var, w: Vec<T>) -> Result<Var> {
        if w.len() != self.value(a).numel() {
            return Err(mismatch("weighted_sum", self.shape(a), &[w.len()]));
        }
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(&w)
            .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum(a, w), &[a]))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = self.value(a).numel();
        self.weighted_sum(a, vec![T::one(); n]).expect("matching length")
    }

    /// Records an op whose forward value is computed by the caller.
    pub fn custom(
        &mut self,
        inputs: &[Var],
        value: Tensor<T>,
        backward: CustomBackward<T>,
    ) -> Var {
        self.push(value, Op::Custom(inputs.to_vec(), backward), inputs)
    }

    /// Reverse pass from a single-element output. Gradients are retrievable
    /// with [`Graph::grad`] until the next call.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.value(out).numel() != 1 {
            return Err(TensorError::Invalid(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(out)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(vec![T::one()]);
        for idx in (0..=out.0).rev() {
            let Some(gout) = grads[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            self.backprop_node(idx, &gout, &mut grads)?;
            grads[idx] = Some(gout);
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, idx: usize, gout: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].needs_grad;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.numel()]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                acc(*a, &mut |ga| T::gemm(m, n, k, gout, false, bv.data(), true, T::one(), ga));
                acc(*b, &mut |gb| T::gemm(k, m, n, av.data(), true, gout, false, T::one(), gb));
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    acc(v, &mut |g| add_into(g, gout));
                }
            }
            Op::AddRow(a, r) => {
                acc(*a, &mut |g| add_into(g, gout));
                let n = self.value(*r).numel();
                acc(*r, &mut |g| {
                    for chunk in gout.chunks_exact(n) {
                        add_into(g, chunk);
                    }
                });
            }
            Op::Scale(a, c) => acc(*a, &mut |g| {
                g.iter_mut().zip(gout).for_each(|(x, &y)| *x = *x + y * *c)
            }),
            Op::Relu(a) => {
                let av = self.value(*a).data();
                acc(*a, &mut |g| {
                    for ((x, &y), &inp) in g.iter_mut().zip(gout).zip(av) {
                        if inp > T::zero() {
                            *x = *x + y;
                        }
                    }
                })
            }
            Op::Dropout(a, mask) => acc(*a, &mut |g| {
                for ((x, &y), &m) in g.iter_mut().zip(gout).zip(mask) {
                    *x = *x + y * m;
                }
            }),
            Op::Softmax(a) => {
                let p = node.value.data();
                let n = node.value.cols();
                acc(*a, &mut |g| {
                    for ((gr, pr), dr) in g
                        .chunks_exact_mut(n)
                        .zip(p.chunks_exact(n))
                        .zip(gout.chunks_exact(n))
                    {
                        let c = pr.iter().zip(dr).fold(T::zero(), |s, (&p, &d)| s + p * d);
                        for ((x, &p), &d) in gr.iter_mut().zip(pr).zip(dr) {
                            *x = *x + p * (d - c);
                        }
                    }
                })
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                groups,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gv = self.value(*gain).data();
                let mut dx = wants(*x).then(|| vec![T::zero(); xhat.len()]);
                let mut dg = wants(*gain).then(|| vec![T::zero(); gv.len()]);
                let mut db = wants(*bias).then(|| vec![T::zero(); gv.len()]);
                kernels::layer_norm_backward(
                    gout,
                    d,
                    gv,
                    groups,
                    xhat,
                    rstd,
                    dx.as_deref_mut(),
                    dg.as_deref_mut(),
                    db.as_deref_mut(),
                );
                for (v, g) in [(*x, dx), (*gain, dg), (*bias, db)] {
                    if let Some(g) = g {
                        acc(v, &mut |buf| add_into(buf, &g));
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = node.value.cols();
                acc(*table, &mut |g| {
                    for (r, &id) in ids.iter().enumerate() {
                        add_into(&mut g[id * d..(id + 1) * d], &gout[r * d..(r + 1) * d]);
                    }
                })
            }
            Op::GroupedLinear { x, w, groups } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w);
                let (g_count, d, e) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
                for (g, rows) in group_rows(groups, g_count) {
                    let dy = gather_rows(gout, e, &rows);
                    let wg = &wv.data()[g * d * e..(g + 1) * d * e];
                    acc(*x, &mut |gx| {
                        let mut dx = vec![T::zero(); rows.len() * d];
                        T::gemm(rows.len(), e, d, &dy, false, wg, true, T::zero(), &mut dx);
                        for (i, &r) in rows.iter().enumerate() {
                            add_into(&mut gx[r * d..(r + 1) * d], &dx[i * d..(i + 1) * d]);
                        }
                    });
                    acc(*w, &mut |gw| {
                        let xs = gather_rows(xv, d, &rows);
                        let dst = &mut gw[g * d * e..(g + 1) * d * e];
                        T::gemm(d, rows.len(), e, &xs, true, &dy, false, T::one(), dst);
                    });
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout: l,
                probs,
                drop,
            } => {
                let d = node.value.cols();
                let (qv, kv, vv) = (self.value(*q).data(), self.value(*k).data(), self.value(*v).data());
                let mut dq = vec![T::zero(); qv.len()];
                let mut dk = vec![T::zero(); kv.len()];
                let mut dv = vec![T::zero(); vv.len()];
                let mut p = vec![T::zero(); l.heads * l.k_len];
                for b in 0..l.batch {
                    let kb = b * l.k_len * d;
                    for i in 0..l.q_valid[b] {
                        let n = l.visible(b, i);
                        if n == 0 {
                            continue;
                        }
                        let row = (b * l.q_len + i) * d;
                        let off = l.prob_offset(b, i);
                        let block = &probs[off..off + l.heads * l.k_len];
                        let p = &mut p[..l.heads * n];
                        for h in 0..l.heads {
                            p[h * n..(h + 1) * n]
                                .copy_from_slice(&block[h * l.k_len..h * l.k_len + n]);
                        }
                        let dm = drop.as_ref().map(|m| {
                            compact(&m[off..off + l.heads * l.k_len], l.heads, l.k_len, n)
                        });
                        kernels::attend_row_backward(
                            &gout[row..row + d],
                            &qv[row..row + d],
                            &kv[kb..kb + n * d],
                            &vv[kb..kb + n * d],
                            n,
                            d,
                            l.heads,
                            p,
                            dm.as_deref(),
                            &mut dq[row..row + d],
                            &mut dk[kb..kb + n * d],
                            &mut dv[kb..kb + n * d],
                        );
                    }
                }
                acc(*q, &mut |g| add_into(g, &dq));
                acc(*k, &mut |g| add_into(g, &dk));
                acc(*v, &mut |g| add_into(g, &dv));
            }
            Op::SmoothedXent {
                logits,
                gold,
                eps_ls,
                probs,
                count,
            } => {
                if *count == 0 {
                    return Ok(());
                }
                let vocab = self.value(*logits).cols();
                let scale = gout[0] / T::from_usize(*count).unwrap();
                let on = T::of(1.0 - eps_ls);
                let off = if vocab > 1 {
                    T::of(eps_ls / (vocab - 1) as f64)
                } else {
                    T::zero()
                };
                acc(*logits, &mut |g| {
                    for (r, gr) in gold.iter().enumerate() {
                        let Some(gi) = *gr else { continue };
                        let pr = &probs[r * vocab..(r + 1) * vocab];
                        let dst = &mut g[r * vocab..(r + 1) * vocab];
                        for (j, (x, &p)) in dst.iter_mut().zip(pr).enumerate() {
                            let target = if j == gi { on } else { off };
                            *x = *x + (p - target) * scale;
                        }
                    }
                })
            }
            Op::WeightedSum(a, w) => acc(*a, &mut |g| {
                for (x, &wv) in g.iter_mut().zip(w) {
                    *x = *x + wv * gout[0];
                }
            }),
            Op::Custom(inputs, backward) => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let gs = backward(&vals, &node.value, gout);
                if gs.len() != inputs.len() {
                    return Err(TensorError::Invalid("custom backward arity".into()));
                }
                for (v, g) in inputs.iter().zip(gs) {
                    if g.len() != self.value(*v).numel() {
                        return Err(mismatch("custom backward", self.shape(*v), &[g.len()]));
                    }
                    acc(*v, &mut |buf| add_into(buf, &g));
                }
            }
        }
        Ok(())
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(a, &b)| *a = *a + b);
}

/// Rows grouped by group id, in ascending group order.
fn group_rows(groups: &[usize], count: usize) -> Vec<(usize, Vec<usize>)> {
    let mut by: Vec<Vec<usize>> = vec![Vec::new(); count];
    for (r, &g) in groups.iter().enumerate() {
        by[g].push(r);
    }
    by.into_iter()
        .enumerate()
        .filter(|(_, rows)| !rows.is_empty())
        .collect()
}

fn gather_rows<T: Scalar>(src: &[T], width: usize, rows: &[usize]) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len() * width);
    for &r in rows {
        out.extend_from_slice(&src[r * width..(r + 1) * width]);
    }
    out
}

fn scatter_rows<T: Scalar>(src: &[T], width: usize, rows: &[usize], dst: &mut [T]) {
    for (i, &r) in rows.iter().enumerate() {
        dst[r * width..(r + 1) * width].copy_from_slice(&src[i * width..(i + 1) * width]);
    }
}

/// Packs a `heads × k_len` block into `heads × n` (first `n` keys per head).
fn compact<T: Scalar>(block: &[T], heads: usize, k_len: usize, n: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(heads * n);
    for h in 0..heads {
        out.extend_from_slice(&block[h * k_len..h * k_len + n]);
    }
    out
}
