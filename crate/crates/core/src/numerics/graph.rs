//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and whatever it
//! needs for the backward pass. Nodes are created in topological order, so a
//! single reverse sweep computes all gradients.

use std::sync::Arc;

use crate::error::{Error, Result};

use super::scalar::Real;
use super::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse attention pattern for one sequence: for every query position the
/// ascending list of key positions it may attend to.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KeyPattern {
    allowed: Vec<Vec<u32>>,
}

impl KeyPattern {
    pub fn new(allowed: Vec<Vec<u32>>) -> Self {
        Self { allowed }
    }

    /// Build from a dense `len × len` reachability matrix.
    pub fn from_dense(len: usize, allowed: impl Fn(usize, usize) -> bool) -> Self {
        let allowed = (0..len)
            .map(|i| (0..len).filter(|&j| allowed(i, j)).map(|j| j as u32).collect())
            .collect();
        Self { allowed }
    }

    pub fn len(&self) -> usize {
        self.allowed.len()
    }

    pub fn is_empty(&self) -> bool {
        self.allowed.is_empty()
    }

    pub fn keys(&self, query: usize) -> &[u32] {
        &self.allowed[query]
    }

    pub fn allows(&self, query: usize, key: usize) -> bool {
        self.allowed[query].binary_search(&(key as u32)).is_ok()
    }

    fn pair_count(&self) -> usize {
        self.allowed.iter().map(Vec::len).sum()
    }
}

enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        x: Var,
        row: Var,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    Gelu {
        x: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Attention {
        qkv: Var,
        heads: usize,
        patterns: Vec<Arc<KeyPattern>>,
        probs: Vec<T>,
    },
    LogSoftmax {
        x: Var,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Kl {
        q_log: Var,
        p: Vec<T>,
        rows: usize,
    },
    Sum {
        x: Var,
        scale: f64,
    },
    WeightedSum {
        terms: Vec<(Var, f64)>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A tape of tensor operations.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

impl<T: Real> Graph<T> {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Consumes the graph, returning one node's value without a copy.
    pub fn into_value(mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros(&[0]))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient accumulated by the last [`Graph::backward`]. `None` iff the
    /// node does not require gradients; nodes off the output path get zeros.
    pub fn grad(&self, v: Var) -> Option<Tensor<T>> {
        if !self.rg(v) {
            return None;
        }
        match self.grads.get(v.0).and_then(Option::as_ref) {
            Some(g) => Some(g.clone()),
            None => Some(Tensor::zeros(self.nodes[v.0].value.shape())),
        }
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn expect_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape_of(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
        }
    }

    // ---------------------------------------------------------------- ops

    /// `[m×k] · [k×n] → [m×n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.expect_2d("matmul", a)?;
        let (k2, n) = self.expect_2d("matmul", b)?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("inner dimensions differ: {:?} × {:?}", [m, k], [k2, n]),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            k as isize,
            1,
            self.value(b).data(),
            n as isize,
            1,
            T::zero(),
            &mut out,
        );
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul { a, b }, rg))
    }

    /// Elementwise sum of two same-shaped tensors.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::dim(
                "add",
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let value = Tensor::new(self.shape_of(a).to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    /// Adds a length-`c` vector to every row of an `[r×c]` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (_, c) = self.expect_2d("add_row", x)?;
        if self.shape_of(row) != [c] {
            return Err(Error::dim(
                "add_row",
                format!("row {:?} does not match {:?}", self.shape_of(row), self.shape_of(x)),
            ));
        }
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks(c)
            .flat_map(|xs| xs.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        let value = Tensor::new(self.shape_of(x).to_vec(), data)?;
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::AddRow { x, row }, rg))
    }

    /// `x · W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row(y, b)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let data = self.value(x).data().iter().map(|&v| v * f).collect();
        let value = Tensor::new(self.shape_of(x).to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let c = T::from_f64(GELU_C);
        let k = T::from_f64(0.044715);
        let half = T::from_f64(0.5);
        let data = self
            .value(x)
            .data()
            .iter()
            .map(|&v| half * v * (T::one() + (c * (v + k * v * v * v)).tanh()))
            .collect();
        let value = Tensor::new(self.shape_of(x).to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, Op::Gelu { x }, rg)
    }

    /// Layer normalization over the last axis with affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.expect_2d("layer_norm", x)?;
        if self.shape_of(gamma) != [c] || self.shape_of(beta) != [c] {
            return Err(Error::dim(
                "layer_norm",
                format!(
                    "gamma {:?} / beta {:?} vs width {c}",
                    self.shape_of(gamma),
                    self.shape_of(beta)
                ),
            ));
        }
        let xs = self.value(x).data();
        let gs = self.value(gamma).data();
        let bs = self.value(beta).data();
        let mut out = vec![T::zero(); r * c];
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        for i in 0..r {
            let row = &xs[i * c..(i + 1) * c];
            let mean = row.iter().map(|v| v.to_f64()).sum::<f64>() / c as f64;
            let var = row
                .iter()
                .map(|v| {
                    let d = v.to_f64() - mean;
                    d * d
                })
                .sum::<f64>()
                / c as f64;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            rstd[i] = T::from_f64(rs);
            for j in 0..c {
                let h = T::from_f64((row[j].to_f64() - mean) * rs);
                xhat[i * c + j] = h;
                out[i * c + j] = h * gs[j] + bs[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(vec![r, c], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row lookup: `table[ids[i]]` for each `i`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.expect_2d("embedding", table)?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::Index(format!(
                "embedding id {bad} out of range for table of {v} rows"
            )));
        }
        let t = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Multi-head scaled dot-product attention.
    ///
    /// `qkv` is `[B·L × 3d]` with queries, keys and values side by side; one
    /// key pattern per batch item, each of length `L`. Queries with an empty
    /// key list produce zeros.
    pub fn attention(
        &mut self,
        qkv: Var,
        heads: usize,
        patterns: &[Arc<KeyPattern>],
    ) -> Result<Var> {
        let (rows, w3) = self.expect_2d("attention", qkv)?;
        let batch = patterns.len();
        if heads == 0 || w3 % (3 * heads) != 0 {
            return Err(Error::dim(
                "attention",
                format!("width {w3} not divisible into 3×{heads} heads"),
            ));
        }
        if batch == 0 || rows % batch != 0 {
            return Err(Error::dim(
                "attention",
                format!("{rows} rows do not split into {batch} sequences"),
            ));
        }
        let seq = rows / batch;
        if let Some(p) = patterns.iter().find(|p| p.len() != seq) {
            return Err(Error::dim(
                "attention",
                format!("pattern length {} vs sequence length {seq}", p.len()),
            ));
        }
        let d = w3 / 3;
        let dh = d / heads;
        let scale = T::from_f64(1.0 / (dh as f64).sqrt());
        let x = self.value(qkv).data();
        let pairs: usize = patterns.iter().map(|p| p.pair_count()).sum();
        let mut probs = Vec::with_capacity(pairs * heads);
        let mut out = vec![T::zero(); rows * d];
        let mut scores: Vec<T> = Vec::with_capacity(seq);
        for (b, pat) in patterns.iter().enumerate() {
            let base = b * seq;
            for h in 0..heads {
                let qo = h * dh;
                let ko = d + h * dh;
                let vo = 2 * d + h * dh;
                for i in 0..seq {
                    let keys = pat.keys(i);
                    if keys.is_empty() {
                        continue;
                    }
                    let q = &x[(base + i) * w3 + qo..(base + i) * w3 + qo + dh];
                    scores.clear();
                    let mut max = T::neg_infinity();
                    for &j in keys {
                        let kr = &x[(base + j as usize) * w3 + ko..(base + j as usize) * w3 + ko + dh];
                        let mut s = T::zero();
                        for t in 0..dh {
                            s += q[t] * kr[t];
                        }
                        let s = s * scale;
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut z = 0.0f64;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += s.to_f64();
                    }
                    let inv = T::from_f64(1.0 / z);
                    let o = &mut out[(base + i) * d + h * dh..(base + i) * d + (h + 1) * dh];
                    for (&j, s) in keys.iter().zip(scores.iter()) {
                        let p = *s * inv;
                        probs.push(p);
                        let vr = &x[(base + j as usize) * w3 + vo..(base + j as usize) * w3 + vo + dh];
                        for t in 0..dh {
                            o[t] += p * vr[t];
                        }
                    }
                }
            }
        }
        let rg = self.rg(qkv);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::Attention {
                qkv,
                heads,
                patterns: patterns.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Numerically stable log-softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let width = v.last_dim();
        if width == 0 {
            return Err(Error::dim("log_softmax", "empty last axis"));
        }
        let mut out = Vec::with_capacity(v.numel());
        for row in v.data().chunks(width) {
            log_softmax_row(row, &mut out);
        }
        let value = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::LogSoftmax { x }, rg))
    }

    /// Columns `start..start+width` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (r, c) = self.expect_2d("slice_cols", x)?;
        if start + width > c {
            return Err(Error::dim(
                "slice_cols",
                format!("columns {start}..{} of a {r}×{c} matrix", start + width),
            ));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(r * width);
        for i in 0..r {
            out.extend_from_slice(&xs[i * c + start..i * c + start + width]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![r, width], out)?,
            Op::SliceCols { x, start },
            rg,
        ))
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (r, c) = self.expect_2d("gather_rows", x)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(Error::Index(format!("row {bad} out of range for {r} rows")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(rows.len() * c);
        for &i in rows {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![rows.len(), c], out)?,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log_softmax(logits)[i, targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, v) = self.expect_2d("cross_entropy", logits)?;
        if targets.len() != n {
            return Err(Error::dim(
                "cross_entropy",
                format!("{n} rows but {} targets", targets.len()),
            ));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Index(format!(
                "target id {bad} out of range for {v} classes"
            )));
        }
        if n == 0 {
            return Err(Error::dim("cross_entropy", "no rows"));
        }
        let xs = self.value(logits).data();
        let mut probs = Vec::with_capacity(n * v);
        let mut total = 0.0f64;
        let mut lsm = Vec::with_capacity(v);
        for (i, &t) in targets.iter().enumerate() {
            lsm.clear();
            log_softmax_row(&xs[i * v..(i + 1) * v], &mut lsm);
            total -= lsm[t].to_f64();
            probs.extend(lsm.iter().map(|l| l.exp()));
        }
        let value = Tensor::scalar(T::from_f64(total / n as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Forward KL divergence `KL(p ‖ q)` between rows of log-probabilities,
    /// averaged over rows. `p_log` is a fixed target: no gradient reaches it.
    pub fn kl_divergence(&mut self, p_log: Var, q_log: Var) -> Result<Var> {
        let target = self.value(p_log).clone();
        self.kl_to_target(&target, q_log)
    }

    /// [`Graph::kl_divergence`] with the target given as a plain tensor.
    pub fn kl_to_target(&mut self, p_log: &Tensor<T>, q_log: Var) -> Result<Var> {
        if p_log.shape() != self.shape_of(q_log) {
            return Err(Error::dim(
                "kl_divergence",
                format!("{:?} vs {:?}", p_log.shape(), self.shape_of(q_log)),
            ));
        }
        let rows = p_log.rows();
        if rows == 0 {
            return Err(Error::dim("kl_divergence", "no rows"));
        }
        let q = self.value(q_log).data();
        let mut total = 0.0f64;
        let mut p = Vec::with_capacity(p_log.numel());
        for (&pl, &ql) in p_log.data().iter().zip(q) {
            let pe = pl.exp();
            p.push(pe);
            if pe.to_f64() > 0.0 {
                total += pe.to_f64() * (pl.to_f64() - ql.to_f64());
            }
        }
        let value = Tensor::scalar(T::from_f64(total / rows as f64));
        let rg = self.rg(q_log);
        Ok(self.push(value, Op::Kl { q_log, p, rows }, rg))
    }

    /// Sum of all elements.
    pub fn sum(&mut self, x: Var) -> Var {
        self.reduce(x, 1.0)
    }

    /// Mean of all elements.
    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        self.reduce(x, 1.0 / n as f64)
    }

    fn reduce(&mut self, x: Var, scale: f64) -> Var {
        let s: f64 = self.value(x).data().iter().map(|v| v.to_f64()).sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(T::from_f64(s * scale)), Op::Sum { x, scale }, rg)
    }

    /// `Σ wᵢ·xᵢ` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut total = 0.0f64;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.numel() != 1 {
                return Err(Error::dim(
                    "weighted_sum",
                    format!("term of shape {:?} is not a scalar", t.shape()),
                ));
            }
            total += w * t.item().to_f64();
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        Ok(self.push(
            Tensor::scalar(T::from_f64(total)),
            Op::WeightedSum {
                terms: terms.to_vec(),
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse sweep from `output`, seeding its gradient with ones.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(output) {
            return Ok(());
        }
        let seed = Tensor::full(self.shape_of(output), T::one());
        self.grads[output.0] = Some(seed);
        for idx in (0..=output.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(gout) = self.grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &gout)?;
            self.grads[idx] = Some(gout);
        }
        Ok(())
    }

    fn grad_buf(&mut self, v: Var) -> &mut Tensor<T> {
        let shape = self.nodes[v.0].value.shape().to_vec();
        self.grads[v.0].get_or_insert_with(|| Tensor::zeros(&shape))
    }

    fn accumulate(&mut self, v: Var, g: &[T]) {
        if !self.rg(v) {
            return;
        }
        let buf = self.grad_buf(v).data_mut();
        for (a, &b) in buf.iter_mut().zip(g) {
            *a += b;
        }
    }

    fn backprop_node(&mut self, idx: usize, gout: &Tensor<T>) -> Result<()> {
        // Temporarily move the op out so `self` can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        let g = gout.data();
        match &op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.expect_2d("matmul", *a)?;
                let n = self.shape_of(*b)[1];
                if self.rg(*a) {
                    let bv = self.nodes[b.0].value.data().to_vec();
                    let buf = self.grad_buf(*a).data_mut();
                    // dA += dC · Bᵀ
                    T::gemm(m, n, k, g, n as isize, 1, &bv, 1, n as isize, T::one(), buf);
                }
                if self.rg(*b) {
                    let av = self.nodes[a.0].value.data().to_vec();
                    let buf = self.grad_buf(*b).data_mut();
                    // dB += Aᵀ · dC
                    T::gemm(k, m, n, &av, 1, k as isize, g, n as isize, 1, T::one(), buf);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(*a, g);
                self.accumulate(*b, g);
            }
            Op::AddRow { x, row } => {
                self.accumulate(*x, g);
                if self.rg(*row) {
                    let c = self.shape_of(*row)[0];
                    let mut acc = vec![0.0f64; c];
                    for chunk in g.chunks(c) {
                        for (a, &v) in acc.iter_mut().zip(chunk) {
                            *a += v.to_f64();
                        }
                    }
                    let acc: Vec<T> = acc.into_iter().map(T::from_f64).collect();
                    self.accumulate(*row, &acc);
                }
            }
            Op::Scale { x, factor } => {
                let f = T::from_f64(*factor);
                let gx: Vec<T> = g.iter().map(|&v| v * f).collect();
                self.accumulate(*x, &gx);
            }
            Op::Gelu { x } => {
                let c = T::from_f64(GELU_C);
                let k = T::from_f64(0.044715);
                let k3 = T::from_f64(3.0 * 0.044715);
                let half = T::from_f64(0.5);
                let gx: Vec<T> = self.nodes[x.0]
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &go)| {
                        let t = (c * (v + k * v * v * v)).tanh();
                        let d = half * (T::one() + t)
                            + half * v * (T::one() - t * t) * c * (T::one() + k3 * v * v);
                        go * d
                    })
                    .collect();
                self.accumulate(*x, &gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let (r, c) = self.expect_2d("layer_norm", *x)?;
                if self.rg(*gamma) {
                    let mut acc = vec![0.0f64; c];
                    for i in 0..r {
                        for j in 0..c {
                            acc[j] += (g[i * c + j] * xhat[i * c + j]).to_f64();
                        }
                    }
                    let acc: Vec<T> = acc.into_iter().map(T::from_f64).collect();
                    self.accumulate(*gamma, &acc);
                }
                if self.rg(*beta) {
                    let mut acc = vec![0.0f64; c];
                    for i in 0..r {
                        for j in 0..c {
                            acc[j] += g[i * c + j].to_f64();
                        }
                    }
                    let acc: Vec<T> = acc.into_iter().map(T::from_f64).collect();
                    self.accumulate(*beta, &acc);
                }
                if self.rg(*x) {
                    let gam = self.nodes[gamma.0].value.data().to_vec();
                    let mut gx = vec![T::zero(); r * c];
                    for i in 0..r {
                        let mut mean_d = 0.0f64;
                        let mut mean_dx = 0.0f64;
                        for j in 0..c {
                            let d = (g[i * c + j] * gam[j]).to_f64();
                            mean_d += d;
                            mean_dx += d * xhat[i * c + j].to_f64();
                        }
                        mean_d /= c as f64;
                        mean_dx /= c as f64;
                        let rs = rstd[i].to_f64();
                        for j in 0..c {
                            let d = (g[i * c + j] * gam[j]).to_f64();
                            gx[i * c + j] = T::from_f64(
                                rs * (d - mean_d - xhat[i * c + j].to_f64() * mean_dx),
                            );
                        }
                    }
                    self.accumulate(*x, &gx);
                }
            }
            Op::Embedding { table, ids } => {
                if self.rg(*table) {
                    let d = self.shape_of(*table)[1];
                    let buf = self.grad_buf(*table).data_mut();
                    for (row, &id) in ids.iter().enumerate() {
                        for t in 0..d {
                            buf[id * d + t] += g[row * d + t];
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                heads,
                patterns,
                probs,
            } => {
                if self.rg(*qkv) {
                    let gx = attention_backward(
                        self.nodes[qkv.0].value.data(),
                        self.shape_of(*qkv)[1],
                        *heads,
                        patterns,
                        probs,
                        g,
                    );
                    self.accumulate(*qkv, &gx);
                }
            }
            Op::LogSoftmax { x } => {
                let out = self.nodes[idx].value.data();
                let w = self.nodes[idx].value.last_dim();
                let mut gx = vec![T::zero(); out.len()];
                for ((orow, grow), xrow) in out.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                    let gs: f64 = grow.iter().map(|v| v.to_f64()).sum();
                    let gs = T::from_f64(gs);
                    for t in 0..w {
                        xrow[t] = grow[t] - orow[t].exp() * gs;
                    }
                }
                self.accumulate(*x, &gx);
            }
            Op::SliceCols { x, start } => {
                if self.rg(*x) {
                    let (r, c) = self.expect_2d("slice_cols", *x)?;
                    let w = self.nodes[idx].value.shape()[1];
                    let buf = self.grad_buf(*x).data_mut();
                    for i in 0..r {
                        for t in 0..w {
                            buf[i * c + start + t] += g[i * w + t];
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if self.rg(*x) {
                    let c = self.shape_of(*x)[1];
                    let buf = self.grad_buf(*x).data_mut();
                    for (o, &i) in rows.iter().enumerate() {
                        for t in 0..c {
                            buf[i * c + t] += g[o * c + t];
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = targets.len();
                let v = probs.len() / n;
                let s = g[0] * T::from_f64(1.0 / n as f64);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * s).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gx[i * v + t] -= s;
                }
                self.accumulate(*logits, &gx);
            }
            Op::Kl { q_log, p, rows } => {
                let s = g[0] * T::from_f64(1.0 / *rows as f64);
                let gx: Vec<T> = p.iter().map(|&pe| -(pe * s)).collect();
                self.accumulate(*q_log, &gx);
            }
            Op::Sum { x, scale } => {
                let v = g[0] * T::from_f64(*scale);
                let gx = vec![v; self.nodes[x.0].value.numel()];
                self.accumulate(*x, &gx);
            }
            Op::WeightedSum { terms } => {
                for &(v, w) in terms {
                    let gv = [g[0] * T::from_f64(w)];
                    self.accumulate(v, &gv);
                }
            }
        }
        self.nodes[idx].op = op;
        Ok(())
    }
}

pub(crate) fn log_softmax_row<T: Real>(row: &[T], out: &mut Vec<T>) {
    let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
    if !max.is_finite() {
        // All entries -inf (or a +inf present): fall back to uniform over the
        // maximal entries so the result stays a valid distribution.
        let hits = row.iter().filter(|&&v| v == max).count().max(1);
        let l = T::from_f64(-(hits as f64).ln());
        out.extend(row.iter().map(|&v| if v == max { l } else { T::neg_infinity() }));
        return;
    }
    let z: f64 = row.iter().map(|&v| (v - max).exp().to_f64()).sum();
    let lz = T::from_f64(z.ln());
    out.extend(row.iter().map(|&v| v - max - lz));
}

fn attention_backward<T: Real>(
    x: &[T],
    w3: usize,
    heads: usize,
    patterns: &[Arc<KeyPattern>],
    probs: &[T],
    g: &[T],
) -> Vec<T> {
    let d = w3 / 3;
    let dh = d / heads;
    let seq = patterns[0].len();
    let scale = T::from_f64(1.0 / (dh as f64).sqrt());
    let mut gx = vec![T::zero(); x.len()];
    let mut dp: Vec<T> = Vec::with_capacity(seq);
    let mut cursor = 0usize;
    for (b, pat) in patterns.iter().enumerate() {
        let base = b * seq;
        for h in 0..heads {
            let qo = h * dh;
            let ko = d + h * dh;
            let vo = 2 * d + h * dh;
            for i in 0..seq {
                let keys = pat.keys(i);
                if keys.is_empty() {
                    continue;
                }
                let p = &probs[cursor..cursor + keys.len()];
                cursor += keys.len();
                let go = &g[(base + i) * d + h * dh..(base + i) * d + (h + 1) * dh];
                dp.clear();
                let mut pdp = 0.0f64;
                for (&j, &pj) in keys.iter().zip(p) {
                    let row = (base + j as usize) * w3;
                    let mut s = T::zero();
                    for t in 0..dh {
                        s += go[t] * x[row + vo + t];
                        gx[row + vo + t] += pj * go[t];
                    }
                    pdp += (pj * s).to_f64();
                    dp.push(s);
                }
                let pdp = T::from_f64(pdp);
                let qrow = (base + i) * w3;
                for ((&j, &pj), &dpj) in keys.iter().zip(p).zip(dp.iter()) {
                    let ds = pj * (dpj - pdp) * scale;
                    let krow = (base + j as usize) * w3;
                    for t in 0..dh {
                        gx[qrow + qo + t] += ds * x[krow + ko + t];
                        gx[krow + ko + t] += ds * x[qrow + qo + t];
                    }
                }
            }
        }
    }
    gx
}
