//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] is built fresh for every forward pass. Each operation appends a
//! node holding its output value and whatever it needs for the backward
//! pass; [`Tape::backward`] walks the nodes once in reverse creation order.
//! Values are stored as f32; dot products and row statistics accumulate in
//! f64.

use crate::error::{Error, Result};
use crate::tensor::{ParamKey, ParamStore, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Logit assigned to masked attention positions before the softmax.
pub const MASKED_LOGIT: f32 = -1e9;

/// Boolean permit matrix for a batch of attention problems, `[batch, queries, keys]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    batch: usize,
    queries: usize,
    keys: usize,
    permit: Vec<bool>,
}

impl AttentionMask {
    pub fn full(batch: usize, queries: usize, keys: usize) -> Self {
        AttentionMask {
            batch,
            queries,
            keys,
            permit: vec![true; batch * queries * keys],
        }
    }

    /// Query `i` may see key `j` iff `j <= i`.
    pub fn causal(batch: usize, len: usize) -> Self {
        Self::aligned(batch, len, len, 0)
    }

    /// Query `i` sits at absolute position `offset + i` of a key sequence of
    /// length `keys`; it may see every key at or before that position.
    pub fn aligned(batch: usize, queries: usize, keys: usize, offset: usize) -> Self {
        let mut permit = Vec::with_capacity(batch * queries * keys);
        for _ in 0..batch {
            for i in 0..queries {
                permit.extend((0..keys).map(|j| j <= offset + i));
            }
        }
        AttentionMask {
            batch,
            queries,
            keys,
            permit,
        }
    }

    /// Masks out keys flagged as padding; `key_is_pad` is `[batch, keys]`.
    pub fn key_padding(batch: usize, queries: usize, key_is_pad: &[bool]) -> Result<Self> {
        if batch == 0 || key_is_pad.len() % batch != 0 {
            return Err(Error::Dimension {
                op: "key_padding",
                lhs: vec![batch],
                rhs: vec![key_is_pad.len()],
            });
        }
        let keys = key_is_pad.len() / batch;
        let mut permit = Vec::with_capacity(batch * queries * keys);
        for b in 0..batch {
            let row = &key_is_pad[b * keys..(b + 1) * keys];
            for _ in 0..queries {
                permit.extend(row.iter().map(|&pad| !pad));
            }
        }
        Ok(AttentionMask {
            batch,
            queries,
            keys,
            permit,
        })
    }

    /// Elementwise conjunction of two masks of identical extent.
    pub fn and(&self, other: &AttentionMask) -> Result<Self> {
        if self.dims() != other.dims() {
            return Err(Error::Dimension {
                op: "mask_and",
                lhs: self.dims().to_vec(),
                rhs: other.dims().to_vec(),
            });
        }
        Ok(AttentionMask {
            batch: self.batch,
            queries: self.queries,
            keys: self.keys,
            permit: self
                .permit
                .iter()
                .zip(&other.permit)
                .map(|(&a, &b)| a && b)
                .collect(),
        })
    }

    pub fn dims(&self) -> [usize; 3] {
        [self.batch, self.queries, self.keys]
    }

    pub fn permits(&self, b: usize, i: usize, j: usize) -> bool {
        self.permit[(b * self.queries + i) * self.keys + j]
    }

    pub fn permitted_pairs(&self) -> usize {
        self.permit.iter().filter(|&&p| p).count()
    }

    /// First `(batch, query)` whose keys are all masked, if any.
    pub fn first_empty_row(&self) -> Option<(usize, usize)> {
        if self.keys == 0 {
            return (self.batch * self.queries > 0).then_some((0, 0));
        }
        self.permit
            .chunks(self.keys)
            .position(|row| !row.iter().any(|&p| p))
            .map(|r| (r / self.queries, r % self.queries))
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamKey),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f32),
    Gelu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatLast(Var, Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        dims: [usize; 3],
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<i64>,
        probs: Vec<f32>,
        count: usize,
    },
    Sum(Var),
    Mean(Var),
}

#[derive(Debug)]
struct Node {
    value: Vec<f32>,
    shape: Vec<usize>,
    requires_grad: bool,
    op: Op,
}

/// Attention probabilities recorded by [`Tape::attention`], `[batch, heads, queries, keys]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionProbs<'a> {
    pub probs: &'a [f32],
    pub dims: [usize; 4],
}

/// The computation record of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>() / cols.max(1);
    (rows, cols)
}

fn gelu_scalar(x: f32) -> f32 {
    let x = f64::from(x);
    let c = (2.0 / std::f64::consts::PI).sqrt();
    (0.5 * x * (1.0 + (c * (x + 0.044715 * x * x * x)).tanh())) as f32
}

fn gelu_grad_scalar(x: f32) -> f32 {
    let x = f64::from(x);
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let t = (c * (x + 0.044715 * x * x * x)).tanh();
    (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3.0 * 0.044715 * x * x)) as f32
}

fn sigmoid_scalar(x: f32) -> f32 {
    let x = f64::from(x);
    if x >= 0.0 {
        (1.0 / (1.0 + (-x).exp())) as f32
    } else {
        let e = x.exp();
        (e / (1.0 + e)) as f32
    }
}

/// `c = a · b` with explicit element strides, all in f64.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_strides: (isize, isize),
    b: &[f64],
    b_strides: (isize, isize),
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x = 0.0);
        return;
    }
    // SAFETY: the strides address only elements inside `a` (m×k), `b` (k×n)
    // and `c` (m×n, row-major), whose lengths the callers guarantee.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            a_strides.0,
            a_strides.1,
            b.as_ptr(),
            b_strides.0,
            b_strides.1,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn widen(x: &[f32]) -> Vec<f64> {
    x.iter().map(|&v| f64::from(v)).collect()
}

fn accumulate(slot: &mut Option<Vec<f32>>, contrib: Vec<f32>) {
    match slot {
        Some(buf) => buf.iter_mut().zip(&contrib).for_each(|(b, &c)| *b += c),
        None => *slot = Some(contrib),
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Vec<f32>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[f32] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = self.node(v);
        Tensor::new(n.value.clone(), &n.shape).expect("tape node shape")
    }

    /// Records a copy of `t` as an input; it requires grad iff `t` does.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
            Op::Leaf,
        )
    }

    pub fn constant(&mut self, data: Vec<f32>, shape: &[usize]) -> Result<Var> {
        let t = Tensor::new(data, shape)?;
        Ok(self.leaf(&t))
    }

    /// Records a store parameter; gradients flow back only if it is not frozen.
    pub fn param(&mut self, store: &ParamStore, id: crate::tensor::ParamId) -> Var {
        let t = store.tensor(id);
        self.push(
            t.data().to_vec(),
            t.shape().to_vec(),
            t.requires_grad(),
            Op::Param(store.key(id)),
        )
    }

    /// Every parameter node on the tape with its key.
    pub fn param_nodes(&self) -> impl Iterator<Item = (Var, ParamKey)> + '_ {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(key) => Some((Var(i), key)),
            _ => None,
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut c = vec![0.0f64; m * n];
        gemm(
            m,
            k,
            n,
            &widen(self.value(a)),
            (k as isize, 1),
            &widen(self.value(b)),
            (n as isize, 1),
            &mut c,
        );
        let out = c.into_iter().map(|x| x as f32).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, vec![m, n], rg, Op::MatMul(a, b)))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32, op: Op) -> Var {
        let out = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(out, shape, rg, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x + y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b)))
    }

    /// Adds a trailing-dimension vector to every leading slice of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (_, cols) = rows_cols(self.shape(x));
        if self.shape(bias) != [cols] {
            return Err(Error::Dimension {
                op: "add_bias",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias);
        let out = self
            .value(x)
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&v, &c)| v + c))
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, shape, rg, Op::AddBias(x, bias)))
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Var {
        let out = self.value(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(out, shape, rg, Op::Scale(x, s))
    }

    /// Tanh-approximation GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| gelu_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(out, shape, rg, Op::Gelu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid_scalar(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(out, shape, rg, Op::Sigmoid(x))
    }

    /// Max-subtracted softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let (_, cols) = rows_cols(self.shape(x));
        let mut out = vec![0.0f32; self.value(x).len()];
        for (src, dst) in self.value(x).chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(src, dst);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(out, shape, rg, Op::Softmax(x))
    }

    /// Normalizes each last-dimension slice with biased variance, then applies gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f32) -> Result<Var> {
        let (rows, cols) = rows_cols(self.shape(x));
        for p in [gain, bias] {
            if self.shape(p) != [cols] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let (g, b) = (self.value(gain), self.value(bias));
        let mut out = Vec::with_capacity(rows * cols);
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in self.value(x).chunks(cols) {
            let mean = row.iter().map(|&v| f64::from(v)).sum::<f64>() / cols as f64;
            let var = row
                .iter()
                .map(|&v| (f64::from(v) - mean).powi(2))
                .sum::<f64>()
                / cols as f64;
            let rstd = 1.0 / (var + f64::from(eps)).sqrt();
            out.extend(row.iter().enumerate().map(|(j, &v)| {
                ((f64::from(v) - mean) * rstd * f64::from(g[j]) + f64::from(b[j])) as f32
            }));
            means.push(mean);
            rstds.push(rstd);
        }
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            shape,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: means,
                rstd: rstds,
            },
        ))
    }

    /// Gathers rows of a `[V, d]` table.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::Dimension {
                op: "embedding",
                lhs: shape.to_vec(),
                rhs: vec![ids.len()],
            });
        }
        let (rows, d) = (shape[0], shape[1]);
        if let Some(&id) = ids.iter().find(|&&id| id >= rows) {
            return Err(Error::Index { id, rows });
        }
        if ids.is_empty() {
            return Err(Error::Contract("embedding lookup with no ids".into()));
        }
        let t = self.value(table);
        let out = ids
            .iter()
            .flat_map(|&id| t[id * d..(id + 1) * d].iter().copied())
            .collect();
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            vec![ids.len(), d],
            rg,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Concatenates two matrices with equal row counts along the last dimension.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var> {
        let ((ra, ca), (rb, cb)) = (rows_cols(self.shape(a)), rows_cols(self.shape(b)));
        if ra != rb {
            return Err(Error::Dimension {
                op: "concat_last",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = Vec::with_capacity(ra * (ca + cb));
        for (x, y) in self.value(a).chunks(ca).zip(self.value(b).chunks(cb)) {
            out.extend_from_slice(x);
            out.extend_from_slice(y);
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, vec![ra, ca + cb], rg, Op::ConcatLast(a, b)))
    }

    /// Multi-head scaled dot-product attention over a batch.
    ///
    /// `q` is `[batch·n, d]`, `k` and `v` are `[batch·m, d]`, where
    /// `mask.dims() == [batch, n, m]`. Masked logits are set to
    /// [`MASKED_LOGIT`] before the softmax; a query row with every key masked
    /// is rejected.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        mask: &AttentionMask,
    ) -> Result<Var> {
        let [batch, n, m] = mask.dims();
        let d = *self.shape(q).last().unwrap_or(&0);
        let dim_err = |lhs: &[usize], rhs: &[usize]| Error::Dimension {
            op: "attention",
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        };
        if self.shape(q) != [batch * n, d] {
            return Err(dim_err(self.shape(q), &[batch * n, d]));
        }
        for kv in [k, v] {
            if self.shape(kv) != [batch * m, d] {
                return Err(dim_err(self.shape(kv), &[batch * m, d]));
            }
        }
        if heads == 0 || d % heads != 0 {
            return Err(dim_err(&[d], &[heads]));
        }
        if let Some((b, i)) = mask.first_empty_row() {
            return Err(Error::Contract(format!(
                "attention query {i} of batch item {b} has every key masked"
            )));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0f32; batch * heads * n * m];
        let mut out = vec![0.0f32; batch * n * d];
        let mut logits = vec![0.0f32; m];
        let mut acc = vec![0.0f64; dh];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..n {
                    let qrow = &qv[(b * n + i) * d + off..][..dh];
                    for (j, logit) in logits.iter_mut().enumerate() {
                        *logit = if mask.permits(b, i, j) {
                            let krow = &kv[(b * m + j) * d + off..][..dh];
                            let dot: f64 = qrow
                                .iter()
                                .zip(krow)
                                .map(|(&x, &y)| f64::from(x) * f64::from(y))
                                .sum();
                            (dot * scale) as f32
                        } else {
                            MASKED_LOGIT
                        };
                    }
                    let prow = &mut probs[((b * heads + h) * n + i) * m..][..m];
                    softmax_row(&logits, prow);
                    acc.iter_mut().for_each(|a| *a = 0.0);
                    for (j, &p) in prow.iter().enumerate() {
                        if p == 0.0 {
                            continue;
                        }
                        let vrow = &vv[(b * m + j) * d + off..][..dh];
                        for (a, &x) in acc.iter_mut().zip(vrow) {
                            *a += f64::from(p) * f64::from(x);
                        }
                    }
                    let orow = &mut out[(b * n + i) * d + off..][..dh];
                    for (o, &a) in orow.iter_mut().zip(&acc) {
                        *o = a as f32;
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            out,
            vec![batch * n, d],
            rg,
            Op::Attention {
                q,
                k,
                v,
                heads,
                dims: [batch, n, m],
                probs,
            },
        ))
    }

    /// Probabilities of an attention node, if `v` is one.
    pub fn attention_probs(&self, v: Var) -> Option<AttentionProbs<'_>> {
        match &self.node(v).op {
            Op::Attention {
                heads, dims, probs, ..
            } => Some(AttentionProbs {
                probs,
                dims: [dims[0], *heads, dims[1], dims[2]],
            }),
            _ => None,
        }
    }

    /// Mean next-token cross-entropy over rows whose label is not `-1`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[i64]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(Error::Dimension {
                op: "cross_entropy",
                lhs: shape.to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let vocab = shape[1];
        if let Some(&bad) = labels.iter().find(|&&l| l < -1 || l >= vocab as i64) {
            return Err(Error::Index {
                id: bad.max(0) as usize,
                rows: vocab,
            });
        }
        let count = labels.iter().filter(|&&l| l >= 0).count();
        if count == 0 {
            return Err(Error::Contract(
                "cross-entropy with every label ignored".into(),
            ));
        }
        let mut probs = vec![0.0f32; labels.len() * vocab];
        let mut total = 0.0f64;
        for ((row, &label), prow) in self
            .value(logits)
            .chunks(vocab)
            .zip(labels)
            .zip(probs.chunks_mut(vocab))
        {
            if label < 0 {
                continue;
            }
            let max = row.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
            let sum: f64 = row.iter().map(|&x| f64::from(x - max).exp()).sum();
            total += sum.ln() + f64::from(max) - f64::from(row[label as usize]);
            for (p, &x) in prow.iter_mut().zip(row) {
                *p = (f64::from(x - max).exp() / sum) as f32;
            }
        }
        let loss = (total / count as f64) as f32;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![loss],
            vec![1],
            rg,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().map(|&v| f64::from(v)).sum();
        let rg = self.rg(&[x]);
        self.push(vec![s as f32], vec![1], rg, Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s: f64 = self.value(x).iter().map(|&v| f64::from(v)).sum();
        let rg = self.rg(&[x]);
        self.push(vec![(s / n) as f32], vec![1], rg, Op::Mean(x))
    }

    /// Propagates `d loss / d node` for every node that requires grad.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.node(loss).value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        if !self.node(loss).requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (lower, upper) = grads.split_at_mut(i);
            let Some(g) = upper[0].as_ref() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, g, lower);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &[f32], grads: &mut [Option<Vec<f32>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        let mut send = |v: Var, contrib: Vec<f32>| {
            if self.nodes[v.0].requires_grad {
                accumulate(&mut grads[v.0], contrib);
            }
        };
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            &Op::MatMul(a, b) => {
                let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                let n = self.shape(b)[1];
                let gw = widen(g);
                if wants(a) {
                    let mut da = vec![0.0f64; m * k];
                    let bw = widen(self.value(b));
                    gemm(m, n, k, &gw, (n as isize, 1), &bw, (1, n as isize), &mut da);
                    send(a, da.into_iter().map(|x| x as f32).collect());
                }
                if wants(b) {
                    let mut db = vec![0.0f64; k * n];
                    let aw = widen(self.value(a));
                    gemm(k, m, n, &aw, (1, k as isize), &gw, (n as isize, 1), &mut db);
                    send(b, db.into_iter().map(|x| x as f32).collect());
                }
            }
            &Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|&x| -x).collect());
            }
            &Op::Mul(a, b) => {
                let (av, bv) = (self.value(a), self.value(b));
                if wants(a) {
                    send(a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if wants(b) {
                    send(b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::AddBias(x, bias) => {
                send(x, g.to_vec());
                if wants(bias) {
                    let cols = self.shape(bias)[0];
                    let mut db = vec![0.0f64; cols];
                    for row in g.chunks(cols) {
                        db.iter_mut().zip(row).for_each(|(d, &r)| *d += f64::from(r));
                    }
                    send(bias, db.into_iter().map(|x| x as f32).collect());
                }
            }
            &Op::Scale(x, s) => send(x, g.iter().map(|&v| v * s).collect()),
            &Op::Gelu(x) => send(
                x,
                g.iter()
                    .zip(self.value(x))
                    .map(|(&gv, &xv)| gv * gelu_grad_scalar(xv))
                    .collect(),
            ),
            &Op::Sigmoid(x) => send(
                x,
                g.iter()
                    .zip(&node.value)
                    .map(|(&gv, &y)| gv * y * (1.0 - y))
                    .collect(),
            ),
            &Op::Softmax(x) => {
                let (_, cols) = rows_cols(&node.shape);
                let mut dx = Vec::with_capacity(g.len());
                for (grow, yrow) in g.chunks(cols).zip(node.value.chunks(cols)) {
                    let dot: f64 = grow
                        .iter()
                        .zip(yrow)
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum();
                    dx.extend(
                        grow.iter()
                            .zip(yrow)
                            .map(|(&gv, &y)| (f64::from(y) * (f64::from(gv) - dot)) as f32),
                    );
                }
                send(x, dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let (_, cols) = rows_cols(&node.shape);
                let xv = self.value(x);
                let gv = self.value(gain);
                let mut dgain = vec![0.0f64; cols];
                let mut dbias = vec![0.0f64; cols];
                let mut dx = Vec::with_capacity(xv.len());
                let mut xhat = vec![0.0f64; cols];
                let mut dxhat = vec![0.0f64; cols];
                for (r, (grow, xrow)) in g.chunks(cols).zip(xv.chunks(cols)).enumerate() {
                    for j in 0..cols {
                        xhat[j] = (f64::from(xrow[j]) - mean[r]) * rstd[r];
                        dxhat[j] = f64::from(grow[j]) * f64::from(gv[j]);
                        dgain[j] += f64::from(grow[j]) * xhat[j];
                        dbias[j] += f64::from(grow[j]);
                    }
                    let c = cols as f64;
                    let mean_dxhat = dxhat.iter().sum::<f64>() / c;
                    let mean_dxhat_xhat =
                        dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c;
                    dx.extend(
                        (0..cols)
                            .map(|j| (rstd[r] * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat)) as f32),
                    );
                }
                send(x, dx);
                send(gain, dgain.into_iter().map(|v| v as f32).collect());
                send(bias, dbias.into_iter().map(|v| v as f32).collect());
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                if wants(table) {
                    let d = self.shape(table)[1];
                    let mut dt = vec![0.0f32; self.value(table).len()];
                    for (&id, grow) in ids.iter().zip(g.chunks(d)) {
                        dt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(grow)
                            .for_each(|(t, &x)| *t += x);
                    }
                    send(table, dt);
                }
            }
            &Op::ConcatLast(a, b) => {
                let (ca, cb) = (rows_cols(self.shape(a)).1, rows_cols(self.shape(b)).1);
                let mut da = Vec::with_capacity(self.value(a).len());
                let mut db = Vec::with_capacity(self.value(b).len());
                for row in g.chunks(ca + cb) {
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                send(a, da);
                send(b, db);
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                dims,
                probs,
            } => {
                let (q, k, v, heads) = (*q, *k, *v, *heads);
                let [batch, n, m] = *dims;
                let d = self.shape(q)[1];
                let dh = d / heads;
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
                let mut dq = vec![0.0f64; qv.len()];
                let mut dk = vec![0.0f64; kv.len()];
                let mut dv = vec![0.0f64; vv.len()];
                let mut dp = vec![0.0f64; m];
                for b in 0..batch {
                    for h in 0..heads {
                        let off = h * dh;
                        for i in 0..n {
                            let prow = &probs[((b * heads + h) * n + i) * m..][..m];
                            let grow = &g[(b * n + i) * d + off..][..dh];
                            let mut dot = 0.0f64;
                            for j in 0..m {
                                let p = f64::from(prow[j]);
                                if p == 0.0 {
                                    dp[j] = 0.0;
                                    continue;
                                }
                                let vrow = &vv[(b * m + j) * d + off..][..dh];
                                let dvrow = &mut dv[(b * m + j) * d + off..][..dh];
                                let mut s = 0.0f64;
                                for t in 0..dh {
                                    let gt = f64::from(grow[t]);
                                    s += gt * f64::from(vrow[t]);
                                    dvrow[t] += p * gt;
                                }
                                dp[j] = s;
                                dot += p * s;
                            }
                            let qrow = &qv[(b * n + i) * d + off..][..dh];
                            for j in 0..m {
                                let p = f64::from(prow[j]);
                                if p == 0.0 {
                                    continue;
                                }
                                let ds = p * (dp[j] - dot) * scale;
                                let krow = &kv[(b * m + j) * d + off..][..dh];
                                let dkrow = &mut dk[(b * m + j) * d + off..][..dh];
                                for t in 0..dh {
                                    dkrow[t] += ds * f64::from(qrow[t]);
                                }
                                let dqrow = &mut dq[(b * n + i) * d + off..][..dh];
                                for t in 0..dh {
                                    dqrow[t] += ds * f64::from(krow[t]);
                                }
                            }
                        }
                    }
                }
                let narrow = |x: Vec<f64>| x.into_iter().map(|v| v as f32).collect::<Vec<_>>();
                send(q, narrow(dq));
                send(k, narrow(dk));
                send(v, narrow(dv));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
                count,
            } => {
                let vocab = self.shape(*logits)[1];
                let scale = g[0] / *count as f32;
                let mut dl = vec![0.0f32; probs.len()];
                for ((drow, prow), &label) in dl
                    .chunks_mut(vocab)
                    .zip(probs.chunks(vocab))
                    .zip(labels.iter())
                {
                    if label < 0 {
                        continue;
                    }
                    for (dv, &p) in drow.iter_mut().zip(prow) {
                        *dv = p * scale;
                    }
                    drow[label as usize] -= scale;
                }
                send(*logits, dl);
            }
            &Op::Sum(x) => send(x, vec![g[0]; self.value(x).len()]),
            &Op::Mean(x) => {
                let n = self.value(x).len();
                send(x, vec![g[0] / n as f32; n]);
            }
        }
    }
}

fn softmax_row(src: &[f32], dst: &mut [f32]) {
    let max = src.iter().fold(f32::NEG_INFINITY, |a, &b| a.max(b));
    let mut sum = 0.0f64;
    for (d, &s) in dst.iter_mut().zip(src) {
        let e = f64::from(s - max).exp();
        *d = e as f32;
        sum += e;
    }
    for d in dst.iter_mut() {
        *d = (f64::from(*d) / sum) as f32;
    }
}

/// Result of [`Tape::backward`]: one optional gradient per tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds the gradient of every parameter node owned by `store` into the
    /// store's tensors. Frozen tensors are skipped.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) {
        let uid = store.uid();
        for (var, key) in tape.param_nodes() {
            if key.store != uid {
                continue;
            }
            if let Some(g) = self.wrt(var) {
                store.get_mut(key.id).tensor.accumulate_grad(g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::ParamKind;

    fn mat(tape: &mut Tape, rows: usize, cols: usize, data: &[f32]) -> Var {
        tape.constant(data.to_vec(), &[rows, cols]).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut t = Tape::new();
        let a = mat(&mut t, 2, 2, &[1.5, -2.0, 0.25, 4.0]);
        let i = mat(&mut t, 2, 2, &[1.0, 0.0, 0.0, 1.0]);
        let ai = t.matmul(a, i).unwrap();
        assert_eq!(t.value(ai), t.value(a));

        let a = mat(&mut t, 2, 2, &[1.0, 2.0, 3.0, 4.0]);
        let ones = mat(&mut t, 2, 1, &[1.0, 1.0]);
        let c = t.matmul(a, ones).unwrap();
        assert_eq!(t.shape(c), &[2, 1]);
        assert_eq!(t.value(c), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = mat(&mut t, 2, 3, &[0.0; 6]);
        let b = mat(&mut t, 2, 3, &[0.0; 6]);
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_cases() {
        let mut t = Tape::new();
        let x = t.constant(vec![1.0; 4], &[4]).unwrap();
        let y = t.softmax(x);
        assert!(t.value(y).iter().all(|&p| (p - 0.25).abs() < 1e-7));

        let x = t.constant(vec![0.0, 3f32.ln()], &[2]).unwrap();
        let y = t.softmax(x);
        assert!((t.value(y)[0] - 0.25).abs() < 1e-6);
        assert!((t.value(y)[1] - 0.75).abs() < 1e-6);

        let x = t.constant(vec![1000.0, 1000.0], &[2]).unwrap();
        let y = t.softmax(x);
        assert_eq!(t.value(y), &[0.5, 0.5]);
    }

    #[test]
    fn layer_norm_cases() {
        let mut t = Tape::new();
        let gain = t.constant(vec![1.0; 3], &[3]).unwrap();
        let bias = t.constant(vec![0.0; 3], &[3]).unwrap();
        let x = t.constant(vec![5.0; 3], &[1, 3]).unwrap();
        let y = t.layer_norm(x, gain, bias, 1e-5).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0, 0.0]);

        let x = t.constant(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let y = t.layer_norm(x, gain, bias, 0.0).unwrap();
        let expect = [-1.224_744_9, 0.0, 1.224_744_9];
        for (a, b) in t.value(y).iter().zip(expect) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn gelu_cases() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!((gelu_scalar(10.0) - 10.0).abs() < 1e-4);
    }

    #[test]
    fn embedding_gather_scatter_and_bounds() {
        let mut store = ParamStore::new();
        let id = store.add(
            "table",
            ParamKind::Embedding,
            Tensor::new(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap(),
        );
        let mut t = Tape::new();
        let table = t.param(&store, id);
        let row = t.embedding(table, &[0]).unwrap();
        assert_eq!(t.value(row), &[1.0, 2.0]);

        let rows = t.embedding(table, &[1, 1]).unwrap();
        let s = t.sum(rows);
        let g = t.backward(s).unwrap();
        assert_eq!(g.wrt(table).unwrap(), &[0.0, 0.0, 2.0, 2.0]);

        assert!(matches!(
            t.embedding(table, &[2]),
            Err(Error::Index { id: 2, rows: 2 })
        ));
    }

    #[test]
    fn backward_square_and_accumulation() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamKind::Bias, Tensor::full(&[1], 3.0));
        let mut t = Tape::new();
        let x = t.param(&store, id);
        let y = t.mul(x, x).unwrap();
        for expect in [6.0, 12.0] {
            let g = t.backward(y).unwrap();
            g.accumulate_into(&t, &mut store);
            assert_eq!(store.tensor(id).grad().unwrap(), &[expect]);
        }
        store.zero_grads();
        assert!(store.tensor(id).grad().is_none());
    }

    #[test]
    fn fan_out_sums_contributions() {
        let mut store = ParamStore::new();
        let id = store.add("x", ParamKind::Bias, Tensor::full(&[1], 0.7));
        let mut t = Tape::new();
        let x = t.param(&store, id);
        let y = t.add(x, x).unwrap();
        let g = t.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap(), &[2.0]);
    }

    #[test]
    fn non_scalar_backward_is_contract_error() {
        let mut t = Tape::new();
        let x = t
            .constant(vec![1.0, 2.0], &[2])
            .unwrap();
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_param_gets_no_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("w", ParamKind::Matrix, Tensor::full(&[2, 2], 1.0));
        store.freeze(id);
        let mut t = Tape::new();
        let w = t.param(&store, id);
        let s = t.sum(w);
        let g = t.backward(s).unwrap();
        assert!(g.wrt(w).is_none());
        g.accumulate_into(&t, &mut store);
        assert!(store.tensor(id).grad().is_none());
    }

    #[test]
    fn ops_do_not_mutate_inputs() {
        let mut t = Tape::new();
        let data = vec![0.3, -1.2, 2.0, 0.1, 0.0, 5.0];
        let x = t.constant(data.clone(), &[2, 3]).unwrap();
        let _ = t.softmax(x);
        let _ = t.gelu(x);
        let _ = t.sigmoid(x);
        let g = t.constant(vec![1.0; 3], &[3]).unwrap();
        let _ = t.layer_norm(x, g, g, 1e-5).unwrap();
        assert_eq!(t.value(x), data.as_slice());
    }

    #[test]
    fn attention_singleton_and_masking() {
        let mut t = Tape::new();
        let q = t.constant(vec![0.5, -0.5], &[1, 2]).unwrap();
        let k = t.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
        let o = t
            .attention(q, k, k, 1, &AttentionMask::full(1, 1, 1))
            .unwrap();
        assert_eq!(t.attention_probs(o).unwrap().probs, &[1.0]);
        assert_eq!(t.value(o), &[1.0, 2.0]);

        let mask = AttentionMask::key_padding(1, 1, &[true]).unwrap();
        assert!(matches!(
            t.attention(q, k, k, 1, &mask),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn causal_mask_counts() {
        assert_eq!(AttentionMask::causal(1, 1).permitted_pairs(), 1);
        assert_eq!(AttentionMask::causal(1, 3).permitted_pairs(), 6);
        let m = AttentionMask::causal(1, 3);
        assert!(m.permits(0, 2, 0) && !m.permits(0, 0, 1));
    }

    #[test]
    fn cross_entropy_uniform_and_ignored() {
        let mut t = Tape::new();
        let logits = t.constant(vec![0.0; 8], &[2, 4]).unwrap();
        let loss = t.cross_entropy(logits, &[1, -1]).unwrap();
        assert!((t.value(loss)[0] - 4f32.ln()).abs() < 1e-6);
        assert!(matches!(
            t.cross_entropy(logits, &[-1, -1]),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn cross_entropy_vanishes_with_margin() {
        let mut t = Tape::new();
        let mut last = f32::INFINITY;
        for margin in [1.0, 5.0, 20.0, 80.0] {
            let logits = t.constant(vec![margin, 0.0, 0.0], &[1, 3]).unwrap();
            let l = t.cross_entropy(logits, &[0]).unwrap();
            let loss = t.value(l)[0];
            assert!(loss < last);
            last = loss;
        }
        assert!(last < 1e-6);
    }
}
