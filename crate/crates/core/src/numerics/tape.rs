//! Tensor-level reverse-mode differentiation.
//!
//! A [`Tape`] records every operation of one forward evaluation. Parameters are
//! read in place from a borrowed [`ParamStore`]; calling [`Tape::backward`] on a
//! scalar produces [`Gradients`] for every recorded node.

use std::rc::Rc;

use crate::error::{Error, Result};

use super::kernels::{self, ConvGeometry};
use super::{NdArray, ParamId, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Value {
    Owned(NdArray),
    Param(ParamId),
}

enum Op {
    Leaf,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    /// `b`'s shape is a suffix of `a`'s shape and is broadcast over the prefix.
    AddSuffix(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    NarrowLast {
        x: Var,
        start: usize,
    },
    ConcatLast(Vec<Var>),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Conv {
        x: Var,
        w: Var,
        geo: ConvGeometry,
        depthwise: bool,
    },
    MeanAxis1(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    EdgeMean(Var),
    Rpe {
        q: Var,
        table: Var,
        hops: Rc<[usize]>,
    },
    StaticKey {
        u: Var,
        e: Var,
    },
}

struct Node {
    value: Value,
    op: Op,
}

/// One recorded forward evaluation.
pub struct Tape<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

impl<'p> Tape<'p> {
    /// A tape without parameters; only constants can enter it.
    pub fn new() -> Self {
        Self {
            store: None,
            nodes: Vec::new(),
            param_nodes: Vec::new(),
        }
    }

    pub fn with_params(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: vec![None; store.len()],
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: NdArray, op: Op) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(value),
            op,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &NdArray {
        match &self.nodes[v.0].value {
            Value::Owned(a) => a,
            Value::Param(id) => self
                .store
                .expect("parameter node requires a store")
                .value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    /// A constant input; gradients flowing into it are still recorded.
    pub fn constant(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes[id.0] = Some(v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(out, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        Ok(self.push(out, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(out, Op::Mul(a, b)))
    }

    /// `a + b` with `b` broadcast over the leading axes of `a`.
    pub fn add_suffix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (sa, sb) = (av.shape(), bv.shape());
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape {
                op: "add_suffix",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let inner = bv.len().max(1);
        let mut out = av.clone();
        for chunk in out.data_mut().chunks_exact_mut(inner) {
            for (o, &x) in chunk.iter_mut().zip(bv.data()) {
                *o += x;
            }
        }
        Ok(self.push(out, Op::AddSuffix(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_forward(self.value(a), self.value(b), false)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b: false }))
    }

    /// `a * b^T` over the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_forward(self.value(a), self.value(b), true)?;
        Ok(self.push(out, Op::MatMul { a, b, trans_b: true }))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a)))
    }

    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let out = self.value(a).permute(perm)?;
        Ok(self.push(out, Op::Permute(a, perm.to_vec())))
    }

    /// Columns `start..start+len` of the trailing axis.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        let width = *shape.last().ok_or_else(|| Error::Config("narrow on scalar".into()))?;
        if start + len > width {
            return Err(Error::Index(format!(
                "narrow {start}..{} exceeds width {width}",
                start + len
            )));
        }
        let mut data = Vec::with_capacity(xv.len() / width * len);
        for row in xv.data().chunks_exact(width) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut out_shape = shape.to_vec();
        *out_shape.last_mut().unwrap() = len;
        let out = NdArray::new(&out_shape, data)?;
        Ok(self.push(out, Op::NarrowLast { x, start }))
    }

    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let prefix = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != prefix {
                return Err(Error::Shape {
                    op: "concat_last",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = prefix.iter().product();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = prefix.to_vec();
        shape.push(total);
        let out = NdArray::new(&shape, data)?;
        Ok(self.push(out, Op::ConcatLast(parts.to_vec())))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 || x.is_nan() { x } else { 0.0 });
        self.push(out, Op::Relu(a))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let out = softmax_lastaxis(self.value(a))?;
        Ok(self.push(out, Op::Softmax(a)))
    }

    /// Layer normalization over the trailing axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let width = *xv.shape().last().unwrap_or(&0);
        if gv.shape() != [width] || bv.shape() != [width] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: xv.shape().to_vec(),
                rhs: gv.shape().to_vec(),
            });
        }
        let (y, xhat, inv_std) = kernels::layer_norm_forward(xv.data(), width, gv.data(), bv.data());
        let out = NdArray::new(xv.shape(), y)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// Dense temporal convolution of `[N, T, V, C_in]` by `[K, C_in, C_out]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, geo: ConvGeometry) -> Result<Var> {
        let out = kernels::conv_forward(self.value(x), self.value(w), geo)?;
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                geo,
                depthwise: false,
            },
        ))
    }

    /// Per-channel temporal convolution of `[N, T, V, C]` by `[K, C]`.
    pub fn depthwise_conv(&mut self, x: Var, w: Var, geo: ConvGeometry) -> Result<Var> {
        let out = kernels::depthwise_forward(self.value(x), self.value(w), geo)?;
        Ok(self.push(
            out,
            Op::Conv {
                x,
                w,
                geo,
                depthwise: true,
            },
        ))
    }

    /// Mean over axis 1 of a rank-3 `[A, M, B]` input, giving `[A, B]`.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let &[a, m, b] = xv.shape() else {
            return Err(Error::Shape {
                op: "mean_axis1",
                lhs: xv.shape().to_vec(),
                rhs: vec![],
            });
        };
        let mut out = vec![0.0; a * b];
        for ai in 0..a {
            for mi in 0..m {
                let row = &xv.data()[(ai * m + mi) * b..(ai * m + mi + 1) * b];
                for (o, &v) in out[ai * b..(ai + 1) * b].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|o| *o *= inv);
        let out = NdArray::new(&[a, b], out)?;
        Ok(self.push(out, Op::MeanAxis1(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        self.push(NdArray::scalar(s), Op::Sum(x))
    }

    /// Mean softmax cross-entropy of `[N, K]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let &[n, k] = lv.shape() else {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        };
        if labels.len() != n {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: lv.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Index(format!("label {bad} >= {k} classes")));
        }
        let mut probs = vec![0.0; n * k];
        kernels::softmax_rows(lv.data(), k, &mut probs);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            let row = &lv.data()[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= n as f64;
        Ok(self.push(
            NdArray::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `D_e^{-1} H^T` for a `[V, E]` (binary or relaxed) incidence matrix.
    pub fn edge_mean_operator(&mut self, h: Var) -> Result<Var> {
        let hv = self.value(h);
        let &[v, e] = hv.shape() else {
            return Err(Error::Shape {
                op: "edge_mean_operator",
                lhs: hv.shape().to_vec(),
                rhs: vec![],
            });
        };
        let deg = column_sums(hv);
        if let Some(col) = deg.iter().position(|&d| d <= 0.0) {
            return Err(Error::DegeneratePartition { column: col });
        }
        let out = NdArray::from_fn(&[e, v], |ix| hv.get(&[ix[1], ix[0]]) / deg[ix[0]]);
        Ok(self.push(out, Op::EdgeMean(h)))
    }

    /// Relative positional scores `q_i . R[hop(i, j)]` per head.
    ///
    /// `q` is `[.., H, V, D]`, `table` is `[K, H * D]`, `hops` is `V x V` row-major.
    pub fn rpe_scores(&mut self, q: Var, table: Var, hops: Rc<[usize]>) -> Result<Var> {
        let (qv, tv) = (self.value(q), self.value(table));
        let qs = qv.shape();
        if qs.len() < 3 || tv.ndim() != 2 {
            return Err(Error::Shape {
                op: "rpe_scores",
                lhs: qs.to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        let (h, v, d) = (qs[qs.len() - 3], qs[qs.len() - 2], qs[qs.len() - 1]);
        let k = tv.shape()[0];
        if tv.shape()[1] != h * d || hops.len() != v * v {
            return Err(Error::Shape {
                op: "rpe_scores",
                lhs: qs.to_vec(),
                rhs: tv.shape().to_vec(),
            });
        }
        if let Some(&bad) = hops.iter().find(|&&x| x >= k) {
            return Err(Error::Index(format!(
                "hop distance {bad} exceeds positional table of {k} rows"
            )));
        }
        let outer: usize = qs[..qs.len() - 3].iter().product();
        // qr[b, h, i, r] = q[b, h, i, :] . table[r, h*d .. (h+1)*d]
        let mut qr = vec![0.0; outer * h * v * k];
        for bi in 0..outer {
            for hi in 0..h {
                let qo = (bi * h + hi) * v * d;
                let ro = (bi * h + hi) * v * k;
                kernels::gemm(
                    v,
                    d,
                    k,
                    &qv.data()[qo..],
                    (d, 1),
                    &tv.data()[hi * d..],
                    (1, h * d),
                    &mut qr[ro..],
                    0.0,
                );
            }
        }
        let mut out = vec![0.0; outer * h * v * v];
        for bh in 0..outer * h {
            for i in 0..v {
                for j in 0..v {
                    out[(bh * v + i) * v + j] = qr[(bh * v + i) * k + hops[i * v + j]];
                }
            }
        }
        let mut shape = qs[..qs.len() - 1].to_vec();
        shape.push(v);
        let out = NdArray::new(&shape, out)?;
        Ok(self.push(out, Op::Rpe { q, table, hops }))
    }

    /// Query-independent scores `u_h . e_j`, broadcast over the query axis.
    ///
    /// `u` is `[H, D]`, `e` is `[.., H, V, D]`; output is `[.., H, V, V]`.
    pub fn static_key_scores(&mut self, u: Var, e: Var) -> Result<Var> {
        let (uv, ev) = (self.value(u), self.value(e));
        let es = ev.shape();
        if es.len() < 3 || uv.shape() != [es[es.len() - 3], es[es.len() - 1]] {
            return Err(Error::Shape {
                op: "static_key_scores",
                lhs: uv.shape().to_vec(),
                rhs: es.to_vec(),
            });
        }
        let (h, v, d) = (es[es.len() - 3], es[es.len() - 2], es[es.len() - 1]);
        let outer: usize = es[..es.len() - 3].iter().product();
        let mut out = vec![0.0; outer * h * v * v];
        for bi in 0..outer {
            for hi in 0..h {
                let uh = &uv.data()[hi * d..(hi + 1) * d];
                let base = (bi * h + hi) * v;
                let scores: Vec<f64> = (0..v)
                    .map(|j| {
                        let er = &ev.data()[(base + j) * d..(base + j + 1) * d];
                        er.iter().zip(uh).map(|(a, b)| a * b).sum()
                    })
                    .collect();
                for i in 0..v {
                    out[(base + i) * v..(base + i + 1) * v].copy_from_slice(&scores);
                }
            }
        }
        let mut shape = es[..es.len() - 1].to_vec();
        shape.push(v);
        let out = NdArray::new(&shape, out)?;
        Ok(self.push(out, Op::StaticKey { u, e }))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(loss).to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<NdArray>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(NdArray::full(self.shape(loss), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(idx, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        let mut params = Vec::new();
        for (i, slot) in self.param_nodes.iter().enumerate() {
            if let Some(v) = slot {
                if let Some(g) = &grads[v.0] {
                    params.push((ParamId(i), v.0));
                    debug_assert_eq!(g.shape(), self.value(*v).shape());
                }
            }
        }
        Ok(Gradients { grads, params })
    }

    fn backprop_node(&self, idx: usize, g: &NdArray, grads: &mut [Option<NdArray>]) -> Result<()> {
        let node = &self.nodes[idx];
        let out = self.value(Var(idx));
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.clone())?;
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone())?;
                accumulate(grads, *b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                accumulate(grads, *a, g.zip_map(bv, |x, y| x * y)?)?;
                accumulate(grads, *b, g.zip_map(av, |x, y| x * y)?)?;
            }
            Op::AddSuffix(a, b) => {
                accumulate(grads, *a, g.clone())?;
                let bshape = self.shape(*b).to_vec();
                let inner = bshape.iter().product::<usize>().max(1);
                let mut db = vec![0.0; inner];
                for chunk in g.data().chunks_exact(inner) {
                    for (d, &x) in db.iter_mut().zip(chunk) {
                        *d += x;
                    }
                }
                accumulate(grads, *b, NdArray::new(&bshape, db)?)?;
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * s))?,
            Op::MatMul { a, b, trans_b } => {
                let (da, db) =
                    kernels::matmul_backward(self.value(*a), self.value(*b), *trans_b, g)?;
                accumulate(grads, *a, da)?;
                accumulate(grads, *b, db)?;
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                accumulate(grads, *a, g.clone().reshape(&shape)?)?;
            }
            Op::Permute(a, perm) => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                accumulate(grads, *a, g.permute(&inv)?)?;
            }
            Op::NarrowLast { x, start } => {
                let xs = self.shape(*x).to_vec();
                let width = *xs.last().unwrap();
                let len = *out.shape().last().unwrap();
                let mut dx = vec![0.0; xs.iter().product()];
                for (drow, grow) in dx.chunks_exact_mut(width).zip(g.data().chunks_exact(len)) {
                    drow[*start..start + len].copy_from_slice(grow);
                }
                accumulate(grads, *x, NdArray::new(&xs, dx)?)?;
            }
            Op::ConcatLast(parts) => {
                let total = *out.shape().last().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let ps = self.shape(p).to_vec();
                    let w = *ps.last().unwrap();
                    let mut dp = Vec::with_capacity(ps.iter().product());
                    for grow in g.data().chunks_exact(total) {
                        dp.extend_from_slice(&grow[offset..offset + w]);
                    }
                    offset += w;
                    accumulate(grads, p, NdArray::new(&ps, dp)?)?;
                }
            }
            Op::Relu(a) => {
                let av = self.value(*a);
                accumulate(grads, *a, g.zip_map(av, |gv, x| if x > 0.0 { gv } else { 0.0 })?)?;
            }
            Op::Softmax(a) => {
                let width = *out.shape().last().unwrap();
                let mut dx = vec![0.0; out.len()];
                kernels::softmax_backward_rows(out.data(), g.data(), width, &mut dx);
                accumulate(grads, *a, NdArray::new(out.shape(), dx)?)?;
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gamma);
                let width = gv.len();
                let (dx, dg, db) =
                    kernels::layer_norm_backward(g.data(), xhat, inv_std, gv.data(), width);
                accumulate(grads, *x, NdArray::new(out.shape(), dx)?)?;
                accumulate(grads, *gamma, NdArray::new(&[width], dg)?)?;
                accumulate(grads, *beta, NdArray::new(&[width], db)?)?;
            }
            Op::Conv {
                x,
                w,
                geo,
                depthwise,
            } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (dx, dw) = if *depthwise {
                    kernels::depthwise_backward(xv, wv, g, *geo)?
                } else {
                    kernels::conv_backward(xv, wv, g, *geo)?
                };
                accumulate(grads, *x, dx)?;
                accumulate(grads, *w, dw)?;
            }
            Op::MeanAxis1(x) => {
                let xs = self.shape(*x).to_vec();
                let (a, m, b) = (xs[0], xs[1], xs[2]);
                let inv = 1.0 / m as f64;
                let mut dx = vec![0.0; a * m * b];
                for ai in 0..a {
                    for mi in 0..m {
                        for bi in 0..b {
                            dx[(ai * m + mi) * b + bi] = g.data()[ai * b + bi] * inv;
                        }
                    }
                }
                accumulate(grads, *x, NdArray::new(&xs, dx)?)?;
            }
            Op::Sum(x) => {
                let s = g.item();
                accumulate(grads, *x, NdArray::full(self.shape(*x), s))?;
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let shape = self.shape(*logits).to_vec();
                let (n, k) = (shape[0], shape[1]);
                let s = g.item() / n as f64;
                let mut d = probs.clone();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * k + l] -= 1.0;
                }
                d.iter_mut().for_each(|x| *x *= s);
                accumulate(grads, *logits, NdArray::new(&shape, d)?)?;
            }
            Op::EdgeMean(h) => {
                let hv = self.value(*h);
                let (v, e) = (hv.shape()[0], hv.shape()[1]);
                let deg = column_sums(hv);
                let mut dh = vec![0.0; v * e];
                for ei in 0..e {
                    // out[e, v] = h[v, e] / s_e
                    let s = deg[ei];
                    let weighted: f64 = (0..v).map(|vi| g.get(&[ei, vi]) * hv.get(&[vi, ei])).sum();
                    for vi in 0..v {
                        dh[vi * e + ei] = g.get(&[ei, vi]) / s - weighted / (s * s);
                    }
                }
                accumulate(grads, *h, NdArray::new(&[v, e], dh)?)?;
            }
            Op::Rpe { q, table, hops } => {
                let (qv, tv) = (self.value(*q), self.value(*table));
                let qs = qv.shape();
                let (h, v, d) = (qs[qs.len() - 3], qs[qs.len() - 2], qs[qs.len() - 1]);
                let k = tv.shape()[0];
                let outer: usize = qs[..qs.len() - 3].iter().product();
                let mut dqr = vec![0.0; outer * h * v * k];
                for bh in 0..outer * h {
                    for i in 0..v {
                        for j in 0..v {
                            dqr[(bh * v + i) * k + hops[i * v + j]] += g.data()[(bh * v + i) * v + j];
                        }
                    }
                }
                let mut dq = vec![0.0; qv.len()];
                let mut dt = vec![0.0; tv.len()];
                for bi in 0..outer {
                    for hi in 0..h {
                        let qo = (bi * h + hi) * v * d;
                        let ro = (bi * h + hi) * v * k;
                        // dq (v x d) = dqr (v x k) * table_h (k x d)
                        kernels::gemm(
                            v,
                            k,
                            d,
                            &dqr[ro..],
                            (k, 1),
                            &tv.data()[hi * d..],
                            (h * d, 1),
                            &mut dq[qo..],
                            0.0,
                        );
                        // dtable_h (k x d) += dqr^T (k x v) * q (v x d)
                        let mut block = vec![0.0; k * d];
                        kernels::gemm(
                            k,
                            v,
                            d,
                            &dqr[ro..],
                            (1, k),
                            &qv.data()[qo..],
                            (d, 1),
                            &mut block,
                            0.0,
                        );
                        for r in 0..k {
                            for c in 0..d {
                                dt[r * h * d + hi * d + c] += block[r * d + c];
                            }
                        }
                    }
                }
                accumulate(grads, *q, NdArray::new(qs, dq)?)?;
                accumulate(grads, *table, NdArray::new(tv.shape(), dt)?)?;
            }
            Op::StaticKey { u, e } => {
                let (uv, ev) = (self.value(*u), self.value(*e));
                let es = ev.shape();
                let (h, v, d) = (es[es.len() - 3], es[es.len() - 2], es[es.len() - 1]);
                let outer: usize = es[..es.len() - 3].iter().product();
                let mut du = vec![0.0; uv.len()];
                let mut de = vec![0.0; ev.len()];
                for bi in 0..outer {
                    for hi in 0..h {
                        let base = (bi * h + hi) * v;
                        for j in 0..v {
                            let ds: f64 = (0..v).map(|i| g.data()[(base + i) * v + j]).sum();
                            let er = (base + j) * d;
                            for c in 0..d {
                                du[hi * d + c] += ds * ev.data()[er + c];
                                de[er + c] = ds * uv.data()[hi * d + c];
                            }
                        }
                    }
                }
                accumulate(grads, *u, NdArray::new(uv.shape(), du)?)?;
                accumulate(grads, *e, NdArray::new(es, de)?)?;
            }
        }
        Ok(())
    }
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

fn accumulate(grads: &mut [Option<NdArray>], v: Var, g: NdArray) -> Result<()> {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

fn column_sums(h: &NdArray) -> Vec<f64> {
    let (v, e) = (h.shape()[0], h.shape()[1]);
    let mut deg = vec![0.0; e];
    for vi in 0..v {
        for (ei, d) in deg.iter_mut().enumerate() {
            *d += h.data()[vi * e + ei];
        }
    }
    deg
}

/// Result of a reverse sweep.
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
    params: Vec<(ParamId, usize)>,
}

impl Gradients {
    pub fn of(&self, v: Var) -> Option<&NdArray> {
        self.grads[v.0].as_ref()
    }

    pub fn param(&self, id: ParamId) -> Option<&NdArray> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|(_, n)| self.grads[*n].as_ref())
    }

    /// Adds every parameter gradient into `store`'s gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore) -> Result<()> {
        for &(id, node) in &self.params {
            if let Some(g) = &self.grads[node] {
                store.get_mut(id).grad.add_assign(g)?;
            }
        }
        Ok(())
    }
}

/// Numerically stabilized softmax along the trailing axis.
pub fn softmax_lastaxis(x: &NdArray) -> Result<NdArray> {
    let width = *x
        .shape()
        .last()
        .ok_or_else(|| Error::Config("softmax of a scalar".into()))?;
    let mut out = vec![0.0; x.len()];
    if width > 0 {
        kernels::softmax_rows(x.data(), width, &mut out);
    }
    NdArray::new(x.shape(), out)
}
