//! Tape-based reverse-mode differentiation over 2-D tensors.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits every consumer before its inputs. A node only carries a gradient
//! when some trainable parameter feeds into it.

use std::collections::{BTreeMap, BTreeSet};

use super::tensor::gemm;
use super::{ParamId, ParamStore, Tensor};

const LN_EPS: f32 = 1e-5;
const GELU_ALPHA: f32 = 1.702;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Key masking shared by all heads of an attention op.
#[derive(Debug, Clone, Default)]
pub struct AttentionMask {
    pub causal: bool,
    /// Valid key count per sequence; keys at or past it are ignored.
    pub lengths: Option<Vec<usize>>,
}

enum Op {
    Input,
    Param(ParamId),
    Linear { x: Var, w: Var, b: Option<Var> },
    Add(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f32>,
        rstd: Vec<f32>,
    },
    QuickGelu(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        probs: Vec<f32>,
    },
    Gather { table: Var, ids: Vec<usize> },
    PrependRow { x: Var, row: Var, batch: usize },
    AddTiled { x: Var, pos: Var, seq: usize },
    SelectRows { x: Var, idx: Vec<usize> },
    SegmentMean { x: Var, segments: Vec<(usize, usize)> },
    L2Normalize { x: Var, norms: Vec<f32> },
}

struct Node {
    value: Option<Tensor>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'a> {
    store: &'a ParamStore,
    trainable: Option<&'a BTreeSet<ParamId>>,
    nodes: Vec<Node>,
}

impl<'a> Graph<'a> {
    /// Inference graph: nothing requires a gradient.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self {
            store,
            trainable: None,
            nodes: Vec::new(),
        }
    }

    /// Training graph: gradients flow to the given parameters only.
    pub fn training(store: &'a ParamStore, trainable: &'a BTreeSet<ParamId>) -> Self {
        Self {
            store,
            trainable: Some(trainable),
            nodes: Vec::new(),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.store.get(*id),
            _ => unreachable!("node without value"),
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Some(t),
            op: Op::Input,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        let needs_grad = self.trainable.is_some_and(|t| t.contains(&id));
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn param_by_name(&mut self, name: &str) -> Var {
        let id = self.store.expect_id(name);
        self.param(id)
    }

    /// `x · wᵀ + b` with `w` laid out as (out, in).
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (xv, wv) = (self.value(x), self.value(w));
        let (n, d_in) = xv.shape();
        let d_out = wv.rows();
        assert_eq!(wv.cols(), d_in, "linear: input width");
        let mut out = Tensor::zeros(n, d_out);
        gemm(
            n,
            d_in,
            d_out,
            1.0,
            xv.data(),
            (d_in, 1),
            wv.data(),
            (1, d_in),
            0.0,
            out.data_mut(),
            (d_out, 1),
        );
        if let Some(b) = b {
            let bias = self.value(b);
            assert_eq!(bias.shape(), (1, d_out), "linear: bias shape");
            let bias = bias.data().to_vec();
            for r in 0..n {
                for (o, bb) in out.row_mut(r).iter_mut().zip(&bias) {
                    *o += bb;
                }
            }
        }
        let inputs: Vec<Var> = [Some(x), Some(w), b].into_iter().flatten().collect();
        self.push(out, Op::Linear { x, w, b }, &inputs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        assert_eq!(out.shape(), self.value(b).shape(), "add: shapes");
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, d) = xv.shape();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        assert_eq!(g.len(), d, "layer_norm: gamma width");
        let mut out = Tensor::zeros(n, d);
        let mut mean = Vec::with_capacity(n);
        let mut rstd = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mu = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / d as f32;
            let rs = 1.0 / (var + LN_EPS).sqrt();
            for (c, o) in out.row_mut(r).iter_mut().enumerate() {
                *o = (row[c] - mu) * rs * g[c] + bt[c];
            }
            mean.push(mu);
            rstd.push(rs);
        }
        self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// `x · σ(1.702 x)`.
    pub fn quick_gelu(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv
            .data()
            .iter()
            .map(|&v| v * sigmoid(GELU_ALPHA * v))
            .collect();
        let out = Tensor::from_vec(xv.rows(), xv.cols(), data);
        self.push(out, Op::QuickGelu(x), &[x])
    }

    /// Multi-head scaled dot-product attention over `batch = rows / seq`
    /// independent sequences. `q`, `k`, `v` are (batch·seq, width).
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        seq: usize,
        mask: &AttentionMask,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, width) = qv.shape();
        assert!(seq > 0 && rows % seq == 0, "attention: rows not a multiple of seq");
        assert!(width % heads == 0, "attention: width not divisible by heads");
        let batch = rows / seq;
        let hd = width / heads;
        let scale = 1.0 / (hd as f32).sqrt();
        let mut out = Tensor::zeros(rows, width);
        let mut probs = vec![0.0f32; batch * heads * seq * seq];
        for b in 0..batch {
            let valid = mask
                .lengths
                .as_ref()
                .map_or(seq, |l| l[b].clamp(1, seq));
            let base = b * seq * width;
            for h in 0..heads {
                let off = base + h * hd;
                let p = &mut probs[(b * heads + h) * seq * seq..][..seq * seq];
                gemm(
                    seq,
                    hd,
                    seq,
                    scale,
                    &qv.data()[off..],
                    (width, 1),
                    &kv.data()[off..],
                    (1, width),
                    0.0,
                    p,
                    (seq, 1),
                );
                for i in 0..seq {
                    let row = &mut p[i * seq..(i + 1) * seq];
                    let limit = if mask.causal { valid.min(i + 1) } else { valid };
                    let max = row[..limit]
                        .iter()
                        .copied()
                        .fold(f32::NEG_INFINITY, f32::max);
                    let mut total = 0.0;
                    for (j, s) in row.iter_mut().enumerate() {
                        if j < limit {
                            *s = (*s - max).exp();
                            total += *s;
                        } else {
                            *s = 0.0;
                        }
                    }
                    row[..limit].iter_mut().for_each(|s| *s /= total);
                }
                gemm(
                    seq,
                    seq,
                    hd,
                    1.0,
                    p,
                    (seq, 1),
                    &vv.data()[off..],
                    (width, 1),
                    0.0,
                    &mut out.data_mut()[off..],
                    (width, 1),
                );
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            },
            &[q, k, v],
        )
    }

    /// Rows of `table` picked by `ids` (embedding lookup).
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let mut out = Tensor::zeros(ids.len(), tv.cols());
        for (r, &id) in ids.iter().enumerate() {
            out.row_mut(r).copy_from_slice(tv.row(id));
        }
        self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        )
    }

    /// Inserts the single-row `row` in front of each of `batch` equal blocks
    /// of `x`.
    pub fn prepend_row(&mut self, x: Var, row: Var, batch: usize) -> Var {
        let (xv, rv) = (self.value(x), self.value(row));
        let (n, d) = xv.shape();
        assert_eq!(rv.shape(), (1, d), "prepend_row: row shape");
        assert!(batch > 0 && n % batch == 0, "prepend_row: batch");
        let per = n / batch;
        let mut out = Tensor::zeros(n + batch, d);
        for b in 0..batch {
            out.row_mut(b * (per + 1)).copy_from_slice(rv.row(0));
            for p in 0..per {
                out.row_mut(b * (per + 1) + 1 + p)
                    .copy_from_slice(xv.row(b * per + p));
            }
        }
        self.push(out, Op::PrependRow { x, row, batch }, &[x, row])
    }

    /// Adds `pos[t]` to row `t` of every length-`seq` block of `x`.
    pub fn add_tiled(&mut self, x: Var, pos: Var, seq: usize) -> Var {
        let (xv, pv) = (self.value(x), self.value(pos));
        assert!(pv.rows() >= seq && pv.cols() == xv.cols(), "add_tiled: pos shape");
        assert_eq!(xv.rows() % seq, 0, "add_tiled: rows");
        let mut out = xv.clone();
        for r in 0..out.rows() {
            let t = r % seq;
            for (o, p) in out.row_mut(r).iter_mut().zip(pv.row(t)) {
                *o += p;
            }
        }
        self.push(out, Op::AddTiled { x, pos, seq }, &[x, pos])
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        let mut out = Tensor::zeros(idx.len(), xv.cols());
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(xv.row(i));
        }
        self.push(
            out,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    /// Mean of each `(start, len)` row range; `len` must be positive.
    pub fn segment_mean(&mut self, x: Var, segments: &[(usize, usize)]) -> Var {
        let xv = self.value(x);
        let d = xv.cols();
        let mut out = Tensor::zeros(segments.len(), d);
        for (s, &(start, len)) in segments.iter().enumerate() {
            assert!(len > 0, "segment_mean: empty segment");
            let o = out.row_mut(s);
            for r in start..start + len {
                for (a, b) in o.iter_mut().zip(xv.row(r)) {
                    *a += b;
                }
            }
            o.iter_mut().for_each(|v| *v /= len as f32);
        }
        self.push(
            out,
            Op::SegmentMean {
                x,
                segments: segments.to_vec(),
            },
            &[x],
        )
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let mut out = xv.clone();
        let mut norms = Vec::with_capacity(out.rows());
        for r in 0..out.rows() {
            let row = out.row_mut(r);
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        self.push(out, Op::L2Normalize { x, norms }, &[x])
    }

    /// Propagates the seed gradients back to every trainable parameter.
    pub fn backward(&self, seeds: &[(Var, Tensor)]) -> BTreeMap<ParamId, Tensor> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            assert_eq!(self.value(*v).shape(), g.shape(), "seed gradient shape");
            accumulate(&mut grads, *v, g.clone());
        }
        let mut out = BTreeMap::new();
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.backprop_node(node, dy, &mut grads, &mut out);
        }
        out
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop_node(
        &self,
        node: &Node,
        dy: Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut BTreeMap<ParamId, Tensor>,
    ) {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                match params.get_mut(id) {
                    Some(g) => g.add_assign(&dy),
                    None => {
                        params.insert(*id, dy);
                    }
                }
            }
            Op::Linear { x, w, b } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (n, d_in) = xv.shape();
                let d_out = wv.rows();
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(n, d_in);
                    gemm(
                        n,
                        d_out,
                        d_in,
                        1.0,
                        dy.data(),
                        (d_out, 1),
                        wv.data(),
                        (d_in, 1),
                        0.0,
                        dx.data_mut(),
                        (d_in, 1),
                    );
                    accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let mut dw = Tensor::zeros(d_out, d_in);
                    gemm(
                        d_out,
                        n,
                        d_in,
                        1.0,
                        dy.data(),
                        (1, d_out),
                        xv.data(),
                        (d_in, 1),
                        0.0,
                        dw.data_mut(),
                        (d_in, 1),
                    );
                    accumulate(grads, *w, dw);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        accumulate(grads, *b, column_sums(&dy));
                    }
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.wants(*b) {
                    accumulate(grads, *b, dy);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = self.value(*x);
                let g = self.value(*gamma).data();
                let (n, d) = xv.shape();
                let mut dx = Tensor::zeros(n, d);
                let mut dg = Tensor::zeros(1, d);
                let mut db = Tensor::zeros(1, d);
                let mut xhat = vec![0.0f32; d];
                for r in 0..n {
                    let row = xv.row(r);
                    let dyr = dy.row(r);
                    for c in 0..d {
                        xhat[c] = (row[c] - mean[r]) * rstd[r];
                    }
                    let mut m1 = 0.0;
                    let mut m2 = 0.0;
                    for c in 0..d {
                        let dxh = dyr[c] * g[c];
                        m1 += dxh;
                        m2 += dxh * xhat[c];
                        dg.data_mut()[c] += dyr[c] * xhat[c];
                        db.data_mut()[c] += dyr[c];
                    }
                    m1 /= d as f32;
                    m2 /= d as f32;
                    let out = dx.row_mut(r);
                    for c in 0..d {
                        out[c] = rstd[r] * (dyr[c] * g[c] - m1 - xhat[c] * m2);
                    }
                }
                if self.wants(*x) {
                    accumulate(grads, *x, dx);
                }
                if self.wants(*gamma) {
                    accumulate(grads, *gamma, dg);
                }
                if self.wants(*beta) {
                    accumulate(grads, *beta, db);
                }
            }
            Op::QuickGelu(x) => {
                let xv = self.value(*x);
                let data = xv
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&v, &g)| {
                        let s = sigmoid(GELU_ALPHA * v);
                        g * (s + GELU_ALPHA * v * s * (1.0 - s))
                    })
                    .collect();
                accumulate(grads, *x, Tensor::from_vec(xv.rows(), xv.cols(), data));
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                seq,
                probs,
            } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (rows, width) = qv.shape();
                let (heads, seq) = (*heads, *seq);
                let batch = rows / seq;
                let hd = width / heads;
                let scale = 1.0 / (hd as f32).sqrt();
                let mut dq = Tensor::zeros(rows, width);
                let mut dk = Tensor::zeros(rows, width);
                let mut dv = Tensor::zeros(rows, width);
                let mut dp = vec![0.0f32; seq * seq];
                for b in 0..batch {
                    let base = b * seq * width;
                    for h in 0..heads {
                        let off = base + h * hd;
                        let p = &probs[(b * heads + h) * seq * seq..][..seq * seq];
                        // dP = dO · Vᵀ
                        gemm(
                            seq,
                            hd,
                            seq,
                            1.0,
                            &dy.data()[off..],
                            (width, 1),
                            &vv.data()[off..],
                            (1, width),
                            0.0,
                            &mut dp,
                            (seq, 1),
                        );
                        // dV = Pᵀ · dO
                        gemm(
                            seq,
                            seq,
                            hd,
                            1.0,
                            p,
                            (1, seq),
                            &dy.data()[off..],
                            (width, 1),
                            0.0,
                            &mut dv.data_mut()[off..],
                            (width, 1),
                        );
                        // dS = P ∘ (dP − rowsum(dP ∘ P))
                        for i in 0..seq {
                            let pr = &p[i * seq..(i + 1) * seq];
                            let dr = &mut dp[i * seq..(i + 1) * seq];
                            let dot: f32 = pr.iter().zip(dr.iter()).map(|(a, b)| a * b).sum();
                            for (d, &pp) in dr.iter_mut().zip(pr) {
                                *d = pp * (*d - dot);
                            }
                        }
                        gemm(
                            seq,
                            seq,
                            hd,
                            scale,
                            &dp,
                            (seq, 1),
                            &kv.data()[off..],
                            (width, 1),
                            0.0,
                            &mut dq.data_mut()[off..],
                            (width, 1),
                        );
                        gemm(
                            seq,
                            seq,
                            hd,
                            scale,
                            &dp,
                            (1, seq),
                            &qv.data()[off..],
                            (width, 1),
                            0.0,
                            &mut dk.data_mut()[off..],
                            (width, 1),
                        );
                    }
                }
                for (var, g) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.wants(var) {
                        accumulate(grads, var, g);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let tv = self.value(*table);
                let mut dt = Tensor::zeros(tv.rows(), tv.cols());
                for (r, &id) in ids.iter().enumerate() {
                    for (a, b) in dt.row_mut(id).iter_mut().zip(dy.row(r)) {
                        *a += b;
                    }
                }
                accumulate(grads, *table, dt);
            }
            Op::PrependRow { x, row, batch } => {
                let d = dy.cols();
                let per = dy.rows() / batch - 1;
                if self.wants(*row) {
                    let mut dr = Tensor::zeros(1, d);
                    for b in 0..*batch {
                        for (a, g) in dr.row_mut(0).iter_mut().zip(dy.row(b * (per + 1))) {
                            *a += g;
                        }
                    }
                    accumulate(grads, *row, dr);
                }
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(batch * per, d);
                    for b in 0..*batch {
                        for p in 0..per {
                            dx.row_mut(b * per + p)
                                .copy_from_slice(dy.row(b * (per + 1) + 1 + p));
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::AddTiled { x, pos, seq } => {
                if self.wants(*pos) {
                    let pv = self.value(*pos);
                    let mut dp = Tensor::zeros(pv.rows(), pv.cols());
                    for r in 0..dy.rows() {
                        for (a, g) in dp.row_mut(r % seq).iter_mut().zip(dy.row(r)) {
                            *a += g;
                        }
                    }
                    accumulate(grads, *pos, dp);
                }
                if self.wants(*x) {
                    accumulate(grads, *x, dy);
                }
            }
            Op::SelectRows { x, idx } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (r, &i) in idx.iter().enumerate() {
                    for (a, g) in dx.row_mut(i).iter_mut().zip(dy.row(r)) {
                        *a += g;
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::SegmentMean { x, segments } => {
                let xv = self.value(*x);
                let mut dx = Tensor::zeros(xv.rows(), xv.cols());
                for (s, &(start, len)) in segments.iter().enumerate() {
                    let inv = 1.0 / len as f32;
                    for r in start..start + len {
                        for (a, g) in dx.row_mut(r).iter_mut().zip(dy.row(s)) {
                            *a += g * inv;
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::L2Normalize { x, norms } => {
                let yv = node.value.as_ref().expect("normalized value");
                let mut dx = Tensor::zeros(yv.rows(), yv.cols());
                for r in 0..yv.rows() {
                    let y = yv.row(r);
                    let g = dy.row(r);
                    let dot: f32 = y.iter().zip(g).map(|(a, b)| a * b).sum();
                    for ((o, &yy), &gg) in dx.row_mut(r).iter_mut().zip(y).zip(g) {
                        *o = (gg - yy * dot) / norms[r];
                    }
                }
                accumulate(grads, *x, dx);
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn column_sums(t: &Tensor) -> Tensor {
    let mut out = Tensor::zeros(1, t.cols());
    for r in 0..t.rows() {
        for (a, b) in out.data_mut().iter_mut().zip(t.row(r)) {
            *a += b;
        }
    }
    out
}

#[inline]
fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}
