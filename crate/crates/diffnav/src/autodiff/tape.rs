//! Reverse-mode tape over [`Tensor`] values.
//!
//! Operations execute eagerly and record themselves; [`Tape::backward`]
//! replays the record in reverse, accumulating gradients additively over
//! fan-out. Nodes are appended in topological order by construction.

use rayon::prelude::*;

use super::kernels as kn;
use super::tensor::{c, Scalar, Tensor};
use crate::{Error, Result};

pub type NodeId = usize;

/// Additive attention mask value for blocked key columns. Large enough that
/// `exp(logit - max)` underflows to exactly 0.0 in both f32 and f64, which
/// makes masked columns carry exactly zero weight and zero gradient.
pub const MASK_NEG: f64 = -1e9;

#[derive(Debug, Clone)]
enum Expr<T> {
    Leaf,
    MatMul,
    Conv1d { stride: usize, pad: usize },
    Conv2d { stride: usize, pad: usize },
    Sdpa { heads: usize, key_mask: Option<Vec<T>> },
    Softmax,
    LayerNorm { eps: f64 },
    GroupNorm { groups: usize, eps: f64 },
    Relu,
    Gelu,
    Film,
    Concat { axis: usize },
    Narrow { axis: usize, start: usize, len: usize },
    Reshape { shape: Vec<usize> },
    BroadcastAdd,
    Add,
    Sub,
    Mul,
    Div,
    AddScalar { value: T },
    MulScalar { value: T },
    SumAll,
    MeanAll,
    UpsampleNearest1d { factor: usize },
    ReplaceToken { token: usize, gates: Vec<bool> },
}

/// Forward-pass byproducts kept for the backward pass.
enum Aux<T> {
    None,
    Cols(Vec<T>),
    Attn(Vec<T>),
    Norm { mean: Vec<T>, rstd: Vec<T> },
}

struct Node<T> {
    value: Tensor<T>,
    inputs: Vec<NodeId>,
    expr: Expr<T>,
    aux: Aux<T>,
    needs_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.get_mut(id).and_then(|g| g.take())
    }
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    /// Trainable leaf: gradients are produced for it.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, true)
    }

    /// Data leaf: constant w.r.t. differentiation.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            inputs: Vec::new(),
            expr: Expr::Leaf,
            aux: Aux::None,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    fn push_op(&mut self, expr: Expr<T>, inputs: Vec<NodeId>) -> Result<NodeId> {
        let tensors: Vec<&Tensor<T>> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
        let (value, aux) = forward_compute(&expr, &tensors)?;
        let needs_grad = inputs.iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(Node {
            value,
            inputs,
            expr,
            aux,
            needs_grad,
        });
        Ok(self.nodes.len() - 1)
    }

    // ── Op surface ───────────────────────────────────────────────────

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Expr::MatMul, vec![a, b])
    }

    /// x[B,Cin,L] * w[Cout,Cin,K] + b[Cout] -> [B,Cout,Lout]
    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        self.push_op(Expr::Conv1d { stride, pad }, vec![x, w, b])
    }

    /// x[B,Cin,H,W] * w[Cout,Cin,K,K] + b[Cout] -> [B,Cout,Hout,Wout]
    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: NodeId,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        self.push_op(Expr::Conv2d { stride, pad }, vec![x, w, b])
    }

    /// Scaled dot-product self-attention over q,k,v of shape [B,T,D] with
    /// `heads` heads. `key_mask` is an additive [B,T] bias applied to every
    /// query's logits (use [`MASK_NEG`] to block a key position).
    pub fn sdpa(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        key_mask: Option<Vec<T>>,
    ) -> Result<NodeId> {
        self.push_op(Expr::Sdpa { heads, key_mask }, vec![q, k, v])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Expr::Softmax, vec![x])
    }

    /// Normalize over the last axis; gamma/beta have that axis's length.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        self.push_op(Expr::LayerNorm { eps }, vec![x, gamma, beta])
    }

    /// x[B,C,spatial...]; normalize per (batch, channel group); gamma/beta [C].
    pub fn group_norm(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        groups: usize,
        eps: f64,
    ) -> Result<NodeId> {
        self.push_op(Expr::GroupNorm { groups, eps }, vec![x, gamma, beta])
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Expr::Relu, vec![x])
    }

    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Expr::Gelu, vec![x])
    }

    /// Feature-wise affine modulation: x[B,C,L] * (1 + scale[B,C]) + shift[B,C].
    pub fn film(&mut self, x: NodeId, scale: NodeId, shift: NodeId) -> Result<NodeId> {
        self.push_op(Expr::Film, vec![x, scale, shift])
    }

    pub fn concat(&mut self, axis: usize, parts: &[NodeId]) -> Result<NodeId> {
        self.push_op(Expr::Concat { axis }, parts.to_vec())
    }

    pub fn narrow(&mut self, x: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        self.push_op(Expr::Narrow { axis, start, len }, vec![x])
    }

    pub fn reshape(&mut self, x: NodeId, shape: impl Into<Vec<usize>>) -> Result<NodeId> {
        self.push_op(Expr::Reshape { shape: shape.into() }, vec![x])
    }

    /// x[B, rest...] + addend[rest...] broadcast over the leading axis.
    pub fn broadcast_add(&mut self, x: NodeId, addend: NodeId) -> Result<NodeId> {
        self.push_op(Expr::BroadcastAdd, vec![x, addend])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Expr::Add, vec![a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Expr::Sub, vec![a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Expr::Mul, vec![a, b])
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.push_op(Expr::Div, vec![a, b])
    }

    pub fn add_scalar(&mut self, x: NodeId, value: T) -> Result<NodeId> {
        self.push_op(Expr::AddScalar { value }, vec![x])
    }

    pub fn mul_scalar(&mut self, x: NodeId, value: T) -> Result<NodeId> {
        self.push_op(Expr::MulScalar { value }, vec![x])
    }

    pub fn sum_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Expr::SumAll, vec![x])
    }

    pub fn mean_all(&mut self, x: NodeId) -> Result<NodeId> {
        self.push_op(Expr::MeanAll, vec![x])
    }

    pub fn upsample_nearest_1d(&mut self, x: NodeId, factor: usize) -> Result<NodeId> {
        self.push_op(Expr::UpsampleNearest1d { factor }, vec![x])
    }

    /// x[B,T,D]; rows (b, token, :) with gates[b] set are replaced by
    /// `replacement[D]`. Gates are constants, not differentiated.
    pub fn replace_token(
        &mut self,
        x: NodeId,
        replacement: NodeId,
        token: usize,
        gates: Vec<bool>,
    ) -> Result<NodeId> {
        self.push_op(Expr::ReplaceToken { token, gates }, vec![x, replacement])
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse pass from a scalar output. Returns one gradient per node that
    /// participates in the loss; leaves created with [`Tape::param`] always
    /// receive one (zeros if disconnected from the loss).
    pub fn backward(&mut self, loss: NodeId) -> Result<Gradients<T>> {
        if self.nodes[loss].value.numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward requires a scalar output, got shape {:?}",
                self.nodes[loss].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss] = Some(Tensor::scalar_value(T::one()));

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gout) = grads[id].take() else { continue };
            let contribs = self.backward_op(id, &gout)?;
            // keep the node's own gradient available to callers
            grads[id] = Some(gout);
            for (input_id, contrib) in contribs {
                if !self.nodes[input_id].needs_grad {
                    continue;
                }
                match &mut grads[input_id] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(contrib.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(contrib),
                }
            }
        }

        // Params disconnected from the loss get explicit zero gradients.
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.expr, Expr::Leaf) && node.needs_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    /// Recompute every non-leaf node from its inputs and compare bit-exactly
    /// with the stored values. True when the whole tape reproduces itself.
    pub fn replay_identical(&self) -> Result<bool> {
        for node in &self.nodes {
            if matches!(node.expr, Expr::Leaf) {
                continue;
            }
            let tensors: Vec<&Tensor<T>> =
                node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let (value, _) = forward_compute(&node.expr, &tensors)?;
            if value.shape() != node.value.shape() {
                return Ok(false);
            }
            let same = value
                .data()
                .iter()
                .zip(node.value.data())
                .all(|(a, b)| a.as_f64().to_bits() == b.as_f64().to_bits());
            if !same {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// Gradient contributions of `id`'s op to each of its inputs.
    fn backward_op(&self, id: NodeId, gout: &Tensor<T>) -> Result<Vec<(NodeId, Tensor<T>)>> {
        let node = &self.nodes[id];
        let ins = &node.inputs;
        let val = |i: usize| &self.nodes[ins[i]].value;
        let g = gout.data();

        let out = match &node.expr {
            Expr::Leaf => Vec::new(),

            Expr::MatMul => {
                let (a, b) = (val(0), val(1));
                let (m, k) = (a.shape()[0], a.shape()[1]);
                let n = b.shape()[1];
                let mut da = vec![T::zero(); m * k];
                kn::matmul_nt(g, b.data(), &mut da, m, n, k);
                let mut db = vec![T::zero(); k * n];
                kn::matmul_tn(a.data(), g, &mut db, k, m, n);
                vec![
                    (ins[0], Tensor::new(vec![m, k], da)?),
                    (ins[1], Tensor::new(vec![k, n], db)?),
                ]
            }

            Expr::Conv1d { stride, pad } => {
                let (x, w) = (val(0), val(1));
                let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let (cout, kernel) = (w.shape()[0], w.shape()[2]);
                let lout = node.value.shape()[2];
                let ck = cin * kernel;
                let Aux::Cols(cols) = &node.aux else { unreachable!() };

                // g [B,Cout,Lout] -> row-major [B*Lout, Cout]
                let mut g2 = vec![T::zero(); batch * lout * cout];
                for b in 0..batch {
                    for co in 0..cout {
                        for o in 0..lout {
                            g2[(b * lout + o) * cout + co] = g[(b * cout + co) * lout + o];
                        }
                    }
                }
                let mut dw = vec![T::zero(); cout * ck];
                kn::matmul_tn(&g2, cols, &mut dw, cout, batch * lout, ck);
                let mut db = vec![T::zero(); cout];
                for row in g2.chunks(cout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                let mut dcols = vec![T::zero(); batch * lout * ck];
                kn::matmul_nn(&g2, w.data(), &mut dcols, batch * lout, cout, ck);
                let mut dx = vec![T::zero(); batch * cin * len];
                kn::col2im_1d(&dcols, batch, cin, len, kernel, *stride, *pad, lout, &mut dx);
                vec![
                    (ins[0], Tensor::new(x.shape().to_vec(), dx)?),
                    (ins[1], Tensor::new(w.shape().to_vec(), dw)?),
                    (ins[2], Tensor::new(vec![cout], db)?),
                ]
            }

            Expr::Conv2d { stride, pad } => {
                let (x, w) = (val(0), val(1));
                let (batch, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
                let (cout, kernel) = (w.shape()[0], w.shape()[2]);
                let (hout, wout) = (node.value.shape()[2], node.value.shape()[3]);
                let ckk = cin * kernel * kernel;
                let Aux::Cols(cols) = &node.aux else { unreachable!() };

                let positions = hout * wout;
                let mut g2 = vec![T::zero(); batch * positions * cout];
                for b in 0..batch {
                    for co in 0..cout {
                        for p in 0..positions {
                            g2[(b * positions + p) * cout + co] =
                                g[(b * cout + co) * positions + p];
                        }
                    }
                }
                let mut dw = vec![T::zero(); cout * ckk];
                kn::matmul_tn(&g2, cols, &mut dw, cout, batch * positions, ckk);
                let mut db = vec![T::zero(); cout];
                for row in g2.chunks(cout) {
                    for (d, &v) in db.iter_mut().zip(row) {
                        *d = *d + v;
                    }
                }
                let mut dcols = vec![T::zero(); batch * positions * ckk];
                kn::matmul_nn(&g2, w.data(), &mut dcols, batch * positions, cout, ckk);
                let mut dx = vec![T::zero(); batch * cin * h * wd];
                kn::col2im_2d(
                    &dcols, batch, cin, h, wd, kernel, *stride, *pad, hout, wout, &mut dx,
                );
                vec![
                    (ins[0], Tensor::new(x.shape().to_vec(), dx)?),
                    (ins[1], Tensor::new(w.shape().to_vec(), dw)?),
                    (ins[2], Tensor::new(vec![cout], db)?),
                ]
            }

            Expr::Sdpa { heads, .. } => {
                let (q, k, v) = (val(0), val(1), val(2));
                let (batch, t, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
                let dh = d / heads;
                let scale = c::<T>(1.0 / (dh as f64).sqrt());
                let Aux::Attn(attn) = &node.aux else { unreachable!() };

                let td = t * d;
                let mut dq = vec![T::zero(); batch * td];
                let mut dk = vec![T::zero(); batch * td];
                let mut dv = vec![T::zero(); batch * td];
                dq.par_chunks_mut(td)
                    .zip(dk.par_chunks_mut(td))
                    .zip(dv.par_chunks_mut(td))
                    .enumerate()
                    .for_each(|(b, ((dqb, dkb), dvb))| {
                        let qb = &q.data()[b * td..(b + 1) * td];
                        let kb = &k.data()[b * td..(b + 1) * td];
                        let vb = &v.data()[b * td..(b + 1) * td];
                        let gb = &g[b * td..(b + 1) * td];
                        for h in 0..*heads {
                            let off = h * dh;
                            let w = &attn[(b * heads + h) * t * t..(b * heads + h + 1) * t * t];
                            // dv[j] += sum_i w[i,j] * g[i]; dw[i,j] = g[i] . v[j]
                            let mut dwij = vec![T::zero(); t * t];
                            for i in 0..t {
                                let gi = &gb[i * d + off..i * d + off + dh];
                                for j in 0..t {
                                    let wij = w[i * t + j];
                                    let vj = &vb[j * d + off..j * d + off + dh];
                                    let mut dot = T::zero();
                                    for (gv, vv) in gi.iter().zip(vj) {
                                        dot = dot + *gv * *vv;
                                    }
                                    dwij[i * t + j] = dot;
                                    if wij != T::zero() {
                                        let dvj = &mut dvb[j * d + off..j * d + off + dh];
                                        for (dvx, gv) in dvj.iter_mut().zip(gi) {
                                            *dvx = *dvx + wij * *gv;
                                        }
                                    }
                                }
                            }
                            // softmax backward: dl[i,j] = w[i,j]*(dw[i,j] - sum_j' w[i,j']dw[i,j'])
                            for i in 0..t {
                                let wrow = &w[i * t..(i + 1) * t];
                                let drow = &mut dwij[i * t..(i + 1) * t];
                                let mut dot = T::zero();
                                for (wv, dv_) in wrow.iter().zip(drow.iter()) {
                                    dot = dot + *wv * *dv_;
                                }
                                for (dl, wv) in drow.iter_mut().zip(wrow) {
                                    *dl = *wv * (*dl - dot);
                                }
                            }
                            // dq[i] += scale * sum_j dl[i,j] k[j]; dk[j] += scale * sum_i dl[i,j] q[i]
                            for i in 0..t {
                                for j in 0..t {
                                    let dl = dwij[i * t + j];
                                    if dl == T::zero() {
                                        continue;
                                    }
                                    let s = scale * dl;
                                    let kj = &kb[j * d + off..j * d + off + dh];
                                    let dqi = &mut dqb[i * d + off..i * d + off + dh];
                                    for (dqx, kv) in dqi.iter_mut().zip(kj) {
                                        *dqx = *dqx + s * *kv;
                                    }
                                    let qi = &qb[i * d + off..i * d + off + dh];
                                    let dkj = &mut dkb[j * d + off..j * d + off + dh];
                                    for (dkx, qv) in dkj.iter_mut().zip(qi) {
                                        *dkx = *dkx + s * *qv;
                                    }
                                }
                            }
                        }
                    });
                vec![
                    (ins[0], Tensor::new(q.shape().to_vec(), dq)?),
                    (ins[1], Tensor::new(k.shape().to_vec(), dk)?),
                    (ins[2], Tensor::new(v.shape().to_vec(), dv)?),
                ]
            }

            Expr::Softmax => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for ((yrow, grow), drow) in y
                    .chunks(cols)
                    .zip(g.chunks(cols))
                    .zip(dx.chunks_mut(cols))
                {
                    let mut dot = T::zero();
                    for (yv, gv) in yrow.iter().zip(grow) {
                        dot = dot + *yv * *gv;
                    }
                    for ((d, yv), gv) in drow.iter_mut().zip(yrow).zip(grow) {
                        *d = *yv * (*gv - dot);
                    }
                }
                vec![(ins[0], Tensor::new(node.value.shape().to_vec(), dx)?)]
            }

            Expr::LayerNorm { .. } => {
                let (x, gamma) = (val(0), val(1));
                let dim = *x.shape().last().unwrap();
                let rows = x.numel() / dim;
                let Aux::Norm { mean, rstd } = &node.aux else { unreachable!() };
                let inv_d = c::<T>(1.0 / dim as f64);

                let mut dx = vec![T::zero(); x.numel()];
                let mut dgamma = vec![T::zero(); dim];
                let mut dbeta = vec![T::zero(); dim];
                for r in 0..rows {
                    let xr = &x.data()[r * dim..(r + 1) * dim];
                    let gr = &g[r * dim..(r + 1) * dim];
                    let (mu, rs) = (mean[r], rstd[r]);
                    let mut m1 = T::zero();
                    let mut m2 = T::zero();
                    for j in 0..dim {
                        let xh = (xr[j] - mu) * rs;
                        let dxh = gr[j] * gamma.data()[j];
                        m1 = m1 + dxh;
                        m2 = m2 + dxh * xh;
                        dgamma[j] = dgamma[j] + gr[j] * xh;
                        dbeta[j] = dbeta[j] + gr[j];
                    }
                    m1 = m1 * inv_d;
                    m2 = m2 * inv_d;
                    let dr = &mut dx[r * dim..(r + 1) * dim];
                    for j in 0..dim {
                        let xh = (xr[j] - mu) * rs;
                        dr[j] = rs * (gr[j] * gamma.data()[j] - m1 - xh * m2);
                    }
                }
                vec![
                    (ins[0], Tensor::new(x.shape().to_vec(), dx)?),
                    (ins[1], Tensor::new(vec![dim], dgamma)?),
                    (ins[2], Tensor::new(vec![dim], dbeta)?),
                ]
            }

            Expr::GroupNorm { groups, .. } => {
                let (x, gamma) = (val(0), val(1));
                let (batch, ch) = (x.shape()[0], x.shape()[1]);
                let spatial = x.numel() / (batch * ch);
                let cg = ch / groups;
                let gsize = cg * spatial;
                let Aux::Norm { mean, rstd } = &node.aux else { unreachable!() };
                let inv_n = c::<T>(1.0 / gsize as f64);

                let mut dx = vec![T::zero(); x.numel()];
                let mut dgamma = vec![T::zero(); ch];
                let mut dbeta = vec![T::zero(); ch];
                for b in 0..batch {
                    for gi in 0..*groups {
                        let (mu, rs) = (mean[b * groups + gi], rstd[b * groups + gi]);
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for cc in 0..cg {
                            let chn = gi * cg + cc;
                            let base = (b * ch + chn) * spatial;
                            let gam = gamma.data()[chn];
                            for s in 0..spatial {
                                let xh = (x.data()[base + s] - mu) * rs;
                                let dxh = g[base + s] * gam;
                                m1 = m1 + dxh;
                                m2 = m2 + dxh * xh;
                                dgamma[chn] = dgamma[chn] + g[base + s] * xh;
                                dbeta[chn] = dbeta[chn] + g[base + s];
                            }
                        }
                        m1 = m1 * inv_n;
                        m2 = m2 * inv_n;
                        for cc in 0..cg {
                            let chn = gi * cg + cc;
                            let base = (b * ch + chn) * spatial;
                            let gam = gamma.data()[chn];
                            for s in 0..spatial {
                                let xh = (x.data()[base + s] - mu) * rs;
                                dx[base + s] = rs * (g[base + s] * gam - m1 - xh * m2);
                            }
                        }
                    }
                }
                vec![
                    (ins[0], Tensor::new(x.shape().to_vec(), dx)?),
                    (ins[1], Tensor::new(vec![ch], dgamma)?),
                    (ins[2], Tensor::new(vec![ch], dbeta)?),
                ]
            }

            Expr::Relu => {
                let x = val(0);
                let dx: Vec<T> = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                vec![(ins[0], Tensor::new(x.shape().to_vec(), dx)?)]
            }

            Expr::Gelu => {
                let x = val(0);
                let dx: Vec<T> = x
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&xv, &gv)| gv * kn::gelu_grad(xv))
                    .collect();
                vec![(ins[0], Tensor::new(x.shape().to_vec(), dx)?)]
            }

            Expr::Film => {
                let (x, s) = (val(0), val(1));
                let (batch, ch) = (x.shape()[0], x.shape()[1]);
                let len = x.shape()[2];
                let mut dx = vec![T::zero(); x.numel()];
                let mut ds = vec![T::zero(); batch * ch];
                let mut dt = vec![T::zero(); batch * ch];
                for b in 0..batch {
                    for cn in 0..ch {
                        let base = (b * ch + cn) * len;
                        let sv = T::one() + s.data()[b * ch + cn];
                        let mut acc_s = T::zero();
                        let mut acc_t = T::zero();
                        for l in 0..len {
                            dx[base + l] = g[base + l] * sv;
                            acc_s = acc_s + g[base + l] * x.data()[base + l];
                            acc_t = acc_t + g[base + l];
                        }
                        ds[b * ch + cn] = acc_s;
                        dt[b * ch + cn] = acc_t;
                    }
                }
                vec![
                    (ins[0], Tensor::new(x.shape().to_vec(), dx)?),
                    (ins[1], Tensor::new(vec![batch, ch], ds)?),
                    (ins[2], Tensor::new(vec![batch, ch], dt)?),
                ]
            }

            Expr::Concat { axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[*axis + 1..].iter().product();
                let total_axis = shape[*axis];
                let mut outs = Vec::with_capacity(ins.len());
                let mut offset = 0usize;
                for &inp in ins {
                    let ishape = self.nodes[inp].value.shape().to_vec();
                    let ax = ishape[*axis];
                    let mut dx = vec![T::zero(); self.nodes[inp].value.numel()];
                    for o in 0..outer {
                        for a in 0..ax {
                            let src = (o * total_axis + offset + a) * inner;
                            let dst = (o * ax + a) * inner;
                            dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                        }
                    }
                    outs.push((inp, Tensor::new(ishape, dx)?));
                    offset += ax;
                }
                outs
            }

            Expr::Narrow { axis, start, len } => {
                let x = val(0);
                let xs = x.shape();
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let ax = xs[*axis];
                let mut dx = vec![T::zero(); x.numel()];
                for o in 0..outer {
                    for a in 0..*len {
                        let dst = (o * ax + start + a) * inner;
                        let src = (o * len + a) * inner;
                        dx[dst..dst + inner].copy_from_slice(&g[src..src + inner]);
                    }
                }
                vec![(ins[0], Tensor::new(xs.to_vec(), dx)?)]
            }

            Expr::Reshape { .. } => {
                let x = val(0);
                vec![(ins[0], Tensor::new(x.shape().to_vec(), g.to_vec())?)]
            }

            Expr::BroadcastAdd => {
                let (x, a) = (val(0), val(1));
                let block = a.numel();
                let mut da = vec![T::zero(); block];
                for chunk in g.chunks(block) {
                    for (d, &v) in da.iter_mut().zip(chunk) {
                        *d = *d + v;
                    }
                }
                vec![
                    (ins[0], Tensor::new(x.shape().to_vec(), g.to_vec())?),
                    (ins[1], Tensor::new(a.shape().to_vec(), da)?),
                ]
            }

            Expr::Add => vec![
                (ins[0], Tensor::new(val(0).shape().to_vec(), g.to_vec())?),
                (ins[1], Tensor::new(val(1).shape().to_vec(), g.to_vec())?),
            ],

            Expr::Sub => {
                let db: Vec<T> = g.iter().map(|&v| -v).collect();
                vec![
                    (ins[0], Tensor::new(val(0).shape().to_vec(), g.to_vec())?),
                    (ins[1], Tensor::new(val(1).shape().to_vec(), db)?),
                ]
            }

            Expr::Mul => {
                let (a, b) = (val(0), val(1));
                let da: Vec<T> = g.iter().zip(b.data()).map(|(&gv, &bv)| gv * bv).collect();
                let db: Vec<T> = g.iter().zip(a.data()).map(|(&gv, &av)| gv * av).collect();
                vec![
                    (ins[0], Tensor::new(a.shape().to_vec(), da)?),
                    (ins[1], Tensor::new(b.shape().to_vec(), db)?),
                ]
            }

            Expr::Div => {
                let (a, b) = (val(0), val(1));
                let da: Vec<T> = g.iter().zip(b.data()).map(|(&gv, &bv)| gv / bv).collect();
                let db: Vec<T> = g
                    .iter()
                    .zip(a.data())
                    .zip(b.data())
                    .map(|((&gv, &av), &bv)| -gv * av / (bv * bv))
                    .collect();
                vec![
                    (ins[0], Tensor::new(a.shape().to_vec(), da)?),
                    (ins[1], Tensor::new(b.shape().to_vec(), db)?),
                ]
            }

            Expr::AddScalar { .. } => {
                vec![(ins[0], Tensor::new(val(0).shape().to_vec(), g.to_vec())?)]
            }

            Expr::MulScalar { value } => {
                let dx: Vec<T> = g.iter().map(|&gv| gv * *value).collect();
                vec![(ins[0], Tensor::new(val(0).shape().to_vec(), dx)?)]
            }

            Expr::SumAll => {
                let x = val(0);
                vec![(ins[0], Tensor::full(x.shape().to_vec(), g[0]))]
            }

            Expr::MeanAll => {
                let x = val(0);
                let v = g[0] * c::<T>(1.0 / x.numel() as f64);
                vec![(ins[0], Tensor::full(x.shape().to_vec(), v))]
            }

            Expr::UpsampleNearest1d { factor } => {
                let x = val(0);
                let lin = *x.shape().last().unwrap();
                let rows = x.numel() / lin;
                let lout = lin * factor;
                let mut dx = vec![T::zero(); x.numel()];
                for r in 0..rows {
                    for i in 0..lin {
                        let mut acc = T::zero();
                        for f in 0..*factor {
                            acc = acc + g[r * lout + i * factor + f];
                        }
                        dx[r * lin + i] = acc;
                    }
                }
                vec![(ins[0], Tensor::new(x.shape().to_vec(), dx)?)]
            }

            Expr::ReplaceToken { token, gates } => {
                let x = val(0);
                let (_, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
                let mut dx = g.to_vec();
                let mut dr = vec![T::zero(); d];
                for (b, &gate) in gates.iter().enumerate() {
                    if gate {
                        let base = (b * t + token) * d;
                        for j in 0..d {
                            dr[j] = dr[j] + dx[base + j];
                            dx[base + j] = T::zero();
                        }
                    }
                }
                vec![
                    (ins[0], Tensor::new(x.shape().to_vec(), dx)?),
                    (ins[1], Tensor::new(vec![d], dr)?),
                ]
            }
        };
        Ok(out)
    }
}

// ── Forward evaluation ───────────────────────────────────────────────

fn shape_err<T>(op: &'static str, detail: String) -> Result<T> {
    Err(Error::shape(op, detail))
}

#[allow(clippy::type_complexity)]
fn forward_compute<T: Scalar>(
    expr: &Expr<T>,
    ins: &[&Tensor<T>],
) -> Result<(Tensor<T>, Aux<T>)> {
    match expr {
        Expr::Leaf => unreachable!("leaves are not recomputed"),

        Expr::MatMul => {
            let (a, b) = (ins[0], ins[1]);
            if a.shape().len() != 2 || b.shape().len() != 2 || a.shape()[1] != b.shape()[0] {
                return shape_err(
                    "matmul",
                    format!("{:?} x {:?} incompatible", a.shape(), b.shape()),
                );
            }
            let (m, k) = (a.shape()[0], a.shape()[1]);
            let n = b.shape()[1];
            let mut out = vec![T::zero(); m * n];
            kn::matmul_nn(a.data(), b.data(), &mut out, m, k, n);
            Ok((Tensor::new(vec![m, n], out)?, Aux::None))
        }

        Expr::Conv1d { stride, pad } => {
            let (x, w, b) = (ins[0], ins[1], ins[2]);
            if x.shape().len() != 3 || w.shape().len() != 3 || x.shape()[1] != w.shape()[1] {
                return shape_err(
                    "conv1d",
                    format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
                );
            }
            let (batch, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let (cout, kernel) = (w.shape()[0], w.shape()[2]);
            if b.shape() != [cout] {
                return shape_err("conv1d", format!("bias {:?} wants [{}]", b.shape(), cout));
            }
            if len + 2 * pad < kernel {
                return shape_err(
                    "conv1d",
                    format!("length {} + 2*{} < kernel {}", len, pad, kernel),
                );
            }
            let lout = (len + 2 * pad - kernel) / stride + 1;
            let cols = kn::im2col_1d(x.data(), batch, cin, len, kernel, *stride, *pad, lout);
            let ck = cin * kernel;
            let mut y2 = vec![T::zero(); batch * lout * cout];
            kn::matmul_nt(&cols, w.data(), &mut y2, batch * lout, ck, cout);
            let mut y = vec![T::zero(); batch * cout * lout];
            for bi in 0..batch {
                for co in 0..cout {
                    let bias = b.data()[co];
                    for o in 0..lout {
                        y[(bi * cout + co) * lout + o] = y2[(bi * lout + o) * cout + co] + bias;
                    }
                }
            }
            Ok((Tensor::new(vec![batch, cout, lout], y)?, Aux::Cols(cols)))
        }

        Expr::Conv2d { stride, pad } => {
            let (x, w, b) = (ins[0], ins[1], ins[2]);
            if x.shape().len() != 4 || w.shape().len() != 4 || x.shape()[1] != w.shape()[1] {
                return shape_err(
                    "conv2d",
                    format!("input {:?} vs weight {:?}", x.shape(), w.shape()),
                );
            }
            let (batch, cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (cout, kernel) = (w.shape()[0], w.shape()[2]);
            if w.shape()[3] != kernel {
                return shape_err("conv2d", format!("non-square kernel {:?}", w.shape()));
            }
            if b.shape() != [cout] {
                return shape_err("conv2d", format!("bias {:?} wants [{}]", b.shape(), cout));
            }
            if h + 2 * pad < kernel || wd + 2 * pad < kernel {
                return shape_err(
                    "conv2d",
                    format!("spatial {}x{} too small for kernel {}", h, wd, kernel),
                );
            }
            let hout = (h + 2 * pad - kernel) / stride + 1;
            let wout = (wd + 2 * pad - kernel) / stride + 1;
            let cols =
                kn::im2col_2d(x.data(), batch, cin, h, wd, kernel, *stride, *pad, hout, wout);
            let ckk = cin * kernel * kernel;
            let positions = hout * wout;
            let mut y2 = vec![T::zero(); batch * positions * cout];
            kn::matmul_nt(&cols, w.data(), &mut y2, batch * positions, ckk, cout);
            let mut y = vec![T::zero(); batch * cout * positions];
            for bi in 0..batch {
                for co in 0..cout {
                    let bias = b.data()[co];
                    for p in 0..positions {
                        y[(bi * cout + co) * positions + p] =
                            y2[(bi * positions + p) * cout + co] + bias;
                    }
                }
            }
            Ok((
                Tensor::new(vec![batch, cout, hout, wout], y)?,
                Aux::Cols(cols),
            ))
        }

        Expr::Sdpa { heads, key_mask } => {
            let (q, k, v) = (ins[0], ins[1], ins[2]);
            if q.shape().len() != 3 || q.shape() != k.shape() || q.shape() != v.shape() {
                return shape_err(
                    "sdpa",
                    format!(
                        "q {:?}, k {:?}, v {:?} must be equal rank-3",
                        q.shape(),
                        k.shape(),
                        v.shape()
                    ),
                );
            }
            let (batch, t, d) = (q.shape()[0], q.shape()[1], q.shape()[2]);
            if d % heads != 0 {
                return shape_err("sdpa", format!("dim {} not divisible by {} heads", d, heads));
            }
            if let Some(m) = key_mask {
                if m.len() != batch * t {
                    return shape_err(
                        "sdpa",
                        format!("key mask len {} wants {}x{}", m.len(), batch, t),
                    );
                }
            }
            let dh = d / heads;
            let scale = c::<T>(1.0 / (dh as f64).sqrt());
            let td = t * d;

            // Pass 1: attention weights per (batch, head).
            let mut attn = vec![T::zero(); batch * heads * t * t];
            attn.par_chunks_mut(heads * t * t)
                .enumerate()
                .for_each(|(b, ab)| {
                    let qb = &q.data()[b * td..(b + 1) * td];
                    let kb = &k.data()[b * td..(b + 1) * td];
                    for h in 0..*heads {
                        let off = h * dh;
                        let w = &mut ab[h * t * t..(h + 1) * t * t];
                        for i in 0..t {
                            let qi = &qb[i * d + off..i * d + off + dh];
                            for j in 0..t {
                                let kj = &kb[j * d + off..j * d + off + dh];
                                let mut dot = T::zero();
                                for (qv, kv) in qi.iter().zip(kj) {
                                    dot = dot + *qv * *kv;
                                }
                                let mut logit = dot * scale;
                                if let Some(m) = key_mask {
                                    logit = logit + m[b * t + j];
                                }
                                w[i * t + j] = logit;
                            }
                        }
                        kn::softmax_rows(w, t);
                    }
                });

            // Pass 2: out = attn * v. Zero weights are skipped so a fully
            // masked key never contributes, not even a signed zero.
            let mut out = vec![T::zero(); batch * td];
            out.par_chunks_mut(td).enumerate().for_each(|(b, ob)| {
                let vb = &v.data()[b * td..(b + 1) * td];
                let ab = &attn[b * heads * t * t..(b + 1) * heads * t * t];
                for h in 0..*heads {
                    let off = h * dh;
                    let w = &ab[h * t * t..(h + 1) * t * t];
                    for i in 0..t {
                        let orow = &mut ob[i * d + off..i * d + off + dh];
                        for j in 0..t {
                            let wij = w[i * t + j];
                            if wij == T::zero() {
                                continue;
                            }
                            let vj = &vb[j * d + off..j * d + off + dh];
                            for (o, vv) in orow.iter_mut().zip(vj) {
                                *o = *o + wij * *vv;
                            }
                        }
                    }
                }
            });
            Ok((Tensor::new(q.shape().to_vec(), out)?, Aux::Attn(attn)))
        }

        Expr::Softmax => {
            let x = ins[0];
            if x.shape().is_empty() {
                return shape_err("softmax", "rank-0 input".into());
            }
            let cols = *x.shape().last().unwrap();
            let mut y = x.data().to_vec();
            kn::softmax_rows(&mut y, cols);
            Ok((Tensor::new(x.shape().to_vec(), y)?, Aux::None))
        }

        Expr::LayerNorm { eps } => {
            let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
            let dim = *x.shape().last().unwrap();
            if gamma.shape() != [dim] || beta.shape() != [dim] {
                return shape_err(
                    "layer_norm",
                    format!(
                        "gamma {:?} / beta {:?} want [{}]",
                        gamma.shape(),
                        beta.shape(),
                        dim
                    ),
                );
            }
            let rows = x.numel() / dim;
            let inv_d = c::<T>(1.0 / dim as f64);
            let epsv = c::<T>(*eps);
            let mut y = vec![T::zero(); x.numel()];
            let mut mean = vec![T::zero(); rows];
            let mut rstd = vec![T::zero(); rows];
            for r in 0..rows {
                let xr = &x.data()[r * dim..(r + 1) * dim];
                let mut mu = T::zero();
                for &v in xr {
                    mu = mu + v;
                }
                mu = mu * inv_d;
                let mut var = T::zero();
                for &v in xr {
                    var = var + (v - mu) * (v - mu);
                }
                var = var * inv_d;
                let rs = T::one() / (var + epsv).sqrt();
                mean[r] = mu;
                rstd[r] = rs;
                let yr = &mut y[r * dim..(r + 1) * dim];
                for j in 0..dim {
                    yr[j] = (xr[j] - mu) * rs * gamma.data()[j] + beta.data()[j];
                }
            }
            Ok((
                Tensor::new(x.shape().to_vec(), y)?,
                Aux::Norm { mean, rstd },
            ))
        }

        Expr::GroupNorm { groups, eps } => {
            let (x, gamma, beta) = (ins[0], ins[1], ins[2]);
            if x.shape().len() < 3 {
                return shape_err("group_norm", format!("rank {:?} < 3", x.shape()));
            }
            let (batch, ch) = (x.shape()[0], x.shape()[1]);
            if ch % groups != 0 {
                return shape_err(
                    "group_norm",
                    format!("{} channels not divisible by {} groups", ch, groups),
                );
            }
            if gamma.shape() != [ch] || beta.shape() != [ch] {
                return shape_err(
                    "group_norm",
                    format!("gamma/beta {:?} want [{}]", gamma.shape(), ch),
                );
            }
            let spatial = x.numel() / (batch * ch);
            let cg = ch / groups;
            let gsize = cg * spatial;
            let inv_n = c::<T>(1.0 / gsize as f64);
            let epsv = c::<T>(*eps);
            let mut y = vec![T::zero(); x.numel()];
            let mut mean = vec![T::zero(); batch * groups];
            let mut rstd = vec![T::zero(); batch * groups];
            for b in 0..batch {
                for gi in 0..*groups {
                    let mut mu = T::zero();
                    for cc in 0..cg {
                        let base = (b * ch + gi * cg + cc) * spatial;
                        for s in 0..spatial {
                            mu = mu + x.data()[base + s];
                        }
                    }
                    mu = mu * inv_n;
                    let mut var = T::zero();
                    for cc in 0..cg {
                        let base = (b * ch + gi * cg + cc) * spatial;
                        for s in 0..spatial {
                            let d = x.data()[base + s] - mu;
                            var = var + d * d;
                        }
                    }
                    var = var * inv_n;
                    let rs = T::one() / (var + epsv).sqrt();
                    mean[b * groups + gi] = mu;
                    rstd[b * groups + gi] = rs;
                    for cc in 0..cg {
                        let chn = gi * cg + cc;
                        let base = (b * ch + chn) * spatial;
                        for s in 0..spatial {
                            y[base + s] = (x.data()[base + s] - mu) * rs * gamma.data()[chn]
                                + beta.data()[chn];
                        }
                    }
                }
            }
            Ok((
                Tensor::new(x.shape().to_vec(), y)?,
                Aux::Norm { mean, rstd },
            ))
        }

        Expr::Relu => {
            let x = ins[0];
            let y: Vec<T> = x
                .data()
                .iter()
                .map(|&v| if v > T::zero() { v } else { T::zero() })
                .collect();
            Ok((Tensor::new(x.shape().to_vec(), y)?, Aux::None))
        }

        Expr::Gelu => {
            let x = ins[0];
            let y: Vec<T> = x.data().iter().map(|&v| kn::gelu(v)).collect();
            Ok((Tensor::new(x.shape().to_vec(), y)?, Aux::None))
        }

        Expr::Film => {
            let (x, s, t) = (ins[0], ins[1], ins[2]);
            if x.shape().len() != 3 {
                return shape_err("film", format!("features {:?} want rank 3", x.shape()));
            }
            let (batch, ch, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            if s.shape() != [batch, ch] || t.shape() != [batch, ch] {
                return shape_err(
                    "film",
                    format!(
                        "scale {:?} / shift {:?} want [{}, {}]",
                        s.shape(),
                        t.shape(),
                        batch,
                        ch
                    ),
                );
            }
            let mut y = vec![T::zero(); x.numel()];
            for b in 0..batch {
                for cn in 0..ch {
                    let base = (b * ch + cn) * len;
                    let sv = T::one() + s.data()[b * ch + cn];
                    let tv = t.data()[b * ch + cn];
                    for l in 0..len {
                        y[base + l] = x.data()[base + l] * sv + tv;
                    }
                }
            }
            Ok((Tensor::new(x.shape().to_vec(), y)?, Aux::None))
        }

        Expr::Concat { axis } => {
            if ins.is_empty() {
                return shape_err("concat", "no inputs".into());
            }
            let rank = ins[0].shape().len();
            if *axis >= rank {
                return shape_err("concat", format!("axis {} out of rank {}", axis, rank));
            }
            let mut shape = ins[0].shape().to_vec();
            let mut total_axis = 0usize;
            for t in ins {
                if t.shape().len() != rank {
                    return shape_err("concat", format!("mixed ranks {:?}", t.shape()));
                }
                for (d, (a, b)) in t.shape().iter().zip(shape.iter()).enumerate() {
                    if d != *axis && a != b {
                        return shape_err(
                            "concat",
                            format!("dim {} mismatch: {:?} vs {:?}", d, t.shape(), shape),
                        );
                    }
                }
                total_axis += t.shape()[*axis];
            }
            shape[*axis] = total_axis;
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[*axis + 1..].iter().product();
            let mut y = vec![T::zero(); outer * total_axis * inner];
            let mut offset = 0usize;
            for t in ins {
                let ax = t.shape()[*axis];
                for o in 0..outer {
                    for a in 0..ax {
                        let dst = (o * total_axis + offset + a) * inner;
                        let src = (o * ax + a) * inner;
                        y[dst..dst + inner].copy_from_slice(&t.data()[src..src + inner]);
                    }
                }
                offset += ax;
            }
            Ok((Tensor::new(shape, y)?, Aux::None))
        }

        Expr::Narrow { axis, start, len } => {
            let x = ins[0];
            let xs = x.shape();
            if *axis >= xs.len() || start + len > xs[*axis] {
                return shape_err(
                    "narrow",
                    format!("axis {} [{}..{}] out of {:?}", axis, start, start + len, xs),
                );
            }
            let outer: usize = xs[..*axis].iter().product();
            let inner: usize = xs[*axis + 1..].iter().product();
            let ax = xs[*axis];
            let mut shape = xs.to_vec();
            shape[*axis] = *len;
            let mut y = vec![T::zero(); outer * len * inner];
            for o in 0..outer {
                for a in 0..*len {
                    let src = (o * ax + start + a) * inner;
                    let dst = (o * len + a) * inner;
                    y[dst..dst + inner].copy_from_slice(&x.data()[src..src + inner]);
                }
            }
            Ok((Tensor::new(shape, y)?, Aux::None))
        }

        Expr::Reshape { shape } => {
            let x = ins[0];
            let n: usize = shape.iter().product();
            if n != x.numel() {
                return shape_err(
                    "reshape",
                    format!("{:?} -> {:?} changes element count", x.shape(), shape),
                );
            }
            Ok((
                Tensor::new(shape.clone(), x.data().to_vec())?,
                Aux::None,
            ))
        }

        Expr::BroadcastAdd => {
            let (x, a) = (ins[0], ins[1]);
            if x.shape().len() < 2 || a.shape() != &x.shape()[1..] {
                return shape_err(
                    "broadcast_add",
                    format!("addend {:?} wants {:?}", a.shape(), &x.shape()[1..]),
                );
            }
            let block = a.numel();
            let mut y = x.data().to_vec();
            for chunk in y.chunks_mut(block) {
                for (v, &av) in chunk.iter_mut().zip(a.data()) {
                    *v = *v + av;
                }
            }
            Ok((Tensor::new(x.shape().to_vec(), y)?, Aux::None))
        }

        Expr::Add | Expr::Sub | Expr::Mul | Expr::Div => {
            let (a, b) = (ins[0], ins[1]);
            if a.shape() != b.shape() {
                let name = match expr {
                    Expr::Add => "add",
                    Expr::Sub => "sub",
                    Expr::Mul => "mul",
                    _ => "div",
                };
                return shape_err(name, format!("{:?} vs {:?}", a.shape(), b.shape()));
            }
            let y: Vec<T> = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&av, &bv)| match expr {
                    Expr::Add => av + bv,
                    Expr::Sub => av - bv,
                    Expr::Mul => av * bv,
                    _ => av / bv,
                })
                .collect();
            Ok((Tensor::new(a.shape().to_vec(), y)?, Aux::None))
        }

        Expr::AddScalar { value } => {
            let x = ins[0];
            let y: Vec<T> = x.data().iter().map(|&v| v + *value).collect();
            Ok((Tensor::new(x.shape().to_vec(), y)?, Aux::None))
        }

        Expr::MulScalar { value } => {
            let x = ins[0];
            let y: Vec<T> = x.data().iter().map(|&v| v * *value).collect();
            Ok((Tensor::new(x.shape().to_vec(), y)?, Aux::None))
        }

        Expr::SumAll => {
            let x = ins[0];
            let mut acc = T::zero();
            for &v in x.data() {
                acc = acc + v;
            }
            Ok((Tensor::scalar_value(acc), Aux::None))
        }

        Expr::MeanAll => {
            let x = ins[0];
            let mut acc = T::zero();
            for &v in x.data() {
                acc = acc + v;
            }
            Ok((
                Tensor::scalar_value(acc * c::<T>(1.0 / x.numel() as f64)),
                Aux::None,
            ))
        }

        Expr::UpsampleNearest1d { factor } => {
            let x = ins[0];
            if x.shape().is_empty() || *factor == 0 {
                return shape_err("upsample_nearest_1d", format!("{:?}", x.shape()));
            }
            let lin = *x.shape().last().unwrap();
            let rows = x.numel() / lin;
            let lout = lin * factor;
            let mut shape = x.shape().to_vec();
            *shape.last_mut().unwrap() = lout;
            let mut y = vec![T::zero(); rows * lout];
            for r in 0..rows {
                for i in 0..lin {
                    let v = x.data()[r * lin + i];
                    for f in 0..*factor {
                        y[r * lout + i * factor + f] = v;
                    }
                }
            }
            Ok((Tensor::new(shape, y)?, Aux::None))
        }

        Expr::ReplaceToken { token, gates } => {
            let (x, r) = (ins[0], ins[1]);
            if x.shape().len() != 3 {
                return shape_err("replace_token", format!("{:?} wants rank 3", x.shape()));
            }
            let (batch, t, d) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            if *token >= t || r.shape() != [d] || gates.len() != batch {
                return shape_err(
                    "replace_token",
                    format!(
                        "token {} of {}, replacement {:?}, {} gates for batch {}",
                        token,
                        t,
                        r.shape(),
                        gates.len(),
                        batch
                    ),
                );
            }
            let mut y = x.data().to_vec();
            for (b, &gate) in gates.iter().enumerate() {
                if gate {
                    let base = (b * t + token) * d;
                    y[base..base + d].copy_from_slice(r.data());
                }
            }
            Ok((Tensor::new(x.shape().to_vec(), y)?, Aux::None))
        }
    }
}
