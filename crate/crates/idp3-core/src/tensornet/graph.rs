//! Recorded-tape reverse-mode autodiff.
//!
//! A [`Graph`] is built fresh for every forward pass. Ops append nodes
//! eagerly (values are computed at record time), `backward` walks the tape in
//! reverse creation order, which is already topological, and accumulates
//! d(loss)/d(param) into the owning [`ParamSet`].
//!
//! Shape mismatches are programming errors and panic. Non-finite values are
//! runtime faults: they poison the graph, and `backward` refuses to run on a
//! poisoned graph so training loops can abort cleanly.

use super::optim::{ParamId, ParamSet};
use super::tensor::{matmul, matmul_nt, matmul_tn, Tensor};
use super::TensornetError;
use rayon::prelude::*;
use std::collections::HashMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Input,
    Param(ParamId),
    Linear,
    PointwiseConv,
    Conv2d { stride: usize, pad: usize },
    Relu,
    Mish,
    MaxPoolPoints,
    LayerNormLast,
    LayerNormChannels,
    MseLoss,
    ConcatCols,
    Reshape,
    SwapAxes12,
    Add,
    Mul,
    Scale(f64),
}

enum Aux {
    None,
    Argmax(Vec<usize>),
    LnStats { mean: Vec<f64>, rstd: Vec<f64> },
}

struct Node {
    op: Op,
    parents: Vec<NodeId>,
    value: Tensor,
    aux: Aux,
}

/// One forward pass worth of recorded operations.
pub struct Graph {
    nodes: Vec<Node>,
    param_leaves: HashMap<ParamId, NodeId>,
    poisoned: Option<String>,
    backward_done: bool,
}

/// Parallelize batched kernels only when there is enough work per step.
const PAR_THRESHOLD: usize = 1 << 14;

impl Graph {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), param_leaves: HashMap::new(), poisoned: None, backward_done: false }
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn poisoned(&self) -> Option<&str> {
        self.poisoned.as_deref()
    }

    /// Scalar value of a node, or the poison fault if any op produced a
    /// non-finite output.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64, TensornetError> {
        if let Some(p) = &self.poisoned {
            return Err(TensornetError::NonFinite(p.clone()));
        }
        let v = self.value(id);
        assert_eq!(v.numel(), 1, "node {:?} is not scalar", id);
        Ok(v.data()[0])
    }

    /// Per-(row,channel) argmax indices saved by `max_pool_points`.
    pub fn pool_argmax(&self, id: NodeId) -> Option<&[usize]> {
        match &self.nodes[id.0].aux {
            Aux::Argmax(ix) => Some(ix),
            _ => None,
        }
    }

    fn push(&mut self, op: Op, parents: Vec<NodeId>, value: Tensor, aux: Aux) -> NodeId {
        if self.poisoned.is_none() && !value.all_finite() {
            self.poisoned = Some(format!("{op:?} produced a non-finite value"));
        }
        self.nodes.push(Node { op, parents, value, aux });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf holding plain data; no gradient is produced for it.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Input, vec![], value, Aux::None)
    }

    /// Leaf bound to a parameter. Repeated leases of the same parameter reuse
    /// one node so gradients from shared weights accumulate.
    pub fn param(&mut self, params: &ParamSet, id: ParamId) -> NodeId {
        if let Some(&node) = self.param_leaves.get(&id) {
            return node;
        }
        let value = params.get(id).value.clone();
        let node = self.push(Op::Param(id), vec![], value, Aux::None);
        self.param_leaves.insert(id, node);
        node
    }

    /// y = x.w + b with x:[B,I], w:[I,O], b:[O].
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (bs, ws) = (xv.shape(), wv.shape());
        assert_eq!(bs.len(), 2, "linear input must be 2d, got {bs:?}");
        assert_eq!(ws.len(), 2, "linear weight must be 2d, got {ws:?}");
        assert_eq!(bs[1], ws[0], "linear: input width {} vs weight rows {}", bs[1], ws[0]);
        assert_eq!(bv.shape(), &[ws[1]], "linear bias shape");
        let (rows, inw, outw) = (bs[0], bs[1], ws[1]);
        let mut out = vec![0.0; rows * outw];
        matmul(xv.data(), rows, inw, wv.data(), outw, &mut out);
        let bias = bv.data();
        for r in 0..rows {
            for (o, bo) in bias.iter().enumerate() {
                out[r * outw + o] += bo;
            }
        }
        self.push(Op::Linear, vec![x, w, b], Tensor::from_vec(&[rows, outw], out), Aux::None)
    }

    /// Kernel-size-1 convolution over the point axis: x:[B,Cin,N], w:[Cout,Cin],
    /// b:[Cout] -> [B,Cout,N]. With N = 1 this reduces to `linear` on the
    /// transposed layout; it is permutation-equivariant along N.
    pub fn pointwise_conv(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let xs = xv.shape();
        assert_eq!(xs.len(), 3, "pointwise_conv input must be [B,Cin,N], got {xs:?}");
        let (bsz, cin, n) = (xs[0], xs[1], xs[2]);
        let ws = wv.shape();
        assert_eq!(ws, &[ws[0], cin], "pointwise_conv weight [Cout,Cin] vs input Cin {cin}");
        let cout = ws[0];
        assert_eq!(bv.shape(), &[cout], "pointwise_conv bias shape");
        let mut out = vec![0.0; bsz * cout * n];
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let body = |bi: usize, chunk: &mut [f64]| {
            matmul(wd, cout, cin, &xd[bi * cin * n..(bi + 1) * cin * n], n, chunk);
            for co in 0..cout {
                let add = bd[co];
                for v in &mut chunk[co * n..(co + 1) * n] {
                    *v += add;
                }
            }
        };
        if bsz > 1 && bsz * cout * n > PAR_THRESHOLD {
            out.par_chunks_mut(cout * n).enumerate().for_each(|(bi, chunk)| body(bi, chunk));
        } else {
            for (bi, chunk) in out.chunks_mut(cout * n).enumerate() {
                body(bi, chunk);
            }
        }
        self.push(Op::PointwiseConv, vec![x, w, b], Tensor::from_vec(&[bsz, cout, n], out), Aux::None)
    }

    /// Strided 2d convolution via im2col: x:[B,Cin,H,W], w:[Cout,Cin,K,K],
    /// b:[Cout] -> [B,Cout,Ho,Wo] with Ho = (H + 2*pad - K)/stride + 1.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, b: NodeId, stride: usize, pad: usize) -> NodeId {
        assert!(stride >= 1, "conv2d stride must be >= 1");
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let xs = xv.shape();
        assert_eq!(xs.len(), 4, "conv2d input must be [B,Cin,H,W], got {xs:?}");
        let (bsz, cin, h, wid) = (xs[0], xs[1], xs[2], xs[3]);
        let ws = wv.shape();
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout,Cin,K,K]");
        assert_eq!(ws[1], cin, "conv2d weight Cin");
        assert_eq!(ws[2], ws[3], "conv2d kernel must be square");
        let (cout, k) = (ws[0], ws[2]);
        assert!(h + 2 * pad >= k && wid + 2 * pad >= k, "conv2d kernel larger than padded input");
        assert_eq!(bv.shape(), &[cout], "conv2d bias shape");
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (wid + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; bsz * cout * ho * wo];
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let body = |bi: usize, chunk: &mut [f64]| {
            let cols = im2col(&xd[bi * cin * h * wid..(bi + 1) * cin * h * wid], cin, h, wid, k, stride, pad, ho, wo);
            matmul(wd, cout, cin * k * k, &cols, ho * wo, chunk);
            for co in 0..cout {
                let add = bd[co];
                for v in &mut chunk[co * ho * wo..(co + 1) * ho * wo] {
                    *v += add;
                }
            }
        };
        if bsz > 1 && bsz * cout * ho * wo > PAR_THRESHOLD {
            out.par_chunks_mut(cout * ho * wo).enumerate().for_each(|(bi, chunk)| body(bi, chunk));
        } else {
            for (bi, chunk) in out.chunks_mut(cout * ho * wo).enumerate() {
                body(bi, chunk);
            }
        }
        self.push(Op::Conv2d { stride, pad }, vec![x, w, b], Tensor::from_vec(&[bsz, cout, ho, wo], out), Aux::None)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Relu, vec![x], Tensor::from_vec(&shape, out), Aux::None)
    }

    /// mish(x) = x * tanh(softplus(x)); the smooth alternative activation.
    pub fn mish(&mut self, x: NodeId) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|&v| v * softplus(v).tanh()).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Mish, vec![x], Tensor::from_vec(&shape, out), Aux::None)
    }

    /// Max over the point axis: x:[B,C,N] -> [B,C]. Ties keep the lowest
    /// point index. The pooled value is permutation-invariant in N bit for
    /// bit; only the saved argmax (used for routing gradients) depends on
    /// order.
    pub fn max_pool_points(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let xs = xv.shape();
        assert_eq!(xs.len(), 3, "max_pool_points input must be [B,C,N], got {xs:?}");
        let (bsz, c, n) = (xs[0], xs[1], xs[2]);
        assert!(n >= 1, "max_pool_points over an empty point axis");
        let xd = xv.data();
        let mut out = vec![0.0; bsz * c];
        let mut argmax = vec![0usize; bsz * c];
        for bc in 0..bsz * c {
            let row = &xd[bc * n..(bc + 1) * n];
            let mut best = row[0];
            let mut best_i = 0usize;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > best {
                    best = v;
                    best_i = i;
                }
            }
            out[bc] = best;
            argmax[bc] = best_i;
        }
        self.push(Op::MaxPoolPoints, vec![x], Tensor::from_vec(&[bsz, c], out), Aux::Argmax(argmax))
    }

    /// Layer norm over the last axis with learned gain/bias; epsilon 1e-5.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        let c = *xs.last().expect("layer_norm on 0-d tensor");
        let rows = self.value(x).numel() / c;
        self.layer_norm_impl(x, gamma, beta, rows, c, Op::LayerNormLast)
    }

    /// Layer norm over the channel axis of [B,C,N]: each point's channel
    /// vector is normalized independently, sharing gamma/beta of length C.
    pub fn layer_norm_channels(&mut self, x: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let xs = self.value(x).shape().to_vec();
        assert_eq!(xs.len(), 3, "layer_norm_channels input must be [B,C,N]");
        let c = xs[1];
        let rows = xs[0] * xs[2];
        self.layer_norm_impl(x, gamma, beta, rows, c, Op::LayerNormChannels)
    }

    fn layer_norm_impl(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, rows: usize, c: usize, op: Op) -> NodeId {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        assert_eq!(gv.shape(), &[c], "layer_norm gamma shape");
        assert_eq!(bv.shape(), &[c], "layer_norm beta shape");
        let xs = xv.shape().to_vec();
        let (xd, gd, bd) = (xv.data(), gv.data(), bv.data());
        let mut out = vec![0.0; xd.len()];
        let mut means = vec![0.0; rows];
        let mut rstds = vec![0.0; rows];
        for r in 0..rows {
            let idx = ln_indexer(&op, &xs, r);
            let mut mean = 0.0;
            for ci in 0..c {
                mean += xd[idx(ci)];
            }
            mean /= c as f64;
            let mut var = 0.0;
            for ci in 0..c {
                let d = xd[idx(ci)] - mean;
                var += d * d;
            }
            var /= c as f64;
            let rstd = 1.0 / (var + LN_EPS).sqrt();
            means[r] = mean;
            rstds[r] = rstd;
            for ci in 0..c {
                let xhat = (xd[idx(ci)] - mean) * rstd;
                out[idx(ci)] = gd[ci] * xhat + bd[ci];
            }
        }
        self.push(op, vec![x, gamma, beta], Tensor::from_vec(&xs, out), Aux::LnStats { mean: means, rstd: rstds })
    }

    /// Mean squared error over all elements; returns a scalar node.
    pub fn mse_loss(&mut self, pred: NodeId, target: NodeId) -> NodeId {
        let (pv, tv) = (self.value(pred), self.value(target));
        assert_eq!(pv.shape(), tv.shape(), "mse_loss shape mismatch {:?} vs {:?}", pv.shape(), tv.shape());
        let n = pv.numel() as f64;
        let sum: f64 = pv.iter().zip(tv.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
        self.push(Op::MseLoss, vec![pred, target], Tensor::scalar(sum / n), Aux::None)
    }

    /// Concatenates 2d nodes along columns: k inputs [B,Ci] -> [B, sum Ci].
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let bsz = self.value(parts[0]).shape()[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.value(p).shape();
                assert_eq!(s.len(), 2, "concat_cols input must be 2d, got {s:?}");
                assert_eq!(s[0], bsz, "concat_cols row mismatch");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; bsz * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.value(p).data();
            for r in 0..bsz {
                out[r * total + offset..r * total + offset + w].copy_from_slice(&pd[r * w..(r + 1) * w]);
            }
            offset += w;
        }
        self.push(Op::ConcatCols, parts.to_vec(), Tensor::from_vec(&[bsz, total], out), Aux::None)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).reshaped(shape);
        self.push(Op::Reshape, vec![x], v, Aux::None)
    }

    /// [B,X,Y] -> [B,Y,X].
    pub fn swap_axes12(&mut self, x: NodeId) -> NodeId {
        let xv = self.value(x);
        let xs = xv.shape();
        assert_eq!(xs.len(), 3, "swap_axes12 input must be 3d, got {xs:?}");
        let (bsz, a, b) = (xs[0], xs[1], xs[2]);
        let xd = xv.data();
        let mut out = vec![0.0; xd.len()];
        for bi in 0..bsz {
            for i in 0..a {
                for j in 0..b {
                    out[bi * a * b + j * a + i] = xd[bi * a * b + i * b + j];
                }
            }
        }
        self.push(Op::SwapAxes12, vec![x], Tensor::from_vec(&[bsz, b, a], out), Aux::None)
    }

    pub fn add(&mut self, x: NodeId, y: NodeId) -> NodeId {
        let (xv, yv) = (self.value(x), self.value(y));
        assert_eq!(xv.shape(), yv.shape(), "add shape mismatch");
        let out: Vec<f64> = xv.iter().zip(yv.iter()).map(|(a, b)| a + b).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Add, vec![x, y], Tensor::from_vec(&shape, out), Aux::None)
    }

    pub fn mul(&mut self, x: NodeId, y: NodeId) -> NodeId {
        let (xv, yv) = (self.value(x), self.value(y));
        assert_eq!(xv.shape(), yv.shape(), "mul shape mismatch");
        let out: Vec<f64> = xv.iter().zip(yv.iter()).map(|(a, b)| a * b).collect();
        let shape = xv.shape().to_vec();
        self.push(Op::Mul, vec![x, y], Tensor::from_vec(&shape, out), Aux::None)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(Op::Scale(c), vec![x], Tensor::from_vec(&shape, out), Aux::None)
    }

    /// Reverse pass from a scalar loss. Zeroes every gradient in `params`
    /// first, so unreachable parameters end at zero; reachable ones hold
    /// d(loss)/d(param) afterwards. A graph runs backward at most once.
    pub fn backward(&mut self, loss: NodeId, params: &mut ParamSet) -> Result<(), TensornetError> {
        if let Some(p) = &self.poisoned {
            return Err(TensornetError::NonFinite(p.clone()));
        }
        if self.backward_done {
            return Err(TensornetError::BackwardTwice);
        }
        if self.value(loss).numel() != 1 {
            return Err(TensornetError::LossNotScalar(self.value(loss).shape().to_vec()));
        }
        self.backward_done = true;
        params.zero_grads();
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(gout) = grads[i].take() else { continue };
            let (left, right) = self.nodes.split_at_mut(i);
            let node = &right[0];
            match node.op {
                Op::Input => {}
                Op::Param(pid) => {
                    let pg = &mut params.get_mut(pid).gradient;
                    debug_assert_eq!(pg.shape(), gout.shape());
                    for (g, d) in pg.data_mut().iter_mut().zip(gout.data()) {
                        *g += d;
                    }
                }
                _ => {
                    let parent_values: Vec<&Tensor> = node.parents.iter().map(|p| &left[p.0].value).collect();
                    let pgrads = op_backward(node, &parent_values, &gout);
                    for (parent, grad) in node.parents.iter().zip(pgrads) {
                        let Some(grad) = grad else { continue };
                        match &mut grads[parent.0] {
                            slot @ None => *slot = Some(grad),
                            Some(existing) => {
                                for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                                    *e += g;
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) const LN_EPS: f64 = 1e-5;

fn softplus(x: f64) -> f64 {
    // Stable in both tails.
    if x > 20.0 {
        x
    } else if x < -20.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Maps a (row, channel) pair to a flat index for the two layer-norm layouts.
fn ln_indexer<'a>(op: &Op, shape: &'a [usize], r: usize) -> impl Fn(usize) -> usize + 'a {
    let channels_mode = matches!(op, Op::LayerNormChannels);
    let (c, n) = if channels_mode { (shape[1], shape[2]) } else { (*shape.last().unwrap(), 1) };
    move |ci: usize| {
        if channels_mode {
            let b = r / n;
            let nn = r % n;
            (b * c + ci) * n + nn
        } else {
            r * c + ci
        }
    }
}

/// Gradients for each parent of `node`, given parent values and the output
/// gradient. `None` entries mean "no gradient flows" (never happens today
/// but keeps the signature honest for multi-parent ops).
fn op_backward(node: &Node, pv: &[&Tensor], gout: &Tensor) -> Vec<Option<Tensor>> {
    match node.op {
        Op::Input | Op::Param(_) => vec![],
        Op::Linear => {
            let (x, w) = (pv[0], pv[1]);
            let (rows, inw) = (x.shape()[0], x.shape()[1]);
            let outw = w.shape()[1];
            let mut dx = Tensor::zeros(&[rows, inw]);
            matmul_nt(gout.data(), rows, outw, w.data(), inw, dx.data_mut(), false);
            let mut dw = Tensor::zeros(&[inw, outw]);
            matmul_tn(x.data(), rows, inw, gout.data(), outw, dw.data_mut(), false);
            let mut db = Tensor::zeros(&[outw]);
            for r in 0..rows {
                for o in 0..outw {
                    db.data_mut()[o] += gout.data()[r * outw + o];
                }
            }
            vec![Some(dx), Some(dw), Some(db)]
        }
        Op::PointwiseConv => {
            let (x, w) = (pv[0], pv[1]);
            let (bsz, cin, n) = (x.shape()[0], x.shape()[1], x.shape()[2]);
            let cout = w.shape()[0];
            let mut dx = Tensor::zeros(&[bsz, cin, n]);
            let (gd, wd, xd) = (gout.data(), w.data(), x.data());
            {
                let dxd = dx.data_mut();
                let body = |bi: usize, chunk: &mut [f64]| {
                    matmul_tn(wd, cout, cin, &gd[bi * cout * n..(bi + 1) * cout * n], n, chunk, false);
                };
                if bsz > 1 && bsz * cin * n > PAR_THRESHOLD {
                    dxd.par_chunks_mut(cin * n).enumerate().for_each(|(bi, chunk)| body(bi, chunk));
                } else {
                    for (bi, chunk) in dxd.chunks_mut(cin * n).enumerate() {
                        body(bi, chunk);
                    }
                }
            }
            let mut dw = Tensor::zeros(&[cout, cin]);
            let mut db = Tensor::zeros(&[cout]);
            for bi in 0..bsz {
                matmul_nt(
                    &gd[bi * cout * n..(bi + 1) * cout * n],
                    cout,
                    n,
                    &xd[bi * cin * n..(bi + 1) * cin * n],
                    cin,
                    dw.data_mut(),
                    true,
                );
                for co in 0..cout {
                    db.data_mut()[co] += gd[bi * cout * n + co * n..bi * cout * n + (co + 1) * n].iter().sum::<f64>();
                }
            }
            vec![Some(dx), Some(dw), Some(db)]
        }
        Op::Conv2d { stride, pad } => {
            let (x, w) = (pv[0], pv[1]);
            let (bsz, cin, h, wid) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (cout, k) = (w.shape()[0], w.shape()[2]);
            let ho = (h + 2 * pad - k) / stride + 1;
            let wo = (wid + 2 * pad - k) / stride + 1;
            let (gd, wd, xd) = (gout.data(), w.data(), x.data());
            let mut dx = Tensor::zeros(&[bsz, cin, h, wid]);
            let mut dw = Tensor::zeros(&[cout, cin, k, k]);
            let mut db = Tensor::zeros(&[cout]);
            for bi in 0..bsz {
                let g_b = &gd[bi * cout * ho * wo..(bi + 1) * cout * ho * wo];
                let cols = im2col(&xd[bi * cin * h * wid..(bi + 1) * cin * h * wid], cin, h, wid, k, stride, pad, ho, wo);
                matmul_nt(g_b, cout, ho * wo, &cols, cin * k * k, dw.data_mut(), true);
                let mut dcols = vec![0.0; cin * k * k * ho * wo];
                matmul_tn(wd, cout, cin * k * k, g_b, ho * wo, &mut dcols, false);
                col2im(&dcols, cin, h, wid, k, stride, pad, ho, wo, &mut dx.data_mut()[bi * cin * h * wid..(bi + 1) * cin * h * wid]);
                for co in 0..cout {
                    db.data_mut()[co] += g_b[co * ho * wo..(co + 1) * ho * wo].iter().sum::<f64>();
                }
            }
            vec![Some(dx), Some(dw), Some(db)]
        }
        Op::Relu => {
            let x = pv[0];
            let mut dx = Tensor::zeros(&[x.numel()]);
            for ((d, &xi), &g) in dx.data_mut().iter_mut().zip(x.iter()).zip(gout.iter()) {
                *d = if xi > 0.0 { g } else { 0.0 };
            }
            vec![Some(dx.reshaped(x.shape()))]
        }
        Op::Mish => {
            let x = pv[0];
            let mut dx = Tensor::zeros(&[x.numel()]);
            for ((d, &xi), &g) in dx.data_mut().iter_mut().zip(x.iter()).zip(gout.iter()) {
                let t = softplus(xi).tanh();
                *d = g * (t + xi * (1.0 - t * t) * sigmoid(xi));
            }
            vec![Some(dx.reshaped(x.shape()))]
        }
        Op::MaxPoolPoints => {
            let x = pv[0];
            let n = x.shape()[2];
            let Aux::Argmax(argmax) = &node.aux else { unreachable!("pool without argmax") };
            let mut dx = Tensor::zeros(x.shape());
            for (bc, (&ix, &g)) in argmax.iter().zip(gout.iter()).enumerate() {
                dx.data_mut()[bc * n + ix] = g;
            }
            vec![Some(dx)]
        }
        Op::LayerNormLast | Op::LayerNormChannels => {
            let (x, gamma) = (pv[0], pv[1]);
            let xs = x.shape();
            let Aux::LnStats { mean, rstd } = &node.aux else { unreachable!("ln without stats") };
            let c = if matches!(node.op, Op::LayerNormChannels) { xs[1] } else { *xs.last().unwrap() };
            let rows = x.numel() / c;
            let (xd, gd, od) = (x.data(), gamma.data(), gout.data());
            let mut dx = Tensor::zeros(xs);
            let mut dgamma = Tensor::zeros(&[c]);
            let mut dbeta = Tensor::zeros(&[c]);
            for r in 0..rows {
                let idx = ln_indexer(&node.op, xs, r);
                let (m, rs) = (mean[r], rstd[r]);
                let mut mean_dxhat = 0.0;
                let mut mean_dxhat_xhat = 0.0;
                for ci in 0..c {
                    let i = idx(ci);
                    let xhat = (xd[i] - m) * rs;
                    let dxhat = od[i] * gd[ci];
                    mean_dxhat += dxhat;
                    mean_dxhat_xhat += dxhat * xhat;
                    dgamma.data_mut()[ci] += od[i] * xhat;
                    dbeta.data_mut()[ci] += od[i];
                }
                mean_dxhat /= c as f64;
                mean_dxhat_xhat /= c as f64;
                for ci in 0..c {
                    let i = idx(ci);
                    let xhat = (xd[i] - m) * rs;
                    let dxhat = od[i] * gd[ci];
                    dx.data_mut()[i] = rs * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
                }
            }
            vec![Some(dx), Some(dgamma), Some(dbeta)]
        }
        Op::MseLoss => {
            let (p, t) = (pv[0], pv[1]);
            let g = gout.data()[0];
            let n = p.numel() as f64;
            let mut dp = Tensor::zeros(p.shape());
            let mut dt = Tensor::zeros(p.shape());
            for i in 0..p.numel() {
                let d = 2.0 * (p.data()[i] - t.data()[i]) / n * g;
                dp.data_mut()[i] = d;
                dt.data_mut()[i] = -d;
            }
            vec![Some(dp), Some(dt)]
        }
        Op::ConcatCols => {
            let bsz = pv[0].shape()[0];
            let total: usize = pv.iter().map(|p| p.shape()[1]).sum();
            let god = gout.data();
            let mut grads = Vec::with_capacity(pv.len());
            let mut offset = 0;
            for p in pv {
                let w = p.shape()[1];
                let mut dp = Tensor::zeros(&[bsz, w]);
                for r in 0..bsz {
                    dp.data_mut()[r * w..(r + 1) * w].copy_from_slice(&god[r * total + offset..r * total + offset + w]);
                }
                offset += w;
                grads.push(Some(dp));
            }
            grads
        }
        Op::Reshape => vec![Some(gout.reshaped(pv[0].shape()))],
        Op::SwapAxes12 => {
            let xs = pv[0].shape();
            let (bsz, a, b) = (xs[0], xs[1], xs[2]);
            let god = gout.data();
            let mut dx = Tensor::zeros(xs);
            for bi in 0..bsz {
                for i in 0..a {
                    for j in 0..b {
                        dx.data_mut()[bi * a * b + i * b + j] = god[bi * a * b + j * a + i];
                    }
                }
            }
            vec![Some(dx)]
        }
        Op::Add => vec![Some(gout.clone()), Some(gout.clone())],
        Op::Mul => {
            let (x, y) = (pv[0], pv[1]);
            let dx: Vec<f64> = gout.iter().zip(y.iter()).map(|(g, b)| g * b).collect();
            let dy: Vec<f64> = gout.iter().zip(x.iter()).map(|(g, a)| g * a).collect();
            vec![
                Some(Tensor::from_vec(x.shape(), dx)),
                Some(Tensor::from_vec(x.shape(), dy)),
            ]
        }
        Op::Scale(c) => {
            let dx: Vec<f64> = gout.iter().map(|g| g * c).collect();
            vec![Some(Tensor::from_vec(pv[0].shape(), dx))]
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col(x: &[f64], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize) -> Vec<f64> {
    let mut cols = vec![0.0; cin * k * k * ho * wo];
    for ci in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        cols[row * ho * wo + oi * wo + oj] = x[(ci * h + ii as usize) * w + jj as usize];
                    }
                }
            }
        }
    }
    cols
}

#[allow(clippy::too_many_arguments)]
fn col2im(cols: &[f64], cin: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize, ho: usize, wo: usize, out: &mut [f64]) {
    for ci in 0..cin {
        for ki in 0..k {
            for kj in 0..k {
                let row = (ci * k + ki) * k + kj;
                for oi in 0..ho {
                    let ii = (oi * stride + ki) as isize - pad as isize;
                    if ii < 0 || ii >= h as isize {
                        continue;
                    }
                    for oj in 0..wo {
                        let jj = (oj * stride + kj) as isize - pad as isize;
                        if jj < 0 || jj >= w as isize {
                            continue;
                        }
                        out[(ci * h + ii as usize) * w + jj as usize] += cols[row * ho * wo + oi * wo + oj];
                    }
                }
            }
        }
    }
}
