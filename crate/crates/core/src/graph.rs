//! Reverse-mode automatic differentiation over an evaluated tape.
//!
//! A [`Graph`] is built eagerly: every op computes its value when added, so
//! after construction the tape holds all activations. Nodes only ever refer
//! to earlier nodes, which makes a single reverse sweep a valid backward
//! pass; each node is visited exactly once.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::gemm;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Matmul(NodeId, NodeId),
    /// Grouped matmul: rhs is `[G, k, n]`, lhs `[.., G, k]`.
    Bmm(NodeId, NodeId),
    /// Swap the last two axes.
    Transpose(NodeId),
    Add(NodeId, NodeId),
    /// Broadcast-add `bias` over the leading axes of `x`; the bias shape must
    /// equal a suffix of `x`'s shape.
    AddBias {
        x: NodeId,
        bias: NodeId,
    },
    /// Elementwise product with a constant (dropout / branch-drop masks).
    MulMask {
        x: NodeId,
        mask: Tensor<T>,
    },
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
    },
    /// Mean over the second-to-last axis (token pooling).
    MeanTokens(NodeId),
    /// Same data, different shape.
    Reshape(NodeId),
    /// Sum of all elements, yielding a rank-0 scalar.
    Sum(NodeId),
    /// Permutes elements within each trailing slab; `index` maps output
    /// positions to input positions and must be a bijection.
    Remap {
        x: NodeId,
        index: Vec<usize>,
        slab_in: usize,
    },
    /// Mean over rows of `-sum(target * log softmax(logit))`; targets are
    /// constant probability rows.
    SoftmaxXent {
        logits: NodeId,
        targets: Tensor<T>,
    },
}

/// Per-node saved state for the backward pass.
enum Aux<T> {
    None,
    /// LayerNorm per-row mean and reciprocal standard deviation.
    RowStats { mean: Vec<T>, rstd: Vec<T> },
    /// Softmax probabilities of the cross-entropy node.
    Probs(Tensor<T>),
}

struct Node<T> {
    op: Op<T>,
    value: Tensor<T>,
    aux: Aux<T>,
    requires_grad: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    named: HashMap<String, NodeId>,
}

/// Result of a backward pass: one gradient per node that needed one.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    named: HashMap<String, NodeId>,
}

impl<T: Scalar> Gradients<T> {
    pub fn by_id(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads[id.0].as_ref()
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads[id.0].take()
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.named.get(name).and_then(|&id| self.by_id(id))
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            named: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op<T>, value: Tensor<T>, aux: Aux<T>, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            op,
            value,
            aux,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Non-trainable input leaf.
    pub fn input(&mut self, value: Tensor<T>) -> NodeId {
        self.push(Op::Leaf, value, Aux::None, false)
    }

    /// Trainable named leaf; its gradient is retrievable by name.
    pub fn param(&mut self, name: &str, value: Tensor<T>) -> NodeId {
        let id = self.push(Op::Leaf, value, Aux::None, true);
        self.named.insert(name.to_string(), id);
        id
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Matmul(a, b), value, Aux::None, rg))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.rank() != 3 {
            return Err(Error::shape("bmm rhs", av.shape(), bv.shape()));
        }
        let (g, k, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
        let (lead, ag, ak) = av.leading_rows_cols()?;
        if ag != g || ak != k {
            return Err(Error::shape("bmm", av.shape(), bv.shape()));
        }
        let mut out = vec![T::zero(); lead * g * n];
        gemm::bmm(lead, g, k, n, av.data(), bv.data(), &mut out);
        let mut shape = av.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        let value = Tensor::from_vec(&shape, out)?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Bmm(a, b), value, Aux::None, rg))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let value = self.value(x).transpose2()?;
        let rg = self.needs(x);
        Ok(self.push(Op::Transpose(x), value, Aux::None, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let value = self.value(a).add(self.value(b))?;
        let rg = self.needs(a) || self.needs(b);
        Ok(self.push(Op::Add(a, b), value, Aux::None, rg))
    }

    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (xs, bs) = (xv.shape(), bv.shape());
        if bs.len() > xs.len() || &xs[xs.len() - bs.len()..] != bs {
            return Err(Error::shape("add_bias", xs, bs));
        }
        let slab = bv.numel();
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(slab) {
            for (o, &b) in chunk.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let value = Tensor::from_vec(xs, data)?;
        let rg = self.needs(x) || self.needs(bias);
        Ok(self.push(Op::AddBias { x, bias }, value, Aux::None, rg))
    }

    pub fn mul_mask(&mut self, x: NodeId, mask: Tensor<T>) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape() != mask.shape() {
            return Err(Error::shape("mul_mask", xv.shape(), mask.shape()));
        }
        let data = xv
            .data()
            .iter()
            .zip(mask.data())
            .map(|(&a, &m)| a * m)
            .collect();
        let value = Tensor::from_vec(xv.shape(), data)?;
        let rg = self.needs(x);
        Ok(self.push(Op::MulMask { x, mask }, value, Aux::None, rg))
    }

    /// Exact GELU: `x * Phi(x)` with the Gaussian CDF `Phi`.
    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let value = self.value(x).map(gelu_scalar);
        let rg = self.needs(x);
        self.push(Op::Gelu(x), value, Aux::None, rg)
    }

    /// LayerNorm over the last axis: `gamma * (x - mean) / sqrt(var + eps) + beta`.
    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> Result<NodeId> {
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let c = *xv.shape().last().ok_or_else(|| {
            Error::Contract("layer_norm needs rank >= 1".to_string())
        })?;
        if gv.shape() != [c] {
            return Err(Error::shape("layer_norm gamma", xv.shape(), gv.shape()));
        }
        if bv.shape() != [c] {
            return Err(Error::shape("layer_norm beta", xv.shape(), bv.shape()));
        }
        let rows = xv.numel() / c;
        let mut data = vec![T::zero(); xv.numel()];
        let mut means = vec![T::zero(); rows];
        let mut rstds = vec![T::zero(); rows];
        let nf = T::of_f64(c as f64);
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row
                .iter()
                .map(|&v| (v - mean) * (v - mean))
                .sum::<T>()
                / nf;
            let rstd = (var + eps).sqrt().recip();
            means[r] = mean;
            rstds[r] = rstd;
            let out = &mut data[r * c..(r + 1) * c];
            for j in 0..c {
                out[j] = gv.data()[j] * (row[j] - mean) * rstd + bv.data()[j];
            }
        }
        let value = Tensor::from_vec(xv.shape(), data)?;
        let rg = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Op::LayerNorm { x, gamma, beta },
            value,
            Aux::RowStats {
                mean: means,
                rstd: rstds,
            },
            rg,
        ))
    }

    pub fn mean_tokens(&mut self, x: NodeId) -> Result<NodeId> {
        let xv = self.value(x);
        let (lead, s, c) = xv.leading_rows_cols()?;
        let mut data = vec![T::zero(); lead * c];
        let sf = T::of_f64(s as f64);
        for l in 0..lead {
            let slab = &xv.data()[l * s * c..(l + 1) * s * c];
            let out = &mut data[l * c..(l + 1) * c];
            for row in slab.chunks(c) {
                for (o, &v) in out.iter_mut().zip(row) {
                    *o = *o + v;
                }
            }
            for o in out.iter_mut() {
                *o = *o / sf;
            }
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(shape.len() - 2);
        let value = Tensor::from_vec(&shape, data)?;
        let rg = self.needs(x);
        Ok(self.push(Op::MeanTokens(x), value, Aux::None, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let value = self.value(x).reshape(shape)?;
        let rg = self.needs(x);
        Ok(self.push(Op::Reshape(x), value, Aux::None, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let total = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.needs(x);
        self.push(Op::Sum(x), Tensor::scalar(total), Aux::None, rg)
    }

    /// Permute elements within each trailing slab (the last `in_slab_rank`
    /// axes); `index[i]` is the source position of output element `i` and
    /// must be a bijection.
    pub fn remap(
        &mut self,
        x: NodeId,
        index: Vec<usize>,
        in_slab_rank: usize,
        out_slab_shape: &[usize],
    ) -> Result<NodeId> {
        let xv = self.value(x);
        let value = xv.remap_slab(in_slab_rank, &index, out_slab_shape)?;
        let slab_in = xv.shape()[xv.rank() - in_slab_rank..].iter().product();
        let rg = self.needs(x);
        Ok(self.push(Op::Remap { x, index, slab_in }, value, Aux::None, rg))
    }

    /// Mean over the batch of soft-target cross-entropy under softmax.
    /// Every target row must sum to 1 within 1e-6.
    pub fn softmax_xent(&mut self, logits: NodeId, targets: Tensor<T>) -> Result<NodeId> {
        let lv = self.value(logits);
        if lv.rank() != 2 || lv.shape() != targets.shape() {
            return Err(Error::shape("softmax_xent", lv.shape(), targets.shape()));
        }
        let (b, k) = (lv.shape()[0], lv.shape()[1]);
        for (r, row) in targets.data().chunks(k).enumerate() {
            let s: f64 = row.iter().map(|v| v.as_f64()).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::Contract(format!(
                    "softmax_xent target row {r} sums to {s}, expected 1"
                )));
            }
        }
        let mut probs = vec![T::zero(); b * k];
        let mut total = T::zero();
        for r in 0..b {
            let row = &lv.data()[r * k..(r + 1) * k];
            let max = row.iter().copied().fold(row[0], T::max);
            let mut z = T::zero();
            for j in 0..k {
                let e = (row[j] - max).exp();
                probs[r * k + j] = e;
                z = z + e;
            }
            let lse = max + z.ln();
            for j in 0..k {
                probs[r * k + j] = probs[r * k + j] / z;
            }
            let trow = &targets.data()[r * k..(r + 1) * k];
            for j in 0..k {
                total = total + trow[j] * (lse - row[j]);
            }
        }
        let loss = total / T::of_f64(b as f64);
        let rg = self.needs(logits);
        let probs = Tensor::from_vec(&[b, k], probs)?;
        Ok(self.push(
            Op::SoftmaxXent { logits, targets },
            Tensor::scalar(loss),
            Aux::Probs(probs),
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss node. Returns one gradient tensor per
    /// contributing node; trainable leaves are addressable by name.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(self.value(loss).shape(), T::one()));

        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.accumulate_inputs(NodeId(id), &g, &mut grads)?;
            grads[id] = Some(g);
        }
        Ok(Gradients {
            grads,
            named: self.named.clone(),
        })
    }

    fn accumulate_into(
        &self,
        target: NodeId,
        delta: Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) {
        if !self.needs(target) {
            return;
        }
        match &mut grads[target.0] {
            Some(acc) => {
                debug_assert_eq!(acc.shape(), delta.shape());
                for (a, &d) in acc.data_mut().iter_mut().zip(delta.data()) {
                    *a = *a + d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    fn accumulate_inputs(
        &self,
        id: NodeId,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        let node = &self.nodes[id.0];
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = bv.shape()[0];
                let n = bv.shape()[1];
                let m = av.numel() / k;
                if self.needs(*a) {
                    // dA = dC . B^T
                    let bt = bv.transpose2()?;
                    let mut da = vec![T::zero(); m * k];
                    gemm::gemm(m, n, k, g.data(), bt.data(), &mut da);
                    self.accumulate_into(*a, Tensor::from_vec(av.shape(), da)?, grads);
                }
                if self.needs(*b) {
                    // dB = A^T . dC, with A flattened to [m, k]
                    let a2 = av.reshape(&[m, k])?.transpose2()?;
                    let mut db = vec![T::zero(); k * n];
                    gemm::gemm(k, m, n, a2.data(), g.data(), &mut db);
                    self.accumulate_into(*b, Tensor::from_vec(bv.shape(), db)?, grads);
                }
            }
            Op::Bmm(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (gr, k, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
                let lead = av.numel() / (gr * k);
                if self.needs(*a) {
                    // da[β,g,:] = dout[β,g,:] . b[g]^T
                    let bt = bv.transpose2()?; // [G, n, k]
                    let mut da = vec![T::zero(); lead * gr * k];
                    gemm::bmm(lead, gr, n, k, g.data(), bt.data(), &mut da);
                    self.accumulate_into(*a, Tensor::from_vec(av.shape(), da)?, grads);
                }
                if self.needs(*b) {
                    // db[g,p,j] = sum_β a[β,g,p] * dout[β,g,j]
                    let mut db = vec![T::zero(); gr * k * n];
                    for beta in 0..lead {
                        for gi in 0..gr {
                            let arow = &av.data()[(beta * gr + gi) * k..][..k];
                            let grow = &g.data()[(beta * gr + gi) * n..][..n];
                            let dmat = &mut db[gi * k * n..(gi + 1) * k * n];
                            for (p, &ap) in arow.iter().enumerate() {
                                let drow = &mut dmat[p * n..(p + 1) * n];
                                for (d, &gv) in drow.iter_mut().zip(grow) {
                                    *d = *d + ap * gv;
                                }
                            }
                        }
                    }
                    self.accumulate_into(*b, Tensor::from_vec(bv.shape(), db)?, grads);
                }
            }
            Op::Transpose(x) => {
                self.accumulate_into(*x, g.transpose2()?, grads);
            }
            Op::Add(a, b) => {
                self.accumulate_into(*a, g.clone(), grads);
                self.accumulate_into(*b, g.clone(), grads);
            }
            Op::AddBias { x, bias } => {
                self.accumulate_into(*x, g.clone(), grads);
                if self.needs(*bias) {
                    let bv = self.value(*bias);
                    let slab = bv.numel();
                    let mut db = vec![T::zero(); slab];
                    for chunk in g.data().chunks(slab) {
                        for (d, &gv) in db.iter_mut().zip(chunk) {
                            *d = *d + gv;
                        }
                    }
                    self.accumulate_into(*bias, Tensor::from_vec(bv.shape(), db)?, grads);
                }
            }
            Op::MulMask { x, mask } => {
                let data = g
                    .data()
                    .iter()
                    .zip(mask.data())
                    .map(|(&gv, &m)| gv * m)
                    .collect();
                self.accumulate_into(*x, Tensor::from_vec(g.shape(), data)?, grads);
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let data = g
                    .data()
                    .iter()
                    .zip(xv.data())
                    .map(|(&gv, &v)| gv * gelu_grad_scalar(v))
                    .collect();
                self.accumulate_into(*x, Tensor::from_vec(xv.shape(), data)?, grads);
            }
            Op::LayerNorm { x, gamma, beta } => {
                let (xv, gv) = (self.value(*x), self.value(*gamma));
                let c = *xv.shape().last().unwrap();
                let rows = xv.numel() / c;
                let Aux::RowStats { mean, rstd } = &node.aux else {
                    unreachable!("layer_norm saves row stats");
                };
                let nf = T::of_f64(c as f64);
                let mut dx = vec![T::zero(); xv.numel()];
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..rows {
                    let xrow = &xv.data()[r * c..(r + 1) * c];
                    let grow = &g.data()[r * c..(r + 1) * c];
                    let (mu, rs) = (mean[r], rstd[r]);
                    // xhat and the two row means the gradient needs
                    let mut sum_gg = T::zero();
                    let mut sum_ggx = T::zero();
                    for j in 0..c {
                        let xhat = (xrow[j] - mu) * rs;
                        let gg = grow[j] * gv.data()[j];
                        sum_gg = sum_gg + gg;
                        sum_ggx = sum_ggx + gg * xhat;
                        dgamma[j] = dgamma[j] + grow[j] * xhat;
                        dbeta[j] = dbeta[j] + grow[j];
                    }
                    let mean_gg = sum_gg / nf;
                    let mean_ggx = sum_ggx / nf;
                    let out = &mut dx[r * c..(r + 1) * c];
                    for j in 0..c {
                        let xhat = (xrow[j] - mu) * rs;
                        let gg = grow[j] * gv.data()[j];
                        out[j] = rs * (gg - mean_gg - xhat * mean_ggx);
                    }
                }
                self.accumulate_into(*x, Tensor::from_vec(xv.shape(), dx)?, grads);
                self.accumulate_into(*gamma, Tensor::from_vec(&[c], dgamma)?, grads);
                self.accumulate_into(*beta, Tensor::from_vec(&[c], dbeta)?, grads);
            }
            Op::MeanTokens(x) => {
                let xv = self.value(*x);
                let (lead, s, c) = xv.leading_rows_cols()?;
                let sf = T::of_f64(s as f64);
                let mut dx = vec![T::zero(); xv.numel()];
                for l in 0..lead {
                    let grow = &g.data()[l * c..(l + 1) * c];
                    let slab = &mut dx[l * s * c..(l + 1) * s * c];
                    for row in slab.chunks_mut(c) {
                        for (d, &gv) in row.iter_mut().zip(grow) {
                            *d = gv / sf;
                        }
                    }
                }
                self.accumulate_into(*x, Tensor::from_vec(xv.shape(), dx)?, grads);
            }
            Op::Reshape(x) => {
                let xv = self.value(*x);
                self.accumulate_into(*x, g.reshape(xv.shape())?, grads);
            }
            Op::Sum(x) => {
                let xv = self.value(*x);
                self.accumulate_into(*x, Tensor::filled(xv.shape(), g.item()), grads);
            }
            Op::Remap { x, index, slab_in } => {
                let xv = self.value(*x);
                let slab_out = index.len();
                let lead = xv.numel() / slab_in;
                let mut dx = vec![T::zero(); xv.numel()];
                for l in 0..lead {
                    let gslab = &g.data()[l * slab_out..(l + 1) * slab_out];
                    let dslab = &mut dx[l * slab_in..(l + 1) * slab_in];
                    for (i, &src) in index.iter().enumerate() {
                        dslab[src] = dslab[src] + gslab[i];
                    }
                }
                self.accumulate_into(*x, Tensor::from_vec(xv.shape(), dx)?, grads);
            }
            Op::SoftmaxXent { logits, targets } => {
                let Aux::Probs(probs) = &node.aux else {
                    unreachable!("softmax_xent saves probabilities");
                };
                let b = probs.shape()[0];
                let scale = g.item() / T::of_f64(b as f64);
                let data = probs
                    .data()
                    .iter()
                    .zip(targets.data())
                    .map(|(&p, &t)| (p - t) * scale)
                    .collect();
                self.accumulate_into(*logits, Tensor::from_vec(probs.shape(), data)?, grads);
            }
        }
        Ok(())
    }
}

#[inline]
fn gelu_scalar<T: Scalar>(x: T) -> T {
    x * gauss_cdf(x)
}

#[inline]
fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    gauss_cdf(x) + x * gauss_pdf(x)
}

#[inline]
fn gauss_cdf<T: Scalar>(x: T) -> T {
    let half = T::of_f64(0.5);
    half * (T::one() + (x * T::of_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

#[inline]
fn gauss_pdf<T: Scalar>(x: T) -> T {
    T::of_f64(0.398_942_280_401_432_7) * (-(x * x) * T::of_f64(0.5)).exp()
}
