use crate::error::{Error, Result};
use crate::tensor::ops::{
    chead_attention_backward, conv1d_backward, dwconv1d_backward, layernorm_backward,
    layernorm_forward, pwconv1d_backward, LayerNormSaved,
};
use crate::tensor::{self, Tensor};

use super::params::{ParamGrads, ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

enum Op {
    Leaf,
    Param(ParamId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Sum(NodeId),
    Reshape(NodeId),
    PadRight(NodeId, usize),
    Gelu(NodeId),
    DwConv {
        x: NodeId,
        k: NodeId,
        stride: usize,
        left: usize,
    },
    Conv1d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        left: usize,
    },
    PwConv {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        saved: LayerNormSaved,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        group: usize,
        weights: Tensor,
    },
    PixelShuffle(NodeId, usize),
    RowLinear {
        x: NodeId,
        w: NodeId,
        b: NodeId,
    },
    RowAffine {
        x: NodeId,
        scale: Vec<f64>,
    },
    MaskedSqErr {
        x: NodeId,
        target: Tensor,
        mask: Tensor,
        weight: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward computation.
///
/// Nodes are pushed in evaluation order, so inputs always precede their
/// consumers and a single reverse sweep visits every node once.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// A constant input; gradients stop here.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        let id = store
            .id(name)
            .ok_or_else(|| Error::Autodiff(format!("unknown parameter {name}")))?;
        Ok(self.param_by_id(store, id))
    }

    pub fn param_by_id(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        self.push(store.entry(id).value.clone(), Op::Param(id))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: NodeId, factor: f64) -> NodeId {
        let v = self.value(a).map(|x| x * factor);
        self.push(v, Op::Scale(a, factor))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let v = self.value(a).clone().reshape(shape.to_vec())?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// Appends `n` zeros to the last axis.
    pub fn pad_right(&mut self, a: NodeId, n: usize) -> NodeId {
        let x = self.value(a);
        let l = x.dim_from_end(0);
        let mut shape = x.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") += n;
        let mut data = Vec::with_capacity(x.len() / l.max(1) * (l + n));
        for row in x.data().chunks(l.max(1)) {
            data.extend_from_slice(row);
            data.extend(std::iter::repeat_n(0.0, n));
        }
        let v = Tensor::new(shape, data).expect("computed shape");
        self.push(v, Op::PadRight(a, n))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = tensor::gelu(self.value(a));
        self.push(v, Op::Gelu(a))
    }

    pub fn dwconv1d(&mut self, x: NodeId, k: NodeId, stride: usize, left: usize, right: usize) -> Result<NodeId> {
        let v = tensor::dwconv1d_padded(self.value(x), self.value(k), stride, left, right)?;
        Ok(self.push(v, Op::DwConv { x, k, stride, left }))
    }

    pub fn conv1d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        left: usize,
        right: usize,
    ) -> Result<NodeId> {
        let v = tensor::conv1d(
            self.value(x),
            self.value(w),
            b.map(|b| self.value(b)),
            stride,
            left,
            right,
        )?;
        Ok(self.push(v, Op::Conv1d { x, w, b, stride, left }))
    }

    pub fn pwconv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let v = tensor::pwconv1d(self.value(x), self.value(w), self.value(b))?;
        Ok(self.push(v, Op::PwConv { x, w, b }))
    }

    pub fn layernorm_channels(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let (v, saved) = layernorm_forward(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(v, Op::LayerNorm { x, gamma, beta, saved }))
    }

    /// Returns the attention output node and the post-softmax weights.
    pub fn chead_attention(&mut self, q: NodeId, k: NodeId, v: NodeId, group: usize) -> Result<(NodeId, Tensor)> {
        let out = tensor::chead_attention(self.value(q), self.value(k), self.value(v), group)?;
        let weights = out.weights.clone();
        let id = self.push(
            out.output,
            Op::Attention {
                q,
                k,
                v,
                group,
                weights: out.weights,
            },
        );
        Ok((id, weights))
    }

    pub fn pixel_shuffle_1d(&mut self, x: NodeId, r: usize) -> Result<NodeId> {
        let v = tensor::pixel_shuffle_1d(self.value(x), r)?;
        Ok(self.push(v, Op::PixelShuffle(x, r)))
    }

    /// `y[.., o] = sum_f w[o, f] * x[.., f] + b[o]` over the last axis.
    pub fn row_linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let f = xv.dim_from_end(0);
        if wv.rank() != 2 || wv.shape()[1] != f || bv.shape() != [wv.shape()[0]] {
            return Err(Error::shape(
                "row_linear",
                format!("x {:?}, w {:?}, b {:?}", xv.shape(), wv.shape(), bv.shape()),
            ));
        }
        let out_dim = wv.shape()[0];
        let mut data = Vec::with_capacity(xv.len() / f * out_dim);
        for row in xv.data().chunks(f) {
            for o in 0..out_dim {
                let wr = &wv.data()[o * f..(o + 1) * f];
                data.push(bv.data()[o] + wr.iter().zip(row).map(|(a, b)| a * b).sum::<f64>());
            }
        }
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().expect("rank >= 1") = out_dim;
        let v = Tensor::new(shape, data)?;
        Ok(self.push(v, Op::RowLinear { x, w, b }))
    }

    /// `y[r, :] = x[r, :] * scale[r] + shift[r]` for a `[R, N]` input; constants carry no gradient.
    pub fn row_affine(&mut self, x: NodeId, scale: &[f64], shift: &[f64]) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.rank() != 2 || xv.shape()[0] != scale.len() || scale.len() != shift.len() {
            return Err(Error::shape(
                "row_affine",
                format!("x {:?} with {} scales and {} shifts", xv.shape(), scale.len(), shift.len()),
            ));
        }
        let n = xv.shape()[1];
        let mut v = xv.clone();
        for (r, row) in v.data_mut().chunks_mut(n.max(1)).enumerate() {
            for e in row {
                *e = *e * scale[r] + shift[r];
            }
        }
        Ok(self.push(
            v,
            Op::RowAffine {
                x,
                scale: scale.to_vec(),
            },
        ))
    }

    /// `weight * sum_{mask = 1} (x - target)^2` as a scalar. Positions with
    /// `mask != 1` are never read, from either `x` or `target`.
    pub fn masked_sq_err(&mut self, x: NodeId, target: &Tensor, mask: &Tensor, weight: f64) -> Result<NodeId> {
        let xv = self.value(x);
        if xv.shape() != target.shape() || xv.shape() != mask.shape() {
            return Err(Error::shape(
                "masked_sq_err",
                format!("x {:?}, target {:?}, mask {:?}", xv.shape(), target.shape(), mask.shape()),
            ));
        }
        let mut acc = 0.0;
        for ((&p, &t), &m) in xv.data().iter().zip(target.data()).zip(mask.data()) {
            if m == 1.0 {
                let d = p - t;
                acc += d * d;
            }
        }
        let v = Tensor::scalar(weight * acc);
        Ok(self.push(
            v,
            Op::MaskedSqErr {
                x,
                target: target.clone(),
                mask: mask.clone(),
                weight,
            },
        ))
    }

    /// Reverse sweep from a scalar `loss`; returns gradients per parameter.
    pub fn gradients(&self, loss: NodeId, num_params: usize) -> Result<ParamGrads> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.rank() > 1 {
            return Err(Error::Autodiff(format!(
                "loss must be a scalar, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![1.0])?);
        let mut out = ParamGrads::new(num_params);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let mut send = |id: NodeId, d: Tensor| accumulate(&mut grads, id, d);
            match &node.op {
                Op::Leaf => {}
                Op::Param(p) => {
                    if p.0 >= num_params {
                        return Err(Error::Autodiff(format!("parameter index {} out of range", p.0)));
                    }
                    out.add(*p, &g);
                }
                Op::Add(a, b) => {
                    send(*a, g.clone());
                    send(*b, g);
                }
                Op::Mul(a, b) => {
                    let da = g.zip_map(self.value(*b), |x, y| x * y)?;
                    let db = g.zip_map(self.value(*a), |x, y| x * y)?;
                    send(*a, da);
                    send(*b, db);
                }
                Op::Scale(a, f) => send(*a, g.map(|x| x * f)),
                Op::Sum(a) => {
                    let s = g.item();
                    send(*a, Tensor::full(self.value(*a).shape().to_vec(), s));
                }
                Op::Reshape(a) => send(*a, g.reshape(self.value(*a).shape().to_vec())?),
                Op::PadRight(a, n) => {
                    let src = self.value(*a);
                    let l = src.dim_from_end(0);
                    let mut data = Vec::with_capacity(src.len());
                    for row in g.data().chunks(l + n) {
                        data.extend_from_slice(&row[..l]);
                    }
                    send(*a, Tensor::new(src.shape().to_vec(), data)?);
                }
                Op::Gelu(a) => {
                    let d = g.zip_map(self.value(*a), |gv, x| gv * tensor::gelu_grad(x))?;
                    send(*a, d);
                }
                Op::DwConv { x, k, stride, left } => {
                    let (dx, dk) = dwconv1d_backward(self.value(*x), self.value(*k), &g, *stride, *left);
                    send(*x, dx);
                    send(*k, dk);
                }
                Op::Conv1d { x, w, b, stride, left } => {
                    let (dx, dw, db) = conv1d_backward(self.value(*x), self.value(*w), &g, *stride, *left);
                    send(*x, dx);
                    send(*w, dw);
                    if let Some(b) = b {
                        send(*b, db);
                    }
                }
                Op::PwConv { x, w, b } => {
                    let (dx, dw, db) = pwconv1d_backward(self.value(*x), self.value(*w), &g);
                    send(*x, dx);
                    send(*w, dw);
                    send(*b, db);
                }
                Op::LayerNorm { x, gamma, beta, saved } => {
                    let (dx, dg, db) = layernorm_backward(saved, self.value(*gamma), &g);
                    send(*x, dx);
                    send(*gamma, dg);
                    send(*beta, db);
                }
                Op::Attention { q, k, v, group, weights } => {
                    let (dq, dk, dv) = chead_attention_backward(
                        self.value(*q),
                        self.value(*k),
                        self.value(*v),
                        weights,
                        &g,
                        *group,
                    );
                    send(*q, dq);
                    send(*k, dk);
                    send(*v, dv);
                }
                Op::PixelShuffle(a, r) => send(*a, tensor::pixel_unshuffle_1d(&g, *r)?),
                Op::RowLinear { x, w, b } => {
                    let (xv, wv) = (self.value(*x), self.value(*w));
                    let f = xv.dim_from_end(0);
                    let out_dim = wv.shape()[0];
                    let mut dx = vec![0.0; xv.len()];
                    let mut dw = vec![0.0; wv.len()];
                    let mut db = vec![0.0; out_dim];
                    for ((xr, gr), dxr) in xv.data().chunks(f).zip(g.data().chunks(out_dim)).zip(dx.chunks_mut(f)) {
                        for o in 0..out_dim {
                            let go = gr[o];
                            db[o] += go;
                            let wr = &wv.data()[o * f..(o + 1) * f];
                            for ((d, &w), (dwv, &xv)) in dxr
                                .iter_mut()
                                .zip(wr)
                                .zip(dw[o * f..(o + 1) * f].iter_mut().zip(xr))
                            {
                                *d += go * w;
                                *dwv += go * xv;
                            }
                        }
                    }
                    send(*x, Tensor::new(xv.shape().to_vec(), dx)?);
                    send(*w, Tensor::new(wv.shape().to_vec(), dw)?);
                    send(*b, Tensor::new([out_dim], db)?);
                }
                Op::RowAffine { x, scale } => {
                    let n = g.dim_from_end(0).max(1);
                    let mut d = g;
                    for (r, row) in d.data_mut().chunks_mut(n).enumerate() {
                        row.iter_mut().for_each(|e| *e *= scale[r]);
                    }
                    send(*x, d);
                }
                Op::MaskedSqErr { x, target, mask, weight } => {
                    let s = g.item() * weight;
                    let xv = self.value(*x);
                    let mut d = Tensor::zeros(xv.shape().to_vec());
                    for (((dv, &p), &t), &m) in d
                        .data_mut()
                        .iter_mut()
                        .zip(xv.data())
                        .zip(target.data())
                        .zip(mask.data())
                    {
                        if m == 1.0 {
                            *dv = 2.0 * s * (p - t);
                        }
                    }
                    send(*x, d);
                }
            }
        }
        Ok(out)
    }

    /// Runs [`Tape::gradients`] and adds the result into `store`'s grad buffers.
    pub fn backward(&self, loss: NodeId, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss, store.len())?;
        store.accumulate(&grads);
        Ok(())
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, d: Tensor) {
    match &mut grads[id.0] {
        Some(acc) => {
            for (a, b) in acc.data_mut().iter_mut().zip(d.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(d),
    }
}
