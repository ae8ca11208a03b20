use crate::error::{Error, Result};

use super::Tensor;

/// `(left, right)` zero padding that keeps length under stride 1. Even kernels
/// put the extra zero on the right.
pub fn same_padding(kernel: usize) -> (usize, usize) {
    let total = kernel.saturating_sub(1);
    let left = total / 2;
    (left, total - left)
}

pub(crate) fn conv_out_len(len: usize, kernel: usize, stride: usize, left: usize, right: usize) -> Option<usize> {
    let padded = len + left + right;
    if kernel == 0 || stride == 0 || kernel > padded {
        None
    } else {
        Some((padded - kernel) / stride + 1)
    }
}

/// Splits `[.., C, L]` into `(rows, C, L)`.
fn channels_and_len(t: &Tensor, op: &'static str) -> Result<(usize, usize, usize)> {
    if t.rank() < 2 {
        return Err(Error::shape(op, format!("expected [.., C, L], got {:?}", t.shape())));
    }
    let l = t.dim_from_end(0);
    let c = t.dim_from_end(1);
    let rows = t.shape()[..t.rank() - 2].iter().product();
    Ok((rows, c, l))
}

fn with_last_two(t: &Tensor, c: usize, l: usize) -> Vec<usize> {
    let mut shape = t.shape()[..t.rank() - 2].to_vec();
    shape.push(c);
    shape.push(l);
    shape
}

/// Accumulates one depthwise row: `out[o] += sum_j w[j] * x[o*stride + j - left]`.
fn dw_row(x: &[f64], w: &[f64], stride: usize, left: usize, out: &mut [f64]) {
    let n_in = x.len() as isize;
    if stride == 1 {
        for (j, &wj) in w.iter().enumerate() {
            let shift = j as isize - left as isize;
            let start = (-shift).max(0) as usize;
            let end = ((n_in - shift).max(0) as usize).min(out.len());
            if start >= end {
                continue;
            }
            let src = &x[(start as isize + shift) as usize..(end as isize + shift) as usize];
            for (o, &xv) in out[start..end].iter_mut().zip(src) {
                *o += wj * xv;
            }
        }
    } else {
        for (o, out_v) in out.iter_mut().enumerate() {
            let base = (o * stride) as isize - left as isize;
            let mut acc = 0.0;
            for (j, &wj) in w.iter().enumerate() {
                let i = base + j as isize;
                if i >= 0 && i < n_in {
                    acc += wj * x[i as usize];
                }
            }
            *out_v += acc;
        }
    }
}

/// Gradient of [`dw_row`] with respect to its input and kernel.
fn dw_row_backward(
    x: &[f64],
    w: &[f64],
    dy: &[f64],
    stride: usize,
    left: usize,
    dx: &mut [f64],
    dw: &mut [f64],
) {
    let n_in = x.len() as isize;
    if stride == 1 {
        for (j, &wj) in w.iter().enumerate() {
            let shift = j as isize - left as isize;
            let start = (-shift).max(0) as usize;
            let end = ((n_in - shift).max(0) as usize).min(dy.len());
            if start >= end {
                continue;
            }
            let lo = (start as isize + shift) as usize;
            let hi = (end as isize + shift) as usize;
            let g = &dy[start..end];
            let mut acc = 0.0;
            for ((dxv, &xv), &gv) in dx[lo..hi].iter_mut().zip(&x[lo..hi]).zip(g) {
                *dxv += wj * gv;
                acc += gv * xv;
            }
            dw[j] += acc;
        }
    } else {
        for (o, &g) in dy.iter().enumerate() {
            let base = (o * stride) as isize - left as isize;
            for (j, &wj) in w.iter().enumerate() {
                let i = base + j as isize;
                if i >= 0 && i < n_in {
                    dx[i as usize] += wj * g;
                    dw[j] += g * x[i as usize];
                }
            }
        }
    }
}

/// Depthwise 1D cross-correlation of `input: [.., C, L]` with `kernel: [C, k]`.
///
/// The same `C x k` kernel is applied to every leading row (variables and batch).
/// With `same_pad` the input is zero padded by [`same_padding`].
pub fn dwconv1d(input: &Tensor, kernel: &Tensor, stride: usize, same_pad: bool) -> Result<Tensor> {
    let k = kernel.shape().get(1).copied().unwrap_or(0);
    let (left, right) = if same_pad { same_padding(k) } else { (0, 0) };
    dwconv1d_padded(input, kernel, stride, left, right)
}

pub fn dwconv1d_padded(
    input: &Tensor,
    kernel: &Tensor,
    stride: usize,
    left: usize,
    right: usize,
) -> Result<Tensor> {
    let (rows, c, l) = channels_and_len(input, "dwconv1d")?;
    if kernel.rank() != 2 || kernel.shape()[0] != c {
        return Err(Error::shape(
            "dwconv1d",
            format!("kernel {:?} does not match {} input channels", kernel.shape(), c),
        ));
    }
    let k = kernel.shape()[1];
    if stride == 0 {
        return Err(Error::InvalidArgument("dwconv1d stride must be >= 1".into()));
    }
    let out_len = conv_out_len(l, k, stride, left, right).ok_or_else(|| {
        Error::shape(
            "dwconv1d",
            format!("kernel {} longer than padded length {}", k, l + left + right),
        )
    })?;
    let mut out = vec![0.0; rows * c * out_len];
    let x = input.data();
    let w = kernel.data();
    for r in 0..rows {
        for ch in 0..c {
            let xi = &x[(r * c + ch) * l..(r * c + ch + 1) * l];
            let oi = &mut out[(r * c + ch) * out_len..(r * c + ch + 1) * out_len];
            dw_row(xi, &w[ch * k..(ch + 1) * k], stride, left, oi);
        }
    }
    Tensor::new(with_last_two(input, c, out_len), out)
}

pub(crate) fn dwconv1d_backward(
    input: &Tensor,
    kernel: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    left: usize,
) -> (Tensor, Tensor) {
    let l = input.dim_from_end(0);
    let c = input.dim_from_end(1);
    let rows = input.len() / (c * l).max(1);
    let k = kernel.shape()[1];
    let out_len = grad_out.dim_from_end(0);
    let mut dx = vec![0.0; input.len()];
    let mut dw = vec![0.0; kernel.len()];
    let (x, w, dy) = (input.data(), kernel.data(), grad_out.data());
    for r in 0..rows {
        for ch in 0..c {
            let span = (r * c + ch) * l..(r * c + ch + 1) * l;
            dw_row_backward(
                &x[span.clone()],
                &w[ch * k..(ch + 1) * k],
                &dy[(r * c + ch) * out_len..(r * c + ch + 1) * out_len],
                stride,
                left,
                &mut dx[span],
                &mut dw[ch * k..(ch + 1) * k],
            );
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dx).expect("shape preserved"),
        Tensor::new(kernel.shape().to_vec(), dw).expect("shape preserved"),
    )
}

/// Full 1D convolution: `input: [.., Cin, L]`, `weight: [Cout, Cin, k]`, optional `bias: [Cout]`.
pub fn conv1d(
    input: &Tensor,
    weight: &Tensor,
    bias: Option<&Tensor>,
    stride: usize,
    left: usize,
    right: usize,
) -> Result<Tensor> {
    let (rows, cin, l) = channels_and_len(input, "conv1d")?;
    if weight.rank() != 3 || weight.shape()[1] != cin {
        return Err(Error::shape(
            "conv1d",
            format!("weight {:?} does not match {} input channels", weight.shape(), cin),
        ));
    }
    let (cout, k) = (weight.shape()[0], weight.shape()[2]);
    if let Some(b) = bias {
        if b.shape() != [cout] {
            return Err(Error::shape("conv1d", format!("bias {:?}, expected [{}]", b.shape(), cout)));
        }
    }
    let out_len = conv_out_len(l, k, stride, left, right).ok_or_else(|| {
        Error::shape("conv1d", format!("kernel {} longer than padded length {}", k, l + left + right))
    })?;
    let mut out = vec![0.0; rows * cout * out_len];
    let (x, w) = (input.data(), weight.data());
    for r in 0..rows {
        for co in 0..cout {
            let o = &mut out[(r * cout + co) * out_len..(r * cout + co + 1) * out_len];
            if let Some(b) = bias {
                o.fill(b.data()[co]);
            }
            for ci in 0..cin {
                let xi = &x[(r * cin + ci) * l..(r * cin + ci + 1) * l];
                let wk = &w[(co * cin + ci) * k..(co * cin + ci + 1) * k];
                dw_row(xi, wk, stride, left, o);
            }
        }
    }
    Tensor::new(with_last_two(input, cout, out_len), out)
}

/// Returns `(d_input, d_weight, d_bias)`.
pub(crate) fn conv1d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    stride: usize,
    left: usize,
) -> (Tensor, Tensor, Tensor) {
    let l = input.dim_from_end(0);
    let cin = input.dim_from_end(1);
    let rows = input.len() / (cin * l).max(1);
    let (cout, k) = (weight.shape()[0], weight.shape()[2]);
    let out_len = grad_out.dim_from_end(0);
    let mut dx = vec![0.0; input.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; cout];
    let (x, w, dy) = (input.data(), weight.data(), grad_out.data());
    for r in 0..rows {
        for co in 0..cout {
            let g = &dy[(r * cout + co) * out_len..(r * cout + co + 1) * out_len];
            db[co] += g.iter().sum::<f64>();
            for ci in 0..cin {
                let span = (r * cin + ci) * l..(r * cin + ci + 1) * l;
                let wspan = (co * cin + ci) * k..(co * cin + ci + 1) * k;
                dw_row_backward(
                    &x[span.clone()],
                    &w[wspan.clone()],
                    g,
                    stride,
                    left,
                    &mut dx[span],
                    &mut dw[wspan],
                );
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dx).expect("shape preserved"),
        Tensor::new(weight.shape().to_vec(), dw).expect("shape preserved"),
        Tensor::new([cout], db).expect("shape preserved"),
    )
}

/// Pointwise (1x1) convolution mixing channels at each temporal position.
pub fn pwconv1d(input: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let (rows, cin, l) = channels_and_len(input, "pwconv1d")?;
    if weight.rank() != 2 || weight.shape()[1] != cin {
        return Err(Error::shape(
            "pwconv1d",
            format!("weight {:?} does not match {} input channels", weight.shape(), cin),
        ));
    }
    let cout = weight.shape()[0];
    if bias.shape() != [cout] {
        return Err(Error::shape("pwconv1d", format!("bias {:?}, expected [{}]", bias.shape(), cout)));
    }
    let mut out = vec![0.0; rows * cout * l];
    let (x, w, b) = (input.data(), weight.data(), bias.data());
    for r in 0..rows {
        let xr = &x[r * cin * l..(r + 1) * cin * l];
        for co in 0..cout {
            let o = &mut out[(r * cout + co) * l..(r * cout + co + 1) * l];
            o.fill(b[co]);
            for ci in 0..cin {
                let wv = w[co * cin + ci];
                for (ov, &xv) in o.iter_mut().zip(&xr[ci * l..(ci + 1) * l]) {
                    *ov += wv * xv;
                }
            }
        }
    }
    Tensor::new(with_last_two(input, cout, l), out)
}

pub(crate) fn pwconv1d_backward(
    input: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let l = input.dim_from_end(0);
    let cin = input.dim_from_end(1);
    let rows = input.len() / (cin * l).max(1);
    let cout = weight.shape()[0];
    let mut dx = vec![0.0; input.len()];
    let mut dw = vec![0.0; weight.len()];
    let mut db = vec![0.0; cout];
    let (x, w, dy) = (input.data(), weight.data(), grad_out.data());
    for r in 0..rows {
        let xr = &x[r * cin * l..(r + 1) * cin * l];
        let dxr = &mut dx[r * cin * l..(r + 1) * cin * l];
        for co in 0..cout {
            let g = &dy[(r * cout + co) * l..(r * cout + co + 1) * l];
            db[co] += g.iter().sum::<f64>();
            for ci in 0..cin {
                let wv = w[co * cin + ci];
                let xs = &xr[ci * l..(ci + 1) * l];
                let mut acc = 0.0;
                for ((dxv, &xv), &gv) in dxr[ci * l..(ci + 1) * l].iter_mut().zip(xs).zip(g) {
                    *dxv += wv * gv;
                    acc += gv * xv;
                }
                dw[co * cin + ci] += acc;
            }
        }
    }
    (
        Tensor::new(input.shape().to_vec(), dx).expect("shape preserved"),
        Tensor::new(weight.shape().to_vec(), dw).expect("shape preserved"),
        Tensor::new([cout], db).expect("shape preserved"),
    )
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

/// Softmax over the last axis, stabilised by subtracting the row maximum.
pub fn softmax_rows(input: &Tensor) -> Tensor {
    let mut out = input.clone();
    if input.rank() == 0 {
        out.data_mut()[0] = 1.0;
        return out;
    }
    let n = input.dim_from_end(0);
    if n > 0 {
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
    }
    out
}

pub(crate) struct LayerNormSaved {
    pub normalized: Tensor,
    /// `1/sqrt(var + eps)` per `(row, l)`.
    pub inv_std: Vec<f64>,
}

/// Layer normalisation across the channel axis at every `(row, l)` position.
pub fn layernorm_channels(input: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    layernorm_forward(input, gamma, beta, eps).map(|(y, _)| y)
}

pub(crate) fn layernorm_forward(
    input: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    eps: f64,
) -> Result<(Tensor, LayerNormSaved)> {
    let (rows, c, l) = channels_and_len(input, "layernorm_channels")?;
    if gamma.shape() != [c] || beta.shape() != [c] {
        return Err(Error::shape(
            "layernorm_channels",
            format!("gamma {:?} / beta {:?} for {} channels", gamma.shape(), beta.shape(), c),
        ));
    }
    let x = input.data();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    let mut inv_std = vec![0.0; rows * l];
    let inv_c = 1.0 / c as f64;
    let mut mean = vec![0.0; l];
    let mut var = vec![0.0; l];
    for r in 0..rows {
        let xr = &x[r * c * l..(r + 1) * c * l];
        mean.fill(0.0);
        var.fill(0.0);
        for ch in 0..c {
            for (m, &v) in mean.iter_mut().zip(&xr[ch * l..(ch + 1) * l]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m *= inv_c);
        for ch in 0..c {
            for ((s, &v), &m) in var.iter_mut().zip(&xr[ch * l..(ch + 1) * l]).zip(&mean) {
                let d = v - m;
                *s += d * d;
            }
        }
        let is = &mut inv_std[r * l..(r + 1) * l];
        for (i, s) in is.iter_mut().zip(&var) {
            *i = 1.0 / (s * inv_c + eps).sqrt();
        }
        for ch in 0..c {
            let (g, b) = (gamma.data()[ch], beta.data()[ch]);
            let span = (r * c + ch) * l..(r * c + ch + 1) * l;
            for (((xh, o), &v), (&m, &s)) in xhat[span.clone()]
                .iter_mut()
                .zip(&mut out[span.clone()])
                .zip(&x[span])
                .zip(mean.iter().zip(is.iter()))
            {
                *xh = (v - m) * s;
                *o = g * *xh + b;
            }
        }
    }
    let normalized = Tensor::new(input.shape().to_vec(), xhat)?;
    Ok((
        Tensor::new(input.shape().to_vec(), out)?,
        LayerNormSaved { normalized, inv_std },
    ))
}

/// Returns `(d_input, d_gamma, d_beta)`.
pub(crate) fn layernorm_backward(
    saved: &LayerNormSaved,
    gamma: &Tensor,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let xhat = saved.normalized.data();
    let l = saved.normalized.dim_from_end(0);
    let c = saved.normalized.dim_from_end(1);
    let rows = xhat.len() / (c * l).max(1);
    let dy = grad_out.data();
    let mut dx = vec![0.0; xhat.len()];
    let mut dgamma = vec![0.0; c];
    let mut dbeta = vec![0.0; c];
    let inv_c = 1.0 / c as f64;
    let mut sum_d = vec![0.0; l];
    let mut sum_dx = vec![0.0; l];
    for r in 0..rows {
        sum_d.fill(0.0);
        sum_dx.fill(0.0);
        for ch in 0..c {
            let g = gamma.data()[ch];
            let span = (r * c + ch) * l..(r * c + ch + 1) * l;
            let mut dg = 0.0;
            let mut db = 0.0;
            for (i, (&d, &xh)) in dy[span.clone()].iter().zip(&xhat[span]).enumerate() {
                dg += d * xh;
                db += d;
                let dxh = d * g;
                sum_d[i] += dxh;
                sum_dx[i] += dxh * xh;
            }
            dgamma[ch] += dg;
            dbeta[ch] += db;
        }
        let is = &saved.inv_std[r * l..(r + 1) * l];
        for ch in 0..c {
            let g = gamma.data()[ch];
            let span = (r * c + ch) * l..(r * c + ch + 1) * l;
            for (i, ((dxv, &d), &xh)) in dx[span.clone()]
                .iter_mut()
                .zip(&dy[span.clone()])
                .zip(&xhat[span])
                .enumerate()
            {
                let dxh = d * g;
                *dxv = is[i] * (dxh - inv_c * sum_d[i] - xh * inv_c * sum_dx[i]);
            }
        }
    }
    (
        Tensor::new(saved.normalized.shape().to_vec(), dx).expect("shape preserved"),
        Tensor::new([c], dgamma).expect("shape preserved"),
        Tensor::new([c], dbeta).expect("shape preserved"),
    )
}

/// Exact (erf-based) GeLU.
pub fn gelu(input: &Tensor) -> Tensor {
    input.map(|x| 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)))
}

/// Derivative of [`gelu`]: `Phi(x) + x * phi(x)`.
pub fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    cdf + x * pdf
}

/// `[.., C, L] -> [.., C/r, L*r]` with `out[c', l*r + j] = in[c'*r + j, l]`.
pub fn pixel_shuffle_1d(input: &Tensor, r: usize) -> Result<Tensor> {
    let (rows, c, l) = channels_and_len(input, "pixel_shuffle_1d")?;
    if r == 0 || c % r != 0 {
        return Err(Error::shape(
            "pixel_shuffle_1d",
            format!("{} channels not divisible by ratio {}", c, r),
        ));
    }
    let cs = c / r;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for n in 0..rows {
        let base = n * c * l;
        for co in 0..cs {
            for li in 0..l {
                for j in 0..r {
                    out[base + co * l * r + li * r + j] = x[base + (co * r + j) * l + li];
                }
            }
        }
    }
    Tensor::new(with_last_two(input, cs, l * r), out)
}

/// Inverse of [`pixel_shuffle_1d`]: `[.., C, L] -> [.., C*r, L/r]`.
pub fn pixel_unshuffle_1d(input: &Tensor, r: usize) -> Result<Tensor> {
    let (rows, c, l) = channels_and_len(input, "pixel_unshuffle_1d")?;
    if r == 0 || l % r != 0 {
        return Err(Error::shape(
            "pixel_unshuffle_1d",
            format!("length {} not divisible by ratio {}", l, r),
        ));
    }
    let ls = l / r;
    let x = input.data();
    let mut out = vec![0.0; x.len()];
    for n in 0..rows {
        let base = n * c * l;
        for ci in 0..c {
            for li in 0..ls {
                for j in 0..r {
                    out[base + (ci * r + j) * ls + li] = x[base + ci * l + li * r + j];
                }
            }
        }
    }
    Tensor::new(with_last_two(input, c * r, ls), out)
}

#[derive(Debug, Clone)]
pub struct AttentionOutput {
    /// Same shape as the inputs, `[.., M, C, L]`.
    pub output: Tensor,
    /// Post-softmax weights, `[.., n_heads, M, M]`.
    pub weights: Tensor,
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn attention_dims(q: &Tensor, k: &Tensor, v: &Tensor, group: usize) -> Result<(usize, usize, usize, usize)> {
    if q.rank() < 3 || q.shape() != k.shape() || q.shape() != v.shape() {
        return Err(Error::shape(
            "chead_attention",
            format!("Q {:?}, K {:?}, V {:?}", q.shape(), k.shape(), v.shape()),
        ));
    }
    let l = q.dim_from_end(0);
    let c = q.dim_from_end(1);
    let m = q.dim_from_end(2);
    if group == 0 || c % group != 0 {
        return Err(Error::shape(
            "chead_attention",
            format!("{} channels not divisible by {} channels per head", c, group),
        ));
    }
    let batch = q.len() / (m * c * l).max(1);
    Ok((batch, m, c, l))
}

/// Attention across the variable axis with one head per group of `group` channels.
///
/// Inputs are `[.., M, C, L]`. For head `h` the feature vector of variable `m`
/// is channels `h*group..(h+1)*group` flattened over time, and scores are
/// scaled by `1/sqrt(group * L)`. `group == 1` binds one head to each channel.
pub fn chead_attention(q: &Tensor, k: &Tensor, v: &Tensor, group: usize) -> Result<AttentionOutput> {
    let (batch, m, c, l) = attention_dims(q, k, v, group)?;
    let heads = c / group;
    let feat = group * l;
    let scale = 1.0 / (feat as f64).sqrt();
    let mut out = vec![0.0; q.len()];
    let mut weights = vec![0.0; batch * heads * m * m];
    let (qd, kd, vd) = (q.data(), k.data(), v.data());
    let at = |n: usize, var: usize, h: usize| ((n * m + var) * c + h * group) * l;
    for n in 0..batch {
        for h in 0..heads {
            let a = &mut weights[(n * heads + h) * m * m..(n * heads + h + 1) * m * m];
            for i in 0..m {
                let qi = &qd[at(n, i, h)..at(n, i, h) + feat];
                let row = &mut a[i * m..(i + 1) * m];
                for (j, s) in row.iter_mut().enumerate() {
                    *s = scale * dot(qi, &kd[at(n, j, h)..at(n, j, h) + feat]);
                }
                softmax_in_place(row);
            }
            for i in 0..m {
                let oi = at(n, i, h);
                for j in 0..m {
                    let w = a[i * m + j];
                    let vj = &vd[at(n, j, h)..at(n, j, h) + feat];
                    for (o, &vv) in out[oi..oi + feat].iter_mut().zip(vj) {
                        *o += w * vv;
                    }
                }
            }
        }
    }
    let mut wshape = q.shape()[..q.rank() - 3].to_vec();
    wshape.extend([heads, m, m]);
    Ok(AttentionOutput {
        output: Tensor::new(q.shape().to_vec(), out)?,
        weights: Tensor::new(wshape, weights)?,
    })
}

/// Returns `(dQ, dK, dV)` given the saved post-softmax weights.
pub(crate) fn chead_attention_backward(
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
    weights: &Tensor,
    grad_out: &Tensor,
    group: usize,
) -> (Tensor, Tensor, Tensor) {
    let (batch, m, c, l) = attention_dims(q, k, v, group).expect("validated in forward");
    let heads = c / group;
    let feat = group * l;
    let scale = 1.0 / (feat as f64).sqrt();
    let (qd, kd, vd, ad, dy) = (q.data(), k.data(), v.data(), weights.data(), grad_out.data());
    let mut dq = vec![0.0; q.len()];
    let mut dk = vec![0.0; k.len()];
    let mut dv = vec![0.0; v.len()];
    let mut ds = vec![0.0; m * m];
    let at = |n: usize, var: usize, h: usize| ((n * m + var) * c + h * group) * l;
    for n in 0..batch {
        for h in 0..heads {
            let a = &ad[(n * heads + h) * m * m..(n * heads + h + 1) * m * m];
            for i in 0..m {
                let gi = &dy[at(n, i, h)..at(n, i, h) + feat];
                let mut row_dot = 0.0;
                for j in 0..m {
                    let vj = at(n, j, h);
                    let da = dot(gi, &vd[vj..vj + feat]);
                    ds[i * m + j] = da;
                    row_dot += a[i * m + j] * da;
                    let w = a[i * m + j];
                    for (d, &g) in dv[vj..vj + feat].iter_mut().zip(gi) {
                        *d += w * g;
                    }
                }
                for j in 0..m {
                    ds[i * m + j] = a[i * m + j] * (ds[i * m + j] - row_dot) * scale;
                }
            }
            for i in 0..m {
                let qi = at(n, i, h);
                for j in 0..m {
                    let kj = at(n, j, h);
                    let s = ds[i * m + j];
                    if s == 0.0 {
                        continue;
                    }
                    for t in 0..feat {
                        dq[qi + t] += s * kd[kj + t];
                        dk[kj + t] += s * qd[qi + t];
                    }
                }
            }
        }
    }
    let shape = q.shape().to_vec();
    (
        Tensor::new(shape.clone(), dq).expect("shape preserved"),
        Tensor::new(shape.clone(), dk).expect("shape preserved"),
        Tensor::new(shape, dv).expect("shape preserved"),
    )
}
