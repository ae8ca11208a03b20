//! Tape builders for each stage of the network. Every builder works on one
//! sample laid out as `[M, C, L]` (leading axes are treated as independent rows).

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::error::{Error, Result};
use crate::tensor::{same_padding, Tensor};

use super::config::Upsampler;

/// Epsilon inside the channel layer norms.
pub const LAYERNORM_EPS: f64 = 1e-5;

/// Padding that gives `ceil(len / stride)` outputs for a kernel of size `k`.
pub fn embed_padding(len: usize, kernel: usize, stride: usize) -> (usize, usize) {
    if stride == 1 {
        return same_padding(kernel);
    }
    let out = len.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(len);
    (total / 2, total - total / 2)
}

/// Stacks the normalised values (and the mask, when enabled) as input channels: `[M, in, T]`.
pub fn embed_input(x_norm: &Tensor, omega_eff: &Tensor, use_mask_channel: bool) -> Result<Tensor> {
    if x_norm.rank() != 2 || x_norm.shape() != omega_eff.shape() {
        return Err(Error::shape(
            "embed_input",
            format!("x {:?} vs mask {:?}", x_norm.shape(), omega_eff.shape()),
        ));
    }
    let (m, t) = (x_norm.shape()[0], x_norm.shape()[1]);
    let inputs = if use_mask_channel { 2 } else { 1 };
    let mut data = Vec::with_capacity(m * inputs * t);
    for v in 0..m {
        data.extend_from_slice(&x_norm.data()[v * t..(v + 1) * t]);
        if use_mask_channel {
            data.extend_from_slice(&omega_eff.data()[v * t..(v + 1) * t]);
        }
    }
    Tensor::new([m, inputs, t], data)
}

/// Shared conv over the stacked input plus the per-variable encoding `embed.var`.
pub fn embed(tape: &mut Tape, params: &ParamStore, input: NodeId, stride: usize) -> Result<NodeId> {
    let w = tape.param(params, "embed.weight")?;
    let b = tape.param(params, "embed.bias")?;
    let (k, len) = (tape.value(w).dim_from_end(0), tape.value(input).dim_from_end(0));
    let (left, right) = embed_padding(len, k, stride);
    let z = tape.conv1d(input, w, Some(b), stride, left, right)?;
    let e_var = tape.param(params, "embed.var")?;
    if tape.value(e_var).shape() != tape.value(z).shape() {
        return Err(Error::Dimension(format!(
            "embed.var has shape {:?} but the embedding is {:?} (M, C, L0)",
            tape.value(e_var).shape(),
            tape.value(z).shape()
        )));
    }
    tape.add(z, e_var)
}

/// Sum of a large and a small same-padded depthwise conv.
fn dual_dwconv(tape: &mut Tape, params: &ParamStore, z: NodeId, prefix: &str) -> Result<NodeId> {
    let large = tape.param(params, &format!("{prefix}.large"))?;
    let small = tape.param(params, &format!("{prefix}.small"))?;
    let len = tape.value(z).dim_from_end(0);
    for k in [large, small] {
        let size = tape.value(k).dim_from_end(0);
        if size > len {
            return Err(Error::shape(
                "qkv_project",
                format!("kernel {size} exceeds temporal length {len}"),
            ));
        }
    }
    let (ll, lr) = same_padding(tape.value(large).dim_from_end(0));
    let (sl, sr) = same_padding(tape.value(small).dim_from_end(0));
    let a = tape.dwconv1d(z, large, 1, ll, lr)?;
    let b = tape.dwconv1d(z, small, 1, sl, sr)?;
    tape.add(a, b)
}

/// Query, key and value projections for block `prefix`.
pub fn qkv_project(tape: &mut Tape, params: &ParamStore, z: NodeId, prefix: &str) -> Result<[NodeId; 3]> {
    Ok([
        dual_dwconv(tape, params, z, &format!("{prefix}.q"))?,
        dual_dwconv(tape, params, z, &format!("{prefix}.k"))?,
        dual_dwconv(tape, params, z, &format!("{prefix}.v"))?,
    ])
}

/// One block: attention sublayer then convolutional FFN, each `z + LN(f(z))`.
/// Returns the block output and the attention weights `[.., n_h, M, M]`.
pub fn t1_block(
    tape: &mut Tape,
    params: &ParamStore,
    z: NodeId,
    prefix: &str,
    channels_per_head: usize,
) -> Result<(NodeId, Tensor)> {
    let p = |tape: &mut Tape, name: &str| tape.param(params, &format!("{prefix}.{name}"));
    let [q, k, v] = qkv_project(tape, params, z, prefix)?;
    let (o, weights) = tape.chead_attention(q, k, v, channels_per_head)?;

    let (w, b) = (p(tape, "attn_out.weight")?, p(tape, "attn_out.bias")?);
    let proj = tape.pwconv1d(o, w, b)?;
    let (g, be) = (p(tape, "norm1.gamma")?, p(tape, "norm1.beta")?);
    let normed = tape.layernorm_channels(proj, g, be, LAYERNORM_EPS)?;
    let z_attn = tape.add(z, normed)?;

    let (w1, b1) = (p(tape, "ffn1.weight")?, p(tape, "ffn1.bias")?);
    let hidden = tape.pwconv1d(z_attn, w1, b1)?;
    let act = tape.gelu(hidden);
    let (w2, b2) = (p(tape, "ffn2.weight")?, p(tape, "ffn2.bias")?);
    let ffn = tape.pwconv1d(act, w2, b2)?;
    let (g2, be2) = (p(tape, "norm2.gamma")?, p(tape, "norm2.beta")?);
    let normed2 = tape.layernorm_channels(ffn, g2, be2, LAYERNORM_EPS)?;
    Ok((tape.add(z_attn, normed2)?, weights))
}

/// Stride-2 depthwise conv with kernel 2; odd lengths are zero-padded on the right first.
pub fn downsample(tape: &mut Tape, params: &ParamStore, z: NodeId, name: &str) -> Result<NodeId> {
    let kernel = tape.param(params, name)?;
    let len = tape.value(z).dim_from_end(0);
    let z = if len % 2 == 1 {
        log::debug!("odd length {len} padded to {} before downsampling", len + 1);
        tape.pad_right(z, 1)
    } else {
        z
    };
    tape.dwconv1d(z, kernel, 2, 0, 0)
}

/// Maps `[M, C, Lf]` to normalised predictions `[M, T]`.
pub fn reconstruct_norm(
    tape: &mut Tape,
    params: &ParamStore,
    z: NodeId,
    upsampler: Upsampler,
    seq_len: usize,
) -> Result<NodeId> {
    let shape = tape.value(z).shape().to_vec();
    let (m, c, lf) = (shape[0], shape[1], shape[2]);
    let w = tape.param(params, "head.weight")?;
    let b = tape.param(params, "head.bias")?;
    match upsampler {
        Upsampler::PixelShuffle => {
            if lf == 0 || seq_len % lf != 0 || c % (seq_len / lf) != 0 {
                return Err(Error::shape(
                    "reconstruct",
                    format!("cannot shuffle {c} channels at length {lf} to length {seq_len}"),
                ));
            }
            let shuffled = tape.pixel_shuffle_1d(z, seq_len / lf)?;
            let out = tape.pwconv1d(shuffled, w, b)?;
            tape.reshape(out, &[m, seq_len])
        }
        Upsampler::Linear => {
            let flat = tape.reshape(z, &[m, c * lf])?;
            tape.row_linear(flat, w, b)
        }
    }
}

/// Full reconstruction: upsample then undo the instance normalisation per variable.
pub fn reconstruct(
    tape: &mut Tape,
    params: &ParamStore,
    z: NodeId,
    upsampler: Upsampler,
    seq_len: usize,
    mu: &[f64],
    sigma: &[f64],
) -> Result<NodeId> {
    let norm = reconstruct_norm(tape, params, z, upsampler, seq_len)?;
    tape.row_affine(norm, sigma, mu)
}
