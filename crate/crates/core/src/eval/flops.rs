use serde::Serialize;

use crate::model::{ModelConfig, Upsampler};

/// One component's cost for a single `[M, T]` sample.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopRow {
    pub component: String,
    /// `2 x` multiply-accumulates of the weighted ops.
    pub flops: u64,
    pub params: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FlopReport {
    pub rows: Vec<FlopRow>,
    pub total_flops: u64,
    pub total_params: u64,
}

impl FlopReport {
    pub fn row(&self, component: &str) -> Option<&FlopRow> {
        self.rows.iter().find(|r| r.component == component)
    }

    /// Attention score plus attention-value FLOPs.
    pub fn attention_flops(&self) -> u64 {
        ["attention_scores", "attention_values"]
            .iter()
            .filter_map(|c| self.row(c))
            .map(|r| r.flops)
            .sum()
    }
}

/// Analytic per-sample cost by component.
///
/// Only weighted ops are counted (convolutions, attention products, dense
/// layers); elementwise work such as softmax, norms, GELU and residual adds is
/// not. Components are summed over all blocks.
pub fn count_flops_and_params(config: &ModelConfig) -> FlopReport {
    let m = config.num_vars as u64;
    let c = config.channels as u64;
    let t = config.seq_len as u64;
    let h = config.ffn_hidden() as u64;
    let lengths = config.lengths();
    let l0 = lengths.embed as u64;
    let inputs = config.embed_inputs() as u64;
    let k_embed = config.embed_kernel as u64;

    let mut rows: Vec<FlopRow> = Vec::new();
    let mut add = |name: &str, macs: u64, params: u64| {
        if let Some(r) = rows.iter_mut().find(|r| r.component == name) {
            r.flops += 2 * macs;
            r.params += params;
        } else {
            rows.push(FlopRow {
                component: name.to_string(),
                flops: 2 * macs,
                params,
            });
        }
    };

    add("embedding", m * c * inputs * k_embed * l0, c * inputs * k_embed + c + m * c * l0);
    for (g, &len) in config.groups.iter().zip(&lengths.groups) {
        let l = len as u64;
        let (kl, ks) = (g.large_kernel as u64, g.small_kernel as u64);
        for _ in 0..g.num_blocks {
            add("qkv_dwconv", 3 * m * c * l * (kl + ks), 3 * c * (kl + ks));
            // n_h heads, each M x M dot products of length g*L: M^2 * C * L in total.
            let heads = config.num_heads() as u64;
            let feat = config.channels_per_head as u64 * l;
            add("attention_scores", heads * m * m * feat, 0);
            add("attention_values", heads * m * m * feat, 0);
            add("attn_out_pwconv", m * l * c * c, c * c + c);
            add("layernorm", 0, 4 * c);
            add("ffn", 2 * m * l * c * h, 2 * c * h + h + c);
        }
        if g.downsample_after {
            let out = len.div_ceil(2) as u64;
            add("downsample", m * c * out * 2, 2 * c);
        }
    }
    let lf = lengths.last as u64;
    match config.upsampler {
        Upsampler::PixelShuffle => {
            let shuffled = c / config.upsample_ratio().max(1) as u64;
            add("pixel_shuffle", 0, 0);
            add("upsampler_head", m * t * shuffled, shuffled + 1);
        }
        Upsampler::Linear => add("upsampler_head", m * t * c * lf, t * c * lf + t),
    }
    let total_flops = rows.iter().map(|r| r.flops).sum();
    let total_params = rows.iter().map(|r| r.params).sum();
    FlopReport {
        rows,
        total_flops,
        total_params,
    }
}
