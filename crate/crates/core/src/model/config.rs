use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reference sequence length the default kernel sizes were chosen for.
pub const REFERENCE_SEQ_LEN: usize = 96;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGroup {
    pub num_blocks: usize,
    pub large_kernel: usize,
    pub small_kernel: usize,
    /// Halve the temporal length with a stride-2 depthwise conv after this group.
    pub downsample_after: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Upsampler {
    /// Parameter-free channel-to-time shuffle followed by a pointwise conv.
    PixelShuffle,
    /// Flatten `C x Lf` and map to `T` with a dense layer shared across variables.
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub channels: usize,
    pub groups: Vec<BlockGroup>,
    pub ffn_ratio: f64,
    pub channels_per_head: usize,
    pub embed_kernel: usize,
    pub embed_stride: usize,
    pub use_mask_channel: bool,
    pub upsampler: Upsampler,
    pub seq_len: usize,
    pub num_vars: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            channels: 128,
            groups: vec![
                BlockGroup {
                    num_blocks: 2,
                    large_kernel: 71,
                    small_kernel: 5,
                    downsample_after: true,
                },
                BlockGroup {
                    num_blocks: 2,
                    large_kernel: 31,
                    small_kernel: 5,
                    downsample_after: false,
                },
            ],
            ffn_ratio: 1.0,
            channels_per_head: 1,
            embed_kernel: 2,
            embed_stride: 1,
            use_mask_channel: true,
            upsampler: Upsampler::PixelShuffle,
            seq_len: REFERENCE_SEQ_LEN,
            num_vars: 7,
        }
    }
}

/// Temporal lengths through the network, derived from a config.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Lengths {
    /// Length after the embedding conv.
    pub embed: usize,
    /// Length each group operates at.
    pub groups: Vec<usize>,
    /// Length handed to the upsampler.
    pub last: usize,
}

impl ModelConfig {
    /// Standard configuration for `num_vars` variables at `seq_len`, with kernels scaled.
    pub fn standard(num_vars: usize, seq_len: usize) -> Result<Self> {
        let base = Self {
            num_vars,
            ..Self::default()
        };
        let (cfg, _) = scale_kernels(&base, seq_len)?;
        Ok(cfg)
    }

    pub fn num_heads(&self) -> usize {
        self.channels / self.channels_per_head.max(1)
    }

    pub fn ffn_hidden(&self) -> usize {
        (self.ffn_ratio * self.channels as f64).round() as usize
    }

    pub fn num_blocks(&self) -> usize {
        self.groups.iter().map(|g| g.num_blocks).sum()
    }

    pub fn embed_inputs(&self) -> usize {
        if self.use_mask_channel {
            2
        } else {
            1
        }
    }

    pub fn lengths(&self) -> Lengths {
        let embed = if self.embed_stride == 0 {
            0
        } else {
            (self.seq_len + self.embed_stride - 1) / self.embed_stride
        };
        let mut l = embed;
        let mut groups = Vec::with_capacity(self.groups.len());
        for g in &self.groups {
            groups.push(l);
            if g.downsample_after {
                l = l.div_ceil(2);
            }
        }
        Lengths {
            embed,
            groups,
            last: l,
        }
    }

    /// Upsampling ratio `T / Lf` (pixel-shuffle path).
    pub fn upsample_ratio(&self) -> usize {
        let last = self.lengths().last.max(1);
        self.seq_len / last
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::Config(msg));
        if self.num_vars == 0 || self.seq_len == 0 || self.channels == 0 {
            return fail(format!(
                "num_vars ({}), seq_len ({}) and channels ({}) must be positive",
                self.num_vars, self.seq_len, self.channels
            ));
        }
        if self.channels_per_head == 0 || self.channels % self.channels_per_head != 0 {
            return fail(format!(
                "channels ({}) must be divisible by channels_per_head ({})",
                self.channels, self.channels_per_head
            ));
        }
        if self.embed_kernel == 0 || self.embed_stride == 0 {
            return fail("embed_kernel and embed_stride must be >= 1".into());
        }
        if !(self.ffn_ratio.is_finite() && self.ffn_hidden() >= 1) {
            return fail(format!("ffn_ratio {} gives an empty hidden layer", self.ffn_ratio));
        }
        if self.groups.is_empty() || self.num_blocks() == 0 {
            return fail("at least one T1 block is required".into());
        }
        let lengths = self.lengths();
        for (i, (g, &l)) in self.groups.iter().zip(&lengths.groups).enumerate() {
            for (what, k) in [("large", g.large_kernel), ("small", g.small_kernel)] {
                if k == 0 || k > l {
                    return fail(format!(
                        "group {i}: {what} kernel {k} must be in 1..={l} (temporal length at this stage)"
                    ));
                }
            }
            if g.downsample_after && l < 2 {
                return fail(format!("group {i}: cannot downsample length {l}"));
            }
        }
        if self.upsampler == Upsampler::PixelShuffle {
            let last = lengths.last;
            if self.seq_len % last != 0 {
                return fail(format!(
                    "pixel shuffle needs seq_len ({}) divisible by final length ({last})",
                    self.seq_len
                ));
            }
            let r = self.seq_len / last;
            if self.channels % r != 0 {
                return fail(format!(
                    "pixel shuffle needs channels ({}) divisible by upsample ratio ({r})",
                    self.channels
                ));
            }
        }
        Ok(())
    }
}

/// Rescales the large kernels to a new sequence length with
/// `floor(new_len / 96 * k)`; small kernels are unchanged. Returns warnings for
/// kernels clamped up to 1.
pub fn scale_kernels(config: &ModelConfig, new_len: usize) -> Result<(ModelConfig, Vec<String>)> {
    if new_len < 8 {
        return Err(Error::Config(format!("sequence length {new_len} is below the minimum of 8")));
    }
    let mut out = config.clone();
    out.seq_len = new_len;
    let mut warnings = Vec::new();
    for (i, g) in out.groups.iter_mut().enumerate() {
        let scaled = new_len * g.large_kernel / REFERENCE_SEQ_LEN;
        if scaled < 1 {
            let msg = format!("group {i}: large kernel {} scaled to 0, clamped to 1", g.large_kernel);
            log::warn!("{msg}");
            warnings.push(msg);
        }
        g.large_kernel = scaled.max(1);
    }
    Ok((out, warnings))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn large_kernels(c: &ModelConfig) -> Vec<usize> {
        c.groups.iter().map(|g| g.large_kernel).collect()
    }

    #[test]
    fn kernel_scaling() {
        let base = ModelConfig::default();
        let (same, _) = scale_kernels(&base, 96).unwrap();
        assert_eq!(large_kernels(&same), [71, 31]);
        let (half, _) = scale_kernels(&base, 48).unwrap();
        assert_eq!(large_kernels(&half), [35, 15]);
        let (double, _) = scale_kernels(&base, 192).unwrap();
        assert_eq!(large_kernels(&double), [142, 62]);
        assert!(half.groups.iter().all(|g| g.small_kernel == 5));
        assert!(scale_kernels(&base, 7).is_err());

        let tiny_kernel = ModelConfig {
            groups: vec![BlockGroup {
                num_blocks: 1,
                large_kernel: 3,
                small_kernel: 1,
                downsample_after: false,
            }],
            ..ModelConfig::default()
        };
        let (clamped, warnings) = scale_kernels(&tiny_kernel, 8).unwrap();
        assert_eq!(large_kernels(&clamped), [1]);
        assert_eq!(warnings.len(), 1);
    }

    #[test]
    fn default_lengths() {
        let c = ModelConfig::default();
        c.validate().unwrap();
        let l = c.lengths();
        assert_eq!(l.embed, 96);
        assert_eq!(l.groups, [96, 48]);
        assert_eq!(l.last, 48);
        assert_eq!(c.upsample_ratio(), 2);
        assert_eq!(c.num_heads(), 128);
    }

    #[test]
    fn validation_failures() {
        let bad_heads = ModelConfig {
            channels_per_head: 3,
            ..ModelConfig::default()
        };
        assert!(bad_heads.validate().is_err());
        let odd_channels = ModelConfig {
            channels: 9,
            channels_per_head: 1,
            ..ModelConfig::default()
        };
        assert!(odd_channels.validate().is_err());
        let linear_ok = ModelConfig {
            upsampler: Upsampler::Linear,
            ..odd_channels
        };
        linear_ok.validate().unwrap();
        let short = ModelConfig {
            seq_len: 40,
            ..ModelConfig::default()
        };
        assert!(short.validate().is_err());
    }
}
