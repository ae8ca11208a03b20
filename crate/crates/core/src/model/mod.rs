//! The imputation network: masked instance norm, mask-aware embedding, stacked
//! blocks with channel-bound attention across variables, downsampling and a
//! reconstruction upsampler.

pub mod checkpoint;
pub mod config;
pub mod layers;
pub mod norm;

pub use checkpoint::{load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use config::{scale_kernels, BlockGroup, Lengths, ModelConfig, Upsampler, REFERENCE_SEQ_LEN};
pub use norm::{denormalize, masked_instance_norm, NormStats, NORM_EPS};

use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::autodiff::{NodeId, ParamStore, Tape};
use crate::data::SeriesBatch;
use crate::error::{Error, Result};
use crate::rng::{domain, stream_rng, unit_f64};
use crate::tensor::Tensor;

/// Standard deviation of the per-variable encoding at init.
pub const VAR_EMBED_INIT_SD: f64 = 0.02;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Init {
    /// `uniform(-1/sqrt(fan_in), 1/sqrt(fan_in))`
    Uniform { fan_in: usize },
    Normal { sd: f64 },
    Constant(f64),
}

/// Name, shape and initialiser of one parameter tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

/// Block parameter prefix, e.g. `g0.b1`.
pub fn block_prefix(group: usize, block: usize) -> String {
    format!("g{group}.b{block}")
}

/// Attention maps and shapes recorded during a batched forward pass.
#[derive(Debug, Clone, Serialize)]
pub struct ForwardTrace {
    /// One `[B, n_h, M, M]` tensor per block, in execution order.
    pub attention: Vec<Tensor>,
    pub lengths: Lengths,
    pub stats: NormStats,
}

/// Outputs of [`T1Model::forward_sample`].
#[derive(Debug, Clone)]
pub struct SampleForward {
    /// Denormalised predictions `[M, T]`.
    pub x_hat: NodeId,
    /// One `[n_h, M, M]` tensor per block.
    pub attention: Vec<Tensor>,
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
    pub valid: Vec<bool>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct T1Model {
    config: ModelConfig,
}

impl T1Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self { config })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Every parameter tensor in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let c = &self.config;
        let ch = c.channels;
        let lengths = c.lengths();
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
        let embed_fan = c.embed_inputs() * c.embed_kernel;
        push("embed.weight".into(), vec![ch, c.embed_inputs(), c.embed_kernel], Init::Uniform { fan_in: embed_fan });
        push("embed.bias".into(), vec![ch], Init::Uniform { fan_in: embed_fan });
        push("embed.var".into(), vec![c.num_vars, ch, lengths.embed], Init::Normal { sd: VAR_EMBED_INIT_SD });
        let hidden = c.ffn_hidden();
        for (gi, g) in c.groups.iter().enumerate() {
            for bi in 0..g.num_blocks {
                let p = block_prefix(gi, bi);
                for proj in ["q", "k", "v"] {
                    push(format!("{p}.{proj}.large"), vec![ch, g.large_kernel], Init::Uniform { fan_in: g.large_kernel });
                    push(format!("{p}.{proj}.small"), vec![ch, g.small_kernel], Init::Uniform { fan_in: g.small_kernel });
                }
                push(format!("{p}.attn_out.weight"), vec![ch, ch], Init::Uniform { fan_in: ch });
                push(format!("{p}.attn_out.bias"), vec![ch], Init::Uniform { fan_in: ch });
                push(format!("{p}.norm1.gamma"), vec![ch], Init::Constant(1.0));
                push(format!("{p}.norm1.beta"), vec![ch], Init::Constant(0.0));
                push(format!("{p}.ffn1.weight"), vec![hidden, ch], Init::Uniform { fan_in: ch });
                push(format!("{p}.ffn1.bias"), vec![hidden], Init::Uniform { fan_in: ch });
                push(format!("{p}.ffn2.weight"), vec![ch, hidden], Init::Uniform { fan_in: hidden });
                push(format!("{p}.ffn2.bias"), vec![ch], Init::Uniform { fan_in: hidden });
                push(format!("{p}.norm2.gamma"), vec![ch], Init::Constant(1.0));
                push(format!("{p}.norm2.beta"), vec![ch], Init::Constant(0.0));
            }
            if g.downsample_after {
                push(format!("g{gi}.down.kernel"), vec![ch, 2], Init::Uniform { fan_in: 2 });
            }
        }
        match c.upsampler {
            Upsampler::PixelShuffle => {
                let shuffled = ch / c.upsample_ratio();
                push("head.weight".into(), vec![1, shuffled], Init::Uniform { fan_in: shuffled });
                push("head.bias".into(), vec![1], Init::Uniform { fan_in: shuffled });
            }
            Upsampler::Linear => {
                let feat = ch * lengths.last;
                push("head.weight".into(), vec![c.seq_len, feat], Init::Uniform { fan_in: feat });
                push("head.bias".into(), vec![c.seq_len], Init::Uniform { fan_in: feat });
            }
        }
        specs
    }

    pub fn num_params(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }

    /// Fresh parameters drawn from a stream keyed by `seed`.
    pub fn init_params(&self, seed: u64) -> ParamStore {
        let mut rng = stream_rng(seed, domain::INIT, 0);
        let mut store = ParamStore::new();
        for spec in self.param_specs() {
            let n: usize = spec.shape.iter().product();
            let data: Vec<f64> = match spec.init {
                Init::Uniform { fan_in } => {
                    let bound = 1.0 / (fan_in as f64).sqrt();
                    (0..n).map(|_| bound * (2.0 * unit_f64(&mut rng) - 1.0)).collect()
                }
                Init::Normal { sd } => {
                    let dist = Normal::new(0.0, sd).expect("positive sd");
                    (0..n).map(|_| dist.sample(&mut rng)).collect()
                }
                Init::Constant(v) => vec![v; n],
            };
            let value = Tensor::new(spec.shape, data).expect("spec shape");
            store.insert(spec.name, value).expect("unique names");
        }
        store
    }

    /// Checks that `params` holds exactly the expected tensors with the expected shapes.
    pub fn check_params(&self, params: &ParamStore) -> Result<()> {
        let specs = self.param_specs();
        for spec in &specs {
            let value = params
                .value(&spec.name)
                .ok_or_else(|| Error::Dimension(format!("missing parameter {}", spec.name)))?;
            if value.shape() != spec.shape.as_slice() {
                let what = if spec.name == "embed.var" { " (M, C, L0)" } else { "" };
                return Err(Error::Dimension(format!(
                    "parameter {} has shape {:?}, expected {:?}{what}",
                    spec.name,
                    value.shape(),
                    spec.shape
                )));
            }
        }
        if params.len() != specs.len() {
            return Err(Error::Dimension(format!(
                "store holds {} parameters, model expects {}",
                params.len(),
                specs.len()
            )));
        }
        Ok(())
    }

    /// Builds the forward graph for one sample `x`, `omega_eff` of shape `[M, T]`.
    pub fn forward_sample(&self, tape: &mut Tape, params: &ParamStore, x: &Tensor, omega_eff: &Tensor) -> Result<SampleForward> {
        let c = &self.config;
        if x.rank() == 2 && x.shape()[0] != c.num_vars {
            return Err(Error::Dimension(format!(
                "data has {} variables but the variable encoding embed.var is sized for {}",
                x.shape()[0],
                c.num_vars
            )));
        }
        if x.shape() != [c.num_vars, c.seq_len] || omega_eff.shape() != x.shape() {
            return Err(Error::Dimension(format!(
                "sample x {:?} / mask {:?}, model expects [{}, {}]",
                x.shape(),
                omega_eff.shape(),
                c.num_vars,
                c.seq_len
            )));
        }
        let t = c.seq_len;
        let (xn, mu, sigma, valid) = norm::normalize_sample(x.data(), omega_eff.data(), t);
        let xn = Tensor::new(x.shape().to_vec(), xn)?;
        let input = tape.leaf(layers::embed_input(&xn, omega_eff, c.use_mask_channel)?);
        let mut z = layers::embed(tape, params, input, c.embed_stride)?;
        let mut attention = Vec::with_capacity(c.num_blocks());
        for (gi, g) in c.groups.iter().enumerate() {
            for bi in 0..g.num_blocks {
                let (out, weights) = layers::t1_block(tape, params, z, &block_prefix(gi, bi), c.channels_per_head)?;
                z = out;
                attention.push(weights);
            }
            if g.downsample_after {
                z = layers::downsample(tape, params, z, &format!("g{gi}.down.kernel"))?;
            }
        }
        let x_hat = layers::reconstruct(tape, params, z, c.upsampler, t, &mu, &sigma)?;
        Ok(SampleForward {
            x_hat,
            attention,
            mu,
            sigma,
            valid,
        })
    }

    /// Batched forward pass without gradients. The effective mask is `omega AND psi`.
    pub fn forward(&self, params: &ParamStore, batch: &SeriesBatch) -> Result<(Tensor, ForwardTrace)> {
        self.check_params(params)?;
        let c = &self.config;
        if batch.num_vars() != c.num_vars {
            return Err(Error::Dimension(format!(
                "data has {} variables but the variable encoding embed.var is sized for {}",
                batch.num_vars(),
                c.num_vars
            )));
        }
        if batch.seq_len() != c.seq_len {
            return Err(Error::Dimension(format!(
                "batch is [B, {}, {}], model expects [B, {}, {}]",
                batch.num_vars(),
                batch.seq_len(),
                c.num_vars,
                c.seq_len
            )));
        }
        let eff = batch.effective_mask();
        let b = batch.batch_size();
        let samples: Vec<(Tensor, SampleForward)> = (0..b)
            .into_par_iter()
            .map(|i| {
                let mut tape = Tape::new();
                let s = self.forward_sample(&mut tape, params, &batch.x.index_first(i), &eff.index_first(i))?;
                Ok((tape.value(s.x_hat).clone(), s))
            })
            .collect::<Result<_>>()?;

        let x_hat = Tensor::stack(&samples.iter().map(|(x, _)| x.clone()).collect::<Vec<_>>())?;
        let attention = (0..c.num_blocks())
            .map(|k| Tensor::stack(&samples.iter().map(|(_, s)| s.attention[k].clone()).collect::<Vec<_>>()))
            .collect::<Result<Vec<_>>>()?;
        let m = c.num_vars;
        let flat = |f: &dyn Fn(&SampleForward) -> Vec<f64>| {
            Tensor::new([b, m], samples.iter().flat_map(|(_, s)| f(s)).collect())
        };
        let stats = NormStats {
            mu: flat(&|s| s.mu.clone())?,
            sigma: flat(&|s| s.sigma.clone())?,
            valid: flat(&|s| s.valid.iter().map(|&v| if v { 1.0 } else { 0.0 }).collect())?,
        };
        Ok((
            x_hat,
            ForwardTrace {
                attention,
                lengths: c.lengths(),
                stats,
            },
        ))
    }
}
