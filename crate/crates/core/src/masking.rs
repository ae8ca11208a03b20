//! Observation masks (`omega`, 1 = observed) and training masks (`psi`, 0 =
//! hidden for supervision).
//!
//! All masks are `[B, M, T]` tensors of 0.0/1.0. Each `(b, m)` series draws
//! from its own ChaCha8 stream keyed by the seed, so a mask is reproducible
//! regardless of the order in which series are generated.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, domain, series_stream, stream_rng, unit_f64, uniform_inclusive};
use crate::tensor::Tensor;

pub const DEFAULT_BLOCK_POINT_RATIO: f64 = 0.05;
pub const DEFAULT_BLOCK_START_PROB: f64 = 0.0015;
pub const DEFAULT_BLOCK_MIN_LEN: usize = 24;
pub const DEFAULT_BLOCK_MAX_LEN: usize = 96;

fn dims3(shape: &[usize], op: &'static str) -> Result<(usize, usize, usize)> {
    match *shape {
        [b, m, t] => Ok((b, m, t)),
        _ => Err(Error::shape(op, format!("expected [B, M, T], got {shape:?}"))),
    }
}

fn check_prob(name: &str, p: f64) -> Result<()> {
    if (0.0..=1.0).contains(&p) {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("{name} must lie in [0, 1], got {p}")))
    }
}

/// Independent point missingness: each entry is 0 with probability `ratio`.
pub fn gen_point_mask(shape: &[usize], ratio: f64, seed: u64) -> Result<Tensor> {
    let (_, m, _) = dims3(shape, "gen_point_mask")?;
    gen_point_mask_per_var(shape, &vec![ratio; m], seed)
}

/// Point missingness with a separate ratio per variable. With all ratios equal
/// this reproduces [`gen_point_mask`] bit for bit.
pub fn gen_point_mask_per_var(shape: &[usize], ratios: &[f64], seed: u64) -> Result<Tensor> {
    let (b, m, t) = dims3(shape, "gen_point_mask")?;
    if ratios.len() != m {
        return Err(Error::shape(
            "gen_point_mask",
            format!("{} ratios for {} variables", ratios.len(), m),
        ));
    }
    for &r in ratios {
        check_prob("missing ratio", r)?;
    }
    let mut out = Tensor::ones(shape.to_vec());
    let data = out.data_mut();
    for bi in 0..b {
        for (mi, &ratio) in ratios.iter().enumerate() {
            let mut rng = stream_rng(seed, domain::POINT, series_stream(bi, mi));
            let row = &mut data[(bi * m + mi) * t..(bi * m + mi + 1) * t];
            for v in row {
                if unit_f64(&mut rng) < ratio {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    #[serde(default = "default_point_ratio")]
    pub point_ratio: f64,
    #[serde(default = "default_start_prob")]
    pub block_start_prob: f64,
    #[serde(default = "default_min_len")]
    pub min_len: usize,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
}

fn default_point_ratio() -> f64 {
    DEFAULT_BLOCK_POINT_RATIO
}
fn default_start_prob() -> f64 {
    DEFAULT_BLOCK_START_PROB
}
fn default_min_len() -> usize {
    DEFAULT_BLOCK_MIN_LEN
}
fn default_max_len() -> usize {
    DEFAULT_BLOCK_MAX_LEN
}

impl Default for BlockParams {
    fn default() -> Self {
        Self {
            point_ratio: DEFAULT_BLOCK_POINT_RATIO,
            block_start_prob: DEFAULT_BLOCK_START_PROB,
            min_len: DEFAULT_BLOCK_MIN_LEN,
            max_len: DEFAULT_BLOCK_MAX_LEN,
        }
    }
}

impl BlockParams {
    pub fn validate(&self) -> Result<()> {
        check_prob("point_ratio", self.point_ratio)?;
        check_prob("block_start_prob", self.block_start_prob)?;
        if self.min_len == 0 || self.min_len > self.max_len {
            return Err(Error::InvalidArgument(format!(
                "block lengths need 1 <= min_len <= max_len, got {}..{}",
                self.min_len, self.max_len
            )));
        }
        Ok(())
    }
}

/// Only the block component of [`gen_block_mask`] (no point missingness).
pub fn gen_block_runs(shape: &[usize], params: &BlockParams, seed: u64) -> Result<Tensor> {
    let (b, m, t) = dims3(shape, "gen_block_mask")?;
    params.validate()?;
    let mut out = Tensor::ones(shape.to_vec());
    let data = out.data_mut();
    for bi in 0..b {
        for mi in 0..m {
            let mut rng = stream_rng(seed, domain::BLOCK, series_stream(bi, mi));
            let row = &mut data[(bi * m + mi) * t..(bi * m + mi + 1) * t];
            let mut step = 0;
            while step < t {
                if unit_f64(&mut rng) < params.block_start_prob {
                    let len = uniform_inclusive(&mut rng, params.min_len, params.max_len);
                    let end = (step + len).min(t);
                    row[step..end].fill(0.0);
                    step = end;
                } else {
                    step += 1;
                }
            }
        }
    }
    Ok(out)
}

/// Point missingness at `point_ratio`, then contiguous missing blocks.
///
/// Each series is scanned left to right; at every step outside an active block a
/// new block starts with probability `block_start_prob`, with a length uniform in
/// `[min_len, max_len]` truncated at the series end.
pub fn gen_block_mask(shape: &[usize], params: &BlockParams, seed: u64) -> Result<Tensor> {
    let point = gen_point_mask(shape, params.point_ratio, seed)?;
    let blocks = gen_block_runs(shape, params, seed)?;
    point.zip_map(&blocks, |a, b| a * b)
}

#[derive(Debug, Clone)]
pub struct TrainingMask {
    pub psi: Tensor,
    /// Batch indices whose observation mask has no observed entry.
    pub empty_samples: Vec<usize>,
}

/// Hides each observed entry (`omega = 1`) with probability `mask_ratio`.
pub fn gen_training_mask(omega: &Tensor, mask_ratio: f64, seed: u64) -> Result<TrainingMask> {
    let (b, m, t) = dims3(omega.shape(), "gen_training_mask")?;
    check_prob("mask_ratio", mask_ratio)?;
    let mut psi = Tensor::ones(omega.shape().to_vec());
    let mut empty_samples = Vec::new();
    let (om, ps) = (omega.data(), psi.data_mut());
    for bi in 0..b {
        let sample = bi * m * t..(bi + 1) * m * t;
        if om[sample].iter().all(|&v| v != 1.0) {
            empty_samples.push(bi);
        }
        for mi in 0..m {
            let mut rng = stream_rng(seed, domain::TRAINING, series_stream(bi, mi));
            let span = (bi * m + mi) * t..(bi * m + mi + 1) * t;
            for (p, &o) in ps[span.clone()].iter_mut().zip(&om[span]) {
                let u = unit_f64(&mut rng);
                if o == 1.0 && u < mask_ratio {
                    *p = 0.0;
                }
            }
        }
    }
    if !empty_samples.is_empty() {
        log::warn!("{} sample(s) have no observed values and contribute no loss", empty_samples.len());
    }
    Ok(TrainingMask { psi, empty_samples })
}

/// Additional point missingness on top of `natural_omega`.
///
/// Returns `(omega', targets)` where `targets` marks exactly the entries that
/// were observed in `natural_omega` and are now hidden.
pub fn compound_mask(natural_omega: &Tensor, extra_ratio: f64, seed: u64) -> Result<(Tensor, Tensor)> {
    let (b, m, t) = dims3(natural_omega.shape(), "compound_mask")?;
    check_prob("extra_ratio", extra_ratio)?;
    let mut omega = natural_omega.clone();
    let mut targets = Tensor::zeros(natural_omega.shape().to_vec());
    let (om, tg) = (omega.data_mut(), targets.data_mut());
    for bi in 0..b {
        for mi in 0..m {
            let mut rng = stream_rng(seed, domain::COMPOUND, series_stream(bi, mi));
            for i in (bi * m + mi) * t..(bi * m + mi + 1) * t {
                let u = unit_f64(&mut rng);
                if om[i] == 1.0 && u < extra_ratio {
                    om[i] = 0.0;
                    tg[i] = 1.0;
                }
            }
        }
    }
    Ok((omega, targets))
}

/// Observation mask plus training mask, with `omega = 0 => psi = 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskPair {
    pub omega: Tensor,
    pub psi: Tensor,
}

impl MaskPair {
    pub fn new(omega: Tensor, psi: Tensor) -> Result<Self> {
        if omega.shape() != psi.shape() {
            return Err(Error::shape(
                "MaskPair",
                format!("omega {:?} vs psi {:?}", omega.shape(), psi.shape()),
            ));
        }
        if omega.data().iter().zip(psi.data()).any(|(&o, &p)| o == 0.0 && p != 1.0) {
            return Err(Error::InvalidArgument(
                "psi may only hide observed entries (omega = 0 requires psi = 1)".into(),
            ));
        }
        Ok(Self { omega, psi })
    }

    /// `omega AND psi`: what the model is allowed to see.
    pub fn effective(&self) -> Tensor {
        self.omega.zip_map(&self.psi, |o, p| o * p).expect("shapes checked")
    }

    /// `omega = 1 AND psi = 0`: the positions scored by the loss.
    pub fn supervision(&self) -> Tensor {
        self.omega
            .zip_map(&self.psi, |o, p| if o == 1.0 && p == 0.0 { 1.0 } else { 0.0 })
            .expect("shapes checked")
    }
}

/// Where the "natural" missingness of a compound scenario comes from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum BaseMask {
    /// The data's own observation mask.
    Natural,
    /// Simulated natural missingness; these entries are never scored.
    Point { ratio: f64 },
    Block(BlockParams),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum MaskKind {
    Point { ratio: f64 },
    Block(BlockParams),
    Compound { base: BaseMask, extra_ratio: f64 },
}

/// A seeded missingness scenario.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MaskSpec {
    pub kind: MaskKind,
    #[serde(default)]
    pub seed: u64,
}

/// Input mask for an evaluation run and the entries to score.
#[derive(Debug, Clone)]
pub struct ScenarioMask {
    pub omega: Tensor,
    pub targets: Tensor,
}

impl ScenarioMask {
    pub fn target_count(&self) -> usize {
        self.targets.data().iter().filter(|&&v| v == 1.0).count()
    }
}

impl MaskSpec {
    pub fn point(ratio: f64, seed: u64) -> Self {
        Self {
            kind: MaskKind::Point { ratio },
            seed,
        }
    }

    pub fn block(params: BlockParams, seed: u64) -> Self {
        Self {
            kind: MaskKind::Block(params),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match &self.kind {
            MaskKind::Point { ratio } => check_prob("ratio", *ratio),
            MaskKind::Block(p) => p.validate(),
            MaskKind::Compound { base, extra_ratio } => {
                check_prob("extra_ratio", *extra_ratio)?;
                match base {
                    BaseMask::Natural => Ok(()),
                    BaseMask::Point { ratio } => check_prob("base ratio", *ratio),
                    BaseMask::Block(p) => p.validate(),
                }
            }
        }
    }

    /// Short human-readable label, e.g. `point-0.5`.
    pub fn label(&self) -> String {
        match &self.kind {
            MaskKind::Point { ratio } => format!("point-{ratio}"),
            MaskKind::Block(p) => format!("block-{}-{}-{}-{}", p.point_ratio, p.block_start_prob, p.min_len, p.max_len),
            MaskKind::Compound { base, extra_ratio } => match base {
                BaseMask::Natural => format!("compound-natural+{extra_ratio}"),
                BaseMask::Point { ratio } => format!("compound-point{ratio}+{extra_ratio}"),
                BaseMask::Block(_) => format!("compound-block+{extra_ratio}"),
            },
        }
    }

    /// Applies the scenario over `natural_omega`, drawing from `seed` (callers
    /// derive it per window). Only entries observed in `natural_omega` are
    /// ever targets.
    pub fn apply(&self, natural_omega: &Tensor, seed: u64) -> Result<ScenarioMask> {
        self.validate()?;
        let shape = natural_omega.shape();
        let hide_with = |keep: Tensor| -> Result<ScenarioMask> {
            let omega = natural_omega.zip_map(&keep, |n, k| n * k)?;
            let targets = natural_omega.zip_map(&keep, |n, k| if n == 1.0 && k == 0.0 { 1.0 } else { 0.0 })?;
            Ok(ScenarioMask { omega, targets })
        };
        match &self.kind {
            MaskKind::Point { ratio } => hide_with(gen_point_mask(shape, *ratio, seed)?),
            MaskKind::Block(p) => hide_with(gen_block_mask(shape, p, seed)?),
            MaskKind::Compound { base, extra_ratio } => {
                let base_seed = rng::derive_seed(seed, &[1]);
                let base_omega = match base {
                    BaseMask::Natural => natural_omega.clone(),
                    BaseMask::Point { ratio } => {
                        natural_omega.zip_map(&gen_point_mask(shape, *ratio, base_seed)?, |a, b| a * b)?
                    }
                    BaseMask::Block(p) => {
                        natural_omega.zip_map(&gen_block_mask(shape, p, base_seed)?, |a, b| a * b)?
                    }
                };
                let (omega, targets) = compound_mask(&base_omega, *extra_ratio, rng::derive_seed(seed, &[2]))?;
                Ok(ScenarioMask { omega, targets })
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn zero_fraction(t: &Tensor) -> f64 {
        t.data().iter().filter(|&&v| v == 0.0).count() as f64 / t.len() as f64
    }

    #[test]
    fn point_mask_extremes() {
        let s = [2, 3, 50];
        assert!(gen_point_mask(&s, 0.0, 1).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(gen_point_mask(&s, 1.0, 1).unwrap().data().iter().all(|&v| v == 0.0));
        assert!(gen_point_mask(&s, 1.5, 1).is_err());
        assert!(gen_point_mask(&[3, 50], 0.5, 1).is_err());
    }

    #[test]
    fn point_mask_matches_independent_replay() {
        use rand::{RngCore, SeedableRng};
        use rand_chacha::ChaCha8Rng;

        let (seed, ratio) = (102u64, 0.3);
        let mask = gen_point_mask(&[1, 4, 1000], ratio, seed).unwrap();
        let frac = zero_fraction(&mask);
        assert!((frac - 0.3).abs() < 0.05, "{frac}");

        for m in 0..4 {
            let mut key = [0u8; 32];
            key[..8].copy_from_slice(&seed.to_le_bytes());
            key[8..16].copy_from_slice(&1u64.to_le_bytes());
            let mut r = ChaCha8Rng::from_seed(key);
            r.set_stream(m as u64);
            for t in 0..1000 {
                let u = (r.next_u64() >> 11) as f64 / (1u64 << 53) as f64;
                let want = if u < ratio { 0.0 } else { 1.0 };
                assert_eq!(mask.get(&[0, m, t]), want);
            }
        }
    }

    #[test]
    fn block_mask_degenerate_cases() {
        let s = [2, 2, 200];
        let no_blocks = BlockParams {
            block_start_prob: 0.0,
            ..BlockParams::default()
        };
        assert_eq!(
            gen_block_mask(&s, &no_blocks, 5).unwrap(),
            gen_point_mask(&s, no_blocks.point_ratio, 5).unwrap()
        );
        let full = BlockParams {
            point_ratio: 0.0,
            block_start_prob: 1.0,
            min_len: 200,
            max_len: 200,
        };
        assert!(gen_block_mask(&s, &full, 5).unwrap().data().iter().all(|&v| v == 0.0));
        let bad = BlockParams {
            min_len: 10,
            max_len: 5,
            ..BlockParams::default()
        };
        assert!(gen_block_mask(&s, &bad, 5).is_err());
    }

    #[test]
    fn block_runs_have_bounded_lengths() {
        let p = BlockParams::default();
        let t = 10_000;
        let runs = gen_block_runs(&[1, 1, t], &p, 102).unwrap();
        let d = runs.data();
        let mut lengths = Vec::new();
        let mut i = 0;
        while i < t {
            if d[i] == 0.0 {
                let start = i;
                while i < t && d[i] == 0.0 {
                    i += 1;
                }
                lengths.push((start, i - start));
            } else {
                i += 1;
            }
        }
        assert!(!lengths.is_empty());
        for &(start, len) in &lengths {
            let truncated = start + len == t;
            assert!(truncated || (24..=96).contains(&len), "run at {start} has length {len}");
        }
    }

    #[test]
    fn training_mask_hides_only_observed() {
        let omega = gen_point_mask(&[4, 3, 500], 0.3, 9).unwrap();
        let tm = gen_training_mask(&omega, 0.4, 11).unwrap();
        assert!(tm.empty_samples.is_empty());
        let pair = MaskPair::new(omega.clone(), tm.psi).unwrap();
        let sup = pair.supervision();
        for ((&o, &p), &s) in omega.data().iter().zip(pair.psi.data()).zip(sup.data()) {
            if o == 0.0 {
                assert_eq!(p, 1.0);
                assert_eq!(s, 0.0);
            }
        }

        let none = Tensor::zeros([2, 2, 10]);
        let tm = gen_training_mask(&none, 0.4, 1).unwrap();
        assert!(tm.psi.data().iter().all(|&v| v == 1.0));
        assert_eq!(tm.empty_samples, vec![0, 1]);

        let tiny = gen_training_mask(&Tensor::ones([1, 2, 100]), 1e-12, 1).unwrap();
        assert!(tiny.psi.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn training_mask_fraction() {
        let omega = Tensor::ones([8, 8, 1000]);
        let psi = gen_training_mask(&omega, 0.4, 3).unwrap().psi;
        let frac = zero_fraction(&psi);
        assert!((frac - 0.4).abs() < 0.03, "{frac}");
    }

    #[test]
    fn mask_pair_rejects_hiding_missing_entries() {
        let omega = Tensor::new([1, 1, 2], vec![0.0, 1.0]).unwrap();
        let psi = Tensor::new([1, 1, 2], vec![0.0, 1.0]).unwrap();
        assert!(MaskPair::new(omega, psi).is_err());
    }

    #[test]
    fn compound_totals() {
        let shape = [1, 10, 5000];
        let natural = gen_point_mask(&shape, 0.8, 21).unwrap();
        let (same, targets) = compound_mask(&natural, 0.0, 4).unwrap();
        assert_eq!(same, natural);
        assert!(targets.data().iter().all(|&v| v == 0.0));

        for (extra, total) in [(0.5, 0.90), (0.7, 0.94)] {
            let (omega, targets) = compound_mask(&natural, extra, 4).unwrap();
            let frac = zero_fraction(&omega);
            assert!((frac - total).abs() < 0.02, "extra {extra}: {frac}");
            for ((&n, &o), &t) in natural.data().iter().zip(omega.data()).zip(targets.data()) {
                assert_eq!(t == 1.0, n == 1.0 && o == 0.0);
            }
        }
    }

    #[test]
    fn scenario_targets_are_naturally_observed() {
        let natural = gen_point_mask(&[2, 3, 300], 0.2, 1).unwrap();
        let specs = [
            MaskSpec::point(0.5, 3),
            MaskSpec::block(BlockParams::default(), 3),
            MaskSpec {
                kind: MaskKind::Compound {
                    base: BaseMask::Point { ratio: 0.3 },
                    extra_ratio: 0.4,
                },
                seed: 3,
            },
        ];
        for spec in specs {
            let sm = spec.apply(&natural, 77).unwrap();
            assert!(sm.target_count() > 0);
            for ((&n, &o), &t) in natural.data().iter().zip(sm.omega.data()).zip(sm.targets.data()) {
                if t == 1.0 {
                    assert_eq!(n, 1.0);
                    assert_eq!(o, 0.0);
                }
                assert!(o <= n);
            }
        }
    }

    #[test]
    fn mask_spec_toml_round_trip() {
        let spec = MaskSpec {
            kind: MaskKind::Compound {
                base: BaseMask::Block(BlockParams::default()),
                extra_ratio: 0.2,
            },
            seed: 8,
        };
        let text = toml::to_string(&spec).unwrap();
        let back: MaskSpec = toml::from_str(&text).unwrap();
        assert_eq!(back, spec);
        let short: MaskSpec = toml::from_str("kind = { type = \"block\" }").unwrap();
        assert_eq!(short.kind, MaskKind::Block(BlockParams::default()));
    }
}
