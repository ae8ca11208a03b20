//! Scoring imputations on artificially hidden entries, attention analysis,
//! baseline imputers and cost accounting.

pub mod baselines;
pub mod flops;
pub mod metrics;

pub use baselines::{baseline_imputers, fill_series, BaselineKind, BaselineOutput};
pub use flops::{count_flops_and_params, FlopReport, FlopRow};
pub use metrics::{metrics, MetricSums, Metrics};

use std::path::Path;

use serde::Serialize;

use crate::autodiff::ParamStore;
use crate::data::{SeriesBatch, Window};
use crate::error::{Error, Result};
use crate::masking::{gen_point_mask_per_var, MaskSpec};
use crate::model::T1Model;
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Windows per forward call during evaluation.
pub const EVAL_BATCH: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VarMetrics {
    pub var: usize,
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
}

/// Mean attention per block onto each variable.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LayerAttention {
    pub layer: usize,
    /// Entry `j`: mean over samples, heads and queries `i != j` of `A[i, j]`.
    /// With one variable this is the self weight.
    pub from_others: Vec<f64>,
    /// Entry `j`: mean of `A[j, j]`.
    pub self_weight: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub scenario: String,
    pub mask: MaskSpec,
    pub mse: f64,
    pub mae: f64,
    pub count: usize,
    pub per_variable: Vec<VarMetrics>,
    pub attention_summary: Vec<LayerAttention>,
    pub windows: usize,
    /// Windows in which the scenario hid no observed entry.
    pub windows_without_targets: usize,
}

/// Masks for evaluation window `index`: `(omega', targets)`, each `[1, M, T]`.
pub fn window_scenario(spec: &MaskSpec, window: &Window, index: usize) -> Result<(Tensor, Tensor)> {
    let natural = window.omega.clone().reshape(vec![1, window.num_vars(), window.seq_len()])?;
    let s = spec.apply(&natural, derive_seed(spec.seed, &[index as u64]))?;
    Ok((s.omega, s.targets))
}

/// Accumulates attention statistics onto each key variable.
#[derive(Debug, Clone)]
struct AttentionSums {
    from_others: Vec<f64>,
    self_weight: Vec<f64>,
    other_rows: f64,
    self_rows: f64,
}

impl AttentionSums {
    fn new(m: usize) -> Self {
        Self {
            from_others: vec![0.0; m],
            self_weight: vec![0.0; m],
            other_rows: 0.0,
            self_rows: 0.0,
        }
    }

    /// Adds a `[B, n_h, M, M]` weight tensor.
    fn push(&mut self, weights: &Tensor) {
        let m = weights.dim_from_end(0);
        for a in weights.data().chunks(m * m) {
            for j in 0..m {
                self.self_weight[j] += a[j * m + j];
                for i in (0..m).filter(|&i| i != j) {
                    self.from_others[j] += a[i * m + j];
                }
            }
            self.self_rows += 1.0;
            self.other_rows += (m - 1) as f64;
        }
    }

    fn finish(&self, layer: usize) -> LayerAttention {
        let self_weight: Vec<f64> = self.self_weight.iter().map(|s| s / self.self_rows.max(1.0)).collect();
        let from_others = if self.other_rows == 0.0 {
            self_weight.clone()
        } else {
            self.from_others.iter().map(|s| s / self.other_rows).collect()
        };
        LayerAttention {
            layer,
            from_others,
            self_weight,
        }
    }
}

/// Runs `spec` over `windows`: hides entries, imputes with the model and scores
/// exactly the hidden, originally observed entries.
pub fn evaluate_scenario(model: &T1Model, params: &ParamStore, windows: &[Window], spec: &MaskSpec) -> Result<EvalReport> {
    evaluate_with(windows, spec, model.config().num_blocks(), |batch| {
        let (x_hat, trace) = model.forward(params, batch)?;
        Ok((x_hat, trace.attention))
    })
}

/// Like [`evaluate_scenario`] with a baseline imputer in place of the model.
pub fn evaluate_baseline(windows: &[Window], spec: &MaskSpec, kind: BaselineKind) -> Result<EvalReport> {
    evaluate_with(windows, spec, 0, |batch| Ok((baseline_imputers(batch, kind)?.x_hat, Vec::new())))
}

fn evaluate_with(
    windows: &[Window],
    spec: &MaskSpec,
    layers: usize,
    mut impute: impl FnMut(&SeriesBatch) -> Result<(Tensor, Vec<Tensor>)>,
) -> Result<EvalReport> {
    spec.validate()?;
    let first = windows
        .first()
        .ok_or_else(|| Error::InvalidArgument("no evaluation windows".into()))?;
    let (m, t) = (first.num_vars(), first.seq_len());
    let mut total = MetricSums::default();
    let mut per_var = vec![MetricSums::default(); m];
    let mut attn = vec![AttentionSums::new(m); layers];
    let mut without_targets = 0;
    for (chunk_idx, chunk) in windows.chunks(EVAL_BATCH).enumerate() {
        let mut omegas = Vec::with_capacity(chunk.len());
        let mut targets = Vec::with_capacity(chunk.len());
        for (j, w) in chunk.iter().enumerate() {
            let (o, tg) = window_scenario(spec, w, chunk_idx * EVAL_BATCH + j)?;
            if !tg.data().contains(&1.0) {
                without_targets += 1;
            }
            omegas.push(o.reshape(vec![m, t])?);
            targets.push(tg.reshape(vec![m, t])?);
        }
        let x = Tensor::stack(&chunk.iter().map(|w| w.x.clone()).collect::<Vec<_>>())?;
        let batch = SeriesBatch::new(x, Tensor::stack(&omegas)?, None, Vec::new())?;
        let targets = Tensor::stack(&targets)?;
        let (x_hat, attention) = impute(&batch)?;
        for (i, ((&p, &y), &tg)) in x_hat.data().iter().zip(batch.x.data()).zip(targets.data()).enumerate() {
            if tg == 1.0 {
                total.push(p - y);
                per_var[(i / t) % m].push(p - y);
            }
        }
        for (sums, w) in attn.iter_mut().zip(&attention) {
            sums.push(w);
        }
    }
    if without_targets > 0 {
        log::warn!("{}: {without_targets} window(s) have no targets", spec.label());
    }
    let overall = total
        .finish()
        .ok_or_else(|| Error::EmptyTargetSet(format!("scenario {} hides no observed entry (no targets)", spec.label())))?;
    Ok(EvalReport {
        scenario: spec.label(),
        mask: *spec,
        mse: overall.mse,
        mae: overall.mae,
        count: overall.count,
        per_variable: per_var
            .iter()
            .enumerate()
            .filter_map(|(var, s)| {
                s.finish().map(|r| VarMetrics {
                    var,
                    mse: r.mse,
                    mae: r.mae,
                    count: r.count,
                })
            })
            .collect(),
        attention_summary: attn.iter().enumerate().map(|(l, s)| s.finish(l)).collect(),
        windows: windows.len(),
        windows_without_targets: without_targets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CurvePoint {
    pub layer: usize,
    pub ratio: f64,
    pub mean_weight: f64,
}

/// Mean attention onto `target_var` from the other variables as its missing
/// ratio varies, with every other variable hidden at `other_ratio`.
///
/// For each ratio the target series loses that share of its observed entries;
/// the model sees the reduced mask. Masks for window `i` draw from
/// `derive_seed(seed, [i])`, shared across ratios.
pub fn attention_vs_missingness(
    model: &T1Model,
    params: &ParamStore,
    windows: &[Window],
    target_var: usize,
    ratios: &[f64],
    other_ratio: f64,
    seed: u64,
) -> Result<Vec<CurvePoint>> {
    let m = model.config().num_vars;
    if ratios.is_empty() {
        return Err(Error::InvalidArgument("ratio list is empty".into()));
    }
    if target_var >= m {
        return Err(Error::InvalidArgument(format!("target variable {target_var} out of range for {m} variables")));
    }
    if windows.is_empty() {
        return Err(Error::InvalidArgument("no windows".into()));
    }
    let mut curve = Vec::new();
    for &ratio in ratios {
        let mut per_var = vec![other_ratio; m];
        per_var[target_var] = ratio;
        let mut sums = vec![AttentionSums::new(m); model.config().num_blocks()];
        for (chunk_idx, chunk) in windows.chunks(EVAL_BATCH).enumerate() {
            let mut omegas = Vec::with_capacity(chunk.len());
            for (j, w) in chunk.iter().enumerate() {
                let shape = [1, w.num_vars(), w.seq_len()];
                let keep = gen_point_mask_per_var(&shape, &per_var, derive_seed(seed, &[(chunk_idx * EVAL_BATCH + j) as u64]))?;
                omegas.push(w.omega.zip_map(&keep.reshape(w.omega.shape().to_vec())?, |a, b| a * b)?);
            }
            let x = Tensor::stack(&chunk.iter().map(|w| w.x.clone()).collect::<Vec<_>>())?;
            let batch = SeriesBatch::new(x, Tensor::stack(&omegas)?, None, Vec::new())?;
            let (_, trace) = model.forward(params, &batch)?;
            for (s, w) in sums.iter_mut().zip(&trace.attention) {
                s.push(w);
            }
        }
        for (layer, s) in sums.iter().enumerate() {
            curve.push(CurvePoint {
                layer,
                ratio,
                mean_weight: s.finish(layer).from_others[target_var],
            });
        }
    }
    Ok(curve)
}

/// Writes the report as pretty JSON.
pub fn write_report_json(path: &Path, report: &EvalReport) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(report)?)?;
    Ok(())
}

/// Flat CSV: one `all` row, then one row per variable.
pub fn write_report_csv(path: &Path, report: &EvalReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scenario", "var", "mse", "mae", "count"])?;
    w.write_record([
        report.scenario.clone(),
        "all".into(),
        report.mse.to_string(),
        report.mae.to_string(),
        report.count.to_string(),
    ])?;
    for v in &report.per_variable {
        w.write_record([
            report.scenario.clone(),
            v.var.to_string(),
            v.mse.to_string(),
            v.mae.to_string(),
            v.count.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Scenario x (mse, mae) table.
pub fn write_summary_csv(path: &Path, reports: &[EvalReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["scenario", "mse", "mae", "count"])?;
    for r in reports {
        w.write_record([r.scenario.clone(), r.mse.to_string(), r.mae.to_string(), r.count.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_curve_csv(path: &Path, curve: &[CurvePoint]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for p in curve {
        w.serialize(p)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_flops_csv(path: &Path, report: &FlopReport) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in &report.rows {
        w.serialize(r)?;
    }
    w.serialize(FlopRow {
        component: "total".into(),
        flops: report.total_flops,
        params: report.total_params,
    })?;
    w.flush()?;
    Ok(())
}
