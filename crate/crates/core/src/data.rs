//! Series containers, CSV ingestion, chronological windowing and synthetic data.

use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{domain, stream_rng, unit_f64};
use crate::tensor::Tensor;

/// Cell values read as missing.
pub const MISSING_TOKENS: [&str; 4] = ["", "NaN", "nan", "null"];

/// One `[M, T]` window with its observation mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub x: Tensor,
    pub omega: Tensor,
    pub source: String,
    /// Position of the first timestep in the source timeline.
    pub start: usize,
}

impl Window {
    pub fn num_vars(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn seq_len(&self) -> usize {
        self.x.shape()[1]
    }
}

/// Batch of windows: `x`, `omega` and optional `psi`, all `[B, M, T]`.
///
/// Values at `omega = 0` carry no meaning; every consumer must ignore them.
#[derive(Debug, Clone)]
pub struct SeriesBatch {
    pub x: Tensor,
    pub omega: Tensor,
    pub psi: Option<Tensor>,
    pub meta: Vec<String>,
}

impl SeriesBatch {
    pub fn new(x: Tensor, omega: Tensor, psi: Option<Tensor>, meta: Vec<String>) -> Result<Self> {
        if x.rank() != 3 || x.shape() != omega.shape() {
            return Err(Error::shape(
                "SeriesBatch",
                format!("x {:?} vs omega {:?}", x.shape(), omega.shape()),
            ));
        }
        if let Some(p) = &psi {
            if p.shape() != x.shape() {
                return Err(Error::shape("SeriesBatch", format!("psi {:?} vs x {:?}", p.shape(), x.shape())));
            }
        }
        Ok(Self { x, omega, psi, meta })
    }

    pub fn from_windows(windows: &[Window]) -> Result<Self> {
        let xs: Vec<Tensor> = windows.iter().map(|w| w.x.clone()).collect();
        let os: Vec<Tensor> = windows.iter().map(|w| w.omega.clone()).collect();
        let meta = windows.iter().map(|w| format!("{}@{}", w.source, w.start)).collect();
        Self::new(Tensor::stack(&xs)?, Tensor::stack(&os)?, None, meta)
    }

    pub fn with_psi(mut self, psi: Tensor) -> Result<Self> {
        if psi.shape() != self.x.shape() {
            return Err(Error::shape("SeriesBatch", format!("psi {:?} vs x {:?}", psi.shape(), self.x.shape())));
        }
        self.psi = Some(psi);
        Ok(self)
    }

    pub fn batch_size(&self) -> usize {
        self.x.shape()[0]
    }

    pub fn num_vars(&self) -> usize {
        self.x.shape()[1]
    }

    pub fn seq_len(&self) -> usize {
        self.x.shape()[2]
    }

    /// `omega AND psi` (just `omega` without a training mask).
    pub fn effective_mask(&self) -> Tensor {
        match &self.psi {
            Some(p) => self.omega.zip_map(p, |o, q| o * q).expect("validated shapes"),
            None => self.omega.clone(),
        }
    }
}

/// A full multivariate series loaded from disk.
#[derive(Debug, Clone)]
pub struct Series {
    pub names: Vec<String>,
    /// `[M, N]`; missing entries hold 0.
    pub values: Tensor,
    /// `[M, N]` natural observation mask.
    pub omega: Tensor,
    pub time: Option<TimeColumn>,
    /// Original cell text, `N` rows of `M` cells.
    pub raw: Vec<Vec<String>>,
}

#[derive(Debug, Clone)]
pub struct TimeColumn {
    pub name: String,
    pub values: Vec<String>,
}

impl Series {
    pub fn num_vars(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Builds a series from `[M, N]` values and mask, with generated cell text.
    pub fn from_tensors(names: Vec<String>, values: Tensor, omega: Tensor) -> Result<Self> {
        if values.rank() != 2 || values.shape() != omega.shape() || names.len() != values.shape()[0] {
            return Err(Error::shape(
                "Series",
                format!("{} names, values {:?}, omega {:?}", names.len(), values.shape(), omega.shape()),
            ));
        }
        let (m, n) = (values.shape()[0], values.shape()[1]);
        let raw = (0..n)
            .map(|t| {
                (0..m)
                    .map(|v| {
                        if omega.get(&[v, t]) == 1.0 {
                            format_value(values.get(&[v, t]))
                        } else {
                            String::new()
                        }
                    })
                    .collect()
            })
            .collect();
        Ok(Self {
            names,
            values,
            omega,
            time: None,
            raw,
        })
    }
}

/// Shortest text that parses back to the same `f64`.
pub fn format_value(v: f64) -> String {
    format!("{v}")
}

fn is_missing(cell: &str) -> bool {
    MISSING_TOKENS.contains(&cell.trim())
}

/// Reads a rectangular numeric CSV with a header row.
///
/// `time_column` is kept as text and excluded from the values. `value_columns`
/// selects and orders the value columns; by default every other column is
/// used in file order. Cells matching [`MISSING_TOKENS`] are missing.
pub fn load_csv(path: &Path, time_column: Option<&str>, value_columns: Option<&[String]>) -> Result<Series> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::input(path, e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::input(path, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::input(path, format!("no column named {name:?}")))
    };
    let time_idx = time_column.map(find).transpose()?;
    let value_idx: Vec<usize> = match value_columns {
        Some(cols) => cols.iter().map(|c| find(c)).collect::<Result<_>>()?,
        None => (0..headers.len()).filter(|i| Some(*i) != time_idx).collect(),
    };
    if value_idx.is_empty() {
        return Err(Error::input(path, "no value columns"));
    }

    let m = value_idx.len();
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut masks: Vec<Vec<f64>> = Vec::new();
    let mut raw = Vec::new();
    let mut times = Vec::new();
    for (r, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::input(path, format!("row {}: {e}", r + 2)))?;
        let mut vals = Vec::with_capacity(m);
        let mut mask = Vec::with_capacity(m);
        let mut cells = Vec::with_capacity(m);
        for &c in &value_idx {
            let cell = record.get(c).unwrap_or("");
            if is_missing(cell) {
                vals.push(0.0);
                mask.push(0.0);
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| {
                    Error::input(path, format!("row {}, column {:?}: {cell:?} is not a number", r + 2, headers[c]))
                })?;
                if !v.is_finite() {
                    return Err(Error::input(path, format!("row {}, column {:?}: non-finite value", r + 2, headers[c])));
                }
                vals.push(v);
                mask.push(1.0);
            }
            cells.push(cell.to_string());
        }
        if let Some(t) = time_idx {
            times.push(record.get(t).unwrap_or("").to_string());
        }
        rows.push(vals);
        masks.push(mask);
        raw.push(cells);
    }
    let n = rows.len();
    let transpose = |rows: &[Vec<f64>]| Tensor::from_fn([m, n], |i| rows[i % n][i / n]);
    Ok(Series {
        names: value_idx.iter().map(|&i| headers[i].clone()).collect(),
        values: transpose(&rows),
        omega: transpose(&masks),
        time: time_idx.map(|i| TimeColumn {
            name: headers[i].clone(),
            values: times,
        }),
        raw,
    })
}

/// Writes `series` as CSV; missing entries become empty cells.
pub fn write_csv(series: &Series, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header: Vec<&str> = Vec::new();
    if let Some(t) = &series.time {
        header.push(&t.name);
    }
    header.extend(series.names.iter().map(String::as_str));
    w.write_record(&header)?;
    for t in 0..series.len() {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        if let Some(tc) = &series.time {
            row.push(tc.values[t].clone());
        }
        for v in 0..series.num_vars() {
            row.push(if series.omega.get(&[v, t]) == 1.0 {
                format_value(series.values.get(&[v, t]))
            } else {
                String::new()
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub valid: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.7,
            valid: 0.1,
            test: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowStrides {
    pub train: usize,
    pub valid: usize,
    pub test: usize,
}

impl WindowStrides {
    /// Overlapping training windows, tiled evaluation windows.
    pub fn for_len(len: usize) -> Self {
        Self {
            train: 1,
            valid: len,
            test: len,
        }
    }

    pub fn uniform(stride: usize) -> Self {
        Self {
            train: stride,
            valid: stride,
            test: stride,
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct SplitWindows {
    pub train: Vec<Window>,
    pub valid: Vec<Window>,
    pub test: Vec<Window>,
    /// `[start, end)` of the train, valid and test segments.
    pub segments: [(usize, usize); 3],
}

fn cut_window(series: &Series, start: usize, len: usize, source: &str) -> Window {
    let m = series.num_vars();
    let n = series.len();
    let take = |t: &Tensor| {
        Tensor::from_fn([m, len], |i| t.data()[(i / len) * n + start + i % len])
    };
    Window {
        x: take(&series.values),
        omega: take(&series.omega),
        source: source.to_string(),
        start,
    }
}

/// Chronological train/valid/test split, then sliding windows inside each segment.
/// Windows never cross a segment boundary.
pub fn window_split(series: &Series, len: usize, strides: WindowStrides, fractions: SplitFractions) -> Result<SplitWindows> {
    let n = series.len();
    let f = [fractions.train, fractions.valid, fractions.test];
    if f.iter().any(|&v| !(0.0..=1.0).contains(&v)) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split fractions must be in [0, 1] and sum to 1, got {f:?}")));
    }
    if len == 0 || n < len {
        return Err(Error::InvalidArgument(format!("series of length {n} is shorter than window length {len}")));
    }
    if strides.train == 0 || strides.valid == 0 || strides.test == 0 {
        return Err(Error::InvalidArgument("window strides must be >= 1".into()));
    }
    let n_train = (n as f64 * f[0]).floor() as usize;
    let n_valid = ((n as f64 * f[1]).floor() as usize).min(n - n_train);
    let segments = [(0, n_train), (n_train, n_train + n_valid), (n_train + n_valid, n)];
    let names = ["train", "valid", "test"];
    let stride = [strides.train, strides.valid, strides.test];
    let mut sets: [Vec<Window>; 3] = Default::default();
    for i in 0..3 {
        let (s, e) = segments[i];
        if e - s < len {
            if e > s {
                log::warn!("{} segment has {} steps, shorter than window length {len}; it is empty", names[i], e - s);
            }
            continue;
        }
        let mut start = s;
        while start + len <= e {
            sets[i].push(cut_window(series, start, len, names[i]));
            start += stride[i];
        }
    }
    let [train, valid, test] = sets;
    Ok(SplitWindows {
        train,
        valid,
        test,
        segments,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Generator {
    /// `x_m(t) = sin(2 pi f_m t / T + phi_m) + noise`; `phase_coupling = 1`
    /// gives every variable the same phase, 0 makes phases independent.
    CorrelatedSines {
        freqs: Vec<f64>,
        phase_coupling: f64,
        noise_sd: f64,
    },
    /// Per-variable AR(p) plus `cross_coupling` times the lag-1 mean of the other variables.
    ArProcess {
        coeffs: Vec<f64>,
        cross_coupling: f64,
        noise_sd: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_vars: usize,
    pub seq_len: usize,
    pub num_windows: usize,
    pub generator: Generator,
    #[serde(default)]
    pub seed: u64,
}

const AR_BURN_IN: usize = 200;

/// Schur-Cohn step-down: true when every root of `1 - sum a_k z^k` lies outside
/// the unit circle, i.e. the AR recursion is stationary.
pub fn ar_is_stationary(coeffs: &[f64]) -> bool {
    let mut a = coeffs.to_vec();
    while let Some(&k) = a.last() {
        if !(k.abs() < 1.0) {
            return false;
        }
        let j = a.len();
        let denom = 1.0 - k * k;
        let next: Vec<f64> = (0..j - 1).map(|i| (a[i] + k * a[j - 2 - i]) / denom).collect();
        a = next;
    }
    true
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_vars == 0 || self.seq_len == 0 {
            return Err(Error::InvalidArgument("synthetic data needs num_vars and seq_len >= 1".into()));
        }
        match &self.generator {
            Generator::CorrelatedSines {
                freqs,
                phase_coupling,
                noise_sd,
            } => {
                if freqs.len() != self.num_vars {
                    return Err(Error::InvalidArgument(format!(
                        "{} frequencies for {} variables",
                        freqs.len(),
                        self.num_vars
                    )));
                }
                if !(0.0..=1.0).contains(phase_coupling) {
                    return Err(Error::InvalidArgument("phase_coupling must lie in [0, 1]".into()));
                }
                if !(*noise_sd >= 0.0) {
                    return Err(Error::InvalidArgument("noise_sd must be >= 0".into()));
                }
            }
            Generator::ArProcess {
                coeffs,
                cross_coupling,
                noise_sd,
            } => {
                if !(*noise_sd >= 0.0) {
                    return Err(Error::InvalidArgument("noise_sd must be >= 0".into()));
                }
                // The coupling matrix c*(J - I)/(M - 1) has eigenvalues c and -c/(M - 1);
                // each mode shifts the lag-1 coefficient.
                let mut modes = vec![*cross_coupling];
                if self.num_vars > 1 {
                    modes.push(-cross_coupling / (self.num_vars - 1) as f64);
                } else {
                    modes = vec![0.0];
                }
                for shift in modes {
                    let mut a = coeffs.clone();
                    if a.is_empty() {
                        a.push(0.0);
                    }
                    a[0] += shift;
                    if !ar_is_stationary(&a) {
                        return Err(Error::InvalidArgument(format!(
                            "AR coefficients {coeffs:?} with cross coupling {cross_coupling} are not stationary"
                        )));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Generates `num_windows` independent windows; each draws from its own stream.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Vec<Window>> {
    spec.validate()?;
    let (m, t) = (spec.num_vars, spec.seq_len);
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut windows = Vec::with_capacity(spec.num_windows);
    for w in 0..spec.num_windows {
        let mut rng = stream_rng(spec.seed, domain::SYNTHETIC, w as u64);
        let mut x = vec![0.0; m * t];
        match &spec.generator {
            Generator::CorrelatedSines {
                freqs,
                phase_coupling,
                noise_sd,
            } => {
                let shared = two_pi * unit_f64(&mut rng);
                for (v, &f) in freqs.iter().enumerate() {
                    let own = two_pi * unit_f64(&mut rng);
                    let phase = phase_coupling * shared + (1.0 - phase_coupling) * own;
                    for s in 0..t {
                        x[v * t + s] = (two_pi * f * s as f64 / t as f64 + phase).sin();
                    }
                }
                for v in x.iter_mut() {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    *v += noise_sd * e;
                }
            }
            Generator::ArProcess {
                coeffs,
                cross_coupling,
                noise_sd,
            } => {
                let p = coeffs.len();
                let total = AR_BURN_IN + t;
                let mut hist = vec![0.0; m * total];
                for s in 0..total {
                    for v in 0..m {
                        let mut val = 0.0;
                        for (k, &a) in coeffs.iter().enumerate() {
                            if s > k {
                                val += a * hist[v * total + s - 1 - k];
                            }
                        }
                        if m > 1 && s > 0 {
                            let others: f64 = (0..m).filter(|&j| j != v).map(|j| hist[j * total + s - 1]).sum();
                            val += cross_coupling * others / (m - 1) as f64;
                        }
                        let e: f64 = StandardNormal.sample(&mut rng);
                        hist[v * total + s] = val + noise_sd * e;
                    }
                }
                let _ = p;
                for v in 0..m {
                    x[v * t..(v + 1) * t].copy_from_slice(&hist[v * total + AR_BURN_IN..(v + 1) * total]);
                }
            }
        }
        windows.push(Window {
            x: Tensor::new([m, t], x)?,
            omega: Tensor::ones([m, t]),
            source: "synthetic".into(),
            start: w * t,
        });
    }
    Ok(windows)
}
