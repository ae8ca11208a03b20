//! Run configuration and the `train`, `evaluate`, `impute` and `analyze` commands.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::autodiff::ParamStore;
use crate::data::{
    gen_synthetic, load_csv, window_split, write_csv, Series, SplitFractions, SplitWindows, SyntheticSpec, Window,
    WindowStrides,
};
use crate::error::{Error, Result};
use crate::eval::{
    attention_vs_missingness, count_flops_and_params, evaluate_scenario, write_curve_csv, write_flops_csv,
    write_report_csv, write_report_json, write_summary_csv, EvalReport,
};
use crate::masking::MaskSpec;
use crate::model::{load_checkpoint, save_checkpoint, ModelConfig, T1Model};
use crate::rng::derive_seed;
use crate::tensor::Tensor;
use crate::training::{train, write_history, TrainConfig};

pub const CHECKPOINT_FILE: &str = "checkpoint.t1ckpt";
pub const HISTORY_FILE: &str = "history.csv";
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.toml";

/// Exit code for configuration and input errors.
pub const EXIT_INPUT: i32 = 2;
/// Exit code for numerical aborts.
pub const EXIT_NUMERICAL: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum DataSource {
    Csv {
        path: PathBuf,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        time_column: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        value_columns: Option<Vec<String>>,
    },
    /// Independent generated windows, split in order by the fractions.
    Synthetic(SyntheticSpec),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    #[serde(flatten)]
    pub source: DataSource,
    #[serde(default)]
    pub split: SplitFractions,
    /// Defaults to overlapping training windows and tiled evaluation windows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub strides: Option<WindowStrides>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnalysisConfig {
    pub target_var: usize,
    pub ratios: Vec<f64>,
    pub other_ratio: f64,
    pub head_sweep: Vec<usize>,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            target_var: 0,
            ratios: vec![0.1, 0.3, 0.5, 0.7],
            other_ratio: 0.4,
            head_sweep: vec![1, 8, 16, 32],
        }
    }
}

fn default_output_dir() -> PathBuf {
    PathBuf::from("runs")
}

/// Everything needed to reproduce a run. The run seed seeds training and
/// synthetic data, and is mixed into every scenario seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default)]
    pub train: TrainConfig,
    pub data: DataConfig,
    #[serde(default)]
    pub scenarios: Vec<MaskSpec>,
    #[serde(default)]
    pub analysis: AnalysisConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and resolves a config file; relative data paths resolve against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::input(path, format!("cannot read config: {e}")))?;
        let mut cfg: RunConfig = toml::from_str(&text).map_err(|e| Error::input(path, e.to_string()))?;
        if let DataSource::Csv { path: data, .. } = &mut cfg.data.source {
            if data.is_relative() {
                if let Some(dir) = path.parent() {
                    *data = dir.join(&*data);
                }
            }
        }
        cfg.resolve(None)?;
        Ok(cfg)
    }

    /// Applies a seed override and propagates the run seed; validates everything.
    pub fn resolve(&mut self, seed_override: Option<u64>) -> Result<()> {
        if let Some(s) = seed_override {
            self.seed = s;
        }
        self.train.seed = self.seed;
        if let DataSource::Synthetic(spec) = &mut self.data.source {
            spec.seed = self.seed;
            self.model.num_vars = spec.num_vars;
            self.model.seq_len = spec.seq_len;
        }
        self.train.validate()?;
        for s in &self.scenarios {
            s.validate()?;
        }
        if let DataSource::Csv { path, .. } = &self.data.source {
            if !path.exists() {
                return Err(Error::input(path, "data file does not exist"));
            }
        }
        Ok(())
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Scenario spec with the run seed mixed in.
    pub fn scenario_spec(&self, spec: &MaskSpec) -> MaskSpec {
        MaskSpec {
            seed: derive_seed(self.seed, &[spec.seed]),
            ..*spec
        }
    }
}

/// Loads or generates the data and cuts it into windows of the model's length.
/// Also fixes `num_vars` in the model config for CSV sources.
pub fn prepare_windows(cfg: &mut RunConfig) -> Result<SplitWindows> {
    let len = cfg.model.seq_len;
    match &cfg.data.source {
        DataSource::Synthetic(spec) => {
            let windows = gen_synthetic(spec)?;
            let f = cfg.data.split;
            let n = windows.len();
            let n_train = (n as f64 * f.train).floor() as usize;
            let n_valid = ((n as f64 * f.valid).floor() as usize).min(n - n_train);
            let mut it = windows.into_iter();
            let train: Vec<Window> = it.by_ref().take(n_train).collect();
            let valid: Vec<Window> = it.by_ref().take(n_valid).collect();
            let test: Vec<Window> = it.collect();
            Ok(SplitWindows {
                segments: [(0, n_train), (n_train, n_train + n_valid), (n_train + n_valid, n)],
                train,
                valid,
                test,
            })
        }
        DataSource::Csv {
            path,
            time_column,
            value_columns,
        } => {
            let series = load_csv(path, time_column.as_deref(), value_columns.as_deref())?;
            cfg.model.num_vars = series.num_vars();
            let strides = cfg.data.strides.unwrap_or_else(|| WindowStrides::for_len(len));
            window_split(&series, len, strides, cfg.data.split)
        }
    }
}

fn log_model(model: &T1Model) {
    let c = model.config();
    log::info!(
        "model: M={} T={} C={} blocks={} params={}",
        c.num_vars,
        c.seq_len,
        c.channels,
        c.num_blocks(),
        model.num_params()
    );
}

/// Trains and writes the checkpoint, history and resolved config to `output_dir`.
pub fn cmd_train(cfg: &mut RunConfig) -> Result<()> {
    let windows = prepare_windows(cfg)?;
    let model = T1Model::new(cfg.model.clone())?;
    log_model(&model);
    std::fs::create_dir_all(&cfg.output_dir)?;
    std::fs::write(cfg.output_dir.join(RESOLVED_CONFIG_FILE), cfg.to_toml()?)?;
    let outcome = train(&model, &windows.train, &windows.valid, &cfg.train)?;
    save_checkpoint(&cfg.output_dir.join(CHECKPOINT_FILE), model.config(), &outcome.params)?;
    write_history(&cfg.output_dir.join(HISTORY_FILE), &outcome.history)?;
    if let Some(reason) = outcome.aborted {
        return Err(Error::Numerical(format!("{reason}; best checkpoint so far was written")));
    }
    log::info!("best validation loss {:.6} at epoch {}", outcome.best_valid_loss, outcome.best_epoch);
    Ok(())
}

fn load_model(path: &Path) -> Result<(T1Model, ParamStore)> {
    let (config, params) = load_checkpoint(path)?;
    let model = T1Model::new(config)?;
    model.check_params(&params)?;
    Ok((model, params))
}

fn check_data_fits(model: &T1Model, windows: &[Window]) -> Result<()> {
    if let Some(w) = windows.first() {
        if w.num_vars() != model.config().num_vars {
            return Err(Error::Dimension(format!(
                "data has {} variables but the checkpoint's variable encoding embed.var is sized for {}",
                w.num_vars(),
                model.config().num_vars
            )));
        }
    }
    Ok(())
}

/// Runs every scenario on the test windows; one JSON and one CSV report per
/// scenario plus `summary.csv`.
pub fn cmd_evaluate(cfg: &mut RunConfig, checkpoint: &Path) -> Result<Vec<EvalReport>> {
    let (model, params) = load_model(checkpoint)?;
    cfg.model.seq_len = model.config().seq_len;
    let windows = prepare_windows(cfg)?;
    check_data_fits(&model, &windows.test)?;
    if windows.test.is_empty() {
        return Err(Error::InvalidArgument("test split has no windows".into()));
    }
    let dir = cfg.output_dir.join("eval");
    std::fs::create_dir_all(&dir)?;
    let mut reports = Vec::new();
    for spec in &cfg.scenarios {
        let mut report = evaluate_scenario(&model, &params, &windows.test, &cfg.scenario_spec(spec))?;
        report.mask.seed = spec.seed;
        let stem = sanitize(&report.scenario);
        write_report_json(&dir.join(format!("{stem}.json")), &report)?;
        write_report_csv(&dir.join(format!("{stem}.csv")), &report)?;
        log::info!("{}: mse {:.6} mae {:.6} over {}", report.scenario, report.mse, report.mae, report.count);
        reports.push(report);
    }
    write_summary_csv(&cfg.output_dir.join("summary.csv"), &reports)?;
    Ok(reports)
}

fn sanitize(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '.' { c } else { '_' })
        .collect()
}

/// Imputes a whole series with non-overlapping windows of the model length;
/// the tail is padded with missing entries and truncated again. Returns `[M, N]`.
pub fn impute_series(model: &T1Model, params: &ParamStore, series: &Series) -> Result<Tensor> {
    let (m, n) = (series.num_vars(), series.len());
    let t = model.config().seq_len;
    if m != model.config().num_vars {
        return Err(Error::Dimension(format!(
            "input has {m} value columns but the checkpoint's variable encoding embed.var is sized for {}",
            model.config().num_vars
        )));
    }
    let starts: Vec<usize> = (0..n).step_by(t).collect();
    let mut windows = Vec::with_capacity(starts.len());
    for &s in &starts {
        let pick = |src: &Tensor| {
            Tensor::from_fn([m, t], |i| {
                let (v, k) = (i / t, s + i % t);
                if k < n {
                    src.data()[v * n + k]
                } else {
                    0.0
                }
            })
        };
        windows.push(Window {
            x: pick(&series.values),
            omega: pick(&series.omega),
            source: "impute".into(),
            start: s,
        });
    }
    let mut out = series.values.clone();
    for (chunk_idx, chunk) in windows.chunks(crate::eval::EVAL_BATCH).enumerate() {
        let batch = crate::data::SeriesBatch::from_windows(chunk)?;
        let (x_hat, _) = model.forward(params, &batch)?;
        for (j, w) in chunk.iter().enumerate() {
            debug_assert_eq!(w.start, starts[chunk_idx * crate::eval::EVAL_BATCH + j]);
            for v in 0..m {
                for k in 0..t.min(n - w.start) {
                    let idx = v * n + w.start + k;
                    if series.omega.data()[idx] != 1.0 {
                        out.data_mut()[idx] = x_hat.get(&[j, v, k]);
                    }
                }
            }
        }
    }
    if !out.all_finite() {
        return Err(Error::Numerical("imputation produced non-finite values".into()));
    }
    Ok(out)
}

/// Fills the missing cells of `input`; observed cells are copied verbatim.
pub fn cmd_impute(checkpoint: &Path, input: &Path, output: &Path, time_column: Option<&str>) -> Result<()> {
    let (model, params) = load_model(checkpoint)?;
    let series = load_csv(input, time_column, None)?;
    let filled = impute_series(&model, &params, &series)?;
    let mut w = csv::Writer::from_path(output)?;
    let mut header: Vec<&str> = Vec::new();
    if let Some(t) = &series.time {
        header.push(&t.name);
    }
    header.extend(series.names.iter().map(String::as_str));
    w.write_record(&header)?;
    let n = series.len();
    for t in 0..n {
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        if let Some(tc) = &series.time {
            row.push(tc.values[t].clone());
        }
        for v in 0..series.num_vars() {
            row.push(if series.omega.get(&[v, t]) == 1.0 {
                series.raw[t][v].clone()
            } else {
                crate::data::format_value(filled.data()[v * n + t])
            });
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HeadSweepRow {
    pub channels_per_head: usize,
    pub attention_flops: u64,
    pub total_flops: u64,
    pub total_params: u64,
}

/// Attention curve on the test windows plus cost tables.
pub fn cmd_analyze(cfg: &mut RunConfig, checkpoint: &Path) -> Result<()> {
    let (model, params) = load_model(checkpoint)?;
    cfg.model.seq_len = model.config().seq_len;
    let windows = prepare_windows(cfg)?;
    check_data_fits(&model, &windows.test)?;
    std::fs::create_dir_all(&cfg.output_dir)?;
    let a = &cfg.analysis;
    let curve = attention_vs_missingness(
        &model,
        &params,
        &windows.test,
        a.target_var,
        &a.ratios,
        a.other_ratio,
        derive_seed(cfg.seed, &[a.target_var as u64]),
    )?;
    write_curve_csv(&cfg.output_dir.join("attention_curve.csv"), &curve)?;
    write_flops_csv(&cfg.output_dir.join("flops.csv"), &count_flops_and_params(model.config()))?;

    let mut w = csv::Writer::from_path(cfg.output_dir.join("flops_heads.csv"))?;
    for &g in &a.head_sweep {
        if g == 0 || model.config().channels % g != 0 {
            log::warn!("skipping channels_per_head {g}: does not divide {} channels", model.config().channels);
            continue;
        }
        let swept = ModelConfig {
            channels_per_head: g,
            ..model.config().clone()
        };
        let r = count_flops_and_params(&swept);
        w.serialize(HeadSweepRow {
            channels_per_head: g,
            attention_flops: r.attention_flops(),
            total_flops: r.total_flops,
            total_params: r.total_params,
        })?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "t1", version, about = "Multivariate time-series imputation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model and write checkpoint, history and resolved config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate a checkpoint on every configured scenario.
    Evaluate {
        #[arg(long)]
        config: PathBuf,
        /// Defaults to the checkpoint inside the output directory.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Fill the missing cells of a CSV file.
    Impute {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        time_column: Option<String>,
    },
    /// Write the attention-vs-missingness curve and FLOP tables.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
}

fn load_run(config: &Path, out: Option<PathBuf>, seed: Option<u64>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(o) = out {
        cfg.output_dir = o;
    }
    cfg.resolve(seed)?;
    Ok(cfg)
}

/// Runs one command; returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            log::warn!("could not size the thread pool: {e}");
        }
    }
    let result = match cli.command {
        Command::Train { config, out, seed } => load_run(&config, out, seed).and_then(|mut c| cmd_train(&mut c)),
        Command::Evaluate {
            config,
            checkpoint,
            out,
            seed,
        } => load_run(&config, out, seed).and_then(|mut c| {
            let ckpt = checkpoint.unwrap_or_else(|| c.output_dir.join(CHECKPOINT_FILE));
            cmd_evaluate(&mut c, &ckpt).map(|_| ())
        }),
        Command::Impute {
            checkpoint,
            input,
            out,
            time_column,
        } => cmd_impute(&checkpoint, &input, &out, time_column.as_deref()),
        Command::Analyze {
            config,
            checkpoint,
            out,
            seed,
        } => load_run(&config, out, seed).and_then(|mut c| {
            let ckpt = checkpoint.unwrap_or_else(|| c.output_dir.join(CHECKPOINT_FILE));
            cmd_analyze(&mut c, &ckpt)
        }),
    };
    match result {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Numerical(_) => EXIT_NUMERICAL,
        _ => EXIT_INPUT,
    }
}

/// Writes a series to CSV; used by examples to produce inputs for `impute`.
pub fn export_series(series: &Series, path: &Path) -> Result<()> {
    write_csv(series, path)
}
