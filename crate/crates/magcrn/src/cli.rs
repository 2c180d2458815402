//! Run configuration and command implementations.
//!
//! A run is driven by a flat `key = value` config file; every key has a
//! default except the dataset path. Commands write all artifacts under the
//! configured output directory and are deterministic given the config, the
//! seed, and the input files.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use crate::data::{
    chronological_split, fit_normalizer, load_csv, make_windows, write_csv, CovariateSpec,
    DataError, IngestReport, Normalizer, RawDataset,
};
use crate::metrics::{evaluate, format_report, EvalReport, MetricsError};
use crate::nn::{
    gradcheck_model, init_parameters, GradCheckReport, ModelConfig, ModelError, ModelParameters,
};
use crate::synth::{generate, SynthConfig, SynthError};
use crate::train::{
    load_checkpoint, save_checkpoint, train_loop, Checkpoint, EpochStats, TrainConfig, TrainError,
    TrainState,
};

#[derive(Debug)]
pub enum CliError {
    Config(String),
    Data(DataError),
    Model(ModelError),
    Train(TrainError),
    Metrics(MetricsError),
    Synth(SynthError),
    IncompatibleCheckpoint(String),
    InvalidSweepValue(String),
    Io(std::io::Error),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => write!(f, "config error: {msg}"),
            CliError::Data(e) => write!(f, "data error: {e}"),
            CliError::Model(e) => write!(f, "model error: {e}"),
            CliError::Train(e) => write!(f, "train error: {e}"),
            CliError::Metrics(e) => write!(f, "metrics error: {e}"),
            CliError::Synth(e) => write!(f, "synth error: {e}"),
            CliError::IncompatibleCheckpoint(msg) => write!(f, "incompatible checkpoint: {msg}"),
            CliError::InvalidSweepValue(msg) => write!(f, "invalid sweep value: {msg}"),
            CliError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for CliError {}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        CliError::Data(e)
    }
}
impl From<ModelError> for CliError {
    fn from(e: ModelError) -> Self {
        CliError::Model(e)
    }
}
impl From<TrainError> for CliError {
    fn from(e: TrainError) -> Self {
        CliError::Train(e)
    }
}
impl From<MetricsError> for CliError {
    fn from(e: MetricsError) -> Self {
        CliError::Metrics(e)
    }
}
impl From<SynthError> for CliError {
    fn from(e: SynthError) -> Self {
        CliError::Synth(e)
    }
}
impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Io(e)
    }
}

impl CliError {
    /// Process exit code for each error class (documented in the README).
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Model(_) => 4,
            CliError::Train(_) => 5,
            CliError::Metrics(_) => 6,
            CliError::Synth(_) => 7,
            CliError::IncompatibleCheckpoint(_) => 8,
            CliError::InvalidSweepValue(_) => 9,
            CliError::Io(_) => 10,
        }
    }
}

/// All run settings, resolved from defaults plus a config file plus CLI
/// overrides.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: PathBuf,
    pub seed: u64,
    pub window: usize,
    pub horizon: usize,
    pub embed: usize,
    pub node_embed: usize,
    pub alpha: f64,
    pub past_covariates: Vec<String>,
    pub future_covariates: Vec<String>,
    pub lr_max: f64,
    pub lr_min: f64,
    pub period: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub horizons: Vec<usize>,
    pub synth_stations: usize,
    pub synth_hours: usize,
    pub synth_graph_coupling: f64,
    pub synth_traffic_weight: f64,
    pub synth_weather_weight: f64,
    pub synth_noise_std: f64,
    pub synth_weather_rho: f64,
    pub synth_forecast_noise_std: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        let cov = CovariateSpec::default();
        let synth = SynthConfig::default();
        RunConfig {
            data: None,
            out: PathBuf::from("runs"),
            seed: 0,
            window: 24,
            horizon: 24,
            embed: 64,
            node_embed: 10,
            alpha: 0.5,
            past_covariates: cov.past_channels,
            future_covariates: cov.future_channels,
            lr_max: 1e-2,
            lr_min: 1e-7,
            period: 20,
            patience: 100,
            batch_size: 16,
            max_epochs: 1000,
            horizons: vec![0, 24, 48],
            synth_stations: synth.stations,
            synth_hours: synth.hours,
            synth_graph_coupling: synth.graph_coupling,
            synth_traffic_weight: synth.traffic_weight,
            synth_weather_weight: synth.weather_weight,
            synth_noise_std: synth.noise_std,
            synth_weather_rho: synth.weather_rho,
            synth_forecast_noise_std: synth.forecast_noise_std,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, CliError> {
    value
        .trim()
        .parse()
        .map_err(|_| CliError::Config(format!("key '{key}': cannot parse '{value}'")))
}

fn parse_list(value: &str) -> Vec<String> {
    value
        .split(',')
        .map(|s| s.trim().to_string())
        .filter(|s| !s.is_empty())
        .collect()
}

fn parse_usize_list(key: &str, value: &str) -> Result<Vec<usize>, CliError> {
    parse_list(value).iter().map(|v| parse_num(key, v)).collect()
}

impl RunConfig {
    /// Apply one `key = value` assignment. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), CliError> {
        match key {
            "data" => self.data = Some(PathBuf::from(value.trim())),
            "out" => self.out = PathBuf::from(value.trim()),
            "seed" => self.seed = parse_num(key, value)?,
            "window" => self.window = parse_num(key, value)?,
            "horizon" => self.horizon = parse_num(key, value)?,
            "embed" => self.embed = parse_num(key, value)?,
            "node_embed" => self.node_embed = parse_num(key, value)?,
            "alpha" => self.alpha = parse_num(key, value)?,
            "past_covariates" => self.past_covariates = parse_list(value),
            "future_covariates" => self.future_covariates = parse_list(value),
            "lr_max" => self.lr_max = parse_num(key, value)?,
            "lr_min" => self.lr_min = parse_num(key, value)?,
            "period" => self.period = parse_num(key, value)?,
            "patience" => self.patience = parse_num(key, value)?,
            "batch_size" => self.batch_size = parse_num(key, value)?,
            "max_epochs" => self.max_epochs = parse_num(key, value)?,
            "horizons" => self.horizons = parse_usize_list(key, value)?,
            "synth_stations" => self.synth_stations = parse_num(key, value)?,
            "synth_hours" => self.synth_hours = parse_num(key, value)?,
            "synth_graph_coupling" => self.synth_graph_coupling = parse_num(key, value)?,
            "synth_traffic_weight" => self.synth_traffic_weight = parse_num(key, value)?,
            "synth_weather_weight" => self.synth_weather_weight = parse_num(key, value)?,
            "synth_noise_std" => self.synth_noise_std = parse_num(key, value)?,
            "synth_weather_rho" => self.synth_weather_rho = parse_num(key, value)?,
            "synth_forecast_noise_std" => self.synth_forecast_noise_std = parse_num(key, value)?,
            _ => return Err(CliError::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Parse a flat `key = value` file. `#` starts a comment; blank lines
    /// are ignored.
    pub fn from_file(path: &Path) -> Result<RunConfig, CliError> {
        let text = fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read '{}': {e}", path.display())))?;
        let mut cfg = RunConfig::default();
        for (line_no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                CliError::Config(format!("line {}: expected 'key = value'", line_no + 1))
            })?;
            cfg.set(key.trim(), value)?;
        }
        Ok(cfg)
    }

    /// Echo of every resolved key, loadable back as a config file.
    pub fn resolved_text(&self) -> String {
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        if let Some(d) = &self.data {
            kv.insert("data", d.display().to_string());
        }
        kv.insert("out", self.out.display().to_string());
        kv.insert("seed", self.seed.to_string());
        kv.insert("window", self.window.to_string());
        kv.insert("horizon", self.horizon.to_string());
        kv.insert("embed", self.embed.to_string());
        kv.insert("node_embed", self.node_embed.to_string());
        kv.insert("alpha", self.alpha.to_string());
        kv.insert("past_covariates", self.past_covariates.join(","));
        kv.insert("future_covariates", self.future_covariates.join(","));
        kv.insert("lr_max", self.lr_max.to_string());
        kv.insert("lr_min", self.lr_min.to_string());
        kv.insert("period", self.period.to_string());
        kv.insert("patience", self.patience.to_string());
        kv.insert("batch_size", self.batch_size.to_string());
        kv.insert("max_epochs", self.max_epochs.to_string());
        kv.insert(
            "horizons",
            self.horizons.iter().map(|h| h.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.insert("synth_stations", self.synth_stations.to_string());
        kv.insert("synth_hours", self.synth_hours.to_string());
        kv.insert("synth_graph_coupling", self.synth_graph_coupling.to_string());
        kv.insert("synth_traffic_weight", self.synth_traffic_weight.to_string());
        kv.insert("synth_weather_weight", self.synth_weather_weight.to_string());
        kv.insert("synth_noise_std", self.synth_noise_std.to_string());
        kv.insert("synth_weather_rho", self.synth_weather_rho.to_string());
        kv.insert("synth_forecast_noise_std", self.synth_forecast_noise_std.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            out.push_str(&format!("{k} = {v}\n"));
        }
        out
    }

    fn data_path(&self) -> Result<&Path, CliError> {
        self.data
            .as_deref()
            .ok_or_else(|| CliError::Config("key 'data' is required but not set".into()))
    }

    fn covariate_spec(&self) -> CovariateSpec {
        CovariateSpec {
            past_channels: self.past_covariates.clone(),
            future_channels: self.future_covariates.clone(),
        }
    }

    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            period: self.period,
            patience: self.patience,
            batch_size: self.batch_size,
            max_epochs: self.max_epochs,
            seed: self.seed,
            ..TrainConfig::default()
        }
    }

    fn model_config(&self, stations: usize) -> ModelConfig {
        ModelConfig {
            stations,
            window: self.window,
            horizon: self.horizon,
            embed: self.embed,
            past_channels: self.past_covariates.len(),
            future_channels: self.future_covariates.len(),
            node_embed: self.node_embed,
            alpha: self.alpha,
            seed: self.seed,
        }
    }

    fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            stations: self.synth_stations,
            hours: self.synth_hours,
            seed: self.seed,
            graph_coupling: self.synth_graph_coupling,
            traffic_weight: self.synth_traffic_weight,
            weather_weight: self.synth_weather_weight,
            noise_std: self.synth_noise_std,
            weather_rho: self.synth_weather_rho,
            forecast_noise_std: self.synth_forecast_noise_std,
        }
    }
}

/// FNV-1a hash of the resolved config, used to tag evaluation reports.
fn config_hash(cfg: &RunConfig) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in cfg.resolved_text().bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01B3);
    }
    h
}

/// Normalized splits plus the fitted normalizer.
pub struct PreparedData {
    pub train: RawDataset,
    pub val: RawDataset,
    pub test: RawDataset,
    pub full: RawDataset,
    pub normalizer: Normalizer,
    pub report: IngestReport,
    pub stations: usize,
}

/// Load, validate, attach calendar channels, split chronologically, fit the
/// normalizer on the train split, and normalize all three splits.
pub fn prepare_data(path: &Path) -> Result<PreparedData, CliError> {
    let (raw, report) = load_csv(path)?;
    let with_cal = raw.with_calendar_channels();
    let (train, val, test) = chronological_split(&with_cal)?;
    let normalizer = fit_normalizer(&train)?;
    let stations = with_cal.n_stations();
    Ok(PreparedData {
        train: normalizer.apply(&train)?,
        val: normalizer.apply(&val)?,
        test: normalizer.apply(&test)?,
        full: normalizer.apply(&with_cal)?,
        normalizer,
        report,
        stations,
    })
}

fn ensure_out_dir(cfg: &RunConfig) -> Result<(), CliError> {
    fs::create_dir_all(&cfg.out)?;
    Ok(())
}

fn history_text(history: &[EpochStats]) -> String {
    let mut out = String::from("# epoch train_loss val_loss lr\n");
    for e in history {
        out.push_str(&format!("{} {} {} {}\n", e.epoch, e.train_loss, e.val_loss, e.lr));
    }
    out
}

/// Artifacts produced by `cmd_train`.
#[derive(Debug)]
pub struct TrainArtifacts {
    pub checkpoint: PathBuf,
    pub history: PathBuf,
    pub config_echo: PathBuf,
    pub best_val: f64,
    pub epochs: usize,
}

/// Train on the configured dataset and write the best checkpoint, the
/// per-epoch history, and the resolved config echo.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts, CliError> {
    let prepared = prepare_data(cfg.data_path()?)?;
    let spec = cfg.covariate_spec();
    spec.validate()?;
    let train_windows = make_windows(&prepared.train, &spec, cfg.window, cfg.horizon, 0)?;
    let val_windows = make_windows(&prepared.val, &spec, cfg.window, cfg.horizon, 0)?;

    let model_cfg = cfg.model_config(prepared.stations);
    let params = init_parameters(&model_cfg)?;
    let mut state = TrainState::fresh(params);
    let history = train_loop(&mut state, &train_windows, &val_windows, &cfg.train_config())?;

    ensure_out_dir(cfg)?;
    let checkpoint = cfg.out.join("checkpoint.magcrn");
    save_checkpoint(&checkpoint, &Checkpoint { config: model_cfg, state: state.clone() })?;
    let history_path = cfg.out.join("history.txt");
    fs::write(&history_path, history_text(&history))?;
    let config_echo = cfg.out.join("config_resolved.txt");
    fs::write(&config_echo, cfg.resolved_text())?;
    Ok(TrainArtifacts {
        checkpoint,
        history: history_path,
        config_echo,
        best_val: state.best_val,
        epochs: state.epoch,
    })
}

fn check_compatibility(
    ckpt: &Checkpoint,
    cfg: &RunConfig,
    stations: usize,
) -> Result<(), CliError> {
    if ckpt.config.stations != stations {
        return Err(CliError::IncompatibleCheckpoint(format!(
            "checkpoint was trained on {} stations, dataset has {stations}",
            ckpt.config.stations
        )));
    }
    if ckpt.config.past_channels != cfg.past_covariates.len()
        || ckpt.config.future_channels != cfg.future_covariates.len()
    {
        return Err(CliError::IncompatibleCheckpoint(format!(
            "checkpoint expects {} past / {} future covariate channels, config has {} / {}",
            ckpt.config.past_channels,
            ckpt.config.future_channels,
            cfg.past_covariates.len(),
            cfg.future_covariates.len()
        )));
    }
    Ok(())
}

/// Evaluate a checkpoint on the test split for the configured horizon
/// offsets and write the report.
pub fn cmd_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    horizons: Option<Vec<usize>>,
) -> Result<(EvalReport, PathBuf), CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let prepared = prepare_data(cfg.data_path()?)?;
    check_compatibility(&ckpt, cfg, prepared.stations)?;
    let spec = cfg.covariate_spec();
    spec.validate()?;
    let deltas = horizons.unwrap_or_else(|| cfg.horizons.clone());
    let mut report = evaluate(
        &ckpt.state.best_params,
        &prepared.test,
        &prepared.normalizer,
        &spec,
        &deltas,
    )?;
    report.meta.push(("config_hash".into(), format!("{:016x}", config_hash(cfg))));
    report.meta.push(("checkpoint".into(), checkpoint.display().to_string()));
    report.meta.push(("split".into(), "test".into()));
    ensure_out_dir(cfg)?;
    let path = cfg.out.join("eval_report.txt");
    fs::write(&path, format_report(&report))?;
    Ok((report, path))
}

/// Predict one window and write it as `timestamp,station_id,no2_pred` rows.
pub fn cmd_forecast(
    cfg: &RunConfig,
    checkpoint: &Path,
    t0_index: Option<usize>,
    delta: usize,
) -> Result<PathBuf, CliError> {
    let ckpt = load_checkpoint(checkpoint)?;
    let prepared = prepare_data(cfg.data_path()?)?;
    check_compatibility(&ckpt, cfg, prepared.stations)?;
    let spec = cfg.covariate_spec();
    let windows = make_windows(&prepared.full, &spec, cfg.window, cfg.horizon, delta)?;
    let last_t0 = windows.last().expect("make_windows returns at least one window").t0_index;
    let t0 = t0_index.unwrap_or(last_t0);
    let sample = windows
        .iter()
        .find(|w| w.t0_index == t0)
        .ok_or_else(|| {
            CliError::Config(format!(
                "t0 index {t0} out of range: valid indices are {} ..= {last_t0}",
                cfg.window - 1
            ))
        })?;

    let mut tape = crate::tensor::Tape::new();
    let pred = crate::nn::magcrn_forward(
        &mut tape,
        &ckpt.state.best_params,
        &sample.x_past,
        &sample.u_past,
        &sample.u_future,
    )?;
    let denorm = prepared.normalizer.invert_target(pred.data());

    ensure_out_dir(cfg)?;
    let path = cfg.out.join("forecast.csv");
    let mut out = String::from("timestamp,station_id,no2_pred\n");
    for s in 0..prepared.stations {
        for h in 0..cfg.horizon {
            let ts = prepared.full.timestamps[t0 + delta + 1 + h];
            out.push_str(&format!(
                "{},{},{}\n",
                ts.format("%Y-%m-%dT%H:%M:%S"),
                prepared.full.station_ids[s],
                denorm[s * cfg.horizon + h]
            ));
        }
    }
    fs::write(&path, out)?;
    Ok(path)
}

/// Which hyperparameter a sweep varies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepParam {
    Embed,
    Alpha,
}

impl SweepParam {
    pub fn parse(name: &str) -> Result<Self, CliError> {
        match name.to_ascii_lowercase().as_str() {
            "z" | "embed" => Ok(SweepParam::Embed),
            "alpha" => Ok(SweepParam::Alpha),
            other => Err(CliError::InvalidSweepValue(format!(
                "unknown sweep parameter '{other}' (expected 'z' or 'alpha')"
            ))),
        }
    }
}

/// One sweep row: the swept value and the test MAE per horizon offset.
#[derive(Debug, Clone)]
pub struct SweepRow {
    pub value: f64,
    pub mae_by_delta: Vec<(usize, f64)>,
}

fn eval_maes(
    params: &ModelParameters,
    prepared: &PreparedData,
    spec: &CovariateSpec,
    deltas: &[usize],
) -> Result<Vec<(usize, f64)>, CliError> {
    let report = evaluate(params, &prepared.test, &prepared.normalizer, spec, deltas)?;
    Ok(report.horizons.iter().map(|h| (h.delta, h.mae)).collect())
}

/// Sweep the embedding size or the mixing coefficient and tabulate test MAE
/// per horizon. By default each value retrains from scratch; `frozen` mode
/// trains once at the configured alpha and only re-evaluates under each
/// swept alpha (labeled in the output, alpha sweeps only).
pub fn cmd_sweep(
    cfg: &RunConfig,
    param: SweepParam,
    values: &[f64],
    frozen: bool,
) -> Result<(Vec<SweepRow>, PathBuf), CliError> {
    if values.is_empty() {
        return Err(CliError::InvalidSweepValue("no sweep values given".into()));
    }
    for &v in values {
        match param {
            SweepParam::Embed => {
                if v < 1.0 || v.fract() != 0.0 {
                    return Err(CliError::InvalidSweepValue(format!(
                        "embed size must be a positive integer, got {v}"
                    )));
                }
            }
            SweepParam::Alpha => {
                if !(0.0..=1.0).contains(&v) {
                    return Err(CliError::InvalidSweepValue(format!(
                        "alpha must lie in [0, 1], got {v}"
                    )));
                }
            }
        }
    }
    if frozen && param != SweepParam::Alpha {
        return Err(CliError::InvalidSweepValue(
            "frozen mode only applies to alpha sweeps".into(),
        ));
    }
    let mut values: Vec<f64> = values.to_vec();
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    values.dedup();

    let prepared = prepare_data(cfg.data_path()?)?;
    let spec = cfg.covariate_spec();
    spec.validate()?;
    let train_windows = make_windows(&prepared.train, &spec, cfg.window, cfg.horizon, 0)?;
    let val_windows = make_windows(&prepared.val, &spec, cfg.window, cfg.horizon, 0)?;
    let deltas = cfg.horizons.clone();

    let mut rows = Vec::with_capacity(values.len());
    if frozen {
        // One training at the configured alpha, re-evaluated per value.
        let model_cfg = cfg.model_config(prepared.stations);
        let mut state = TrainState::fresh(init_parameters(&model_cfg)?);
        train_loop(&mut state, &train_windows, &val_windows, &cfg.train_config())?;
        for &v in &values {
            let mut params = state.best_params.clone();
            params.head.alpha = v;
            params.config.alpha = v;
            rows.push(SweepRow {
                value: v,
                mae_by_delta: eval_maes(&params, &prepared, &spec, &deltas)?,
            });
        }
    } else {
        for &v in &values {
            let mut run_cfg = cfg.clone();
            match param {
                SweepParam::Embed => run_cfg.embed = v as usize,
                SweepParam::Alpha => run_cfg.alpha = v,
            }
            let model_cfg = run_cfg.model_config(prepared.stations);
            let mut state = TrainState::fresh(init_parameters(&model_cfg)?);
            train_loop(&mut state, &train_windows, &val_windows, &run_cfg.train_config())?;
            rows.push(SweepRow {
                value: v,
                mae_by_delta: eval_maes(&state.best_params, &prepared, &spec, &deltas)?,
            });
        }
    }

    ensure_out_dir(cfg)?;
    let name = match param {
        SweepParam::Embed => "z",
        SweepParam::Alpha => "alpha",
    };
    let path = cfg.out.join(format!("sweep_{name}.txt"));
    let mut out = String::new();
    out.push_str(&format!("# param = {name}\n"));
    out.push_str(&format!("# mode = {}\n", if frozen { "frozen-eval" } else { "retrain" }));
    let header: Vec<String> =
        deltas.iter().map(|d| format!("mae_delta{d}")).collect();
    out.push_str(&format!("# columns: value {}\n", header.join(" ")));
    for row in &rows {
        let maes: Vec<String> = row.mae_by_delta.iter().map(|(_, m)| m.to_string()).collect();
        out.push_str(&format!("{} {}\n", row.value, maes.join(" ")));
    }
    fs::write(&path, out)?;
    Ok((rows, path))
}

/// Run the gradient check and write one line per parameter group. Returns
/// the reports plus an overall pass flag.
pub fn cmd_gradcheck(cfg: &RunConfig) -> Result<(Vec<GradCheckReport>, bool), CliError> {
    let reports = gradcheck_model(cfg.seed);
    let all_pass = reports.iter().all(|r| r.pass);
    ensure_out_dir(cfg)?;
    let path = cfg.out.join("gradcheck.txt");
    fs::write(&path, gradcheck_text(&reports))?;
    Ok((reports, all_pass))
}

/// Render gradient-check results, one `group error PASS|FAIL` line each.
pub fn gradcheck_text(reports: &[GradCheckReport]) -> String {
    let mut out = String::new();
    for r in reports {
        out.push_str(&format!(
            "{} {:.3e} {}\n",
            r.group,
            r.max_rel_err,
            if r.pass { "PASS" } else { "FAIL" }
        ));
    }
    out
}

/// Generate a synthetic dataset and its ground-truth sidecar.
pub fn cmd_synth(cfg: &RunConfig) -> Result<(PathBuf, PathBuf), CliError> {
    let (dataset, truth) = generate(&cfg.synth_config())?;
    ensure_out_dir(cfg)?;
    let csv_path = cfg.out.join("synth.csv");
    write_csv(&dataset, &csv_path)?;
    let truth_path = cfg.out.join("synth_truth.txt");
    fs::write(&truth_path, truth.to_text())?;
    Ok((csv_path, truth_path))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_defaults_and_overrides() {
        let cfg = RunConfig::default();
        assert_eq!(cfg.window, 24);
        assert_eq!(cfg.embed, 64);
        assert_eq!(cfg.alpha, 0.5);
        assert_eq!(cfg.past_covariates.len(), 8);
        assert_eq!(cfg.future_covariates.len(), 10);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(
            &path,
            "# comment\nwindow = 12\nhorizon = 12\nembed = 8\nseed = 3\nhorizons = 0,24\n",
        )
        .unwrap();
        let cfg = RunConfig::from_file(&path).unwrap();
        assert_eq!(cfg.window, 12);
        assert_eq!(cfg.embed, 8);
        assert_eq!(cfg.seed, 3);
        assert_eq!(cfg.horizons, vec![0, 24]);
    }

    #[test]
    fn config_rejects_unknown_keys() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.cfg");
        std::fs::write(&path, "windoww = 12\n").unwrap();
        let err = RunConfig::from_file(&path).unwrap_err();
        assert!(matches!(err, CliError::Config(msg) if msg.contains("windoww")));
    }

    #[test]
    fn missing_data_key_names_the_key() {
        let cfg = RunConfig::default();
        let err = cmd_train(&cfg).unwrap_err();
        match err {
            CliError::Config(msg) => assert!(msg.contains("'data'"), "message: {msg}"),
            other => panic!("expected Config error, got {other}"),
        }
    }

    #[test]
    fn resolved_text_round_trips() {
        let mut cfg = RunConfig::default();
        cfg.set("window", "12").unwrap();
        cfg.set("horizon", "12").unwrap();
        cfg.set("data", "some/path.csv").unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("echo.cfg");
        std::fs::write(&path, cfg.resolved_text()).unwrap();
        let reparsed = RunConfig::from_file(&path).unwrap();
        assert_eq!(reparsed, cfg);
    }

    #[test]
    fn sweep_value_validation() {
        let cfg = RunConfig::default();
        assert!(matches!(
            cmd_sweep(&cfg, SweepParam::Alpha, &[1.5], false),
            Err(CliError::InvalidSweepValue(_))
        ));
        assert!(matches!(
            cmd_sweep(&cfg, SweepParam::Embed, &[2.5], false),
            Err(CliError::InvalidSweepValue(_))
        ));
        assert!(matches!(
            cmd_sweep(&cfg, SweepParam::Embed, &[8.0], true),
            Err(CliError::InvalidSweepValue(_))
        ));
        assert!(matches!(
            cmd_sweep(&cfg, SweepParam::Alpha, &[], false),
            Err(CliError::InvalidSweepValue(_))
        ));
    }

    #[test]
    fn gradcheck_report_names_failing_groups() {
        let reports = vec![
            GradCheckReport { group: "head.out.weight".into(), max_rel_err: 2e-7, pass: true },
            GradCheckReport { group: "past_cell.update.weight_pool".into(), max_rel_err: 0.2, pass: false },
        ];
        let text = gradcheck_text(&reports);
        assert!(text.contains("head.out.weight 2.000e-7 PASS"));
        assert!(text.contains("past_cell.update.weight_pool 2.000e-1 FAIL"));
    }
}
