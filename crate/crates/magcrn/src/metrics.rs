//! Evaluation metrics and the multi-horizon test protocol.
//!
//! MAE, RMSE, and MRE are micro-averaged over every (window, station, step)
//! element of a split, in original units. The standard evaluation runs the
//! horizon offsets 0, 24, and 48 hours without retraining.

use std::fmt;

use rayon::prelude::*;

use crate::data::{make_windows, CovariateSpec, DataError, Normalizer, RawDataset, WindowSample};
use crate::nn::{magcrn_forward, ModelError, ModelParameters};
use crate::tensor::{Tape, Tensor};

/// Horizon offsets evaluated by default, in hours.
pub const DEFAULT_HORIZONS: [usize; 3] = [0, 24, 48];

#[derive(Debug)]
pub enum MetricsError {
    ShapeMismatch { left: usize, right: usize },
    EmptyInput,
    /// MRE is undefined when the target l1-norm is zero.
    ZeroTargetNorm,
    Data(DataError),
    Model(ModelError),
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricsError::ShapeMismatch { left, right } => {
                write!(f, "metric inputs have different lengths: {left} vs {right}")
            }
            MetricsError::EmptyInput => write!(f, "metric inputs are empty"),
            MetricsError::ZeroTargetNorm => write!(f, "target l1-norm is zero, MRE undefined"),
            MetricsError::Data(e) => write!(f, "{e}"),
            MetricsError::Model(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for MetricsError {}

impl From<DataError> for MetricsError {
    fn from(e: DataError) -> Self {
        MetricsError::Data(e)
    }
}

impl From<ModelError> for MetricsError {
    fn from(e: ModelError) -> Self {
        MetricsError::Model(e)
    }
}

fn check_pair(pred: &[f64], target: &[f64]) -> Result<(), MetricsError> {
    if pred.len() != target.len() {
        return Err(MetricsError::ShapeMismatch { left: pred.len(), right: target.len() });
    }
    if pred.is_empty() {
        return Err(MetricsError::EmptyInput);
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae(pred: &[f64], target: &[f64]) -> Result<f64, MetricsError> {
    check_pair(pred, target)?;
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    Ok(sum / pred.len() as f64)
}

/// Root mean squared error.
pub fn rmse(pred: &[f64], target: &[f64]) -> Result<f64, MetricsError> {
    check_pair(pred, target)?;
    let sum: f64 = pred.iter().zip(target).map(|(p, t)| (p - t) * (p - t)).sum();
    Ok((sum / pred.len() as f64).sqrt())
}

/// Mean relative error: the l1 error normalized by the target l1-norm.
pub fn mre(pred: &[f64], target: &[f64]) -> Result<f64, MetricsError> {
    check_pair(pred, target)?;
    let err: f64 = pred.iter().zip(target).map(|(p, t)| (p - t).abs()).sum();
    let norm: f64 = target.iter().map(|t| t.abs()).sum();
    if norm == 0.0 {
        return Err(MetricsError::ZeroTargetNorm);
    }
    Ok(err / norm)
}

/// Metrics for one horizon offset.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonReport {
    pub delta: usize,
    pub mae: f64,
    pub rmse: f64,
    pub mre: f64,
    pub window_count: usize,
}

/// Evaluation result across horizon offsets, plus free-form metadata.
#[derive(Debug, Clone, Default)]
pub struct EvalReport {
    pub horizons: Vec<HorizonReport>,
    pub meta: Vec<(String, String)>,
}

impl EvalReport {
    pub fn horizon(&self, delta: usize) -> Option<&HorizonReport> {
        self.horizons.iter().find(|h| h.delta == delta)
    }
}

/// Score a split with an arbitrary per-window predictor. Predictions and
/// targets are denormalized before aggregation.
pub fn evaluate_with<P>(
    predict: P,
    split: &RawDataset,
    normalizer: &Normalizer,
    spec: &CovariateSpec,
    window: usize,
    horizon: usize,
    deltas: &[usize],
) -> Result<EvalReport, MetricsError>
where
    P: Fn(&WindowSample) -> Result<Tensor, ModelError> + Sync,
{
    let mut report = EvalReport::default();
    for &delta in deltas {
        let windows = make_windows(split, spec, window, horizon, delta)?;
        let scored: Vec<Result<(Vec<f64>, Vec<f64>), MetricsError>> = windows
            .par_iter()
            .map(|w| {
                let pred = predict(w)?;
                let pred = normalizer.invert_target(pred.data());
                let target = normalizer.invert_target(w.x_future.data());
                Ok((pred, target))
            })
            .collect();
        let mut abs_sum = 0.0;
        let mut sq_sum = 0.0;
        let mut target_norm = 0.0;
        let mut count = 0usize;
        for item in scored {
            let (pred, target) = item?;
            for (p, t) in pred.iter().zip(&target) {
                abs_sum += (p - t).abs();
                sq_sum += (p - t) * (p - t);
                target_norm += t.abs();
                count += 1;
            }
        }
        if count == 0 {
            return Err(MetricsError::EmptyInput);
        }
        if target_norm == 0.0 {
            return Err(MetricsError::ZeroTargetNorm);
        }
        report.horizons.push(HorizonReport {
            delta,
            mae: abs_sum / count as f64,
            rmse: (sq_sum / count as f64).sqrt(),
            mre: abs_sum / target_norm,
            window_count: windows.len(),
        });
    }
    Ok(report)
}

/// Evaluate trained parameters on a normalized split for the given horizon
/// offsets.
pub fn evaluate(
    params: &ModelParameters,
    split: &RawDataset,
    normalizer: &Normalizer,
    spec: &CovariateSpec,
    deltas: &[usize],
) -> Result<EvalReport, MetricsError> {
    let (window, horizon) = (params.config.window, params.config.horizon);
    evaluate_with(
        |w| {
            let mut tape = Tape::new();
            magcrn_forward(&mut tape, params, &w.x_past, &w.u_past, &w.u_future)
        },
        split,
        normalizer,
        spec,
        window,
        horizon,
        deltas,
    )
}

fn sig6(v: f64) -> String {
    if v == 0.0 {
        return "0.00000".to_string();
    }
    format!("{v:.5e}")
}

/// Render a report as diff-friendly `key = value` lines, six significant
/// digits per metric.
pub fn format_report(report: &EvalReport) -> String {
    let mut out = String::new();
    for (k, v) in &report.meta {
        out.push_str(&format!("meta.{k} = {v}\n"));
    }
    for h in &report.horizons {
        out.push_str(&format!("horizon.{}.mae = {}\n", h.delta, sig6(h.mae)));
        out.push_str(&format!("horizon.{}.rmse = {}\n", h.delta, sig6(h.rmse)));
        out.push_str(&format!("horizon.{}.mre = {}\n", h.delta, sig6(h.mre)));
        out.push_str(&format!("horizon.{}.window_count = {}\n", h.delta, h.window_count));
    }
    out
}
