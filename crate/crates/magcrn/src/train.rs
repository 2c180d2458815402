//! Training protocol: MAE loss, Adam with bias correction, cosine-annealing
//! learning rate with warm restarts, early stopping on validation error, and
//! bit-exact checkpointing.

use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rayon::prelude::*;

use crate::data::WindowSample;
use crate::nn::{magcrn_forward, ModelConfig, ModelError, ModelParameters};
use crate::tensor::{Tape, Tensor, TensorError};

/// Magic line identifying the checkpoint format version.
pub const CHECKPOINT_MAGIC: &str = "MAGCRN1";

#[derive(Debug)]
pub enum TrainError {
    EmptySplit(&'static str),
    /// Loss became NaN or infinite; training aborts with a diagnostic.
    NonFiniteLoss { epoch: usize, batch: usize },
    Io(std::io::Error),
    VersionMismatch { found: String },
    CorruptCheckpoint(String),
    Model(ModelError),
    Tensor(TensorError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainError::EmptySplit(which) => write!(f, "{which} split has no windows"),
            TrainError::NonFiniteLoss { epoch, batch } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}")
            }
            TrainError::Io(e) => write!(f, "io error: {e}"),
            TrainError::VersionMismatch { found } => {
                write!(f, "checkpoint version mismatch: expected '{CHECKPOINT_MAGIC}', found '{found}'")
            }
            TrainError::CorruptCheckpoint(msg) => write!(f, "corrupt checkpoint: {msg}"),
            TrainError::Model(e) => write!(f, "{e}"),
            TrainError::Tensor(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<std::io::Error> for TrainError {
    fn from(e: std::io::Error) -> Self {
        TrainError::Io(e)
    }
}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

impl From<TensorError> for TrainError {
    fn from(e: TensorError) -> Self {
        TrainError::Tensor(e)
    }
}

/// Optimizer and schedule hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    /// Cosine period in epochs; the schedule restarts at every multiple.
    pub period: usize,
    /// Epochs without validation improvement before training stops.
    pub patience: usize,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Optional early exit once the epoch train loss drops below this value
    /// (normalized units). Used by overfitting checks.
    pub stop_train_below: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-2,
            lr_min: 1e-7,
            period: 20,
            patience: 100,
            batch_size: 16,
            max_epochs: 1000,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            stop_train_below: None,
        }
    }
}

/// Mean absolute error between prediction and target, on the tape.
pub fn mae_loss(tape: &mut Tape, pred: &Tensor, target: &Tensor) -> Result<Tensor, TensorError> {
    if pred.shape() != target.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "mae_loss",
            left: pred.shape().to_vec(),
            right: target.shape().to_vec(),
        });
    }
    let diff = tape.sub(pred, target)?;
    let adiff = tape.abs(&diff);
    Ok(tape.mean_all(&adiff))
}

/// Cosine-annealing learning rate with warm restarts:
/// `lr_min + (lr_max - lr_min) (1 + cos(pi (e mod period) / period)) / 2`.
pub fn cosine_lr(epoch: usize, cfg: &TrainConfig) -> f64 {
    let phase = (epoch % cfg.period) as f64 / cfg.period as f64;
    cfg.lr_min + 0.5 * (cfg.lr_max - cfg.lr_min) * (1.0 + (std::f64::consts::PI * phase).cos())
}

/// First and second moment accumulators, aligned with the model's named
/// parameter order.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub step: u64,
}

impl AdamState {
    pub fn new(params: &ModelParameters) -> Self {
        let m = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        let v = params.named().iter().map(|(_, t)| Tensor::zeros(t.shape())).collect();
        AdamState { m, v, step: 0 }
    }
}

/// One Adam update with bias correction. `grads` aligns with the named
/// parameter order; `None` entries are treated as zero gradients.
pub fn adam_step(
    params: &mut ModelParameters,
    grads: &[Option<Tensor>],
    state: &mut AdamState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(), TrainError> {
    state.step += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.step as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.step as i32);
    for (i, (name, t)) in params.named_mut().into_iter().enumerate() {
        if let Some(g) = &grads[i] {
            if g.shape() != t.shape() {
                return Err(TrainError::Model(ModelError::ShapeMismatch {
                    what: "adam_step gradient",
                    expected: t.shape().to_vec(),
                    got: g.shape().to_vec(),
                }));
            }
            let _ = name;
        }
        let zero;
        let g = match &grads[i] {
            Some(g) => g.data(),
            None => {
                zero = vec![0.0; t.numel()];
                &zero[..]
            }
        };
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        let p = t.data_mut();
        for j in 0..p.len() {
            m[j] = cfg.beta1 * m[j] + (1.0 - cfg.beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let m_hat = m[j] / bc1;
            let v_hat = v[j] / bc2;
            p[j] -= lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

/// Per-epoch training record.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub params: ModelParameters,
    pub best_params: ModelParameters,
    pub adam: AdamState,
    /// Epochs completed so far.
    pub epoch: usize,
    pub best_val: f64,
    pub best_epoch: usize,
    pub since_best: usize,
}

impl TrainState {
    pub fn fresh(params: ModelParameters) -> Self {
        let adam = AdamState::new(&params);
        TrainState {
            best_params: params.clone(),
            params,
            adam,
            epoch: 0,
            best_val: f64::INFINITY,
            best_epoch: 0,
            since_best: 0,
        }
    }
}

fn shuffle_seed(seed: u64, epoch: usize) -> u64 {
    // Per-epoch derived seed so resumed runs shuffle identically.
    seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Outcome of recording one validation loss.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ValidationOutcome {
    /// New best; the caller should snapshot the parameters.
    Improved,
    Continue,
    /// Patience exhausted; training stops after this epoch.
    Stop,
}

/// Update the best/patience counters for one completed epoch.
pub fn observe_validation(
    state: &mut TrainState,
    epoch: usize,
    val_loss: f64,
    patience: usize,
) -> ValidationOutcome {
    if val_loss < state.best_val {
        state.best_val = val_loss;
        state.best_epoch = epoch;
        state.since_best = 0;
        ValidationOutcome::Improved
    } else {
        state.since_best += 1;
        if state.since_best >= patience {
            ValidationOutcome::Stop
        } else {
            ValidationOutcome::Continue
        }
    }
}

/// Mean loss and summed gradients over a batch of windows. Windows are
/// evaluated on disjoint tapes (possibly in parallel) and reduced in index
/// order so the result is deterministic.
fn batch_grads(
    params: &ModelParameters,
    batch: &[&WindowSample],
) -> Result<(f64, Vec<Option<Tensor>>), TrainError> {
    let per_window: Vec<Result<(f64, Vec<Option<Tensor>>), TrainError>> = batch
        .par_iter()
        .map(|w| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape, true);
            let pred = magcrn_forward(&mut tape, &bound, &w.x_past, &w.u_past, &w.u_future)?;
            let loss = mae_loss(&mut tape, &pred, &w.x_future)?;
            let loss_value = loss.item();
            let grads = tape.backward(&loss)?;
            let by_name: Vec<Option<Tensor>> =
                bound.named().iter().map(|(_, t)| grads.get(t).cloned()).collect();
            Ok((loss_value, by_name))
        })
        .collect();

    let k = batch.len() as f64;
    let mut total_loss = 0.0;
    let mut summed: Vec<Option<Tensor>> = vec![None; params.named().len()];
    for result in per_window {
        let (loss, grads) = result?;
        total_loss += loss;
        for (slot, g) in summed.iter_mut().zip(grads) {
            match (slot.as_mut(), g) {
                (Some(acc), Some(g)) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                (None, Some(g)) => *slot = Some(g),
                _ => {}
            }
        }
    }
    for slot in summed.iter_mut().flatten() {
        for v in slot.data_mut() {
            *v /= k;
        }
    }
    Ok((total_loss / k, summed))
}

/// Mean MAE over a set of windows without touching gradients
/// (normalized units).
pub fn evaluate_mae(params: &ModelParameters, windows: &[WindowSample]) -> Result<f64, TrainError> {
    if windows.is_empty() {
        return Err(TrainError::EmptySplit("evaluation"));
    }
    let losses: Vec<Result<f64, TrainError>> = windows
        .par_iter()
        .map(|w| {
            let mut tape = Tape::new();
            let pred = magcrn_forward(&mut tape, params, &w.x_past, &w.u_past, &w.u_future)?;
            let loss = mae_loss(&mut tape, &pred, &w.x_future)?;
            Ok(loss.item())
        })
        .collect();
    let mut total = 0.0;
    for l in losses {
        total += l?;
    }
    Ok(total / windows.len() as f64)
}

/// Run (or continue) the training loop until early stopping, `max_epochs`,
/// or the optional train-loss target. Returns the per-epoch history of the
/// epochs executed by this call; `state.best_params` holds the parameters
/// from the best validation epoch.
pub fn train_loop(
    state: &mut TrainState,
    train: &[WindowSample],
    val: &[WindowSample],
    cfg: &TrainConfig,
) -> Result<Vec<EpochStats>, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val.is_empty() {
        return Err(TrainError::EmptySplit("validation"));
    }
    let mut history = Vec::new();
    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch + 1; // 1-based in reports
        let lr = cosine_lr(state.epoch, cfg);

        let mut order: Vec<usize> = (0..train.len()).collect();
        let mut rng = StdRng::seed_from_u64(shuffle_seed(cfg.seed, state.epoch));
        order.shuffle(&mut rng);

        let mut weighted_loss = 0.0;
        for (batch_no, chunk) in order.chunks(cfg.batch_size.max(1)).enumerate() {
            let batch: Vec<&WindowSample> = chunk.iter().map(|&i| &train[i]).collect();
            let (loss, grads) = batch_grads(&state.params, &batch)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch, batch: batch_no });
            }
            weighted_loss += loss * batch.len() as f64;
            adam_step(&mut state.params, &grads, &mut state.adam, lr, cfg)?;
        }
        let train_loss = weighted_loss / train.len() as f64;
        let val_loss = evaluate_mae(&state.params, val)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: usize::MAX });
        }

        state.epoch = epoch;
        history.push(EpochStats { epoch, train_loss, val_loss, lr });

        match observe_validation(state, epoch, val_loss, cfg.patience) {
            ValidationOutcome::Improved => state.best_params = state.params.clone(),
            ValidationOutcome::Continue => {}
            ValidationOutcome::Stop => break,
        }
        if let Some(threshold) = cfg.stop_train_below {
            if train_loss < threshold {
                break;
            }
        }
    }
    Ok(history)
}

// ---- checkpoint io ----

/// On-disk training snapshot. The format is a text header (config and
/// counters as `key=value` lines, then one `tensor <name> <dims...>` line
/// per tensor) followed by little-endian f64 data in header order and a
/// trailing little-endian u64 element count.
#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub state: TrainState,
}

fn fmt_f64(v: f64) -> String {
    // `Display` for f64 is shortest-roundtrip, so parsing restores the bits.
    format!("{v}")
}

pub fn save_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), TrainError> {
    let mut header = String::new();
    header.push_str(CHECKPOINT_MAGIC);
    header.push('\n');
    let c = &ckpt.config;
    header.push_str(&format!("config stations={}\n", c.stations));
    header.push_str(&format!("config window={}\n", c.window));
    header.push_str(&format!("config horizon={}\n", c.horizon));
    header.push_str(&format!("config embed={}\n", c.embed));
    header.push_str(&format!("config past_channels={}\n", c.past_channels));
    header.push_str(&format!("config future_channels={}\n", c.future_channels));
    header.push_str(&format!("config node_embed={}\n", c.node_embed));
    header.push_str(&format!("config alpha={}\n", fmt_f64(c.alpha)));
    header.push_str(&format!("config seed={}\n", c.seed));
    let s = &ckpt.state;
    header.push_str(&format!("train epoch={}\n", s.epoch));
    header.push_str(&format!("train best_val={}\n", fmt_f64(s.best_val)));
    header.push_str(&format!("train best_epoch={}\n", s.best_epoch));
    header.push_str(&format!("train since_best={}\n", s.since_best));
    header.push_str(&format!("train adam_step={}\n", s.adam.step));

    let mut tensors: Vec<(String, &Tensor)> = Vec::new();
    for (name, t) in s.params.named() {
        tensors.push((format!("param.{name}"), t));
    }
    for (name, t) in s.best_params.named() {
        tensors.push((format!("best.{name}"), t));
    }
    for ((name, _), (m, v)) in s.params.named().iter().zip(s.adam.m.iter().zip(&s.adam.v)) {
        tensors.push((format!("adam_m.{name}"), m));
        tensors.push((format!("adam_v.{name}"), v));
    }
    for (name, t) in &tensors {
        header.push_str(&format!(
            "tensor {name} {}\n",
            t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join(" ")
        ));
    }
    header.push_str("end\n");

    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    out.write_all(header.as_bytes())?;
    let mut count: u64 = 0;
    for (_, t) in &tensors {
        for &v in t.data() {
            out.write_all(&v.to_le_bytes())?;
        }
        count += t.numel() as u64;
    }
    out.write_all(&count.to_le_bytes())?;
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint, TrainError> {
    let mut raw = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut raw)?;

    // Split the text header from the binary section at the `end` marker.
    let marker = b"\nend\n";
    let header_end = raw
        .windows(marker.len())
        .position(|w| w == marker)
        .ok_or_else(|| TrainError::CorruptCheckpoint("missing end-of-header marker".into()))?;
    let header = std::str::from_utf8(&raw[..header_end])
        .map_err(|_| TrainError::CorruptCheckpoint("header is not utf-8".into()))?;
    let body = &raw[header_end + marker.len()..];

    let mut lines = header.lines();
    let magic = lines.next().unwrap_or("");
    if magic != CHECKPOINT_MAGIC {
        return Err(TrainError::VersionMismatch { found: magic.to_string() });
    }

    let mut kv = std::collections::HashMap::new();
    let mut tensor_specs: Vec<(String, Vec<usize>)> = Vec::new();
    for line in lines {
        let mut parts = line.splitn(2, ' ');
        match (parts.next(), parts.next()) {
            (Some("config"), Some(rest)) | (Some("train"), Some(rest)) => {
                let (k, v) = rest
                    .split_once('=')
                    .ok_or_else(|| TrainError::CorruptCheckpoint(format!("bad line '{line}'")))?;
                kv.insert(k.to_string(), v.to_string());
            }
            (Some("tensor"), Some(rest)) => {
                let mut fields = rest.split(' ');
                let name = fields
                    .next()
                    .ok_or_else(|| TrainError::CorruptCheckpoint("tensor line without name".into()))?
                    .to_string();
                let dims: Result<Vec<usize>, _> = fields.map(|d| d.parse()).collect();
                let dims = dims
                    .map_err(|_| TrainError::CorruptCheckpoint(format!("bad dims in '{line}'")))?;
                tensor_specs.push((name, dims));
            }
            _ => return Err(TrainError::CorruptCheckpoint(format!("unrecognized line '{line}'"))),
        }
    }

    fn get<T: std::str::FromStr>(
        kv: &std::collections::HashMap<String, String>,
        key: &str,
    ) -> Result<T, TrainError> {
        kv.get(key)
            .ok_or_else(|| TrainError::CorruptCheckpoint(format!("missing key '{key}'")))?
            .parse()
            .map_err(|_| TrainError::CorruptCheckpoint(format!("bad value for '{key}'")))
    }

    let config = ModelConfig {
        stations: get(&kv, "stations")?,
        window: get(&kv, "window")?,
        horizon: get(&kv, "horizon")?,
        embed: get(&kv, "embed")?,
        past_channels: get(&kv, "past_channels")?,
        future_channels: get(&kv, "future_channels")?,
        node_embed: get(&kv, "node_embed")?,
        alpha: get(&kv, "alpha")?,
        seed: get(&kv, "seed")?,
    };

    let total: usize = tensor_specs.iter().map(|(_, d)| d.iter().product::<usize>()).sum();
    let expected_bytes = total * 8 + 8;
    if body.len() != expected_bytes {
        return Err(TrainError::CorruptCheckpoint(format!(
            "binary section is {} bytes, expected {expected_bytes}",
            body.len()
        )));
    }
    let trailer = u64::from_le_bytes(body[total * 8..].try_into().expect("8 trailing bytes"));
    if trailer != total as u64 {
        return Err(TrainError::CorruptCheckpoint(format!(
            "element count trailer is {trailer}, expected {total}"
        )));
    }

    let mut tensors = std::collections::HashMap::new();
    let mut offset = 0usize;
    for (name, dims) in &tensor_specs {
        let n: usize = dims.iter().product();
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let start = (offset + i) * 8;
            data.push(f64::from_le_bytes(body[start..start + 8].try_into().expect("8 bytes")));
        }
        offset += n;
        let t = Tensor::from_vec(dims.clone(), data)
            .map_err(|e| TrainError::CorruptCheckpoint(format!("tensor {name}: {e}")))?;
        tensors.insert(name.clone(), t);
    }

    let mut take = |name: &str| -> Result<Tensor, TrainError> {
        tensors
            .remove(name)
            .ok_or_else(|| TrainError::CorruptCheckpoint(format!("missing tensor '{name}'")))
    };

    let template = crate::nn::init_parameters(&config)?;
    let mut params = template.clone();
    let mut best_params = template;
    let names: Vec<String> = params.named().iter().map(|(n, _)| n.clone()).collect();
    let mut adam_m = Vec::with_capacity(names.len());
    let mut adam_v = Vec::with_capacity(names.len());
    for name in &names {
        params
            .set_named(name, take(&format!("param.{name}"))?)
            .map_err(|e| TrainError::CorruptCheckpoint(e.to_string()))?;
        best_params
            .set_named(name, take(&format!("best.{name}"))?)
            .map_err(|e| TrainError::CorruptCheckpoint(e.to_string()))?;
        adam_m.push(take(&format!("adam_m.{name}"))?);
        adam_v.push(take(&format!("adam_v.{name}"))?);
    }
    if !tensors.is_empty() {
        return Err(TrainError::CorruptCheckpoint(format!(
            "unexpected tensors in checkpoint: {:?}",
            tensors.keys().collect::<Vec<_>>()
        )));
    }

    let state = TrainState {
        params,
        best_params,
        adam: AdamState { m: adam_m, v: adam_v, step: get(&kv, "adam_step")? },
        epoch: get(&kv, "epoch")?,
        best_val: get(&kv, "best_val")?,
        best_epoch: get(&kv, "best_epoch")?,
        since_best: get(&kv, "since_best")?,
    };
    Ok(Checkpoint { config, state })
}
