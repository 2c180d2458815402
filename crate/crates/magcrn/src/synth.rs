//! Synthetic station-network generator with planted, known dependence of the
//! target on past traffic and future weather.
//!
//! The target evolves as
//! `y_t = a G y_{t-1} + b f(traffic_t) + c g(weather_t) + noise`
//! over a random row-stochastic graph `G`, where `f` and `g` are clipped
//! means of the standardized covariate latents. The series is then mapped
//! affinely into a realistic NO2 range and written in the exact dataset CSV
//! schema, so generated files round-trip through ingestion unchanged.

use std::fmt;

use chrono::{NaiveDate, NaiveDateTime};
use rand::rngs::StdRng;
use rand::{Rng, SeedableRng};
use rand_distr::StandardNormal;

use crate::data::{RawDataset, DATA_CHANNELS};

#[derive(Debug)]
pub enum SynthError {
    InvalidConfig(String),
}

impl fmt::Display for SynthError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SynthError::InvalidConfig(msg) => write!(f, "invalid synth config: {msg}"),
        }
    }
}

impl std::error::Error for SynthError {}

/// Generator parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub stations: usize,
    pub hours: usize,
    pub seed: u64,
    /// Spatial coupling `a` in `[0, 1)`; keeps the target process stable.
    pub graph_coupling: f64,
    /// Weight `b` of the traffic-driven component.
    pub traffic_weight: f64,
    /// Weight `c` of the weather-driven component.
    pub weather_weight: f64,
    /// Standard deviation of the additive target noise.
    pub noise_std: f64,
    /// AR(1) coefficient of the weather latents, in `[0, 1)`.
    pub weather_rho: f64,
    /// Optional Gaussian noise added to the *emitted* weather channels,
    /// simulating forecast error; the target is always driven by the clean
    /// weather.
    pub forecast_noise_std: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            stations: 6,
            hours: 720,
            seed: 0,
            graph_coupling: 0.2,
            traffic_weight: 0.5,
            weather_weight: 1.0,
            noise_std: 0.05,
            weather_rho: 0.8,
            forecast_noise_std: 0.0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if self.stations < 2 {
            return Err(SynthError::InvalidConfig(format!(
                "stations must be >= 2 (the graph needs at least two nodes), got {}",
                self.stations
            )));
        }
        if self.hours == 0 {
            return Err(SynthError::InvalidConfig("hours must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.graph_coupling) {
            return Err(SynthError::InvalidConfig(format!(
                "graph_coupling must lie in [0, 1), got {}",
                self.graph_coupling
            )));
        }
        if !(0.0..1.0).contains(&self.weather_rho) {
            return Err(SynthError::InvalidConfig(format!(
                "weather_rho must lie in [0, 1), got {}",
                self.weather_rho
            )));
        }
        if self.noise_std < 0.0 || self.forecast_noise_std < 0.0 {
            return Err(SynthError::InvalidConfig("noise levels must be nonnegative".into()));
        }
        Ok(())
    }
}

/// The planted structure behind a generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Row-stochastic `N x N` adjacency, row-major.
    pub adjacency: Vec<f64>,
    pub stations: usize,
    pub graph_coupling: f64,
    pub traffic_weight: f64,
    pub weather_weight: f64,
    pub noise_std: f64,
    pub weather_rho: f64,
    /// The affine map `no2 = scale * y + offset` applied to the latent target.
    pub affine_scale: f64,
    pub affine_offset: f64,
}

impl GroundTruth {
    /// Render as `key = value` lines plus one `adjacency.row.<i>` line per
    /// station.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!("stations = {}\n", self.stations));
        out.push_str(&format!("graph_coupling = {}\n", self.graph_coupling));
        out.push_str(&format!("traffic_weight = {}\n", self.traffic_weight));
        out.push_str(&format!("weather_weight = {}\n", self.weather_weight));
        out.push_str(&format!("noise_std = {}\n", self.noise_std));
        out.push_str(&format!("weather_rho = {}\n", self.weather_rho));
        out.push_str(&format!("affine_scale = {}\n", self.affine_scale));
        out.push_str(&format!("affine_offset = {}\n", self.affine_offset));
        for i in 0..self.stations {
            let row: Vec<String> = self.adjacency[i * self.stations..(i + 1) * self.stations]
                .iter()
                .map(|v| v.to_string())
                .collect();
            out.push_str(&format!("adjacency.row.{i} = {}\n", row.join(" ")));
        }
        out
    }
}

const WEATHER_CHANNELS: usize = 6;
const TRAFFIC_CHANNELS: usize = 4;

/// Physical affine maps per weather channel applied to unit-scale latents.
const WEATHER_PHYS: [(f64, f64, f64, f64); WEATHER_CHANNELS] = [
    // (offset, scale, clip_lo, clip_hi)
    (4.0, 1.5, 0.0, f64::MAX),        // wind_speed [m/s]
    (std::f64::consts::PI, 1.0, 0.0, std::f64::consts::TAU), // wind_dir [rad]
    (15.0, 6.0, -30.0, 45.0),         // temperature [C]
    (60.0, 12.0, 5.0, 100.0),         // rel_humidity [%]
    (945.0, 6.0, 870.0, 1080.0),      // pressure [mb]
    (250.0, 120.0, 0.0, f64::MAX),    // solar_irradiance [W/m^2]
];

/// Physical affine maps per traffic channel.
const TRAFFIC_PHYS: [(f64, f64, f64, f64); TRAFFIC_CHANNELS] = [
    (900.0, 350.0, 0.0, f64::MAX),    // intensity [vehicles/h]
    (18.0, 8.0, 0.0, 100.0),          // occupancy [%]
    (35.0, 14.0, 0.0, 100.0),         // load [%]
    (38.0, 9.0, 1.0, 130.0),          // avg speed [km/h]
];

fn clip3(v: f64) -> f64 {
    v.clamp(-3.0, 3.0)
}

fn draw_adjacency(rng: &mut StdRng, n: usize) -> Vec<f64> {
    let mut g = vec![0.0; n * n];
    for row in g.chunks_mut(n) {
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = rng.random_range(0.05..1.0);
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    g
}

/// Hourly traffic profile with morning and evening peaks.
fn traffic_profile(hour: usize) -> f64 {
    let h = hour as f64;
    let morning = (-((h - 8.5) * (h - 8.5)) / 4.5).exp();
    let evening = (-((h - 18.0) * (h - 18.0)) / 6.0).exp();
    1.4 * morning + 1.2 * evening - 0.6
}

/// Generate a schema-complete dataset plus its planted ground truth.
pub fn generate(cfg: &SynthConfig) -> Result<(RawDataset, GroundTruth), SynthError> {
    cfg.validate()?;
    let n = cfg.stations;
    let t_len = cfg.hours;
    let mut rng = StdRng::seed_from_u64(cfg.seed);

    // Phase 1: graph.
    let adjacency = draw_adjacency(&mut rng, n);

    // Phase 2: weather latents. Each channel is a shared city-wide AR(1)
    // base plus a weaker per-station AR(1) perturbation.
    let rho = cfg.weather_rho;
    let innovation = (1.0 - rho * rho).sqrt();
    let mut weather = vec![0.0; WEATHER_CHANNELS * n * t_len];
    for ch in 0..WEATHER_CHANNELS {
        let mut base = vec![0.0; t_len];
        let mut prev: f64 = rng.sample(StandardNormal);
        base[0] = prev;
        for t in 1..t_len {
            let z: f64 = rng.sample(StandardNormal);
            prev = rho * prev + innovation * z;
            base[t] = prev;
        }
        for s in 0..n {
            let mut pert_prev: f64 = rng.sample(StandardNormal);
            for t in 0..t_len {
                if t > 0 {
                    let z: f64 = rng.sample(StandardNormal);
                    pert_prev = rho * pert_prev + innovation * z;
                }
                weather[(ch * n + s) * t_len + t] = base[t] + 0.3 * pert_prev;
            }
        }
    }

    // Phase 3: traffic latents with daily periodic structure.
    let mut traffic = vec![0.0; TRAFFIC_CHANNELS * n * t_len];
    for ch in 0..TRAFFIC_CHANNELS {
        for s in 0..n {
            let station_gain = 1.0 + 0.2 * rng.random_range(-1.0f64..1.0);
            for t in 0..t_len {
                let z: f64 = rng.sample(StandardNormal);
                traffic[(ch * n + s) * t_len + t] =
                    station_gain * traffic_profile(t % 24) + 0.3 * z;
            }
        }
    }

    // Standardize the traffic latents so f() sees unit-scale inputs. The
    // weather latents are ~unit scale by construction.
    let mut traffic_std = traffic.clone();
    for ch in 0..TRAFFIC_CHANNELS {
        let slice = &mut traffic_std[ch * n * t_len..(ch + 1) * n * t_len];
        let mean = slice.iter().sum::<f64>() / slice.len() as f64;
        let var = slice.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / slice.len() as f64;
        let sd = var.sqrt().max(1e-9);
        for v in slice.iter_mut() {
            *v = (*v - mean) / sd;
        }
    }

    // Phase 4: target recursion y_t = a G y_{t-1} + b f + c g + noise.
    let mut y = vec![0.0; n * t_len];
    let mut prev_y = vec![0.0; n];
    for t in 0..t_len {
        for s in 0..n {
            let coupled: f64 = if t == 0 {
                0.0
            } else {
                (0..n).map(|k| adjacency[s * n + k] * prev_y[k]).sum()
            };
            let f_traffic = clip3(
                (0..TRAFFIC_CHANNELS)
                    .map(|ch| traffic_std[(ch * n + s) * t_len + t])
                    .sum::<f64>()
                    / TRAFFIC_CHANNELS as f64,
            );
            let g_weather = clip3(
                (0..WEATHER_CHANNELS)
                    .map(|ch| weather[(ch * n + s) * t_len + t])
                    .sum::<f64>()
                    / WEATHER_CHANNELS as f64,
            );
            let noise: f64 = rng.sample(StandardNormal);
            y[s * t_len + t] = cfg.graph_coupling * coupled
                + cfg.traffic_weight * f_traffic
                + cfg.weather_weight * g_weather
                + cfg.noise_std * noise;
        }
        for s in 0..n {
            prev_y[s] = y[s * t_len + t];
        }
    }

    // Affine map onto [0, 200] ug/m3.
    let lo = y.iter().cloned().fold(f64::MAX, f64::min);
    let hi = y.iter().cloned().fold(f64::MIN, f64::max);
    let (scale, offset) = if hi - lo < 1e-12 { (0.0, 100.0) } else { (200.0 / (hi - lo), -lo * 200.0 / (hi - lo)) };
    for v in y.iter_mut() {
        *v = scale * *v + offset;
    }

    // Phase 5: forecast noise on the emitted weather channels only.
    let mut emitted_weather = weather;
    if cfg.forecast_noise_std > 0.0 {
        for v in emitted_weather.iter_mut() {
            let z: f64 = rng.sample(StandardNormal);
            *v += cfg.forecast_noise_std * z;
        }
    }

    // Assemble in schema channel order.
    let start: NaiveDateTime =
        NaiveDate::from_ymd_opt(2019, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
    let timestamps: Vec<NaiveDateTime> =
        (0..t_len).map(|h| start + chrono::Duration::hours(h as i64)).collect();
    let station_ids: Vec<String> = (0..n).map(|s| format!("st{s:04}")).collect();
    let channels: Vec<String> = DATA_CHANNELS.iter().map(|c| c.to_string()).collect();

    let mut values = Vec::with_capacity(channels.len() * n * t_len);
    values.extend_from_slice(&y);
    for ch in 0..WEATHER_CHANNELS {
        let (off, sc, lo, hi) = WEATHER_PHYS[ch];
        for s in 0..n {
            for t in 0..t_len {
                let v = off + sc * emitted_weather[(ch * n + s) * t_len + t];
                values.push(v.clamp(lo, hi));
            }
        }
    }
    for ch in 0..TRAFFIC_CHANNELS {
        let (off, sc, lo, hi) = TRAFFIC_PHYS[ch];
        for s in 0..n {
            for t in 0..t_len {
                let v = off + sc * traffic[(ch * n + s) * t_len + t];
                values.push(v.clamp(lo, hi));
            }
        }
    }

    let dataset = RawDataset::new(timestamps, station_ids, channels, values);
    let truth = GroundTruth {
        adjacency,
        stations: n,
        graph_coupling: cfg.graph_coupling,
        traffic_weight: cfg.traffic_weight,
        weather_weight: cfg.weather_weight,
        noise_std: cfg.noise_std,
        weather_rho: cfg.weather_rho,
        affine_scale: scale,
        affine_offset: offset,
    };
    Ok((dataset, truth))
}

/// The planted structure for a config, without keeping the series.
pub fn ground_truth(cfg: &SynthConfig) -> Result<GroundTruth, SynthError> {
    Ok(generate(cfg)?.1)
}
