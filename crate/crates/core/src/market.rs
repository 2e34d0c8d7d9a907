//! Electricity price series: CSV ingestion, resampling and a seeded
//! synthetic generator.
//!
//! Synthetic prices follow
//!
//! ```text
//! price[k] = base + amplitude * cos(2*pi*(h_k - 8) / 12) + noise_sd * z_k
//! ```
//!
//! where `h_k` is the hour of day at the start of step `k` (peaks at 08:00
//! and 20:00, troughs at 02:00 and 14:00) and `z_k` are standard normal
//! draws taken in step order from `ChaCha8Rng::seed_from_u64(seed)` via
//! `rand_distr::StandardNormal`.

use std::io::Write;
use std::path::Path;

use chrono::{DateTime, NaiveDateTime, Timelike};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::TimeGrid;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PriceSeries {
    pub grid: TimeGrid,
    pub prices_eur_mwh: Vec<f64>,
}

impl PriceSeries {
    pub fn new(grid: TimeGrid, prices_eur_mwh: Vec<f64>) -> Result<Self> {
        if prices_eur_mwh.len() != grid.n_steps {
            return Err(Error::param(
                "prices",
                format!("{} values for a grid of {} steps", prices_eur_mwh.len(), grid.n_steps),
            ));
        }
        if let Some(k) = prices_eur_mwh.iter().position(|p| !p.is_finite()) {
            return Err(Error::param("prices", format!("non-finite value at step {k}")));
        }
        Ok(Self { grid, prices_eur_mwh })
    }

    pub fn len(&self) -> usize {
        self.prices_eur_mwh.len()
    }

    pub fn is_empty(&self) -> bool {
        self.prices_eur_mwh.is_empty()
    }

    /// Time-weighted mean price.
    pub fn mean(&self) -> f64 {
        self.prices_eur_mwh.iter().sum::<f64>() / self.len() as f64
    }

    /// Maps the series onto `target`. Coarser sources are held constant
    /// over each source interval; finer sources are averaged over each
    /// target interval. Step lengths must divide each other and the target
    /// must be aligned with source interval boundaries.
    pub fn resample(&self, target: &TimeGrid) -> Result<PriceSeries> {
        let src = &self.grid;
        let offset_s = (target.t_start - src.t_start).num_seconds();
        let span_end_s = (target.end() - src.t_start).num_seconds();
        let src_end_s = (src.end() - src.t_start).num_seconds();
        if offset_s < 0 || span_end_s > src_end_s {
            return Err(Error::Coverage(format!(
                "{} .. {} (available {} .. {})",
                target.t_start,
                target.end(),
                src.t_start,
                src.end()
            )));
        }
        let (sdt, tdt) = (src.dt_s as i64, target.dt_s as i64);
        let prices = if sdt >= tdt {
            if sdt % tdt != 0 || offset_s % tdt != 0 {
                return Err(Error::param("grid", "target steps do not nest in source steps"));
            }
            (0..target.n_steps)
                .map(|k| {
                    let t = offset_s + k as i64 * tdt;
                    self.prices_eur_mwh[(t / sdt) as usize]
                })
                .collect()
        } else {
            if tdt % sdt != 0 || offset_s % sdt != 0 {
                return Err(Error::param("grid", "source steps do not nest in target steps"));
            }
            let ratio = (tdt / sdt) as usize;
            let first = (offset_s / sdt) as usize;
            (0..target.n_steps)
                .map(|k| {
                    let s = first + k * ratio;
                    self.prices_eur_mwh[s..s + ratio].iter().sum::<f64>() / ratio as f64
                })
                .collect()
        };
        PriceSeries::new(*target, prices)
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "timestamp,price_eur_mwh")?;
        for (k, p) in self.prices_eur_mwh.iter().enumerate() {
            writeln!(f, "{},{}", self.grid.time_at(k).format("%Y-%m-%dT%H:%M:%S"), p)?;
        }
        f.flush()?;
        Ok(())
    }
}

pub(crate) fn parse_timestamp(s: &str) -> Option<NaiveDateTime> {
    let s = s.trim();
    if let Ok(dt) = DateTime::parse_from_rfc3339(s) {
        return Some(dt.naive_utc());
    }
    ["%Y-%m-%dT%H:%M:%S", "%Y-%m-%d %H:%M:%S", "%Y-%m-%dT%H:%M", "%Y-%m-%d %H:%M"]
        .iter()
        .find_map(|fmt| NaiveDateTime::parse_from_str(s, fmt).ok())
}

/// Reads a `timestamp,price_eur_mwh` CSV and resamples it onto `target`.
pub fn load_prices(path: impl AsRef<Path>, target: &TimeGrid) -> Result<PriceSeries> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    if headers.get(0) != Some("timestamp") || headers.get(1) != Some("price_eur_mwh") {
        return Err(Error::Format {
            line: 1,
            reason: "header must be `timestamp,price_eur_mwh`".into(),
        });
    }
    let mut times = Vec::new();
    let mut prices = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let rec = rec.map_err(|e| Error::Format {
            line,
            reason: e.to_string(),
        })?;
        let t = rec.get(0).and_then(parse_timestamp).ok_or_else(|| Error::Format {
            line,
            reason: "unparsable timestamp".into(),
        })?;
        let p: f64 = rec
            .get(1)
            .and_then(|s| s.parse().ok())
            .filter(|p: &f64| p.is_finite())
            .ok_or_else(|| Error::Format {
                line,
                reason: "unparsable price".into(),
            })?;
        times.push(t);
        prices.push(p);
    }
    if times.len() < 2 {
        return Err(Error::Format {
            line: times.len() + 1,
            reason: "need at least two rows to infer the step".into(),
        });
    }
    let mut step = i64::MAX;
    for (k, w) in times.windows(2).enumerate() {
        let d = (w[1] - w[0]).num_seconds();
        if d <= 0 {
            return Err(Error::Format {
                line: k + 3,
                reason: "timestamps not strictly increasing".into(),
            });
        }
        step = step.min(d);
    }
    for (k, w) in times.windows(2).enumerate() {
        let d = (w[1] - w[0]).num_seconds();
        if d % step != 0 {
            return Err(Error::Format {
                line: k + 3,
                reason: format!("non-uniform step of {d} s (expected {step} s)"),
            });
        }
        if d != step {
            return Err(Error::Gap {
                missing: w[0] + chrono::Duration::seconds(step),
            });
        }
    }
    let src_grid = TimeGrid::new(times[0], step as u32, times.len())?;
    PriceSeries::new(src_grid, prices)?.resample(target)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthParams {
    pub base_eur_mwh: f64,
    pub daily_amplitude_eur_mwh: f64,
    pub noise_sd_eur_mwh: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            base_eur_mwh: 100.0,
            daily_amplitude_eur_mwh: 50.0,
            noise_sd_eur_mwh: 10.0,
        }
    }
}

/// Daily shape in [-1, 1]: peaks at 08:00 and 20:00.
pub fn daily_shape(t: NaiveDateTime) -> f64 {
    let h = t.num_seconds_from_midnight() as f64 / 3600.0;
    (2.0 * std::f64::consts::PI * (h - 8.0) / 12.0).cos()
}

pub fn synth_prices(seed: u64, grid: &TimeGrid, params: &SynthParams) -> Result<PriceSeries> {
    if !(params.daily_amplitude_eur_mwh >= 0.0) {
        return Err(Error::param("daily_amplitude_eur_mwh", "must be non-negative"));
    }
    if !(params.noise_sd_eur_mwh >= 0.0) {
        return Err(Error::param("noise_sd_eur_mwh", "must be non-negative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let prices = (0..grid.n_steps)
        .map(|k| {
            let z: f64 = StandardNormal.sample(&mut rng);
            params.base_eur_mwh
                + params.daily_amplitude_eur_mwh * daily_shape(grid.time_at(k))
                + params.noise_sd_eur_mwh * z
        })
        .collect();
    PriceSeries::new(*grid, prices)
}
