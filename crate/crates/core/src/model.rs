//! Plant parameterization shared by the optimizers, the plant emulator and
//! the experiment drivers.

use std::path::Path;

use chrono::{Duration, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ocv::OcvCurve;

/// Shipped default system: 180 kW / 180 kWh, 260s2p of 94 Ah NMC cells.
pub const DEFAULT_SYSTEM_TOML: &str = include_str!("../config/default_system.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSpec {
    pub q_nom_ah: f64,
    pub v_nom_v: f64,
    pub v_min_v: f64,
    pub v_max_v: f64,
    pub r_internal_ohm: f64,
    pub c_rate_max_per_h: f64,
}

impl CellSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.q_nom_ah > 0.0) {
            return Err(Error::param("cell.q_nom_ah", "must be positive"));
        }
        if !(0.0 < self.v_min_v && self.v_min_v < self.v_nom_v && self.v_nom_v < self.v_max_v) {
            return Err(Error::param("cell.v_nom_v", "require 0 < v_min < v_nom < v_max"));
        }
        if !(self.r_internal_ohm >= 0.0) {
            return Err(Error::param("cell.r_internal_ohm", "must be non-negative"));
        }
        if !(self.c_rate_max_per_h > 0.0) {
            return Err(Error::param("cell.c_rate_max_per_h", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PackLayout {
    pub series: u32,
    pub parallel: u32,
}

/// Converter loss curve `loss(p) = p_rated * (a + b |p|/p_rated + c (p/p_rated)^2)`,
/// with `p` the AC-side power. The curve itself lives in `plant`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConverterSpec {
    pub p_rated_w: f64,
    pub loss_a_pu: f64,
    pub loss_b_pu: f64,
    pub loss_c_pu: f64,
}

impl ConverterSpec {
    pub fn ideal(p_rated_w: f64) -> Self {
        Self {
            p_rated_w,
            loss_a_pu: 0.0,
            loss_b_pu: 0.0,
            loss_c_pu: 0.0,
        }
    }

    /// DC/AC efficiency when charging at rated power.
    pub fn efficiency_at_rated(&self) -> f64 {
        1.0 - (self.loss_a_pu + self.loss_b_pu + self.loss_c_pu)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.p_rated_w > 0.0) {
            return Err(Error::param("converter.p_rated_w", "must be positive"));
        }
        for (name, v) in [
            ("converter.loss_a_pu", self.loss_a_pu),
            ("converter.loss_b_pu", self.loss_b_pu),
            ("converter.loss_c_pu", self.loss_c_pu),
        ] {
            if !(v >= 0.0) {
                return Err(Error::param(name, "must be non-negative"));
            }
        }
        if !(self.efficiency_at_rated() > 0.9) {
            return Err(Error::param(
                "converter.loss_a_pu",
                "efficiency at rated power must exceed 0.9",
            ));
        }
        Ok(())
    }
}

/// Pack-level values derived from the cell by series/parallel scaling.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PackParams {
    pub series: u32,
    pub parallel: u32,
    pub q_nom_ah: f64,
    pub r_ohm: f64,
    pub v_nom_v: f64,
    pub v_min_v: f64,
    pub v_max_v: f64,
    pub i_max_a: f64,
}

impl PackParams {
    pub fn from_cell(cell: &CellSpec, layout: PackLayout) -> Self {
        let s = layout.series as f64;
        let p = layout.parallel as f64;
        Self {
            series: layout.series,
            parallel: layout.parallel,
            q_nom_ah: cell.q_nom_ah * p,
            r_ohm: cell.r_internal_ohm * s / p,
            v_nom_v: cell.v_nom_v * s,
            v_min_v: cell.v_min_v * s,
            v_max_v: cell.v_max_v * s,
            i_max_a: cell.c_rate_max_per_h * cell.q_nom_ah * p,
        }
    }

    /// Normalizes back to a single cell.
    pub fn to_cell(&self) -> CellSpec {
        let s = self.series as f64;
        let p = self.parallel as f64;
        let q_nom_ah = self.q_nom_ah / p;
        CellSpec {
            q_nom_ah,
            v_nom_v: self.v_nom_v / s,
            v_min_v: self.v_min_v / s,
            v_max_v: self.v_max_v / s,
            r_internal_ohm: self.r_ohm * p / s,
            c_rate_max_per_h: self.i_max_a / p / q_nom_ah,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemSpec {
    #[serde(rename = "soc_min_frac")]
    pub soc_min: f64,
    #[serde(rename = "soc_max_frac")]
    pub soc_max: f64,
    pub e_nom_wh: f64,
    /// Nameplate system voltage, if it differs from `series * cell.v_nom_v`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub v_nom_system_v: Option<f64>,
    pub cell: CellSpec,
    pub layout: PackLayout,
    pub converter: ConverterSpec,
    pub ocv: OcvCurve,
}

impl SystemSpec {
    pub fn validate(&self) -> Result<()> {
        self.cell.validate()?;
        if self.layout.series < 1 {
            return Err(Error::param("layout.series", "must be at least 1"));
        }
        if self.layout.parallel < 1 {
            return Err(Error::param("layout.parallel", "must be at least 1"));
        }
        self.converter.validate()?;
        if !(0.0 <= self.soc_min && self.soc_min < self.soc_max && self.soc_max <= 1.0) {
            return Err(Error::param("soc_min_frac", "require 0 <= soc_min < soc_max <= 1"));
        }
        let tol = 1e-9;
        if self.ocv.min_voltage() < self.cell.v_min_v - tol || self.ocv.max_voltage() > self.cell.v_max_v + tol {
            return Err(Error::param("ocv.voltage_v", "must lie within the cell voltage limits"));
        }
        let pack = self.pack_params();
        let v_ref = self.v_nom_system_v.unwrap_or(pack.v_nom_v);
        let e_ref = pack.q_nom_ah * v_ref;
        if !(self.e_nom_wh > 0.0) || ((self.e_nom_wh - e_ref) / e_ref).abs() > 0.02 {
            return Err(Error::param(
                "e_nom_wh",
                format!("inconsistent with pack charge times nominal voltage ({e_ref:.0} Wh) by more than 2%"),
            ));
        }
        Ok(())
    }

    pub fn pack_params(&self) -> PackParams {
        PackParams::from_cell(&self.cell, self.layout)
    }

    /// Pack OCV at `soc` (clamped).
    pub fn pack_ocv(&self, soc: f64) -> f64 {
        self.layout.series as f64 * self.ocv.value(soc)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    /// Resistance state of health, R / R_BOL.
    pub soh_r: f64,
    pub label: String,
}

impl Scenario {
    pub fn new(soh_r: f64) -> Self {
        Self {
            soh_r,
            label: format!("soh_r={soh_r}"),
        }
    }
}

/// Scales the cell resistance by the scenario's SOH_R; everything else is
/// left untouched.
pub fn apply_soh(spec: &SystemSpec, scenario: &Scenario) -> Result<SystemSpec> {
    if !(scenario.soh_r > 0.0) || !scenario.soh_r.is_finite() {
        return Err(Error::param("scenario.soh_r", "must be positive"));
    }
    let mut out = spec.clone();
    out.cell.r_internal_ohm *= scenario.soh_r;
    Ok(out)
}

/// System config file: the plant plus the scenario it is evaluated under.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SystemConfig {
    pub scenario: Scenario,
    pub system: SystemSpec,
}

impl SystemConfig {
    pub fn from_toml_str(s: &str) -> Result<Self> {
        let cfg: SystemConfig = toml::from_str(s)?;
        cfg.system.validate()?;
        if !(cfg.scenario.soh_r > 0.0) {
            return Err(Error::param("scenario.soh_r", "must be positive"));
        }
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }

    pub fn default_config() -> Self {
        Self::from_toml_str(DEFAULT_SYSTEM_TOML).expect("shipped default config is valid")
    }

    pub fn to_toml_string(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }
}

/// Uniform time grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t_start: NaiveDateTime,
    pub dt_s: u32,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t_start: NaiveDateTime, dt_s: u32, n_steps: usize) -> Result<Self> {
        if dt_s == 0 {
            return Err(Error::param("dt_s", "must be positive"));
        }
        if n_steps == 0 {
            return Err(Error::param("n_steps", "must be at least 1"));
        }
        Ok(Self { t_start, dt_s, n_steps })
    }

    pub fn dt_hours(&self) -> f64 {
        self.dt_s as f64 / 3600.0
    }

    pub fn time_at(&self, step: usize) -> NaiveDateTime {
        self.t_start + Duration::seconds(self.dt_s as i64 * step as i64)
    }

    /// End of the last step.
    pub fn end(&self) -> NaiveDateTime {
        self.time_at(self.n_steps)
    }

    pub fn duration_hours(&self) -> f64 {
        self.dt_hours() * self.n_steps as f64
    }

    /// Sub-grid of `len` steps starting at `offset`.
    pub fn slice(&self, offset: usize, len: usize) -> Self {
        Self {
            t_start: self.time_at(offset),
            dt_s: self.dt_s,
            n_steps: len,
        }
    }
}

/// Dispatch plan from an optimizer. Charging power is positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub grid: TimeGrid,
    pub p_ac_w: Vec<f64>,
    /// Predicted SOC at the end of each step.
    pub soc_pred: Vec<f64>,
    pub objective_eur: f64,
}

impl Schedule {
    /// Writes `timestamp,p_ac_w,soc_pred`.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["timestamp", "p_ac_w", "soc_pred"])?;
        for (k, p) in self.p_ac_w.iter().enumerate() {
            w.write_record([
                self.grid.time_at(k).format("%Y-%m-%dT%H:%M:%S").to_string(),
                p.to_string(),
                self.soc_pred.get(k).map(|s| s.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Reads the `timestamp` and `p_ac_w` columns of a schedule CSV. Timestamps
/// must be uniformly spaced.
pub fn read_schedule_csv(path: impl AsRef<Path>) -> Result<(TimeGrid, Vec<f64>)> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (Some(ct), Some(cp)) = (col("timestamp"), col("p_ac_w")) else {
        return Err(Error::Format {
            line: 1,
            reason: "header must contain `timestamp` and `p_ac_w`".into(),
        });
    };
    let mut times = Vec::new();
    let mut power = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let line = k + 2;
        let bad = |reason: &str| Error::Format {
            line,
            reason: reason.into(),
        };
        let rec = rec.map_err(|e| bad(&e.to_string()))?;
        let t = rec
            .get(ct)
            .and_then(crate::market::parse_timestamp)
            .ok_or_else(|| bad("unparsable timestamp"))?;
        let p: f64 = rec
            .get(cp)
            .and_then(|s| s.parse().ok())
            .filter(|p: &f64| p.is_finite())
            .ok_or_else(|| bad("unparsable power"))?;
        times.push(t);
        power.push(p);
    }
    if times.len() < 2 {
        return Err(Error::Format {
            line: times.len() + 1,
            reason: "need at least two rows to infer the step".into(),
        });
    }
    let step = (times[1] - times[0]).num_seconds();
    for (k, w) in times.windows(2).enumerate() {
        if (w[1] - w[0]).num_seconds() != step || step <= 0 {
            return Err(Error::Format {
                line: k + 3,
                reason: format!("timestamps must advance uniformly by {step} s"),
            });
        }
    }
    Ok((TimeGrid::new(times[0], step as u32, times.len())?, power))
}
