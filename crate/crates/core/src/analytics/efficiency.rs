//! Steady-state efficiency maps (discharge direction) and constant
//! efficiency fits used to parameterize the optimizers.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{apply_soh, Scenario, SystemSpec};
use crate::plant::battery_step;

/// Efficiencies per (soc, power) point. `None` marks operating points the
/// plant cannot reach.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficiencyMap {
    pub soc_grid: Vec<f64>,
    /// AC output power, discharge direction [W].
    pub power_grid_w: Vec<f64>,
    pub system: Vec<Vec<Option<f64>>>,
    pub battery: Vec<Vec<Option<f64>>>,
    pub converter: Vec<Vec<Option<f64>>>,
}

/// Power grid at 5% increments of rated power, 5% .. 100%.
pub fn default_power_grid(p_rated_w: f64) -> Vec<f64> {
    (1..=20).map(|k| p_rated_w * k as f64 / 20.0).collect()
}

/// SOC grid at 5% increments, 5% .. 95%.
pub fn default_soc_grid() -> Vec<f64> {
    (1..20).map(|k| k as f64 / 20.0).collect()
}

pub fn characterize(
    spec: &SystemSpec,
    scenario: &Scenario,
    soc_grid: &[f64],
    power_grid_w: &[f64],
) -> Result<EfficiencyMap> {
    let spec = apply_soh(spec, scenario)?;
    let pack = spec.pack_params();
    let conv = &spec.converter;
    if let Some(s) = soc_grid.iter().find(|s| !(0.0..=1.0).contains(*s)) {
        return Err(Error::SocDomain(*s));
    }
    if let Some(p) = power_grid_w.iter().find(|p| !(**p > 0.0 && **p <= conv.p_rated_w)) {
        return Err(Error::PowerRange {
            power_w: *p,
            rated_w: conv.p_rated_w,
        });
    }
    let mut system = Vec::with_capacity(soc_grid.len());
    let mut battery = Vec::with_capacity(soc_grid.len());
    let mut converter = Vec::with_capacity(soc_grid.len());
    for &soc in soc_grid {
        let mut row_s = Vec::with_capacity(power_grid_w.len());
        let mut row_b = Vec::with_capacity(power_grid_w.len());
        let mut row_c = Vec::with_capacity(power_grid_w.len());
        for &p in power_grid_w {
            let p_dc = conv.ac_to_dc(-p)?;
            // Steady state: SOC limits do not apply to a single point.
            let b = battery_step(&pack, &spec.ocv, soc, p_dc, 1.0, (f64::NEG_INFINITY, f64::INFINITY));
            if b.clip.is_some() {
                row_s.push(None);
                row_b.push(None);
                row_c.push(None);
                continue;
            }
            let internal = -b.ocv_v * b.current_a;
            row_b.push(Some(-p_dc / internal));
            row_c.push(Some(p / -p_dc));
            row_s.push(Some(p / internal));
        }
        system.push(row_s);
        battery.push(row_b);
        converter.push(row_c);
    }
    Ok(EfficiencyMap {
        soc_grid: soc_grid.to_vec(),
        power_grid_w: power_grid_w.to_vec(),
        system,
        battery,
        converter,
    })
}

impl EfficiencyMap {
    /// Long-format CSV: `soc,power_w,system,battery,converter` with empty
    /// cells for unreachable points.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        writeln!(f, "soc,power_w,system_eff,battery_eff,converter_eff")?;
        let cell = |x: Option<f64>| x.map(|v| v.to_string()).unwrap_or_default();
        for (i, soc) in self.soc_grid.iter().enumerate() {
            for (j, p) in self.power_grid_w.iter().enumerate() {
                writeln!(
                    f,
                    "{},{},{},{},{}",
                    soc,
                    p,
                    cell(self.system[i][j]),
                    cell(self.battery[i][j]),
                    cell(self.converter[i][j])
                )?;
            }
        }
        f.flush()?;
        Ok(())
    }

    fn row_at(&self, soc: f64) -> Option<usize> {
        self.soc_grid.iter().position(|s| (s - soc).abs() < 1e-12)
    }
}

/// Least-squares fit of a constant one-way efficiency `eta` to the energy
/// losses along the 50% SOC row: loss(p) ~ p (1/eta - 1). With
/// `include_battery = false` only converter losses are fitted.
pub fn fit_constant_eta(map: &EfficiencyMap, include_battery: bool) -> Result<f64> {
    let row = map
        .row_at(0.5)
        .ok_or_else(|| Error::Fit("map has no 50% SOC row".into()))?;
    let effs = if include_battery {
        &map.system[row]
    } else {
        &map.converter[row]
    };
    let (mut lp, mut pp) = (0.0, 0.0);
    for (p, eff) in map.power_grid_w.iter().zip(effs) {
        if let Some(e) = eff {
            let loss = p * (1.0 / e - 1.0);
            lp += loss * p;
            pp += p * p;
        }
    }
    if pp == 0.0 {
        return Err(Error::Fit("no reachable operating points at 50% SOC".into()));
    }
    Ok(1.0 / (1.0 + lp / pp))
}

/// Fitted efficiencies for a scenario on the default grids.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FittedEfficiencies {
    /// Whole-system one-way efficiency (linear model).
    pub eta_system: f64,
    /// Converter-only efficiency (equivalent-circuit model).
    pub eta_converter: f64,
}

pub fn fitted_efficiencies(spec: &SystemSpec, scenario: &Scenario) -> Result<FittedEfficiencies> {
    let map = characterize(spec, scenario, &[0.5], &default_power_grid(spec.converter.p_rated_w))?;
    Ok(FittedEfficiencies {
        eta_system: fit_constant_eta(&map, true)?,
        eta_converter: fit_constant_eta(&map, false)?,
    })
}
