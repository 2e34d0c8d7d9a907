//! Plant emulator: equivalent-circuit battery behind a converter with a
//! load-dependent loss curve. Executes AC setpoints, clipping whatever the
//! hardware cannot deliver and logging each clip.
//!
//! Clipping is applied in a fixed order: converter rating, current limit,
//! voltage limit, SOC limit. After any battery-side clip the delivered AC
//! power is recomputed from the feasible current so that the reported
//! delivery is exactly realizable.

use std::io::Write;
use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ConverterSpec, PackParams, SystemSpec};
use crate::ocv::OcvCurve;

impl ConverterSpec {
    /// Converter loss at AC power `p_ac_w`. No loss while idle.
    pub fn loss_w(&self, p_ac_w: f64) -> f64 {
        if p_ac_w == 0.0 {
            return 0.0;
        }
        let x = p_ac_w.abs() / self.p_rated_w;
        self.p_rated_w * (self.loss_a_pu + self.loss_b_pu * x + self.loss_c_pu * x * x)
    }

    /// DC power into the battery for an AC setpoint (both charge-positive):
    /// `p_dc = p_ac - loss(p_ac)`.
    pub fn ac_to_dc(&self, p_ac_w: f64) -> Result<f64> {
        if p_ac_w.abs() > self.p_rated_w * (1.0 + 1e-12) {
            return Err(Error::PowerRange {
                power_w: p_ac_w,
                rated_w: self.p_rated_w,
            });
        }
        Ok(p_ac_w - self.loss_w(p_ac_w))
    }

    /// Inverse of [`ac_to_dc`](Self::ac_to_dc), solved in closed form.
    /// `p_dc = 0` maps to an idle converter.
    pub fn dc_to_ac(&self, p_dc_w: f64) -> Result<f64> {
        if p_dc_w == 0.0 {
            return Ok(0.0);
        }
        let pr = self.p_rated_w;
        let (a, b, c) = (self.loss_a_pu, self.loss_b_pu, self.loss_c_pu);
        let alpha = c / pr;
        // Both branches: alpha q^2 -/+ beta q + gamma = 0 with q = |p_ac|,
        // solved in the cancellation-free form of the smaller root.
        let gamma = a * pr + p_dc_w;
        let p_ac = if gamma >= 0.0 {
            // Charging: p_dc = q - loss(q).
            let beta = 1.0 - b;
            let disc = beta * beta - 4.0 * alpha * gamma;
            if disc < 0.0 {
                f64::NAN
            } else {
                2.0 * gamma / (beta + disc.sqrt())
            }
        } else {
            // Discharging: p_dc = -q - loss(q).
            let beta = 1.0 + b;
            let g = -gamma;
            -2.0 * g / (beta + (beta * beta + 4.0 * alpha * g).sqrt())
        };
        if !p_ac.is_finite() || p_ac.abs() > pr * (1.0 + 1e-9) {
            return Err(Error::PowerRange {
                power_w: p_dc_w,
                rated_w: pr,
            });
        }
        Ok(p_ac)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ClipReason {
    ConverterRating,
    MaxPower,
    CurrentLimit,
    VoltageLimit,
    SocLimit,
}

impl ClipReason {
    pub fn as_str(&self) -> &'static str {
        match self {
            ClipReason::ConverterRating => "converter-rating",
            ClipReason::MaxPower => "max-power",
            ClipReason::CurrentLimit => "current-limit",
            ClipReason::VoltageLimit => "voltage-limit",
            ClipReason::SocLimit => "soc-limit",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [
            ClipReason::ConverterRating,
            ClipReason::MaxPower,
            ClipReason::CurrentLimit,
            ClipReason::VoltageLimit,
            ClipReason::SocLimit,
        ]
        .into_iter()
        .find(|r| r.as_str() == s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantState {
    pub soc: f64,
    /// AC throughput delivered since midnight of `clock`'s date.
    pub throughput_today_wh: f64,
    pub clock: NaiveDateTime,
}

impl PlantState {
    pub fn new(soc: f64, clock: NaiveDateTime) -> Self {
        Self {
            soc,
            throughput_today_wh: 0.0,
            clock,
        }
    }
}

/// Outcome of one battery step for a DC power request.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatteryStep {
    pub current_a: f64,
    pub voltage_v: f64,
    pub ocv_v: f64,
    pub p_dc_w: f64,
    pub soc_next: f64,
    pub clip: Option<ClipReason>,
}

/// Solves `p_dc = (ocv(soc) + i R) i` for the current, then clips current,
/// terminal voltage and SOC to the pack limits. `soc_window` bounds the SOC.
pub fn battery_step(
    pack: &PackParams,
    ocv: &OcvCurve,
    soc: f64,
    p_dc_target_w: f64,
    dt_s: f64,
    soc_window: (f64, f64),
) -> BatteryStep {
    let r = pack.r_ohm;
    let ocv_v = pack.series as f64 * ocv.value(soc);
    let dt_h = dt_s / 3600.0;
    let mut clip = None;

    let mut i = if r > 0.0 {
        let disc = ocv_v * ocv_v + 4.0 * r * p_dc_target_w;
        if disc < 0.0 {
            clip = Some(ClipReason::MaxPower);
            -ocv_v / (2.0 * r)
        } else {
            2.0 * p_dc_target_w / (ocv_v + disc.sqrt())
        }
    } else {
        p_dc_target_w / ocv_v
    };

    if i.abs() > pack.i_max_a {
        i = pack.i_max_a.copysign(i);
        clip = clip.or(Some(ClipReason::CurrentLimit));
    }
    let v = ocv_v + i * r;
    if v > pack.v_max_v {
        i = if r > 0.0 { ((pack.v_max_v - ocv_v) / r).max(0.0) } else { 0.0 };
        clip = Some(ClipReason::VoltageLimit);
    } else if v < pack.v_min_v {
        i = if r > 0.0 { ((pack.v_min_v - ocv_v) / r).min(0.0) } else { 0.0 };
        clip = Some(ClipReason::VoltageLimit);
    }
    let (soc_min, soc_max) = soc_window;
    let next = soc + i * dt_h / pack.q_nom_ah;
    if next > soc_max {
        i = ((soc_max - soc) * pack.q_nom_ah / dt_h).max(0.0);
        clip = Some(ClipReason::SocLimit);
    } else if next < soc_min {
        i = ((soc_min - soc) * pack.q_nom_ah / dt_h).min(0.0);
        clip = Some(ClipReason::SocLimit);
    }

    let (p_dc_w, soc_next) = if clip.is_some() {
        let p = (ocv_v + i * r) * i;
        let s = if i == 0.0 { soc } else { soc + i * dt_h / pack.q_nom_ah };
        (p, s)
    } else {
        (p_dc_target_w, soc + i * dt_h / pack.q_nom_ah)
    };
    let soc_next = match clip {
        Some(ClipReason::SocLimit) if i > 0.0 => soc_max,
        Some(ClipReason::SocLimit) if i < 0.0 => soc_min,
        _ => soc_next,
    };
    BatteryStep {
        current_a: i,
        voltage_v: ocv_v + i * r,
        ocv_v,
        p_dc_w,
        soc_next,
        clip,
    }
}

/// One simulated step as recorded in the plant ledger.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepResult {
    pub t: NaiveDateTime,
    pub dt_s: f64,
    pub p_target_w: f64,
    pub p_ac_w: f64,
    pub p_dc_w: f64,
    pub current_a: f64,
    pub voltage_v: f64,
    pub ocv_v: f64,
    pub soc_before: f64,
    pub soc_after: f64,
    pub loss_converter_wh: f64,
    pub loss_battery_wh: f64,
    /// Energy moved across the OCV source, `ocv * i * dt`.
    pub stored_wh: f64,
    pub clip: Option<ClipReason>,
    /// `|target - delivered| * dt`.
    pub clip_wh: f64,
}

/// Battery plus converter with fixed parameters.
#[derive(Debug, Clone)]
pub struct Plant {
    pack: PackParams,
    converter: ConverterSpec,
    ocv: OcvCurve,
    soc_window: (f64, f64),
}

impl Plant {
    pub fn new(spec: &SystemSpec) -> Result<Self> {
        spec.validate()?;
        Ok(Self {
            pack: spec.pack_params(),
            converter: spec.converter.clone(),
            ocv: spec.ocv.clone(),
            soc_window: (spec.soc_min, spec.soc_max),
        })
    }

    pub fn pack(&self) -> &PackParams {
        &self.pack
    }

    pub fn converter(&self) -> &ConverterSpec {
        &self.converter
    }

    /// Executes `target_w` for `dt_s` seconds and advances `state`.
    pub fn step(&self, state: &mut PlantState, target_w: f64, dt_s: u32) -> StepResult {
        let dt = dt_s as f64;
        let dt_h = dt / 3600.0;
        let pr = self.converter.p_rated_w;
        let mut clip = None;
        let mut p_ac = target_w;
        if p_ac.abs() > pr {
            p_ac = pr.copysign(p_ac);
            clip = Some(ClipReason::ConverterRating);
        }
        let p_dc_req = self.converter.ac_to_dc(p_ac).expect("clamped to rating");
        let soc_before = state.soc;
        let mut b = battery_step(&self.pack, &self.ocv, soc_before, p_dc_req, dt, self.soc_window);
        if b.clip.is_some() {
            clip = b.clip;
            let back = self.converter.dc_to_ac(b.p_dc_w).unwrap_or(0.0);
            // A battery that cannot even cover the converter's own losses in
            // the requested direction leaves the converter idle.
            if back == 0.0 || back.signum() != p_ac.signum() {
                p_ac = 0.0;
                b = BatteryStep {
                    current_a: 0.0,
                    voltage_v: b.ocv_v,
                    ocv_v: b.ocv_v,
                    p_dc_w: 0.0,
                    soc_next: soc_before,
                    clip: b.clip,
                };
            } else {
                p_ac = back;
            }
        }
        let loss_conv = self.converter.loss_w(p_ac);
        let loss_batt = b.current_a * b.current_a * self.pack.r_ohm;

        state.soc = b.soc_next;
        let t = state.clock;
        // Throughput is booked on the calendar day the step starts in.
        if (t - chrono::Duration::seconds(1)).date() != t.date() {
            state.throughput_today_wh = 0.0;
        }
        state.clock = t + chrono::Duration::seconds(dt_s as i64);
        state.throughput_today_wh += p_ac.abs() * dt_h;

        StepResult {
            t,
            dt_s: dt,
            p_target_w: target_w,
            p_ac_w: p_ac,
            p_dc_w: b.p_dc_w,
            current_a: b.current_a,
            voltage_v: b.voltage_v,
            ocv_v: b.ocv_v,
            soc_before,
            soc_after: b.soc_next,
            loss_converter_wh: loss_conv * dt_h,
            loss_battery_wh: loss_batt * dt_h,
            stored_wh: b.ocv_v * b.current_a * dt_h,
            clip,
            clip_wh: (target_w - p_ac).abs() * dt_h,
        }
    }
}

/// Runs a target series through the plant.
pub fn simulate(
    spec: &SystemSpec,
    state0: PlantState,
    targets_w: &[f64],
    dt_s: u32,
) -> Result<(Vec<StepResult>, PlantState)> {
    if let Some(k) = targets_w.iter().position(|p| !p.is_finite()) {
        return Err(Error::param("targets", format!("non-finite target at step {k}")));
    }
    let plant = Plant::new(spec)?;
    let mut state = state0;
    let steps = targets_w.iter().map(|&p| plant.step(&mut state, p, dt_s)).collect();
    Ok((steps, state))
}

pub fn write_step_csv(steps: &[StepResult], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(
        f,
        "timestamp,target_w,actual_w,soc,current_a,voltage_v,loss_converter_wh,loss_battery_wh,clip_reason"
    )?;
    for s in steps {
        writeln!(
            f,
            "{},{},{},{},{},{},{},{},{}",
            s.t.format("%Y-%m-%dT%H:%M:%S"),
            s.p_target_w,
            s.p_ac_w,
            s.soc_after,
            s.current_a,
            s.voltage_v,
            s.loss_converter_wh,
            s.loss_battery_wh,
            s.clip.map(|c| c.as_str()).unwrap_or("")
        )?;
    }
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{apply_soh, Scenario, SystemConfig};
    use crate::ocv::OcvCurve;
    use proptest::prelude::*;

    fn spec() -> SystemSpec {
        SystemConfig::default_config().system
    }

    fn t0() -> NaiveDateTime {
        crate::market::parse_timestamp("2021-01-04T00:00:00").unwrap()
    }

    #[test]
    fn converter_idle_and_ideal() {
        let conv = spec().converter;
        assert_eq!(conv.ac_to_dc(0.0).unwrap(), 0.0);
        assert_eq!(conv.dc_to_ac(0.0).unwrap(), 0.0);
        let ideal = ConverterSpec::ideal(180e3);
        for p in [-180e3, -1.0, 0.0, 3.0, 90e3, 180e3] {
            assert_eq!(ideal.ac_to_dc(p).unwrap(), p);
            assert_eq!(ideal.dc_to_ac(p).unwrap(), p);
        }
    }

    #[test]
    fn converter_standby_draw() {
        let conv = spec().converter;
        // Just above zero the converter already burns its constant loss.
        let p = conv.ac_to_dc(1e-9).unwrap();
        assert!((p + conv.p_rated_w * conv.loss_a_pu).abs() < 1e-6);
    }

    #[test]
    fn converter_range_error() {
        let conv = spec().converter;
        assert!(matches!(conv.ac_to_dc(200e3), Err(Error::PowerRange { .. })));
    }

    #[test]
    fn converter_half_rating_round_trip() {
        let conv = spec().converter;
        for p_dc in [90e3, -90e3] {
            let ac = conv.dc_to_ac(p_dc).unwrap();
            let back = conv.ac_to_dc(ac).unwrap();
            assert!(((back - p_dc) / p_dc).abs() <= 1e-9);
        }
    }

    #[test]
    fn converter_partial_load_dip() {
        let conv = spec().converter;
        // Discharge direction: AC output over DC drawn from the battery.
        let eff = |p: f64| p / -conv.ac_to_dc(-p).unwrap();
        let e5 = eff(0.05 * conv.p_rated_w);
        let e50 = eff(0.5 * conv.p_rated_w);
        let e100 = eff(conv.p_rated_w);
        assert!(e5 < e50 - 0.02);
        assert!((e50 - e100).abs() < 0.01);
        assert!(eff(1.0) < 0.01);
    }

    proptest! {
        #[test]
        fn converter_inverse_consistent(x in -1.0f64..1.0) {
            let conv = spec().converter;
            let p_ac = x * conv.p_rated_w;
            prop_assume!(p_ac != 0.0);
            let dc = conv.ac_to_dc(p_ac).unwrap();
            let back = conv.dc_to_ac(dc).unwrap();
            prop_assert!((back - p_ac).abs() <= 1e-9 * conv.p_rated_w);
        }
    }

    #[test]
    fn battery_zero_power() {
        let s = spec();
        let b = battery_step(&s.pack_params(), &s.ocv, 0.5, 0.0, 60.0, (0.0, 1.0));
        assert_eq!(b.current_a, 0.0);
        assert_eq!(b.soc_next, 0.5);
        assert!(b.clip.is_none());
    }

    #[test]
    fn battery_lossless_division() {
        let s = spec();
        let mut pack = s.pack_params();
        pack.r_ohm = 0.0;
        let ocv = OcvCurve::constant(956.8 / pack.series as f64);
        let b = battery_step(&pack, &ocv, 0.5, 95_680.0, 60.0, (0.0, 1.0));
        assert!((b.current_a - 100.0).abs() < 1e-9);
    }

    #[test]
    fn battery_quadratic_root_at_rated_discharge() {
        let s = spec();
        let pack = s.pack_params();
        assert!((pack.r_ohm - 0.10647).abs() < 1e-12);
        let b = battery_step(&pack, &s.ocv, 0.5, -180e3, 60.0, (0.0, 1.0));
        assert!(b.clip.is_none());
        assert!(((b.voltage_v * b.current_a - (-180e3)) / 180e3).abs() < 1e-9);
        assert!(b.current_a * b.current_a * pack.r_ohm > 0.0);
        // Discharging needs more current than the loss-free estimate.
        assert!(b.current_a < -180e3 / b.ocv_v);
    }

    #[test]
    fn battery_beyond_max_power_is_clipped() {
        let s = spec();
        let mut pack = s.pack_params();
        pack.r_ohm = 2.0;
        pack.v_min_v = 1.0;
        pack.i_max_a = 1e6;
        let ocv = 3.68 * 260.0;
        let p_max = ocv * ocv / (4.0 * pack.r_ohm);
        let b = battery_step(&pack, &s.ocv, 0.5, -2.0 * p_max, 1.0, (0.0, 1.0));
        assert_eq!(b.clip, Some(ClipReason::MaxPower));
        assert!((b.p_dc_w + p_max).abs() / p_max < 1e-9);
    }

    #[test]
    fn full_discharge_at_soc_min_delivers_nothing() {
        let mut s = spec();
        s.soc_min = 0.1;
        let mut state = PlantState::new(0.1, t0());
        let plant = Plant::new(&s).unwrap();
        let r = plant.step(&mut state, -180e3, 60);
        assert_eq!(r.p_ac_w, 0.0);
        assert_eq!(r.clip, Some(ClipReason::SocLimit));
        assert_eq!(state.soc, 0.1);
    }

    #[test]
    fn zero_targets_change_nothing() {
        let s = spec();
        let (steps, end) = simulate(&s, PlantState::new(0.4, t0()), &[0.0; 120], 60).unwrap();
        assert!(steps.iter().all(|r| r.p_ac_w == 0.0 && r.clip.is_none()));
        assert_eq!(end.soc, 0.4);
        assert_eq!(end.throughput_today_wh, 0.0);
    }

    #[test]
    fn rating_clip_is_logged() {
        let s = spec();
        let mut state = PlantState::new(0.5, t0());
        let r = Plant::new(&s).unwrap().step(&mut state, 250e3, 60);
        assert_eq!(r.clip, Some(ClipReason::ConverterRating));
        assert_eq!(r.p_ac_w, 180e3);
        assert!((r.clip_wh - 70e3 / 60.0).abs() < 1e-9);
    }

    fn energy_balance_ok(r: &StepResult) -> bool {
        let scale = 180e3 * r.dt_s / 3600.0;
        let ac = r.p_ac_w * r.dt_s / 3600.0;
        let residual = ac - r.loss_converter_wh - r.loss_battery_wh - r.stored_wh;
        let conv_res = ac - r.p_dc_w * r.dt_s / 3600.0 - r.loss_converter_wh;
        residual.abs() <= 1e-6 * scale && conv_res.abs() <= 1e-9 * scale
    }

    #[test]
    fn conservation_and_clip_accounting() {
        let s = apply_soh(&spec(), &Scenario::new(3.0)).unwrap();
        let targets: Vec<f64> = (0..3000).map(|k| if (k / 400) % 2 == 0 { 200e3 } else { -200e3 }).collect();
        let (steps, _) = simulate(&s, PlantState::new(0.5, t0()), &targets, 60).unwrap();
        assert!(steps.iter().all(energy_balance_ok));
        let gap: f64 = steps.iter().map(|r| (r.p_target_w - r.p_ac_w).abs() * r.dt_s / 3600.0).sum();
        let logged: f64 = steps.iter().filter(|r| r.clip.is_some()).map(|r| r.clip_wh).sum();
        assert_eq!(gap, logged);
        assert!(steps.iter().all(|r| r.clip.is_some() || r.p_ac_w == r.p_target_w));
        assert!(steps.iter().all(|r| r.p_ac_w.abs() <= r.p_target_w.abs()));
        assert!(steps.iter().any(|r| r.clip == Some(ClipReason::VoltageLimit)));
    }

    #[test]
    fn higher_resistance_never_delivers_more_discharge() {
        let targets: Vec<f64> = (0..600).map(|k| if k < 300 { 180e3 } else { -180e3 }).collect();
        let mut prev = f64::INFINITY;
        for soh in [1.0, 2.0, 3.0, 4.0] {
            let s = apply_soh(&spec(), &Scenario::new(soh)).unwrap();
            let (steps, _) = simulate(&s, PlantState::new(0.3, t0()), &targets, 60).unwrap();
            let out: f64 = steps.iter().filter(|r| r.p_ac_w < 0.0).map(|r| -r.p_ac_w / 60.0).sum();
            assert!(out <= prev + 1e-9, "soh {soh}: {out} > {prev}");
            prev = out;
        }
    }

    #[test]
    fn throughput_resets_at_midnight() {
        let s = spec();
        let start = crate::market::parse_timestamp("2021-01-04T23:58:00").unwrap();
        let (_, end) = simulate(&s, PlantState::new(0.5, start), &[60e3; 4], 60).unwrap();
        assert!((end.throughput_today_wh - 2.0 * 1000.0).abs() < 1e-9);
    }

    #[test]
    fn ledger_csv_has_clip_reason() {
        let s = spec();
        let (steps, _) = simulate(&s, PlantState::new(0.5, t0()), &[250e3, 0.0], 60).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("steps.csv");
        write_step_csv(&steps, &p).unwrap();
        let text = std::fs::read_to_string(p).unwrap();
        assert!(text.lines().nth(1).unwrap().ends_with("converter-rating"));
        assert_eq!(text.lines().count(), 3);
    }
}
