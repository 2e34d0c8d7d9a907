//! Run ledgers and the metrics computed from them.
//!
//! Power is positive when charging. Every metric is a pure function of the
//! ledger rows, and the CSV form round-trips floats exactly, so metrics
//! recomputed from a written ledger match the in-memory values bit for bit.

use std::path::Path;

use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::plant::{ClipReason, StepResult};

/// One simulation step of a run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LedgerRow {
    pub timestamp: NaiveDateTime,
    pub dt_s: u32,
    pub price_eur_mwh: f64,
    /// Optimizer setpoint for the step.
    pub p_scheduled_w: f64,
    /// Setpoint sent to the plant after the controller's daily-cap guard.
    pub p_target_w: f64,
    pub p_delivered_w: f64,
    pub soc_before: f64,
    pub soc_after: f64,
    pub current_a: f64,
    pub voltage_v: f64,
    pub loss_converter_wh: f64,
    pub loss_battery_wh: f64,
    /// Energy into the OCV source, `ocv * i * dt`.
    pub stored_wh: f64,
    pub clip_reason: Option<ClipReason>,
    /// Plant clipping, `|target - delivered| * dt`.
    pub clip_wh: f64,
}

impl LedgerRow {
    pub fn from_step(step: &StepResult, price_eur_mwh: f64, p_scheduled_w: f64) -> Self {
        Self {
            timestamp: step.t,
            dt_s: step.dt_s as u32,
            price_eur_mwh,
            p_scheduled_w,
            p_target_w: step.p_target_w,
            p_delivered_w: step.p_ac_w,
            soc_before: step.soc_before,
            soc_after: step.soc_after,
            current_a: step.current_a,
            voltage_v: step.voltage_v,
            loss_converter_wh: step.loss_converter_wh,
            loss_battery_wh: step.loss_battery_wh,
            stored_wh: step.stored_wh,
            clip_reason: step.clip,
            clip_wh: step.clip_wh,
        }
    }

    fn dt_h(&self) -> f64 {
        self.dt_s as f64 / 3600.0
    }
}

pub fn write_ledger_csv(rows: &[LedgerRow], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_ledger_csv(path: impl AsRef<Path>) -> Result<Vec<LedgerRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let rows = r.deserialize().collect::<std::result::Result<Vec<LedgerRow>, _>>()?;
    Ok(rows)
}

/// Revenue in EUR: `-sum(c * p_delivered * dt)`.
pub fn revenue_eur(rows: &[LedgerRow]) -> f64 {
    -rows
        .iter()
        .map(|r| r.price_eur_mwh * r.p_delivered_w * r.dt_h() / 1e6)
        .sum::<f64>()
}

/// AC energy (charged, discharged) in Wh.
pub fn energy_in_out_wh(rows: &[LedgerRow]) -> (f64, f64) {
    rows.iter().fold((0.0, 0.0), |(e_in, e_out), r| {
        let e = r.p_delivered_w * r.dt_h();
        if e >= 0.0 {
            (e_in + e, e_out)
        } else {
            (e_in, e_out - e)
        }
    })
}

/// Roundtrip efficiency `E_out / (E_in - E_N (soc_end - soc_start))`.
pub fn rte(rows: &[LedgerRow], e_nom_wh: f64) -> Result<f64> {
    let (first, last) = match (rows.first(), rows.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(Error::UndefinedMetric("roundtrip efficiency of an empty ledger".into())),
    };
    let (e_in, e_out) = energy_in_out_wh(rows);
    let den = e_in - e_nom_wh * (last.soc_after - first.soc_before);
    if !(den > 0.0) {
        return Err(Error::UndefinedMetric(format!(
            "roundtrip efficiency denominator {den} Wh is not positive"
        )));
    }
    Ok(e_out / den)
}

/// Energy shortfall `sum |p_scheduled - p_delivered| * dt` in Wh.
pub fn energy_shortfall_wh(rows: &[LedgerRow]) -> f64 {
    rows.iter()
        .map(|r| (r.p_scheduled_w - r.p_delivered_w).abs() * r.dt_h())
        .sum()
}

/// Full equivalent cycles of delivered AC throughput.
pub fn fec_used(rows: &[LedgerRow], e_nom_wh: f64) -> f64 {
    rows.iter().map(|r| r.p_delivered_w.abs() * r.dt_h()).sum::<f64>() / (2.0 * e_nom_wh)
}

/// Time share with `|p_delivered| > threshold_w`.
pub fn share_above(rows: &[LedgerRow], threshold_w: f64) -> f64 {
    let total: f64 = rows.iter().map(|r| r.dt_s as f64).sum();
    if total == 0.0 {
        return 0.0;
    }
    let above: f64 = rows
        .iter()
        .filter(|r| r.p_delivered_w.abs() > threshold_w)
        .map(|r| r.dt_s as f64)
        .sum();
    above / total
}

/// Time-weighted CDF of `|p_delivered|` evaluated at each bin edge.
pub fn power_cdf(rows: &[LedgerRow], edges_w: &[f64]) -> Vec<(f64, f64)> {
    edges_w.iter().map(|&e| (e, 1.0 - share_above(rows, e))).collect()
}

/// `n + 1` evenly spaced edges over `[0, p_rated]`.
pub fn cdf_edges(p_rated_w: f64, n: usize) -> Vec<f64> {
    (0..=n).map(|k| p_rated_w * k as f64 / n as f64).collect()
}

pub fn write_cdf_csv(cdf: &[(f64, f64)], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["power_w", "cdf"])?;
    for (p, c) in cdf {
        w.write_record([p.to_string(), c.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub revenue_eur: f64,
    /// `None` when the roundtrip efficiency is undefined.
    pub rte: Option<f64>,
    pub e_imb_wh: f64,
    pub e_in_wh: f64,
    pub e_out_wh: f64,
    pub fec: f64,
    pub loss_battery_wh: f64,
    pub loss_converter_wh: f64,
    pub soc_start: f64,
    pub soc_end: f64,
    /// Time share above 90% of rated power.
    pub share_above_90: f64,
}

impl RunMetrics {
    pub fn loss_total_wh(&self) -> f64 {
        self.loss_battery_wh + self.loss_converter_wh
    }
}

pub fn run_metrics(rows: &[LedgerRow], e_nom_wh: f64, p_rated_w: f64) -> RunMetrics {
    let (e_in_wh, e_out_wh) = energy_in_out_wh(rows);
    RunMetrics {
        revenue_eur: revenue_eur(rows),
        rte: rte(rows, e_nom_wh).ok(),
        e_imb_wh: energy_shortfall_wh(rows),
        e_in_wh,
        e_out_wh,
        fec: fec_used(rows, e_nom_wh),
        loss_battery_wh: rows.iter().map(|r| r.loss_battery_wh).sum(),
        loss_converter_wh: rows.iter().map(|r| r.loss_converter_wh).sum(),
        soc_start: rows.first().map_or(f64::NAN, |r| r.soc_before),
        soc_end: rows.last().map_or(f64::NAN, |r| r.soc_after),
        share_above_90: share_above(rows, 0.9 * p_rated_w),
    }
}

/// Pearson correlation coefficient; `None` for fewer than two points or
/// zero variance.
pub fn correlation(x: &[f64], y: &[f64]) -> Option<f64> {
    let n = x.len().min(y.len());
    if n < 2 {
        return None;
    }
    let mx = x[..n].iter().sum::<f64>() / n as f64;
    let my = y[..n].iter().sum::<f64>() / n as f64;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x[..n].iter().zip(&y[..n]) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::NaiveDate;

    fn row(k: i64, dt_s: u32, p_sched: f64, p: f64, soc: (f64, f64)) -> LedgerRow {
        let t0 = NaiveDate::from_ymd_opt(2024, 3, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        LedgerRow {
            timestamp: t0 + chrono::Duration::seconds(k * dt_s as i64),
            dt_s,
            price_eur_mwh: 100.0,
            p_scheduled_w: p_sched,
            p_target_w: p_sched,
            p_delivered_w: p,
            soc_before: soc.0,
            soc_after: soc.1,
            current_a: 0.0,
            voltage_v: 0.0,
            loss_converter_wh: 1.0,
            loss_battery_wh: 2.0,
            stored_wh: 0.0,
            clip_reason: None,
            clip_wh: (p_sched - p).abs() * dt_s as f64 / 3600.0,
        }
    }

    #[test]
    fn rte_examples() {
        // 100 Wh in, 90 Wh out, SOC back where it started.
        let rows = [row(0, 3600, 100.0, 100.0, (0.5, 0.6)), row(1, 3600, -90.0, -90.0, (0.6, 0.5))];
        assert!((rte(&rows, 1000.0).unwrap() - 0.9).abs() < 1e-12);
        let charge_only = [row(0, 3600, 100.0, 100.0, (0.5, 0.59))];
        assert_eq!(rte(&charge_only, 1000.0).unwrap(), 0.0);
        let idle = [row(0, 3600, 0.0, 0.0, (0.5, 0.5))];
        assert!(matches!(rte(&idle, 1000.0), Err(Error::UndefinedMetric(_))));
        assert!(rte(&[], 1000.0).is_err());
    }

    #[test]
    fn shortfall_examples() {
        let perfect = [row(0, 900, 5e4, 5e4, (0.5, 0.6))];
        assert_eq!(energy_shortfall_wh(&perfect), 0.0);
        // 15 minutes 10 kW short.
        let short = [row(0, 900, -5e4, -4e4, (0.5, 0.45))];
        assert!((energy_shortfall_wh(&short) - 2500.0).abs() < 1e-9);
        assert_eq!(energy_shortfall_wh(&short), short[0].clip_wh);
    }

    #[test]
    fn revenue_sign_and_fec() {
        // Discharging 1 MW for an hour at 100 EUR/MWh earns 100 EUR.
        let rows = [row(0, 3600, -1e6, -1e6, (0.9, 0.1))];
        assert!((revenue_eur(&rows) - 100.0).abs() < 1e-9);
        assert!((fec_used(&rows, 1e6) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn idle_cdf_is_a_step_at_zero() {
        let rows: Vec<_> = (0..10).map(|k| row(k, 60, 0.0, 0.0, (0.5, 0.5))).collect();
        let cdf = power_cdf(&rows, &cdf_edges(180e3, 10));
        assert!(cdf.iter().all(|&(_, c)| c == 1.0));
        let mixed = [row(0, 60, 0.0, 0.0, (0.5, 0.5)), row(1, 60, 1.7e5, 1.7e5, (0.5, 0.6))];
        let cdf = power_cdf(&mixed, &[0.0, 1.0e5, 1.8e5]);
        assert_eq!(cdf, vec![(0.0, 0.5), (1.0e5, 0.5), (1.8e5, 1.0)]);
        assert_eq!(share_above(&mixed, 0.9 * 180e3), 0.5);
    }

    #[test]
    fn ledger_csv_round_trip_is_exact() {
        let mut rows: Vec<_> = (0..5)
            .map(|k| row(k, 60, 1e5 / 3.0 * k as f64, 1e5 / 7.0 * k as f64, (0.1 * k as f64, 0.1 / 3.0)))
            .collect();
        rows[2].clip_reason = Some(ClipReason::SocLimit);
        rows[3].price_eur_mwh = -12.345678901234567;
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ledger.csv");
        write_ledger_csv(&rows, &p).unwrap();
        let back = read_ledger_csv(&p).unwrap();
        assert_eq!(back, rows);
        assert_eq!(run_metrics(&back, 1e5, 1.8e5), run_metrics(&rows, 1e5, 1.8e5));
    }

    #[test]
    fn correlation_examples() {
        assert!((correlation(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.5]).unwrap() - 0.9986).abs() < 1e-3);
        assert!((correlation(&[1.0, 2.0], &[3.0, 1.0]).unwrap() + 1.0).abs() < 1e-12);
        assert_eq!(correlation(&[1.0, 1.0], &[3.0, 1.0]), None);
    }
}
