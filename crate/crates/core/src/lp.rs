//! Linear dispatch model with a constant efficiency factor.
//!
//! Per step `t` with charge/discharge powers `p_ch, p_dch >= 0`:
//!
//! ```text
//! soc_t = soc_{t-1} + dt / e_nom * (eta * p_ch_t - p_dch_t / eta)
//! p_t   = p_ch_t - p_dch_t,   0 <= p_ch_t, p_dch_t <= p_max
//! min   sum_t c_t * p_t * dt
//! ```
//!
//! Throughput over each budget segment is capped by `sum (p_ch + p_dch) dt`.

use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::warn;

use crate::error::{Error, Result};
use crate::linprog::{Cmp, LinModel};
use crate::market::PriceSeries;
use crate::model::Schedule;

/// Throughput allowance over steps `start..end` of an optimization horizon.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FecSegment {
    pub start: usize,
    pub end: usize,
    pub throughput_wh: f64,
}

/// Full-equivalent-cycle budget of one optimization call.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum FecBudget {
    #[default]
    Unlimited,
    /// Cycles over the whole horizon; one cycle is `2 * e_nom` of throughput.
    Cycles(f64),
    Segments(Vec<FecSegment>),
}

impl FecBudget {
    pub fn resolve(&self, n_steps: usize, e_nom_wh: f64) -> Result<Vec<FecSegment>> {
        match self {
            FecBudget::Unlimited => Ok(Vec::new()),
            FecBudget::Cycles(fec) => {
                if !(*fec >= 0.0) {
                    return Err(Error::param("fec_budget", "must be non-negative"));
                }
                Ok(vec![FecSegment {
                    start: 0,
                    end: n_steps,
                    throughput_wh: 2.0 * e_nom_wh * fec,
                }])
            }
            FecBudget::Segments(segs) => {
                for s in segs {
                    if !(s.throughput_wh >= 0.0) || s.start >= s.end || s.end > n_steps {
                        return Err(Error::param(
                            "fec_budget",
                            format!("bad segment {}..{} ({} Wh)", s.start, s.end, s.throughput_wh),
                        ));
                    }
                }
                Ok(segs.clone())
            }
        }
    }
}

/// Lower bound on the SOC at the end of step `step`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SocFloor {
    pub step: usize,
    pub soc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpParams {
    pub eta: f64,
    pub e_nom_wh: f64,
    pub p_max_w: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub fec_budget: FecBudget,
    pub dt_s: u32,
    pub soc_floor: Option<SocFloor>,
}

impl LpParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta <= 1.0) {
            return Err(Error::param("eta", "must be in (0, 1]"));
        }
        if !(self.e_nom_wh > 0.0) {
            return Err(Error::param("e_nom_wh", "must be positive"));
        }
        if !(self.p_max_w > 0.0) {
            return Err(Error::param("p_max_w", "must be positive"));
        }
        if !(0.0 <= self.soc_min && self.soc_min < self.soc_max && self.soc_max <= 1.0) {
            return Err(Error::param("soc_min", "require 0 <= soc_min < soc_max <= 1"));
        }
        if self.dt_s == 0 {
            return Err(Error::param("dt_s", "must be positive"));
        }
        if let Some(f) = self.soc_floor {
            if !(f.soc <= self.soc_max) {
                return Err(Error::param("soc_floor", "above soc_max"));
            }
        }
        Ok(())
    }

    fn step_coef(&self) -> f64 {
        self.p_max_w * self.dt_s as f64 / 3600.0 / self.e_nom_wh
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LpSolution {
    pub schedule: Schedule,
    pub p_ch_w: Vec<f64>,
    pub p_dch_w: Vec<f64>,
    /// Steps where simultaneous charge and discharge had to be removed.
    pub simultaneity_fixes: usize,
}

const SIMULTANEITY_TOL: f64 = 1e-7;

struct Built {
    model: LinModel,
    ch: Vec<usize>,
    dch: Vec<usize>,
}

fn check_inputs(params: &LpParams, prices: &PriceSeries, soc0: f64) -> Result<()> {
    params.validate()?;
    if prices.grid.dt_s != params.dt_s {
        return Err(Error::param(
            "dt_s",
            format!("price grid step {} s differs from {} s", prices.grid.dt_s, params.dt_s),
        ));
    }
    if let Some(f) = params.soc_floor {
        if f.step >= prices.len() {
            return Err(Error::param("soc_floor", "step outside the horizon"));
        }
    }
    if !(params.soc_min - 1e-12 <= soc0 && soc0 <= params.soc_max + 1e-12) {
        return Err(Error::Infeasible(format!(
            "initial soc {soc0} outside [{}, {}]",
            params.soc_min, params.soc_max
        )));
    }
    Ok(())
}

// Powers are normalized by p_max; the objective is in EUR.
fn build(params: &LpParams, prices: &PriceSeries, soc0: f64) -> Result<Built> {
    let n = prices.len();
    let k = params.step_coef();
    let eur = params.p_max_w * params.dt_s as f64 / 3600.0 / 1e6;
    let mut m = LinModel::new();
    let mut ch = Vec::with_capacity(n);
    let mut dch = Vec::with_capacity(n);
    let mut soc = Vec::with_capacity(n);
    for (t, c) in prices.prices_eur_mwh.iter().enumerate() {
        ch.push(m.add_var(format!("p_ch[{t}]"), 0.0, 1.0, c * eur));
        dch.push(m.add_var(format!("p_dch[{t}]"), 0.0, 1.0, -c * eur));
        let mut lo = params.soc_min;
        if let Some(f) = params.soc_floor.filter(|f| f.step == t) {
            lo = lo.max(f.soc);
        }
        soc.push(m.add_var(format!("soc[{t}]"), lo, params.soc_max, 0.0));
    }
    for t in 0..n {
        let mut row = vec![(soc[t], 1.0), (ch[t], -k * params.eta), (dch[t], k / params.eta)];
        let rhs = if t == 0 {
            soc0
        } else {
            row.push((soc[t - 1], -1.0));
            0.0
        };
        m.add_row(format!("soc_balance[{t}]"), row, Cmp::Eq, rhs);
    }
    let unit_wh = params.p_max_w * params.dt_s as f64 / 3600.0;
    for (j, seg) in params.fec_budget.resolve(n, params.e_nom_wh)?.iter().enumerate() {
        let row = (seg.start..seg.end)
            .flat_map(|t| [(ch[t], 1.0), (dch[t], 1.0)])
            .collect();
        m.add_row(format!("throughput[{j}]"), row, Cmp::Le, seg.throughput_wh / unit_wh);
    }
    Ok(Built { model: m, ch, dch })
}

/// Text listing of the LP for cross-checking with other solvers.
pub fn lp_model_dump(params: &LpParams, prices: &PriceSeries, soc0: f64) -> Result<String> {
    check_inputs(params, prices, soc0)?;
    Ok(build(params, prices, soc0)?.model.dump())
}

pub fn write_lp_model_dump(
    params: &LpParams,
    prices: &PriceSeries,
    soc0: f64,
    path: impl AsRef<Path>,
) -> Result<()> {
    std::fs::write(path, lp_model_dump(params, prices, soc0)?)?;
    Ok(())
}

pub fn lp_optimize(params: &LpParams, prices: &PriceSeries, soc0: f64) -> Result<LpSolution> {
    check_inputs(params, prices, soc0)?;
    let soc0 = soc0.clamp(params.soc_min, params.soc_max);
    let mut b = build(params, prices, soc0)?;
    let pairs: Vec<_> = b.ch.iter().copied().zip(b.dch.iter().copied()).collect();
    // With negative prices the LP can profit from burning energy through
    // simultaneous flows.
    let solved = b.model.solve_exclusive(&pairs, SIMULTANEITY_TOL)?;
    let (x, fixes) = (solved.x, solved.fixes);
    if fixes > 0 {
        warn!(fixes, "removed simultaneous charge/discharge");
    }

    let p_ch_w: Vec<f64> = b.ch.iter().map(|&v| x[v] * params.p_max_w).collect();
    let p_dch_w: Vec<f64> = b.dch.iter().map(|&v| x[v] * params.p_max_w).collect();
    let p_ac_w: Vec<f64> = p_ch_w.iter().zip(&p_dch_w).map(|(c, d)| c - d).collect();
    let soc_pred = soc_from_split(params, &p_ch_w, &p_dch_w, soc0);
    let objective_eur = objective_eur(prices, &p_ac_w);
    Ok(LpSolution {
        schedule: Schedule {
            grid: prices.grid,
            p_ac_w,
            soc_pred,
            objective_eur,
        },
        p_ch_w,
        p_dch_w,
        simultaneity_fixes: fixes,
    })
}

/// `sum c_t p_t dt` in EUR; negative values are profit.
pub fn objective_eur(prices: &PriceSeries, p_ac_w: &[f64]) -> f64 {
    let dt_h = prices.grid.dt_hours();
    prices
        .prices_eur_mwh
        .iter()
        .zip(p_ac_w)
        .map(|(c, p)| c * p * dt_h / 1e6)
        .sum()
}

fn soc_from_split(params: &LpParams, p_ch: &[f64], p_dch: &[f64], soc0: f64) -> Vec<f64> {
    let k = params.dt_s as f64 / 3600.0 / params.e_nom_wh;
    let mut soc = soc0;
    p_ch.iter()
        .zip(p_dch)
        .map(|(c, d)| {
            soc += k * (params.eta * c - d / params.eta);
            soc
        })
        .collect()
}

/// Applies the SOC recursion to a net power series, splitting each step into
/// its charge or discharge part. Returns end-of-step SOC values.
pub fn lp_schedule_soc(params: &LpParams, p_ac_w: &[f64], soc0: f64) -> Result<Vec<f64>> {
    const TOL: f64 = 1e-6;
    if let Some(p) = p_ac_w.iter().find(|p| !(p.abs() <= params.p_max_w * (1.0 + 1e-9))) {
        return Err(Error::PowerRange {
            power_w: *p,
            rated_w: params.p_max_w,
        });
    }
    let ch: Vec<f64> = p_ac_w.iter().map(|p| p.max(0.0)).collect();
    let dch: Vec<f64> = p_ac_w.iter().map(|p| (-p).max(0.0)).collect();
    let soc = soc_from_split(params, &ch, &dch, soc0);
    if let Some((step, s)) = soc
        .iter()
        .enumerate()
        .find(|(_, s)| **s < params.soc_min - TOL || **s > params.soc_max + TOL)
    {
        return Err(Error::SocBound { step, soc: *s });
    }
    Ok(soc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::TimeGrid;
    use chrono::NaiveDate;
    use proptest::prelude::*;

    fn grid(n: usize, dt_s: u32) -> TimeGrid {
        let t0 = NaiveDate::from_ymd_opt(2024, 1, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        TimeGrid::new(t0, dt_s, n).unwrap()
    }

    fn prices(p: &[f64], dt_s: u32) -> PriceSeries {
        PriceSeries::new(grid(p.len(), dt_s), p.to_vec()).unwrap()
    }

    fn params(eta: f64) -> LpParams {
        LpParams {
            eta,
            e_nom_wh: 180e3,
            p_max_w: 180e3,
            soc_min: 0.0,
            soc_max: 1.0,
            fec_budget: FecBudget::Unlimited,
            dt_s: 3600,
            soc_floor: None,
        }
    }

    /// Exhaustive search over net power levels `k * p_max / n_levels`. The SOC
    /// after any path depends only on the summed charge and discharge levels,
    /// so a DP over `(K_ch, K_dch)` enumerates every discretized schedule.
    fn brute_force(params: &LpParams, prices: &PriceSeries, soc0: f64, n_levels: i64) -> f64 {
        let n = prices.len();
        let unit_wh = params.p_max_w / n_levels as f64 * params.dt_s as f64 / 3600.0;
        let unit_soc = unit_wh / params.e_nom_wh;
        let cap = params
            .fec_budget
            .resolve(n, params.e_nom_wh)
            .unwrap()
            .first()
            .map(|s| (s.throughput_wh / unit_wh + 1e-9).floor() as i64)
            .unwrap_or(i64::MAX);
        let side = (n_levels as usize) * n + 1;
        let mut best = vec![f64::INFINITY; side * side];
        best[0] = 0.0;
        for (t, c) in prices.prices_eur_mwh.iter().enumerate() {
            let reach = n_levels as usize * t;
            let mut next = vec![f64::INFINITY; side * side];
            for kc in 0..=reach {
                for kd in 0..=reach {
                    let v = best[kc * side + kd];
                    if !v.is_finite() {
                        continue;
                    }
                    for k in -n_levels..=n_levels {
                        let (nc, nd) = if k >= 0 {
                            (kc + k as usize, kd)
                        } else {
                            (kc, kd + (-k) as usize)
                        };
                        if (nc + nd) as i64 > cap {
                            continue;
                        }
                        let soc = soc0 + unit_soc * (params.eta * nc as f64 - nd as f64 / params.eta);
                        if soc < params.soc_min - 1e-12 || soc > params.soc_max + 1e-12 {
                            continue;
                        }
                        let cost = v + c * k as f64 * unit_wh / 1e6;
                        let slot = &mut next[nc * side + nd];
                        if cost < *slot {
                            *slot = cost;
                        }
                    }
                }
            }
            best = next;
        }
        best.into_iter().fold(f64::INFINITY, f64::min)
    }

    fn reverify(params: &LpParams, sol: &LpSolution, soc0: f64) {
        let soc = lp_schedule_soc(params, &sol.schedule.p_ac_w, soc0).unwrap();
        for (a, b) in soc.iter().zip(&sol.schedule.soc_pred) {
            assert!((a - b).abs() <= 1e-6);
        }
        for (c, d) in sol.p_ch_w.iter().zip(&sol.p_dch_w) {
            assert!(*c >= -1e-6 && *c <= params.p_max_w * (1.0 + 1e-6));
            assert!(*d >= -1e-6 && *d <= params.p_max_w * (1.0 + 1e-6));
        }
        if let Ok(segs) = params.fec_budget.resolve(soc.len(), params.e_nom_wh) {
            let dt_h = params.dt_s as f64 / 3600.0;
            for s in segs {
                let thr: f64 = (s.start..s.end).map(|t| (sol.p_ch_w[t] + sol.p_dch_w[t]) * dt_h).sum();
                assert!(thr <= s.throughput_wh * (1.0 + 1e-6) + 1e-6);
            }
        }
    }

    #[test]
    fn constant_prices_do_nothing() {
        // Stored energy only stays put when the terminal SOC is held.
        for soc0 in [0.0, 0.3, 1.0] {
            let mut p = params(0.95);
            p.soc_floor = Some(SocFloor { step: 7, soc: soc0 });
            let sol = lp_optimize(&p, &prices(&[50.0; 8], 3600), soc0).unwrap();
            assert!(sol.schedule.p_ac_w.iter().all(|p| p.abs() < 1e-6));
            assert!(sol.schedule.objective_eur.abs() < 1e-9);
        }
        let sol = lp_optimize(&params(0.95), &prices(&[50.0; 8], 3600), 0.0).unwrap();
        assert!(sol.schedule.p_ac_w.iter().all(|p| p.abs() < 1e-6));
    }

    #[test]
    fn two_step_forced() {
        let p = params(1.0);
        let sol = lp_optimize(&p, &prices(&[0.0, 100.0], 3600), 0.0).unwrap();
        assert!((sol.schedule.p_ac_w[0] - 180e3).abs() < 1e-3);
        assert!((sol.schedule.p_ac_w[1] + 180e3).abs() < 1e-3);
        let expected = -100.0 * 180e3 / 1e6;
        assert!((sol.schedule.objective_eur - expected).abs() <= 1e-7 * expected.abs());
    }

    #[test]
    fn four_step_matches_brute_force() {
        let p = params(0.95);
        let pr = prices(&[10.0, 80.0, 20.0, 120.0], 3600);
        let sol = lp_optimize(&p, &pr, 0.5).unwrap();
        let oracle = brute_force(&p, &pr, 0.5, 200);
        let lp = sol.schedule.objective_eur;
        assert!(lp <= oracle + 1e-12, "continuous optimum beats the grid");
        assert!((lp - oracle).abs() <= 0.005 * oracle.abs(), "lp {lp} oracle {oracle}");
        reverify(&p, &sol, 0.5);
    }

    #[test]
    fn fec_cap_binds() {
        let mut p = params(0.95);
        p.fec_budget = FecBudget::Cycles(0.25);
        let pr = prices(&[10.0, 120.0, 10.0, 120.0], 3600);
        let sol = lp_optimize(&p, &pr, 0.5).unwrap();
        let thr: f64 = sol.p_ch_w.iter().zip(&sol.p_dch_w).map(|(c, d)| c + d).sum();
        assert!((thr - 0.5 * 180e3).abs() < 1e-3);
        reverify(&p, &sol, 0.5);
        let oracle = brute_force(&p, &pr, 0.5, 200);
        assert!(sol.schedule.objective_eur <= oracle + 0.005 * oracle.abs());
    }

    #[test]
    fn soc_floor_is_respected() {
        let mut p = params(0.95);
        p.soc_floor = Some(SocFloor { step: 3, soc: 0.5 });
        let sol = lp_optimize(&p, &prices(&[10.0, 80.0, 20.0, 120.0], 3600), 0.5).unwrap();
        assert!(sol.schedule.soc_pred[3] >= 0.5 - 1e-9);
        p.soc_floor = Some(SocFloor { step: 0, soc: 0.99 });
        p.dt_s = 900;
        let r = lp_optimize(&p, &prices(&[10.0, 80.0], 900), 0.0);
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn initial_soc_outside_bounds() {
        let mut p = params(0.95);
        p.soc_min = 0.1;
        let r = lp_optimize(&p, &prices(&[10.0, 80.0], 3600), 0.05);
        assert!(matches!(r, Err(Error::Infeasible(_))));
    }

    #[test]
    fn grid_mismatch_rejected() {
        let r = lp_optimize(&params(0.95), &prices(&[10.0, 80.0], 900), 0.5);
        assert!(matches!(r, Err(Error::Parameter { .. })));
    }

    #[test]
    fn negative_prices_have_no_simultaneous_flow() {
        let mut p = params(0.9);
        p.dt_s = 900;
        let pr = prices(&[-50.0, -80.0, 30.0, -10.0, 100.0, -200.0], 900);
        let sol = lp_optimize(&p, &pr, 0.5).unwrap();
        for (c, d) in sol.p_ch_w.iter().zip(&sol.p_dch_w) {
            assert!(c.min(*d) <= SIMULTANEITY_TOL * p.p_max_w);
        }
        reverify(&p, &sol, 0.5);
    }

    #[test]
    fn schedule_soc_examples() {
        let mut p = params(0.9);
        p.dt_s = 900;
        let k = 180e3 * 0.25 / 180e3;
        assert_eq!(lp_schedule_soc(&p, &[0.0; 3], 0.4).unwrap(), vec![0.4; 3]);
        let s = lp_schedule_soc(&p, &[180e3], 0.2).unwrap();
        assert!((s[0] - (0.2 + k * 0.9)).abs() < 1e-15);
        let s = lp_schedule_soc(&p, &[180e3, -180e3], 0.2).unwrap();
        assert!((s[1] - (0.2 + k * (0.9 - 1.0 / 0.9))).abs() < 1e-12);
        assert!(s[1] < 0.2);
        match lp_schedule_soc(&p, &[-180e3, -180e3], 0.3) {
            Err(Error::SocBound { step, .. }) => assert_eq!(step, 1),
            other => panic!("{other:?}"),
        }
        assert!(matches!(lp_schedule_soc(&p, &[2e5], 0.3), Err(Error::PowerRange { .. })));
    }

    #[test]
    fn dump_lists_rows() {
        let mut p = params(0.95);
        p.fec_budget = FecBudget::Cycles(1.0);
        let d = lp_model_dump(&p, &prices(&[10.0, 80.0], 3600), 0.5).unwrap();
        assert!(d.contains("soc_balance[1]"));
        assert!(d.contains("throughput[0]"));
        assert!(d.contains("p_dch[1]"));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]

        #[test]
        fn random_instances_beat_grid_oracle(
            raw in prop::collection::vec(-20.0f64..150.0, 2..=6),
            soc0 in 0.0f64..1.0,
            eta in 0.85f64..1.0,
            fec in prop::option::of(0.1f64..1.5),
        ) {
            let mut p = params(eta);
            p.dt_s = 1800;
            p.soc_min = 0.1;
            p.soc_max = 0.9;
            let soc0 = 0.1 + 0.8 * soc0;
            p.fec_budget = fec.map(FecBudget::Cycles).unwrap_or_default();
            let pr = prices(&raw, 1800);
            let sol = lp_optimize(&p, &pr, soc0).unwrap();
            reverify(&p, &sol, soc0);
            let oracle = brute_force(&p, &pr, soc0, 40);
            prop_assert!(sol.schedule.objective_eur <= oracle + 0.005 * oracle.abs() + 1e-9,
                "lp {} oracle {}", sol.schedule.objective_eur, oracle);
        }

        #[test]
        fn no_simultaneous_flow_with_nonnegative_prices(
            raw in prop::collection::vec(0.0f64..150.0, 2..=12),
            soc0 in 0.0f64..1.0,
            eta in 0.85f64..0.999,
        ) {
            let mut p = params(eta);
            p.dt_s = 900;
            let sol = lp_optimize(&p, &prices(&raw, 900), soc0).unwrap();
            prop_assert_eq!(sol.simultaneity_fixes, 0);
            for (c, d) in sol.p_ch_w.iter().zip(&sol.p_dch_w) {
                prop_assert!(c.min(*d) <= SIMULTANEITY_TOL * p.p_max_w);
            }
        }
    }
}
