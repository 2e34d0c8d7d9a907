//! Equivalent-circuit dispatch model.
//!
//! Per step `t`, with pack current `i_t` (charging positive) and end-of-step
//! SOC `soc_t`:
//!
//! ```text
//! soc_t  = soc_{t-1} + dt / Q_N * i_t
//! v_t    = ocv((soc_{t-1} + soc_t) / 2) + R * i_t
//! p_dc_t = v_t * i_t = eta_conv * p_ch_t - p_dch_t / eta_conv
//! ```
//!
//! with current, SOC and AC power bounds. The OCV is taken at mid-step so
//! that the stored energy stays accurate on coarse steps; the voltage limits
//! apply to the end-of-step voltage `ocv(soc_t) + R * i_t`, the extreme over
//! the step. The problem is solved by
//! a trust-region sequential method: constraints are linearized around the
//! current iterate, the second-order part of `v * i` enters each subproblem
//! as a convex diagonal term weighted by the multipliers of the previous
//! subproblem, and steps are bounded by a trust region on the current. Every
//! iterate is projected onto the exact feasible set, so the returned point is
//! always feasible.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tracing::debug;

use crate::error::{Error, Result};
use crate::linprog::{Cmp, LinModel};
use crate::lp::{objective_eur, FecBudget, FecSegment, SocFloor};
use crate::market::PriceSeries;
use crate::model::{PackParams, Schedule, SystemSpec};
use crate::ocv::OcvCurve;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlParams {
    pub pack: PackParams,
    /// Cell-level curve; the pack OCV is `series * ocv(soc)`.
    pub ocv: OcvCurve,
    pub eta_conv: f64,
    pub p_max_w: f64,
    pub soc_min: f64,
    pub soc_max: f64,
    pub fec_budget: FecBudget,
    pub dt_s: u32,
    /// Resistance assumed by the model; may differ from the plant's.
    pub r_model_ohm: f64,
    /// Energy used to convert cycle budgets to throughput.
    pub e_nom_wh: f64,
    pub soc_floor: Option<SocFloor>,
}

impl NlParams {
    /// Model parameters for an (already aged) system, with the model
    /// resistance scaled by `r_factor`.
    pub fn from_spec(spec: &SystemSpec, eta_conv: f64, r_factor: f64, dt_s: u32) -> Self {
        let pack = spec.pack_params();
        Self {
            pack,
            ocv: spec.ocv.clone(),
            eta_conv,
            p_max_w: spec.converter.p_rated_w,
            soc_min: spec.soc_min,
            soc_max: spec.soc_max,
            fec_budget: FecBudget::Unlimited,
            dt_s,
            r_model_ohm: pack.r_ohm * r_factor,
            e_nom_wh: spec.e_nom_wh,
            soc_floor: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.eta_conv > 0.0 && self.eta_conv <= 1.0) {
            return Err(Error::param("eta_conv", "must be in (0, 1]"));
        }
        if !(self.r_model_ohm >= 0.0) {
            return Err(Error::param("r_model_ohm", "must be non-negative"));
        }
        if !(self.p_max_w > 0.0) {
            return Err(Error::param("p_max_w", "must be positive"));
        }
        if !(self.pack.q_nom_ah > 0.0 && self.pack.i_max_a > 0.0) {
            return Err(Error::param("pack", "capacity and current limit must be positive"));
        }
        if !(0.0 < self.pack.v_min_v && self.pack.v_min_v < self.pack.v_max_v) {
            return Err(Error::param("pack.v_min_v", "require 0 < v_min < v_max"));
        }
        if !(0.0 <= self.soc_min && self.soc_min < self.soc_max && self.soc_max <= 1.0) {
            return Err(Error::param("soc_min", "require 0 <= soc_min < soc_max <= 1"));
        }
        if self.dt_s == 0 {
            return Err(Error::param("dt_s", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlSettings {
    pub max_iter: usize,
    /// Initial currents [A]; projected onto the feasible set before use.
    pub warm_start: Option<Vec<f64>>,
    pub trace: bool,
}

impl Default for NlSettings {
    fn default() -> Self {
        Self {
            max_iter: 150,
            warm_start: None,
            trace: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub objective_eur: f64,
    pub max_residual: f64,
    pub trust_radius: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NlSolution {
    pub schedule: Schedule,
    pub soc0: f64,
    pub current_a: Vec<f64>,
    /// Mid-step terminal voltage, `p_dc_w / current_a`.
    pub voltage_v: Vec<f64>,
    pub p_dc_w: Vec<f64>,
    /// Objective decrease promised by the first-order model over the full
    /// current range, relative to the largest possible objective magnitude.
    pub kkt_residual: f64,
    pub iterations: usize,
    pub degraded: bool,
    pub trace: Vec<TraceRow>,
}

pub fn write_trace_csv(trace: &[TraceRow], path: impl AsRef<Path>) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "iteration,objective_eur,max_residual,trust_radius,accepted")?;
    for r in trace {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.iteration, r.objective_eur, r.max_residual, r.trust_radius, r.accepted
        )?;
    }
    f.flush()?;
    Ok(())
}

struct Sub {
    model: f64,
    step: Vec<f64>,
    mu: Option<Vec<f64>>,
}

/// Exact evaluation of a current trajectory.
struct Traj {
    soc: Vec<f64>,
    v: Vec<f64>,
    p_dc: Vec<f64>,
    p_ac: Vec<f64>,
    objective: f64,
}

const BISECT_ITERS: usize = 200;

/// Shared per-call constants.
struct Ctx<'a> {
    p: &'a NlParams,
    prices: &'a PriceSeries,
    soc0: f64,
    n: usize,
    dt_h: f64,
    /// SOC change per ampere over one step.
    k: f64,
    series: f64,
    segments: Vec<FecSegment>,
}

impl<'a> Ctx<'a> {
    fn new(p: &'a NlParams, prices: &'a PriceSeries, soc0: f64) -> Result<Self> {
        p.validate()?;
        if prices.grid.dt_s != p.dt_s {
            return Err(Error::param(
                "dt_s",
                format!("price grid step {} s differs from {} s", prices.grid.dt_s, p.dt_s),
            ));
        }
        if !(p.soc_min - 1e-12 <= soc0 && soc0 <= p.soc_max + 1e-12) {
            return Err(Error::Infeasible(format!(
                "initial soc {soc0} outside [{}, {}]",
                p.soc_min, p.soc_max
            )));
        }
        if let Some(f) = p.soc_floor {
            if f.step >= prices.len() || f.soc > p.soc_max {
                return Err(Error::param("soc_floor", "outside the horizon or above soc_max"));
            }
        }
        let dt_h = p.dt_s as f64 / 3600.0;
        Ok(Self {
            p,
            prices,
            soc0: soc0.clamp(p.soc_min, p.soc_max),
            n: prices.len(),
            dt_h,
            k: dt_h / p.pack.q_nom_ah,
            series: p.pack.series as f64,
            segments: p.fec_budget.resolve(prices.len(), p.e_nom_wh)?,
        })
    }

    fn ocv(&self, soc: f64) -> f64 {
        self.series * self.p.ocv.value(soc)
    }

    fn ocv_slope(&self, soc: f64) -> f64 {
        self.series * self.p.ocv.slope(soc)
    }

    fn ocv_curvature(&self, soc: f64) -> f64 {
        self.series * self.p.ocv.curvature(soc)
    }

    /// Terminal voltage carrying the step's power, with the OCV at mid-step.
    fn voltage(&self, s_prev: f64, i: f64) -> f64 {
        self.ocv(s_prev + 0.5 * self.k * i) + self.p.r_model_ohm * i
    }

    /// Terminal voltage at the end of the step, the extreme over the step
    /// for both directions; the voltage limits apply to it.
    fn voltage_end(&self, s_prev: f64, i: f64) -> f64 {
        self.ocv(s_prev + self.k * i) + self.p.r_model_ohm * i
    }

    fn p_ac(&self, p_dc: f64) -> f64 {
        if p_dc >= 0.0 {
            p_dc / self.p.eta_conv
        } else {
            p_dc * self.p.eta_conv
        }
    }

    fn scale(&self) -> f64 {
        let s: f64 = self.prices.prices_eur_mwh.iter().map(|c| c.abs()).sum();
        (s * self.p.p_max_w * self.dt_h / 1e6).max(1e-12)
    }

    fn soc_lower(&self, t: usize) -> f64 {
        match self.p.soc_floor {
            Some(f) if f.step == t => self.p.soc_min.max(f.soc),
            _ => self.p.soc_min,
        }
    }

    /// Feasible current interval for step `t` starting at `s_prev`, or `None`
    /// when no current satisfies every bound.
    fn interval(&self, t: usize, s_prev: f64) -> Option<(f64, f64)> {
        let p = self.p;
        let i_max = p.pack.i_max_a;
        let mut lo = (-i_max).max((self.soc_lower(t) - s_prev) / self.k);
        let mut hi = i_max.min((p.soc_max - s_prev) / self.k);
        if lo > hi {
            if lo - hi > 1e-9 * i_max {
                return None;
            }
            lo = hi;
        }
        // Terminal voltage and delivered power are increasing in the current.
        let v = |i: f64| self.voltage_end(s_prev, i);
        if v(hi) > p.pack.v_max_v {
            if v(lo) > p.pack.v_max_v {
                return None;
            }
            hi = bisect_last(lo, hi, |i| v(i) <= p.pack.v_max_v);
        }
        if v(lo) < p.pack.v_min_v {
            if v(hi) < p.pack.v_min_v {
                return None;
            }
            lo = bisect_first(lo, hi, |i| v(i) >= p.pack.v_min_v);
        }
        let g = |i: f64| self.voltage(s_prev, i) * i;
        let g_hi = p.eta_conv * p.p_max_w;
        let g_lo = -p.p_max_w / p.eta_conv;
        if g(hi) > g_hi {
            let a = lo.max(0.0);
            hi = if g(a) > g_hi { a } else { bisect_last(a, hi, |i| g(i) <= g_hi) };
        }
        if g(lo) < g_lo {
            let b = hi.min(0.0);
            lo = if g(b) < g_lo { b } else { bisect_first(lo, b, |i| g(i) >= g_lo) };
        }
        Some((lo, hi))
    }

    /// Clips a candidate current trajectory step by step onto the exact
    /// feasible set, then scales down any throughput segment that exceeds its
    /// budget.
    fn project(&self, cand: &[f64]) -> Option<Vec<f64>> {
        let mut cur = cand.to_vec();
        let mut i = self.forward(&cur)?;
        for seg in &self.segments {
            if self.throughput(&i, seg) <= seg.throughput_wh * (1.0 + 1e-12) {
                continue;
            }
            let scaled = |theta: f64| {
                let mut c = cur.clone();
                c[seg.start..seg.end].iter_mut().for_each(|x| *x *= theta);
                c
            };
            let (mut a, mut b) = (0.0, 1.0);
            for _ in 0..60 {
                let m = 0.5 * (a + b);
                match self.forward(&scaled(m)) {
                    Some(tr) if self.throughput(&tr, seg) <= seg.throughput_wh => a = m,
                    _ => b = m,
                }
            }
            cur = scaled(a);
            i = self.forward(&cur)?;
            if self.throughput(&i, seg) > seg.throughput_wh * (1.0 + 1e-9) + 1e-9 {
                return None;
            }
        }
        Some(i)
    }

    fn forward(&self, cand: &[f64]) -> Option<Vec<f64>> {
        let mut s = self.soc0;
        let mut out = Vec::with_capacity(self.n);
        for (t, c) in cand.iter().enumerate() {
            let (lo, hi) = self.interval(t, s)?;
            let i = c.clamp(lo, hi);
            s += self.k * i;
            out.push(i);
        }
        Some(out)
    }

    fn throughput(&self, i: &[f64], seg: &FecSegment) -> f64 {
        let mut s = self.soc0;
        let mut total = 0.0;
        for (t, &it) in i.iter().enumerate().take(seg.end) {
            let p_dc = self.voltage(s, it) * it;
            s += self.k * it;
            if t >= seg.start {
                total += self.p_ac(p_dc).abs() * self.dt_h;
            }
        }
        total
    }

    fn evaluate(&self, i: &[f64]) -> Traj {
        let mut s = self.soc0;
        let mut tr = Traj {
            soc: Vec::with_capacity(self.n),
            v: Vec::with_capacity(self.n),
            p_dc: Vec::with_capacity(self.n),
            p_ac: Vec::with_capacity(self.n),
            objective: 0.0,
        };
        for &it in i {
            let v = self.voltage(s, it);
            s += self.k * it;
            let p_dc = v * it;
            tr.soc.push(s);
            tr.v.push(v);
            tr.p_dc.push(p_dc);
            tr.p_ac.push(self.p_ac(p_dc));
        }
        tr.objective = objective_eur(self.prices, &tr.p_ac);
        tr
    }

    /// LP model of the objective around `i` with the current step bounded by
    /// `delta * i_max`. With `first_order` the ohmic curvature is dropped,
    /// giving the plain linearization used for the stationarity measure.
    /// Returns the model value (EUR) and the current step [A].
    /// Trust-region subproblem around `i`. Variables per step are the
    /// normalized current step `u`, its running sum `sigma` (SOC change in
    /// units of `k i_max`) and the AC charge/discharge split. The DC power is
    /// linearized; its second-order part, weighted by the coupling-row
    /// multipliers `mu`, enters the objective as a convex diagonal term.
    /// With `first_order` the curvature is dropped.
    fn subproblem(&self, i: &[f64], tr: &Traj, delta: f64, mu: Option<&[f64]>, first_order: bool) -> Result<Sub> {
        match self.subproblem_relaxed(i, tr, delta, mu, first_order, 0.0) {
            // Iterates often sit exactly on the SOC floor and a throughput
            // budget at once, which can leave the interior-point solver
            // without a strictly feasible point. Retry with the limits
            // relaxed slightly; the projection restores exact feasibility.
            Err(Error::Infeasible(_)) => self.subproblem_relaxed(i, tr, delta, mu, first_order, 1e-7),
            other => other,
        }
    }

    fn subproblem_relaxed(
        &self,
        i: &[f64],
        tr: &Traj,
        delta: f64,
        mu: Option<&[f64]>,
        first_order: bool,
        relax: f64,
    ) -> Result<Sub> {
        let p = self.p;
        let i_max = p.pack.i_max_a;
        let pm = p.p_max_w;
        let r = p.r_model_ohm;
        let eta = p.eta_conv;
        let eur = pm * self.dt_h / 1e6;
        let ks = self.k * i_max;
        let mu: Vec<f64> = match mu {
            Some(m) => m.to_vec(),
            None => (0..self.n)
                .map(|t| {
                    let c = self.prices.prices_eur_mwh[t] * eur;
                    if tr.p_dc[t] >= 0.0 {
                        c / eta
                    } else {
                        c * eta
                    }
                })
                .collect(),
        };
        // The OCV is taken at the mid-step SOC m_t. Second-order part of
        // p_dc_t / P in (u, sigma):
        //   alpha_t u_t^2 + gamma_t (sigma_t^2 - sigma_{t-1}^2)
        //     + kappa_t (sigma_t^2 + sigma_{t-1}^2) / 2,
        // from ocv' dm_t di_t = ocv'/(2k) (ds_t^2 - ds_{t-1}^2) and the bound
        // dm_t^2 <= (ds_t^2 + ds_{t-1}^2) / 2 on the ocv'' term.
        let mid: Vec<f64> = (0..self.n).map(|t| tr.soc[t] - 0.5 * self.k * i[t]).collect();
        let slope: Vec<f64> = mid.iter().map(|&s| self.ocv_slope(s)).collect();
        let alpha = |_: usize| r * i_max * i_max / pm;
        let gamma = |t: usize| slope[t] * ks * ks / (2.0 * self.k * pm);
        let kappa = |t: usize| 0.5 * self.ocv_curvature(mid[t]) * i[t] * ks * ks / pm;

        let mut m = LinModel::interior_point();
        let mut pairs = Vec::with_capacity(self.n);
        let mut u_vars = Vec::with_capacity(self.n);
        let mut couplings = Vec::with_capacity(self.n);
        let mut sigma_prev: Option<usize> = None;
        for t in 0..self.n {
            let (it, st) = (i[t], tr.soc[t]);
            let c = self.prices.prices_eur_mwh[t];
            let u_lo = (-delta).max((-i_max - it) / i_max).min(0.0);
            let u_hi = delta.min((i_max - it) / i_max).max(0.0);
            let u = m.add_var(format!("u[{t}]"), u_lo, u_hi, 0.0);
            let sg_lo = ((self.soc_lower(t) - st) / ks).min(0.0) - relax;
            let sg_hi = ((p.soc_max - st) / ks).max(0.0);
            let sg = m.add_var(format!("sigma[{t}]"), sg_lo, sg_hi, 0.0);
            let mut row = vec![(sg, 1.0), (u, -1.0)];
            if let Some(prev) = sigma_prev {
                row.push((prev, -1.0));
            }
            m.add_row(format!("sigma_def[{t}]"), row, Cmp::Eq, 0.0);
            sigma_prev = Some(sg);
            if !first_order {
                let next = if t + 1 < self.n {
                    mu[t + 1] * (gamma(t + 1) - 0.5 * kappa(t + 1))
                } else {
                    0.0
                };
                m.set_quad(u, (2.0 * mu[t] * alpha(t)).max(0.0));
                m.set_quad(sg, (2.0 * (mu[t] * (gamma(t) + 0.5 * kappa(t)) - next)).max(0.0));
            }
            let pc = m.add_var(format!("p_ch[{t}]"), 0.0, 1.0, c * eur);
            let pd = m.add_var(format!("p_dch[{t}]"), 0.0, 1.0, -c * eur);
            pairs.push((pc, pd));
            u_vars.push(u);

            let ocv = self.ocv(mid[t]);
            let b = ocv + 2.0 * r * it - 0.5 * it * slope[t] * self.k;
            let d = it * slope[t] * self.k;
            couplings.push(m.rows_len());
            m.add_row(
                format!("coupling[{t}]"),
                vec![(pc, eta), (pd, -1.0 / eta), (u, -b * i_max / pm), (sg, -d * i_max / pm)],
                Cmp::Eq,
                tr.p_dc[t] / pm,
            );
            let slope_end = self.ocv_slope(st);
            let cv_s = slope_end * ks;
            let cv_u = r * i_max;
            if cv_s != 0.0 || cv_u != 0.0 {
                let base = self.ocv(st) + r * it;
                let row = vec![(sg, cv_s), (u, cv_u)];
                m.add_row(format!("v_max[{t}]"), row.clone(), Cmp::Le, (p.pack.v_max_v - base).max(0.0));
                m.add_row(format!("v_min[{t}]"), row, Cmp::Ge, (p.pack.v_min_v - base).min(0.0));
            }
        }
        let unit_wh = pm * self.dt_h;
        for (j, seg) in self.segments.iter().enumerate() {
            let row = (seg.start..seg.end)
                .flat_map(|t| [(pairs[t].0, 1.0), (pairs[t].1, 1.0)])
                .collect();
            m.add_row(format!("throughput[{j}]"), row, Cmp::Le, seg.throughput_wh / unit_wh + relax);
        }
        let sol = m.solve_exclusive(&pairs, 1e-7)?;
        let step = u_vars.iter().map(|&u| sol.x[u] * i_max).collect();
        let mu = sol.duals.map(|d| couplings.iter().map(|&k| d[k]).collect());
        Ok(Sub {
            model: m.objective(&sol.x),
            step,
            mu,
        })
    }

    fn initial_point(&self, warm: Option<&[f64]>) -> Option<Vec<f64>> {
        if let Some(w) = warm.filter(|w| w.len() == self.n) {
            if let Some(i) = self.project(w) {
                return Some(i);
            }
        }
        if let Some(i) = self.project(&vec![0.0; self.n]) {
            return Some(i);
        }
        // A SOC floor above the start needs charging first: try the smallest
        // constant current that reaches it, then full current.
        let f = self.p.soc_floor?;
        let need = (f.soc - self.soc0) / (self.k * (f.step + 1) as f64);
        let i_max = self.p.pack.i_max_a;
        [need * (1.0 + 1e-6) + 1e-9 * i_max, i_max].into_iter().find_map(|level| {
            let mut c = vec![0.0; self.n];
            c[..=f.step].iter_mut().for_each(|x| *x = level.min(i_max));
            self.project(&c)
        })
    }
}

/// Largest `x` in `[a, b]` with `ok(x)`, given `ok(a)` and monotone `ok`.
fn bisect_last(mut a: f64, mut b: f64, ok: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..BISECT_ITERS {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if ok(m) {
            a = m;
        } else {
            b = m;
        }
    }
    a
}

/// Smallest `x` in `[a, b]` with `ok(x)`, given `ok(b)` and monotone `ok`.
fn bisect_first(mut a: f64, mut b: f64, ok: impl Fn(f64) -> bool) -> f64 {
    for _ in 0..BISECT_ITERS {
        let m = 0.5 * (a + b);
        if m <= a || m >= b {
            break;
        }
        if ok(m) {
            b = m;
        } else {
            a = m;
        }
    }
    b
}

pub fn nl_optimize(params: &NlParams, prices: &PriceSeries, soc0: f64) -> Result<NlSolution> {
    nl_optimize_with(params, prices, soc0, &NlSettings::default())
}

pub fn nl_optimize_with(
    params: &NlParams,
    prices: &PriceSeries,
    soc0: f64,
    settings: &NlSettings,
) -> Result<NlSolution> {
    let ctx = Ctx::new(params, prices, soc0)?;
    let scale = ctx.scale();
    let mut i = ctx
        .initial_point(settings.warm_start.as_deref())
        .ok_or_else(|| Error::Infeasible("no feasible current trajectory".into()))?;
    let mut tr = ctx.evaluate(&i);
    let mut delta: f64 = if settings.warm_start.is_some() { 0.25 } else { 1.0 };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;
    let mut mu: Option<Vec<f64>> = None;
    while iterations < settings.max_iter {
        iterations += 1;
        let sub = ctx.subproblem(&i, &tr, delta, mu.as_deref(), false)?;
        let step = sub.step;
        let pred = tr.objective - sub.model;
        if pred <= 1e-9 * scale {
            converged = true;
            break;
        }
        let cand: Vec<f64> = i.iter().zip(&step).map(|(a, b)| a + b).collect();
        let mut rho = f64::NEG_INFINITY;
        let mut next = None;
        if let Some(proj) = ctx.project(&cand) {
            let t2 = ctx.evaluate(&proj);
            rho = (tr.objective - t2.objective) / pred;
            next = Some((proj, t2));
        }
        let accepted = rho > 0.1;
        if accepted {
            let (a, b) = next.expect("accepted step has a projection");
            i = a;
            tr = b;
            mu = sub.mu;
        }
        let step_norm = step.iter().fold(0.0_f64, |m, s| m.max(s.abs())) / params.pack.i_max_a;
        if rho < 0.25 {
            delta *= 0.25;
        } else if rho > 0.75 && step_norm >= 0.99 * delta {
            delta = (2.0 * delta).min(2.0);
        }
        if settings.trace {
            trace.push(TraceRow {
                iteration: iterations,
                objective_eur: tr.objective,
                max_residual: verify_parts(params, ctx.soc0, &i, &tr.v, &tr.p_dc, &tr.p_ac, &tr.soc).max_residual,
                trust_radius: delta,
                accepted,
            });
        }
        if delta < 1e-9 {
            break;
        }
    }
    // Interior-point steps leave tiny nonzero currents where the converter
    // should stay off; snap them to zero when that stays feasible.
    let tiny = 1e-6 * params.pack.i_max_a;
    if i.iter().any(|x| x.abs() > 0.0 && x.abs() < tiny) {
        let snapped: Vec<f64> = i.iter().map(|&x| if x.abs() < tiny { 0.0 } else { x }).collect();
        if let Some(proj) = ctx.project(&snapped) {
            i = proj;
            tr = ctx.evaluate(&i);
        }
    }
    let first_order = ctx.subproblem(&i, &tr, 2.0, None, true)?.model;
    let kkt_residual = ((tr.objective - first_order) / scale).max(0.0);
    let degraded = !converged && kkt_residual > 1e-5;
    debug!(iterations, kkt_residual, degraded, objective = tr.objective, "nl solve finished");
    Ok(NlSolution {
        schedule: Schedule {
            grid: prices.grid,
            p_ac_w: tr.p_ac,
            soc_pred: tr.soc,
            objective_eur: tr.objective,
        },
        soc0: ctx.soc0,
        current_a: i,
        voltage_v: tr.v,
        p_dc_w: tr.p_dc,
        kkt_residual,
        iterations,
        degraded,
        trace,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub step: usize,
    pub constraint: String,
    pub residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub max_residual: f64,
    pub worst: Option<Violation>,
    /// First step (in time order) with a residual above 1e-6.
    pub first_violation: Option<Violation>,
}

/// Recomputes every model relation and bound of a solution. Equality
/// residuals are relative to the natural scale of the quantity (SOC, nominal
/// voltage, rated power, current limit).
pub fn nl_verify(params: &NlParams, sol: &NlSolution) -> VerifyReport {
    verify_parts(
        params,
        sol.soc0,
        &sol.current_a,
        &sol.voltage_v,
        &sol.p_dc_w,
        &sol.schedule.p_ac_w,
        &sol.schedule.soc_pred,
    )
}

fn verify_parts(
    p: &NlParams,
    soc0: f64,
    i: &[f64],
    v: &[f64],
    p_dc: &[f64],
    p_ac: &[f64],
    soc: &[f64],
) -> VerifyReport {
    const TOL: f64 = 1e-6;
    let k = p.dt_s as f64 / 3600.0 / p.pack.q_nom_ah;
    let dt_h = p.dt_s as f64 / 3600.0;
    let series = p.pack.series as f64;
    let v_ref = p.pack.v_nom_v;
    let mut report = VerifyReport {
        max_residual: 0.0,
        worst: None,
        first_violation: None,
    };
    let mut note = |step: usize, name: &str, r: f64| {
        let r = if r.is_nan() { f64::INFINITY } else { r };
        if r > report.max_residual {
            report.max_residual = r;
            report.worst = Some(Violation {
                step,
                constraint: name.to_string(),
                residual: r,
            });
        }
        if r > TOL && report.first_violation.is_none() {
            report.first_violation = Some(Violation {
                step,
                constraint: name.to_string(),
                residual: r,
            });
        }
    };
    let n = i.len();
    if [v.len(), p_dc.len(), p_ac.len(), soc.len()].iter().any(|&l| l != n) {
        note(0, "array-length", f64::INFINITY);
        return report;
    }
    let mut prev = soc0;
    for t in 0..n {
        note(t, "soc-recursion", (soc[t] - (prev + k * i[t])).abs());
        let mid = 0.5 * (prev + soc[t]);
        note(t, "voltage", (v[t] - (series * p.ocv.value(mid) + p.r_model_ohm * i[t])).abs() / v_ref);
        note(t, "dc-power", (p_dc[t] - v[t] * i[t]).abs() / p.p_max_w);
        let (pc, pd) = (p_ac[t].max(0.0), (-p_ac[t]).max(0.0));
        note(t, "converter", (p_dc[t] - (p.eta_conv * pc - pd / p.eta_conv)).abs() / p.p_max_w);
        note(t, "current-limit", (i[t].abs() - p.pack.i_max_a).max(0.0) / p.pack.i_max_a);
        let v_end = series * p.ocv.value(soc[t]) + p.r_model_ohm * i[t];
        note(
            t,
            "voltage-limit",
            (p.pack.v_min_v - v_end).max(v_end - p.pack.v_max_v).max(0.0) / v_ref,
        );
        let lo = match p.soc_floor {
            Some(f) if f.step == t => p.soc_min.max(f.soc),
            _ => p.soc_min,
        };
        note(t, "soc-limit", (lo - soc[t]).max(soc[t] - p.soc_max).max(0.0));
        note(t, "power-limit", (p_ac[t].abs() - p.p_max_w).max(0.0) / p.p_max_w);
        prev = soc[t];
    }
    if let Ok(segs) = p.fec_budget.resolve(n, p.e_nom_wh) {
        for s in segs {
            let thr: f64 = p_ac[s.start..s.end].iter().map(|x| x.abs() * dt_h).sum();
            note(s.end.saturating_sub(1), "throughput", (thr - s.throughput_wh).max(0.0) / (2.0 * p.e_nom_wh));
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OracleResult {
    pub objective_eur: f64,
    pub current_a: Vec<f64>,
    pub soc: Vec<f64>,
    pub p_ac_w: Vec<f64>,
}

/// Backward dynamic program over a uniform SOC grid (linear interpolation of
/// the cost-to-go) and a uniform current grid, augmented in every state with
/// the largest feasible charge and discharge currents. The policy is rolled
/// out forward from the exact initial SOC, so the returned schedule is
/// feasible and its objective is evaluated exactly. Throughput budgets are
/// not supported. Intended for verification on small instances.
pub fn dp_oracle(
    params: &NlParams,
    prices: &PriceSeries,
    soc0: f64,
    soc_grid_n: usize,
    i_grid_n: usize,
) -> Result<OracleResult> {
    let ctx = Ctx::new(params, prices, soc0)?;
    if ctx.n > 24 {
        return Err(Error::Oracle(format!("{} steps exceed the 24-step limit", ctx.n)));
    }
    if soc_grid_n < 2 || i_grid_n < 2 {
        return Err(Error::Oracle("grids need at least two points".into()));
    }
    if !matches!(params.fec_budget, FecBudget::Unlimited) {
        return Err(Error::Oracle("throughput budgets are not supported".into()));
    }
    let (lo, hi) = (params.soc_min, params.soc_max);
    let grid: Vec<f64> = (0..soc_grid_n)
        .map(|j| lo + (hi - lo) * j as f64 / (soc_grid_n - 1) as f64)
        .collect();
    let i_max = params.pack.i_max_a;
    let levels: Vec<f64> = (0..i_grid_n)
        .map(|j| -i_max + 2.0 * i_max * j as f64 / (i_grid_n - 1) as f64)
        .collect();
    let interp = |w: &[f64], s: f64| -> f64 {
        let x = ((s - lo) / (hi - lo) * (soc_grid_n - 1) as f64).clamp(0.0, (soc_grid_n - 1) as f64);
        let j = (x.floor() as usize).min(soc_grid_n - 2);
        let f = x - j as f64;
        if f == 0.0 {
            w[j]
        } else if f == 1.0 {
            w[j + 1]
        } else {
            (1.0 - f) * w[j] + f * w[j + 1]
        }
    };
    let stage = |t: usize, s: f64, i: f64| {
        let p_dc = ctx.voltage(s, i) * i;
        prices.prices_eur_mwh[t] * ctx.p_ac(p_dc) * ctx.dt_h / 1e6
    };
    let actions = |t: usize, s: f64| -> Vec<f64> {
        match ctx.interval(t, s) {
            None => Vec::new(),
            Some((a, b)) => {
                let mut v: Vec<f64> = levels.iter().copied().filter(|x| *x >= a && *x <= b).collect();
                v.push(a);
                v.push(b);
                v
            }
        }
    };
    // w[t][j]: optimal cost from the start of step t at grid SOC j.
    let mut w = vec![vec![0.0; soc_grid_n]; ctx.n + 1];
    for t in (1..ctx.n).rev() {
        for (j, &s) in grid.iter().enumerate() {
            let best = actions(t, s)
                .into_iter()
                .map(|i| stage(t, s, i) + interp(&w[t + 1], s + ctx.k * i))
                .fold(f64::INFINITY, f64::min);
            w[t][j] = best;
        }
    }
    let mut s = ctx.soc0;
    let mut current = Vec::with_capacity(ctx.n);
    for t in 0..ctx.n {
        let mut best = (f64::INFINITY, 0.0);
        for i in actions(t, s) {
            let val = stage(t, s, i) + interp(&w[t + 1], s + ctx.k * i);
            if val < best.0 {
                best = (val, i);
            }
        }
        if !best.0.is_finite() {
            return Err(Error::Oracle(format!("no feasible transition at step {t}")));
        }
        current.push(best.1);
        s += ctx.k * best.1;
    }
    let tr = ctx.evaluate(&current);
    Ok(OracleResult {
        objective_eur: tr.objective,
        current_a: current,
        soc: tr.soc,
        p_ac_w: tr.p_ac,
    })
}
