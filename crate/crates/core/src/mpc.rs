//! Receding-horizon control: optimize over the horizon from the plant's
//! measured SOC, execute the first action window on the plant, roll forward.

use std::path::Path;
use std::time::Instant;

use chrono::{NaiveDateTime, NaiveTime};
use serde::{Deserialize, Serialize};
use tracing::{debug, info, warn};

use crate::analytics::efficiency::fitted_efficiencies;
use crate::analytics::metrics::{run_metrics, write_ledger_csv, LedgerRow, RunMetrics};
use crate::error::{Error, Result};
use crate::lp::{lp_optimize, FecBudget, FecSegment, LpParams, SocFloor};
use crate::market::PriceSeries;
use crate::model::{apply_soh, Scenario, SystemSpec, TimeGrid};
use crate::nl::{nl_optimize_with, NlParams, NlSettings};
use crate::plant::{Plant, PlantState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Optimizer {
    #[default]
    Lp,
    Nl,
}

impl Optimizer {
    pub fn as_str(&self) -> &'static str {
        match self {
            Optimizer::Lp => "lp",
            Optimizer::Nl => "nl",
        }
    }
}

/// Lower bound on the SOC at the end of the run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TerminalSoc {
    Off,
    /// The SOC the run started from.
    #[default]
    RunStart,
    Min(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MpcConfig {
    pub optimizer: Optimizer,
    pub horizon_h: f64,
    pub action_min: u32,
    pub opt_dt_s: u32,
    pub sim_dt_s: u32,
    pub fec_per_day: f64,
    pub terminal_soc: TerminalSoc,
    pub run_hours: f64,
    /// LP one-way efficiency; the scenario's fitted system efficiency if unset.
    pub eta: Option<f64>,
    /// NL converter efficiency; the fitted converter efficiency if unset.
    pub eta_conv: Option<f64>,
    /// Factor on the resistance the NL optimizer assumes (plant keeps the true value).
    pub r_factor: f64,
    pub nl_max_iter: usize,
}

impl Default for MpcConfig {
    fn default() -> Self {
        Self {
            optimizer: Optimizer::Lp,
            horizon_h: 12.0,
            action_min: 15,
            opt_dt_s: 900,
            sim_dt_s: 60,
            fec_per_day: 1.5,
            terminal_soc: TerminalSoc::RunStart,
            run_hours: 168.0,
            eta: None,
            eta_conv: None,
            r_factor: 1.0,
            nl_max_iter: NlSettings::default().max_iter,
        }
    }
}

/// Bisection steps when lowering an unreachable terminal floor.
const FLOOR_BISECTIONS: usize = 8;
const TIE_BREAK: f64 = 1e-6;

fn whole_multiple(num_s: f64, den_s: u32) -> Option<usize> {
    let k = num_s / den_s as f64;
    (k >= 1.0 && (k - k.round()).abs() < 1e-9).then(|| k.round() as usize)
}

impl MpcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.opt_dt_s == 0 || self.sim_dt_s == 0 {
            return Err(Error::param("opt_dt_s", "time steps must be positive"));
        }
        if self.sim_dt_s > self.opt_dt_s || !self.opt_dt_s.is_multiple_of(self.sim_dt_s) {
            return Err(Error::param("sim_dt_s", "must divide opt_dt_s"));
        }
        if !(self.horizon_h > 0.0) || whole_multiple(self.horizon_h * 3600.0, self.opt_dt_s).is_none() {
            return Err(Error::param("horizon_h", "must be a positive multiple of opt_dt_s"));
        }
        if self.action_min as f64 / 60.0 > self.horizon_h {
            return Err(Error::param("action_min", "action horizon longer than the optimization horizon"));
        }
        if whole_multiple(self.action_min as f64 * 60.0, self.opt_dt_s).is_none() {
            return Err(Error::param("action_min", "must be a positive multiple of opt_dt_s"));
        }
        if !(self.run_hours > 0.0) || whole_multiple(self.run_hours * 60.0, self.action_min).is_none() {
            return Err(Error::param("run_hours", "must be a positive multiple of the action horizon"));
        }
        if !(self.fec_per_day >= 0.0) {
            return Err(Error::param("fec_per_day", "must be non-negative"));
        }
        if !(self.r_factor >= 0.0) || !self.r_factor.is_finite() {
            return Err(Error::param("r_factor", "must be non-negative"));
        }
        for (name, v) in [("eta", self.eta), ("eta_conv", self.eta_conv)] {
            if let Some(e) = v {
                if !(e > 0.0 && e <= 1.0) {
                    return Err(Error::param(name, "must be in (0, 1]"));
                }
            }
        }
        if let TerminalSoc::Min(s) = self.terminal_soc {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::param("terminal_soc", "must be a fraction"));
            }
        }
        if self.nl_max_iter == 0 {
            return Err(Error::param("nl_max_iter", "must be positive"));
        }
        Ok(())
    }

    fn steps(&self) -> (usize, usize, usize, usize) {
        let h = whole_multiple(self.horizon_h * 3600.0, self.opt_dt_s).expect("validated");
        let a = whole_multiple(self.action_min as f64 * 60.0, self.opt_dt_s).expect("validated");
        let run = whole_multiple(self.run_hours * 3600.0, self.opt_dt_s).expect("validated");
        (h, a, run, (self.opt_dt_s / self.sim_dt_s) as usize)
    }
}

/// Throughput budget for an optimization horizon. Today's unused share of
/// the daily cap (`2 * e_nom * fec_per_day`, counted on delivered energy in
/// `ledger`) is prorated by the fraction of today's remaining hours the
/// horizon covers; every later day gets the daily cap prorated by its
/// hours in the horizon over 24.
pub fn fec_budget_remaining(
    ledger: &[LedgerRow],
    clock: NaiveDateTime,
    fec_per_day: f64,
    e_nom_wh: f64,
    horizon: &TimeGrid,
) -> Vec<FecSegment> {
    let daily = 2.0 * e_nom_wh * fec_per_day;
    let today = clock.date();
    let used: f64 = ledger
        .iter()
        .rev()
        .take_while(|r| r.timestamp.date() == today)
        .map(|r| r.p_delivered_w.abs() * r.dt_s as f64 / 3600.0)
        .sum();
    let next_midnight = today.succ_opt().expect("date in range").and_time(NaiveTime::MIN);
    let hours_left_today = (next_midnight - clock).num_seconds() as f64 / 3600.0;
    let dt_h = horizon.dt_hours();
    let mut segments = Vec::new();
    let mut start = 0;
    while start < horizon.n_steps {
        let day = horizon.time_at(start).date();
        let mut end = start + 1;
        while end < horizon.n_steps && horizon.time_at(end).date() == day {
            end += 1;
        }
        let hours = (end - start) as f64 * dt_h;
        let throughput_wh = if day == today {
            (daily - used).max(0.0) * (hours / hours_left_today).min(1.0)
        } else {
            daily * hours / 24.0
        };
        segments.push(FecSegment {
            start,
            end,
            throughput_wh,
        });
        start = end;
    }
    segments
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SolveStats {
    pub solves: usize,
    /// NL solves that hit the iteration cap without reaching stationarity.
    pub degraded: usize,
    /// Solves whose terminal SOC floor was unreachable and was lowered to
    /// the current SOC.
    pub floor_dropped: usize,
    /// Solves that failed outright; the action window is then left idle.
    pub failed: usize,
    pub nl_iterations: usize,
    pub nl_max_kkt: f64,
    pub simultaneity_fixes: usize,
    /// Sim steps where the daily throughput guard cut the setpoint.
    pub guard_cuts: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub optimizer: Optimizer,
    pub scenario: Scenario,
    pub soc0: f64,
    /// Efficiency handed to the optimizer (LP: system, NL: converter).
    pub eta_model: f64,
    pub r_factor: f64,
    pub metrics: RunMetrics,
    pub stats: SolveStats,
}

#[derive(Debug, Clone)]
pub struct RunResult {
    pub config: MpcConfig,
    pub summary: RunSummary,
    pub ledger: Vec<LedgerRow>,
    pub e_nom_wh: f64,
    pub p_rated_w: f64,
    /// Wall-clock time spent in the optimizers; not part of the summary.
    pub solve_seconds: f64,
}

/// Everything needed to replay a run besides the price data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSnapshot {
    pub soc0: f64,
    pub mpc: MpcConfig,
    pub scenario: Scenario,
    pub system: SystemSpec,
}

pub fn mpc_run(
    config: &MpcConfig,
    spec: &SystemSpec,
    scenario: &Scenario,
    prices: &PriceSeries,
    soc0: f64,
) -> Result<RunResult> {
    config.validate()?;
    let aged = apply_soh(spec, scenario)?;
    let plant = Plant::new(&aged)?;
    if !(aged.soc_min..=aged.soc_max).contains(&soc0) {
        return Err(Error::Infeasible(format!(
            "initial soc {soc0} outside [{}, {}]",
            aged.soc_min, aged.soc_max
        )));
    }
    let (h, a, n_run, ratio) = config.steps();
    let t0 = prices.grid.t_start;
    let opt_prices = prices.resample(&TimeGrid::new(t0, config.opt_dt_s, n_run - a + h)?)?;
    let sim_prices = prices.resample(&TimeGrid::new(t0, config.sim_dt_s, n_run * ratio)?)?;

    let eta_model = match config.optimizer {
        Optimizer::Lp => match config.eta {
            Some(e) => e,
            None => fitted_efficiencies(spec, scenario)?.eta_system,
        },
        Optimizer::Nl => match config.eta_conv {
            Some(e) => e,
            None => fitted_efficiencies(spec, scenario)?.eta_converter,
        },
    };
    let terminal = match config.terminal_soc {
        TerminalSoc::Off => None,
        TerminalSoc::RunStart => Some(soc0),
        TerminalSoc::Min(s) => Some(s.clamp(aged.soc_min, aged.soc_max)),
    };
    let e_nom = aged.e_nom_wh;
    let p_rated = aged.converter.p_rated_w;
    let daily_cap = 2.0 * e_nom * config.fec_per_day;
    let sim_dt_h = config.sim_dt_s as f64 / 3600.0;

    let mut state = PlantState::new(soc0, t0);
    let mut ledger: Vec<LedgerRow> = Vec::with_capacity(n_run * ratio);
    let mut stats = SolveStats::default();
    let mut warm: Option<Vec<f64>> = None;
    let mut solve_seconds = 0.0;
    let mut day = t0.date();
    let mut used_today = 0.0;

    for it in 0..n_run / a {
        let off = it * a;
        let grid = opt_prices.grid.slice(off, h);
        // A tiny time discount breaks ties between equal prices in favour
        // of acting early; otherwise the receding horizon can postpone a
        // tied trade forever.
        let slice = PriceSeries::new(
            grid,
            opt_prices.prices_eur_mwh[off..off + h]
                .iter()
                .enumerate()
                .map(|(t, c)| c * (1.0 - TIE_BREAK * t as f64))
                .collect(),
        )?;
        let segments = fec_budget_remaining(&ledger, state.clock, config.fec_per_day, e_nom, &grid);
        // The floor applies to every horizon that reaches the end of the run.
        let floor = terminal
            .filter(|_| off + h >= n_run)
            .map(|soc| SocFloor { step: n_run - off - 1, soc });
        let started = Instant::now();
        let schedule = solve_horizon(
            config,
            &aged,
            eta_model,
            &slice,
            state.soc,
            FecBudget::Segments(segments),
            floor,
            &mut warm,
            a,
            &mut stats,
        );
        solve_seconds += started.elapsed().as_secs_f64();

        for &p_sched in &schedule[..a] {
            for _ in 0..ratio {
                if state.clock.date() != day {
                    day = state.clock.date();
                    used_today = 0.0;
                }
                // Daily cap on delivered energy.
                let room = (daily_cap - used_today).max(0.0);
                let mut target = p_sched;
                if target.abs() * sim_dt_h > room * (1.0 + 1e-9) {
                    target = (room / sim_dt_h).copysign(target);
                    stats.guard_cuts += 1;
                }
                let k = ledger.len();
                let step = plant.step(&mut state, target, config.sim_dt_s);
                used_today += step.p_ac_w.abs() * sim_dt_h;
                ledger.push(LedgerRow::from_step(&step, sim_prices.prices_eur_mwh[k], p_sched));
            }
        }
    }
    let metrics = run_metrics(&ledger, e_nom, p_rated);
    info!(
        optimizer = config.optimizer.as_str(),
        soh_r = scenario.soh_r,
        revenue = metrics.revenue_eur,
        e_imb_wh = metrics.e_imb_wh,
        solve_seconds,
        "mpc run finished"
    );
    Ok(RunResult {
        config: config.clone(),
        summary: RunSummary {
            optimizer: config.optimizer,
            scenario: scenario.clone(),
            soc0,
            eta_model,
            r_factor: config.r_factor,
            metrics,
            stats,
        },
        ledger,
        e_nom_wh: e_nom,
        p_rated_w: p_rated,
        solve_seconds,
    })
}

/// Optimizes one horizon and returns the AC setpoints. Failures leave the
/// window idle and are counted.
#[allow(clippy::too_many_arguments)]
fn solve_horizon(
    config: &MpcConfig,
    aged: &SystemSpec,
    eta_model: f64,
    prices: &PriceSeries,
    soc: f64,
    budget: FecBudget,
    floor: Option<SocFloor>,
    warm: &mut Option<Vec<f64>>,
    shift: usize,
    stats: &mut SolveStats,
) -> Vec<f64> {
    let n = prices.len();
    stats.solves += 1;
    let mut attempt = |floor: Option<SocFloor>, stats: &mut SolveStats| -> Result<Vec<f64>> {
        match config.optimizer {
            Optimizer::Lp => {
                let params = LpParams {
                    eta: eta_model,
                    e_nom_wh: aged.e_nom_wh,
                    p_max_w: aged.converter.p_rated_w,
                    soc_min: aged.soc_min,
                    soc_max: aged.soc_max,
                    fec_budget: budget.clone(),
                    dt_s: config.opt_dt_s,
                    soc_floor: floor,
                };
                let sol = lp_optimize(&params, prices, soc)?;
                stats.simultaneity_fixes += sol.simultaneity_fixes;
                Ok(sol.schedule.p_ac_w)
            }
            Optimizer::Nl => {
                let mut params = NlParams::from_spec(aged, eta_model, config.r_factor, config.opt_dt_s);
                params.fec_budget = budget.clone();
                params.soc_floor = floor;
                let settings = NlSettings {
                    max_iter: config.nl_max_iter,
                    warm_start: warm.as_ref().map(|w| {
                        let mut s: Vec<f64> = w.iter().skip(shift).copied().collect();
                        s.resize(n, 0.0);
                        s
                    }),
                    trace: false,
                };
                let sol = nl_optimize_with(&params, prices, soc, &settings)?;
                stats.nl_iterations += sol.iterations;
                stats.nl_max_kkt = stats.nl_max_kkt.max(sol.kkt_residual);
                if sol.degraded {
                    stats.degraded += 1;
                    warn!(t = %prices.grid.t_start, kkt = sol.kkt_residual, "nl solve degraded");
                }
                *warm = Some(sol.current_a);
                Ok(sol.schedule.p_ac_w)
            }
        }
    };
    let first = attempt(floor, stats);
    let result = match (first, floor) {
        (Err(Error::Infeasible(reason)), Some(f)) => {
            // Idling keeps the current SOC, so a floor at the current SOC is
            // always reachable. Bisect for the highest reachable floor.
            debug!(%reason, "terminal soc floor unreachable; lowering it");
            stats.floor_dropped += 1;
            let mut lo = soc.min(f.soc);
            let mut hi = f.soc;
            let mut best = attempt(Some(SocFloor { soc: lo, ..f }), stats);
            for _ in 0..FLOOR_BISECTIONS {
                if best.is_err() || hi - lo < 1e-4 {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                match attempt(Some(SocFloor { soc: mid, ..f }), stats) {
                    Ok(p) => {
                        lo = mid;
                        best = Ok(p);
                    }
                    Err(Error::Infeasible(_)) => hi = mid,
                    Err(e) => {
                        best = Err(e);
                    }
                }
            }
            best
        }
        (other, _) => other,
    };
    match result {
        Ok(p) => p,
        Err(e) => {
            warn!(t = %prices.grid.t_start, error = %e, "optimizer failed; window left idle");
            stats.failed += 1;
            *warm = None;
            vec![0.0; n]
        }
    }
}

impl RunResult {
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.summary)?)
    }

    /// Writes `ledger.csv`, `summary.json` and `run_config.toml` into `dir`.
    pub fn write_dir(&self, dir: impl AsRef<Path>, spec: &SystemSpec) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        write_ledger_csv(&self.ledger, dir.join("ledger.csv"))?;
        std::fs::write(dir.join("summary.json"), self.summary_json()? + "\n")?;
        let snap = RunSnapshot {
            soc0: self.summary.soc0,
            mpc: self.config.clone(),
            scenario: self.summary.scenario.clone(),
            system: spec.clone(),
        };
        std::fs::write(dir.join("run_config.toml"), toml::to_string(&snap)?)?;
        Ok(())
    }
}
