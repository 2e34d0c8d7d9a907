use std::path::Path;

use anyhow::{bail, Context, Result};
use bess_core::analytics::{
    characterize, default_power_grid, default_soc_grid, fitted_efficiencies, run_benchmark, run_metrics,
    run_sensitivity, LedgerRow, SweepSpec,
};
use bess_core::lp::{lp_optimize, FecBudget, LpParams, SocFloor};
use bess_core::model::{apply_soh, read_schedule_csv, TimeGrid};
use bess_core::mpc::{mpc_run, Optimizer, TerminalSoc};
use bess_core::nl::{nl_optimize, nl_verify, NlParams};
use bess_core::plant::{simulate, write_step_csv, PlantState};
use serde_json::{json, Value};

use crate::config::Resolved;

fn write_json(path: &Path, value: &Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n")?;
    Ok(())
}

/// Efficiency maps and constant-efficiency fits per scenario.
pub fn characterize_cmd(cfg: &Resolved, out: &Path) -> Result<Value> {
    let spec = &cfg.system.system;
    let mut fits = Vec::new();
    for scenario in cfg.scenarios() {
        let map = characterize(
            spec,
            &scenario,
            &default_soc_grid(),
            &default_power_grid(spec.converter.p_rated_w),
        )?;
        let file = format!("efficiency_map_soh{}.csv", scenario.soh_r);
        map.write_csv(out.join(&file))?;
        let fit = fitted_efficiencies(spec, &scenario)?;
        fits.push(json!({
            "soh_r": scenario.soh_r,
            "eta_system": fit.eta_system,
            "eta_converter": fit.eta_converter,
            "map": file,
        }));
    }
    let summary = json!({ "scenarios": fits });
    write_json(&out.join("characterize.json"), &summary)?;
    Ok(summary)
}

/// One open-loop optimization over the configured horizon.
pub fn optimize_cmd(cfg: &Resolved, out: &Path) -> Result<Value> {
    let mpc = &cfg.cli.mpc;
    let scenario = cfg.single_scenario()?;
    let spec = &cfg.system.system;
    let aged = apply_soh(spec, &scenario)?;
    let prices = cfg.prices(mpc.opt_dt_s, mpc.horizon_h)?;
    let n = prices.len();
    let soc0 = cfg.cli.soc0;
    let fec_budget = FecBudget::Cycles(mpc.fec_per_day * mpc.horizon_h / 24.0);
    let soc_floor = match mpc.terminal_soc {
        TerminalSoc::Off => None,
        TerminalSoc::RunStart => Some(soc0),
        TerminalSoc::Min(s) => Some(s),
    }
    .map(|soc| SocFloor { step: n - 1, soc });
    let fits = fitted_efficiencies(spec, &scenario)?;
    let mut summary = json!({
        "optimizer": mpc.optimizer.as_str(),
        "soh_r": scenario.soh_r,
        "soc0": soc0,
        "steps": n,
    });
    let schedule = match mpc.optimizer {
        Optimizer::Lp => {
            let params = LpParams {
                eta: mpc.eta.unwrap_or(fits.eta_system),
                e_nom_wh: aged.e_nom_wh,
                p_max_w: aged.converter.p_rated_w,
                soc_min: aged.soc_min,
                soc_max: aged.soc_max,
                fec_budget,
                dt_s: mpc.opt_dt_s,
                soc_floor,
            };
            let sol = lp_optimize(&params, &prices, soc0)?;
            summary["eta"] = json!(params.eta);
            summary["simultaneity_fixes"] = json!(sol.simultaneity_fixes);
            sol.schedule
        }
        Optimizer::Nl => {
            let mut params = NlParams::from_spec(
                &aged,
                mpc.eta_conv.unwrap_or(fits.eta_converter),
                mpc.r_factor,
                mpc.opt_dt_s,
            );
            params.fec_budget = fec_budget;
            params.soc_floor = soc_floor;
            let sol = nl_optimize(&params, &prices, soc0)?;
            let report = nl_verify(&params, &sol);
            summary["eta_conv"] = json!(params.eta_conv);
            summary["iterations"] = json!(sol.iterations);
            summary["kkt_residual"] = json!(sol.kkt_residual);
            summary["degraded"] = json!(sol.degraded);
            summary["max_residual"] = json!(report.max_residual);
            sol.schedule
        }
    };
    summary["objective_eur"] = json!(schedule.objective_eur);
    summary["soc_end"] = json!(schedule.soc_pred.last().copied().unwrap_or(soc0));
    schedule.write_csv(out.join("schedule.csv"))?;
    prices.write_csv(out.join("prices_used.csv"))?;
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// Runs a schedule CSV through the plant at the simulation step.
pub fn simulate_cmd(cfg: &Resolved, out: &Path, schedule: &Path) -> Result<Value> {
    let (grid, setpoints) = read_schedule_csv(schedule).with_context(|| format!("schedule {}", schedule.display()))?;
    let sim_dt = cfg.cli.mpc.sim_dt_s;
    if grid.dt_s % sim_dt != 0 {
        bail!("invalid config `mpc.sim_dt_s`: must divide the schedule step of {} s", grid.dt_s);
    }
    let ratio = (grid.dt_s / sim_dt) as usize;
    let scenario = cfg.single_scenario()?;
    let aged = apply_soh(&cfg.system.system, &scenario)?;
    let sim_grid = TimeGrid::new(grid.t_start, sim_dt, grid.n_steps * ratio)?;
    let prices = cfg
        .prices_at(grid.t_start, grid.dt_s, grid.duration_hours())?
        .resample(&sim_grid)?;
    let targets: Vec<f64> = setpoints.iter().flat_map(|&p| std::iter::repeat_n(p, ratio)).collect();
    let (steps, _) = simulate(&aged, PlantState::new(cfg.cli.soc0, grid.t_start), &targets, sim_dt)?;
    let ledger: Vec<LedgerRow> = steps
        .iter()
        .zip(&prices.prices_eur_mwh)
        .zip(&targets)
        .map(|((s, &c), &p)| LedgerRow::from_step(s, c, p))
        .collect();
    write_step_csv(&steps, out.join("steps.csv"))?;
    bess_core::analytics::write_ledger_csv(&ledger, out.join("ledger.csv"))?;
    let metrics = run_metrics(&ledger, aged.e_nom_wh, aged.converter.p_rated_w);
    let summary = json!({
        "soh_r": scenario.soh_r,
        "soc0": cfg.cli.soc0,
        "steps": steps.len(),
        "clipped_steps": steps.iter().filter(|s| s.clip.is_some()).count(),
        "metrics": metrics,
    });
    write_json(&out.join("summary.json"), &summary)?;
    Ok(summary)
}

/// One closed-loop run.
pub fn mpc_run_cmd(cfg: &Resolved, out: &Path) -> Result<Value> {
    let mpc = &cfg.cli.mpc;
    let scenario = cfg.single_scenario()?;
    let prices = cfg.prices(mpc.opt_dt_s, mpc.run_hours + mpc.horizon_h)?;
    let run = mpc_run(mpc, &cfg.system.system, &scenario, &prices, cfg.cli.soc0)?;
    run.write_dir(out, &cfg.system.system)?;
    Ok(serde_json::to_value(&run.summary)?)
}

/// Both optimizers on every scenario.
pub fn benchmark_cmd(cfg: &Resolved, out: &Path) -> Result<Value> {
    let mpc = &cfg.cli.mpc;
    let scenarios = match cfg.cli.soh {
        Some(_) => cfg.scenarios(),
        None => [1.0, 2.0, 3.0].map(bess_core::model::Scenario::new).to_vec(),
    };
    let prices = cfg.prices(mpc.opt_dt_s, mpc.run_hours + mpc.horizon_h)?;
    let bench = run_benchmark(&cfg.system.system, &scenarios, &prices, mpc, cfg.cli.soc0)?;
    bench.write_dir(out, &cfg.system.system)?;
    Ok(serde_json::to_value(&bench.table)?)
}

/// Parameter sweep against its baseline.
pub fn sweep_cmd(cfg: &Resolved, out: &Path) -> Result<Value> {
    let mpc = &cfg.cli.mpc;
    let spec = SweepSpec {
        kind: cfg.cli.sweep.kind,
        values: cfg.cli.sweep.values.clone(),
        scenario: cfg.single_scenario()?,
    };
    let prices = cfg.prices(mpc.opt_dt_s, mpc.run_hours + mpc.horizon_h)?;
    let table = run_sensitivity(&cfg.system.system, &spec, &prices, mpc, cfg.cli.soc0)?;
    table.write_csv(out.join("sweep.csv"))?;
    std::fs::write(out.join("sweep.json"), table.summary_json()? + "\n")?;
    Ok(serde_json::to_value(&table)?)
}
