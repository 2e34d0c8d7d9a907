//! Benchmark and sensitivity experiments built on closed-loop runs.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::analytics::efficiency::fitted_efficiencies;
use crate::analytics::metrics::{cdf_edges, correlation, power_cdf, RunMetrics};
use crate::error::{Error, Result};
use crate::market::PriceSeries;
use crate::model::{Scenario, SystemSpec};
use crate::mpc::{mpc_run, MpcConfig, Optimizer, RunResult, SolveStats};

/// Number of intervals of the emitted power CDFs.
pub const CDF_BINS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkCell {
    pub scenario: Scenario,
    pub optimizer: Optimizer,
    pub metrics: RunMetrics,
    pub loss_battery_rel: f64,
    pub loss_converter_rel: f64,
    pub stats: SolveStats,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchmarkTable {
    pub soc0: f64,
    pub cells: Vec<BenchmarkCell>,
    /// Pearson correlation of revenue and RTE across all cells.
    pub revenue_rte_correlation: Option<f64>,
}

impl BenchmarkTable {
    pub fn cell(&self, soh_r: f64, optimizer: Optimizer) -> Option<&BenchmarkCell> {
        self.cells
            .iter()
            .find(|c| c.scenario.soh_r == soh_r && c.optimizer == optimizer)
    }
}

pub struct Benchmark {
    pub table: BenchmarkTable,
    /// One run per cell, in the same order as `table.cells`.
    pub runs: Vec<RunResult>,
}

impl BenchmarkCell {
    fn from_run(run: &RunResult) -> Self {
        let m = run.summary.metrics;
        // Losses relative to the energy moved through the converter.
        let moved = m.e_in_wh + m.e_out_wh;
        let rel = |x: f64| if moved > 0.0 { x / moved } else { 0.0 };
        Self {
            scenario: run.summary.scenario.clone(),
            optimizer: run.summary.optimizer,
            loss_battery_rel: rel(m.loss_battery_wh),
            loss_converter_rel: rel(m.loss_converter_wh),
            metrics: m,
            stats: run.summary.stats,
        }
    }
}

/// Runs both optimizers on every scenario. Cells run in parallel on the
/// current rayon pool and are reported scenario-major, LP before NL.
pub fn run_benchmark(
    spec: &SystemSpec,
    scenarios: &[Scenario],
    prices: &PriceSeries,
    config: &MpcConfig,
    soc0: f64,
) -> Result<Benchmark> {
    if scenarios.is_empty() {
        return Err(Error::param("scenarios", "at least one scenario is required"));
    }
    let jobs: Vec<(Scenario, Optimizer)> = scenarios
        .iter()
        .flat_map(|s| [(s.clone(), Optimizer::Lp), (s.clone(), Optimizer::Nl)])
        .collect();
    let runs = jobs
        .par_iter()
        .map(|(scenario, optimizer)| {
            let cfg = MpcConfig {
                optimizer: *optimizer,
                ..config.clone()
            };
            mpc_run(&cfg, spec, scenario, prices, soc0)
        })
        .collect::<Result<Vec<_>>>()?;
    let cells: Vec<BenchmarkCell> = runs.iter().map(BenchmarkCell::from_run).collect();
    let (rev, rte): (Vec<f64>, Vec<f64>) = cells
        .iter()
        .filter_map(|c| c.metrics.rte.map(|r| (c.metrics.revenue_eur, r)))
        .unzip();
    let revenue_rte_correlation = if rev.len() == cells.len() {
        correlation(&rev, &rte)
    } else {
        None
    };
    Ok(Benchmark {
        table: BenchmarkTable {
            soc0,
            cells,
            revenue_rte_correlation,
        },
        runs,
    })
}

fn run_dir_name(run: &RunResult) -> String {
    format!("{}_soh{}", run.summary.optimizer.as_str(), run.summary.scenario.soh_r)
}

impl Benchmark {
    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.table)?)
    }

    /// Writes `benchmark.csv`, `benchmark.json`, `power_cdf.csv` and one run
    /// directory per cell under `runs/`.
    pub fn write_dir(&self, dir: impl AsRef<Path>, spec: &SystemSpec) -> Result<()> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut w = csv::Writer::from_path(dir.join("benchmark.csv"))?;
        w.write_record([
            "scenario",
            "soh_r",
            "optimizer",
            "revenue_eur",
            "rte",
            "e_imb_wh",
            "e_in_wh",
            "e_out_wh",
            "fec",
            "loss_battery_wh",
            "loss_converter_wh",
            "loss_battery_rel",
            "loss_converter_rel",
            "share_above_90",
            "soc_end",
        ])?;
        for c in &self.table.cells {
            let m = &c.metrics;
            w.write_record([
                c.scenario.label.clone(),
                c.scenario.soh_r.to_string(),
                c.optimizer.as_str().to_string(),
                m.revenue_eur.to_string(),
                m.rte.map(|r| r.to_string()).unwrap_or_default(),
                m.e_imb_wh.to_string(),
                m.e_in_wh.to_string(),
                m.e_out_wh.to_string(),
                m.fec.to_string(),
                m.loss_battery_wh.to_string(),
                m.loss_converter_wh.to_string(),
                c.loss_battery_rel.to_string(),
                c.loss_converter_rel.to_string(),
                m.share_above_90.to_string(),
                m.soc_end.to_string(),
            ])?;
        }
        w.flush()?;
        std::fs::write(dir.join("benchmark.json"), self.summary_json()? + "\n")?;

        let mut w = csv::Writer::from_path(dir.join("power_cdf.csv"))?;
        w.write_record(["soh_r", "optimizer", "power_w", "cdf"])?;
        for run in &self.runs {
            let edges = cdf_edges(run.p_rated_w, CDF_BINS);
            for (p, f) in power_cdf(&run.ledger, &edges) {
                w.write_record([
                    run.summary.scenario.soh_r.to_string(),
                    run.summary.optimizer.as_str().to_string(),
                    p.to_string(),
                    f.to_string(),
                ])?;
            }
        }
        w.flush()?;

        for run in &self.runs {
            run.write_dir(dir.join("runs").join(run_dir_name(run)), spec)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SweepKind {
    /// LP with a fixed system efficiency.
    LpEta,
    /// NL with the model resistance scaled; the plant keeps the true value.
    NlRFactor,
}

impl SweepKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            SweepKind::LpEta => "lp-eta",
            SweepKind::NlRFactor => "nl-r-factor",
        }
    }

    fn range(&self) -> (f64, f64) {
        match self {
            SweepKind::LpEta => (0.90, 0.97),
            SweepKind::NlRFactor => (0.5, 1.5),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub kind: SweepKind,
    pub values: Vec<f64>,
    pub scenario: Scenario,
}

impl SweepSpec {
    pub fn validate(&self) -> Result<()> {
        if self.values.is_empty() {
            return Err(Error::param("sweep.values", "must not be empty"));
        }
        let (lo, hi) = self.kind.range();
        if let Some(v) = self.values.iter().find(|v| !(lo - 1e-12..=hi + 1e-12).contains(*v)) {
            return Err(Error::param(
                "sweep.values",
                format!("{v} outside [{lo}, {hi}] for {}", self.kind.as_str()),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub baseline: bool,
    pub revenue_eur: f64,
    pub e_imb_wh: f64,
    pub rte: Option<f64>,
    pub delta_revenue_eur: f64,
    pub delta_e_imb_wh: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepTable {
    pub kind: SweepKind,
    pub scenario: Scenario,
    pub soc0: f64,
    /// Baseline first, then the declared values in order.
    pub points: Vec<SweepPoint>,
}

impl SweepTable {
    pub fn baseline(&self) -> &SweepPoint {
        self.points.iter().find(|p| p.baseline).expect("sweep tables carry their baseline")
    }

    pub fn at(&self, value: f64) -> Option<&SweepPoint> {
        self.points.iter().find(|p| p.value == value)
    }

    pub fn summary_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Long-format CSV, one row per sweep point.
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record([
            "kind",
            "soh_r",
            "value",
            "baseline",
            "revenue_eur",
            "e_imb_wh",
            "rte",
            "delta_revenue_eur",
            "delta_e_imb_wh",
        ])?;
        for p in &self.points {
            w.write_record([
                self.kind.as_str().to_string(),
                self.scenario.soh_r.to_string(),
                p.value.to_string(),
                p.baseline.to_string(),
                p.revenue_eur.to_string(),
                p.e_imb_wh.to_string(),
                p.rte.map(|r| r.to_string()).unwrap_or_default(),
                p.delta_revenue_eur.to_string(),
                p.delta_e_imb_wh.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Runs a parameter sweep. The baseline is the fitted system efficiency for
/// `LpEta` and factor 1.0 for `NlRFactor`; it is added when not declared.
pub fn run_sensitivity(
    spec: &SystemSpec,
    sweep: &SweepSpec,
    prices: &PriceSeries,
    config: &MpcConfig,
    soc0: f64,
) -> Result<SweepTable> {
    sweep.validate()?;
    let base_value = match sweep.kind {
        SweepKind::LpEta => fitted_efficiencies(spec, &sweep.scenario)?.eta_system,
        SweepKind::NlRFactor => 1.0,
    };
    let mut values = vec![base_value];
    values.extend(sweep.values.iter().copied().filter(|v| *v != base_value));
    let runs = values
        .par_iter()
        .map(|&v| {
            let cfg = match sweep.kind {
                SweepKind::LpEta => MpcConfig {
                    optimizer: Optimizer::Lp,
                    eta: Some(v),
                    ..config.clone()
                },
                SweepKind::NlRFactor => MpcConfig {
                    optimizer: Optimizer::Nl,
                    r_factor: v,
                    ..config.clone()
                },
            };
            mpc_run(&cfg, spec, &sweep.scenario, prices, soc0).map(|r| r.summary.metrics)
        })
        .collect::<Result<Vec<_>>>()?;
    let base = runs[0];
    let points = values
        .iter()
        .zip(&runs)
        .enumerate()
        .map(|(k, (&value, m))| SweepPoint {
            value,
            baseline: k == 0,
            revenue_eur: m.revenue_eur,
            e_imb_wh: m.e_imb_wh,
            rte: m.rte,
            delta_revenue_eur: m.revenue_eur - base.revenue_eur,
            delta_e_imb_wh: m.e_imb_wh - base.e_imb_wh,
        })
        .collect();
    Ok(SweepTable {
        kind: sweep.kind,
        scenario: sweep.scenario.clone(),
        soc0,
        points,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::metrics::{read_ledger_csv, run_metrics};
    use crate::model::{ConverterSpec, SystemConfig, TimeGrid};
    use crate::ocv::OcvCurve;
    use crate::mpc::TerminalSoc;
    use chrono::NaiveDate;

    fn prices(hours: usize) -> PriceSeries {
        let t0 = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let grid = TimeGrid::new(t0, 900, 4 * hours).unwrap();
        crate::market::synth_prices(42, &grid, &Default::default()).unwrap()
    }

    fn short(hours: f64) -> MpcConfig {
        MpcConfig {
            horizon_h: 4.0,
            run_hours: hours,
            ..Default::default()
        }
    }

    #[test]
    fn sweep_validation() {
        let s = |kind, values: Vec<f64>| SweepSpec {
            kind,
            values,
            scenario: Scenario::new(3.0),
        };
        assert!(s(SweepKind::LpEta, vec![]).validate().is_err());
        assert!(s(SweepKind::LpEta, vec![0.89]).validate().is_err());
        assert!(s(SweepKind::LpEta, vec![0.90, 0.97]).validate().is_ok());
        assert!(s(SweepKind::NlRFactor, vec![1.6]).validate().is_err());
        assert!(s(SweepKind::NlRFactor, vec![0.5, 1.5]).validate().is_ok());
    }

    #[test]
    fn lossless_plant_models_coincide() {
        let mut spec = SystemConfig::default_config().system;
        spec.cell.r_internal_ohm = 0.0;
        spec.converter = ConverterSpec::ideal(spec.converter.p_rated_w);
        spec.ocv = OcvCurve::constant(spec.cell.v_nom_v);
        let pack = spec.pack_params();
        spec.e_nom_wh = pack.q_nom_ah * pack.series as f64 * spec.cell.v_nom_v;
        let t0 = NaiveDate::from_ymd_opt(2021, 3, 1).unwrap().and_hms_opt(0, 0, 0).unwrap();
        let square = (0..40).map(|k| if (k / 4) % 2 == 0 { 20.0 } else { 120.0 }).collect();
        let prices = PriceSeries::new(TimeGrid::new(t0, 900, 40).unwrap(), square).unwrap();
        let cfg = MpcConfig {
            eta: Some(1.0),
            eta_conv: Some(1.0),
            terminal_soc: TerminalSoc::Off,
            // A binding prorated cap makes closed-loop revenue depend on which
            // of several equally good plans each solve returns.
            fec_per_day: 24.0,
            ..short(6.0)
        };
        let b = run_benchmark(&spec, &[Scenario::new(1.0)], &prices, &cfg, spec.soc_min).unwrap();
        let lp = b.table.cell(1.0, Optimizer::Lp).unwrap().metrics.revenue_eur;
        let nl = b.table.cell(1.0, Optimizer::Nl).unwrap().metrics.revenue_eur;
        assert!(lp > 0.0);
        assert!((lp - nl).abs() <= 1e-6 * lp.abs(), "{lp} {nl}");
    }

    #[test]
    fn benchmark_cells_are_ordered_and_persisted() {
        let spec = SystemConfig::default_config().system;
        let scenarios = [Scenario::new(1.0), Scenario::new(3.0)];
        let b = run_benchmark(&spec, &scenarios, &prices(12), &short(6.0), 0.5).unwrap();
        let order: Vec<(f64, Optimizer)> = b.table.cells.iter().map(|c| (c.scenario.soh_r, c.optimizer)).collect();
        assert_eq!(
            order,
            vec![(1.0, Optimizer::Lp), (1.0, Optimizer::Nl), (3.0, Optimizer::Lp), (3.0, Optimizer::Nl)]
        );
        for c in &b.table.cells {
            let m = &c.metrics;
            let split = m.loss_battery_wh + m.loss_converter_wh;
            assert!((split - m.loss_total_wh()).abs() <= 1e-6 * m.loss_total_wh().max(1.0));
        }
        let dir = tempfile::tempdir().unwrap();
        b.write_dir(dir.path(), &spec).unwrap();
        for f in ["benchmark.csv", "benchmark.json", "power_cdf.csv"] {
            assert!(dir.path().join(f).exists(), "{f}");
        }
        for run in &b.runs {
            let d = dir.path().join("runs").join(run_dir_name(run));
            let rows = read_ledger_csv(d.join("ledger.csv")).unwrap();
            assert_eq!(run_metrics(&rows, run.e_nom_wh, run.p_rated_w), run.summary.metrics);
            assert!(d.join("run_config.toml").exists());
        }
        let cdf = std::fs::read_to_string(dir.path().join("power_cdf.csv")).unwrap();
        assert_eq!(cdf.lines().count(), 1 + 4 * (CDF_BINS + 1));
    }

    #[test]
    fn sweep_baseline_is_exactly_zero() {
        let spec = SystemConfig::default_config().system;
        let sweep = SweepSpec {
            kind: SweepKind::NlRFactor,
            values: vec![0.5, 1.0],
            scenario: Scenario::new(3.0),
        };
        let t = run_sensitivity(&spec, &sweep, &prices(8), &short(4.0), 0.5).unwrap();
        assert_eq!(t.points.len(), 2);
        let b = t.baseline();
        assert_eq!(b.value, 1.0);
        assert_eq!((b.delta_revenue_eur, b.delta_e_imb_wh), (0.0, 0.0));

        let sweep = SweepSpec {
            kind: SweepKind::LpEta,
            values: vec![0.90, 0.97],
            scenario: Scenario::new(3.0),
        };
        let t = run_sensitivity(&spec, &sweep, &prices(8), &short(4.0), 0.5).unwrap();
        assert_eq!(t.points.len(), 3);
        let fitted = fitted_efficiencies(&spec, &Scenario::new(3.0)).unwrap().eta_system;
        assert_eq!(t.baseline().value, fitted);
        assert_eq!(t.baseline().delta_revenue_eur, 0.0);
        let dir = tempfile::tempdir().unwrap();
        t.write_csv(dir.path().join("sweep.csv")).unwrap();
        let body = std::fs::read_to_string(dir.path().join("sweep.csv")).unwrap();
        assert_eq!(body.lines().count(), 4);
    }
}
