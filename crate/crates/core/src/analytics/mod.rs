pub mod efficiency;
pub mod experiments;
pub mod metrics;

pub use efficiency::{
    characterize, default_power_grid, default_soc_grid, fit_constant_eta, fitted_efficiencies,
    EfficiencyMap, FittedEfficiencies,
};
pub use experiments::{
    run_benchmark, run_sensitivity, Benchmark, BenchmarkCell, BenchmarkTable, SweepKind, SweepPoint, SweepSpec,
    SweepTable,
};
pub use metrics::{
    cdf_edges, correlation, energy_shortfall_wh, power_cdf, read_ledger_csv, revenue_eur, rte, run_metrics,
    share_above, write_cdf_csv, write_ledger_csv, LedgerRow, RunMetrics,
};
