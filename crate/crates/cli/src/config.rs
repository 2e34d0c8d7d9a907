//! Layered run configuration: command-line flags override the config file,
//! which overrides the built-in defaults.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use bess_core::analytics::SweepKind;
use bess_core::market::{load_prices, synth_prices, PriceSeries, SynthParams};
use bess_core::model::{Scenario, SystemConfig, TimeGrid};
use bess_core::mpc::MpcConfig;
use chrono::NaiveDateTime;
use serde::{Deserialize, Serialize};

/// Config snapshot written into every output directory.
pub const SNAPSHOT_FILE: &str = "config.toml";
const SNAPSHOT_SYSTEM: &str = "system.toml";
const SNAPSHOT_PRICES: &str = "prices.csv";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CliConfig {
    /// System config file; the shipped default system if unset.
    pub system: Option<PathBuf>,
    pub seed: u64,
    pub start: NaiveDateTime,
    pub days: f64,
    pub soc0: f64,
    /// SOH_R scenarios; the system file's scenario if unset (benchmark: 1, 2, 3).
    pub soh: Option<Vec<f64>>,
    pub prices: PriceSource,
    pub mpc: MpcConfig,
    pub sweep: SweepSettings,
    #[serde(skip_serializing)]
    pub out_dir: Option<PathBuf>,
}

impl Default for CliConfig {
    fn default() -> Self {
        Self {
            system: None,
            seed: 42,
            start: chrono::NaiveDate::from_ymd_opt(2021, 3, 1)
                .unwrap()
                .and_hms_opt(0, 0, 0)
                .unwrap(),
            days: 7.0,
            soc0: 0.5,
            soh: None,
            prices: PriceSource::default(),
            mpc: MpcConfig::default(),
            sweep: SweepSettings::default(),
            out_dir: None,
        }
    }
}

/// Exactly one of a price CSV and synthetic generator parameters. With
/// neither set, default synthetic prices are used.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriceSource {
    pub csv: Option<PathBuf>,
    pub synth: Option<SynthParams>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSettings {
    pub kind: SweepKind,
    pub values: Vec<f64>,
}

impl Default for SweepSettings {
    fn default() -> Self {
        Self {
            kind: SweepKind::LpEta,
            values: vec![0.90, 0.92, 0.94, 0.96, 0.97],
        }
    }
}

/// A fully resolved configuration.
pub struct Resolved {
    pub cli: CliConfig,
    pub system: SystemConfig,
    /// Raw bytes of the price CSV, kept for the snapshot.
    prices_csv: Option<Vec<u8>>,
}

impl CliConfig {
    /// Reads a config file; relative paths inside it resolve against the
    /// file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        let mut cfg: CliConfig =
            toml::from_str(&text).with_context(|| format!("invalid config {}", path.display()))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rebase = |p: &mut Option<PathBuf>| {
            if let Some(q) = p.as_mut() {
                if q.is_relative() {
                    *q = base.join(&*q);
                }
            }
        };
        rebase(&mut cfg.system);
        rebase(&mut cfg.prices.csv);
        rebase(&mut cfg.out_dir);
        Ok(cfg)
    }

    pub fn resolve(self) -> Result<Resolved> {
        if self.prices.csv.is_some() && self.prices.synth.is_some() {
            bail!("invalid config `prices`: set either `csv` or `synth`, not both");
        }
        if !(self.days > 0.0) {
            bail!("invalid config `days`: must be positive");
        }
        if let Some(s) = &self.soh {
            if s.is_empty() || s.iter().any(|r| !(*r > 0.0)) {
                bail!("invalid config `soh`: need one or more positive values");
            }
        }
        let system = match &self.system {
            Some(p) => SystemConfig::load(p).with_context(|| format!("system config {}", p.display()))?,
            None => SystemConfig::default_config(),
        };
        let prices_csv = match &self.prices.csv {
            Some(p) => Some(std::fs::read(p).with_context(|| format!("reading prices {}", p.display()))?),
            None => None,
        };
        let mut cli = self;
        cli.mpc.run_hours = cli.days * 24.0;
        cli.mpc.validate().context("invalid config `mpc`")?;
        Ok(Resolved {
            cli,
            system,
            prices_csv,
        })
    }
}

impl Resolved {
    /// Scenarios to evaluate, defaulting to the system file's scenario.
    pub fn scenarios(&self) -> Vec<Scenario> {
        match &self.cli.soh {
            Some(list) => list.iter().map(|&r| Scenario::new(r)).collect(),
            None => vec![self.system.scenario.clone()],
        }
    }

    pub fn single_scenario(&self) -> Result<Scenario> {
        match self.scenarios().as_slice() {
            [s] => Ok(s.clone()),
            _ => bail!("invalid config `soh`: this command takes a single value"),
        }
    }

    /// Prices on a grid of `dt_s` steps covering `hours` from the start.
    pub fn prices(&self, dt_s: u32, hours: f64) -> Result<PriceSeries> {
        self.prices_at(self.cli.start, dt_s, hours)
    }

    pub fn prices_at(&self, start: NaiveDateTime, dt_s: u32, hours: f64) -> Result<PriceSeries> {
        let n = (hours * 3600.0 / dt_s as f64).ceil() as usize;
        let grid = TimeGrid::new(start, dt_s, n)?;
        match &self.cli.prices.csv {
            Some(p) => Ok(load_prices(p, &grid)?),
            None => Ok(synth_prices(self.cli.seed, &grid, &self.cli.prices.synth.unwrap_or_default())?),
        }
    }

    /// Writes the snapshot config plus copies of the system file and price
    /// CSV it refers to. Running with `--config <dir>/config.toml` replays
    /// the command.
    pub fn write_snapshot(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let mut snap = self.cli.clone();
        std::fs::write(dir.join(SNAPSHOT_SYSTEM), self.system.to_toml_string()?)?;
        snap.system = Some(PathBuf::from(SNAPSHOT_SYSTEM));
        if let Some(bytes) = &self.prices_csv {
            std::fs::write(dir.join(SNAPSHOT_PRICES), bytes)?;
            snap.prices.csv = Some(PathBuf::from(SNAPSHOT_PRICES));
        }
        std::fs::write(dir.join(SNAPSHOT_FILE), toml::to_string(&snap)?)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn file_paths_resolve_against_the_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "system = \"sys.toml\"\ndays = 2.0\n[prices]\ncsv = \"/abs/p.csv\"\n").unwrap();
        let cfg = CliConfig::load(&path).unwrap();
        assert_eq!(cfg.system.unwrap(), dir.path().join("sys.toml"));
        assert_eq!(cfg.prices.csv.unwrap(), PathBuf::from("/abs/p.csv"));
        assert_eq!(cfg.days, 2.0);
        assert_eq!(cfg.seed, 42);
    }

    #[test]
    fn unknown_keys_and_two_price_sources_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        std::fs::write(&path, "dayz = 2.0\n").unwrap();
        assert!(CliConfig::load(&path).is_err());
        let cfg = CliConfig {
            prices: PriceSource {
                csv: Some("p.csv".into()),
                synth: Some(SynthParams::default()),
            },
            ..Default::default()
        };
        let err = cfg.resolve().err().unwrap().to_string();
        assert!(err.contains("prices"), "{err}");
    }

    #[test]
    fn snapshot_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = CliConfig {
            soh: Some(vec![2.0]),
            days: 1.5,
            ..Default::default()
        };
        let resolved = cfg.resolve().unwrap();
        resolved.write_snapshot(dir.path()).unwrap();
        let back = CliConfig::load(&dir.path().join(SNAPSHOT_FILE)).unwrap().resolve().unwrap();
        assert_eq!(back.system, resolved.system);
        assert_eq!(back.cli.mpc, resolved.cli.mpc);
        assert_eq!(back.cli.soh, Some(vec![2.0]));
    }
}
