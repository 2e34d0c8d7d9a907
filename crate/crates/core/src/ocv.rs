//! Open-circuit voltage as a function of state of charge.
//!
//! Breakpoints are cell-level. Two interpolants are supported: piecewise
//! linear (default) and a monotone cubic Hermite spline (Fritsch-Carlson),
//! which keeps the curve monotone between breakpoints.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum Interpolation {
    #[default]
    PiecewiseLinear,
    CubicSpline,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawCurve {
    #[serde(default)]
    interpolation: Interpolation,
    soc_frac: Vec<f64>,
    voltage_v: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawCurve", into = "RawCurve")]
pub struct OcvCurve {
    soc: Vec<f64>,
    voltage: Vec<f64>,
    interpolation: Interpolation,
    /// Node derivatives for the Hermite interpolant; empty for linear.
    tangents: Vec<f64>,
}

impl TryFrom<RawCurve> for OcvCurve {
    type Error = Error;

    fn try_from(raw: RawCurve) -> Result<Self> {
        OcvCurve::new(raw.soc_frac, raw.voltage_v, raw.interpolation)
    }
}

impl From<OcvCurve> for RawCurve {
    fn from(c: OcvCurve) -> Self {
        RawCurve {
            interpolation: c.interpolation,
            soc_frac: c.soc,
            voltage_v: c.voltage,
        }
    }
}

impl OcvCurve {
    /// Builds a curve from breakpoints. SOC values must be strictly
    /// increasing from exactly 0 to exactly 1 and voltages strictly
    /// increasing.
    pub fn new(soc: Vec<f64>, voltage: Vec<f64>, interpolation: Interpolation) -> Result<Self> {
        if soc.len() != voltage.len() {
            return Err(Error::param("ocv", "soc and voltage lists differ in length"));
        }
        if soc.len() < 2 {
            return Err(Error::param("ocv", "at least two breakpoints required"));
        }
        if soc[0] != 0.0 || soc[soc.len() - 1] != 1.0 {
            return Err(Error::param("ocv.soc_frac", "breakpoints must span [0, 1]"));
        }
        if soc.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("ocv.soc_frac", "must be strictly increasing"));
        }
        if voltage.iter().any(|v| !v.is_finite() || *v <= 0.0) {
            return Err(Error::param("ocv.voltage_v", "voltages must be finite and positive"));
        }
        if voltage.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::param("ocv.voltage_v", "must be strictly increasing"));
        }
        Ok(Self::build(soc, voltage, interpolation))
    }

    /// A flat curve. Only meant for degenerate test models where the OCV
    /// does not depend on SOC; it bypasses the strict-monotonicity check.
    pub fn constant(voltage: f64) -> Self {
        Self::build(vec![0.0, 1.0], vec![voltage, voltage], Interpolation::PiecewiseLinear)
    }

    fn build(soc: Vec<f64>, voltage: Vec<f64>, interpolation: Interpolation) -> Self {
        let tangents = match interpolation {
            Interpolation::PiecewiseLinear => Vec::new(),
            Interpolation::CubicSpline => pchip_tangents(&soc, &voltage),
        };
        Self {
            soc,
            voltage,
            interpolation,
            tangents,
        }
    }

    /// Reads a two-column CSV with header `soc,voltage_v`.
    pub fn from_csv(path: impl AsRef<Path>, interpolation: Interpolation) -> Result<Self> {
        let mut rdr = csv::Reader::from_path(path)?;
        let mut soc = Vec::new();
        let mut voltage = Vec::new();
        for (k, rec) in rdr.records().enumerate() {
            let rec = rec?;
            let line = k + 2;
            let parse = |idx: usize| -> Result<f64> {
                rec.get(idx)
                    .ok_or_else(|| Error::Format {
                        line,
                        reason: "expected two columns".into(),
                    })?
                    .trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Format {
                        line,
                        reason: e.to_string(),
                    })
            };
            soc.push(parse(0)?);
            voltage.push(parse(1)?);
        }
        Self::new(soc, voltage, interpolation)
    }

    pub fn breakpoints(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.soc.iter().copied().zip(self.voltage.iter().copied())
    }

    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }

    pub fn min_voltage(&self) -> f64 {
        self.voltage[0]
    }

    pub fn max_voltage(&self) -> f64 {
        self.voltage[self.voltage.len() - 1]
    }

    /// Voltage at `soc`; errors outside [0, 1].
    pub fn eval(&self, soc: f64) -> Result<f64> {
        if !(0.0..=1.0).contains(&soc) {
            return Err(Error::SocDomain(soc));
        }
        Ok(self.value(soc))
    }

    fn segment(&self, soc: f64) -> usize {
        // Index k such that soc[k] <= soc < soc[k + 1]; the last segment
        // also owns soc = 1.
        let n = self.soc.len();
        match self.soc.partition_point(|&s| s <= soc) {
            0 => 0,
            k if k >= n => n - 2,
            k => k - 1,
        }
    }

    /// Voltage at `soc` clamped into [0, 1]. Solvers probing slightly
    /// outside the window use this.
    pub fn value(&self, soc: f64) -> f64 {
        let soc = soc.clamp(0.0, 1.0);
        let k = self.segment(soc);
        let (s0, s1) = (self.soc[k], self.soc[k + 1]);
        let (v0, v1) = (self.voltage[k], self.voltage[k + 1]);
        let h = s1 - s0;
        let t = (soc - s0) / h;
        match self.interpolation {
            Interpolation::PiecewiseLinear => v0 + (v1 - v0) * t,
            Interpolation::CubicSpline => {
                let (d0, d1) = (self.tangents[k], self.tangents[k + 1]);
                let t2 = t * t;
                let t3 = t2 * t;
                (2.0 * t3 - 3.0 * t2 + 1.0) * v0
                    + (t3 - 2.0 * t2 + t) * h * d0
                    + (-2.0 * t3 + 3.0 * t2) * v1
                    + (t3 - t2) * h * d1
            }
        }
    }

    /// dV/dSOC at `soc` (clamped). At a linear breakpoint the slope of the
    /// segment to the right is returned, except at soc = 1.
    pub fn slope(&self, soc: f64) -> f64 {
        let soc = soc.clamp(0.0, 1.0);
        let k = self.segment(soc);
        let (s0, s1) = (self.soc[k], self.soc[k + 1]);
        let (v0, v1) = (self.voltage[k], self.voltage[k + 1]);
        let h = s1 - s0;
        match self.interpolation {
            Interpolation::PiecewiseLinear => (v1 - v0) / h,
            Interpolation::CubicSpline => {
                let t = (soc - s0) / h;
                let (d0, d1) = (self.tangents[k], self.tangents[k + 1]);
                let t2 = t * t;
                (6.0 * t2 - 6.0 * t) * (v0 - v1) / h
                    + (3.0 * t2 - 4.0 * t + 1.0) * d0
                    + (3.0 * t2 - 2.0 * t) * d1
            }
        }
    }

    /// d2V/dSOC2 at `soc` (clamped); zero for the piecewise-linear curve.
    pub fn curvature(&self, soc: f64) -> f64 {
        let soc = soc.clamp(0.0, 1.0);
        let k = self.segment(soc);
        let (s0, s1) = (self.soc[k], self.soc[k + 1]);
        let (v0, v1) = (self.voltage[k], self.voltage[k + 1]);
        let h = s1 - s0;
        match self.interpolation {
            Interpolation::PiecewiseLinear => 0.0,
            Interpolation::CubicSpline => {
                let t = (soc - s0) / h;
                let (d0, d1) = (self.tangents[k], self.tangents[k + 1]);
                ((12.0 * t - 6.0) * (v0 - v1) / h + (6.0 * t - 4.0) * d0 + (6.0 * t - 2.0) * d1) / h
            }
        }
    }

    /// Same curve with every voltage multiplied by `factor` (series scaling).
    pub fn scaled(&self, factor: f64) -> Self {
        let voltage = self.voltage.iter().map(|v| v * factor).collect();
        Self::build(self.soc.clone(), voltage, self.interpolation)
    }
}

fn pchip_tangents(x: &[f64], y: &[f64]) -> Vec<f64> {
    let n = x.len();
    let h: Vec<f64> = x.windows(2).map(|w| w[1] - w[0]).collect();
    let delta: Vec<f64> = (0..n - 1).map(|k| (y[k + 1] - y[k]) / h[k]).collect();
    let mut d = vec![0.0; n];
    d[0] = delta[0];
    d[n - 1] = delta[n - 2];
    for k in 1..n - 1 {
        if delta[k - 1] * delta[k] <= 0.0 {
            d[k] = 0.0;
        } else {
            let w1 = 2.0 * h[k] + h[k - 1];
            let w2 = h[k] + 2.0 * h[k - 1];
            d[k] = (w1 + w2) / (w1 / delta[k - 1] + w2 / delta[k]);
        }
    }
    d
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn curve(interp: Interpolation) -> OcvCurve {
        OcvCurve::new(vec![0.0, 0.5, 1.0], vec![3.0, 3.6, 4.2], interp).unwrap()
    }

    #[test]
    fn exact_at_breakpoints() {
        for interp in [Interpolation::PiecewiseLinear, Interpolation::CubicSpline] {
            let c = curve(interp);
            for (s, v) in c.breakpoints().collect::<Vec<_>>() {
                assert_eq!(c.eval(s).unwrap(), v);
            }
        }
    }

    #[test]
    fn linear_midpoint_is_mean() {
        let c = curve(Interpolation::PiecewiseLinear);
        assert!((c.eval(0.25).unwrap() - 3.3).abs() < 1e-12);
    }

    #[test]
    fn outside_domain_is_error() {
        let c = curve(Interpolation::PiecewiseLinear);
        assert!(matches!(c.eval(-0.01), Err(Error::SocDomain(_))));
        assert!(matches!(c.eval(1.01), Err(Error::SocDomain(_))));
    }

    #[test]
    fn rejects_non_monotone() {
        assert!(OcvCurve::new(vec![0.0, 0.5, 1.0], vec![3.0, 2.9, 4.0], Interpolation::PiecewiseLinear).is_err());
        assert!(OcvCurve::new(vec![0.0, 0.5, 0.5, 1.0], vec![3.0, 3.1, 3.2, 4.0], Interpolation::PiecewiseLinear).is_err());
        assert!(OcvCurve::new(vec![0.1, 1.0], vec![3.0, 4.0], Interpolation::PiecewiseLinear).is_err());
    }

    #[test]
    fn curvature_matches_finite_difference() {
        let c = curve(Interpolation::CubicSpline);
        for s in [0.15, 0.42, 0.77] {
            let h = 1e-5;
            let fd = (c.slope(s + h) - c.slope(s - h)) / (2.0 * h);
            assert!((c.curvature(s) - fd).abs() < 1e-4 * fd.abs().max(1.0), "at {s}");
        }
        assert_eq!(curve(Interpolation::PiecewiseLinear).curvature(0.42), 0.0);
    }

    #[test]
    fn slope_matches_finite_difference() {
        for interp in [Interpolation::PiecewiseLinear, Interpolation::CubicSpline] {
            let c = curve(interp);
            for s in [0.1, 0.3, 0.7, 0.9] {
                let h = 1e-6;
                let fd = (c.value(s + h) - c.value(s - h)) / (2.0 * h);
                assert!((c.slope(s) - fd).abs() < 1e-5, "{interp:?} at {s}");
            }
        }
    }

    #[test]
    fn csv_import() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ocv.csv");
        std::fs::write(&p, "soc,voltage_v\n0,3.0\n0.5,3.6\n1,4.2\n").unwrap();
        let c = OcvCurve::from_csv(&p, Interpolation::PiecewiseLinear).unwrap();
        assert_eq!(c, curve(Interpolation::PiecewiseLinear));
        std::fs::write(&p, "soc,voltage_v\n0,3.0\n0.5,abc\n1,4.2\n").unwrap();
        assert!(matches!(
            OcvCurve::from_csv(&p, Interpolation::PiecewiseLinear),
            Err(Error::Format { line: 3, .. })
        ));
    }

    fn monotone_curve() -> impl Strategy<Value = OcvCurve> {
        (2usize..12, any::<bool>()).prop_flat_map(|(n, spline)| {
            (
                prop::collection::vec(0.01f64..1.0, n - 1),
                prop::collection::vec(0.001f64..0.5, n - 1),
                2.5f64..3.5,
            )
                .prop_map(move |(ds, dv, v0)| {
                    let total: f64 = ds.iter().sum();
                    let mut soc = vec![0.0];
                    let mut acc = 0.0;
                    for d in &ds[..ds.len() - 1] {
                        acc += d / total;
                        soc.push(acc);
                    }
                    soc.push(1.0);
                    let mut voltage = vec![v0];
                    for d in &dv {
                        voltage.push(voltage.last().unwrap() + d);
                    }
                    let interp = if spline {
                        Interpolation::CubicSpline
                    } else {
                        Interpolation::PiecewiseLinear
                    };
                    OcvCurve::new(soc, voltage, interp).unwrap()
                })
        })
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn monotone_and_bounded(c in monotone_curve(), pairs in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0), 1000)) {
            for (a, b) in pairs {
                let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
                let (va, vb) = (c.eval(lo).unwrap(), c.eval(hi).unwrap());
                prop_assert!(va <= vb + 1e-12);
                prop_assert!(va >= c.min_voltage() - 1e-12 && vb <= c.max_voltage() + 1e-12);
            }
        }
    }
}
