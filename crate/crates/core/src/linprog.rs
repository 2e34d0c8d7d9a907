//! Thin solver-agnostic LP/QP model with a text dump. Pure LPs go to the
//! `microlp` simplex; models with a diagonal quadratic term, or built with
//! [`LinModel::interior_point`], go to `clarabel`.

use std::fmt::Write as _;

use clarabel::algebra::CscMatrix;
use clarabel::solver::{DefaultSettingsBuilder, DefaultSolver, IPSolver, NonnegativeConeT, SolverStatus, ZeroConeT};
use microlp::{ComparisonOp, OptimizationDirection, Problem};

use tracing::warn;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Cmp {
    Le,
    Ge,
    Eq,
}

#[derive(Debug, Clone)]
struct Var {
    name: String,
    lo: f64,
    hi: f64,
    obj: f64,
    quad: f64,
}

#[derive(Debug, Clone)]
struct Row {
    name: String,
    coefs: Vec<(usize, f64)>,
    cmp: Cmp,
    rhs: f64,
}

/// Minimization problem `min obj'x + x'Qx/2` (Q diagonal) subject to rows
/// and variable bounds.
#[derive(Debug, Clone, Default)]
pub(crate) struct LinModel {
    vars: Vec<Var>,
    rows: Vec<Row>,
    interior: bool,
}

/// Primal solution with, for the interior-point backend, the sensitivity of
/// the optimal objective to each row's right-hand side.
#[derive(Debug, Clone)]
pub(crate) struct Solved {
    pub x: Vec<f64>,
    pub duals: Option<Vec<f64>>,
    pub fixes: usize,
}

impl LinModel {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn interior_point() -> Self {
        Self {
            interior: true,
            ..Self::default()
        }
    }

    pub fn add_var(&mut self, name: impl Into<String>, lo: f64, hi: f64, obj: f64) -> usize {
        self.vars.push(Var {
            name: name.into(),
            lo,
            hi,
            obj,
            quad: 0.0,
        });
        self.vars.len() - 1
    }

    pub fn set_bounds(&mut self, var: usize, lo: f64, hi: f64) {
        self.vars[var].lo = lo;
        self.vars[var].hi = hi;
    }

    /// Diagonal quadratic coefficient: adds `h x^2 / 2` to the objective.
    pub fn set_quad(&mut self, var: usize, h: f64) {
        self.vars[var].quad = h;
    }

    pub fn add_row(&mut self, name: impl Into<String>, coefs: Vec<(usize, f64)>, cmp: Cmp, rhs: f64) {
        self.rows.push(Row {
            name: name.into(),
            coefs,
            cmp,
            rhs,
        });
    }

    pub fn rows_len(&self) -> usize {
        self.rows.len()
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        self.vars.iter().zip(x).map(|(v, x)| v.obj * x + 0.5 * v.quad * x * x).sum()
    }

    #[cfg(test)]
    pub fn solve(&self) -> Result<Vec<f64>> {
        Ok(self.solve_full()?.x)
    }

    fn solve_full(&self) -> Result<Solved> {
        if self.interior || self.vars.iter().any(|v| v.quad != 0.0) {
            self.solve_clarabel()
        } else {
            Ok(Solved {
                x: self.solve_simplex()?,
                duals: None,
                fixes: 0,
            })
        }
    }

    fn size(&self) -> String {
        format!("{} variables, {} rows", self.vars.len(), self.rows.len())
    }

    fn solve_simplex(&self) -> Result<Vec<f64>> {
        let mut p = Problem::new(OptimizationDirection::Minimize);
        let handles: Vec<_> = self.vars.iter().map(|v| p.add_var(v.obj, (v.lo, v.hi))).collect();
        for r in &self.rows {
            let expr: Vec<_> = r.coefs.iter().map(|&(i, c)| (handles[i], c)).collect();
            let op = match r.cmp {
                Cmp::Le => ComparisonOp::Le,
                Cmp::Ge => ComparisonOp::Ge,
                Cmp::Eq => ComparisonOp::Eq,
            };
            p.add_constraint(expr.as_slice(), op, r.rhs);
        }
        let outcome = p.solve().map_err(|e| match e {
            microlp::Error::Infeasible => Error::Infeasible("linear program has no feasible point".into()),
            other => Error::Solver(format!("{other} ({})", self.size())),
        })?;
        let sol = outcome
            .into_solution()
            .map_err(|_| Error::Solver("LP solve interrupted before a solution was found".into()))?;
        Ok(self
            .vars
            .iter()
            .zip(&handles)
            .map(|(v, h)| sol.var_value(*h).clamp(v.lo, v.hi))
            .collect())
    }

    fn solve_clarabel(&self) -> Result<Solved> {
        let n = self.vars.len();
        // Equalities first (zero cone), then inequalities written as a'x <= b.
        let mut eq: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        let mut le: Vec<(Vec<(usize, f64)>, f64)> = Vec::new();
        // Per model row: (is equality, index within its block, sign).
        let mut map = Vec::with_capacity(self.rows.len());
        for r in &self.rows {
            match r.cmp {
                Cmp::Eq => {
                    map.push((true, eq.len(), 1.0));
                    eq.push((r.coefs.clone(), r.rhs));
                }
                Cmp::Le => {
                    map.push((false, le.len(), 1.0));
                    le.push((r.coefs.clone(), r.rhs));
                }
                Cmp::Ge => {
                    map.push((false, le.len(), -1.0));
                    le.push((r.coefs.iter().map(|&(i, c)| (i, -c)).collect(), -r.rhs));
                }
            }
        }
        for (i, v) in self.vars.iter().enumerate() {
            if v.lo == v.hi {
                eq.push((vec![(i, 1.0)], v.lo));
                continue;
            }
            if v.hi.is_finite() {
                le.push((vec![(i, 1.0)], v.hi));
            }
            if v.lo.is_finite() {
                le.push((vec![(i, -1.0)], -v.lo));
            }
        }
        let n_eq = eq.len();
        let m = n_eq + le.len();
        let mut cols: Vec<Vec<(usize, f64)>> = vec![Vec::new(); n];
        let mut b = Vec::with_capacity(m);
        for (k, (coefs, rhs)) in eq.iter().chain(&le).enumerate() {
            for &(i, c) in coefs {
                if c != 0.0 {
                    cols[i].push((k, c));
                }
            }
            b.push(*rhs);
        }
        let (mut colptr, mut rowval, mut nzval) = (vec![0], Vec::new(), Vec::new());
        for col in &mut cols {
            col.sort_by_key(|e| e.0);
            // Merge repeated entries of one row.
            let mut last: Option<usize> = None;
            for &(k, c) in col.iter() {
                if last == Some(k) {
                    *nzval.last_mut().expect("entry exists") += c;
                } else {
                    rowval.push(k);
                    nzval.push(c);
                    last = Some(k);
                }
            }
            colptr.push(rowval.len());
        }
        let a = CscMatrix::new(m, n, colptr, rowval, nzval);
        let (mut pc, mut pr, mut pv) = (vec![0], Vec::new(), Vec::new());
        for (i, v) in self.vars.iter().enumerate() {
            if v.quad != 0.0 {
                pr.push(i);
                pv.push(v.quad);
            }
            pc.push(pr.len());
        }
        let p = CscMatrix::new(n, n, pc, pr, pv);
        let q: Vec<f64> = self.vars.iter().map(|v| v.obj).collect();
        let cones = [ZeroConeT(n_eq), NonnegativeConeT(m - n_eq)];
        let settings = DefaultSettingsBuilder::default()
            .verbose(false)
            .presolve_enable(false)
            .build()
            .expect("valid solver settings");
        let mut solver = DefaultSolver::new(&p, &q, &a, &b, &cones, settings)
            .map_err(|e| Error::Solver(format!("{e:?} ({})", self.size())))?;
        solver.solve();
        match solver.solution.status {
            SolverStatus::Solved | SolverStatus::AlmostSolved => {}
            SolverStatus::PrimalInfeasible | SolverStatus::AlmostPrimalInfeasible => {
                return Err(Error::Infeasible("linear program has no feasible point".into()))
            }
            other => return Err(Error::Solver(format!("{other:?} ({})", self.size()))),
        }
        let x = self
            .vars
            .iter()
            .zip(&solver.solution.x)
            .map(|(v, x)| x.clamp(v.lo, v.hi))
            .collect();
        let z = &solver.solution.z;
        let duals = map
            .iter()
            .map(|&(is_eq, k, sign)| {
                let idx = if is_eq { k } else { n_eq + k };
                -sign * z[idx]
            })
            .collect();
        Ok(Solved {
            x,
            duals: Some(duals),
            fixes: 0,
        })
    }

    /// Solves, then removes simultaneous flow in each `(charge, discharge)`
    /// pair: the smaller side of an offending pair is fixed to zero and the
    /// problem re-solved until no pair has both sides above `tol`.
    pub fn solve_exclusive(&mut self, pairs: &[(usize, usize)], tol: f64) -> Result<Solved> {
        let mut sol = self.solve_full()?;
        let mut fixes = 0;
        for _ in 0..=pairs.len() {
            let x = &sol.x;
            let offending: Vec<(usize, usize)> = pairs
                .iter()
                .copied()
                .filter(|&(a, b)| x[a] > tol && x[b] > tol)
                .collect();
            if offending.is_empty() {
                break;
            }
            let mut trial = self.clone();
            for &(a, b) in &offending {
                let drop = if x[a] >= x[b] { b } else { a };
                trial.set_bounds(drop, 0.0, 0.0);
            }
            match trial.solve_full() {
                Ok(next) => {
                    fixes += offending.len();
                    *self = trial;
                    sol = next;
                }
                Err(Error::Infeasible(_)) => {
                    warn!(steps = offending.len(), "simultaneous flows kept; exclusive re-solve infeasible");
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        sol.fixes = fixes;
        Ok(sol)
    }

    /// Human-readable listing of variables, bounds and constraint rows.
    pub fn dump(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "minimize");
        for v in self.vars.iter().filter(|v| v.obj != 0.0) {
            let _ = writeln!(s, "  {:+e} {}", v.obj, v.name);
        }
        for v in self.vars.iter().filter(|v| v.quad != 0.0) {
            let _ = writeln!(s, "  {:+e} {}^2/2", v.quad, v.name);
        }
        let _ = writeln!(s, "subject to");
        for r in &self.rows {
            let _ = write!(s, "  {}:", r.name);
            for &(i, c) in &r.coefs {
                let _ = write!(s, " {:+e} {}", c, self.vars[i].name);
            }
            let op = match r.cmp {
                Cmp::Le => "<=",
                Cmp::Ge => ">=",
                Cmp::Eq => "=",
            };
            let _ = writeln!(s, " {op} {:e}", r.rhs);
        }
        let _ = writeln!(s, "bounds");
        for v in &self.vars {
            let _ = writeln!(s, "  {:e} <= {} <= {:e}", v.lo, v.name, v.hi);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_lp() {
        // min -x - y  s.t. x + 2y <= 4, 3x + y <= 6
        let mut m = LinModel::new();
        let x = m.add_var("x", 0.0, f64::INFINITY, -1.0);
        let y = m.add_var("y", 0.0, f64::INFINITY, -1.0);
        m.add_row("a", vec![(x, 1.0), (y, 2.0)], Cmp::Le, 4.0);
        m.add_row("b", vec![(x, 3.0), (y, 1.0)], Cmp::Le, 6.0);
        let sol = m.solve().unwrap();
        assert!((sol[0] - 1.6).abs() < 1e-9 && (sol[1] - 1.2).abs() < 1e-9);
        assert!((m.objective(&sol) + 2.8).abs() < 1e-9);
        let d = m.dump();
        assert!(d.contains("a: +1e0 x +2e0 y <= 4e0"), "{d}");
    }

    #[test]
    fn infeasible_is_reported() {
        for mut m in [LinModel::new(), LinModel::interior_point()] {
            let x = m.add_var("x", 0.0, 1.0, 1.0);
            m.add_row("r", vec![(x, 1.0)], Cmp::Ge, 2.0);
            assert!(matches!(m.solve(), Err(Error::Infeasible(_))));
        }
    }

    #[test]
    fn backends_agree_on_lp() {
        let build = |mut m: LinModel| {
            let x = m.add_var("x", 0.0, f64::INFINITY, -1.0);
            let y = m.add_var("y", -1.0, 3.0, -1.0);
            m.add_row("a", vec![(x, 1.0), (y, 2.0)], Cmp::Le, 4.0);
            m.add_row("b", vec![(x, 3.0), (y, 1.0)], Cmp::Le, 6.0);
            m.add_row("c", vec![(x, 1.0), (y, -1.0)], Cmp::Ge, -2.0);
            m
        };
        let a = build(LinModel::new()).solve().unwrap();
        let b = build(LinModel::interior_point()).solve().unwrap();
        assert!(a.iter().zip(&b).all(|(a, b)| (a - b).abs() < 1e-6), "{a:?} {b:?}");
    }

    #[test]
    fn diagonal_qp_and_duals() {
        // min (x-1)^2 + (y-2)^2 s.t. x + y = 1: x = 0, y = 1, objective 2
        let mut m = LinModel::new();
        let x = m.add_var("x", f64::NEG_INFINITY, f64::INFINITY, -2.0);
        let y = m.add_var("y", f64::NEG_INFINITY, f64::INFINITY, -4.0);
        m.set_quad(x, 2.0);
        m.set_quad(y, 2.0);
        m.add_row("sum", vec![(x, 1.0), (y, 1.0)], Cmp::Eq, 1.0);
        m.add_row("cap", vec![(x, 1.0)], Cmp::Ge, -5.0);
        let sol = m.solve_exclusive(&[], 1e-7).unwrap();
        assert!((sol.x[0]).abs() < 1e-6 && (sol.x[1] - 1.0).abs() < 1e-6, "{:?}", sol.x);
        assert!((m.objective(&sol.x) + 3.0).abs() < 1e-6);
        // d(objective)/d(rhs) of the equality: raising the sum lowers the cost by 2.
        let d = sol.duals.unwrap();
        assert!((d[0] + 2.0).abs() < 1e-5, "{d:?}");
        assert!(d[1].abs() < 1e-6);
        assert!(m.dump().contains("x^2/2"));
    }
}
