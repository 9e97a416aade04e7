//! Dense convex quadratic programming.
//!
//! ```text
//! minimize    ½ zᵀ H z + gᵀ z
//! subject to  A_eq z = b_eq
//!             A_in z ≥ b_in
//! ```
//!
//! Solved with the dual active-set method of Goldfarb and Idnani: start from
//! the equality-constrained minimizer, repeatedly add the most violated
//! inequality and move primal and dual variables together, dropping
//! constraints whose multipliers reach zero. Equalities stay in the working
//! set throughout. Every step solves the KKT system of the current working
//! set directly, so `H` only needs to be positive definite on the null space
//! of the active constraints.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VariableLayout {
    pub n: usize,
    pub m: usize,
    pub has_ur: bool,
}

impl VariableLayout {
    pub fn qdd(&self) -> std::ops::Range<usize> {
        0..self.n
    }

    pub fn tau(&self) -> std::ops::Range<usize> {
        self.n..2 * self.n
    }

    pub fn ur(&self) -> Option<std::ops::Range<usize>> {
        self.has_ur.then(|| 2 * self.n..2 * self.n + self.m)
    }

    pub fn dim(&self) -> usize {
        2 * self.n + if self.has_ur { self.m } else { 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub h: DMatrix<f64>,
    pub g: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    /// Rows read `a_in · z ≥ b_in`.
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    pub layout: Option<VariableLayout>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QpStatus {
    Optimal,
    MaxIter,
    Infeasible,
}

impl QpStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Optimal => "optimal",
            Self::MaxIter => "max_iter",
            Self::Infeasible => "infeasible",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: DVector<f64>,
    pub status: QpStatus,
    pub kkt_residual: f64,
    /// Multipliers of the equality rows.
    pub nu: DVector<f64>,
    /// Multipliers of the inequality rows (non-negative).
    pub lambda: DVector<f64>,
    pub iterations: usize,
    layout: Option<VariableLayout>,
}

impl QpSolution {
    pub fn qdd(&self) -> Option<DVector<f64>> {
        self.layout
            .map(|l| DVector::from_column_slice(&self.z.as_slice()[l.qdd()]))
    }

    pub fn tau(&self) -> Option<DVector<f64>> {
        self.layout
            .map(|l| DVector::from_column_slice(&self.z.as_slice()[l.tau()]))
    }

    pub fn ur(&self) -> Option<DVector<f64>> {
        self.layout
            .and_then(|l| l.ur())
            .map(|r| DVector::from_column_slice(&self.z.as_slice()[r]))
    }
}

#[derive(Debug, thiserror::Error)]
pub enum QpError {
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("hessian is not symmetric (asymmetry {0:e})")]
    NotSymmetric(f64),
    #[error("hessian is not positive definite on the feasible subspace")]
    NotConvex,
}

pub const DEFAULT_TOL: f64 = 1e-8;
pub const DEFAULT_MAX_ITER: usize = 200;

/// Individual KKT violations of a candidate primal-dual point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// `‖A_eq z − b_eq‖∞`.
    pub eq_residual: f64,
    /// `max(0, b_in − A_in z)` over rows.
    pub ineq_violation: f64,
    /// `‖Hz + g − A_eqᵀν − A_inᵀλ‖∞ / (1 + ‖Hz‖∞ + ‖g‖∞)`.
    pub stationarity: f64,
    /// `max |λ_i (a_i·z − b_i)|`, with negative multipliers counted as violations.
    pub complementarity: f64,
}

impl KktReport {
    pub fn max(&self) -> f64 {
        self.eq_residual
            .max(self.ineq_violation)
            .max(self.stationarity)
            .max(self.complementarity)
    }

    /// Equality/inequality feasibility within 1e-6 and the dual conditions within 1e-5.
    pub fn certifies_optimal(&self) -> bool {
        self.eq_residual <= 1e-6
            && self.ineq_violation <= 1e-6
            && self.stationarity <= 1e-5
            && self.complementarity <= 1e-5
    }
}

/// Evaluates first-order optimality conditions from the problem data alone.
pub fn kkt_report(
    p: &QpProblem,
    z: &DVector<f64>,
    nu: &DVector<f64>,
    lambda: &DVector<f64>,
) -> KktReport {
    let eq_residual = if p.a_eq.nrows() > 0 {
        (&p.a_eq * z - &p.b_eq).amax()
    } else {
        0.0
    };
    let slack = &p.a_in * z - &p.b_in;
    let ineq_violation = slack.iter().fold(0.0f64, |acc, s| acc.max(-s));
    let hz = &p.h * z;
    let grad = &hz + &p.g - p.a_eq.transpose() * nu - p.a_in.transpose() * lambda;
    let scale = 1.0 + hz.amax() + p.g.amax();
    let stationarity = grad.amax() / scale;
    let complementarity = lambda
        .iter()
        .zip(slack.iter())
        .map(|(l, s)| (l * s).abs().max(-l))
        .fold(0.0f64, f64::max);
    KktReport {
        eq_residual,
        ineq_violation,
        stationarity,
        complementarity,
    }
}

impl QpProblem {
    pub fn dim(&self) -> usize {
        self.g.len()
    }

    fn validate(&self) -> Result<(), QpError> {
        let d = self.dim();
        if self.h.nrows() != d || self.h.ncols() != d {
            return Err(QpError::Dimension(format!(
                "hessian is {}x{}, expected {d}x{d}",
                self.h.nrows(),
                self.h.ncols()
            )));
        }
        if self.a_eq.ncols() != d && self.a_eq.nrows() > 0 || self.a_eq.nrows() != self.b_eq.len() {
            return Err(QpError::Dimension("equality rows".into()));
        }
        if self.a_in.ncols() != d && self.a_in.nrows() > 0 || self.a_in.nrows() != self.b_in.len() {
            return Err(QpError::Dimension("inequality rows".into()));
        }
        if let Some(layout) = self.layout {
            if layout.dim() != d {
                return Err(QpError::Dimension(format!(
                    "layout describes {} variables, problem has {d}",
                    layout.dim()
                )));
            }
        }
        let asym = (&self.h - self.h.transpose()).amax();
        if asym > 1e-12 * (1.0 + self.h.amax()) {
            return Err(QpError::NotSymmetric(asym));
        }
        Ok(())
    }
}

/// Working set: equality rows first (never removed), then active inequalities.
struct WorkingSet<'a> {
    p: &'a QpProblem,
    /// Row-normalized inequalities.
    a_in: DMatrix<f64>,
    b_in: DVector<f64>,
    active: Vec<usize>,
}

impl<'a> WorkingSet<'a> {
    fn row(&self, k: usize) -> DVector<f64> {
        self.a_in.row(k).transpose()
    }

    fn neq(&self) -> usize {
        self.p.a_eq.nrows()
    }

    /// Solves `[H Nᵀ; N 0][x; -y] = [rhs_x; rhs_c]` where N stacks the
    /// equality rows and the active inequality rows.
    fn solve(
        &self,
        rhs_x: &DVector<f64>,
        rhs_c: &DVector<f64>,
    ) -> Option<(DVector<f64>, DVector<f64>)> {
        let d = self.p.dim();
        let neq = self.neq();
        let k = neq + self.active.len();
        let mut kkt = DMatrix::zeros(d + k, d + k);
        kkt.view_mut((0, 0), (d, d)).copy_from(&self.p.h);
        for r in 0..neq {
            let row = self.p.a_eq.row(r);
            kkt.view_mut((d + r, 0), (1, d)).copy_from(&row);
            kkt.view_mut((0, d + r), (d, 1)).copy_from(&row.transpose());
        }
        for (i, &c) in self.active.iter().enumerate() {
            let row = self.a_in.row(c);
            kkt.view_mut((d + neq + i, 0), (1, d)).copy_from(&row);
            kkt.view_mut((0, d + neq + i), (d, 1)).copy_from(&row.transpose());
        }
        let mut rhs = DVector::zeros(d + k);
        rhs.rows_mut(0, d).copy_from(rhs_x);
        rhs.rows_mut(d, k).copy_from(rhs_c);
        let sol = kkt.full_piv_lu().solve(&rhs)?;
        if sol.iter().any(|v| !v.is_finite()) {
            return None;
        }
        Some((sol.rows(0, d).into_owned(), sol.rows(d, k).into_owned()))
    }
}

/// Solves the QP to tolerance `tol` (applied to row-normalized inequality
/// slacks) within `max_iter` working-set changes.
pub fn solve_qp(p: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution, QpError> {
    p.validate()?;
    let d = p.dim();
    let neq = p.a_eq.nrows();
    let nin = p.a_in.nrows();

    // Row-normalize inequalities; zero rows are either vacuous or infeasible.
    let mut a_in = p.a_in.clone();
    let mut b_in = p.b_in.clone();
    let mut vacuous = vec![false; nin];
    let mut trivially_infeasible = false;
    for i in 0..nin {
        let norm = a_in.row(i).norm();
        if norm <= f64::MIN_POSITIVE {
            vacuous[i] = true;
            if b_in[i] > tol {
                trivially_infeasible = true;
            }
            continue;
        }
        a_in.row_mut(i).scale_mut(1.0 / norm);
        b_in[i] /= norm;
    }

    let mut ws = WorkingSet {
        p,
        a_in,
        b_in,
        active: Vec::new(),
    };

    let finish = |z: DVector<f64>, nu: DVector<f64>, lambda_n: DVector<f64>, status, iterations| {
        // Undo row normalization of multipliers.
        let mut lambda = lambda_n;
        for i in 0..nin {
            if !vacuous[i] {
                lambda[i] /= p.a_in.row(i).norm();
            }
        }
        let report = kkt_report(p, &z, &nu, &lambda);
        Ok(QpSolution {
            kkt_residual: report.max(),
            z,
            status,
            nu,
            lambda,
            iterations,
            layout: p.layout,
        })
    };

    // Equality-constrained minimizer. `y` holds multipliers of the working set
    // in the sign convention `Hz + g = Nᵀ y`.
    let (mut z, y0) = match ws.solve(&(-&p.g), &p.b_eq) {
        Some(s) => s,
        None => {
            if neq > 0 && p.a_eq.clone().svd(false, false).rank(1e-12) < neq {
                return finish(DVector::zeros(d), DVector::zeros(neq), DVector::zeros(nin), QpStatus::Infeasible, 0);
            }
            return Err(QpError::NotConvex);
        }
    };
    // The KKT solve returned [z; w] with H z + Nᵀ w = -g, so y = -w.
    let mut y: Vec<f64> = y0.iter().map(|v| -v).collect();
    if neq > 0 && (&p.a_eq * &z - &p.b_eq).amax() > 1e-6 * (1.0 + p.b_eq.amax()) {
        return finish(z, DVector::zeros(neq), DVector::zeros(nin), QpStatus::Infeasible, 0);
    }
    if trivially_infeasible {
        return finish(z, DVector::from_column_slice(&y), DVector::zeros(nin), QpStatus::Infeasible, 0);
    }

    let assemble = |ws: &WorkingSet, y: &[f64]| {
        let nu = DVector::from_column_slice(&y[..neq]);
        let mut lambda = DVector::zeros(nin);
        for (i, &c) in ws.active.iter().enumerate() {
            lambda[c] = y[neq + i];
        }
        (nu, lambda)
    };

    let mut iterations = 0;
    loop {
        // Most violated inactive inequality.
        let mut pick: Option<(usize, f64)> = None;
        for i in 0..nin {
            if vacuous[i] || ws.active.contains(&i) {
                continue;
            }
            let s = ws.row(i).dot(&z) - ws.b_in[i];
            if s < -tol && pick.is_none_or(|(_, best)| s < best) {
                pick = Some((i, s));
            }
        }
        let Some((pc, _)) = pick else {
            let (nu, lambda) = assemble(&ws, &y);
            return finish(z, nu, lambda, QpStatus::Optimal, iterations);
        };

        let np = ws.row(pc);
        let mut u_p = 0.0;
        loop {
            iterations += 1;
            if iterations > max_iter {
                let (nu, lambda) = assemble(&ws, &y);
                return finish(z, nu, lambda, QpStatus::MaxIter, iterations);
            }
            let k = neq + ws.active.len();
            // Step direction: H s + Nᵀ r = n_p, N s = 0.
            let Some((step, r)) = ws.solve(&np, &DVector::zeros(k)) else {
                return Err(QpError::NotConvex);
            };
            // Largest dual step keeping active inequality multipliers non-negative.
            let mut t_dual = f64::INFINITY;
            let mut drop_at = None;
            for (i, _) in ws.active.iter().enumerate() {
                let ri = r[neq + i];
                if ri > 1e-14 {
                    let t = y[neq + i] / ri;
                    if t < t_dual {
                        t_dual = t;
                        drop_at = Some(i);
                    }
                }
            }
            let curvature = step.dot(&np);
            let s_p = np.dot(&z) - ws.b_in[pc];
            let t_primal = if curvature > 1e-14 * (1.0 + np.norm()) && step.amax() > 1e-14 {
                -s_p / curvature
            } else {
                f64::INFINITY
            };

            if t_primal.is_infinite() && t_dual.is_infinite() {
                let (nu, lambda) = assemble(&ws, &y);
                return finish(z, nu, lambda, QpStatus::Infeasible, iterations);
            }
            let t = t_primal.min(t_dual);
            z += &step * t;
            for (yi, ri) in y.iter_mut().zip(r.iter()) {
                *yi -= t * ri;
            }
            u_p += t;

            if t_primal <= t_dual {
                ws.active.push(pc);
                y.push(u_p);
                break;
            }
            let idx = drop_at.expect("finite dual step has a blocking constraint");
            ws.active.remove(idx);
            y.remove(neq + idx);
        }
    }
}
