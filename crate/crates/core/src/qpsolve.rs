//! Dense strictly convex QP: `min ½ zᵀH z + gᵀz` subject to `A z ≤ b`.
//!
//! Dual active-set method (Goldfarb–Idnani). The iterate starts at the
//! unconstrained minimiser and stays dual feasible; each outer iteration adds
//! the most violated constraint, dropping active constraints whose multipliers
//! would turn negative. With `H = L Lᵀ` and `B = L⁻¹ N_A` for the active
//! normals `N_A`, the primal step direction is `L⁻ᵀ (I − Q Qᵀ) L⁻¹ n⁺` and the
//! multiplier direction is `R⁻¹ Qᵀ L⁻¹ n⁺`, where `B = Q R` is a thin QR.

use nalgebra::Cholesky;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};

pub const DEFAULT_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    h: Mat,
    g: Vector,
    a_in: Mat,
    b_in: Vector,
    warm_start: Option<Vector>,
}

impl QpProblem {
    pub fn new(h: Mat, g: Vector, a_in: Mat, b_in: Vector) -> Result<Self> {
        let d = g.len();
        if h.shape() != (d, d) {
            return Err(Error::dims("QP Hessian", format!("{d}x{d}"), format!("{:?}", h.shape())));
        }
        if a_in.ncols() != d && a_in.nrows() > 0 {
            return Err(Error::dims("QP constraint matrix", format!("?x{d}"), format!("{:?}", a_in.shape())));
        }
        if a_in.nrows() != b_in.len() {
            return Err(Error::dims("QP constraint bound", a_in.nrows(), b_in.len()));
        }
        let a_in = if a_in.nrows() == 0 { Mat::zeros(0, d) } else { a_in };
        if h.iter().chain(g.iter()).chain(a_in.iter()).any(|v| !v.is_finite()) || b_in.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
            return Err(Error::InvalidParameter("QP data must be finite".into()));
        }
        if !linalg::is_symmetric(&h, 1e-10) {
            return Err(Error::InvalidParameter("QP Hessian is not symmetric".into()));
        }
        if d > 0 {
            // λ_min(H) > floor  ⇔  H − floor·I has a Cholesky factor.
            let floor = (1e-12 * h.trace() / d as f64).max(0.0);
            let shifted = linalg::symmetrize(&h) - Mat::identity(d, d) * floor;
            if h.trace() <= 0.0 || Cholesky::new(shifted).is_none() {
                return Err(Error::NonConvex {
                    min_eigenvalue: linalg::min_eigenvalue(&h),
                });
            }
        }
        Ok(Self {
            h: linalg::symmetrize(&h),
            g,
            a_in,
            b_in,
            warm_start: None,
        })
    }

    pub fn unconstrained(h: Mat, g: Vector) -> Result<Self> {
        let d = g.len();
        Self::new(h, g, Mat::zeros(0, d), Vector::zeros(0))
    }

    /// Constraints active at `z` are preferred when several are violated.
    pub fn with_warm_start(mut self, z: Vector) -> Result<Self> {
        if z.len() != self.dim() {
            return Err(Error::dims("QP warm start", self.dim(), z.len()));
        }
        self.warm_start = Some(z);
        Ok(self)
    }

    pub fn dim(&self) -> usize {
        self.g.len()
    }
    pub fn n_constraints(&self) -> usize {
        self.b_in.len()
    }
    pub fn h(&self) -> &Mat {
        &self.h
    }
    pub fn g(&self) -> &Vector {
        &self.g
    }
    pub fn a_in(&self) -> &Mat {
        &self.a_in
    }
    pub fn b_in(&self) -> &Vector {
        &self.b_in
    }

    pub fn objective(&self, z: &Vector) -> f64 {
        0.5 * z.dot(&(&self.h * z)) + self.g.dot(z)
    }

    /// Largest of primal violation, stationarity (∞-norm), dual sign violation
    /// and complementarity.
    pub fn kkt_residual(&self, z: &Vector, duals: &Vector) -> f64 {
        let slack = &self.a_in * z - &self.b_in;
        let primal = slack.iter().cloned().fold(0.0, f64::max);
        let stat = (&self.h * z + &self.g + self.a_in.transpose() * duals).amax();
        let dual_sign = duals.iter().map(|u| (-u).max(0.0)).fold(0.0, f64::max);
        let comp = duals
            .iter()
            .zip(slack.iter())
            .filter(|(u, _)| **u != 0.0)
            .map(|(u, s)| u * s)
            .sum::<f64>()
            .abs();
        primal.max(stat).max(dual_sign).max(comp)
    }

    pub fn default_max_iter(&self) -> usize {
        let k = self.dim() + self.n_constraints();
        10 * k * k
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&QpDump::from(self))?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let dump: QpDump = serde_json::from_str(s)?;
        let d = dump.g.len();
        let a = if dump.a_in.is_empty() { Mat::zeros(0, d) } else { linalg::mat_from_rows(&dump.a_in)? };
        let qp = Self::new(linalg::mat_from_rows(&dump.h)?, Vector::from_vec(dump.g), a, Vector::from_vec(dump.b_in))?;
        match dump.warm_start {
            Some(w) => qp.with_warm_start(Vector::from_vec(w)),
            None => Ok(qp),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct QpDump {
    h: Vec<Vec<f64>>,
    g: Vec<f64>,
    a_in: Vec<Vec<f64>>,
    b_in: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    warm_start: Option<Vec<f64>>,
}

impl From<&QpProblem> for QpDump {
    fn from(qp: &QpProblem) -> Self {
        Self {
            h: linalg::mat_to_rows(&qp.h),
            g: qp.g.iter().cloned().collect(),
            a_in: linalg::mat_to_rows(&qp.a_in),
            b_in: qp.b_in.iter().cloned().collect(),
            warm_start: qp.warm_start.as_ref().map(|w| w.iter().cloned().collect()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum QpStatus {
    Optimal,
    Infeasible,
    IterationLimit,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub z: Vector,
    pub duals: Vector,
    pub status: QpStatus,
    pub kkt_residual: f64,
    pub objective: f64,
    pub iterations: usize,
    /// Indices of constraints in the final working set.
    pub active: Vec<usize>,
    /// For `Infeasible`: `y ≥ 0` with `Aᵀy = 0` and `bᵀy < 0`.
    pub certificate: Option<Vector>,
    /// `bᵀy` for the certificate.
    pub certificate_value: Option<f64>,
}

impl QpSolution {
    /// Converts non-optimal outcomes into errors.
    pub fn into_result(self) -> Result<QpSolution> {
        match self.status {
            QpStatus::Optimal => Ok(self),
            QpStatus::Infeasible => Err(Error::Infeasible {
                certificate_value: self.certificate_value.unwrap_or(f64::NAN),
            }),
            QpStatus::IterationLimit => Err(Error::IterationLimit {
                iterations: self.iterations,
                kkt_residual: self.kkt_residual,
            }),
        }
    }
}

struct Working {
    /// Active constraint indices.
    idx: Vec<usize>,
    /// `L⁻¹ n_j` for each active constraint (`n_j = −a_j`).
    cols: Vec<Vector>,
    /// Multipliers of the active constraints.
    u: Vec<f64>,
}

impl Working {
    fn basis(&self, d: usize) -> Option<(Mat, Mat)> {
        if self.cols.is_empty() {
            return None;
        }
        let b = Mat::from_columns(&self.cols);
        let qr = b.qr();
        let q = qr.q();
        let r = qr.r();
        debug_assert_eq!(q.nrows(), d);
        Some((q, r))
    }

    fn remove(&mut self, k: usize) {
        self.idx.remove(k);
        self.cols.remove(k);
        self.u.remove(k);
    }
}

pub fn solve(qp: &QpProblem, tol: f64, max_iter: usize) -> Result<QpSolution> {
    let d = qp.dim();
    let c = qp.n_constraints();
    let chol = Cholesky::new(qp.h.clone()).ok_or(Error::NonConvex {
        min_eigenvalue: linalg::min_eigenvalue(&qp.h),
    })?;
    let l = chol.l();
    let linv = |v: &Vector| -> Vector { l.solve_lower_triangular(v).expect("Cholesky factor has a positive diagonal") };
    let ltinv = |v: &Vector| -> Vector { l.tr_solve_lower_triangular(v).expect("Cholesky factor has a positive diagonal") };

    let mut z = -chol.solve(&qp.g);
    let mut work = Working {
        idx: Vec::new(),
        cols: Vec::new(),
        u: Vec::new(),
    };
    let warm_active: Vec<bool> = match &qp.warm_start {
        Some(w) => (&qp.a_in * w - &qp.b_in).iter().map(|v| *v >= -tol).collect(),
        None => vec![false; c],
    };

    let mut iterations = 0;
    let finish = |z: Vector, work: &Working, status: QpStatus, iterations: usize, certificate: Option<Vector>| {
        let mut duals = Vector::zeros(c);
        for (j, &i) in work.idx.iter().enumerate() {
            duals[i] = work.u[j].max(0.0);
        }
        let kkt_residual = qp.kkt_residual(&z, &duals);
        QpSolution {
            objective: qp.objective(&z),
            z,
            duals,
            status,
            kkt_residual,
            iterations,
            active: work.idx.clone(),
            certificate_value: certificate.as_ref().map(|y| y.dot(&qp.b_in)),
            certificate,
        }
    };

    loop {
        // Pick the most violated inactive constraint, warm-start-active ones first.
        let mut chosen: Option<(usize, f64, bool)> = None;
        let violation = &qp.a_in * &z - &qp.b_in;
        for i in 0..c {
            if work.idx.contains(&i) {
                continue;
            }
            let viol = violation[i];
            if viol <= tol {
                continue;
            }
            let pref = warm_active[i];
            let better = match chosen {
                None => true,
                Some((_, v, p)) => (pref && !p) || (pref == p && viol > v),
            };
            if better {
                chosen = Some((i, viol, pref));
            }
        }
        let Some((p, _, _)) = chosen else {
            return Ok(finish(z, &work, QpStatus::Optimal, iterations, None));
        };

        let a_p = qp.a_in.row(p).transpose();
        let n_plus = -&a_p;
        let c_plus = linv(&n_plus);
        let mut u_plus = 0.0;

        loop {
            iterations += 1;
            if iterations > max_iter {
                return Ok(finish(z, &work, QpStatus::IterationLimit, iterations - 1, None));
            }
            let (resid, r) = match work.basis(d) {
                Some((q, rr)) => {
                    let qc = q.transpose() * &c_plus;
                    let r = rr
                        .solve_upper_triangular(&qc)
                        .ok_or(Error::Singular {
                            context: "QP working set",
                            condition: f64::INFINITY,
                        })?;
                    (&c_plus - &q * qc, r)
                }
                None => (c_plus.clone(), Vector::zeros(0)),
            };
            let dependent = resid.norm() <= 1e-12 * c_plus.norm().max(f64::MIN_POSITIVE);
            let step = if dependent { None } else { Some(ltinv(&resid)) };

            // Partial (dual) step: first active multiplier to hit zero.
            let mut t1 = f64::INFINITY;
            let mut k_drop = None;
            for (j, &rj) in r.iter().enumerate() {
                if rj > 0.0 {
                    let t = work.u[j] / rj;
                    if t < t1 {
                        t1 = t;
                        k_drop = Some(j);
                    }
                }
            }
            // Full (primal) step: makes constraint p active.
            let slack_p = qp.b_in[p] - a_p.dot(&z);
            let t2 = match &step {
                Some(s) => {
                    let curv = n_plus.dot(s);
                    if curv > 0.0 {
                        (-slack_p / curv).max(0.0)
                    } else {
                        f64::INFINITY
                    }
                }
                None => f64::INFINITY,
            };

            if t1.is_infinite() && t2.is_infinite() {
                // n⁺ = N_A r with r ≤ 0 and s_p < 0.
                let mut y = Vector::zeros(c);
                y[p] = 1.0;
                for (j, &i) in work.idx.iter().enumerate() {
                    y[i] = -r[j];
                }
                return Ok(finish(z, &work, QpStatus::Infeasible, iterations, Some(y)));
            }

            let t = t1.min(t2);
            if let Some(s) = &step {
                if t.is_finite() {
                    z += s * t;
                }
            }
            for (j, rj) in r.iter().enumerate() {
                work.u[j] -= t * rj;
            }
            u_plus += t;

            if t2 <= t1 {
                work.idx.push(p);
                work.cols.push(c_plus.clone());
                work.u.push(u_plus);
                break;
            }
            let k = k_drop.expect("finite partial step has a blocking index");
            work.remove(k);
        }
    }
}

pub fn solve_default(qp: &QpProblem) -> Result<QpSolution> {
    solve(qp, DEFAULT_TOL, qp.default_max_iter())
}
