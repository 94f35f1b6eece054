//! Riccati recursions for the arrival-cost weight and the λ-parameterised
//! weight family of the augmented model.
//!
//! For `λ ∈ (0,1)` the normalised window cost weights the augmented noise
//! `w̄ = [w, ν]` by `Q_e⁻¹ = ((1−λ)/λ)·M + diag(Q⁻¹, 0)`. `Q_e` then acts as the
//! noise covariance of the augmented model and the arrival weight `Φ_t`
//! follows the usual prediction-form Riccati recursion.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};
use crate::linmodel::{AugmentedPlant, LinearPlant, ObserverGain};

#[derive(Debug, Clone, PartialEq)]
pub struct RiccatiIterate {
    pub value: Mat,
    pub step: usize,
}

impl RiccatiIterate {
    pub fn new(value: Mat) -> Self {
        Self { value, step: 0 }
    }
}

/// `G Q Gᵀ + A P Aᵀ − A P Cᵀ (R + C P Cᵀ)⁻¹ C P Aᵀ`, symmetrised.
pub fn are_step(p: &RiccatiIterate, a: &Mat, c: &Mat, g: &Mat, q: &Mat, r: &Mat) -> Result<RiccatiIterate> {
    let n = a.nrows();
    if p.value.shape() != (n, n) || c.ncols() != n || g.nrows() != n || q.shape() != (g.ncols(), g.ncols()) || r.shape() != (c.nrows(), c.nrows()) {
        return Err(Error::dims(
            "are_step",
            format!("P {n}x{n}, C ?x{n}, G {n}x?, Q square, R square"),
            format!("P {:?}, C {:?}, G {:?}, Q {:?}, R {:?}", p.value.shape(), c.shape(), g.shape(), q.shape(), r.shape()),
        ));
    }
    let pv = &p.value;
    let apct = a * pv * c.transpose();
    let innov = r + c * pv * c.transpose();
    let gain_t = linalg::spd_solve(&innov, &apct.transpose(), "innovation covariance R + C P Cᵀ")?;
    let next = g * q * g.transpose() + a * pv * a.transpose() - &apct * gain_t;
    Ok(RiccatiIterate {
        value: linalg::symmetrize(&next),
        step: p.step + 1,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetamorphicWeights {
    lambda: f64,
    m: Mat,
    q: Mat,
    qe_inv: Mat,
    qe: Mat,
}

impl MetamorphicWeights {
    pub fn lambda(&self) -> f64 {
        self.lambda
    }
    pub fn m(&self) -> &Mat {
        &self.m
    }
    pub fn q(&self) -> &Mat {
        &self.q
    }
    pub fn qe_inv(&self) -> &Mat {
        &self.qe_inv
    }
    pub fn qe(&self) -> &Mat {
        &self.qe
    }
}

fn check_spd(m: &Mat, context: &'static str) -> Result<()> {
    if m.nrows() == 0 || !linalg::is_symmetric(m, 1e-10) || linalg::min_eigenvalue(m) <= 0.0 {
        return Err(Error::NotPositiveDefinite { context });
    }
    Ok(())
}

/// Builds `Q_e⁻¹ = ((1−λ)/λ) M + diag(Q⁻¹, 0)` and its inverse.
pub fn qe_weights(lambda: f64, m: &Mat, q: &Mat) -> Result<MetamorphicWeights> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidParameter(format!("lambda must lie in (0,1), got {lambda}")));
    }
    check_spd(m, "weight M")?;
    check_spd(q, "process weight Q")?;
    let k = m.nrows();
    let mq = q.nrows();
    if mq > k {
        return Err(Error::dims("qe_weights", format!("Q at most {k}x{k}"), format!("{mq}x{mq}")));
    }
    let mut qe_inv = m * ((1.0 - lambda) / lambda);
    let q_inv = linalg::spd_inverse(q, "process weight Q")?;
    let mut tl = qe_inv.view_mut((0, 0), (mq, mq));
    tl += &q_inv;
    qe_inv = linalg::symmetrize(&qe_inv);
    let qe = linalg::spd_inverse(&qe_inv, "Q_e inverse")?;
    Ok(MetamorphicWeights {
        lambda,
        m: m.clone(),
        q: q.clone(),
        qe_inv,
        qe,
    })
}

/// `d(Q_e⁻¹)/dλ = −M / λ²`.
pub fn derivative_qe_inv(lambda: f64, m: &Mat) -> Mat {
    m * (-1.0 / (lambda * lambda))
}

/// `dQ_e/dλ = Q_e M Q_e / λ²`.
pub fn derivative_qe(w: &MetamorphicWeights) -> Mat {
    linalg::symmetrize(&(&w.qe * &w.m * &w.qe / (w.lambda * w.lambda)))
}

/// Augmented Riccati step with `(A_e, C_e, G_e, Q_e, R)`.
pub fn are_step_augmented(p: &RiccatiIterate, aug: &AugmentedPlant, w: &MetamorphicWeights, r: &Mat) -> Result<RiccatiIterate> {
    if w.qe.nrows() != aug.noise_dim() {
        return Err(Error::dims("are_step_augmented", aug.noise_dim(), w.qe.nrows()));
    }
    are_step(p, &aug.a_e, &aug.c_e, &aug.g_e, &w.qe, r)
}

pub const STEADY_TOL: f64 = 1e-12;
pub const STEADY_MAX_ITER: usize = 100_000;

/// Fixed-point iteration `P ← step(P)` until `‖ΔP‖_F ≤ tol · max(1, ‖P‖_F)`.
pub fn steady_state<F>(step_fn: F, p0: &RiccatiIterate, tol: f64, max_iter: usize) -> Result<RiccatiIterate>
where
    F: Fn(&RiccatiIterate) -> Result<RiccatiIterate>,
{
    let mut p = p0.clone();
    let mut change = f64::INFINITY;
    for _ in 0..max_iter {
        let next = step_fn(&p)?;
        change = (&next.value - &p.value).norm();
        let scale = next.value.norm().max(1.0);
        p = next;
        if change <= tol * scale {
            return Ok(p);
        }
    }
    Err(Error::NoConvergence {
        context: "riccati steady state",
        iterations: max_iter,
        residual: change,
    })
}

/// `L_e = A_e P C_eᵀ (R + C_e P C_eᵀ)⁻¹`.
pub fn metamorphic_kalman_gain(p: &RiccatiIterate, aug: &AugmentedPlant, r: &Mat) -> Result<Mat> {
    let pc = &p.value * aug.c_e.transpose();
    let innov = r + &aug.c_e * &pc;
    let gt = linalg::spd_solve(&innov, &(&aug.a_e * &pc).transpose(), "innovation covariance R + C_e P C_eᵀ")?;
    Ok(gt.transpose())
}

/// Residual of the augmented ARE at `P` (Frobenius norm).
pub fn are_residual(p: &Mat, aug: &AugmentedPlant, w: &MetamorphicWeights, r: &Mat) -> Result<f64> {
    let next = are_step_augmented(&RiccatiIterate::new(p.clone()), aug, w, r)?;
    Ok((&next.value - p).norm())
}

/// One-step predictor form of the metamorphic Kalman filter:
/// `x̂_{k+1} = A_e x̂_k + L_e,k (y_k − C_e x̂_k)`, `Φ_{k+1} = ARE(Φ_k)`.
#[derive(Debug, Clone)]
pub struct MetamorphicKalmanFilter {
    aug: AugmentedPlant,
    weights: MetamorphicWeights,
    r: Mat,
    pub estimate: linalg::Vector,
    pub phi: RiccatiIterate,
}

impl MetamorphicKalmanFilter {
    pub fn new(aug: AugmentedPlant, weights: MetamorphicWeights, r: Mat, x0: linalg::Vector, phi0: Mat) -> Self {
        Self {
            aug,
            weights,
            r,
            estimate: x0,
            phi: RiccatiIterate::new(phi0),
        }
    }

    /// Consumes `y_k` and returns the prediction of `x_{k+1}`.
    pub fn step(&mut self, y: &linalg::Vector) -> Result<linalg::Vector> {
        let gain = metamorphic_kalman_gain(&self.phi, &self.aug, &self.r)?;
        let innovation = y - &self.aug.c_e * &self.estimate;
        self.estimate = &self.aug.a_e * &self.estimate + gain * innovation;
        self.phi = are_step_augmented(&self.phi, &self.aug, &self.weights, &self.r)?;
        Ok(self.estimate.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MonotonicityMode {
    /// Shared λ-independent `Φ_0`, iterated `k_max` steps.
    FixedInitial,
    /// `Φ_0 = Φ_∞(λ)` per grid point.
    SteadyState,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityRow {
    pub lambda_low: f64,
    pub lambda_high: f64,
    pub k: usize,
    pub min_eig_diff: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MonotonicityReport {
    pub mode: MonotonicityMode,
    pub rows: Vec<MonotonicityRow>,
    pub pass: bool,
}

impl MonotonicityReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("lambda_low,lambda_high,k,min_eig_diff,pass\n");
        for r in &self.rows {
            s.push_str(&format!("{},{},{},{:e},{}\n", r.lambda_low, r.lambda_high, r.k, r.min_eig_diff, r.pass));
        }
        s
    }
}

pub struct MonotonicityInputs<'a> {
    pub plant: &'a LinearPlant,
    pub observer: &'a ObserverGain,
    pub m: &'a Mat,
    pub q: &'a Mat,
    pub r: &'a Mat,
    pub phi0: &'a Mat,
}

/// Slack-adjusted PSD check of `Φ_k(λ_{i+1}) − Φ_k(λ_i)` over the grid.
///
/// `FixedInitial`: each pair passes when its minimum eigenvalue is at least
/// `−1e−9·(1+‖Φ_k‖_F)`. `SteadyState` (row `k = 0` holds `Φ_∞`): when `G` and `L`
/// are square and nonsingular the difference must additionally satisfy
/// `min eig ≥ 1e−12`.
pub fn phi_monotonicity_report(
    inputs: &MonotonicityInputs<'_>,
    lambdas: &[f64],
    k_max: usize,
    mode: MonotonicityMode,
) -> Result<MonotonicityReport> {
    let aug = crate::linmodel::augment(inputs.plant, inputs.observer)?;
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);

    let trajectories: Vec<Vec<Mat>> = sorted
        .iter()
        .map(|&lam| -> Result<Vec<Mat>> {
            let w = qe_weights(lam, inputs.m, inputs.q)?;
            match mode {
                MonotonicityMode::FixedInitial => {
                    let mut p = RiccatiIterate::new(inputs.phi0.clone());
                    let mut out = vec![p.value.clone()];
                    for _ in 0..k_max {
                        p = are_step_augmented(&p, &aug, &w, inputs.r)?;
                        out.push(p.value.clone());
                    }
                    Ok(out)
                }
                MonotonicityMode::SteadyState => {
                    let p = steady_state(
                        |p| are_step_augmented(p, &aug, &w, inputs.r),
                        &RiccatiIterate::new(inputs.phi0.clone()),
                        STEADY_TOL,
                        STEADY_MAX_ITER,
                    )?;
                    Ok(vec![p.value])
                }
            }
        })
        .collect::<Result<_>>()?;

    let strict = mode == MonotonicityMode::SteadyState && {
        let g = inputs.plant.g();
        let l = inputs.observer.l();
        g.is_square() && l.is_square() && linalg::numerical_rank(g) == g.nrows() && linalg::numerical_rank(l) == l.nrows()
    };

    let mut rows = Vec::new();
    for i in 0..sorted.len().saturating_sub(1) {
        for k in 0..trajectories[i].len() {
            let hi = &trajectories[i + 1][k];
            let diff = hi - &trajectories[i][k];
            let min_eig = linalg::min_eigenvalue(&diff);
            let slack = -1e-9 * (1.0 + hi.norm());
            let pass = if strict { min_eig >= 1e-12 } else { min_eig >= slack };
            rows.push(MonotonicityRow {
                lambda_low: sorted[i],
                lambda_high: sorted[i + 1],
                k,
                min_eig_diff: min_eig,
                pass,
            });
        }
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(MonotonicityReport { mode, rows, pass })
}
