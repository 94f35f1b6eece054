//! Rolling-horizon constrained estimation of the augmented state
//! `x^e = [x̃, e]` and noise `w̄ = [w, ν]`.
//!
//! For `λ ∈ (0,1)` the window problem minimises
//! `(χ_s − x̂_s)ᵀ Φ_s⁻¹ (χ_s − x̂_s) + Σ_k [w̄_kᵀ Q_e⁻¹ w̄_k + υ_kᵀ R⁻¹ υ_k]`
//! over `z = [χ_s, w̄_s, …, w̄_{T−1}]` with `χ` propagated through `A_e, G_e`
//! and `υ_k = y_k − C_e χ_k`. The arrival weight `Φ_s` follows the augmented
//! Riccati recursion, one step per window shift.
//!
//! The plant model carries no control input here; `B` is ignored.

use std::collections::VecDeque;
use std::ops::Range;

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::linmodel::{augment, AugmentedPlant, LinearPlant, ObserverGain};
use crate::qpsolve::{self, QpProblem, QpStatus};
use crate::riccati::{are_step_augmented, qe_weights, MetamorphicWeights, RiccatiIterate};
use crate::setops::BoxSet;

/// How the arrival-cost prior `x̂_{T−N}` is refreshed when the window slides.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorUpdate {
    /// The estimator's own earlier prediction `x̂_{T−N|T−N−1}`.
    #[default]
    Filtering,
    /// `A_e χ̂_{T−N−1} + G_e w̄̂_{T−N−1}` from the previous window solution.
    Smoothing,
}

#[derive(Debug, Clone)]
pub struct MmheConfig {
    pub plant: LinearPlant,
    pub observer: ObserverGain,
    pub lambda: f64,
    /// Weight on `w̄`, `(m+p)×(m+p)`.
    pub m: Mat,
    pub q: Mat,
    pub r: Mat,
    pub horizon: usize,
    /// Box on the observer state `x̃` (first block of `χ`).
    pub x_box: BoxSet,
    /// Box on the error `e`; `None` leaves it unconstrained.
    pub e_box: Option<BoxSet>,
    pub w_box: BoxSet,
    pub v_box: BoxSet,
    pub prior: Vector,
    pub phi0: Mat,
    pub prior_update: PriorUpdate,
}

impl MmheConfig {
    pub fn validate(&self) -> Result<()> {
        let n = self.plant.n();
        let (m, p) = (self.plant.m(), self.plant.p());
        if !(0.0..1.0).contains(&self.lambda) {
            return Err(Error::InvalidParameter(format!("lambda must lie in [0,1), got {}", self.lambda)));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        if self.m.shape() != (m + p, m + p) {
            return Err(Error::dims("weight M", format!("{0}x{0}", m + p), format!("{:?}", self.m.shape())));
        }
        if self.q.shape() != (m, m) || self.r.shape() != (p, p) {
            return Err(Error::dims("weights Q, R", format!("{m}x{m}, {p}x{p}"), format!("{:?}, {:?}", self.q.shape(), self.r.shape())));
        }
        for (mat, ctx) in [(&self.m, "weight M"), (&self.q, "process weight Q"), (&self.r, "measurement weight R"), (&self.phi0, "initial arrival weight")] {
            if !linalg::is_symmetric(mat, 1e-10) || linalg::min_eigenvalue(mat) <= 0.0 {
                return Err(Error::NotPositiveDefinite { context: ctx });
            }
        }
        if self.phi0.shape() != (2 * n, 2 * n) || self.prior.len() != 2 * n {
            return Err(Error::dims("prior / arrival weight", 2 * n, format!("{} / {:?}", self.prior.len(), self.phi0.shape())));
        }
        if self.x_box.dim() != n || self.e_box.as_ref().is_some_and(|b| b.dim() != n) || self.w_box.dim() != m || self.v_box.dim() != p {
            return Err(Error::dims("constraint boxes", format!("{n}, {n}, {m}, {p}"), "mismatched box dimension"));
        }
        if !self.w_box.contains_point(&vec![0.0; m], 0.0) || !self.v_box.contains_point(&vec![0.0; p], 0.0) {
            return Err(Error::InvalidParameter("noise boxes must contain the origin".into()));
        }
        Ok(())
    }
}

/// Most recent measurements with their time indices.
#[derive(Debug, Clone, PartialEq)]
pub struct HorizonWindow {
    capacity: usize,
    items: VecDeque<(usize, Vector)>,
}

impl HorizonWindow {
    pub fn new(capacity: usize) -> Self {
        Self {
            capacity,
            items: VecDeque::with_capacity(capacity + 1),
        }
    }

    pub fn push(&mut self, t: usize, y: Vector) -> Result<()> {
        if let Some((last, _)) = self.items.back() {
            if t != last + 1 {
                return Err(Error::InvalidParameter(format!("window index {t} does not follow {last}")));
            }
        }
        self.items.push_back((t, y));
        while self.items.len() > self.capacity {
            self.items.pop_front();
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }
    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
    pub fn is_full(&self) -> bool {
        self.items.len() == self.capacity
    }
    pub fn start(&self) -> Option<usize> {
        self.items.front().map(|(t, _)| *t)
    }
    pub fn measurements(&self) -> impl Iterator<Item = &Vector> {
        self.items.iter().map(|(_, y)| y)
    }
}

/// Optimal window trajectory `χ̂_s..χ̂_T` and `w̄̂_s..w̄̂_{T−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct WindowSolution {
    pub start: usize,
    pub states: Vec<Vector>,
    pub noises: Vec<Vector>,
    pub objective: f64,
    pub status: QpStatus,
    pub active_constraints: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MmheState {
    /// Window start `s = T − N` (0 while the window is still filling).
    pub start: usize,
    pub prior: Vector,
    pub phi: RiccatiIterate,
    /// `λ`-scaled carried optimal cost.
    pub carried_cost: f64,
    pub carried_cost_unscaled: f64,
    pub last: Option<WindowSolution>,
}

/// Layout of the condensed decision vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct QpIndex {
    pub start: usize,
    pub len: usize,
    pub state_dim: usize,
    pub noise_dim: usize,
}

impl QpIndex {
    pub fn dim(&self) -> usize {
        self.state_dim + self.len * self.noise_dim
    }
    pub fn chi0(&self) -> Range<usize> {
        0..self.state_dim
    }
    pub fn omega(&self, j: usize) -> Range<usize> {
        let o = self.state_dim + j * self.noise_dim;
        o..o + self.noise_dim
    }
}

#[derive(Debug, Clone)]
pub struct CondensedQp {
    pub qp: QpProblem,
    pub index: QpIndex,
    /// `z ↦ χ_{s+k}` for `k = 0..=len`.
    pub state_maps: Vec<Mat>,
    /// Cost = QP objective + constant.
    pub constant: f64,
    /// Quadratic weight of the arrival term (`Φ_s⁻¹`).
    pub arrival_weight: Mat,
}

impl CondensedQp {
    pub fn cost(&self, z: &Vector) -> f64 {
        self.qp.objective(z) + self.constant
    }
}

fn push_box_rows(rows: &mut Vec<(Vector, f64)>, map: &Mat, offset: &Vector, b: &BoxSet) {
    // lower ≤ map·z + offset ≤ upper
    for i in 0..b.dim() {
        let row = map.row(i).transpose();
        if b.upper[i].is_finite() {
            rows.push((row.clone(), b.upper[i] - offset[i]));
        }
        if b.lower[i].is_finite() {
            rows.push((-row, offset[i] - b.lower[i]));
        }
    }
}

#[allow(clippy::too_many_arguments)]
/// Builds the window QP for data `ys = y_s..y_{T−1}`.
///
/// `noise_weight` is `Q_e⁻¹` for `λ ∈ (0,1)`; at `λ = 0` it is `M` and the
/// output-fit term is dropped.
pub fn build_condensed_qp(
    aug: &AugmentedPlant,
    config: &MmheConfig,
    start: usize,
    ys: &[Vector],
    prior: &Vector,
    phi: &Mat,
    noise_weight: &Mat,
    fit_outputs: bool,
) -> Result<CondensedQp> {
    let sx = aug.state_dim();
    let sw = aug.noise_dim();
    let len = ys.len();
    let index = QpIndex {
        start,
        len,
        state_dim: sx,
        noise_dim: sw,
    };
    let d = index.dim();
    if ys.iter().any(|y| y.len() != aug.p()) {
        return Err(Error::dims("window measurement", aug.p(), "other"));
    }

    let mut maps = Vec::with_capacity(len + 1);
    let mut s = Mat::zeros(sx, d);
    s.view_mut((0, 0), (sx, sx)).copy_from(&Mat::identity(sx, sx));
    maps.push(s.clone());
    for j in 0..len {
        let mut next = &aug.a_e * &s;
        let mut blk = next.view_mut((0, index.omega(j).start), (sx, sw));
        blk += &aug.g_e;
        s = next;
        maps.push(s.clone());
    }

    let phi_inv = linalg::spd_inverse(phi, "arrival weight Φ")?;
    let r_inv = linalg::spd_inverse(&config.r, "measurement weight R")?;
    let mut w = Mat::zeros(d, d);
    let mut lin = Vector::zeros(d);
    let mut constant = prior.dot(&(&phi_inv * prior));
    w.view_mut((0, 0), (sx, sx)).copy_from(&phi_inv);
    lin.rows_mut(0, sx).copy_from(&(&phi_inv * prior));
    for j in 0..len {
        let r = index.omega(j);
        let mut blk = w.view_mut((r.start, r.start), (sw, sw));
        blk += noise_weight;
    }
    if fit_outputs {
        for (k, y) in ys.iter().enumerate() {
            let cs = &aug.c_e * &maps[k];
            let ctr = cs.transpose() * &r_inv;
            w += &ctr * &cs;
            lin += &ctr * y;
            constant += y.dot(&(&r_inv * y));
        }
    }
    let h = linalg::symmetrize(&(w * 2.0));
    let g = lin * -2.0;

    let n = aug.n();
    let mut rows: Vec<(Vector, f64)> = Vec::new();
    let zero_sx = Vector::zeros(sx);
    for map in &maps {
        push_box_rows(&mut rows, &map.rows(0, n).into_owned(), &zero_sx.rows(0, n).into_owned(), &config.x_box);
        if let Some(e_box) = &config.e_box {
            push_box_rows(&mut rows, &map.rows(n, n).into_owned(), &zero_sx.rows(n, n).into_owned(), e_box);
        }
    }
    let wbar = config.w_box.product(&config.v_box);
    for j in 0..len {
        let mut sel = Mat::zeros(sw, d);
        sel.view_mut((0, index.omega(j).start), (sw, sw)).copy_from(&Mat::identity(sw, sw));
        push_box_rows(&mut rows, &sel, &Vector::zeros(sw), &wbar);
    }
    for (k, y) in ys.iter().enumerate() {
        // υ_k = y_k − C_e χ_k
        let cs = -(&aug.c_e * &maps[k]);
        push_box_rows(&mut rows, &cs, y, &config.v_box);
    }
    let mut a_in = Mat::zeros(rows.len(), d);
    let mut b_in = Vector::zeros(rows.len());
    for (i, (row, b)) in rows.iter().enumerate() {
        a_in.row_mut(i).copy_from(&row.transpose());
        b_in[i] = *b;
    }

    Ok(CondensedQp {
        qp: QpProblem::new(h, g, a_in, b_in)?,
        index,
        state_maps: maps,
        constant,
        arrival_weight: phi_inv,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepOutput {
    /// Time `T` of the estimate (number of measurements consumed).
    pub time: usize,
    /// Plant-state estimate `x̃ + e` at time `T`.
    pub estimate: Vector,
    /// Augmented estimate `χ̂_T`.
    pub augmented: Vector,
    pub objective: f64,
    pub status: QpStatus,
    pub active_constraints: usize,
}

#[derive(Debug, Clone)]
pub struct MmheEstimator {
    config: MmheConfig,
    aug: AugmentedPlant,
    weights: Option<MetamorphicWeights>,
    window: HorizonWindow,
    state: MmheState,
    /// `(k, x̂_{k|k−1})` for `k ≥ start`.
    predictions: VecDeque<(usize, Vector)>,
    /// `(k, scaled, unscaled)` carried costs for `k ≥ start`.
    costs: VecDeque<(usize, f64, f64)>,
    time: usize,
}

impl MmheEstimator {
    pub fn new(config: MmheConfig) -> Result<Self> {
        config.validate()?;
        let aug = augment(&config.plant, &config.observer)?;
        let weights = if config.lambda > 0.0 {
            Some(qe_weights(config.lambda, &config.m, &config.q)?)
        } else {
            None
        };
        let state = MmheState {
            start: 0,
            prior: config.prior.clone(),
            phi: RiccatiIterate::new(config.phi0.clone()),
            carried_cost: 0.0,
            carried_cost_unscaled: 0.0,
            last: None,
        };
        Ok(Self {
            window: HorizonWindow::new(config.horizon),
            predictions: VecDeque::from([(0, config.prior.clone())]),
            costs: VecDeque::from([(0, 0.0, 0.0)]),
            aug,
            weights,
            state,
            config,
            time: 0,
        })
    }

    pub fn config(&self) -> &MmheConfig {
        &self.config
    }
    pub fn augmented(&self) -> &AugmentedPlant {
        &self.aug
    }
    pub fn state(&self) -> &MmheState {
        &self.state
    }
    pub fn window(&self) -> &HorizonWindow {
        &self.window
    }
    pub fn time(&self) -> usize {
        self.time
    }

    /// Consumes `y_{T−1}` and returns the estimate at `T`.
    pub fn step(&mut self, y: &Vector) -> Result<StepOutput> {
        if self.config.lambda == 0.0 {
            self.lambda_zero_step(y)
        } else {
            self.advance(y)
        }
    }

    /// `λ = 0`: minimises `Σ w̄ᵀ M w̄` with the arrival term kept as a tie-break
    /// for `χ_s`, which the cost alone leaves free.
    pub fn lambda_zero_step(&mut self, y: &Vector) -> Result<StepOutput> {
        if self.config.lambda != 0.0 {
            return Err(Error::InvalidParameter("lambda_zero_step requires lambda = 0".into()));
        }
        self.advance(y)
    }

    fn advance(&mut self, y: &Vector) -> Result<StepOutput> {
        if y.len() != self.aug.p() {
            return Err(Error::dims("measurement", self.aug.p(), y.len()));
        }
        let mut window = self.window.clone();
        window.push(self.time, y.clone())?;
        let t_new = self.time + 1;
        let start = window.start().unwrap_or(0);

        let (prior, phi) = if start > self.state.start {
            debug_assert_eq!(start, self.state.start + 1);
            let prior = match self.config.prior_update {
                PriorUpdate::Filtering => self
                    .predictions
                    .iter()
                    .find(|(k, _)| *k == start)
                    .map(|(_, x)| x.clone())
                    .expect("prediction history covers the window start"),
                PriorUpdate::Smoothing => {
                    let last = self.state.last.as_ref().expect("a window was solved before the first shift");
                    &self.aug.a_e * &last.states[0] + &self.aug.g_e * &last.noises[0]
                }
            };
            let phi = match &self.weights {
                Some(w) => are_step_augmented(&self.state.phi, &self.aug, w, &self.config.r)?,
                None => self.state.phi.clone(),
            };
            (prior, phi)
        } else {
            (self.state.prior.clone(), self.state.phi.clone())
        };

        let ys: Vec<Vector> = window.measurements().cloned().collect();
        let (noise_weight, fit) = match &self.weights {
            Some(w) => (w.qe_inv().clone(), true),
            None => (self.config.m.clone(), false),
        };
        let cqp = build_condensed_qp(&self.aug, &self.config, start, &ys, &prior, &phi.value, &noise_weight, fit)?;
        let sol = qpsolve::solve_default(&cqp.qp)?;
        if sol.status != QpStatus::Optimal {
            sol.clone().into_result()?;
        }

        let states: Vec<Vector> = cqp.state_maps.iter().map(|s| s * &sol.z).collect();
        let noises: Vec<Vector> = (0..cqp.index.len).map(|j| sol.z.rows_range(cqp.index.omega(j)).into_owned()).collect();
        let chi_t = states.last().expect("window has at least the initial state").clone();
        let window_cost = cqp.cost(&sol.z).max(0.0);
        let (prev_scaled, prev_unscaled) = self
            .costs
            .iter()
            .find(|(k, _, _)| *k == start)
            .map(|(_, a, b)| (*a, *b))
            .unwrap_or((0.0, 0.0));
        let lam = self.config.lambda;

        self.window = window;
        self.time = t_new;
        self.state = MmheState {
            start,
            prior,
            phi,
            carried_cost: lam * window_cost + lam * prev_scaled,
            carried_cost_unscaled: window_cost + prev_unscaled,
            last: Some(WindowSolution {
                start,
                states,
                noises,
                objective: sol.objective,
                status: sol.status,
                active_constraints: sol.active.len(),
            }),
        };
        self.predictions.push_back((t_new, chi_t.clone()));
        self.costs.push_back((t_new, self.state.carried_cost, self.state.carried_cost_unscaled));
        while self.predictions.front().is_some_and(|(k, _)| *k < start) {
            self.predictions.pop_front();
        }
        while self.costs.front().is_some_and(|(k, _, _)| *k < start) {
            self.costs.pop_front();
        }

        let n = self.aug.n();
        Ok(StepOutput {
            time: t_new,
            estimate: chi_t.rows(0, n) + chi_t.rows(n, n),
            augmented: chi_t,
            objective: sol.objective,
            status: sol.status,
            active_constraints: sol.active.len(),
        })
    }
}

/// Per-step CSV record.
#[derive(Debug, Clone, PartialEq)]
pub struct LogRecord {
    pub time: usize,
    pub measurement: Vector,
    pub output: StepOutput,
}

impl LogRecord {
    pub fn csv_header(n: usize, p: usize) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend((0..p).map(|i| format!("y{i}")));
        cols.extend((0..n).map(|i| format!("x{i}")));
        cols.extend((0..n).map(|i| format!("xtilde{i}")));
        cols.extend((0..n).map(|i| format!("e{i}")));
        cols.extend(["objective", "status", "active"].map(String::from));
        cols.join(",")
    }

    pub fn csv_row(&self) -> String {
        let o = &self.output;
        let n = o.estimate.len();
        let mut cols = vec![self.time.to_string()];
        cols.extend(self.measurement.iter().map(|v| v.to_string()));
        cols.extend(o.estimate.iter().map(|v| v.to_string()));
        cols.extend(o.augmented.rows(0, n).iter().map(|v| v.to_string()));
        cols.extend(o.augmented.rows(n, n).iter().map(|v| v.to_string()));
        cols.push(o.objective.to_string());
        cols.push(format!("{:?}", o.status).to_lowercase());
        cols.push(o.active_constraints.to_string());
        cols.join(",")
    }
}

/// Runs the estimator over `ys`, collecting the per-step log.
pub fn run(estimator: &mut MmheEstimator, ys: &[Vector]) -> Result<Vec<LogRecord>> {
    ys.iter()
        .map(|y| {
            let t = estimator.time();
            estimator.step(y).map(|output| LogRecord {
                time: t,
                measurement: y.clone(),
                output,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(r: usize, c: usize, v: &[f64]) -> Mat {
        Mat::from_row_slice(r, c, v)
    }

    fn scalar_config(lambda: f64, horizon: usize) -> MmheConfig {
        let plant = LinearPlant::new(m(1, 1, &[0.9]), m(1, 1, &[1.0]), None, m(1, 1, &[1.0])).unwrap();
        let observer = ObserverGain::for_plant(&plant, m(1, 1, &[0.5])).unwrap();
        MmheConfig {
            plant,
            observer,
            lambda,
            m: Mat::identity(2, 2),
            q: Mat::identity(1, 1),
            r: Mat::identity(1, 1),
            horizon,
            x_box: BoxSet::symmetric(1, 1e6),
            e_box: None,
            w_box: BoxSet::symmetric(1, 1e6),
            v_box: BoxSet::symmetric(1, 1e6),
            prior: Vector::zeros(2),
            phi0: Mat::identity(2, 2),
            prior_update: PriorUpdate::Filtering,
        }
    }

    #[test]
    fn decision_dimension_with_vehicle_sizes() {
        let idx = QpIndex {
            start: 0,
            len: 20,
            state_dim: 8,
            noise_dim: 7,
        };
        assert_eq!(idx.dim(), 148);
        assert_eq!(idx.omega(19), 141..148);
    }

    #[test]
    fn arrival_weight_and_zero_cost_at_exact_fit() {
        let cfg = scalar_config(0.5, 3);
        let est = MmheEstimator::new(cfg.clone()).unwrap();
        let w = qe_weights(0.5, &cfg.m, &cfg.q).unwrap();
        let prior = Vector::from_vec(vec![1.0, 0.5]);
        let phi = m(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        // Data generated by the augmented model from the prior with zero noise.
        let aug = est.augmented();
        let mut x = prior.clone();
        let mut ys = Vec::new();
        for _ in 0..3 {
            ys.push(&aug.c_e * &x);
            x = &aug.a_e * &x;
        }
        let cqp = build_condensed_qp(aug, &cfg, 0, &ys, &prior, &phi, w.qe_inv(), true).unwrap();
        assert!((&cqp.arrival_weight - linalg::spd_inverse(&phi, "t").unwrap()).norm() < 1e-14);
        let mut z = Vector::zeros(cqp.index.dim());
        z.rows_mut(0, 2).copy_from(&prior);
        assert!(cqp.cost(&z).abs() < 1e-12);
    }

    #[test]
    fn tight_state_box_is_respected() {
        let mut cfg = scalar_config(0.5, 4);
        cfg.x_box = BoxSet::symmetric(1, 0.2);
        let mut est = MmheEstimator::new(cfg).unwrap();
        for k in 0..10 {
            let out = est.step(&Vector::from_element(1, 3.0 + k as f64)).unwrap();
            let last = est.state().last.as_ref().unwrap();
            for s in &last.states {
                assert!(s[0].abs() <= 0.2 + 1e-7);
            }
            assert!(out.augmented[0].abs() <= 0.2 + 1e-7);
        }
    }

    #[test]
    fn lambda_zero_has_zero_noise() {
        let mut est = MmheEstimator::new(scalar_config(0.0, 3)).unwrap();
        for k in 0..6 {
            let out = est.step(&Vector::from_element(1, (k as f64).sin())).unwrap();
            assert!(out.objective.abs() < 1e-12);
            assert!(est.state().last.as_ref().unwrap().noises.iter().all(|w| w.norm() < 1e-12));
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let mut cfg = scalar_config(1.0, 3);
        assert!(MmheEstimator::new(cfg.clone()).is_err());
        cfg.lambda = 0.5;
        cfg.w_box = BoxSet::new(vec![0.1], vec![1.0]).unwrap();
        assert!(MmheEstimator::new(cfg.clone()).is_err());
        cfg = scalar_config(0.5, 0);
        assert!(MmheEstimator::new(cfg).is_err());
    }

    #[test]
    fn window_indices_are_contiguous() {
        let mut w = HorizonWindow::new(2);
        w.push(0, Vector::zeros(1)).unwrap();
        w.push(1, Vector::zeros(1)).unwrap();
        w.push(2, Vector::zeros(1)).unwrap();
        assert_eq!(w.start(), Some(1));
        assert!(w.is_full());
        assert!(w.push(5, Vector::zeros(1)).is_err());
    }

    #[test]
    fn csv_row_matches_header() {
        let mut est = MmheEstimator::new(scalar_config(0.5, 2)).unwrap();
        let log = run(&mut est, &[Vector::from_element(1, 1.0), Vector::from_element(1, 2.0)]).unwrap();
        let cols = LogRecord::csv_header(1, 1).split(',').count();
        assert!(log.iter().all(|r| r.csv_row().split(',').count() == cols));
    }
}
