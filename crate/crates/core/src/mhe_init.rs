//! Moving-horizon estimation of the window's initial state with an embedded
//! Luenberger pre-estimator and a scalar prior/fit trade-off.
//!
//! At time `t` the window holds `y_{t−N..t}` and `u_{t−N..t−1}`. Inside the
//! window the prediction runs through the observer loop
//! `x̂_{i+1} = A_L x̂_i + B u_i + L y_i`, so the stacked predicted outputs are
//! `Λ̄ x̂ + Γ̄ u + L_N y` and the fit residual is `Ψ y − Γ̄ u − Λ̄ x̂` with
//! `Ψ = I − L_N`. The estimate minimises
//! `(λ̄/λ)‖x̂ − x̄‖² + ‖Ψ y − Γ̄ u − Λ̄ x̂‖²` with `λ̄ = λμ + (1−λ)μ̄`.
//!
//! For the true state the same stacking gives
//! `Ψ y − Γ̄ u = Λ̄ x + Φ̄_w w + Ψ v`, where `Φ̄_w` has blocks `C A_L^{i−j−1}`.
//! The estimation error `e = x − x̂` then obeys
//! `e_{t−N} = Ā_L e_{t−N−1} + S̄⁻¹ S₁ w_{t−N−1..t−1} + S̄⁻¹ S₂ v_{t−N−1..t}`
//! with `S̄ = (λ̄/λ) I + Λ̄ᵀΛ̄`, `Ā_L = (λ̄/λ) S̄⁻¹ A_L`,
//! `S₁ = [(λ̄/λ) I, −Λ̄ᵀΦ̄_w]` and `S₂ = [−(λ̄/λ) L, −Λ̄ᵀΨ]`.
//!
//! The process noise enters every state directly; plants with `G ≠ I` are
//! rejected.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::linmodel::{LinearPlant, ObserverGain};
use crate::qpsolve::{self, QpProblem};
use crate::setops::BoxSet;

/// Row-block `i` is `C F^i` (`i = 0..=N`).
fn power_stack(f: &Mat, c: &Mat, horizon: usize) -> Mat {
    let (p, n) = c.shape();
    let mut out = Mat::zeros((horizon + 1) * p, n);
    let mut blk = c.clone();
    for i in 0..=horizon {
        out.view_mut((i * p, 0), (p, n)).copy_from(&blk);
        blk = &blk * f;
    }
    out
}

/// Strictly block-lower Toeplitz map with block `(i, j) = C F^{i−j−1} X`
/// for `i > j`, `i = 0..=N`, `j = 0..cols`.
fn causal_toeplitz(f: &Mat, c: &Mat, x: &Mat, horizon: usize, cols: usize) -> Mat {
    let p = c.nrows();
    let k = x.ncols();
    let mut out = Mat::zeros((horizon + 1) * p, cols * k);
    if k == 0 {
        return out;
    }
    // markov[d] = C F^d X
    let mut markov = Vec::with_capacity(horizon);
    let mut blk = c.clone();
    for _ in 0..horizon {
        markov.push(&blk * x);
        blk = &blk * f;
    }
    for i in 1..=horizon {
        for j in 0..i.min(cols) {
            out.view_mut((i * p, j * k), (p, k)).copy_from(&markov[i - j - 1]);
        }
    }
    out
}

/// `(Λ, Γ, Φ_w)` for `x⁺ = A x + B u + w`, `y = C x + v` over `N + 1` samples.
pub fn build_open_loop_maps(a: &Mat, b: Option<&Mat>, c: &Mat, horizon: usize) -> Result<(Mat, Mat, Mat)> {
    let n = a.nrows();
    if !a.is_square() || c.ncols() != n || b.is_some_and(|b| b.nrows() != n) {
        return Err(Error::dims("open-loop maps", format!("A {n}x{n}, C ?x{n}, B {n}x?"), "inconsistent shapes"));
    }
    if horizon == 0 {
        return Err(Error::InvalidParameter("horizon must be at least 1".into()));
    }
    let b = b.cloned().unwrap_or_else(|| Mat::zeros(n, 0));
    Ok((
        power_stack(a, c, horizon),
        causal_toeplitz(a, c, &b, horizon, horizon),
        causal_toeplitz(a, c, &Mat::identity(n, n), horizon, horizon),
    ))
}

/// Observer-loop counterparts of the open-loop maps.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverMaps {
    /// Block-row `i` is `C A_L^i`.
    pub observability: Mat,
    /// Blocks `C A_L^{i−j−1} B`.
    pub input_map: Mat,
    /// `L_N`: blocks `C A_L^{i−j−1} L`, square over all `N + 1` outputs.
    pub output_injection: Mat,
    /// `I − L_N`.
    pub psi: Mat,
    /// Blocks `C A_L^{i−j−1}` acting on `w_{t−N..t−1}`.
    pub noise_map: Mat,
}

pub fn build_observer_maps(a: &Mat, b: Option<&Mat>, c: &Mat, l: &Mat, horizon: usize) -> Result<ObserverMaps> {
    let n = a.nrows();
    let p = c.nrows();
    if l.shape() != (n, p) {
        return Err(Error::dims("observer gain", format!("{n}x{p}"), format!("{:?}", l.shape())));
    }
    build_open_loop_maps(a, b, c, horizon)?;
    let a_l = a - l * c;
    let b = b.cloned().unwrap_or_else(|| Mat::zeros(n, 0));
    let l_n = causal_toeplitz(&a_l, c, l, horizon, horizon + 1);
    let psi = Mat::identity((horizon + 1) * p, (horizon + 1) * p) - &l_n;
    Ok(ObserverMaps {
        observability: power_stack(&a_l, c, horizon),
        input_map: causal_toeplitz(&a_l, c, &b, horizon, horizon),
        output_injection: l_n,
        psi,
        noise_map: causal_toeplitz(&a_l, c, &Mat::identity(n, n), horizon, horizon),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchMaps {
    pub horizon: usize,
    pub observability: Mat,
    pub input_map: Mat,
    pub noise_map: Mat,
    pub observer: ObserverMaps,
}

impl BatchMaps {
    pub fn new(plant: &LinearPlant, observer: &ObserverGain, horizon: usize) -> Result<Self> {
        let n = plant.n();
        if horizon < n {
            return Err(Error::InvalidParameter(format!("horizon {horizon} is shorter than the state dimension {n}")));
        }
        if plant.g() != &Mat::identity(n, n) {
            return Err(Error::InvalidParameter("the initial-state estimator expects process noise entering every state (G = I)".into()));
        }
        let (obs, inp, noise) = build_open_loop_maps(plant.a(), plant.b(), plant.c(), horizon)?;
        Ok(Self {
            horizon,
            observability: obs,
            input_map: inp,
            noise_map: noise,
            observer: build_observer_maps(plant.a(), plant.b(), plant.c(), observer.l(), horizon)?,
        })
    }

    pub fn n(&self) -> usize {
        self.observability.ncols()
    }
    pub fn p(&self) -> usize {
        self.observability.nrows() / (self.horizon + 1)
    }
    /// `Λ̄ᵀΛ̄`.
    pub fn gram(&self) -> Mat {
        let lb = &self.observer.observability;
        linalg::symmetrize(&(lb.transpose() * lb))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InitMheConfig {
    pub horizon: usize,
    pub lambda: f64,
    pub mu: f64,
    pub mu_bar: f64,
}

impl InitMheConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::InvalidParameter(format!("lambda must lie in [0,1], got {}", self.lambda)));
        }
        if !(self.mu >= 0.0 && self.mu_bar >= 0.0) {
            return Err(Error::InvalidParameter("prior weights must be nonnegative".into()));
        }
        if self.horizon == 0 {
            return Err(Error::InvalidParameter("horizon must be at least 1".into()));
        }
        Ok(())
    }

    /// `λ̄ = λμ + (1−λ)μ̄`.
    pub fn lambda_bar(&self) -> f64 {
        lambda_bar(self.lambda, self.mu, self.mu_bar)
    }

    /// `λ̃ = λ/λ̄`, defined when `λ̄ > 0`.
    pub fn lambda_tilde(&self) -> Option<f64> {
        let lb = self.lambda_bar();
        (lb > 0.0).then(|| self.lambda / lb)
    }

    /// Prior weight `λ̄/λ` of the normalised cost, defined for `λ > 0`.
    pub fn prior_weight(&self) -> Option<f64> {
        (self.lambda > 0.0).then(|| self.lambda_bar() / self.lambda)
    }
}

pub fn lambda_bar(lambda: f64, mu: f64, mu_bar: f64) -> f64 {
    lambda * mu + (1.0 - lambda) * mu_bar
}

/// Which side of one the prior weight `λ̄/λ` falls on.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RatioCase {
    /// `(1−λ)μ̄ = λ(1−μ)`, weight exactly one.
    Unit,
    /// `(1−λ)μ̄ > λ(1−μ)`, weight above one.
    Above,
    /// `(1−λ)μ̄ < λ(1−μ)`, weight below one.
    Below,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WeightRatio {
    pub lambda_bar: f64,
    pub ratio: f64,
    /// Set for `μ, μ̄ > 0` with `μ ≠ μ̄`.
    pub case: Option<RatioCase>,
    /// `d(λ̄/λ)/dλ = −μ̄/λ²`.
    pub derivative: f64,
}

pub fn weight_ratio(lambda: f64, mu: f64, mu_bar: f64) -> Result<WeightRatio> {
    if !(lambda > 0.0 && lambda < 1.0) {
        return Err(Error::InvalidParameter(format!("lambda must lie in (0,1), got {lambda}")));
    }
    let lb = lambda_bar(lambda, mu, mu_bar);
    if lb == 0.0 {
        return Err(Error::InvalidParameter("lambda_bar is zero; the weight ratio is undefined".into()));
    }
    let case = (mu > 0.0 && mu_bar > 0.0 && mu != mu_bar).then(|| {
        let lhs = (1.0 - lambda) * mu_bar;
        let rhs = lambda * (1.0 - mu);
        if (lhs - rhs).abs() <= 1e-12 * lhs.abs().max(rhs.abs()).max(1.0) {
            RatioCase::Unit
        } else if lhs > rhs {
            RatioCase::Above
        } else {
            RatioCase::Below
        }
    });
    Ok(WeightRatio {
        lambda_bar: lb,
        ratio: lb / lambda,
        case,
        derivative: -mu_bar / (lambda * lambda),
    })
}

/// `dλ̃/dλ = μ̄/λ̄²`.
pub fn d_lambda_tilde(lambda: f64, mu: f64, mu_bar: f64) -> f64 {
    let lb = lambda_bar(lambda, mu, mu_bar);
    mu_bar / (lb * lb)
}

/// `d(λ̃²)/dλ = 2λμ̄/λ̄³`.
pub fn d_lambda_tilde_sq(lambda: f64, mu: f64, mu_bar: f64) -> f64 {
    let lb = lambda_bar(lambda, mu, mu_bar);
    2.0 * lambda * mu_bar / (lb * lb * lb)
}

pub fn stack(vs: &[Vector]) -> Vector {
    let len = vs.iter().map(|v| v.len()).sum();
    let mut out = Vector::zeros(len);
    let mut o = 0;
    for v in vs {
        out.rows_mut(o, v.len()).copy_from(v);
        o += v.len();
    }
    out
}

fn window_residual(ys: &[Vector], us: &[Vector], maps: &BatchMaps) -> Result<Vector> {
    let n_h = maps.horizon;
    if ys.len() != n_h + 1 || ys.iter().any(|y| y.len() != maps.p()) {
        return Err(Error::dims("window outputs", format!("{} vectors of length {}", n_h + 1, maps.p()), ys.len()));
    }
    let q = maps.observer.input_map.ncols().checked_div(n_h).unwrap_or(0);
    let mut r = &maps.observer.psi * stack(ys);
    if q > 0 {
        if us.len() != n_h || us.iter().any(|u| u.len() != q) {
            return Err(Error::dims("window inputs", format!("{n_h} vectors of length {q}"), us.len()));
        }
        r -= &maps.observer.input_map * stack(us);
    }
    Ok(r)
}

/// Minimiser of `weight‖x − x̄‖² + ‖Ψ y − Γ̄ u − Λ̄ x‖²`.
pub fn solve_with_prior_weight(ys: &[Vector], us: &[Vector], prior: &Vector, maps: &BatchMaps, weight: f64) -> Result<Vector> {
    if prior.len() != maps.n() {
        return Err(Error::dims("prior", maps.n(), prior.len()));
    }
    let r = window_residual(ys, us, maps)?;
    let lb = &maps.observer.observability;
    let s_bar = Mat::identity(maps.n(), maps.n()) * weight + maps.gram();
    let rhs = prior * weight + lb.transpose() * r;
    let x = linalg::spd_solve(&s_bar, &Mat::from_column_slice(rhs.len(), 1, rhs.as_slice()), "S̄ = wI + Λ̄ᵀΛ̄")?;
    Ok(x.column(0).into_owned())
}

/// Estimate of `x_{t−N}` from the window. `λ = 0` returns the prior.
pub fn solve_initial_state(ys: &[Vector], us: &[Vector], prior: &Vector, maps: &BatchMaps, config: &InitMheConfig) -> Result<Vector> {
    config.validate()?;
    match config.prior_weight() {
        None => {
            window_residual(ys, us, maps)?;
            Ok(prior.clone())
        }
        Some(w) => solve_with_prior_weight(ys, us, prior, maps, w),
    }
}

/// The same cost restricted to a box on `x_{t−N}`.
pub fn solve_initial_state_constrained(
    ys: &[Vector],
    us: &[Vector],
    prior: &Vector,
    maps: &BatchMaps,
    config: &InitMheConfig,
    bounds: &BoxSet,
) -> Result<Vector> {
    config.validate()?;
    let n = maps.n();
    if bounds.dim() != n {
        return Err(Error::dims("state bounds", n, bounds.dim()));
    }
    let Some(w) = config.prior_weight() else {
        return if bounds.contains_point(prior.as_slice(), 0.0) {
            Ok(prior.clone())
        } else {
            Err(Error::InvalidParameter("prior lies outside the state bounds".into()))
        };
    };
    let r = window_residual(ys, us, maps)?;
    let lb = &maps.observer.observability;
    let h = (Mat::identity(n, n) * w + maps.gram()) * 2.0;
    let g = -(prior * w + lb.transpose() * r) * 2.0;
    let mut a = Mat::zeros(2 * n, n);
    let mut b = Vector::zeros(2 * n);
    for i in 0..n {
        a[(2 * i, i)] = 1.0;
        b[2 * i] = bounds.upper[i];
        a[(2 * i + 1, i)] = -1.0;
        b[2 * i + 1] = -bounds.lower[i];
    }
    let sol = qpsolve::solve_default(&QpProblem::new(h, g, a, b)?)?.into_result()?;
    Ok(sol.z)
}

/// `x̄ = A x̂ + B u + L (y − C x̂)`.
pub fn prior_update(previous: &Vector, u: Option<&Vector>, y: &Vector, plant: &LinearPlant, observer: &ObserverGain) -> Vector {
    let mut x = plant.a() * previous + observer.l() * (y - plant.c() * previous);
    if let (Some(b), Some(u)) = (plant.b(), u) {
        x += b * u;
    }
    x
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorDynamics {
    /// Prior weight `λ̄/λ`.
    pub weight: f64,
    pub a_bar_l: Mat,
    pub s_bar: Mat,
    pub s_bar_inv: Mat,
    /// `n × (n + N n)`, acting on `w_{t−N−1..t−1}`.
    pub s1: Mat,
    /// `n × (p + (N+1) p)`, acting on `v_{t−N−1..t}`.
    pub s2: Mat,
}

impl ErrorDynamics {
    pub fn step(&self, e_prev: &Vector, w_stack: &Vector, v_stack: &Vector) -> Result<Vector> {
        if w_stack.len() != self.s1.ncols() || v_stack.len() != self.s2.ncols() || e_prev.len() != self.a_bar_l.nrows() {
            return Err(Error::dims("error recursion", format!("w {}, v {}", self.s1.ncols(), self.s2.ncols()), format!("w {}, v {}", w_stack.len(), v_stack.len())));
        }
        Ok(&self.a_bar_l * e_prev + &self.s_bar_inv * (&self.s1 * w_stack + &self.s2 * v_stack))
    }
}

pub fn error_dynamics(maps: &BatchMaps, config: &InitMheConfig, observer: &ObserverGain) -> Result<ErrorDynamics> {
    if !(config.lambda > 0.0 && config.lambda < 1.0) || config.lambda_bar() <= 0.0 {
        return Err(Error::InvalidParameter("error dynamics need lambda in (0,1) and lambda_bar > 0".into()));
    }
    let n = maps.n();
    let p = maps.p();
    let n_h = maps.horizon;
    let w = config.lambda_bar() / config.lambda;
    let s_bar = Mat::identity(n, n) * w + maps.gram();
    let s_bar_inv = linalg::spd_inverse(&s_bar, "S̄ = (λ̄/λ)I + Λ̄ᵀΛ̄")?;
    let lbt = maps.observer.observability.transpose();

    let mut s1 = Mat::zeros(n, n + n_h * n);
    s1.view_mut((0, 0), (n, n)).copy_from(&(Mat::identity(n, n) * w));
    s1.view_mut((0, n), (n, n_h * n)).copy_from(&(-(&lbt * &maps.observer.noise_map)));
    let mut s2 = Mat::zeros(n, p + (n_h + 1) * p);
    s2.view_mut((0, 0), (n, p)).copy_from(&(observer.l() * -w));
    s2.view_mut((0, p), (n, (n_h + 1) * p)).copy_from(&(-(&lbt * &maps.observer.psi)));

    Ok(ErrorDynamics {
        weight: w,
        a_bar_l: &s_bar_inv * observer.a_l() * w,
        s_bar,
        s_bar_inv,
        s1,
        s2,
    })
}

/// Rolling estimator: one estimate of `x_{t−N}` per step once `N + 1`
/// outputs are available.
#[derive(Debug, Clone)]
pub struct InitMheEstimator {
    plant: LinearPlant,
    observer: ObserverGain,
    config: InitMheConfig,
    maps: BatchMaps,
    initial_prior: Vector,
    ys: Vec<Vector>,
    us: Vec<Vector>,
    last: Option<Vector>,
    time: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitEstimate {
    /// Current time `t`.
    pub time: usize,
    pub prior: Vector,
    /// Estimate of `x_{t−N}`.
    pub window_start: Vector,
    /// Observer-loop propagation of the estimate to time `t`.
    pub current: Vector,
}

impl InitMheEstimator {
    pub fn new(plant: LinearPlant, observer: ObserverGain, config: InitMheConfig, initial_prior: Vector) -> Result<Self> {
        config.validate()?;
        let maps = BatchMaps::new(&plant, &observer, config.horizon)?;
        if initial_prior.len() != plant.n() {
            return Err(Error::dims("initial prior", plant.n(), initial_prior.len()));
        }
        Ok(Self {
            plant,
            observer,
            config,
            maps,
            initial_prior,
            ys: Vec::new(),
            us: Vec::new(),
            last: None,
            time: 0,
        })
    }

    pub fn maps(&self) -> &BatchMaps {
        &self.maps
    }

    /// Consumes `y_t` and the input `u_t` applied after it.
    pub fn step(&mut self, y: &Vector, u: Option<&Vector>) -> Result<Option<InitEstimate>> {
        let q = self.plant.q();
        let u = match (q, u) {
            (0, _) => Vector::zeros(0),
            (_, Some(u)) if u.len() == q => u.clone(),
            _ => return Err(Error::dims("input", q, u.map_or(0, |u| u.len()))),
        };
        if y.len() != self.plant.p() {
            return Err(Error::dims("measurement", self.plant.p(), y.len()));
        }
        let n_h = self.config.horizon;
        self.ys.push(y.clone());
        self.us.push(u);
        // Keep y_{t−N−1..t} and u_{t−N−1..t}.
        if self.ys.len() > n_h + 2 {
            self.ys.remove(0);
            self.us.remove(0);
        }
        let t = self.time;
        self.time += 1;
        if t < n_h {
            return Ok(None);
        }
        let off = self.ys.len() - (n_h + 1);
        let prior = match &self.last {
            None => self.initial_prior.clone(),
            Some(prev) => {
                let u_prev = (q > 0).then(|| &self.us[0]);
                prior_update(prev, u_prev, &self.ys[0], &self.plant, &self.observer)
            }
        };
        let ys = &self.ys[off..];
        let us = &self.us[off..off + n_h];
        let est = solve_initial_state(ys, if q > 0 { us } else { &[] }, &prior, &self.maps, &self.config)?;

        let mut cur = est.clone();
        for (i, yi) in ys.iter().take(n_h).enumerate() {
            cur = self.observer.a_l() * &cur + self.observer.l() * yi;
            if let Some(b) = self.plant.b() {
                cur += b * &us[i];
            }
        }
        self.last = Some(est.clone());
        Ok(Some(InitEstimate {
            time: t,
            prior,
            window_start: est,
            current: cur,
        }))
    }
}

/// Euclidean norm of the farthest corner of a box.
pub fn box_norm_bound(b: &BoxSet) -> f64 {
    b.lower.iter().zip(&b.upper).map(|(l, u)| l.abs().max(u.abs()).powi(2)).sum::<f64>().sqrt()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundParams {
    pub a: f64,
    pub b: f64,
    pub b0: f64,
    pub a_l: f64,
    pub theta1: f64,
    pub theta2: f64,
    pub l: f64,
    pub z_w: f64,
    pub z_v: f64,
    pub z_bar: f64,
    pub theta_bar: f64,
    pub eta: f64,
    pub n: usize,
    pub lambda_tilde: f64,
}

impl BoundParams {
    /// `a_l √n / (1 + λ̃ η)`; below one implies `a < 1`.
    pub fn condition_a_value(&self) -> f64 {
        self.a_l * (self.n as f64).sqrt() / (1.0 + self.lambda_tilde * self.eta)
    }
}

/// `ζ_t = a ζ_{t−1} + b`, `ζ_0 = b₀` with its limit when `a < 1`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineBound {
    pub zeta: Vec<f64>,
    pub zeta_inf: Option<f64>,
    /// `ζ_t / b`.
    pub zeta_bar: Vec<f64>,
    pub zeta_bar_inf: Option<f64>,
    pub diverges: bool,
}

pub fn affine_bound_sequence(a: f64, b: f64, b0: f64, steps: usize) -> AffineBound {
    let mut zeta = Vec::with_capacity(steps + 1);
    zeta.push(b0);
    for k in 0..steps {
        zeta.push(a * zeta[k] + b);
    }
    let converges = a < 1.0;
    AffineBound {
        zeta_bar: zeta.iter().map(|z| z / b).collect(),
        zeta,
        zeta_inf: converges.then(|| b / (1.0 - a)),
        zeta_bar_inf: converges.then(|| 1.0 / (1.0 - a)),
        diverges: !converges,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoundSequence {
    pub params: BoundParams,
    pub sequence: AffineBound,
    pub condition_a: bool,
}

/// Norms are Frobenius for matrices, Euclidean for vectors.
#[allow(clippy::too_many_arguments)]
pub fn bound_sequence(
    maps: &BatchMaps,
    observer: &ObserverGain,
    config: &InitMheConfig,
    z_w: f64,
    z_v: f64,
    x0_norm: f64,
    xbar0_norm: f64,
    steps: usize,
) -> Result<BoundSequence> {
    let dynamics = error_dynamics(maps, config, observer)?;
    let n = maps.n();
    let n_h = maps.horizon as f64;
    let lbt = maps.observer.observability.transpose();
    let gram = maps.gram();
    let a_l = observer.a_l().norm();
    let theta1 = (&lbt * &maps.observer.noise_map).norm();
    let theta2 = (&lbt * &maps.observer.psi).norm();
    let l = observer.l().norm();
    let z_bar = z_w + l * z_v;
    let theta_bar = theta1 * n_h.sqrt() * z_w + theta2 * (n_h + 1.0).sqrt() * z_v;
    let weighted = (&dynamics.s_bar_inv * dynamics.weight).norm();
    let s_inv = dynamics.s_bar_inv.norm();
    let a = a_l * weighted;
    let b = weighted * z_bar + s_inv * theta_bar;
    let b0 = (Mat::identity(n, n) - &dynamics.s_bar_inv * &gram).norm() * x0_norm + weighted * xbar0_norm + s_inv * theta_bar;
    let params = BoundParams {
        a,
        b,
        b0,
        a_l,
        theta1,
        theta2,
        l,
        z_w,
        z_v,
        z_bar,
        theta_bar,
        eta: linalg::min_eigenvalue(&gram),
        n,
        lambda_tilde: config.lambda_tilde().unwrap_or(0.0),
    };
    let condition_a = params.condition_a_value() < 1.0;
    Ok(BoundSequence {
        sequence: affine_bound_sequence(a, b, b0, steps),
        params,
        condition_a,
    })
}

/// `Q̄_L(λ) = λ̃(P_L G + G P_L) + λ̃² G P_L G + Q_L` with `G = Λ̄ᵀΛ̄`.
pub fn decay_weight(p_l: &Mat, gram: &Mat, q_l: &Mat, lambda_tilde: f64) -> Mat {
    let pg = p_l * gram;
    linalg::symmetrize(&((&pg + pg.transpose()) * lambda_tilde + gram * p_l * gram * (lambda_tilde * lambda_tilde) + q_l))
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayRow {
    pub lambda: f64,
    pub lambda_tilde: f64,
    pub rho_a_bar: f64,
    pub min_eig_q_bar: f64,
    /// `λ_min(Q̄_L(λ_i) − Q̄_L(λ_{i−1}))`; `None` on the first grid point.
    pub min_eig_diff: Option<f64>,
    /// Central-difference vs closed form, relative error.
    pub d_tilde_rel_err: f64,
    pub d_tilde_sq_rel_err: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DecayReport {
    pub rows: Vec<DecayRow>,
    pub pass: bool,
}

pub const DERIVATIVE_STEP: f64 = 1e-6;

pub fn central_difference<F: Fn(f64) -> f64>(f: F, x: f64, h: f64) -> f64 {
    (f(x + h) - f(x - h)) / (2.0 * h)
}

fn rel_err(approx: f64, exact: f64) -> f64 {
    (approx - exact).abs() / exact.abs().max(f64::MIN_POSITIVE)
}

/// PASS iff every adjacent `Q̄_L` difference is positive definite.
pub fn decay_monotonicity_report(
    maps: &BatchMaps,
    observer: &ObserverGain,
    mu: f64,
    mu_bar: f64,
    lambdas: &[f64],
    q_l: Option<&Mat>,
) -> Result<DecayReport> {
    let n = maps.n();
    let q_l = q_l.cloned().unwrap_or_else(|| Mat::identity(n, n));
    let p_l = linalg::solve_discrete_lyapunov(observer.a_l(), &q_l)?;
    let gram = maps.gram();
    let mut sorted = lambdas.to_vec();
    sorted.sort_by(f64::total_cmp);

    let mut rows: Vec<DecayRow> = Vec::with_capacity(sorted.len());
    let mut prev: Option<Mat> = None;
    for &lam in &sorted {
        let cfg = InitMheConfig {
            horizon: maps.horizon,
            lambda: lam,
            mu,
            mu_bar,
        };
        let lt = cfg
            .lambda_tilde()
            .ok_or_else(|| Error::InvalidParameter("lambda_bar must be positive on the grid".into()))?;
        let dyn_ = error_dynamics(maps, &cfg, observer)?;
        let q_bar = decay_weight(&p_l, &gram, &q_l, lt);
        let tilde = |x: f64| x / lambda_bar(x, mu, mu_bar);
        let d1 = central_difference(tilde, lam, DERIVATIVE_STEP);
        let d2 = central_difference(|x| tilde(x).powi(2), lam, DERIVATIVE_STEP);
        rows.push(DecayRow {
            lambda: lam,
            lambda_tilde: lt,
            rho_a_bar: linalg::spectral_radius(&dyn_.a_bar_l)?,
            min_eig_q_bar: linalg::min_eigenvalue(&q_bar),
            min_eig_diff: prev.as_ref().map(|p| linalg::min_eigenvalue(&(&q_bar - p))),
            d_tilde_rel_err: rel_err(d1, d_lambda_tilde(lam, mu, mu_bar)),
            d_tilde_sq_rel_err: rel_err(d2, d_lambda_tilde_sq(lam, mu, mu_bar)),
        });
        prev = Some(q_bar);
    }
    let pass = rows.iter().all(|r| r.min_eig_diff.is_none_or(|d| d > 0.0));
    Ok(DecayReport { rows, pass })
}

/// One row of the λ-analysis CSV.
#[derive(Debug, Clone, PartialEq)]
pub struct LambdaAnalysisRow {
    pub lambda: f64,
    pub rho_a_bar: f64,
    pub a: f64,
    pub b: f64,
    pub zeta_inf: Option<f64>,
    pub zeta_bar_inf: Option<f64>,
    pub condition_a: bool,
    pub min_eig_q_bar_diff: Option<f64>,
}

impl LambdaAnalysisRow {
    pub const CSV_HEADER: &'static str = "lambda,rho_AbarL,a,b,zeta_inf,zeta_bar_inf,condition_a_satisfied,min_eig_QbarL_diff";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.lambda,
            self.rho_a_bar,
            self.a,
            self.b,
            opt(self.zeta_inf),
            opt(self.zeta_bar_inf),
            self.condition_a,
            opt(self.min_eig_q_bar_diff)
        )
    }
}

pub struct LambdaAnalysisInputs<'a> {
    pub maps: &'a BatchMaps,
    pub observer: &'a ObserverGain,
    pub mu: f64,
    pub mu_bar: f64,
    pub z_w: f64,
    pub z_v: f64,
    pub x0_norm: f64,
    pub xbar0_norm: f64,
}

pub fn lambda_analysis(inputs: &LambdaAnalysisInputs<'_>, lambdas: &[f64]) -> Result<Vec<LambdaAnalysisRow>> {
    let decay = decay_monotonicity_report(inputs.maps, inputs.observer, inputs.mu, inputs.mu_bar, lambdas, None)?;
    decay
        .rows
        .iter()
        .map(|r| {
            let cfg = InitMheConfig {
                horizon: inputs.maps.horizon,
                lambda: r.lambda,
                mu: inputs.mu,
                mu_bar: inputs.mu_bar,
            };
            let bs = bound_sequence(inputs.maps, inputs.observer, &cfg, inputs.z_w, inputs.z_v, inputs.x0_norm, inputs.xbar0_norm, 0)?;
            Ok(LambdaAnalysisRow {
                lambda: r.lambda,
                rho_a_bar: r.rho_a_bar,
                a: bs.params.a,
                b: bs.params.b,
                zeta_inf: bs.sequence.zeta_inf,
                zeta_bar_inf: bs.sequence.zeta_bar_inf,
                condition_a: bs.condition_a,
                min_eig_q_bar_diff: r.min_eig_diff,
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

    #[test]
    fn scalar_stack() {
        let (obs, gamma, phi) = build_open_loop_maps(&m(1, 1, &[2.0]), None, &m(1, 1, &[1.0]), 1).unwrap();
        assert_eq!(obs, m(2, 1, &[1.0, 2.0]));
        assert_eq!(gamma.ncols(), 0);
        assert_eq!(phi, m(2, 1, &[0.0, 1.0]));
    }

    #[test]
    fn injection_structure() {
        let a = m(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        let c = m(1, 2, &[1.0, 0.0]);
        let l = m(2, 1, &[0.6, 0.2]);
        let om = build_observer_maps(&a, None, &c, &l, 3).unwrap();
        assert!(om.output_injection.row(0).iter().all(|v| *v == 0.0));
        for i in 0..4 {
            for j in i..4 {
                assert_eq!(om.output_injection[(i, j)], 0.0);
            }
        }
        assert_eq!(&om.psi + &om.output_injection, Mat::identity(4, 4));
        // Block (1,0) = C L.
        assert!((om.output_injection[(1, 0)] - 0.6).abs() < 1e-15);
    }

    #[test]
    fn weight_ratio_cases() {
        let w = weight_ratio(0.5, 0.15, 0.1).unwrap();
        assert!((w.lambda_bar - 0.125).abs() < 1e-15);
        assert!((w.ratio - 0.25).abs() < 1e-15);
        assert_eq!(w.case, Some(RatioCase::Below));
        let eq = weight_ratio(0.4, 0.3, 0.3).unwrap();
        assert!((eq.ratio - 0.3 / 0.4).abs() < 1e-15);
        assert_eq!(eq.case, None);
        // (1−λ)μ̄ = λ(1−μ): λ = 0.5, μ = 0.5, μ̄ = 0.5 is degenerate; use μ = 0.2, μ̄ = 0.8.
        assert_eq!(weight_ratio(0.5, 0.2, 0.8).unwrap().case, Some(RatioCase::Unit));
        assert_eq!(weight_ratio(0.5, 2.0, 0.1).unwrap().case, Some(RatioCase::Above));
        assert!(weight_ratio(0.5, 0.0, 0.0).is_err());
        assert!(weight_ratio(0.0, 0.1, 0.1).is_err());
    }

    #[test]
    fn ratio_derivative_by_differences() {
        let f = |l: f64| weight_ratio(l, 0.15, 0.1).unwrap().ratio;
        let fd = central_difference(f, 0.5, 1e-6);
        let exact = weight_ratio(0.5, 0.15, 0.1).unwrap().derivative;
        assert!(rel_err(fd, exact) < 1e-6);
    }

    #[test]
    fn lambda_zero_returns_prior() {
        let plant = LinearPlant::with_direct_noise(m(1, 1, &[0.9]), None, m(1, 1, &[1.0])).unwrap();
        let obs = ObserverGain::for_plant(&plant, m(1, 1, &[0.4])).unwrap();
        let maps = BatchMaps::new(&plant, &obs, 2).unwrap();
        let cfg = InitMheConfig {
            horizon: 2,
            lambda: 0.0,
            mu: 0.15,
            mu_bar: 0.1,
        };
        let ys = vec![Vector::from_element(1, 3.0); 3];
        let prior = Vector::from_element(1, -7.0);
        assert_eq!(solve_initial_state(&ys, &[], &prior, &maps, &cfg).unwrap(), prior);
    }

    #[test]
    fn prior_update_degenerate_gain() {
        let plant = LinearPlant::with_direct_noise(m(2, 2, &[0.5, 1.0, 0.0, 0.5]), Some(m(2, 1, &[0.0, 1.0])), m(1, 2, &[1.0, 0.0])).unwrap();
        let zero = ObserverGain::for_plant(&plant, Mat::zeros(2, 1)).unwrap();
        let x = Vector::from_vec(vec![1.0, 2.0]);
        let u = Vector::from_element(1, 0.5);
        let out = prior_update(&x, Some(&u), &Vector::from_element(1, 9.0), &plant, &zero);
        assert_eq!(out, plant.a() * &x + plant.b().unwrap() * &u);
    }

    #[test]
    fn affine_fixed_point() {
        let s = affine_bound_sequence(0.5, 1.0, 0.0, 60);
        assert_eq!(s.zeta_inf, Some(2.0));
        assert_eq!(s.zeta_bar_inf, Some(2.0));
        assert!((s.zeta[60] - 2.0).abs() < 1e-12);
        assert!(affine_bound_sequence(1.2, 1.0, 0.0, 3).diverges);
    }

    #[test]
    fn box_norm() {
        assert!((box_norm_bound(&BoxSet::symmetric(4, 0.01)) - 0.02).abs() < 1e-15);
    }

    #[test]
    fn rejects_short_horizon_and_general_noise_map() {
        let plant = LinearPlant::with_direct_noise(m(2, 2, &[1.0, 1.0, 0.0, 1.0]), None, m(1, 2, &[1.0, 0.0])).unwrap();
        let obs = ObserverGain::for_plant(&plant, m(2, 1, &[1.0, 0.3])).unwrap();
        assert!(BatchMaps::new(&plant, &obs, 1).is_err());
        let g2 = LinearPlant::new(plant.a().clone(), Mat::identity(2, 2) * 2.0, None, plant.c().clone()).unwrap();
        assert!(BatchMaps::new(&g2, &obs, 3).is_err());
    }
}
