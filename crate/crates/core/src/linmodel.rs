//! Discrete LTI plants, Luenberger pre-estimators and the observer-augmented model.
//!
//! The plant is `x⁺ = A x + B u + G w`, `y = C x + ν`. Plants whose noise enters
//! the state directly use `G = I`. Given a Schur-stabilising gain `L`, the
//! observer `x̃⁺ = A x̃ + L (y − C x̃)` and its error `e = x − x̃` stack into a
//! 2n-dimensional model driven by `w̄ = [w, ν]`:
//!
//! ```text
//! A_e = [A  LC ]   G_e = [0  L ]   C_e = [C  C]
//!       [0  A_L]         [G −L ]
//! ```

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearPlant {
    a: Mat,
    g: Mat,
    b: Option<Mat>,
    c: Mat,
}

impl LinearPlant {
    pub fn new(a: Mat, g: Mat, b: Option<Mat>, c: Mat) -> Result<Self> {
        let n = a.nrows();
        if n == 0 || !a.is_square() {
            return Err(Error::dims("plant A", "non-empty square", format!("{:?}", a.shape())));
        }
        if g.nrows() != n || g.ncols() == 0 {
            return Err(Error::dims("plant G", format!("{n} x m"), format!("{:?}", g.shape())));
        }
        if c.ncols() != n || c.nrows() == 0 {
            return Err(Error::dims("plant C", format!("p x {n}"), format!("{:?}", c.shape())));
        }
        if let Some(b) = &b {
            if b.nrows() != n || b.ncols() == 0 {
                return Err(Error::dims("plant B", format!("{n} x q"), format!("{:?}", b.shape())));
            }
        }
        Ok(Self { a, g, b, c })
    }

    /// Plant with the noise entering every state directly (`G = I`).
    pub fn with_direct_noise(a: Mat, b: Option<Mat>, c: Mat) -> Result<Self> {
        let n = a.nrows();
        Self::new(a, Mat::identity(n, n), b, c)
    }

    pub fn a(&self) -> &Mat {
        &self.a
    }
    pub fn g(&self) -> &Mat {
        &self.g
    }
    pub fn b(&self) -> Option<&Mat> {
        self.b.as_ref()
    }
    pub fn c(&self) -> &Mat {
        &self.c
    }
    pub fn n(&self) -> usize {
        self.a.nrows()
    }
    pub fn m(&self) -> usize {
        self.g.ncols()
    }
    pub fn p(&self) -> usize {
        self.c.nrows()
    }
    /// Number of control inputs (0 when there is no control channel).
    pub fn q(&self) -> usize {
        self.b.as_ref().map_or(0, |b| b.ncols())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoiseWeights {
    pub q: Mat,
    pub r: Mat,
}

impl NoiseWeights {
    pub fn new(q: Mat, r: Mat) -> Result<Self> {
        for (m, ctx) in [(&q, "process weight Q"), (&r, "measurement weight R")] {
            if !linalg::is_symmetric(m, 1e-10) {
                return Err(Error::NotPositiveDefinite { context: ctx });
            }
            if m.nrows() == 0 || linalg::min_eigenvalue(m) <= 0.0 {
                return Err(Error::NotPositiveDefinite { context: ctx });
            }
        }
        Ok(Self { q, r })
    }
}

/// Luenberger gain with its cached closed-loop matrix `A_L = A − L C`.
#[derive(Debug, Clone, PartialEq)]
pub struct ObserverGain {
    l: Mat,
    a_l: Mat,
    spectral_radius: f64,
}

impl ObserverGain {
    pub fn new(a: &Mat, c: &Mat, l: Mat) -> Result<Self> {
        let n = a.nrows();
        if l.shape() != (n, c.nrows()) || c.ncols() != n {
            return Err(Error::dims("observer gain L", format!("{n}x{}", c.nrows()), format!("{:?}", l.shape())));
        }
        let a_l = a - &l * c;
        let (spectral_radius, stable) = check_schur(&a_l)?;
        if !stable {
            return Err(Error::NotSchur { spectral_radius });
        }
        Ok(Self { l, a_l, spectral_radius })
    }

    pub fn for_plant(plant: &LinearPlant, l: Mat) -> Result<Self> {
        Self::new(plant.a(), plant.c(), l)
    }

    pub fn l(&self) -> &Mat {
        &self.l
    }
    pub fn a_l(&self) -> &Mat {
        &self.a_l
    }
    pub fn spectral_radius(&self) -> f64 {
        self.spectral_radius
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPlant {
    pub a_e: Mat,
    pub g_e: Mat,
    pub c_e: Mat,
    n: usize,
    m: usize,
    p: usize,
}

impl AugmentedPlant {
    /// Plant-state dimension n (the augmented state has 2n entries).
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn m(&self) -> usize {
        self.m
    }
    pub fn p(&self) -> usize {
        self.p
    }
    pub fn state_dim(&self) -> usize {
        2 * self.n
    }
    pub fn noise_dim(&self) -> usize {
        self.m + self.p
    }
}

fn stacked_power_rank(a: &Mat, c: &Mat) -> usize {
    let n = a.nrows();
    let p = c.nrows();
    let mut obs = Mat::zeros(n * p, n);
    let mut blk = c.clone();
    for i in 0..n {
        obs.view_mut((i * p, 0), (p, n)).copy_from(&blk);
        blk = &blk * a;
    }
    linalg::numerical_rank(&obs)
}

/// Rank test on `[C; CA; …; CA^{n−1}]`.
pub fn check_observable(a: &Mat, c: &Mat) -> Result<bool> {
    if !a.is_square() || c.ncols() != a.nrows() {
        return Err(Error::dims("check_observable", format!("C with {} columns", a.nrows()), format!("{:?}", c.shape())));
    }
    Ok(stacked_power_rank(a, c) == a.nrows())
}

/// Rank test on `[B, AB, …, A^{n−1}B]`.
pub fn check_controllable(a: &Mat, bc: &Mat) -> Result<bool> {
    if !a.is_square() || bc.nrows() != a.nrows() {
        return Err(Error::dims("check_controllable", format!("B with {} rows", a.nrows()), format!("{:?}", bc.shape())));
    }
    Ok(stacked_power_rank(&a.transpose(), &bc.transpose()) == a.nrows())
}

/// Returns `(ρ(A), ρ(A) < 1)`.
pub fn check_schur(a: &Mat) -> Result<(f64, bool)> {
    let rho = linalg::spectral_radius(a)?;
    Ok((rho, rho < 1.0))
}

pub fn augment(plant: &LinearPlant, obs: &ObserverGain) -> Result<AugmentedPlant> {
    let (n, m, p) = (plant.n(), plant.m(), plant.p());
    if obs.l().shape() != (n, p) {
        return Err(Error::dims("augment", format!("L {n}x{p}"), format!("{:?}", obs.l().shape())));
    }
    let l = obs.l();
    let mut a_e = Mat::zeros(2 * n, 2 * n);
    a_e.view_mut((0, 0), (n, n)).copy_from(plant.a());
    a_e.view_mut((0, n), (n, n)).copy_from(&(l * plant.c()));
    a_e.view_mut((n, n), (n, n)).copy_from(obs.a_l());

    let mut g_e = Mat::zeros(2 * n, m + p);
    g_e.view_mut((0, m), (n, p)).copy_from(l);
    g_e.view_mut((n, 0), (n, m)).copy_from(plant.g());
    g_e.view_mut((n, m), (n, p)).copy_from(&(-l));

    let mut c_e = Mat::zeros(p, 2 * n);
    c_e.view_mut((0, 0), (p, n)).copy_from(plant.c());
    c_e.view_mut((0, n), (p, n)).copy_from(plant.c());

    Ok(AugmentedPlant { a_e, g_e, c_e, n, m, p })
}

/// Observability rank of `(A_e, C_e)`.
///
/// In coordinates `(x̃ + e, e)` the pair becomes `(diag(A, A_L), [C 0])`, so
/// the rank equals that of `(A, C)` and never exceeds `n`. Computing it there
/// avoids spurious rank from roundoff in high powers of `A_e`.
pub fn augmented_observability_rank(aug: &AugmentedPlant) -> usize {
    let n = aug.n();
    let a = aug.a_e.view((0, 0), (n, n)).into_owned();
    let c = aug.c_e.view((0, 0), (aug.p(), n)).into_owned();
    stacked_power_rank(&a, &c)
}

/// Rank test on `(A_e, C_e)`.
///
/// The subspace `{[v, −v]}` is `A_e`-invariant (it maps to `[A_L v, −A_L v]`)
/// and lies in the kernel of `C_e`, so the augmented pair is never observable
/// for `n ≥ 1`. It is detectable whenever `A_L` is Schur, which is what the
/// Riccati recursion needs.
pub fn check_augmented_observability(aug: &AugmentedPlant) -> Result<bool> {
    Ok(augmented_observability_rank(aug) == aug.state_dim())
}

/// Real block form with the requested spectrum: 1×1 blocks for real targets,
/// rotation-scaling 2×2 blocks for conjugate pairs, consecutive blocks chained
/// by a unit superdiagonal entry so the result is non-derogatory.
fn target_matrix(targets: &[Complex64]) -> Result<Mat> {
    const CONJ_TOL: f64 = 1e-9;
    let n = targets.len();
    let mut reals = Vec::new();
    let mut upper = Vec::new();
    let mut lower = Vec::new();
    for t in targets {
        if t.norm() >= 1.0 {
            return Err(Error::InvalidParameter(format!("target eigenvalue {t} is not inside the unit circle")));
        }
        if t.im.abs() <= CONJ_TOL {
            reals.push(t.re);
        } else if t.im > 0.0 {
            upper.push(*t);
        } else {
            lower.push(*t);
        }
    }
    if upper.len() != lower.len() {
        return Err(Error::InvalidParameter("target spectrum is not closed under conjugation".into()));
    }
    let mut unused = lower.clone();
    for u in &upper {
        let pos = unused
            .iter()
            .position(|l| (l.conj() - u).norm() <= CONJ_TOL)
            .ok_or_else(|| Error::InvalidParameter("target spectrum is not closed under conjugation".into()))?;
        unused.remove(pos);
    }

    let mut m = Mat::zeros(n, n);
    let mut k = 0;
    let mut prev_end: Option<usize> = None;
    let link = |m: &mut Mat, start: usize, prev_end: &mut Option<usize>, end: usize| {
        if let Some(pe) = *prev_end {
            m[(pe, start)] = 1.0;
        }
        *prev_end = Some(end);
    };
    for r in &reals {
        m[(k, k)] = *r;
        link(&mut m, k, &mut prev_end, k);
        k += 1;
    }
    for u in &upper {
        m[(k, k)] = u.re;
        m[(k + 1, k + 1)] = u.re;
        m[(k, k + 1)] = u.im;
        m[(k + 1, k)] = -u.im;
        link(&mut m, k, &mut prev_end, k + 1);
        k += 2;
    }
    Ok(m)
}

fn spectrum_error(achieved: &[Complex64], targets: &[Complex64]) -> f64 {
    // smallest tolerance at which the multisets match, searched on a log grid
    let mut tol = 1e-14;
    while tol < 10.0 {
        if linalg::spectra_match(achieved, targets, tol) {
            return tol;
        }
        tol *= 2.0;
    }
    f64::INFINITY
}

/// Observer pole placement through a Sylvester equation.
///
/// Working on the dual pair `(Aᵀ, Cᵀ)`: pick `F` with the target spectrum and a
/// parameter matrix `H`, solve `Aᵀ X − X F = Cᵀ H`, and set `Lᵀ = H X⁻¹`, so
/// that `Aᵀ − Cᵀ Lᵀ = X F X⁻¹`. Several deterministic `H` candidates are tried
/// and the one reproducing the targets most accurately is kept.
pub fn place_poles(a: &Mat, c: &Mat, targets: &[Complex64]) -> Result<ObserverGain> {
    const MATCH_TOL: f64 = 1e-6;
    let n = a.nrows();
    let p = c.nrows();
    if targets.len() != n {
        return Err(Error::dims("place_poles targets", n, targets.len()));
    }
    if !check_observable(a, c)? {
        return Err(Error::Unobservable);
    }
    let f = target_matrix(targets)?;
    let at = a.transpose();
    let ct = c.transpose();

    let mut state = 0x9e37_79b9_7f4a_7c15_u64;
    let mut next = move || {
        // splitmix64
        state = state.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^= z >> 31;
        (z >> 11) as f64 / (1u64 << 53) as f64 * 2.0 - 1.0
    };

    let mut best: Option<(f64, Mat, Vec<Complex64>)> = None;
    for attempt in 0..24 {
        let h = if attempt == 0 {
            Mat::from_element(p, n, 1.0)
        } else {
            Mat::from_fn(p, n, |_, _| next())
        };
        let Ok(x) = linalg::solve_sylvester(&at, &f, &(&ct * &h)) else {
            continue;
        };
        let Some(x_inv) = x.clone().try_inverse() else {
            continue;
        };
        let l = (&h * x_inv).transpose();
        if l.iter().any(|v| !v.is_finite()) {
            continue;
        }
        let achieved = linalg::eigenvalues(&(a - &l * c))?;
        let err = spectrum_error(&achieved, targets);
        if best.as_ref().is_none_or(|(e, _, _)| err < *e) {
            best = Some((err, l, achieved));
        }
        if err <= 1e-12 {
            break;
        }
    }
    match best {
        Some((err, l, _)) if err <= MATCH_TOL => ObserverGain::new(a, c, l),
        Some((_, _, achieved)) => Err(Error::PlacementFailed { achieved }),
        None => Err(Error::PlacementFailed { achieved: Vec::new() }),
    }
}

/// JSON model document: row-major nested arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    #[serde(rename = "G", default, skip_serializing_if = "Option::is_none")]
    pub g: Option<Vec<Vec<f64>>>,
    #[serde(rename = "B", default, skip_serializing_if = "Option::is_none")]
    pub b: Option<Vec<Vec<f64>>>,
    #[serde(rename = "C")]
    pub c: Vec<Vec<f64>>,
    #[serde(rename = "Q", default, skip_serializing_if = "Option::is_none")]
    pub q: Option<Vec<Vec<f64>>>,
    #[serde(rename = "R", default, skip_serializing_if = "Option::is_none")]
    pub r: Option<Vec<Vec<f64>>>,
    #[serde(rename = "L", default, skip_serializing_if = "Option::is_none")]
    pub l: Option<Vec<Vec<f64>>>,
}

impl ModelDocument {
    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_parts(plant: &LinearPlant, weights: Option<&NoiseWeights>, obs: Option<&ObserverGain>) -> Self {
        Self {
            a: linalg::mat_to_rows(plant.a()),
            g: Some(linalg::mat_to_rows(plant.g())),
            b: plant.b().map(linalg::mat_to_rows),
            c: linalg::mat_to_rows(plant.c()),
            q: weights.map(|w| linalg::mat_to_rows(&w.q)),
            r: weights.map(|w| linalg::mat_to_rows(&w.r)),
            l: obs.map(|o| linalg::mat_to_rows(o.l())),
        }
    }

    /// Missing `G` defaults to the identity.
    pub fn plant(&self) -> Result<LinearPlant> {
        let a = linalg::mat_from_rows(&self.a)?;
        let n = a.nrows();
        let g = match &self.g {
            Some(g) => linalg::mat_from_rows(g)?,
            None => Mat::identity(n, n),
        };
        let b = self.b.as_ref().map(|b| linalg::mat_from_rows(b)).transpose()?;
        LinearPlant::new(a, g, b, linalg::mat_from_rows(&self.c)?)
    }

    pub fn weights(&self) -> Result<Option<NoiseWeights>> {
        match (&self.q, &self.r) {
            (Some(q), Some(r)) => Ok(Some(NoiseWeights::new(linalg::mat_from_rows(q)?, linalg::mat_from_rows(r)?)?)),
            (None, None) => Ok(None),
            _ => Err(Error::InvalidParameter("Q and R must be given together".into())),
        }
    }

    pub fn observer(&self, plant: &LinearPlant) -> Result<Option<ObserverGain>> {
        self.l
            .as_ref()
            .map(|l| ObserverGain::for_plant(plant, linalg::mat_from_rows(l)?))
            .transpose()
    }
}
