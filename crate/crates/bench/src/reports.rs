use mmhe_core::linalg::{self, Mat};
use mmhe_core::mhe_init::{box_norm_bound, decay_monotonicity_report, lambda_analysis, BatchMaps, LambdaAnalysisInputs, LambdaAnalysisRow};
use mmhe_core::riccati::{phi_monotonicity_report, MonotonicityInputs, MonotonicityMode, MonotonicityReport};
use mmhe_core::setops::{disturbance_box, rpi_box_outer, RpiBox};

use crate::experiment::{EstimatorSpec, ExperimentSpec};
use crate::{BenchError, Result};

pub const DEFAULT_GRID: [f64; 9] = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9];
pub const RICCATI_STEPS: usize = 50;
pub const RPI_TOL: f64 = 1e-9;

/// `Φ_k(λ)` monotonicity with `Φ_0 = 10 I`. Weights come from an augmented
/// spec; other specs fall back to `Q = I`, `R = 0.5 I`, `M = 10 I`.
pub fn riccati_report(spec: &ExperimentSpec, grid: &[f64], mode: MonotonicityMode) -> Result<MonotonicityReport> {
    let (plant, observer) = spec.model.resolve()?;
    let (m, p) = (plant.m(), plant.p());
    let (mw, q, r) = match &spec.estimator {
        EstimatorSpec::Augmented { m, q, r, .. } => (linalg::mat_from_rows(m)?, linalg::mat_from_rows(q)?, linalg::mat_from_rows(r)?),
        _ => (Mat::identity(m + p, m + p) * 10.0, Mat::identity(m, m), Mat::identity(p, p) * 0.5),
    };
    let n2 = 2 * plant.n();
    let phi0 = Mat::identity(n2, n2) * 10.0;
    let inputs = MonotonicityInputs {
        plant: &plant,
        observer: &observer,
        m: &mw,
        q: &q,
        r: &r,
        phi0: &phi0,
    };
    Ok(phi_monotonicity_report(&inputs, grid, RICCATI_STEPS, mode)?)
}

/// Outer invariant box for the observer error driven by the experiment's noise boxes.
pub fn rpi_report(spec: &ExperimentSpec) -> Result<RpiBox> {
    let (plant, observer) = spec.model.resolve()?;
    let q = disturbance_box(plant.g(), observer.l(), &spec.w_box, &spec.v_box)?;
    Ok(rpi_box_outer(observer.a_l(), &q, RPI_TOL)?)
}

pub fn rpi_csv(b: &RpiBox) -> String {
    let mut out = String::from("component,lower,upper\n");
    for (i, (l, u)) in b.set.lower.iter().zip(&b.set.upper).enumerate() {
        out.push_str(&format!("{i},{l},{u}\n"));
    }
    out
}

pub struct BoundReport {
    pub rows: Vec<LambdaAnalysisRow>,
    /// Adjacent `Q̄_L` differences all positive definite.
    pub decay_pass: bool,
}

impl BoundReport {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", LambdaAnalysisRow::CSV_HEADER);
        for r in &self.rows {
            out.push_str(&r.csv_row());
            out.push('\n');
        }
        out
    }
}

/// Bound constants over a λ grid for an initial-state spec. Without fixed
/// initial vectors, `√n` stands in for the expected norms of the draws.
pub fn bound_report(spec: &ExperimentSpec, grid: &[f64]) -> Result<BoundReport> {
    let EstimatorSpec::InitialState { mu, mu_bar, horizon, .. } = spec.estimator else {
        return Err(BenchError::Config("bound report needs the initial-state estimator".into()));
    };
    let (plant, observer) = spec.model.resolve()?;
    let maps = BatchMaps::new(&plant, &observer, horizon)?;
    let typical = (plant.n() as f64).sqrt();
    let norm = |v: &Option<Vec<f64>>| v.as_ref().map_or(typical, |v| v.iter().map(|x| x * x).sum::<f64>().sqrt());
    let inputs = LambdaAnalysisInputs {
        maps: &maps,
        observer: &observer,
        mu,
        mu_bar,
        z_w: box_norm_bound(&spec.w_box),
        z_v: box_norm_bound(&spec.v_box),
        x0_norm: norm(&spec.initial.truth),
        xbar0_norm: norm(&spec.initial.guess),
    };
    let rows = lambda_analysis(&inputs, grid)?;
    let decay = decay_monotonicity_report(&maps, &observer, mu, mu_bar, grid, None)?;
    Ok(BoundReport { rows, decay_pass: decay.pass })
}
