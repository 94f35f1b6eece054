use std::path::PathBuf;

use mmhe_core::fir_baseline::ufir_estimate;
use mmhe_core::linalg::{self, Mat, Vector};
use mmhe_core::linmodel::{augment, LinearPlant, ModelDocument, ObserverGain};
use mmhe_core::mhe_init::{BatchMaps, InitMheConfig, InitMheEstimator};
use mmhe_core::mmhe_full::{MmheConfig, MmheEstimator, PriorUpdate};
use mmhe_core::riccati::{are_step_augmented, qe_weights, steady_state, RiccatiIterate, STEADY_MAX_ITER, STEADY_TOL};
use mmhe_core::setops::BoxSet;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::scenario::{vehicle_observer, vehicle_plant};
use crate::sim::{sample_standard_normal, scenario_rng, simulate_with, Trajectory};
use crate::{BenchError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ModelSpec {
    /// Built-in vehicle with a pole-placed observer.
    Vehicle,
    /// JSON model document; must carry `L`.
    File { path: PathBuf },
    Inline { model: ModelDocument },
}

impl ModelSpec {
    pub fn resolve(&self) -> Result<(LinearPlant, ObserverGain)> {
        let doc = match self {
            ModelSpec::Vehicle => {
                let plant = vehicle_plant();
                let obs = vehicle_observer(&plant)?;
                return Ok((plant, obs));
            }
            ModelSpec::File { path } => {
                let text = std::fs::read_to_string(path).map_err(|e| BenchError::Config(format!("{}: {e}", path.display())))?;
                ModelDocument::from_json(&text)?
            }
            ModelSpec::Inline { model } => model.clone(),
        };
        let plant = doc.plant()?;
        let obs = doc
            .observer(&plant)?
            .ok_or_else(|| BenchError::Config("model document has no observer gain L".into()))?;
        Ok((plant, obs))
    }
}

/// Which plant state an estimate is scored against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorTarget {
    /// `x_{t−N}`.
    #[default]
    WindowStart,
    /// `x_t`.
    Current,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "framework", rename_all = "kebab-case")]
pub enum EstimatorSpec {
    /// Window QP on the observer-augmented model; scored on `x_t`.
    Augmented {
        lambda: f64,
        m: Vec<Vec<f64>>,
        q: Vec<Vec<f64>>,
        r: Vec<Vec<f64>>,
        horizon: usize,
        /// Symmetric bound on every observer-state component.
        state_bound: f64,
    },
    /// Closed-form window-start estimator; scored on `x_{t−N}`.
    InitialState { lambda: f64, mu: f64, mu_bar: f64, horizon: usize },
    Fir {
        horizon: usize,
        #[serde(default)]
        target: ErrorTarget,
    },
}

impl EstimatorSpec {
    pub fn horizon(&self) -> usize {
        match self {
            EstimatorSpec::Augmented { horizon, .. } | EstimatorSpec::InitialState { horizon, .. } | EstimatorSpec::Fir { horizon, .. } => *horizon,
        }
    }

    pub fn lambda(&self) -> Option<f64> {
        match self {
            EstimatorSpec::Augmented { lambda, .. } | EstimatorSpec::InitialState { lambda, .. } => Some(*lambda),
            EstimatorSpec::Fir { .. } => None,
        }
    }

    pub fn with_lambda(&self, value: f64) -> Result<Self> {
        let mut out = self.clone();
        match &mut out {
            EstimatorSpec::Augmented { lambda, .. } | EstimatorSpec::InitialState { lambda, .. } => *lambda = value,
            EstimatorSpec::Fir { .. } => return Err(BenchError::Config("the FIR baseline has no lambda".into())),
        }
        Ok(out)
    }

    pub fn target(&self) -> ErrorTarget {
        match self {
            EstimatorSpec::Augmented { .. } => ErrorTarget::Current,
            EstimatorSpec::InitialState { .. } => ErrorTarget::WindowStart,
            EstimatorSpec::Fir { target, .. } => *target,
        }
    }

    /// FIR over the same horizon, scored on the same target.
    pub fn fir_counterpart(&self) -> Self {
        EstimatorSpec::Fir {
            horizon: self.horizon(),
            target: self.target(),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            EstimatorSpec::Augmented { .. } => "mhe-augmented",
            EstimatorSpec::InitialState { .. } => "mhe-initial-state",
            EstimatorSpec::Fir { .. } => "fir",
        }
    }
}

/// Fixed initial vectors; absent entries are drawn standard normal, truth
/// first. For the augmented estimator both live in the `[x̃, e]` coordinates.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct InitialSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub truth: Option<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub guess: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub model: ModelSpec,
    pub estimator: EstimatorSpec,
    pub w_box: BoxSet,
    pub v_box: BoxSet,
    #[serde(default)]
    pub initial: InitialSpec,
    /// Number of measurements `y_0..y_{T−1}`.
    pub steps: usize,
    pub scenarios: usize,
    pub base_seed: u64,
    /// First scored time index.
    pub eval_start: usize,
    pub eval_len: usize,
}

impl ExperimentSpec {
    pub fn from_json(s: &str) -> Result<Self> {
        serde_json::from_str(s).map_err(|e| BenchError::Config(e.to_string()))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("spec serialises")
    }

    pub fn hash(&self) -> String {
        let digest = Sha256::digest(serde_json::to_vec(self).expect("spec serialises"));
        digest.iter().take(8).map(|b| format!("{b:02x}")).collect()
    }

    pub fn validate(&self, plant: &LinearPlant) -> Result<()> {
        let bad = |msg: String| Err(BenchError::Config(msg));
        if self.scenarios == 0 {
            return bad("scenario count must be at least 1".into());
        }
        if self.w_box.dim() != plant.m() || self.v_box.dim() != plant.p() {
            return bad(format!("noise boxes must have dimensions {} and {}", plant.m(), plant.p()));
        }
        if !self.w_box.is_c_set() && self.w_box.max_norm() > 0.0 || !self.v_box.is_c_set() && self.v_box.max_norm() > 0.0 {
            return bad("noise boxes must contain the origin in their interior or be the zero box".into());
        }
        let horizon = self.estimator.horizon();
        if horizon == 0 {
            return bad("horizon must be at least 1".into());
        }
        if self.eval_len == 0 || self.eval_start + self.eval_len > self.steps {
            return bad(format!("evaluation window {}..{} exceeds {} steps", self.eval_start, self.eval_start + self.eval_len, self.steps));
        }
        let windowed = !matches!(self.estimator, EstimatorSpec::Augmented { .. });
        if windowed && self.eval_start < horizon {
            return bad(format!("evaluation must start at or after the horizon {horizon}"));
        }
        let dim = match self.estimator {
            EstimatorSpec::Augmented { .. } => 2 * plant.n(),
            _ => plant.n(),
        };
        for (v, what) in [(&self.initial.truth, "truth"), (&self.initial.guess, "guess")] {
            if v.as_ref().is_some_and(|v| v.len() != dim) {
                return bad(format!("initial {what} must have length {dim}"));
            }
        }
        match &self.estimator {
            EstimatorSpec::InitialState { lambda, mu, mu_bar, .. } => {
                if !(0.0..=1.0).contains(lambda) || *mu < 0.0 || *mu_bar < 0.0 {
                    return bad("initial-state estimator needs lambda in [0,1] and nonnegative prior weights".into());
                }
            }
            EstimatorSpec::Augmented { lambda, .. } if !(0.0..1.0).contains(lambda) => {
                return bad("augmented estimator needs lambda in [0,1)".into());
            }
            _ => {}
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub time: usize,
    pub output: Vector,
    pub truth: Vector,
    pub estimate: Option<Vector>,
    pub error_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryLog {
    pub scenario: usize,
    pub seed: u64,
    pub records: Vec<StepRecord>,
}

impl TrajectoryLog {
    pub fn csv_header(n: usize, p: usize) -> String {
        let mut cols = vec!["t".to_string()];
        cols.extend((0..p).map(|i| format!("y{i}")));
        cols.extend((0..n).map(|i| format!("x{i}")));
        cols.extend((0..n).map(|i| format!("xhat{i}")));
        cols.push("error_norm".into());
        cols.join(",")
    }

    pub fn to_csv(&self) -> String {
        let Some(first) = self.records.first() else {
            return String::new();
        };
        let n = first.truth.len();
        let mut out = Self::csv_header(n, first.output.len());
        out.push('\n');
        for r in &self.records {
            let mut cols = vec![r.time.to_string()];
            cols.extend(r.output.iter().map(f64::to_string));
            cols.extend(r.truth.iter().map(f64::to_string));
            match &r.estimate {
                Some(e) => cols.extend(e.iter().map(f64::to_string)),
                None => cols.extend(std::iter::repeat_n(String::new(), n)),
            }
            cols.push(r.error_norm.map_or_else(String::new, |e| e.to_string()));
            out.push_str(&cols.join(","));
            out.push('\n');
        }
        out
    }

    /// `sqrt(mean ‖e_t‖²)` over `[start, start + len)`.
    pub fn rmse(&self, start: usize, len: usize) -> Option<f64> {
        let errs: Option<Vec<f64>> = self.records.get(start..start + len)?.iter().map(|r| r.error_norm).collect();
        let errs = errs?;
        Some((errs.iter().map(|e| e * e).sum::<f64>() / len as f64).sqrt())
    }
}

/// Model plus the estimator-independent pieces shared by every scenario.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub spec: ExperimentSpec,
    pub plant: LinearPlant,
    pub observer: ObserverGain,
    /// Arrival weight for the augmented estimator.
    phi0: Option<Mat>,
    maps: Option<BatchMaps>,
}

impl Prepared {
    pub fn new(spec: &ExperimentSpec) -> Result<Self> {
        let (plant, observer) = spec.model.resolve()?;
        spec.validate(&plant)?;
        let mut phi0 = None;
        let mut maps = None;
        match &spec.estimator {
            EstimatorSpec::Augmented { lambda, m, q, r, .. } => {
                let n = plant.n();
                if *lambda > 0.0 {
                    let aug = augment(&plant, &observer)?;
                    let w = qe_weights(*lambda, &linalg::mat_from_rows(m)?, &linalg::mat_from_rows(q)?)?;
                    let r = linalg::mat_from_rows(r)?;
                    let step = |p: &RiccatiIterate| are_step_augmented(p, &aug, &w, &r);
                    let ss = steady_state(step, &RiccatiIterate::new(Mat::identity(2 * n, 2 * n)), STEADY_TOL, STEADY_MAX_ITER)?;
                    phi0 = Some(ss.value);
                } else {
                    // Only breaks the tie on the window start.
                    phi0 = Some(Mat::identity(2 * n, 2 * n));
                }
            }
            _ => maps = Some(BatchMaps::new(&plant, &observer, spec.estimator.horizon())?),
        }
        Ok(Self {
            spec: spec.clone(),
            plant,
            observer,
            phi0,
            maps,
        })
    }

    pub fn seed(&self, scenario: usize) -> u64 {
        self.spec.base_seed.wrapping_add(scenario as u64)
    }

    pub fn run_scenario(&self, scenario: usize) -> Result<TrajectoryLog> {
        let spec = &self.spec;
        let n = self.plant.n();
        let seed = self.seed(scenario);
        let mut rng = scenario_rng(seed);
        let dim = if matches!(spec.estimator, EstimatorSpec::Augmented { .. }) { 2 * n } else { n };
        let draw = |rng: &mut _, fixed: &Option<Vec<f64>>| fixed.as_ref().map_or_else(|| sample_standard_normal(rng, dim), |v| Vector::from_vec(v.clone()));
        let truth0 = draw(&mut rng, &spec.initial.truth);
        let guess0 = draw(&mut rng, &spec.initial.guess);

        let x0 = if dim == 2 * n { truth0.rows(0, n) + truth0.rows(n, n) } else { truth0.clone() };
        let tr = simulate_with(&mut rng, &self.plant, &spec.w_box, &spec.v_box, spec.steps, x0);
        let records = match &spec.estimator {
            EstimatorSpec::Augmented { lambda, m, q, r, horizon, state_bound } => {
                let config = MmheConfig {
                    plant: self.plant.clone(),
                    observer: self.observer.clone(),
                    lambda: *lambda,
                    m: linalg::mat_from_rows(m)?,
                    q: linalg::mat_from_rows(q)?,
                    r: linalg::mat_from_rows(r)?,
                    horizon: *horizon,
                    x_box: BoxSet::symmetric(n, *state_bound),
                    e_box: None,
                    w_box: spec.w_box.clone(),
                    v_box: spec.v_box.clone(),
                    prior: guess0.clone(),
                    phi0: self.phi0.clone().expect("prepared for the augmented estimator"),
                    prior_update: PriorUpdate::Filtering,
                };
                self.run_augmented(config, &tr, &guess0)?
            }
            EstimatorSpec::InitialState { lambda, mu, mu_bar, horizon } => {
                let config = InitMheConfig {
                    horizon: *horizon,
                    lambda: *lambda,
                    mu: *mu,
                    mu_bar: *mu_bar,
                };
                let mut est = InitMheEstimator::new(self.plant.clone(), self.observer.clone(), config, guess0)?;
                let u = Vector::zeros(self.plant.q());
                self.windowed(&tr, *horizon, ErrorTarget::WindowStart, |t, y| {
                    Ok(est.step(y, (!u.is_empty()).then_some(&u))?.map(|e| {
                        debug_assert_eq!(e.time, t);
                        e.window_start
                    }))
                })?
            }
            EstimatorSpec::Fir { horizon, target } => {
                let maps = self.maps.as_ref().expect("prepared for a windowed estimator");
                let h = *horizon;
                let us = vec![Vector::zeros(self.plant.q()); if self.plant.q() > 0 { h } else { 0 }];
                self.windowed(&tr, h, *target, |t, _| {
                    if t < h {
                        return Ok(None);
                    }
                    let est = ufir_estimate(&tr.outputs[t - h..=t], &us, &self.plant, maps)?;
                    Ok(Some(match target {
                        ErrorTarget::WindowStart => est.window_start,
                        ErrorTarget::Current => est.current,
                    }))
                })?
            }
        };
        Ok(TrajectoryLog { scenario, seed, records })
    }

    fn windowed<F>(&self, tr: &Trajectory, horizon: usize, target: ErrorTarget, mut estimate: F) -> Result<Vec<StepRecord>>
    where
        F: FnMut(usize, &Vector) -> Result<Option<Vector>>,
    {
        let mut out = Vec::with_capacity(tr.outputs.len());
        for (t, y) in tr.outputs.iter().enumerate() {
            let est = estimate(t, y)?;
            let truth = match target {
                ErrorTarget::WindowStart if t >= horizon => tr.states[t - horizon].clone(),
                ErrorTarget::WindowStart => Vector::from_element(self.plant.n(), f64::NAN),
                ErrorTarget::Current => tr.states[t].clone(),
            };
            out.push(StepRecord {
                time: t,
                output: y.clone(),
                error_norm: est.as_ref().map(|e| (&truth - e).norm()),
                truth,
                estimate: est,
            });
        }
        Ok(out)
    }

    fn run_augmented(&self, config: MmheConfig, tr: &Trajectory, guess: &Vector) -> Result<Vec<StepRecord>> {
        let n = self.plant.n();
        let mut est = MmheEstimator::new(config)?;
        let mut out = Vec::with_capacity(tr.outputs.len());
        let mut current = guess.rows(0, n) + guess.rows(n, n);
        for (t, y) in tr.outputs.iter().enumerate() {
            let truth = tr.states[t].clone();
            out.push(StepRecord {
                time: t,
                output: y.clone(),
                error_norm: Some((&truth - &current).norm()),
                truth,
                estimate: Some(current.clone()),
            });
            let step = est.step(y)?;
            current = step.estimate;
        }
        Ok(out)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmseReport {
    pub label: String,
    pub lambda: Option<f64>,
    /// Mean of the per-scenario RMSE over successful scenarios.
    pub armse: f64,
    /// `None` for scenarios that failed.
    pub rmse: Vec<Option<f64>>,
    pub failures: usize,
    pub base_seed: u64,
    pub spec_hash: String,
}

pub fn run_monte_carlo(spec: &ExperimentSpec) -> Result<ArmseReport> {
    let prepared = Prepared::new(spec)?;
    let rmse: Vec<Option<f64>> = (0..spec.scenarios)
        .into_par_iter()
        .map(|i| prepared.run_scenario(i).ok().and_then(|log| log.rmse(spec.eval_start, spec.eval_len)))
        .collect();
    let ok: Vec<f64> = rmse.iter().flatten().copied().collect();
    Ok(ArmseReport {
        label: spec.estimator.label().to_string(),
        lambda: spec.estimator.lambda(),
        armse: if ok.is_empty() { f64::NAN } else { ok.iter().sum::<f64>() / ok.len() as f64 },
        failures: rmse.len() - ok.len(),
        rmse,
        base_seed: spec.base_seed,
        spec_hash: spec.hash(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepTable {
    pub mhe: Vec<ArmseReport>,
    pub fir: ArmseReport,
    /// ARMSE strictly decreasing along the sorted λ grid.
    pub monotone_decreasing: bool,
    /// Adjacent λ pair whose ARMSE values bracket the FIR value.
    pub fir_bracket: Option<(f64, f64)>,
}

impl SweepTable {
    pub const CSV_HEADER: &'static str = "estimator,lambda,armse,scenarios,failures,spec_hash,monotone_decreasing";

    pub fn to_csv(&self) -> String {
        let mut out = format!("{}\n", Self::CSV_HEADER);
        for r in self.mhe.iter().chain(std::iter::once(&self.fir)) {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label,
                r.lambda.map_or_else(String::new, |l| l.to_string()),
                r.armse,
                r.rmse.len(),
                r.failures,
                r.spec_hash,
                self.monotone_decreasing
            ));
        }
        out
    }
}

pub fn sweep_lambda(spec: &ExperimentSpec, grid: &[f64]) -> Result<SweepTable> {
    if grid.is_empty() {
        return Err(BenchError::Config("empty lambda grid".into()));
    }
    let mut sorted = grid.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mhe = sorted
        .iter()
        .map(|&l| {
            let mut s = spec.clone();
            s.estimator = spec.estimator.with_lambda(l)?;
            run_monte_carlo(&s)
        })
        .collect::<Result<Vec<_>>>()?;
    let mut fir_spec = spec.clone();
    fir_spec.estimator = spec.estimator.fir_counterpart();
    let fir = run_monte_carlo(&fir_spec)?;
    let monotone_decreasing = mhe.windows(2).all(|w| w[1].armse < w[0].armse);
    let fir_bracket = mhe.windows(2).find_map(|w| {
        let (hi, lo) = (w[0].armse.max(w[1].armse), w[0].armse.min(w[1].armse));
        (lo <= fir.armse && fir.armse <= hi).then(|| (w[0].lambda.unwrap_or(f64::NAN), w[1].lambda.unwrap_or(f64::NAN)))
    });
    Ok(SweepTable {
        mhe,
        fir,
        monotone_decreasing,
        fir_bracket,
    })
}

/// Per-scenario RMSE of the configured estimator next to the FIR baseline.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FirComparison {
    pub mhe: ArmseReport,
    pub fir: ArmseReport,
}

impl FirComparison {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("scenario,seed,mhe_rmse,fir_rmse\n");
        let opt = |v: Option<f64>| v.map_or_else(String::new, |x| x.to_string());
        for (i, (a, b)) in self.mhe.rmse.iter().zip(&self.fir.rmse).enumerate() {
            out.push_str(&format!("{i},{},{},{}\n", self.mhe.base_seed.wrapping_add(i as u64), opt(*a), opt(*b)));
        }
        out.push_str(&format!("armse,,{},{}\n", self.mhe.armse, self.fir.armse));
        out
    }
}

pub fn compare_fir(spec: &ExperimentSpec) -> Result<FirComparison> {
    let mut fir_spec = spec.clone();
    fir_spec.estimator = spec.estimator.fir_counterpart();
    Ok(FirComparison {
        mhe: run_monte_carlo(spec)?,
        fir: run_monte_carlo(&fir_spec)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{vehicle_augmented_scenario, vehicle_scenario};

    #[test]
    fn spec_round_trips_through_json() {
        for spec in [vehicle_scenario(), vehicle_augmented_scenario(0.5)] {
            assert_eq!(ExperimentSpec::from_json(&spec.to_json()).unwrap(), spec);
        }
    }

    #[test]
    fn noise_free_exact_prior_is_exact() {
        let mut spec = vehicle_scenario();
        spec.scenarios = 1;
        spec.w_box = BoxSet::zero(4);
        spec.v_box = BoxSet::zero(3);
        let x0 = vec![0.3, -0.7, 1.1, 0.2];
        spec.initial = InitialSpec {
            truth: Some(x0.clone()),
            guess: Some(x0),
        };
        let report = run_monte_carlo(&spec).unwrap();
        assert!(report.armse <= 1e-8, "{}", report.armse);
    }

    #[test]
    fn rejects_bad_windows() {
        let mut spec = vehicle_scenario();
        spec.eval_start = 5;
        assert!(matches!(Prepared::new(&spec), Err(BenchError::Config(_))));
        spec.eval_start = 20;
        spec.scenarios = 0;
        assert!(matches!(Prepared::new(&spec), Err(BenchError::Config(_))));
    }

    #[test]
    fn sweep_shape_and_determinism() {
        let mut spec = vehicle_scenario();
        spec.scenarios = 8;
        let grid = [0.0, 0.25, 0.5, 0.75];
        let a = sweep_lambda(&spec, &grid).unwrap();
        assert_eq!(a.mhe.len(), 4);
        assert_eq!(a.to_csv().lines().count(), 6);
        let b = sweep_lambda(&spec, &grid).unwrap();
        assert_eq!(a.to_csv(), b.to_csv());
    }
}
