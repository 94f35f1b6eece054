//! Planar vehicle with position/velocity states sampled at `T = 0.5 s`.

use mmhe_core::linalg::{self, Mat};
use mmhe_core::linmodel::{place_poles, LinearPlant, ModelDocument, ObserverGain};
use mmhe_core::setops::BoxSet;
use num_complex::Complex64;

use crate::experiment::{EstimatorSpec, ExperimentSpec, InitialSpec, ModelSpec};

pub const SAMPLE_PERIOD: f64 = 0.5;

/// Reference observer gain. It pairs with an output map whose third row
/// reads the easterly velocity, not with [`vehicle_output_map`].
pub const REFERENCE_GAIN: [[f64; 3]; 4] = [
    [1.2466, 0.0, 0.0],
    [0.0, 0.8627, 0.4358],
    [0.6759, 0.0, 0.0],
    [0.0, 0.0090, 0.8535],
];

/// Target spectrum of `A − L C`.
pub fn observer_poles() -> [Complex64; 4] {
    [
        Complex64::new(0.1519, 0.0),
        Complex64::new(0.6015, 0.0),
        Complex64::new(0.1419, 0.0236),
        Complex64::new(0.1419, -0.0236),
    ]
}

/// States: north, east positions, then north, east velocities.
pub fn vehicle_dynamics() -> Mat {
    let t = SAMPLE_PERIOD;
    Mat::from_row_slice(4, 4, &[1.0, 0.0, t, 0.0, 0.0, 1.0, 0.0, t, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0])
}

/// Both positions and the northerly velocity.
pub fn vehicle_output_map() -> Mat {
    Mat::from_row_slice(3, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0])
}

pub fn vehicle_plant() -> LinearPlant {
    LinearPlant::with_direct_noise(vehicle_dynamics(), None, vehicle_output_map()).expect("vehicle model dimensions are consistent")
}

pub fn vehicle_observer(plant: &LinearPlant) -> mmhe_core::Result<ObserverGain> {
    place_poles(plant.a(), plant.c(), &observer_poles())
}

pub fn reference_gain() -> Mat {
    linalg::mat_from_rows(&REFERENCE_GAIN.map(|r| r.to_vec())).expect("constant gain is rectangular")
}

/// Plant and placed gain as a model document.
pub fn vehicle_model_document() -> mmhe_core::Result<ModelDocument> {
    let plant = vehicle_plant();
    let obs = vehicle_observer(&plant)?;
    Ok(ModelDocument::from_parts(&plant, None, Some(&obs)))
}

/// Initial-state estimator with `μ = 0.15`, `μ̄ = 0.1`, `N = 20`; 120 steps,
/// errors scored on steps 20..120.
pub fn vehicle_scenario() -> ExperimentSpec {
    ExperimentSpec {
        model: ModelSpec::Vehicle,
        estimator: EstimatorSpec::InitialState {
            lambda: 0.5,
            mu: 0.15,
            mu_bar: 0.1,
            horizon: 20,
        },
        w_box: BoxSet::symmetric(4, 0.01),
        v_box: BoxSet::symmetric(3, 0.01),
        initial: InitialSpec::default(),
        steps: 120,
        scenarios: 200,
        base_seed: 20_200,
        eval_start: 20,
        eval_len: 100,
    }
}

/// Augmented-state estimator with `Q = I₄`, `R = 0.5 I₃`, `M = 10 I₇`,
/// `N = 20`, true augmented state `[5·1₄, 10·1₄]` and a standard normal guess.
pub fn vehicle_augmented_scenario(lambda: f64) -> ExperimentSpec {
    let mut truth = vec![5.0; 4];
    truth.extend([10.0; 4]);
    ExperimentSpec {
        model: ModelSpec::Vehicle,
        estimator: EstimatorSpec::Augmented {
            lambda,
            m: linalg::mat_to_rows(&(Mat::identity(7, 7) * 10.0)),
            q: linalg::mat_to_rows(&Mat::identity(4, 4)),
            r: linalg::mat_to_rows(&(Mat::identity(3, 3) * 0.5)),
            horizon: 20,
            state_bound: 1e3,
        },
        w_box: BoxSet::symmetric(4, 0.1),
        v_box: BoxSet::symmetric(3, 0.25),
        initial: InitialSpec { truth: Some(truth), guess: None },
        steps: 60,
        scenarios: 1,
        base_seed: 1,
        eval_start: 20,
        eval_len: 40,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn placed_spectrum_matches_targets() {
        let plant = vehicle_plant();
        let obs = vehicle_observer(&plant).unwrap();
        let eig = linalg::eigenvalues(obs.a_l()).unwrap();
        assert!(linalg::spectra_match(&eig, &observer_poles(), 1e-3));
    }

    #[test]
    fn reference_gain_needs_a_different_output_map() {
        let with_surrogate = vehicle_dynamics() - reference_gain() * vehicle_output_map();
        assert!(linalg::spectral_radius(&with_surrogate).unwrap() > 0.99);
        let east_velocity = Mat::from_row_slice(3, 4, &[1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let a_l = vehicle_dynamics() - reference_gain() * east_velocity;
        assert!(linalg::spectra_match(&linalg::eigenvalues(&a_l).unwrap(), &observer_poles(), 1e-3));
    }

    #[test]
    fn vehicle_is_observable() {
        let p = vehicle_plant();
        assert!(mmhe_core::linmodel::check_observable(p.a(), p.c()).unwrap());
    }
}
