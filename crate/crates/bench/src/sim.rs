//! Seeded simulation of `x⁺ = A x + G w`, `y = C x + v` with box-uniform noise.
//!
//! The generator is ChaCha8 seeded through `SeedableRng::seed_from_u64`. Per
//! step the draws are `w` then `v`, each component in index order, so a
//! trajectory depends only on the seed and the model.

use mmhe_core::linalg::Vector;
use mmhe_core::linmodel::LinearPlant;
use mmhe_core::setops::BoxSet;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{StandardNormal, Uniform};

pub type ScenarioRng = ChaCha8Rng;

pub fn scenario_rng(seed: u64) -> ScenarioRng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// `x_0..=x_T`, `y_0..y_{T−1}`, `w_0..w_{T−1}`, `v_0..v_{T−1}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<Vector>,
    pub outputs: Vec<Vector>,
    pub process_noise: Vec<Vector>,
    pub measurement_noise: Vec<Vector>,
}

pub fn sample_box(rng: &mut ScenarioRng, b: &BoxSet) -> Vector {
    Vector::from_iterator(
        b.dim(),
        b.lower.iter().zip(&b.upper).map(|(&lo, &hi)| rng.sample(Uniform::new_inclusive(lo, hi).expect("box bounds are ordered"))),
    )
}

pub fn sample_standard_normal(rng: &mut ScenarioRng, n: usize) -> Vector {
    Vector::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)))
}

pub fn simulate_with(rng: &mut ScenarioRng, plant: &LinearPlant, w_box: &BoxSet, v_box: &BoxSet, steps: usize, x0: Vector) -> Trajectory {
    let mut tr = Trajectory {
        states: Vec::with_capacity(steps + 1),
        outputs: Vec::with_capacity(steps),
        process_noise: Vec::with_capacity(steps),
        measurement_noise: Vec::with_capacity(steps),
    };
    let mut x = x0;
    for _ in 0..steps {
        let w = sample_box(rng, w_box);
        let v = sample_box(rng, v_box);
        let next = plant.a() * &x + plant.g() * &w;
        tr.outputs.push(plant.c() * &x + &v);
        tr.states.push(std::mem::replace(&mut x, next));
        tr.process_noise.push(w);
        tr.measurement_noise.push(v);
    }
    tr.states.push(x);
    tr
}

pub fn simulate(plant: &LinearPlant, w_box: &BoxSet, v_box: &BoxSet, steps: usize, seed: u64, x0: Vector) -> Trajectory {
    simulate_with(&mut scenario_rng(seed), plant, w_box, v_box, steps, x0)
}
