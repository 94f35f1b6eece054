use mmhe_core::fir_baseline::ufir_estimate;
use mmhe_core::linalg::{self, Mat, Vector};
use mmhe_core::linmodel::{place_poles, LinearPlant, ObserverGain};
use mmhe_core::mhe_init::{
    bound_sequence, build_observer_maps, build_open_loop_maps, error_dynamics, solve_initial_state, solve_initial_state_constrained,
    solve_with_prior_weight, stack, BatchMaps, InitMheConfig, InitMheEstimator,
};
use mmhe_core::setops::BoxSet;
use num_complex::Complex64;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_mat(rng: &mut ChaCha8Rng, r: usize, c: usize, scale: f64) -> Mat {
    Mat::from_fn(r, c, |_, _| rng.random_range(-scale..scale))
}

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vector {
    Vector::from_fn(n, |_, _| rng.random_range(-scale..scale))
}

/// Observable plant with `G = I`, `ρ(A) ≤ 1.05`, one input and a placed
/// observer.
fn random_system(rng: &mut ChaCha8Rng, n: usize, p: usize) -> (LinearPlant, ObserverGain) {
    loop {
        let raw = random_mat(rng, n, n, 1.0);
        let rho = linalg::spectral_radius(&raw).unwrap();
        // Bounded growth keeps absolute comparisons meaningful over long runs.
        let a = if rho > 1.05 { raw * (1.05 / rho) } else { raw };
        let b = random_mat(rng, n, 1, 1.0);
        let c = random_mat(rng, p, n, 1.0);
        let Ok(plant) = LinearPlant::with_direct_noise(a.clone(), Some(b), c.clone()) else {
            continue;
        };
        let targets: Vec<Complex64> = (0..n).map(|i| Complex64::new(-0.6 + 1.2 * (i as f64 + 0.5) / n as f64, 0.0)).collect();
        if let Ok(obs) = place_poles(&a, &c, &targets) {
            if obs.spectral_radius() < 0.95 {
                return (plant, obs);
            }
        }
    }
}

fn noise(rng: &mut ChaCha8Rng, n: usize, bound: f64) -> Vector {
    if bound > 0.0 {
        random_vec(rng, n, bound)
    } else {
        Vector::zeros(n)
    }
}

struct Trajectory {
    xs: Vec<Vector>,
    ys: Vec<Vector>,
    us: Vec<Vector>,
    ws: Vec<Vector>,
    vs: Vec<Vector>,
}

fn simulate(rng: &mut ChaCha8Rng, plant: &LinearPlant, x0: Vector, steps: usize, zw: f64, zv: f64) -> Trajectory {
    let mut t = Trajectory {
        xs: vec![x0],
        ys: vec![],
        us: vec![],
        ws: vec![],
        vs: vec![],
    };
    for k in 0..steps {
        let x = t.xs[k].clone();
        let v = noise(rng, plant.p(), zv);
        let w = noise(rng, plant.n(), zw);
        let u = random_vec(rng, plant.q(), 1.0);
        t.ys.push(plant.c() * &x + &v);
        t.xs.push(plant.a() * &x + plant.b().unwrap() * &u + &w);
        t.us.push(u);
        t.ws.push(w);
        t.vs.push(v);
    }
    t
}

#[test]
fn open_loop_stacking_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let (plant, _) = random_system(&mut rng, 3, 2);
    let n_h = 6;
    let x0 = random_vec(&mut rng, 3, 1.0);
    let tr = simulate(&mut rng, &plant, x0, n_h + 1, 0.3, 0.2);
    let (lam, gamma, phi) = build_open_loop_maps(plant.a(), plant.b(), plant.c(), n_h).unwrap();
    let rhs = &lam * &tr.xs[0] + &gamma * stack(&tr.us[..n_h]) + &phi * stack(&tr.ws[..n_h]) + stack(&tr.vs);
    assert!((stack(&tr.ys) - rhs).amax() < 1e-10);
    for i in 0..=n_h {
        for j in i..n_h {
            assert!(gamma.view((2 * i, j), (2, 1)).iter().all(|v| *v == 0.0));
        }
    }
}

#[test]
fn observer_stacking_identity() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let (plant, obs) = random_system(&mut rng, 3, 2);
    let n_h = 5;
    let om = build_observer_maps(plant.a(), plant.b(), plant.c(), obs.l(), n_h).unwrap();
    let ys: Vec<Vector> = (0..=n_h).map(|_| random_vec(&mut rng, 2, 1.0)).collect();
    let us: Vec<Vector> = (0..n_h).map(|_| random_vec(&mut rng, 1, 1.0)).collect();
    let mut xh = random_vec(&mut rng, 3, 1.0);
    let x0 = xh.clone();
    let mut yh = Vec::new();
    for i in 0..=n_h {
        yh.push(plant.c() * &xh);
        if i < n_h {
            xh = obs.a_l() * &xh + plant.b().unwrap() * &us[i] + obs.l() * &ys[i];
        }
    }
    let rhs = &om.observability * &x0 + &om.input_map * stack(&us) + &om.output_injection * stack(&ys);
    assert!((stack(&yh) - rhs).amax() < 1e-10);
    assert!(om.output_injection.rows(0, 2).iter().all(|v| *v == 0.0));
}

#[test]
fn true_state_satisfies_observer_stacking() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let (plant, obs) = random_system(&mut rng, 3, 1);
    let maps = BatchMaps::new(&plant, &obs, 4).unwrap();
    let x0 = random_vec(&mut rng, 3, 1.0);
    let tr = simulate(&mut rng, &plant, x0, 5, 0.2, 0.2);
    let om = &maps.observer;
    let lhs = &om.psi * stack(&tr.ys) - &om.input_map * stack(&tr.us[..4]);
    let rhs = &om.observability * &tr.xs[0] + &om.noise_map * stack(&tr.ws[..4]) + &om.psi * stack(&tr.vs);
    assert!((lhs - rhs).amax() < 1e-10);
}

#[test]
fn closed_form_matches_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let (plant, obs) = random_system(&mut rng, 3, 2);
    let cfg = InitMheConfig {
        horizon: 4,
        lambda: 0.6,
        mu: 0.15,
        mu_bar: 0.1,
    };
    let maps = BatchMaps::new(&plant, &obs, 4).unwrap();
    let ys: Vec<Vector> = (0..5).map(|_| random_vec(&mut rng, 2, 1.0)).collect();
    let us: Vec<Vector> = (0..4).map(|_| random_vec(&mut rng, 1, 1.0)).collect();
    let prior = random_vec(&mut rng, 3, 1.0);
    let got = solve_initial_state(&ys, &us, &prior, &maps, &cfg).unwrap();

    // min ‖[√w I; Λ̄] x − [√w x̄; Ψy − Γ̄u]‖ via SVD.
    let w = cfg.prior_weight().unwrap();
    let om = &maps.observer;
    let rows = 3 + om.observability.nrows();
    let mut a = Mat::zeros(rows, 3);
    a.view_mut((0, 0), (3, 3)).copy_from(&(Mat::identity(3, 3) * w.sqrt()));
    a.view_mut((3, 0), (rows - 3, 3)).copy_from(&om.observability);
    let mut b = Vector::zeros(rows);
    b.rows_mut(0, 3).copy_from(&(&prior * w.sqrt()));
    b.rows_mut(3, rows - 3).copy_from(&(&om.psi * stack(&ys) - &om.input_map * stack(&us)));
    let oracle = a.svd(true, true).solve(&b, 1e-14).unwrap();
    assert!((got - oracle).amax() < 1e-9);
}

#[test]
fn exact_prior_and_clean_data_recover_state() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let (plant, obs) = random_system(&mut rng, 3, 1);
    let maps = BatchMaps::new(&plant, &obs, 5).unwrap();
    let x0 = random_vec(&mut rng, 3, 2.0);
    let tr = simulate(&mut rng, &plant, x0, 6, 0.0, 0.0);
    for lambda in [1e-8, 0.3, 0.9, 1.0] {
        let cfg = InitMheConfig {
            horizon: 5,
            lambda,
            mu: 0.15,
            mu_bar: 0.1,
        };
        let x = solve_initial_state(&tr.ys, &tr.us[..5], &tr.xs[0], &maps, &cfg).unwrap();
        assert!((x - &tr.xs[0]).amax() < 1e-9);
    }
}

#[test]
fn vanishing_lambda_returns_prior() {
    let mut rng = ChaCha8Rng::seed_from_u64(16);
    let (plant, obs) = random_system(&mut rng, 3, 1);
    let maps = BatchMaps::new(&plant, &obs, 4).unwrap();
    let x0 = random_vec(&mut rng, 3, 1.0);
    let tr = simulate(&mut rng, &plant, x0, 5, 0.1, 0.1);
    let prior = random_vec(&mut rng, 3, 1.0);
    let cfg = InitMheConfig {
        horizon: 4,
        lambda: 1e-8,
        mu: 0.15,
        mu_bar: 0.1,
    };
    let x = solve_initial_state(&tr.ys, &tr.us[..4], &prior, &maps, &cfg).unwrap();
    assert!((x - prior).amax() < 1e-4);
}

#[test]
fn constrained_variant_agrees_when_bounds_are_loose_and_clips_otherwise() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let (plant, obs) = random_system(&mut rng, 2, 1);
    let maps = BatchMaps::new(&plant, &obs, 3).unwrap();
    let tr = simulate(&mut rng, &plant, Vector::from_vec(vec![2.0, -2.0]), 4, 0.1, 0.1);
    let cfg = InitMheConfig {
        horizon: 3,
        lambda: 0.5,
        mu: 0.15,
        mu_bar: 0.1,
    };
    let prior = Vector::zeros(2);
    let free = solve_initial_state(&tr.ys, &tr.us[..3], &prior, &maps, &cfg).unwrap();
    let loose = solve_initial_state_constrained(&tr.ys, &tr.us[..3], &prior, &maps, &cfg, &BoxSet::symmetric(2, 100.0)).unwrap();
    assert!((&free - loose).amax() < 1e-8);
    let tight = solve_initial_state_constrained(&tr.ys, &tr.us[..3], &prior, &maps, &cfg, &BoxSet::symmetric(2, 0.5)).unwrap();
    assert!(tight.iter().all(|v| v.abs() <= 0.5 + 1e-9));
}

/// Runs the rolling estimator and the error recursion side by side; returns
/// the largest componentwise gap.
fn recursion_gap(seed: u64, n: usize, p: usize, horizon: usize, lambda: f64, steps: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (plant, obs) = random_system(&mut rng, n, p);
    let cfg = InitMheConfig {
        horizon,
        lambda,
        mu: 0.15,
        mu_bar: 0.1,
    };
    let prior0 = random_vec(&mut rng, n, 1.0);
    let x0 = random_vec(&mut rng, n, 1.0);
    let total = horizon + steps;
    let tr = simulate(&mut rng, &plant, x0, total + 1, 0.1, 0.05);
    let mut est = InitMheEstimator::new(plant.clone(), obs.clone(), cfg, prior0).unwrap();
    let dynamics = error_dynamics(est.maps(), &cfg, &obs).unwrap();

    let mut recursed: Option<Vector> = None;
    let mut worst: f64 = 0.0;
    for t in 0..total {
        let Some(out) = est.step(&tr.ys[t], Some(&tr.us[t])).unwrap() else {
            continue;
        };
        let s = t - horizon;
        let actual = &tr.xs[s] - &out.window_start;
        let predicted = match recursed {
            None => actual.clone(),
            Some(prev) => {
                let w = stack(&tr.ws[s - 1..t]);
                let v = stack(&tr.vs[s - 1..=t]);
                dynamics.step(&prev, &w, &v).unwrap()
            }
        };
        worst = worst.max((&actual - &predicted).amax());
        recursed = Some(predicted);
    }
    worst
}

#[test]
fn error_recursion_matches_simulation() {
    for k in 0..20u64 {
        let n = 1 + (k as usize % 5);
        let p = 1 + (k as usize % 2).min(n - 1);
        for horizon in [n, n + 3] {
            let gap = recursion_gap(100 + k, n, p, horizon, 0.2 + 0.03 * k as f64, 40);
            assert!(gap <= 1e-8, "system {k}, N={horizon}: gap {gap:e}");
        }
    }
}

#[test]
fn noise_free_error_decays_geometrically() {
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let (plant, obs) = random_system(&mut rng, 3, 1);
    let cfg = InitMheConfig {
        horizon: 4,
        lambda: 0.5,
        mu: 0.15,
        mu_bar: 0.1,
    };
    let x0 = random_vec(&mut rng, 3, 1.0);
    let tr = simulate(&mut rng, &plant, x0, 70, 0.0, 0.0);
    let mut est = InitMheEstimator::new(plant.clone(), obs.clone(), cfg, Vector::from_element(3, 5.0)).unwrap();
    let rho = linalg::spectral_radius(&error_dynamics(est.maps(), &cfg, &obs).unwrap().a_bar_l).unwrap() + 1e-3;
    let mut errs = Vec::new();
    for t in 0..64 {
        if let Some(out) = est.step(&tr.ys[t], Some(&tr.us[t])).unwrap() {
            errs.push((&tr.xs[t - 4] - out.window_start).norm());
        }
    }
    let c = errs[0].max(1e-300);
    // Transient constant from the first few samples.
    let scale = errs.iter().enumerate().map(|(k, e)| e / (c * rho.powi(k as i32))).fold(0.0, f64::max);
    assert!(scale.is_finite());
    for (k, e) in errs.iter().enumerate().skip(10) {
        assert!(*e <= scale * c * rho.powi(k as i32) + 1e-12);
    }
    assert!(errs[errs.len() - 1] < 1e-3 * errs[0]);
}

#[test]
fn a_bar_norm_obeys_sufficient_bound() {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    for _ in 0..10 {
        let (plant, obs) = random_system(&mut rng, 3, 2);
        let maps = BatchMaps::new(&plant, &obs, 4).unwrap();
        for lambda in [0.1, 0.5, 0.9] {
            let cfg = InitMheConfig {
                horizon: 4,
                lambda,
                mu: 0.15,
                mu_bar: 0.1,
            };
            let bs = bound_sequence(&maps, &obs, &cfg, 0.1, 0.1, 1.0, 1.0, 0).unwrap();
            let dynamics = error_dynamics(&maps, &cfg, &obs).unwrap();
            assert!(dynamics.a_bar_l.norm() <= bs.params.condition_a_value() + 1e-12);
            assert!(bs.params.a <= bs.params.condition_a_value() + 1e-12);
        }
    }
}

#[test]
fn orthonormal_gram_gives_unit_eta() {
    // A_L = 0 with C = I makes Λ̄ = [I; 0; …].
    let plant = LinearPlant::with_direct_noise(Mat::identity(2, 2) * 0.5, None, Mat::identity(2, 2)).unwrap();
    let obs = ObserverGain::for_plant(&plant, Mat::identity(2, 2) * 0.5).unwrap();
    let maps = BatchMaps::new(&plant, &obs, 2).unwrap();
    let cfg = InitMheConfig {
        horizon: 2,
        lambda: 0.5,
        mu: 0.15,
        mu_bar: 0.1,
    };
    let bs = bound_sequence(&maps, &obs, &cfg, 0.0, 0.0, 0.0, 0.0, 3).unwrap();
    assert!((bs.params.eta - 1.0).abs() < 1e-14);
}

#[test]
fn fir_matches_qr_least_squares() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for _ in 0..20 {
        let n = rng.random_range(2..5);
        let (plant, obs) = random_system(&mut rng, n, 2);
        let n_h = n + 2;
        let maps = BatchMaps::new(&plant, &obs, n_h).unwrap();
        let ys: Vec<Vector> = (0..=n_h).map(|_| random_vec(&mut rng, 2, 1.0)).collect();
        let us: Vec<Vector> = (0..n_h).map(|_| random_vec(&mut rng, 1, 1.0)).collect();
        let est = ufir_estimate(&ys, &us, &plant, &maps).unwrap();
        let rhs = stack(&ys) - &maps.input_map * stack(&us);
        let qr = maps.observability.clone().qr();
        let oracle = qr.r().solve_upper_triangular(&(qr.q().transpose() * rhs)).unwrap();
        assert!((est.window_start - oracle).amax() < 1e-9);
    }
}

#[test]
fn fir_is_unbiased() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    let (plant, obs) = random_system(&mut rng, 3, 1);
    let n_h = 5;
    let maps = BatchMaps::new(&plant, &obs, n_h).unwrap();
    let runs = 2000;
    let mut errs = Vec::with_capacity(runs);
    for _ in 0..runs {
        let x0 = random_vec(&mut rng, 3, 1.0);
        let tr = simulate(&mut rng, &plant, x0, n_h + 1, 0.05, 0.1);
        let est = ufir_estimate(&tr.ys, &tr.us[..n_h], &plant, &maps).unwrap();
        errs.push(&tr.xs[0] - est.window_start);
    }
    for i in 0..3 {
        let mean = errs.iter().map(|e| e[i]).sum::<f64>() / runs as f64;
        let var = errs.iter().map(|e| (e[i] - mean).powi(2)).sum::<f64>() / (runs - 1) as f64;
        assert!(mean.abs() <= 3.0 * var.sqrt() / (runs as f64).sqrt(), "component {i}: mean {mean}");
    }
}

#[test]
fn fir_equals_zero_weight_estimate_without_injection() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let a = Mat::from_row_slice(3, 3, &[0.5, 0.2, 0.0, 0.0, 0.4, 0.3, 0.1, 0.0, 0.6]);
    let c = Mat::from_row_slice(1, 3, &[1.0, 0.5, -0.2]);
    let plant = LinearPlant::with_direct_noise(a, Some(random_mat(&mut rng, 3, 1, 1.0)), c).unwrap();
    let zero = ObserverGain::for_plant(&plant, Mat::zeros(3, 1)).unwrap();
    let maps = BatchMaps::new(&plant, &zero, 4).unwrap();
    let x0 = random_vec(&mut rng, 3, 1.0);
    let tr = simulate(&mut rng, &plant, x0, 5, 0.1, 0.1);
    let fir = ufir_estimate(&tr.ys, &tr.us[..4], &plant, &maps).unwrap();
    let prior = random_vec(&mut rng, 3, 10.0);
    let mhe = solve_with_prior_weight(&tr.ys, &tr.us[..4], &prior, &maps, 0.0).unwrap();
    assert!((fir.window_start - mhe).amax() < 1e-10);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn injection_plus_psi_is_identity(seed in any::<u64>(), n in 1usize..4, horizon in 1usize..6) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = random_mat(&mut rng, n, n, 1.0);
        let c = random_mat(&mut rng, 2, n, 1.0);
        let l = random_mat(&mut rng, n, 2, 1.0);
        let om = build_observer_maps(&a, None, &c, &l, horizon).unwrap();
        let dim = 2 * (horizon + 1);
        prop_assert!((&om.psi + &om.output_injection - Mat::identity(dim, dim)).amax() == 0.0);
        for i in 0..dim {
            for j in (i / 2) * 2..dim {
                prop_assert_eq!(om.output_injection[(i, j)], 0.0);
            }
        }
    }

    #[test]
    fn fir_ignores_prior_and_is_exact_without_noise(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (plant, obs) = random_system(&mut rng, 2, 1);
        let maps = BatchMaps::new(&plant, &obs, 3).unwrap();
        let x0 = random_vec(&mut rng, 2, 1.0);
    let tr = simulate(&mut rng, &plant, x0, 4, 0.0, 0.0);
        let est = ufir_estimate(&tr.ys, &tr.us[..3], &plant, &maps).unwrap();
        let scale = 1.0 + tr.xs[0].amax();
        prop_assert!((est.window_start - &tr.xs[0]).amax() < 1e-7 * scale * linalg::sym_condition(&(maps.observability.transpose() * &maps.observability)).sqrt());
        prop_assert!((est.current - &tr.xs[3]).amax() < 1e-6 * (1.0 + tr.xs[3].amax()) * linalg::sym_condition(&(maps.observability.transpose() * &maps.observability)).sqrt());
    }
}
