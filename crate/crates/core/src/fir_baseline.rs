//! Batch unbiased FIR estimator: least squares on the open-loop window maps,
//! with no prior and no noise weights.

use crate::error::{Error, Result};
use crate::linalg::{self, Mat, Vector};
use crate::linmodel::LinearPlant;
use crate::mhe_init::{stack, BatchMaps};

#[derive(Debug, Clone, PartialEq)]
pub struct FirEstimate {
    /// `x̂_{t−N}`.
    pub window_start: Vector,
    /// `x̂_t` by open-loop propagation through the window.
    pub current: Vector,
}

/// `(ΛᵀΛ)⁻¹Λᵀ(y − Γu)` over a window of `N + 1` outputs and `N` inputs.
pub fn ufir_estimate(ys: &[Vector], us: &[Vector], plant: &LinearPlant, maps: &BatchMaps) -> Result<FirEstimate> {
    let n_h = maps.horizon;
    if ys.len() != n_h + 1 {
        return Err(Error::dims("window outputs", n_h + 1, ys.len()));
    }
    let q = plant.q();
    if q > 0 && us.len() != n_h {
        return Err(Error::dims("window inputs", n_h, us.len()));
    }
    let lam = &maps.observability;
    let mut r = stack(ys);
    if r.len() != lam.nrows() {
        return Err(Error::dims("output stack", lam.nrows(), r.len()));
    }
    if q > 0 {
        r -= &maps.input_map * stack(us);
    }
    let gram = linalg::symmetrize(&(lam.transpose() * lam));
    let rhs = lam.transpose() * r;
    let x0 = linalg::spd_solve(&gram, &Mat::from_column_slice(rhs.len(), 1, rhs.as_slice()), "ΛᵀΛ")?
        .column(0)
        .into_owned();
    let mut x = x0.clone();
    for k in 0..n_h {
        x = plant.a() * &x;
        if let Some(b) = plant.b() {
            x += b * &us[k];
        }
    }
    Ok(FirEstimate {
        window_start: x0,
        current: x,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linmodel::ObserverGain;

    #[test]
    fn exact_on_noise_free_window() {
        let a = Mat::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 0.9]);
        let b = Mat::from_row_slice(2, 1, &[0.0, 0.1]);
        let c = Mat::from_row_slice(1, 2, &[1.0, 0.0]);
        let plant = LinearPlant::with_direct_noise(a.clone(), Some(b.clone()), c.clone()).unwrap();
        let obs = ObserverGain::for_plant(&plant, Mat::from_row_slice(2, 1, &[0.5, 0.3])).unwrap();
        let maps = BatchMaps::new(&plant, &obs, 4).unwrap();
        let mut x = Vector::from_vec(vec![0.7, -1.2]);
        let x_start = x.clone();
        let (mut ys, mut us) = (Vec::new(), Vec::new());
        for k in 0..5 {
            ys.push(&c * &x);
            let u = Vector::from_element(1, (k as f64).sin());
            if k < 4 {
                x = &a * &x + &b * &u;
                us.push(u);
            }
        }
        let est = ufir_estimate(&ys, &us, &plant, &maps).unwrap();
        assert!((est.window_start - x_start).amax() < 1e-10);
        assert!((est.current - x).amax() < 1e-10);
    }
}
