//! Axis-aligned boxes standing in for the compact convex constraint sets, and
//! an outer robust positively invariant (RPI) box for `e⁺ = A_L e + ϑ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{self, Mat};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSet {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
}

impl BoxSet {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.len() != upper.len() {
            return Err(Error::dims("box", lower.len(), upper.len()));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l <= u)) {
            return Err(Error::InvalidParameter("box lower bound exceeds upper bound".into()));
        }
        Ok(Self { lower, upper })
    }

    /// `[−r, r]^d`.
    pub fn symmetric(dim: usize, r: f64) -> Self {
        Self {
            lower: vec![-r.abs(); dim],
            upper: vec![r.abs(); dim],
        }
    }

    pub fn point(x: &[f64]) -> Self {
        Self {
            lower: x.to_vec(),
            upper: x.to_vec(),
        }
    }

    pub fn zero(dim: usize) -> Self {
        Self::symmetric(dim, 0.0)
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    /// Origin strictly inside (the 𝒞-set condition for boxes).
    pub fn is_c_set(&self) -> bool {
        self.lower.iter().zip(&self.upper).all(|(l, u)| *l < 0.0 && *u > 0.0)
    }

    pub fn contains_point(&self, x: &[f64], tol: f64) -> bool {
        x.len() == self.dim()
            && x
                .iter()
                .zip(self.lower.iter().zip(&self.upper))
                .all(|(v, (l, u))| *v >= l - tol && *v <= u + tol)
    }

    pub fn contains_box(&self, other: &BoxSet) -> bool {
        other.dim() == self.dim()
            && (0..self.dim()).all(|i| other.lower[i] >= self.lower[i] && other.upper[i] <= self.upper[i])
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn radius(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (u - l)).collect()
    }

    /// Largest Euclidean norm over the box (attained at a vertex).
    pub fn max_norm(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| l.abs().max(u.abs()).powi(2))
            .sum::<f64>()
            .sqrt()
    }

    /// Cartesian product `self × other`.
    pub fn product(&self, other: &BoxSet) -> BoxSet {
        BoxSet {
            lower: self.lower.iter().chain(&other.lower).cloned().collect(),
            upper: self.upper.iter().chain(&other.upper).cloned().collect(),
        }
    }

    /// Hausdorff distance (∞-norm) between two boxes.
    pub fn hausdorff(&self, other: &BoxSet) -> Result<f64> {
        if self.dim() != other.dim() {
            return Err(Error::dims("hausdorff", self.dim(), other.dim()));
        }
        Ok((0..self.dim())
            .map(|i| (self.lower[i] - other.lower[i]).abs().max((self.upper[i] - other.upper[i]).abs()))
            .fold(0.0, f64::max))
    }
}

/// Interval hull of `{M x : x ∈ box}`.
pub fn linear_image(m: &Mat, b: &BoxSet) -> Result<BoxSet> {
    if m.ncols() != b.dim() {
        return Err(Error::dims("linear_image", format!("{} columns", b.dim()), m.ncols()));
    }
    let mut lower = vec![0.0; m.nrows()];
    let mut upper = vec![0.0; m.nrows()];
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            let (x, y) = (m[(i, j)] * b.lower[j], m[(i, j)] * b.upper[j]);
            lower[i] += x.min(y);
            upper[i] += x.max(y);
        }
    }
    Ok(BoxSet { lower, upper })
}

pub fn minkowski_sum(a: &BoxSet, b: &BoxSet) -> Result<BoxSet> {
    if a.dim() != b.dim() {
        return Err(Error::dims("minkowski_sum", a.dim(), b.dim()));
    }
    Ok(BoxSet {
        lower: a.lower.iter().zip(&b.lower).map(|(x, y)| x + y).collect(),
        upper: a.upper.iter().zip(&b.upper).map(|(x, y)| x + y).collect(),
    })
}

/// Range of `ϑ = G w − L ν` for `w ∈ 𝒲`, `ν ∈ 𝒱`.
pub fn disturbance_box(g: &Mat, l: &Mat, w: &BoxSet, v: &BoxSet) -> Result<BoxSet> {
    minkowski_sum(&linear_image(g, w)?, &linear_image(&(-l), v)?)
}

pub const RPI_MAX_ITER: usize = 10_000;

#[derive(Debug, Clone, PartialEq)]
pub struct RpiBox {
    pub set: BoxSet,
    pub iterations: usize,
    /// Componentwise inflation added on top of the last iterate.
    pub inflation: Vec<f64>,
}

/// Outer RPI box for `e⁺ = A_L e + ϑ`, `ϑ ∈ q_box`.
///
/// Iterates `S_{k+1} = A_L S_k ⊕ Q` from `S_0 = {0}` until the Hausdorff gap
/// drops below `tol`, then inflates the last iterate by the geometric tail
/// `(I − |A_L|)⁻¹ d_k`, where `d_k` bounds the last per-component growth.
/// The box map acts on radii through `|A_L|`, so an invariant box only exists
/// when `ρ(|A_L|) < 1`; otherwise the iteration would diverge and an error is
/// returned up front.
pub fn rpi_box_outer(a_l: &Mat, q_box: &BoxSet, tol: f64) -> Result<RpiBox> {
    rpi_box_outer_capped(a_l, q_box, tol, RPI_MAX_ITER)
}

pub fn rpi_box_outer_capped(a_l: &Mat, q_box: &BoxSet, tol: f64, max_iter: usize) -> Result<RpiBox> {
    let n = a_l.nrows();
    if !a_l.is_square() || q_box.dim() != n {
        return Err(Error::dims("rpi_box_outer", n, q_box.dim()));
    }
    if !(tol > 0.0) {
        return Err(Error::InvalidParameter("rpi tolerance must be positive".into()));
    }
    let rho = linalg::spectral_radius(a_l)?;
    if rho >= 1.0 {
        return Err(Error::NotSchur { spectral_radius: rho });
    }
    let abs_a = a_l.map(f64::abs);
    let abs_rho = linalg::spectral_radius(&abs_a)?;
    if abs_rho >= 1.0 {
        return Err(Error::NoInvariantBox { abs_spectral_radius: abs_rho });
    }

    let mut s = BoxSet::zero(n);
    let mut iterations = 0;
    let (next, gap) = loop {
        let next = minkowski_sum(&linear_image(a_l, &s)?, q_box)?;
        iterations += 1;
        let gap = next.hausdorff(&s)?;
        if gap < tol {
            break (next, gap);
        }
        if iterations >= max_iter {
            return Err(Error::NoConvergence {
                context: "rpi_box_outer",
                iterations,
                residual: gap,
            });
        }
        s = next;
    };
    let _ = gap;

    // One more image gives the growth vector d = |Δcenter| + Δradius.
    let after = minkowski_sum(&linear_image(a_l, &next)?, q_box)?;
    let (c0, r0) = (next.center(), next.radius());
    let (c1, r1) = (after.center(), after.radius());
    let d: Vec<f64> = (0..n).map(|i| (c1[i] - c0[i]).abs() + (r1[i] - r0[i]).max(0.0)).collect();

    let inv = (Mat::identity(n, n) - &abs_a).try_inverse().ok_or(Error::Singular {
        context: "I - |A_L|",
        condition: f64::INFINITY,
    })?;
    let scale = next
        .lower
        .iter()
        .chain(&next.upper)
        .fold(0.0f64, |acc, v| acc.max(v.abs()));
    let mut slack = 1e-6;
    for _ in 0..8 {
        let pad: Vec<f64> = d
            .iter()
            .map(|di| if *di > 0.0 { di * (1.0 + slack) + 16.0 * f64::EPSILON * scale } else { 0.0 })
            .collect();
        let pad = linalg::Vector::from_vec(pad);
        let inflation: Vec<f64> = (&inv * &pad).iter().map(|v| v.max(0.0)).collect();
        let set = BoxSet {
            lower: next.lower.iter().zip(&inflation).map(|(l, t)| l - t).collect(),
            upper: next.upper.iter().zip(&inflation).map(|(u, t)| u + t).collect(),
        };
        if is_rpi(a_l, q_box, &set)? {
            return Ok(RpiBox { set, iterations, inflation });
        }
        slack *= 100.0;
    }
    Err(Error::NoConvergence {
        context: "rpi_box_outer certificate",
        iterations,
        residual: d.iter().cloned().fold(0.0, f64::max),
    })
}

/// Certificate `A_L E ⊕ Q ⊆ E`.
pub fn is_rpi(a_l: &Mat, q_box: &BoxSet, e: &BoxSet) -> Result<bool> {
    Ok(e.contains_box(&minkowski_sum(&linear_image(a_l, e)?, q_box)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b(l: &[f64], u: &[f64]) -> BoxSet {
        BoxSet::new(l.to_vec(), u.to_vec()).unwrap()
    }

    #[test]
    fn linear_image_examples() {
        let sq = BoxSet::symmetric(2, 1.0);
        assert_eq!(linear_image(&Mat::from_row_slice(1, 2, &[1.0, 1.0]), &sq).unwrap(), b(&[-2.0], &[2.0]));
        let skew = b(&[-1.0, 0.5], &[3.0, 2.0]);
        assert_eq!(linear_image(&Mat::identity(2, 2), &skew).unwrap(), skew);
        let m = Mat::from_row_slice(2, 2, &[2.0, 0.0, 0.0, -3.0]);
        assert_eq!(linear_image(&m, &sq).unwrap(), b(&[-2.0, -3.0], &[2.0, 3.0]));
        assert!(linear_image(&m, &BoxSet::symmetric(3, 1.0)).is_err());
    }

    #[test]
    fn minkowski_examples() {
        assert_eq!(minkowski_sum(&b(&[-1.0], &[1.0]), &b(&[-2.0], &[2.0])).unwrap(), b(&[-3.0], &[3.0]));
        let a = b(&[-1.0, 0.0], &[2.0, 3.0]);
        assert_eq!(minkowski_sum(&a, &BoxSet::zero(2)).unwrap(), a);
    }

    #[test]
    fn disturbance_from_noise_bounds() {
        let q = disturbance_box(
            &Mat::from_element(1, 1, 1.0),
            &Mat::from_element(1, 1, 0.5),
            &BoxSet::symmetric(1, 0.1),
            &BoxSet::symmetric(1, 0.25),
        )
        .unwrap();
        assert!((q.lower[0] + 0.225).abs() < 1e-15 && (q.upper[0] - 0.225).abs() < 1e-15);
    }

    #[test]
    fn rpi_scalar_geometric_series() {
        let e = rpi_box_outer(&Mat::from_element(1, 1, 0.5), &BoxSet::symmetric(1, 1.0), 1e-6).unwrap();
        assert!(e.set.upper[0] >= 2.0 && e.set.upper[0] <= 2.0 + 1e-5);
        assert!(e.set.lower[0] <= -2.0 && e.set.lower[0] >= -2.0 - 1e-5);
    }

    #[test]
    fn rpi_nilpotent_is_q() {
        let q = b(&[-1.0, -0.5], &[2.0, 0.25]);
        let e = rpi_box_outer(&Mat::zeros(2, 2), &q, 1e-9).unwrap();
        assert_eq!(e.set, q);
    }

    #[test]
    fn rpi_diagonal() {
        let a = Mat::from_diagonal(&linalg::Vector::from_vec(vec![0.5, 0.25]));
        let e = rpi_box_outer(&a, &BoxSet::symmetric(2, 1.0), 1e-8).unwrap();
        let exact = b(&[-2.0, -4.0 / 3.0], &[2.0, 4.0 / 3.0]);
        assert!(e.set.contains_box(&exact));
        assert!(e.set.hausdorff(&exact).unwrap() < 1e-7);
    }

    #[test]
    fn rpi_rejects_unstable_and_non_box_invariant() {
        let unstable = Mat::from_element(1, 1, 1.1);
        assert!(matches!(rpi_box_outer(&unstable, &BoxSet::symmetric(1, 1.0), 1e-6), Err(Error::NotSchur { .. })));
        // Schur stable (ρ = 0.9) but |A| has spectral radius > 1
        let rot = Mat::from_row_slice(2, 2, &[0.9 * 0.6, -0.9 * 0.8, 0.9 * 0.8, 0.9 * 0.6]);
        assert!(matches!(
            rpi_box_outer(&rot, &BoxSet::symmetric(2, 1.0), 1e-6),
            Err(Error::NoInvariantBox { .. })
        ));
    }

    #[test]
    fn c_set_flag() {
        assert!(BoxSet::symmetric(2, 1.0).is_c_set());
        assert!(!b(&[0.0, -1.0], &[1.0, 1.0]).is_c_set());
        assert!(BoxSet::new(vec![1.0], vec![0.0]).is_err());
    }

    #[test]
    fn json_shape() {
        let s = serde_json::to_string(&b(&[-1.0], &[2.0])).unwrap();
        assert_eq!(s, r#"{"lower":[-1.0],"upper":[2.0]}"#);
    }
}
