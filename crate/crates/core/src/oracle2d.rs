//! Exact analytics for the linear-Gaussian toy: prior `x ~ N(0, I)` on `n`
//! dimensions, noiseless measurement `y = D x` with `D` of full row rank.
//!
//! Conditioning a standard normal on the affine set `{x : D x = y}` gives a
//! degenerate Gaussian with mean `D⁺ y` (the minimum-norm feasible point)
//! and covariance `I - D⁺ D` (the orthogonal projector onto `ker D`).
//! Everything here is double precision; it is the reference the learned
//! components are checked against.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::numerics::RngStream;

#[derive(Clone, Debug, PartialEq)]
pub struct LinearGaussianProblem {
    d: DMatrix<f64>,
    y: DVector<f64>,
    pinv: DMatrix<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Posterior {
    pub mean: DVector<f64>,
    pub covariance: DMatrix<f64>,
}

impl LinearGaussianProblem {
    /// `rows` is `D` row by row; `y` has one entry per row.
    pub fn new(rows: &[&[f64]], y: &[f64]) -> Result<Self> {
        let m = rows.len();
        let n = rows.first().map_or(0, |r| r.len());
        if m == 0 || rows.iter().any(|r| r.len() != n) {
            return Err(Error::Contract(
                "D must be a non-empty rectangular matrix".into(),
            ));
        }
        if y.len() != m {
            return Err(Error::shape("measurement", &[m], &[y.len()]));
        }
        let d = DMatrix::from_fn(m, n, |i, j| rows[i][j]);
        Self::from_matrix(d, DVector::from_column_slice(y))
    }

    pub fn from_matrix(d: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        let (m, n) = d.shape();
        if m > n {
            return Err(Error::Contract(format!("D is {m}x{n}; need m <= n")));
        }
        let sv = d.singular_values();
        let smax = sv.iter().cloned().fold(0.0, f64::max);
        let tol = n as f64 * f64::EPSILON * smax;
        let chol = (&d * d.transpose()).cholesky();
        let (Some(chol), true) = (chol, sv.iter().all(|&s| s > tol)) else {
            return Err(Error::RankDeficient { rows: m, cols: n });
        };
        let pinv = d.transpose() * chol.inverse();
        Ok(LinearGaussianProblem { d, y, pinv })
    }

    pub fn dim(&self) -> usize {
        self.d.ncols()
    }

    pub fn measurement_dim(&self) -> usize {
        self.d.nrows()
    }

    pub fn d(&self) -> &DMatrix<f64> {
        &self.d
    }

    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }

    /// Same operator, different measurement.
    pub fn with_measurement(&self, y: &[f64]) -> Result<Self> {
        if y.len() != self.measurement_dim() {
            return Err(Error::shape(
                "measurement",
                &[self.measurement_dim()],
                &[y.len()],
            ));
        }
        Ok(LinearGaussianProblem {
            y: DVector::from_column_slice(y),
            ..self.clone()
        })
    }

    /// `Dᵀ (D Dᵀ)⁻¹`.
    pub fn pseudoinverse(&self) -> &DMatrix<f64> {
        &self.pinv
    }

    /// The Moore-Penrose point `D⁺ y`.
    pub fn moore_penrose_point(&self) -> DVector<f64> {
        &self.pinv * &self.y
    }

    /// `I - D⁺ D`, the projector onto the kernel of `D`.
    pub fn kernel_projector(&self) -> DMatrix<f64> {
        DMatrix::identity(self.dim(), self.dim()) - &self.pinv * &self.d
    }

    pub fn posterior(&self) -> Posterior {
        Posterior {
            mean: self.moore_penrose_point(),
            covariance: self.kernel_projector(),
        }
    }

    /// `‖D x - y‖₂`.
    pub fn feasibility_residual(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.dim() {
            return Err(Error::shape(
                "feasibility_residual",
                &[self.dim()],
                &[x.len()],
            ));
        }
        let x = DVector::from_column_slice(x);
        Ok((&self.d * x - &self.y).norm())
    }

    /// `n` exact posterior draws `mean + P ξ`. Because the covariance `P`
    /// is an orthogonal projector it is its own square root.
    pub fn posterior_sampler(&self, rng: &mut RngStream, n: usize) -> Vec<DVector<f64>> {
        let Posterior { mean, covariance } = self.posterior();
        (0..n)
            .map(|_| {
                let xi = DVector::from_fn(self.dim(), |_, _| rng.normal());
                &mean + &covariance * xi
            })
            .collect()
    }
}

/// Sample mean and per-coordinate (population) variance of a set of points.
pub fn moments(points: &[DVector<f64>]) -> (DVector<f64>, DVector<f64>) {
    let n = points.len().max(1) as f64;
    let dim = points.first().map_or(0, |p| p.len());
    let mut mean = DVector::zeros(dim);
    for p in points {
        mean += p;
    }
    mean /= n;
    let mut var = DVector::zeros(dim);
    for p in points {
        var += (p - &mean).map(|v| v * v);
    }
    var /= n;
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &DMatrix<f64>, b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn selector_posterior() {
        let p = LinearGaussianProblem::new(&[&[1.0, 0.0]], &[2.0]).unwrap();
        let post = p.posterior();
        assert!((post.mean[0] - 2.0).abs() < 1e-15 && post.mean[1].abs() < 1e-15);
        // column-major iteration
        assert!(close(&post.covariance, &[0.0, 0.0, 0.0, 1.0], 1e-15));
        assert!((p.feasibility_residual(&[3.0, 7.0]).unwrap() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn averaging_posterior() {
        let p = LinearGaussianProblem::new(&[&[0.5, 0.5]], &[1.0]).unwrap();
        let post = p.posterior();
        assert!((post.mean[0] - 1.0).abs() < 1e-12 && (post.mean[1] - 1.0).abs() < 1e-12);
        assert!(close(&post.covariance, &[0.5, -0.5, -0.5, 0.5], 1e-12));
    }

    #[test]
    fn identity_has_point_posterior() {
        let p = LinearGaussianProblem::new(&[&[1.0, 0.0], &[0.0, 1.0]], &[0.3, -2.0]).unwrap();
        let post = p.posterior();
        assert!((post.mean[0] - 0.3).abs() < 1e-15 && (post.mean[1] + 2.0).abs() < 1e-15);
        assert!(post.covariance.amax() < 1e-15);
        let mut rng = RngStream::new(1, 0);
        for s in p.posterior_sampler(&mut rng, 10) {
            assert_eq!(s, post.mean);
        }
    }

    #[test]
    fn rank_deficiency_is_reported() {
        let err = LinearGaussianProblem::new(&[&[1.0, 1.0], &[2.0, 2.0]], &[0.0, 0.0]);
        assert!(matches!(err, Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn sampler_moments_and_feasibility() {
        let p = LinearGaussianProblem::new(&[&[1.0, 0.0]], &[2.0]).unwrap();
        let mut rng = RngStream::new(9, 0);
        let s = p.posterior_sampler(&mut rng, 10_000);
        let (mean, var) = moments(&s);
        assert!((mean[0] - 2.0).abs() < 0.05 && mean[1].abs() < 0.05);
        assert!((var[1] - 1.0).abs() < 0.05);
        assert!(s
            .iter()
            .all(|x| p.feasibility_residual(x.as_slice()).unwrap() < 1e-5));
    }
}
