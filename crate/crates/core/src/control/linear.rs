//! Linear equilibrium maps `g(u) = G u`: closed-form optimal controls,
//! gradient descent and gradient flow on `L(u) = ½‖G u − x*‖²`.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_len, Error, Result};
use crate::integrate::{rk4_solve, TimeGrid};

#[derive(Debug, Clone, PartialEq)]
pub struct LinearControlProblem {
    pub g: DMatrix<f64>,
    pub x_star: DVector<f64>,
    pub lambda: f64,
}

impl LinearControlProblem {
    pub fn new(g: DMatrix<f64>, x_star: DVector<f64>) -> Result<Self> {
        check_len("target", g.nrows(), x_star.len())?;
        if g.iter().chain(x_star.iter()).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("linear control problem".into()));
        }
        Ok(Self { g, x_star, lambda: 0.0 })
    }

    pub fn with_ridge(mut self, lambda: f64) -> Self {
        self.lambda = lambda;
        self
    }

    /// `Gᵀ(G u − x*)`.
    pub fn gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        self.g.transpose() * (&self.g * u - &self.x_star)
    }

    /// Singular values, largest first.
    pub fn singular_values(&self) -> Vec<f64> {
        let mut s: Vec<f64> = self.g.clone().svd(false, false).singular_values.iter().copied().collect();
        s.sort_by(|a, b| b.total_cmp(a));
        s
    }

    /// `(σ_max, σ_min)` over the first `min(d, q)` singular values.
    pub fn extreme_singular_values(&self) -> (f64, f64) {
        let s = self.singular_values();
        (s[0], *s.last().unwrap())
    }

    /// `κ(G) = σ_max / σ_min`.
    pub fn condition_number(&self) -> f64 {
        let (hi, lo) = self.extreme_singular_values();
        hi / lo
    }

    /// Step size `2 / (L + μ)` with `L = σ_max²`, `μ = σ_min²`.
    pub fn optimal_step(&self) -> f64 {
        let (hi, lo) = self.extreme_singular_values();
        2.0 / (hi * hi + lo * lo)
    }

    /// Contraction factor `(κ² − 1)/(κ² + 1)` of gradient descent at the optimal step.
    pub fn optimal_rate(&self) -> f64 {
        let k2 = self.condition_number().powi(2);
        (k2 - 1.0) / (k2 + 1.0)
    }
}

/// Minimum-norm least-squares control `G† x*` via the SVD.
pub fn linear_minnorm(prob: &LinearControlProblem) -> DVector<f64> {
    let (d, q) = prob.g.shape();
    let svd = prob.g.clone().svd(true, true);
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    if smax == 0.0 {
        return DVector::zeros(q);
    }
    let eps = d.max(q) as f64 * smax * f64::EPSILON;
    svd.pseudo_inverse(eps).expect("both factors were computed") * &prob.x_star
}

/// Ridge control `(GᵀG + λI)⁻¹ Gᵀ x*` by LU factorisation.
pub fn ridge_solve(prob: &LinearControlProblem) -> Result<DVector<f64>> {
    if !(prob.lambda > 0.0) {
        return Err(Error::InvalidConfig("ridge parameter must be positive".into()));
    }
    let q = prob.g.ncols();
    let gt = prob.g.transpose();
    let a = &gt * &prob.g + DMatrix::identity(q, q) * prob.lambda;
    a.lu()
        .solve(&(gt * &prob.x_star))
        .ok_or_else(|| Error::NonFinite("singular ridge system".into()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GdHistory {
    pub iterates: Vec<DVector<f64>>,
    /// `‖u_k − u*‖` for every recorded iterate.
    pub errors: Vec<f64>,
    pub diverged: bool,
}

impl GdHistory {
    /// Per-step ratios `e_{k+1} / e_k` while `e_k` is above `floor`.
    pub fn ratios(&self, floor: f64) -> Vec<f64> {
        self.errors
            .windows(2)
            .take_while(|w| w[0] > floor && w[1] > floor)
            .map(|w| w[1] / w[0])
            .collect()
    }
}

/// `u_{k+1} = u_k − η Gᵀ(G u_k − x*)`. Stops early and flags divergence once
/// `‖u_k‖ > 1e6`.
pub fn gd_linear(prob: &LinearControlProblem, u0: &DVector<f64>, eta: f64, iters: usize) -> Result<GdHistory> {
    check_len("initial control", prob.g.ncols(), u0.len())?;
    if !(eta > 0.0) {
        return Err(Error::InvalidConfig("step size must be positive".into()));
    }
    let u_star = linear_minnorm(prob);
    let mut u = u0.clone();
    let mut hist = GdHistory {
        errors: vec![(&u - &u_star).norm()],
        iterates: vec![u.clone()],
        diverged: false,
    };
    for _ in 0..iters {
        u -= prob.gradient(&u) * eta;
        hist.errors.push((&u - &u_star).norm());
        hist.iterates.push(u.clone());
        if !(u.norm() <= 1e6) {
            hist.diverged = true;
            break;
        }
    }
    Ok(hist)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlowHistory {
    pub times: Vec<f64>,
    pub controls: Vec<DVector<f64>>,
    pub errors: Vec<f64>,
}

/// RK4 integration of `du/dt = −η Gᵀ(G u − x*)`.
pub fn gradient_flow_linear(
    prob: &LinearControlProblem,
    u0: &DVector<f64>,
    eta: f64,
    grid: TimeGrid,
) -> Result<FlowHistory> {
    check_len("initial control", prob.g.ncols(), u0.len())?;
    let rhs = |u: &[f64], _: &[f64]| -> Vec<f64> {
        let g = prob.gradient(&DVector::from_column_slice(u));
        g.iter().map(|v| -eta * v).collect()
    };
    let traj = rk4_solve(rhs, u0.as_slice(), &[], grid)?;
    let u_star = linear_minnorm(prob);
    let controls: Vec<DVector<f64>> = traj.states.iter().map(|s| DVector::from_column_slice(s)).collect();
    let errors = controls.iter().map(|u| (u - &u_star).norm()).collect();
    Ok(FlowHistory {
        times: traj.times,
        controls,
        errors,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn prob(rows: usize, cols: usize, g: &[f64], x: &[f64]) -> LinearControlProblem {
        LinearControlProblem::new(DMatrix::from_row_slice(rows, cols, g), DVector::from_column_slice(x)).unwrap()
    }

    #[test]
    fn minnorm_cases() {
        let p = prob(2, 2, &[1.0, 0.0, 0.0, 1.0], &[3.0, -1.0]);
        assert!((linear_minnorm(&p) - DVector::from_column_slice(&[3.0, -1.0])).norm() < 1e-14);
        let p = prob(1, 2, &[1.0, 0.0], &[2.0]);
        assert!((linear_minnorm(&p) - DVector::from_column_slice(&[2.0, 0.0])).norm() < 1e-14);
        let p = prob(2, 3, &[0.0; 6], &[1.0, 1.0]);
        assert_eq!(linear_minnorm(&p), DVector::zeros(3));
    }

    #[test]
    fn ridge_cases() {
        let p = prob(2, 2, &[1.0, 0.0, 0.0, 1.0], &[3.0, -1.0]).with_ridge(1.0);
        assert!((ridge_solve(&p).unwrap() - DVector::from_column_slice(&[1.5, -0.5])).norm() < 1e-14);
        let p = prob(2, 2, &[2.0, 1.0, 0.5, 3.0], &[1.0, 2.0]);
        let huge = ridge_solve(&p.clone().with_ridge(1e12)).unwrap();
        assert!(huge.norm() < 1e-10);
        let tiny = ridge_solve(&p.clone().with_ridge(1e-10)).unwrap();
        assert!((tiny - linear_minnorm(&p)).norm() <= 1e-6);
        assert!(ridge_solve(&p).is_err());
    }

    #[test]
    fn gd_identity_single_step() {
        let p = prob(2, 2, &[1.0, 0.0, 0.0, 1.0], &[3.0, -1.0]);
        assert_eq!(p.optimal_step(), 1.0);
        let h = gd_linear(&p, &DVector::zeros(2), 1.0, 3).unwrap();
        assert_eq!(h.errors[1], 0.0);
    }

    #[test]
    fn gd_divergence_flagged() {
        let p = prob(2, 2, &[2.0, 0.0, 0.0, 1.0], &[1.0, 1.0]);
        let eta = 2.0 / 4.0 * 1.05;
        let h = gd_linear(&p, &DVector::from_column_slice(&[0.0, 1.0]), eta, 10_000).unwrap();
        assert!(h.diverged);
        assert!(h.errors.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn scalar_flow_closed_form() {
        let p = prob(1, 1, &[1.5], &[3.0]);
        let (eta, u0) = (0.8, -1.0);
        let grid = TimeGrid::new(0.0, 2.0, 400).unwrap();
        let flow = gradient_flow_linear(&p, &DVector::from_element(1, u0), eta, grid).unwrap();
        let us = 2.0;
        for (t, u) in flow.times.iter().zip(&flow.controls) {
            let exact = us + (-eta * 2.25 * t).exp() * (u0 - us);
            assert!((u[0] - exact).abs() < 1e-8);
        }
    }
}
