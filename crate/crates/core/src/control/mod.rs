//! Feedback control through the equilibrium map.
//!
//! The controller drives `u` down the gradient of `½‖g^{∘k}(x, u) − x*‖²`,
//! where `g^{∘k}` applies `g` k times at fixed `u`, and smooth Heaviside gates
//! throttle each channel near the edges of its admissible range.

pub mod linear;

use serde::{Deserialize, Serialize};

use crate::dynamics::SplitField;
use crate::error::{check_len, Error, Result};
use crate::integrate::{NoisePath, TimeGrid};

/// `H(x, ℓ) = 1 / (1 + e^{−ℓx})`.
pub fn smooth_heaviside(x: f64, ell: f64) -> f64 {
    crate::nnet::sigmoid(ell * x)
}

/// One gate term `α·H(u − δ, ℓ)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeavisideTerm {
    pub alpha: f64,
    pub delta: f64,
    pub ell: f64,
}

impl HeavisideTerm {
    pub fn new(alpha: f64, delta: f64, ell: f64) -> Result<Self> {
        if alpha != 1.0 && alpha != -1.0 {
            return Err(Error::InvalidConfig(format!("gate sign must be ±1, got {alpha}")));
        }
        if !(ell > 0.0) {
            return Err(Error::InvalidConfig(format!("gate rate must be positive, got {ell}")));
        }
        Ok(Self { alpha, delta, ell })
    }

    /// Gate that is open above `lo` and closed below it.
    pub fn lower(lo: f64, ell: f64) -> Self {
        Self { alpha: 1.0, delta: lo, ell }
    }

    /// Term that closes the gate above `hi` (pair it with [`HeavisideTerm::lower`]).
    pub fn upper(hi: f64, ell: f64) -> Self {
        Self { alpha: -1.0, delta: hi, ell }
    }

    pub fn eval(&self, u: f64) -> f64 {
        self.alpha * smooth_heaviside(u - self.delta, self.ell)
    }
}

/// `φ(u)_i = Σ_j α_j H(u_i − δ_j, ℓ_j)`; a channel without terms has gate 1.
pub fn phi(u: &[f64], constraints: &[Vec<HeavisideTerm>]) -> Vec<f64> {
    u.iter()
        .enumerate()
        .map(|(i, &ui)| match constraints.get(i) {
            Some(terms) if !terms.is_empty() => terms.iter().map(|t| t.eval(ui)).sum(),
            _ => 1.0,
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlPolicyCfg {
    pub k: usize,
    pub eta: f64,
    /// Per-channel gate terms; missing or empty channels are unconstrained.
    pub constraints: Vec<Vec<HeavisideTerm>>,
}

impl ControlPolicyCfg {
    pub fn new(k: usize, eta: f64, constraints: Vec<Vec<HeavisideTerm>>) -> Result<Self> {
        let cfg = Self { k, eta, constraints };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k == 0 {
            return Err(Error::InvalidConfig("iteration depth k must be at least 1".into()));
        }
        if !(self.eta > 0.0) {
            return Err(Error::InvalidConfig("control strength must be positive".into()));
        }
        Ok(())
    }
}

/// `g^{∘k}(x, u)`: k successive applications of `g` at fixed `u`.
pub fn iterate_g(field: &impl SplitField, x: &[f64], u: &[f64], k: usize) -> Vec<f64> {
    let mut y = x.to_vec();
    for _ in 0..k {
        y = field.equilibrium_map(&y, u);
    }
    y
}

/// `∇_u ½‖g^{∘k}(x, u) − x*‖²`; `u` enters every level of the composition.
pub fn control_objective_grad(
    field: &impl SplitField,
    x: &[f64],
    u: &[f64],
    x_star: &[f64],
    k: usize,
) -> Result<Vec<f64>> {
    check_len("state", field.state_dim(), x.len())?;
    check_len("control", field.control_dim(), u.len())?;
    check_len("target", field.state_dim(), x_star.len())?;
    let mut levels = Vec::with_capacity(k + 1);
    levels.push(x.to_vec());
    for i in 0..k {
        let next = field.equilibrium_map(&levels[i], u);
        levels.push(next);
    }
    let mut c: Vec<f64> = levels[k].iter().zip(x_star).map(|(a, b)| a - b).collect();
    let mut grad = vec![0.0; u.len()];
    for i in (0..k).rev() {
        let (cx, cu) = field.equilibrium_map_vjp(&levels[i], u, &c);
        for (g, v) in grad.iter_mut().zip(&cu) {
            *g += v;
        }
        c = cx;
    }
    Ok(grad)
}

/// A target `x*` that becomes active at `t_start`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub t_start: f64,
    pub x_star: Vec<f64>,
}

/// Evenly spaced switches: target `i` is active on `[i·period, (i+1)·period)`.
pub fn periodic_schedule(targets: Vec<Vec<f64>>, period: f64) -> Vec<Target> {
    targets
        .into_iter()
        .enumerate()
        .map(|(i, x_star)| Target {
            t_start: i as f64 * period,
            x_star,
        })
        .collect()
}

/// Joint record of a closed-loop run.
#[derive(Debug, Clone, PartialEq)]
pub struct FeedbackTrial {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub target_ids: Vec<usize>,
    /// Per-component extremes of the control over every step, recorded or not.
    pub control_min: Vec<f64>,
    pub control_max: Vec<f64>,
}

/// Everything a closed-loop run needs besides the plant and the controller.
#[derive(Debug, Clone)]
pub struct FeedbackSetup<'a> {
    pub policy: &'a ControlPolicyCfg,
    pub targets: &'a [Target],
    pub x0: &'a [f64],
    pub u0: &'a [f64],
    pub grid: TimeGrid,
    pub noise: &'a NoisePath,
    /// Keep every `record_stride`-th step.
    pub record_stride: usize,
}

/// Co-integrate plant and controller with Euler–Maruyama. The plant state gets
/// `drift(x, u)` plus diagonal diffusion; the control follows
/// `du/dt = −η ∇_u(½‖g^{∘k} − x*‖²) ⊙ φ(u)` without noise.
pub fn feedback_simulate(
    drift: impl Fn(&[f64], &[f64]) -> Vec<f64>,
    diffusion: impl Fn(&[f64]) -> Vec<f64>,
    controller: &impl SplitField,
    setup: &FeedbackSetup<'_>,
) -> Result<FeedbackTrial> {
    let FeedbackSetup {
        policy,
        targets,
        x0,
        u0,
        grid,
        noise,
        record_stride,
    } = *setup;
    policy.validate()?;
    if targets.is_empty() {
        return Err(Error::InvalidConfig("no control targets".into()));
    }
    if targets.windows(2).any(|w| w[1].t_start < w[0].t_start) {
        return Err(Error::InvalidConfig("targets must be ordered in time".into()));
    }
    check_len("state", controller.state_dim(), x0.len())?;
    check_len("control", controller.control_dim(), u0.len())?;
    check_len("noise steps", grid.n_steps, noise.increments.len())?;
    let stride = record_stride.max(1);
    let h = grid.step();
    let sqrt_h = h.sqrt();
    let mut x = x0.to_vec();
    let mut u = u0.to_vec();
    let mut active = 0;
    let mut trial = FeedbackTrial {
        times: Vec::new(),
        states: Vec::new(),
        controls: Vec::new(),
        target_ids: Vec::new(),
        control_min: u.clone(),
        control_max: u.clone(),
    };
    for n in 0..=grid.n_steps {
        let t = grid.time(n);
        while active + 1 < targets.len() && targets[active + 1].t_start <= t {
            active += 1;
        }
        if n % stride == 0 || n == grid.n_steps {
            trial.times.push(t);
            trial.states.push(x.clone());
            trial.controls.push(u.clone());
            trial.target_ids.push(active);
        }
        if n == grid.n_steps {
            break;
        }
        let dx = drift(&x, &u);
        let sig = diffusion(&x);
        let grad = control_objective_grad(controller, &x, &u, &targets[active].x_star, policy.k)?;
        let gate = phi(&u, &policy.constraints);
        let xi = &noise.increments[n];
        for i in 0..x.len() {
            x[i] += h * dx[i] + sqrt_h * sig[i] * xi[i];
        }
        for j in 0..u.len() {
            u[j] -= h * policy.eta * grad[j] * gate[j];
            trial.control_min[j] = trial.control_min[j].min(u[j]);
            trial.control_max[j] = trial.control_max[j].max(u[j]);
        }
        if x.iter().chain(&u).any(|v| !v.is_finite()) {
            return Err(Error::Integration {
                step: n + 1,
                reason: format!("closed loop diverged at t = {}", grid.time(n + 1)),
            });
        }
    }
    Ok(trial)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// `g(x, u) = a·x + B u`, with `a` scalar.
    struct AffineMap {
        a: f64,
        b: Vec<f64>,
        d: usize,
        q: usize,
    }

    impl SplitField for AffineMap {
        fn state_dim(&self) -> usize {
            self.d
        }
        fn control_dim(&self) -> usize {
            self.q
        }
        fn decay(&self, x: &[f64]) -> Vec<f64> {
            vec![-1.0; x.len()]
        }
        fn equilibrium_map(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
            (0..self.d)
                .map(|i| self.a * x[i] + (0..self.q).map(|j| self.b[i * self.q + j] * u[j]).sum::<f64>())
                .collect()
        }
        fn equilibrium_map_vjp(&self, _x: &[f64], _u: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
            (
                c.iter().map(|ci| self.a * ci).collect(),
                (0..self.q).map(|j| (0..self.d).map(|i| self.b[i * self.q + j] * c[i]).sum()).collect(),
            )
        }
    }

    #[test]
    fn heaviside_values() {
        assert_eq!(smooth_heaviside(0.0, 7.0), 0.5);
        let v = smooth_heaviside(0.45, 50.0);
        assert!((1.0 - v - 1.7e-10).abs() < 0.05e-10);
        for x in [-2.0, -0.1, 0.3, 4.0] {
            assert!((smooth_heaviside(-x, 3.0) - (1.0 - smooth_heaviside(x, 3.0))).abs() < 1e-15);
        }
    }

    #[test]
    fn tank_gate_values() {
        let gate = vec![vec![HeavisideTerm::lower(0.05, 50.0), HeavisideTerm::upper(0.95, 50.0)]];
        assert!((phi(&[0.5], &gate)[0] - 1.0).abs() < 1e-9);
        assert!((phi(&[0.05], &gate)[0] - 0.5).abs() < 1e-9);
        assert_eq!(phi(&[0.3, 7.0], &gate)[1], 1.0);
        assert!(HeavisideTerm::new(0.5, 0.0, 1.0).is_err());
        assert!(HeavisideTerm::new(1.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn iteration_cases() {
        let half = AffineMap { a: 0.5, b: vec![0.0], d: 1, q: 1 };
        for k in 1..8 {
            assert_eq!(iterate_g(&half, &[1.0], &[0.0], k), vec![0.5f64.powi(k as i32)]);
        }
        let m = AffineMap { a: 0.5, b: vec![1.0], d: 1, q: 1 };
        assert_eq!(iterate_g(&m, &[3.0], &[0.7], 1), m.equilibrium_map(&[3.0], &[0.7]));
        // x* = 2u for this map.
        assert_eq!(iterate_g(&m, &[1.4], &[0.7], 5), vec![1.4]);
    }

    #[test]
    fn gradient_of_x_independent_map() {
        let m = AffineMap { a: 0.0, b: vec![1.0, 2.0, 0.5, -1.0], d: 2, q: 2 };
        let u = [0.3, -0.4];
        let xs = [1.0, 2.0];
        let gu = m.equilibrium_map(&[0.0, 0.0], &u);
        let r = [gu[0] - xs[0], gu[1] - xs[1]];
        let expect = [r[0] * 1.0 + r[1] * 0.5, r[0] * 2.0 - r[1]];
        for k in [1, 2, 5] {
            let g = control_objective_grad(&m, &[9.0, -9.0], &u, &xs, k).unwrap();
            assert!((g[0] - expect[0]).abs() < 1e-14 && (g[1] - expect[1]).abs() < 1e-14);
        }
    }

    #[test]
    fn gradient_matches_differences() {
        let m = AffineMap { a: 0.6, b: vec![1.5], d: 1, q: 1 };
        let (x, u, xs) = ([0.2], [0.9], [0.4]);
        for k in [1, 3, 6] {
            let g = control_objective_grad(&m, &x, &u, &xs, k).unwrap()[0];
            let obj = |uu: f64| 0.5 * (iterate_g(&m, &x, &[uu], k)[0] - xs[0]).powi(2);
            let h = 1e-6;
            let fd = (obj(u[0] + h) - obj(u[0] - h)) / (2.0 * h);
            assert!((g - fd).abs() <= 1e-6 * fd.abs().max(1e-8), "{g} vs {fd}");
        }
    }

    #[test]
    fn stationary_closed_loop() {
        // x* = 2u; start at the fixed point for u = 0.5.
        let m = AffineMap { a: 0.5, b: vec![1.0], d: 1, q: 1 };
        let policy = ControlPolicyCfg::new(1, 1.0, vec![]).unwrap();
        let targets = periodic_schedule(vec![vec![1.0]], 10.0);
        let grid = TimeGrid::new(0.0, 10.0, 1000).unwrap();
        let noise = NoisePath::zeros(1, 1000);
        let setup = FeedbackSetup {
            policy: &policy,
            targets: &targets,
            x0: &[1.0],
            u0: &[0.5],
            grid,
            noise: &noise,
            record_stride: 10,
        };
        let trial = feedback_simulate(|x, u| m.field(x, u), |x| vec![0.0; x.len()], &m, &setup).unwrap();
        assert_eq!(trial.times.len(), 101);
        for (x, u) in trial.states.iter().zip(&trial.controls) {
            assert!((x[0] - 1.0).abs() < 1e-12 && (u[0] - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn closed_loop_reaches_target() {
        let m = AffineMap { a: 0.5, b: vec![1.0], d: 1, q: 1 };
        let policy = ControlPolicyCfg::new(2, 2.0, vec![]).unwrap();
        let targets = periodic_schedule(vec![vec![1.0], vec![-0.6]], 20.0);
        let grid = TimeGrid::new(0.0, 40.0, 4000).unwrap();
        let noise = NoisePath::zeros(1, 4000);
        let setup = FeedbackSetup {
            policy: &policy,
            targets: &targets,
            x0: &[0.0],
            u0: &[0.0],
            grid,
            noise: &noise,
            record_stride: 1,
        };
        let trial = feedback_simulate(|x, u| m.field(x, u), |x| vec![0.0; x.len()], &m, &setup).unwrap();
        let mid = trial.times.iter().position(|&t| t >= 19.9).unwrap();
        assert!((trial.states[mid][0] - 1.0).abs() < 1e-3);
        assert!((trial.states.last().unwrap()[0] + 0.6).abs() < 1e-3);
        assert_eq!(*trial.target_ids.last().unwrap(), 1);
    }

    #[test]
    fn bad_policy_rejected() {
        assert!(ControlPolicyCfg::new(0, 1.0, vec![]).is_err());
        assert!(ControlPolicyCfg::new(1, 0.0, vec![]).is_err());
    }
}
