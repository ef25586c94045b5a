//! Fixed-step integrators: classical RK4 (with an unrolled reverse pass for
//! parametric fields), Euler–Maruyama with pregenerated noise, and the
//! finite-difference derivative estimator used by gradient matching.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dynamics::ParametricField;
use crate::error::{check_len, Error, Result};

/// Uniform grid `t0, t0 + h, …, t1` with `h = (t1 - t0) / n_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    pub t0: f64,
    pub t1: f64,
    pub n_steps: usize,
}

impl TimeGrid {
    pub fn new(t0: f64, t1: f64, n_steps: usize) -> Result<Self> {
        if !(t1 > t0) || n_steps == 0 {
            return Err(Error::InvalidConfig(format!(
                "time grid needs t1 > t0 and at least one step (t0={t0}, t1={t1}, n={n_steps})"
            )));
        }
        Ok(Self { t0, t1, n_steps })
    }

    pub fn step(&self) -> f64 {
        (self.t1 - self.t0) / self.n_steps as f64
    }

    pub fn time(&self, i: usize) -> f64 {
        if i == self.n_steps {
            self.t1
        } else {
            self.t0 + i as f64 * self.step()
        }
    }
}

/// A uniformly sampled trajectory under a constant control.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub id: usize,
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub control: Vec<f64>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn state_dim(&self) -> usize {
        self.states.first().map_or(0, Vec::len)
    }

    pub fn initial_state(&self) -> &[f64] {
        &self.states[0]
    }

    /// Keep only samples with `t <= t_end` (at least the first `min_len`).
    pub fn truncate_at(&mut self, t_end: f64, min_len: usize) {
        let keep = self.times.iter().take_while(|&&t| t <= t_end).count().max(min_len).min(self.len());
        self.times.truncate(keep);
        self.states.truncate(keep);
    }
}

fn check_finite(step: usize, x: &[f64]) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Integration {
            step,
            reason: format!("non-finite state {x:?}"),
        })
    }
}

#[inline]
fn axpy(out: &mut [f64], x: &[f64], a: f64, k: &[f64]) {
    for ((o, xi), ki) in out.iter_mut().zip(x).zip(k) {
        *o = xi + a * ki;
    }
}

/// One classical RK4 step.
pub fn rk4_step(rhs: &impl Fn(&[f64], &[f64]) -> Vec<f64>, x: &[f64], u: &[f64], h: f64) -> Vec<f64> {
    let mut y = vec![0.0; x.len()];
    let k1 = rhs(x, u);
    axpy(&mut y, x, 0.5 * h, &k1);
    let k2 = rhs(&y, u);
    axpy(&mut y, x, 0.5 * h, &k2);
    let k3 = rhs(&y, u);
    axpy(&mut y, x, h, &k3);
    let k4 = rhs(&y, u);
    x.iter()
        .enumerate()
        .map(|(i, xi)| xi + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
        .collect()
}

/// Integrate `dx/dt = rhs(x, u)` recording the state at every grid node.
pub fn rk4_solve(
    rhs: impl Fn(&[f64], &[f64]) -> Vec<f64>,
    x0: &[f64],
    u: &[f64],
    grid: TimeGrid,
) -> Result<Trajectory> {
    rk4_solve_strided(rhs, x0, u, grid, 1)
}

/// Like [`rk4_solve`] but records only every `stride`-th node (plus the last).
pub fn rk4_solve_strided(
    rhs: impl Fn(&[f64], &[f64]) -> Vec<f64>,
    x0: &[f64],
    u: &[f64],
    grid: TimeGrid,
    stride: usize,
) -> Result<Trajectory> {
    let stride = stride.max(1);
    let h = grid.step();
    let mut x = x0.to_vec();
    check_finite(0, &x)?;
    let mut times = vec![grid.t0];
    let mut states = vec![x.clone()];
    for n in 1..=grid.n_steps {
        x = rk4_step(&rhs, &x, u, h);
        check_finite(n, &x)?;
        if n % stride == 0 || n == grid.n_steps {
            times.push(grid.time(n));
            states.push(x.clone());
        }
    }
    Ok(Trajectory {
        id: 0,
        times,
        states,
        control: u.to_vec(),
    })
}

/// Forward RK4 pass over a parametric field that keeps every stage tape so
/// the exact discrete gradient can be pulled back through the recursion.
pub struct Rk4Tape<'m, M: ParametricField> {
    model: &'m M,
    h: f64,
    stride: usize,
    n_steps: usize,
    states: Vec<Vec<f64>>,
    stages: Vec<[M::Tape; 4]>,
}

impl<'m, M: ParametricField> Rk4Tape<'m, M> {
    pub fn record(model: &'m M, x0: &[f64], u: &[f64], grid: TimeGrid, stride: usize) -> Result<Self> {
        let mut tape = Self::empty(model);
        tape.rerecord(x0, u, grid, stride)?;
        Ok(tape)
    }

    /// A tape with nothing recorded yet, for reuse through [`Rk4Tape::rerecord`].
    pub fn empty(model: &'m M) -> Self {
        Self {
            model,
            h: 0.0,
            stride: 1,
            n_steps: 0,
            states: Vec::new(),
            stages: Vec::new(),
        }
    }

    /// Record a new solve, reusing the buffers of the previous one.
    pub fn rerecord(&mut self, x0: &[f64], u: &[f64], grid: TimeGrid, stride: usize) -> Result<()> {
        let stride = stride.max(1);
        if grid.n_steps % stride != 0 {
            return Err(Error::InvalidConfig(format!(
                "steps ({}) must be a multiple of the record stride ({stride})",
                grid.n_steps
            )));
        }
        let model = self.model;
        let d = x0.len();
        let h = grid.step();
        self.h = h;
        self.stride = stride;
        self.n_steps = 0;
        while self.states.len() <= grid.n_steps {
            self.states.push(Vec::with_capacity(d));
        }
        while self.stages.len() < grid.n_steps {
            self.stages.push(Default::default());
        }
        check_finite(0, x0)?;
        self.states[0].clear();
        self.states[0].extend_from_slice(x0);
        let mut k = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
        let mut y = vec![0.0; d];
        for n in 1..=grid.n_steps {
            let (done, rest) = self.states.split_at_mut(n);
            let x = &done[n - 1];
            let tapes = &mut self.stages[n - 1];
            model.field_taped(x, u, &mut tapes[0], &mut k[0]);
            axpy(&mut y, x, 0.5 * h, &k[0]);
            model.field_taped(&y, u, &mut tapes[1], &mut k[1]);
            axpy(&mut y, x, 0.5 * h, &k[1]);
            model.field_taped(&y, u, &mut tapes[2], &mut k[2]);
            axpy(&mut y, x, h, &k[2]);
            model.field_taped(&y, u, &mut tapes[3], &mut k[3]);
            let next = &mut rest[0];
            next.clear();
            next.extend((0..d).map(|i| x[i] + h / 6.0 * (k[0][i] + 2.0 * k[1][i] + 2.0 * k[2][i] + k[3][i])));
            check_finite(n, next)?;
            self.n_steps = n;
        }
        Ok(())
    }

    /// States at the recorded (strided) nodes.
    pub fn recorded_states(&self) -> impl Iterator<Item = &Vec<f64>> {
        self.states[..=self.n_steps].iter().step_by(self.stride)
    }

    pub fn final_state(&self) -> &[f64] {
        &self.states[self.n_steps]
    }

    /// Gradient of `Σ_i <cotangents[i], x(recorded node i)>` with respect to
    /// the model parameters, accumulated into `param_grad`.
    pub fn backward(&self, cotangents: &[Vec<f64>], param_grad: &mut [f64]) -> Result<()> {
        let n_rec = (self.n_steps + 1).div_ceil(self.stride);
        check_len("rk4 cotangents", n_rec, cotangents.len())?;
        let d = self.final_state().len();
        let h = self.h;
        let n_steps = self.n_steps;
        let mut adj = cotangents[n_rec - 1].clone();
        let mut b = vec![0.0; d];
        let mut dy = [vec![0.0; d], vec![0.0; d], vec![0.0; d], vec![0.0; d]];
        for n in (0..n_steps).rev() {
            let tapes = &self.stages[n];
            // x_{n+1} = x_n + h/6 (k1 + 2k2 + 2k3 + k4), stage inputs
            // y1 = x, y2 = x + h/2 k1, y3 = x + h/2 k2, y4 = x + h k3.
            for i in 0..d {
                b[i] = h / 6.0 * adj[i];
            }
            self.model.field_vjp(&tapes[3], &b, param_grad, &mut dy[3]);
            for i in 0..d {
                b[i] = h / 3.0 * adj[i] + h * dy[3][i];
            }
            self.model.field_vjp(&tapes[2], &b, param_grad, &mut dy[2]);
            for i in 0..d {
                b[i] = h / 3.0 * adj[i] + 0.5 * h * dy[2][i];
            }
            self.model.field_vjp(&tapes[1], &b, param_grad, &mut dy[1]);
            for i in 0..d {
                b[i] = h / 6.0 * adj[i] + 0.5 * h * dy[1][i];
            }
            self.model.field_vjp(&tapes[0], &b, param_grad, &mut dy[0]);
            for i in 0..d {
                adj[i] += dy[0][i] + dy[1][i] + dy[2][i] + dy[3][i];
            }
            if n % self.stride == 0 {
                let c = &cotangents[n / self.stride];
                for i in 0..d {
                    adj[i] += c[i];
                }
            }
        }
        Ok(())
    }
}

/// Exact gradient of `Σ_i <cotangents[i], x(t_i)>` through unrolled RK4,
/// with one cotangent per grid node.
pub fn rk4_solve_unrolled_grad<M: ParametricField>(
    model: &M,
    x0: &[f64],
    u: &[f64],
    grid: TimeGrid,
    cotangents: &[Vec<f64>],
) -> Result<Vec<f64>> {
    let tape = Rk4Tape::record(model, x0, u, grid, 1)?;
    let mut grad = vec![0.0; model.num_params()];
    tape.backward(cotangents, &mut grad)?;
    Ok(grad)
}

/// Standard-normal increments, one `dim`-vector per step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisePath {
    pub increments: Vec<Vec<f64>>,
    pub seed: u64,
}

impl NoisePath {
    pub fn generate(dim: usize, n_steps: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let increments = (0..n_steps)
            .map(|_| (0..dim).map(|_| StandardNormal.sample(&mut rng)).collect())
            .collect();
        Self { increments, seed }
    }

    pub fn zeros(dim: usize, n_steps: usize) -> Self {
        Self {
            increments: vec![vec![0.0; dim]; n_steps],
            seed: 0,
        }
    }
}

/// `x_{k+1} = x_k + h·drift(x_k) + √h·diffusion(x_k) ⊙ ξ_k`, recording every
/// `stride`-th node.
pub fn euler_maruyama_strided(
    drift: impl Fn(&[f64]) -> Vec<f64>,
    diffusion_diag: impl Fn(&[f64]) -> Vec<f64>,
    x0: &[f64],
    grid: TimeGrid,
    noise: &NoisePath,
    stride: usize,
) -> Result<Trajectory> {
    check_len("noise path", grid.n_steps, noise.increments.len())?;
    let stride = stride.max(1);
    let h = grid.step();
    let sqrt_h = h.sqrt();
    let mut x = x0.to_vec();
    check_finite(0, &x)?;
    let mut times = vec![grid.t0];
    let mut states = vec![x.clone()];
    for (n, xi) in noise.increments.iter().enumerate() {
        check_len("noise increment", x.len(), xi.len())?;
        let a = drift(&x);
        let b = diffusion_diag(&x);
        for i in 0..x.len() {
            x[i] += h * a[i] + sqrt_h * b[i] * xi[i];
        }
        check_finite(n + 1, &x)?;
        if (n + 1) % stride == 0 || n + 1 == grid.n_steps {
            times.push(grid.time(n + 1));
            states.push(x.clone());
        }
    }
    Ok(Trajectory {
        id: 0,
        times,
        states,
        control: Vec::new(),
    })
}

pub fn euler_maruyama(
    drift: impl Fn(&[f64]) -> Vec<f64>,
    diffusion_diag: impl Fn(&[f64]) -> Vec<f64>,
    x0: &[f64],
    grid: TimeGrid,
    noise: &NoisePath,
) -> Result<Trajectory> {
    euler_maruyama_strided(drift, diffusion_diag, x0, grid, noise, 1)
}

/// Centered differences in the interior, one-sided at both ends.
pub fn finite_diff(times: &[f64], states: &[Vec<f64>]) -> Result<Vec<Vec<f64>>> {
    let n = times.len();
    check_len("finite difference states", n, states.len())?;
    if n < 2 {
        return Err(Error::InvalidConfig(
            "finite differences need at least two samples".into(),
        ));
    }
    let diff = |i: usize, j: usize| -> Vec<f64> {
        let dt = times[j] - times[i];
        states[j].iter().zip(&states[i]).map(|(b, a)| (b - a) / dt).collect()
    };
    let mut out = Vec::with_capacity(n);
    out.push(diff(0, 1));
    for i in 1..n - 1 {
        out.push(diff(i - 1, i + 1));
    }
    out.push(diff(n - 2, n - 1));
    Ok(out)
}

/// Write trajectories as `traj_id,t,x_0..x_{d-1},u_0..u_{q-1}` with 17
/// significant digits.
pub fn write_trajectory_csv<W: Write>(writer: W, trajectories: &[Trajectory]) -> Result<()> {
    let d = trajectories.first().map_or(0, Trajectory::state_dim);
    let q = trajectories.first().map_or(0, |t| t.control.len());
    let mut w = csv::Writer::from_writer(writer);
    let mut header = vec!["traj_id".to_string(), "t".to_string()];
    header.extend((0..d).map(|i| format!("x_{i}")));
    header.extend((0..q).map(|i| format!("u_{i}")));
    w.write_record(&header)?;
    for traj in trajectories {
        for (t, x) in traj.times.iter().zip(&traj.states) {
            let mut row = vec![traj.id.to_string(), fmt_f64(*t)];
            row.extend(x.iter().map(|v| fmt_f64(*v)));
            row.extend(traj.control.iter().map(|v| fmt_f64(*v)));
            w.write_record(&row)?;
        }
    }
    w.flush()?;
    Ok(())
}

/// 17 significant digits, enough to round-trip any finite double.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Parse the trajectory CSV back into trajectories (grouped by `traj_id`,
/// in order of first appearance).
pub fn read_trajectory_csv<R: Read>(reader: R) -> Result<Vec<Trajectory>> {
    let mut r = csv::Reader::from_reader(reader);
    let header = r.headers()?.clone();
    let d = header.iter().filter(|h| h.starts_with("x_")).count();
    let q = header.iter().filter(|h| h.starts_with("u_")).count();
    if header.len() != 2 + d + q {
        return Err(Error::InvalidConfig("unexpected trajectory CSV header".into()));
    }
    let mut out: Vec<Trajectory> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |i: usize| -> Result<f64> {
            rec[i]
                .parse::<f64>()
                .map_err(|e| Error::InvalidConfig(format!("bad number {:?}: {e}", &rec[i])))
        };
        let id: usize = rec[0]
            .parse()
            .map_err(|e| Error::InvalidConfig(format!("bad traj_id {:?}: {e}", &rec[0])))?;
        let t = parse(1)?;
        let x = (0..d).map(|i| parse(2 + i)).collect::<Result<Vec<_>>>()?;
        let u = (0..q).map(|i| parse(2 + d + i)).collect::<Result<Vec<_>>>()?;
        match out.last_mut() {
            Some(last) if last.id == id => {
                last.times.push(t);
                last.states.push(x);
            }
            _ => out.push(Trajectory {
                id,
                times: vec![t],
                states: vec![x],
                control: u,
            }),
        }
    }
    Ok(out)
}


#[cfg(test)]
impl TimeGrid {
    fn with_steps(self, n_steps: usize) -> Self {
        Self { n_steps, ..self }
    }
}
