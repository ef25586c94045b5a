//! Ground-truth benchmark systems, their analytic splittings, and the
//! data-generation protocols used for training.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dynamics::{ParametricField, SplitField};
use crate::error::{check_len, Error, Result};
use crate::integrate::{rk4_solve_strided, write_trajectory_csv, TimeGrid, Trajectory};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SystemId {
    TwoTanks,
    SymHysteresis,
    Budworm,
    ToggleSwitch,
}

impl SystemId {
    pub const ALL: [SystemId; 4] = [
        SystemId::TwoTanks,
        SystemId::SymHysteresis,
        SystemId::Budworm,
        SystemId::ToggleSwitch,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SystemId::TwoTanks => "two-tanks",
            SystemId::SymHysteresis => "sym-hysteresis",
            SystemId::Budworm => "budworm",
            SystemId::ToggleSwitch => "toggle-switch",
        }
    }

    pub fn state_dim(self) -> usize {
        match self {
            SystemId::TwoTanks | SystemId::ToggleSwitch => 2,
            SystemId::SymHysteresis | SystemId::Budworm => 1,
        }
    }

    pub fn control_dim(self) -> usize {
        match self {
            SystemId::TwoTanks => 2,
            SystemId::SymHysteresis | SystemId::Budworm => 1,
            SystemId::ToggleSwitch => 4,
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SystemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemId::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown system {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum SystemParams {
    TwoTanks { a1: f64, a2: f64, a3: f64, a4: f64, ell: f64 },
    SymHysteresis,
    Budworm { r: f64 },
    ToggleSwitch,
}

impl SystemParams {
    pub fn standard(id: SystemId) -> Self {
        match id {
            SystemId::TwoTanks => SystemParams::TwoTanks {
                a1: 0.08,
                a2: 0.02,
                a3: 0.08,
                a4: 0.02,
                ell: 50.0,
            },
            SystemId::SymHysteresis => SystemParams::SymHysteresis,
            SystemId::Budworm => SystemParams::Budworm { r: 0.56 },
            SystemId::ToggleSwitch => SystemParams::ToggleSwitch,
        }
    }
}

/// A ground-truth system with its parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct System {
    pub id: SystemId,
    pub params: SystemParams,
}

#[inline]
fn logistic(ell: f64, x: f64) -> f64 {
    crate::nnet::sigmoid(ell * x)
}

/// `x^p` for concentrations, with slightly negative values (noise) read as 0.
#[inline]
fn hill_pow(x: f64, p: f64) -> f64 {
    if x > 0.0 {
        x.powf(p)
    } else {
        0.0
    }
}

impl System {
    pub fn standard(id: SystemId) -> Self {
        Self {
            id,
            params: SystemParams::standard(id),
        }
    }

    pub fn state_dim(&self) -> usize {
        self.id.state_dim()
    }

    pub fn control_dim(&self) -> usize {
        self.id.control_dim()
    }

    /// Right-hand side with shapes checked.
    pub fn rhs_checked(&self, x: &[f64], u: &[f64]) -> Result<Vec<f64>> {
        check_len("state", self.state_dim(), x.len())?;
        check_len("control", self.control_dim(), u.len())?;
        Ok(self.rhs(x, u))
    }

    /// `dx/dt` of the true system. Shapes are not checked.
    pub fn rhs(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self.params {
            SystemParams::TwoTanks { a1, a2, a3, a4, ell } => {
                let (p, v) = (u[0], u[1]);
                let c1_in = a1 * (1.0 - logistic(ell, x[0] - 1.0));
                let c1_out = a2 * (1.0 - logistic(ell, x[1] - 1.0));
                let c2_in = a3 * (1.0 - logistic(ell, x[1] - 1.0));
                let c2_out = a4;
                // Levels are physically non-negative; noise can dip below 0.
                let s1 = x[0].max(0.0).sqrt();
                let s2 = x[1].max(0.0).sqrt();
                vec![
                    c1_in * (1.0 - v) * p - c1_out * s1,
                    c2_in * v * p + c1_out * s1 - c2_out * s2,
                ]
            }
            SystemParams::SymHysteresis => vec![u[0] + x[0] - x[0] * x[0] * x[0]],
            SystemParams::Budworm { r } => {
                let (x, k) = (x[0], u[0]);
                vec![r * x * (1.0 - x / k) - x * x / (1.0 + x * x)]
            }
            SystemParams::ToggleSwitch => {
                let (a1, a2, beta, gamma) = (u[0], u[1], u[2], u[3]);
                vec![
                    -x[0] + a1 / (1.0 + hill_pow(x[1], beta)),
                    -x[1] + a2 / (1.0 + hill_pow(x[0], gamma)),
                ]
            }
        }
    }

    /// Analytic splitting `(f, g)` with `f ⊙ (x - g) = rhs`, where one exists.
    pub fn analytic_split(&self, x: &[f64], u: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        check_len("state", self.state_dim(), x.len())?;
        check_len("control", self.control_dim(), u.len())?;
        match self.params {
            SystemParams::TwoTanks { .. } => Err(Error::Undefined(
                "the two-tank system has no analytic splitting".into(),
            )),
            SystemParams::SymHysteresis => {
                if x[0] == 0.0 {
                    return Err(Error::Undefined("hysteresis split needs x != 0".into()));
                }
                let x = x[0];
                Ok((vec![-x * x], vec![(x + u[0]) / (x * x)]))
            }
            SystemParams::Budworm { r } => {
                if x[0] <= 0.0 {
                    return Err(Error::Undefined("budworm split needs x > 0".into()));
                }
                let (x, k) = (x[0], u[0]);
                Ok((vec![-x / (1.0 + x * x)], vec![r / k * (1.0 + x * x) * (k - x)]))
            }
            SystemParams::ToggleSwitch => Ok((vec![-1.0, -1.0], toggle_g(x, u))),
        }
    }
}

fn toggle_g(x: &[f64], u: &[f64]) -> Vec<f64> {
    vec![
        u[0] / (1.0 + hill_pow(x[1], u[2])),
        u[1] / (1.0 + hill_pow(x[0], u[3])),
    ]
}

/// The analytic split of a benchmark, usable anywhere a learned field is.
///
/// Its vector field is the true right-hand side, which sidesteps the
/// removable singularity of the hysteresis split at `x = 0`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OracleSplit {
    system: System,
}

impl OracleSplit {
    pub fn new(system: System) -> Result<Self> {
        if system.id == SystemId::TwoTanks {
            return Err(Error::Undefined(
                "the two-tank system has no analytic splitting".into(),
            ));
        }
        Ok(Self { system })
    }

    pub fn system(&self) -> &System {
        &self.system
    }

    /// `∂F/∂x` of the true right-hand side (row-major `d × d`).
    pub fn rhs_jacobian(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self.system.params {
            SystemParams::SymHysteresis => vec![1.0 - 3.0 * x[0] * x[0]],
            SystemParams::Budworm { r } => {
                let (x, k) = (x[0], u[0]);
                let q = 1.0 + x * x;
                vec![r * (1.0 - 2.0 * x / k) - 2.0 * x / (q * q)]
            }
            SystemParams::ToggleSwitch => {
                let (a1, a2, beta, gamma) = (u[0], u[1], u[2], u[3]);
                let d12 = if x[1] > 0.0 {
                    let p = x[1].powf(beta);
                    -a1 * beta * x[1].powf(beta - 1.0) / ((1.0 + p) * (1.0 + p))
                } else {
                    0.0
                };
                let d21 = if x[0] > 0.0 {
                    let p = x[0].powf(gamma);
                    -a2 * gamma * x[0].powf(gamma - 1.0) / ((1.0 + p) * (1.0 + p))
                } else {
                    0.0
                };
                vec![-1.0, d12, d21, -1.0]
            }
            SystemParams::TwoTanks { .. } => unreachable!("rejected at construction"),
        }
    }
}

impl SplitField for OracleSplit {
    fn state_dim(&self) -> usize {
        self.system.state_dim()
    }

    fn control_dim(&self) -> usize {
        self.system.control_dim()
    }

    fn decay(&self, x: &[f64]) -> Vec<f64> {
        match self.system.params {
            SystemParams::SymHysteresis => vec![-x[0] * x[0]],
            SystemParams::Budworm { .. } => vec![-x[0] / (1.0 + x[0] * x[0])],
            _ => vec![-1.0; self.state_dim()],
        }
    }

    fn equilibrium_map(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self.system.params {
            SystemParams::SymHysteresis => vec![(x[0] + u[0]) / (x[0] * x[0])],
            SystemParams::Budworm { r } => {
                let (x, k) = (x[0], u[0]);
                vec![r / k * (1.0 + x * x) * (k - x)]
            }
            SystemParams::ToggleSwitch => toggle_g(x, u),
            SystemParams::TwoTanks { .. } => unreachable!("rejected at construction"),
        }
    }

    fn equilibrium_map_vjp(&self, x: &[f64], u: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self.system.params {
            SystemParams::SymHysteresis => {
                let (x, l) = (x[0], u[0]);
                let dgdx = (-x - 2.0 * l) / (x * x * x);
                let dgdl = 1.0 / (x * x);
                (vec![c[0] * dgdx], vec![c[0] * dgdl])
            }
            SystemParams::Budworm { r } => {
                let (x, k) = (x[0], u[0]);
                let dgdx = r * (2.0 * x * (1.0 - x / k) - (1.0 + x * x) / k);
                let dgdk = r * (1.0 + x * x) * x / (k * k);
                (vec![c[0] * dgdx], vec![c[0] * dgdk])
            }
            SystemParams::ToggleSwitch => {
                let (a1, a2, beta, gamma) = (u[0], u[1], u[2], u[3]);
                let p2 = hill_pow(x[1], beta);
                let p1 = hill_pow(x[0], gamma);
                let (q2, q1) = (1.0 + p2, 1.0 + p1);
                let dg1_dx2 = if x[1] > 0.0 {
                    -a1 * beta * x[1].powf(beta - 1.0) / (q2 * q2)
                } else {
                    0.0
                };
                let dg2_dx1 = if x[0] > 0.0 {
                    -a2 * gamma * x[0].powf(gamma - 1.0) / (q1 * q1)
                } else {
                    0.0
                };
                let dg1_dbeta = if x[1] > 0.0 { -a1 * p2 * x[1].ln() / (q2 * q2) } else { 0.0 };
                let dg2_dgamma = if x[0] > 0.0 { -a2 * p1 * x[0].ln() / (q1 * q1) } else { 0.0 };
                (
                    vec![c[1] * dg2_dx1, c[0] * dg1_dx2],
                    vec![c[0] / q2, c[1] / q1, c[0] * dg1_dbeta, c[1] * dg2_dgamma],
                )
            }
            SystemParams::TwoTanks { .. } => unreachable!("rejected at construction"),
        }
    }

    fn field(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        self.system.rhs(x, u)
    }
}

/// Tape for [`OracleSplit`]: the evaluation point.
#[derive(Debug, Clone, Default)]
pub struct OracleTape {
    x: Vec<f64>,
    u: Vec<f64>,
}

impl ParametricField for OracleSplit {
    type Tape = OracleTape;

    fn num_params(&self) -> usize {
        0
    }

    fn params(&self) -> &[f64] {
        &[]
    }

    fn set_params(&mut self, _params: &[f64]) {}

    fn field_taped(&self, x: &[f64], u: &[f64], tape: &mut OracleTape, out: &mut [f64]) {
        tape.x = x.to_vec();
        tape.u = u.to_vec();
        out.copy_from_slice(&self.system.rhs(x, u));
    }

    fn field_vjp(&self, tape: &OracleTape, c: &[f64], _param_grad: &mut [f64], state_grad: &mut [f64]) {
        let d = self.state_dim();
        let jac = self.rhs_jacobian(&tape.x, &tape.u);
        for j in 0..d {
            state_grad[j] = (0..d).map(|i| c[i] * jac[i * d + j]).sum();
        }
    }
}

/// Initial-condition grid, control grid, horizon and sampling of a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DataProtocol {
    pub ic_grid: Vec<Vec<f64>>,
    pub control_grid: Vec<Vec<f64>>,
    pub horizon: f64,
    pub samples_per_traj: usize,
    /// RK4 steps between consecutive samples.
    pub steps_per_sample: usize,
    /// When set, each trajectory is cut at its transient time for this
    /// relative threshold.
    pub transient_threshold: Option<f64>,
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => Vec::new(),
        1 => vec![0.5 * (lo + hi)],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

fn cartesian(axes: &[Vec<f64>]) -> Vec<Vec<f64>> {
    axes.iter().fold(vec![Vec::new()], |acc, axis| {
        acc.iter()
            .flat_map(|prefix| {
                axis.iter().map(move |&v| {
                    let mut p = prefix.clone();
                    p.push(v);
                    p
                })
            })
            .collect()
    })
}

impl DataProtocol {
    /// Training grids of the benchmark experiments. `toggle_stride` keeps every
    /// `stride`-th value of the toggle control levels (1 = full 5⁴ design).
    pub fn standard(id: SystemId, toggle_stride: usize) -> Self {
        match id {
            SystemId::TwoTanks => Self {
                ic_grid: (0..=20).map(|i| vec![0.05 * i as f64; 2]).collect(),
                control_grid: cartesian(&[
                    (1..=9).map(|i| 0.1 * i as f64).collect(),
                    (1..=9).map(|i| 0.1 * i as f64).collect(),
                ]),
                horizon: 200.0,
                samples_per_traj: 51,
                steps_per_sample: 80,
                transient_threshold: None,
            },
            SystemId::SymHysteresis => Self {
                ic_grid: linspace(-2.0, 2.0, 51).into_iter().map(|x| vec![x]).collect(),
                control_grid: linspace(-1.0, 1.0, 51).into_iter().map(|l| vec![l]).collect(),
                horizon: 0.25,
                samples_per_traj: 51,
                steps_per_sample: 2,
                transient_threshold: None,
            },
            SystemId::Budworm => Self {
                ic_grid: linspace(0.1, 10.0, 51).into_iter().map(|x| vec![x]).collect(),
                control_grid: linspace(4.45, 11.99, 51).into_iter().map(|k| vec![k]).collect(),
                horizon: 10.0,
                samples_per_traj: 51,
                steps_per_sample: 10,
                transient_threshold: None,
            },
            SystemId::ToggleSwitch => {
                let levels: Vec<f64> = [0.1, 1.25, 2.5, 3.75, 5.0]
                    .into_iter()
                    .step_by(toggle_stride.max(1))
                    .collect();
                let axis = linspace(0.0, 6.0, 9);
                Self {
                    ic_grid: cartesian(&[axis.clone(), axis]),
                    control_grid: cartesian(&[levels.clone(), levels.clone(), levels.clone(), levels]),
                    horizon: 100.0,
                    samples_per_traj: 101,
                    steps_per_sample: 20,
                    transient_threshold: Some(1e-3),
                }
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.ic_grid.is_empty() {
            return Err(Error::InvalidConfig("empty initial-condition grid".into()));
        }
        if self.control_grid.is_empty() {
            return Err(Error::InvalidConfig("empty control grid".into()));
        }
        if !(self.horizon > 0.0) {
            return Err(Error::InvalidConfig("horizon must be positive".into()));
        }
        if self.samples_per_traj < 2 || self.steps_per_sample == 0 {
            return Err(Error::InvalidConfig(
                "need at least two samples and one step per sample".into(),
            ));
        }
        Ok(())
    }

    pub fn num_trajectories(&self) -> usize {
        self.ic_grid.len() * self.control_grid.len()
    }

    pub fn grid(&self) -> TimeGrid {
        TimeGrid {
            t0: 0.0,
            t1: self.horizon,
            n_steps: (self.samples_per_traj - 1) * self.steps_per_sample,
        }
    }
}

/// Trajectories of one benchmark under a protocol.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub system: System,
    pub trajectories: Vec<Trajectory>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }
}

/// One RK4 trajectory per (initial condition, control) pair, ordered with the
/// initial condition as the outer index.
pub fn gen_dataset(system: &System, protocol: &DataProtocol) -> Result<Dataset> {
    protocol.validate()?;
    let d = system.state_dim();
    let q = system.control_dim();
    for ic in &protocol.ic_grid {
        check_len("initial condition", d, ic.len())?;
    }
    for u in &protocol.control_grid {
        check_len("control", q, u.len())?;
    }
    let pairs: Vec<(usize, usize)> = (0..protocol.ic_grid.len())
        .flat_map(|i| (0..protocol.control_grid.len()).map(move |j| (i, j)))
        .collect();
    let grid = protocol.grid();
    let trajectories = par::try_map(&pairs, |&(i, j)| {
        let ic = &protocol.ic_grid[i];
        let u = &protocol.control_grid[j];
        let mut traj = rk4_solve_strided(|x, u| system.rhs(x, u), ic, u, grid, protocol.steps_per_sample)
            .map_err(|e| Error::Integration {
                step: 0,
                reason: format!("initial condition {ic:?}, control {u:?}: {e}"),
            })?;
        if let Some(thr) = protocol.transient_threshold {
            let tt = transient_time(&traj, thr);
            traj.truncate_at(tt.time, 5);
        }
        traj.id = i * protocol.control_grid.len() + j;
        Ok(traj)
    })?;
    Ok(Dataset {
        system: *system,
        trajectories,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TransientTime {
    pub time: f64,
    pub converged: bool,
}

/// Time after which the remaining path length, accumulated backwards from
/// the final sample, stays below `rel_threshold` times the trajectory range.
///
/// A trajectory whose settling time falls in the last tenth of the horizon is
/// reported as not converged, with the horizon as its time.
pub fn transient_time(traj: &Trajectory, rel_threshold: f64) -> TransientTime {
    let n = traj.len();
    let t_end = *traj.times.last().unwrap_or(&0.0);
    let t0 = *traj.times.first().unwrap_or(&0.0);
    if n < 2 {
        return TransientTime { time: t0, converged: true };
    }
    let d = traj.state_dim();
    let range = (0..d)
        .map(|k| {
            let (lo, hi) = traj
                .states
                .iter()
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| (lo.min(s[k]), hi.max(s[k])));
            hi - lo
        })
        .fold(0.0, f64::max);
    if range == 0.0 {
        return TransientTime { time: t0, converged: true };
    }
    let tol = rel_threshold * range;
    let mut tail = 0.0;
    let mut idx = n - 1;
    for i in (0..n - 1).rev() {
        let step: f64 = traj.states[i + 1]
            .iter()
            .zip(&traj.states[i])
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        tail += step;
        if tail > tol {
            break;
        }
        idx = i;
    }
    let time = traj.times[idx];
    if time > t0 + 0.9 * (t_end - t0) {
        TransientTime { time: t_end, converged: false }
    } else {
        TransientTime { time, converged: true }
    }
}

/// Manifest written next to a dataset CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub system: SystemId,
    pub params: SystemParams,
    pub protocol: DataProtocol,
    pub seed: u64,
    pub num_trajectories: usize,
    pub content_hash: String,
}

/// Serialise a dataset to CSV bytes and a manifest whose hash covers them.
pub fn dataset_files(dataset: &Dataset, protocol: &DataProtocol, seed: u64) -> Result<(Vec<u8>, DatasetManifest)> {
    let mut csv = Vec::new();
    write_trajectory_csv(&mut csv, &dataset.trajectories)?;
    let hash = hex::encode(Sha256::digest(&csv));
    Ok((
        csv,
        DatasetManifest {
            system: dataset.system.id,
            params: dataset.system.params,
            protocol: protocol.clone(),
            seed,
            num_trajectories: dataset.len(),
            content_hash: hash,
        },
    ))
}
