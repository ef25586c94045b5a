//! Per-benchmark recipes (architectures, training schedules, control-trial
//! designs) and the runners that evaluate a model against them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{bifurcation_sweep, iqr, nrmse, tail_window, BifurcationDiagram, MagnitudeKind, MetricsReport, ResidualKind, SweepConfig};
use crate::benchmarks::{linspace, DataProtocol, OracleSplit, OracleTape, System, SystemId};
use crate::control::{feedback_simulate, ControlPolicyCfg, FeedbackSetup, FeedbackTrial, HeavisideTerm, Target};
use crate::dynamics::{bounds, DomainBox, Featurizer, FieldTape, ParametricField, SplitField, StructuredField};
use crate::error::{Error, Result};
use crate::integrate::{rk4_solve_strided, NoisePath, TimeGrid};
use crate::nnet::MlpSpec;
use crate::par;
use crate::training::{Objective, TrainConfig};

/// A learned field or an analytic split, interchangeable everywhere.
#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Neural(StructuredField),
    Analytic(OracleSplit),
}

#[derive(Debug, Clone)]
pub enum ModelTape {
    Neural(FieldTape),
    Analytic(OracleTape),
}

impl Default for ModelTape {
    fn default() -> Self {
        ModelTape::Neural(FieldTape::default())
    }
}

impl SplitField for Model {
    fn state_dim(&self) -> usize {
        match self {
            Model::Neural(m) => m.state_dim(),
            Model::Analytic(m) => m.state_dim(),
        }
    }

    fn control_dim(&self) -> usize {
        match self {
            Model::Neural(m) => m.control_dim(),
            Model::Analytic(m) => m.control_dim(),
        }
    }

    fn decay(&self, x: &[f64]) -> Vec<f64> {
        match self {
            Model::Neural(m) => m.decay(x),
            Model::Analytic(m) => m.decay(x),
        }
    }

    fn equilibrium_map(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self {
            Model::Neural(m) => m.equilibrium_map(x, u),
            Model::Analytic(m) => m.equilibrium_map(x, u),
        }
    }

    fn equilibrium_map_vjp(&self, x: &[f64], u: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        match self {
            Model::Neural(m) => m.equilibrium_map_vjp(x, u, c),
            Model::Analytic(m) => m.equilibrium_map_vjp(x, u, c),
        }
    }

    fn field(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        match self {
            Model::Neural(m) => m.field(x, u),
            Model::Analytic(m) => m.field(x, u),
        }
    }
}

impl ParametricField for Model {
    type Tape = ModelTape;

    fn num_params(&self) -> usize {
        match self {
            Model::Neural(m) => m.num_params(),
            Model::Analytic(m) => m.num_params(),
        }
    }

    fn params(&self) -> &[f64] {
        match self {
            Model::Neural(m) => m.params(),
            Model::Analytic(m) => m.params(),
        }
    }

    fn set_params(&mut self, params: &[f64]) {
        match self {
            Model::Neural(m) => m.set_params(params),
            Model::Analytic(m) => m.set_params(params),
        }
    }

    fn field_taped(&self, x: &[f64], u: &[f64], tape: &mut ModelTape, out: &mut [f64]) {
        match self {
            Model::Neural(m) => {
                if !matches!(tape, ModelTape::Neural(_)) {
                    *tape = ModelTape::Neural(FieldTape::default());
                }
                if let ModelTape::Neural(t) = tape {
                    m.field_taped(x, u, t, out);
                }
            }
            Model::Analytic(m) => {
                if !matches!(tape, ModelTape::Analytic(_)) {
                    *tape = ModelTape::Analytic(OracleTape::default());
                }
                if let ModelTape::Analytic(t) = tape {
                    m.field_taped(x, u, t, out);
                }
            }
        }
    }

    fn field_vjp(&self, tape: &ModelTape, c: &[f64], param_grad: &mut [f64], state_grad: &mut [f64]) {
        match (self, tape) {
            (Model::Neural(m), ModelTape::Neural(t)) => m.field_vjp(t, c, param_grad, state_grad),
            (Model::Analytic(m), ModelTape::Analytic(t)) => m.field_vjp(t, c, param_grad, state_grad),
            _ => panic!("tape recorded by a different model variant"),
        }
    }
}

/// Architecture of one learned field.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelRecipe {
    pub featurizer: Featurizer,
    pub f_layers: Vec<usize>,
    pub f_bounds: (f64, f64),
    pub g_layers: Vec<usize>,
    pub g_bounds: (f64, f64),
    pub domain: DomainBox,
}

impl ModelRecipe {
    pub fn label(&self) -> String {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join("-");
        format!("f {} / g {}", join(&self.f_layers), join(&self.g_layers))
    }

    pub fn build(&self, system: &System, seed: u64) -> Result<StructuredField> {
        Ok(StructuredField::new(
            system.state_dim(),
            system.control_dim(),
            self.featurizer,
            MlpSpec::new(self.f_layers.clone(), bounds(self.f_bounds.0, self.f_bounds.1))?,
            MlpSpec::new(self.g_layers.clone(), bounds(self.g_bounds.0, self.g_bounds.1))?,
            self.domain.clone(),
        )?
        .init_seeded(seed))
    }
}

/// How the targets of a control trial are drawn.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum TargetSource {
    /// Uniform over a state box.
    Uniform { lo: Vec<f64>, hi: Vec<f64> },
    /// The state the true system settles to under a uniformly drawn control,
    /// started from a uniformly drawn state.
    SteadyState {
        u_lo: Vec<f64>,
        u_hi: Vec<f64>,
        x_lo: Vec<f64>,
        x_hi: Vec<f64>,
        settle_time: f64,
        settle_step: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRecipe {
    pub k: usize,
    pub eta: f64,
    /// Diffusion `σ √|x_i|` on each state; the control is noise-free.
    pub sigma: f64,
    pub constraints: Vec<Vec<HeavisideTerm>>,
    pub targets: TargetSource,
    pub n_targets: usize,
    pub period: f64,
    pub dt: f64,
    /// Steps between recorded samples.
    pub record_stride: usize,
    pub x0: Vec<f64>,
    pub u0: Vec<f64>,
    pub magnitude_kind: MagnitudeKind,
    /// Per-dimension magnitude for `Range`; ignored for `Iqr`.
    pub magnitude: Vec<f64>,
    pub trials: usize,
}

impl ControlRecipe {
    pub fn policy(&self) -> Result<ControlPolicyCfg> {
        ControlPolicyCfg::new(self.k, self.eta, self.constraints.clone())
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        let t_end = self.period * self.n_targets as f64;
        TimeGrid::new(0.0, t_end, (t_end / self.dt).round() as usize)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRecipe {
    pub control_index: usize,
    pub base_control: Vec<f64>,
    pub lo: f64,
    pub hi: f64,
    pub points: usize,
    pub state_lo: f64,
    pub state_hi: f64,
    pub n_scan: usize,
}

impl SweepRecipe {
    pub fn config(&self, residual: ResidualKind) -> SweepConfig {
        SweepConfig {
            control_index: self.control_index,
            base_control: self.base_control.clone(),
            grid: linspace(self.lo, self.hi, self.points),
            state_lo: self.state_lo,
            state_hi: self.state_hi,
            n_scan: self.n_scan,
            residual,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scale {
    Desk,
    Full,
}

/// Everything needed to reproduce one benchmark experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Recipe {
    pub system: System,
    pub protocol: DataProtocol,
    pub model: ModelRecipe,
    /// Architectures compared by cross-validation (the first is `model`).
    pub candidates: Vec<ModelRecipe>,
    pub train: TrainConfig,
    /// Epochs of the final full-data fit, when it differs from the CV budget.
    pub final_epochs: Option<usize>,
    pub control: ControlRecipe,
    pub sweep: Option<SweepRecipe>,
}

fn deeper(m: &ModelRecipe) -> ModelRecipe {
    let mut out = m.clone();
    let width = m.f_layers[1];
    out.f_layers.insert(1, width);
    out.g_layers.insert(1, width);
    out
}

fn shallower(m: &ModelRecipe) -> ModelRecipe {
    let mut out = m.clone();
    if out.f_layers.len() > 3 {
        out.f_layers.remove(1);
    }
    if out.g_layers.len() > 3 {
        out.g_layers.remove(1);
    }
    out
}

impl Recipe {
    pub fn new(id: SystemId, scale: Scale) -> Self {
        let system = System::standard(id);
        let toggle_stride = if scale == Scale::Full { 1 } else { 2 };
        let protocol = DataProtocol::standard(id, toggle_stride);
        let (model, train, final_epochs, control, sweep) = match id {
            SystemId::TwoTanks => {
                let model = ModelRecipe {
                    featurizer: Featurizer::disabled(),
                    f_layers: vec![2, 20, 20, 20, 2],
                    f_bounds: (-1.0, 0.0),
                    g_layers: vec![4, 20, 20, 20, 2],
                    g_bounds: (0.0, 1.0),
                    domain: DomainBox::cube(2, 0.0, 1.0),
                };
                let mut train = TrainConfig::new(Objective::GradMatching, 1000, 50, 0.01);
                if scale == Scale::Desk {
                    train.epochs = 800;
                }
                let gate = vec![HeavisideTerm::lower(0.05, 50.0), HeavisideTerm::upper(0.95, 50.0)];
                let control = ControlRecipe {
                    k: 10,
                    eta: 0.1,
                    sigma: 0.01,
                    constraints: vec![gate.clone(), gate],
                    targets: TargetSource::SteadyState {
                        u_lo: vec![0.1, 0.1],
                        u_hi: vec![0.9, 0.9],
                        x_lo: vec![0.5, 0.5],
                        x_hi: vec![0.5, 0.5],
                        settle_time: 4000.0,
                        settle_step: 0.5,
                    },
                    n_targets: 10,
                    period: 500.0,
                    dt: 0.1,
                    record_stride: 10,
                    x0: vec![0.5, 0.5],
                    u0: vec![0.5, 0.5],
                    magnitude_kind: MagnitudeKind::Range,
                    magnitude: vec![1.0, 1.0],
                    trials: if scale == Scale::Full { 100 } else { 10 },
                };
                (model, train, None, control, None)
            }
            SystemId::SymHysteresis => {
                let model = ModelRecipe {
                    featurizer: Featurizer::new(-1.5, 1.5, 4).expect("valid interval"),
                    f_layers: vec![1, 20, 20, 1],
                    f_bounds: (-4.0, -0.1),
                    g_layers: vec![6, 20, 20, 1],
                    g_bounds: (-2.0, 2.0),
                    domain: DomainBox::cube(1, -2.0, 2.0),
                };
                let mut train = TrainConfig::new(Objective::TrajMatching, 200, 50, 0.01);
                if scale == Scale::Desk {
                    train.epochs = 120;
                }
                let control = ControlRecipe {
                    k: 1,
                    eta: 5.0,
                    sigma: 0.03,
                    constraints: vec![],
                    targets: TargetSource::Uniform { lo: vec![-1.5], hi: vec![1.5] },
                    n_targets: 10,
                    period: 10.0,
                    dt: 0.005,
                    record_stride: 10,
                    x0: vec![0.0],
                    u0: vec![0.0],
                    magnitude_kind: MagnitudeKind::Range,
                    magnitude: vec![3.0],
                    trials: if scale == Scale::Full { 100 } else { 10 },
                };
                let sweep = SweepRecipe {
                    control_index: 0,
                    base_control: vec![0.0],
                    lo: -1.0,
                    hi: 1.0,
                    points: 401,
                    state_lo: -2.0,
                    state_hi: 2.0,
                    n_scan: 401,
                };
                (model, train, None, control, Some(sweep))
            }
            SystemId::Budworm => {
                let model = ModelRecipe {
                    featurizer: Featurizer::new(-1.0, 1.5, 4).expect("valid interval"),
                    f_layers: vec![1, 20, 20, 1],
                    f_bounds: (-4.0, -0.1),
                    g_layers: vec![6, 20, 20, 1],
                    g_bounds: (-5.0, 12.0),
                    domain: DomainBox::cube(1, 0.1, 10.0),
                };
                let mut train = TrainConfig::new(Objective::GradMatching, 200, 50, 0.1);
                let mut final_epochs = Some(500);
                if scale == Scale::Desk {
                    train.epochs = 60;
                    train.lr0 = 0.01;
                    train.adam.lr = 0.01;
                    final_epochs = Some(150);
                }
                let control = ControlRecipe {
                    k: 1,
                    eta: 20.0,
                    sigma: 0.02,
                    constraints: vec![],
                    targets: TargetSource::Uniform { lo: vec![0.1], hi: vec![10.0] },
                    n_targets: 10,
                    period: 100.0,
                    dt: 0.002,
                    record_stride: 50,
                    x0: vec![8.22],
                    u0: vec![8.22],
                    magnitude_kind: MagnitudeKind::Range,
                    magnitude: vec![9.9],
                    trials: if scale == Scale::Full { 100 } else { 10 },
                };
                let sweep = SweepRecipe {
                    control_index: 0,
                    base_control: vec![8.0],
                    lo: 4.45,
                    hi: 11.99,
                    points: 755,
                    state_lo: 0.05,
                    state_hi: 12.0,
                    n_scan: 1200,
                };
                (model, train, final_epochs, control, Some(sweep))
            }
            SystemId::ToggleSwitch => {
                let model = ModelRecipe {
                    featurizer: Featurizer::disabled(),
                    f_layers: vec![2, 20, 20, 20, 2],
                    f_bounds: (-4.0, -0.01),
                    g_layers: vec![6, 20, 20, 20, 2],
                    g_bounds: (0.0, 6.0),
                    domain: DomainBox::cube(2, 0.0, 6.0),
                };
                let mut train = TrainConfig::new(Objective::GradMatching, 500, 200, 0.01);
                if scale == Scale::Desk {
                    train.epochs = 40;
                }
                let control = ControlRecipe {
                    k: 1,
                    eta: 1.0,
                    sigma: 0.05,
                    constraints: vec![
                        vec![HeavisideTerm::lower(0.1, 200.0)],
                        vec![HeavisideTerm::lower(0.1, 200.0)],
                        vec![HeavisideTerm::lower(1.1, 200.0)],
                        vec![HeavisideTerm::lower(1.1, 200.0)],
                    ],
                    targets: TargetSource::SteadyState {
                        u_lo: vec![0.0; 4],
                        u_hi: vec![5.0; 4],
                        x_lo: vec![0.0, 0.0],
                        x_hi: vec![6.0, 6.0],
                        settle_time: 200.0,
                        settle_step: 0.05,
                    },
                    n_targets: 10,
                    period: 20.0,
                    dt: 0.01,
                    record_stride: 10,
                    x0: vec![1.0, 1.0],
                    u0: vec![2.55, 2.55, 3.05, 3.05],
                    magnitude_kind: MagnitudeKind::Iqr,
                    magnitude: vec![],
                    trials: if scale == Scale::Full { 100 } else { 10 },
                };
                (model, train, None, control, None)
            }
        };
        let candidates = vec![model.clone(), shallower(&model), deeper(&model)];
        let mut candidates_dedup: Vec<ModelRecipe> = Vec::new();
        for c in candidates {
            if !candidates_dedup.contains(&c) {
                candidates_dedup.push(c);
            }
        }
        Self {
            system,
            protocol,
            model,
            candidates: candidates_dedup,
            train,
            final_epochs,
            control,
            sweep,
        }
    }

    /// The analytic split of this benchmark, when it has one.
    pub fn oracle(&self) -> Result<Model> {
        Ok(Model::Analytic(OracleSplit::new(self.system)?))
    }

    pub fn build_model(&self, seed: u64) -> Result<Model> {
        Ok(Model::Neural(self.model.build(&self.system, seed)?))
    }

    /// Training configuration of the final full-data fit.
    pub fn final_train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.final_epochs.unwrap_or(self.train.epochs),
            ..self.train.clone()
        }
    }

    /// Bifurcation diagram along the recipe's sweep axis.
    pub fn sweep_model(&self, model: &Model) -> Result<BifurcationDiagram> {
        let sweep = self
            .sweep
            .as_ref()
            .ok_or_else(|| Error::InvalidConfig(format!("{} has no scalar sweep", self.system.id)))?;
        bifurcation_sweep(model, &sweep.config(Self::residual_kind(model)))
    }

    /// Analytic splits are scanned on the vector field because some `g` have a
    /// pole inside the state range; learned maps are smooth, so `x − g` is used.
    pub fn residual_kind(model: &Model) -> ResidualKind {
        match model {
            Model::Analytic(_) => ResidualKind::VectorField,
            Model::Neural(_) => ResidualKind::EquilibriumMap,
        }
    }
}

/// SplitMix64 finaliser, used to derive independent stream seeds.
pub fn mix_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn uniform_in(rng: &mut ChaCha8Rng, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter()
        .zip(hi)
        .map(|(&l, &h)| if h > l { rng.random_range(l..h) } else { l })
        .collect()
}

/// Draw the targets of one trial.
pub fn draw_targets(system: &System, source: &TargetSource, n: usize, seed: u64) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| match source {
            TargetSource::Uniform { lo, hi } => Ok(uniform_in(&mut rng, lo, hi)),
            TargetSource::SteadyState {
                u_lo,
                u_hi,
                x_lo,
                x_hi,
                settle_time,
                settle_step,
            } => {
                let u = uniform_in(&mut rng, u_lo, u_hi);
                let x0 = uniform_in(&mut rng, x_lo, x_hi);
                let steps = (settle_time / settle_step).round() as usize;
                let grid = TimeGrid::new(0.0, *settle_time, steps)?;
                let traj = rk4_solve_strided(|x, u| system.rhs(x, u), &x0, &u, grid, steps)?;
                Ok(traj.states.last().unwrap().clone())
            }
        })
        .collect()
}

/// `σ √|x_i|` per component.
pub fn state_noise(sigma: f64) -> impl Fn(&[f64]) -> Vec<f64> {
    move |x: &[f64]| x.iter().map(|v| sigma * v.abs().sqrt()).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialOutcome {
    pub trial_id: usize,
    pub targets: Vec<Target>,
    pub trial: FeedbackTrial,
}

/// One closed-loop trial of `controller` on the true system.
pub fn run_control_trial(recipe: &Recipe, controller: &impl SplitField, trial_id: usize, seed: u64) -> Result<TrialOutcome> {
    let c = &recipe.control;
    let sys = recipe.system;
    let target_states = draw_targets(&sys, &c.targets, c.n_targets, mix_seed(seed, 2 * trial_id as u64))?;
    let targets = crate::control::periodic_schedule(target_states, c.period);
    let grid = c.grid()?;
    let noise = NoisePath::generate(sys.state_dim(), grid.n_steps, mix_seed(seed, 2 * trial_id as u64 + 1));
    let policy = c.policy()?;
    let setup = FeedbackSetup {
        policy: &policy,
        targets: &targets,
        x0: &c.x0,
        u0: &c.u0,
        grid,
        noise: &noise,
        record_stride: c.record_stride,
    };
    let trial = feedback_simulate(|x, u| sys.rhs(x, u), state_noise(c.sigma), controller, &setup)?;
    Ok(TrialOutcome { trial_id, targets, trial })
}

/// Per-target nRMSE over the final 20% of each target's allotted time.
pub fn trial_nrmse(outcome: &TrialOutcome, period: f64, magnitude: &[f64]) -> Result<Vec<Vec<f64>>> {
    let times = &outcome.trial.times;
    outcome
        .targets
        .iter()
        .map(|t| {
            let w = tail_window(times, t.t_start, t.t_start + period, 0.2);
            nrmse(&outcome.trial.states[w], &t.x_star, magnitude)
        })
        .collect()
}

/// Run `n_trials` trials and summarise tracking accuracy.
pub fn run_control_trials(
    recipe: &Recipe,
    controller: &(impl SplitField + Sync),
    n_trials: usize,
    seed: u64,
) -> Result<(Vec<TrialOutcome>, MetricsReport)> {
    let ids: Vec<usize> = (0..n_trials).collect();
    let outcomes = par::try_map(&ids, |&i| run_control_trial(recipe, controller, i, seed))?;
    let c = &recipe.control;
    let magnitude = match c.magnitude_kind {
        MagnitudeKind::Range => c.magnitude.clone(),
        MagnitudeKind::Iqr => (0..recipe.system.state_dim())
            .map(|k| {
                let all: Vec<f64> = outcomes.iter().flat_map(|o| o.trial.states.iter().map(move |s| s[k])).collect();
                iqr(&all)
            })
            .collect::<Result<Vec<_>>>()?,
    };
    let mut rows = Vec::new();
    for o in &outcomes {
        rows.extend(trial_nrmse(o, c.period, &magnitude)?);
    }
    Ok((outcomes, MetricsReport::new(rows, c.magnitude_kind, magnitude)))
}

/// Mean over trajectories of the per-trajectory nRMSE between a model and the
/// true system, both integrated with RK4 from each (initial state, control)
/// pair and compared at every `sample_every` time units up to `t_end`.
pub fn simulation_nrmse(
    model: &impl SplitField,
    system: &System,
    pairs: &[(Vec<f64>, Vec<f64>)],
    t_end: f64,
    h: f64,
    sample_every: f64,
    magnitude: &[f64],
) -> Result<Vec<f64>> {
    let stride = (sample_every / h).round().max(1.0) as usize;
    let n_samples = (t_end / sample_every).round() as usize;
    let grid = TimeGrid::new(0.0, t_end, n_samples * stride)?;
    let per = par::try_map(pairs, |(x0, u)| {
        let m = rk4_solve_strided(|x, u| model.field(x, u), x0, u, grid, stride)?;
        let t = rk4_solve_strided(|x, u| system.rhs(x, u), x0, u, grid, stride)?;
        let d = x0.len();
        let n = m.states.len() as f64;
        Ok((0..d)
            .map(|k| {
                let ss: f64 = m.states.iter().zip(&t.states).map(|(a, b)| (a[k] - b[k]).powi(2)).sum();
                (ss / n).sqrt() / magnitude[k]
            })
            .sum::<f64>()
            / d as f64)
    })?;
    Ok(per)
}
