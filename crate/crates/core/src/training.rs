//! Gradient- and trajectory-matching objectives, the mini-batch training
//! loop, and k-fold cross-validation with full-data retraining.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dynamics::ParametricField;
use crate::error::{Error, Result};
use crate::integrate::{finite_diff, Rk4Tape, TimeGrid, Trajectory};
use crate::nnet::{AdamConfig, AdamState, PlateauConfig, PlateauState};
use crate::par;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Objective {
    TrajMatching,
    GradMatching,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub objective: Objective,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    pub seed: u64,
    pub folds: usize,
    /// Independent initialisations tried in the final full-data fit.
    pub restarts: usize,
    /// RK4 steps between observations for trajectory matching.
    pub steps_per_sample: usize,
    pub adam: AdamConfig,
    pub plateau: PlateauConfig,
}

impl TrainConfig {
    pub fn new(objective: Objective, epochs: usize, batch_size: usize, lr0: f64) -> Self {
        Self {
            objective,
            epochs,
            batch_size,
            lr0,
            seed: 0,
            folds: 10,
            restarts: 3,
            steps_per_sample: 1,
            adam: AdamConfig::with_lr(lr0),
            plateau: PlateauConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch size must be at least 1".into()));
        }
        if self.folds < 2 {
            return Err(Error::InvalidConfig("need at least two folds".into()));
        }
        if !(self.lr0 > 0.0) {
            return Err(Error::InvalidConfig("initial learning rate must be positive".into()));
        }
        if self.steps_per_sample == 0 || self.restarts == 0 {
            return Err(Error::InvalidConfig("steps per sample and restarts must be at least 1".into()));
        }
        Ok(())
    }
}

/// A trajectory prepared for one objective.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub control: Vec<f64>,
    /// Finite-difference derivative estimates, for gradient matching.
    pub derivatives: Vec<Vec<f64>>,
}

/// Trajectories with their derivative estimates precomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    pub objective: Objective,
    pub samples: Vec<Sample>,
}

impl TrainingData {
    pub fn new(trajectories: &[Trajectory], objective: Objective) -> Result<Self> {
        let samples = trajectories
            .iter()
            .map(|t| {
                let derivatives = match objective {
                    Objective::GradMatching => finite_diff(&t.times, &t.states)?,
                    Objective::TrajMatching => Vec::new(),
                };
                Ok(Sample {
                    times: t.times.clone(),
                    states: t.states.clone(),
                    control: t.control.clone(),
                    derivatives,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { objective, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// The subset at the given indices, in that order.
    pub fn subset(&self, idx: &[usize]) -> Self {
        Self {
            objective: self.objective,
            samples: idx.iter().map(|&i| self.samples[i].clone()).collect(),
        }
    }
}

fn sq_norm_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Sum of squared errors of one trajectory and, when `grad` is given, its
/// gradient scaled by `weight` (accumulated).
fn grad_matching_single<M: ParametricField>(
    model: &M,
    s: &Sample,
    weight: f64,
    mut grad: Option<&mut [f64]>,
) -> f64 {
    let d = model.state_dim();
    let mut tape = M::Tape::default();
    let mut out = vec![0.0; d];
    let mut cot = vec![0.0; d];
    let mut sg = vec![0.0; d];
    let mut sse = 0.0;
    for (x, dx) in s.states.iter().zip(&s.derivatives) {
        match grad.as_deref_mut() {
            Some(g) => {
                model.field_taped(x, &s.control, &mut tape, &mut out);
                for i in 0..d {
                    cot[i] = 2.0 * weight * (out[i] - dx[i]);
                }
                model.field_vjp(&tape, &cot, g, &mut sg);
            }
            None => out.copy_from_slice(&model.field(x, &s.control)),
        }
        sse += sq_norm_diff(&out, dx);
    }
    sse
}

fn traj_matching_single<'m, M: ParametricField>(
    tape: &mut Rk4Tape<'m, M>,
    s: &Sample,
    steps_per_sample: usize,
    weight: f64,
    grad: Option<&mut [f64]>,
) -> Result<f64> {
    let n = s.times.len();
    if n < 2 {
        return Ok(0.0);
    }
    let grid = TimeGrid::new(s.times[0], s.times[n - 1], (n - 1) * steps_per_sample)?;
    tape.rerecord(&s.states[0], &s.control, grid, steps_per_sample)?;
    let sse = tape.recorded_states().zip(&s.states).map(|(p, o)| sq_norm_diff(p, o)).sum();
    if let Some(g) = grad {
        let cots: Vec<Vec<f64>> = tape
            .recorded_states()
            .zip(&s.states)
            .map(|(pred, obs)| pred.iter().zip(obs).map(|(p, o)| 2.0 * weight * (p - o)).collect())
            .collect();
        tape.backward(&cots, g)?;
    }
    Ok(sse)
}

const CHUNK: usize = 16;

fn total_points(samples: &[&Sample]) -> usize {
    samples.iter().map(|s| s.states.len()).sum()
}

/// Mean squared error over every observation in the batch, with gradient.
fn batch_loss<M: ParametricField>(
    model: &M,
    objective: Objective,
    batch: &[&Sample],
    steps_per_sample: usize,
    with_grad: bool,
) -> Result<(f64, Vec<f64>)> {
    if batch.is_empty() {
        return Err(Error::InvalidConfig("empty batch".into()));
    }
    let n = total_points(batch);
    if n == 0 {
        return Err(Error::InvalidConfig("batch has no observations".into()));
    }
    let weight = 1.0 / n as f64;
    let p = model.num_params();
    // Fixed-size chunks keep the summation order independent of the thread count.
    let chunks: Vec<&[&Sample]> = batch.chunks(CHUNK).collect();
    let parts = par::try_map(&chunks, |chunk| {
        let mut g = if with_grad { vec![0.0; p] } else { Vec::new() };
        let mut tape = Rk4Tape::empty(model);
        let mut sse = 0.0;
        for s in chunk.iter() {
            let gref = if with_grad { Some(g.as_mut_slice()) } else { None };
            sse += match objective {
                Objective::GradMatching => grad_matching_single(model, s, weight, gref),
                Objective::TrajMatching => traj_matching_single(&mut tape, s, steps_per_sample, weight, gref)?,
            };
        }
        Ok((sse, g))
    })?;
    let mut loss = 0.0;
    let mut grad = vec![0.0; if with_grad { p } else { 0 }];
    for (sse, g) in parts {
        loss += sse;
        for (a, b) in grad.iter_mut().zip(&g) {
            *a += b;
        }
    }
    Ok((loss * weight, grad))
}

/// Gradient-matching loss `(1/n) Σ ‖D(x_i) − F(x_i, u)‖²` and its gradient.
pub fn loss_grad_matching<M: ParametricField>(model: &M, batch: &[&Sample]) -> Result<(f64, Vec<f64>)> {
    if batch.iter().any(|s| s.derivatives.len() != s.states.len()) {
        return Err(Error::InvalidConfig("batch lacks derivative estimates".into()));
    }
    batch_loss(model, Objective::GradMatching, batch, 1, true)
}

/// Trajectory-matching loss `(1/n) Σ ‖x_i − x̂(t_i)‖²` through unrolled RK4.
pub fn loss_traj_matching<M: ParametricField>(
    model: &M,
    batch: &[&Sample],
    steps_per_sample: usize,
) -> Result<(f64, Vec<f64>)> {
    batch_loss(model, Objective::TrajMatching, batch, steps_per_sample, true)
}

/// Loss of `model` on all of `data` (no gradient).
pub fn full_loss<M: ParametricField>(model: &M, data: &TrainingData, steps_per_sample: usize) -> Result<f64> {
    let all: Vec<&Sample> = data.samples.iter().collect();
    Ok(batch_loss(model, data.objective, &all, steps_per_sample, false)?.0)
}

/// Whole-trajectory k-fold partition: `(train, validation)` index sets.
pub fn kfold_split(n: usize, k: usize, seed: u64) -> Result<Vec<(Vec<usize>, Vec<usize>)>> {
    if k < 2 {
        return Err(Error::InvalidConfig("need at least two folds".into()));
    }
    if n < k {
        return Err(Error::InvalidConfig(format!("{n} trajectories cannot fill {k} folds")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok((0..k)
        .map(|fold| {
            let mut val: Vec<usize> = idx.iter().skip(fold).step_by(k).copied().collect();
            val.sort_unstable();
            let mut train: Vec<usize> = idx
                .iter()
                .enumerate()
                .filter(|(pos, _)| pos % k != fold)
                .map(|(_, &i)| i)
                .collect();
            train.sort_unstable();
            (train, val)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub loss_history: Vec<f64>,
    pub lr_trace: Vec<f64>,
    pub val_history: Vec<f64>,
    pub initial_loss: f64,
    pub best_loss: f64,
    pub best_epoch: usize,
    pub best_val_loss: Option<f64>,
    /// Filled by callers that time the run; not part of the reproducible output.
    pub wall_time_s: f64,
    pub seed: u64,
    /// Why the run stopped early, if it did.
    pub error: Option<String>,
}

pub struct TrainOutcome<M> {
    pub model: M,
    pub report: TrainReport,
}

/// Mini-batch Adam over shuffled whole trajectories. The returned model holds
/// the parameters with the lowest full-data loss seen at an epoch end.
pub fn train<M: ParametricField>(
    model: &M,
    data: &TrainingData,
    config: &TrainConfig,
    validation: Option<&TrainingData>,
) -> Result<TrainOutcome<M>> {
    let (model, report) = train_reporting(model, data, config, validation);
    model.map(|model| TrainOutcome { model, report })
}

/// Like [`train`], but the report is returned even when training fails, holding
/// the history up to the failure and the error message.
pub fn train_reporting<M: ParametricField>(
    model: &M,
    data: &TrainingData,
    config: &TrainConfig,
    validation: Option<&TrainingData>,
) -> (Result<M>, TrainReport) {
    let mut report = TrainReport {
        config: config.clone(),
        loss_history: Vec::with_capacity(config.epochs),
        lr_trace: Vec::with_capacity(config.epochs),
        val_history: Vec::new(),
        initial_loss: f64::NAN,
        best_loss: f64::NAN,
        best_epoch: 0,
        best_val_loss: None,
        wall_time_s: 0.0,
        seed: config.seed,
        error: None,
    };
    let result = train_loop(model, data, config, validation, &mut report);
    if let Err(e) = &result {
        report.error = Some(e.to_string());
    }
    (result, report)
}

fn train_loop<M: ParametricField>(
    model: &M,
    data: &TrainingData,
    config: &TrainConfig,
    validation: Option<&TrainingData>,
    report: &mut TrainReport,
) -> Result<M> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::InvalidConfig("empty training set".into()));
    }
    let sps = config.steps_per_sample;
    let mut model = model.clone();
    let mut params = model.params().to_vec();
    let mut adam = AdamState::new(params.len(), AdamConfig { lr: config.lr0, ..config.adam });
    let mut plateau = PlateauState::new(config.lr0, config.plateau);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();

    let initial_loss = full_loss(&model, data, sps)?;
    report.initial_loss = initial_loss;
    if !initial_loss.is_finite() {
        return Err(Error::Diverged { epoch: 0, batch: 0, loss: initial_loss });
    }
    let mut best_params = params.clone();
    report.best_loss = initial_loss;
    if let Some(v) = validation {
        report.best_val_loss = Some(full_loss(&model, v, sps)?);
    }

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        for (b, chunk) in order.chunks(config.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
            let (loss, grad) = batch_loss(&model, data.objective, &batch, sps, true)?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            adam.step(&mut params, &grad)
                .map_err(|_| Error::Diverged { epoch, batch: b, loss })?;
            model.set_params(&params);
        }
        let epoch_loss = full_loss(&model, data, sps)?;
        if !epoch_loss.is_finite() {
            return Err(Error::Diverged { epoch, batch: 0, loss: epoch_loss });
        }
        if epoch_loss < report.best_loss {
            report.best_loss = epoch_loss;
            report.best_epoch = epoch;
            best_params.copy_from_slice(&params);
        }
        if let Some(v) = validation {
            let vl = full_loss(&model, v, sps)?;
            report.val_history.push(vl);
            report.best_val_loss = report.best_val_loss.map(|b| b.min(vl));
        }
        report.loss_history.push(epoch_loss);
        report.lr_trace.push(adam.lr());
        adam.set_lr(plateau.step(epoch_loss));
    }
    model.set_params(&best_params);
    Ok(model)
}

/// Builds a freshly initialised model from a seed.
pub type ModelBuilder<'a, M> = dyn Fn(u64) -> M + Sync + 'a;

pub struct Candidate<'a, M> {
    pub label: String,
    pub build: Box<ModelBuilder<'a, M>>,
}

impl<'a, M> Candidate<'a, M> {
    pub fn new(label: impl Into<String>, build: impl Fn(u64) -> M + Sync + 'a) -> Self {
        Self {
            label: label.into(),
            build: Box::new(build),
        }
    }
}

/// Fit `config.restarts` initialisations on all data and keep the one with the
/// lowest full-data loss. Reports of failed restarts are kept, with their error.
pub fn train_restarts<M: ParametricField>(
    build: &ModelBuilder<'_, M>,
    data: &TrainingData,
    config: &TrainConfig,
) -> (Result<M>, Vec<TrainReport>) {
    if let Err(e) = config.validate() {
        return (Err(e), Vec::new());
    }
    let seeds: Vec<u64> = (0..config.restarts as u64).map(|r| config.seed.wrapping_add(r)).collect();
    let runs = par::map(&seeds, |&seed| {
        let cfg = TrainConfig { seed, ..config.clone() };
        train_reporting(&build(seed), data, &cfg, None)
    });
    let mut best: Option<M> = None;
    let mut best_loss = f64::INFINITY;
    let mut reports = Vec::new();
    let mut last_err = None;
    for (run, report) in runs {
        match run {
            Ok(model) => {
                if best.is_none() || report.best_loss < best_loss {
                    best_loss = report.best_loss;
                    best = Some(model);
                }
            }
            Err(e) => last_err = Some(e),
        }
        reports.push(report);
    }
    let model = best.ok_or_else(|| last_err.unwrap_or_else(|| Error::InvalidConfig("no restarts".into())));
    (model, reports)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldResult {
    pub fold: usize,
    /// Best validation loss, or `None` when training on this fold failed.
    pub best_val_loss: Option<f64>,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateReport {
    pub id: usize,
    pub label: String,
    pub folds: Vec<FoldResult>,
    /// Mean over folds; infinite when any fold failed.
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub candidates: Vec<CandidateReport>,
    pub selected: usize,
    pub final_runs: Vec<TrainReport>,
}

/// k-fold selection over candidate architectures, then a full-data retrain of
/// the winner.
pub fn cross_validate<M: ParametricField>(
    candidates: &[Candidate<'_, M>],
    data: &TrainingData,
    config: &TrainConfig,
) -> Result<(M, CvReport)> {
    config.validate()?;
    if candidates.len() < 2 {
        return Err(Error::InvalidConfig("cross-validation needs at least two candidates".into()));
    }
    let splits = kfold_split(data.len(), config.folds, config.seed)?;
    let jobs: Vec<(usize, usize)> = (0..candidates.len())
        .flat_map(|c| (0..splits.len()).map(move |f| (c, f)))
        .collect();
    let results = par::map(&jobs, |&(c, f)| {
        let (train_idx, val_idx) = &splits[f];
        let cfg = TrainConfig {
            seed: config.seed.wrapping_add(f as u64),
            ..config.clone()
        };
        let model = (candidates[c].build)(cfg.seed);
        train(&model, &data.subset(train_idx), &cfg, Some(&data.subset(val_idx)))
            .map(|o| o.report.best_val_loss.unwrap_or(f64::INFINITY))
    });
    let mut reports: Vec<CandidateReport> = candidates
        .iter()
        .enumerate()
        .map(|(id, c)| CandidateReport {
            id,
            label: c.label.clone(),
            folds: Vec::new(),
            mean: 0.0,
        })
        .collect();
    for (&(c, f), r) in jobs.iter().zip(results) {
        reports[c].folds.push(match r {
            Ok(v) => FoldResult { fold: f, best_val_loss: Some(v), error: None },
            Err(e) => FoldResult { fold: f, best_val_loss: None, error: Some(e.to_string()) },
        });
    }
    for rep in &mut reports {
        rep.mean = if rep.folds.iter().any(|f| f.best_val_loss.is_none()) {
            f64::INFINITY
        } else {
            rep.folds.iter().map(|f| f.best_val_loss.unwrap()).sum::<f64>() / rep.folds.len() as f64
        };
    }
    let selected = reports
        .iter()
        .enumerate()
        .fold(0, |best, (i, r)| if r.mean < reports[best].mean { i } else { best });
    let (model, final_runs) = train_restarts(&*candidates[selected].build, data, config);
    let model = model?;
    Ok((
        model,
        CvReport {
            candidates: reports,
            selected,
            final_runs,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dynamics::{bounds, DomainBox, Featurizer, StructuredField};
    use crate::nnet::MlpSpec;

    fn tiny_field(seed: u64) -> StructuredField {
        StructuredField::new(
            1,
            1,
            Featurizer::disabled(),
            MlpSpec::new(vec![1, 3, 1], bounds(-2.0, -0.1)).unwrap(),
            MlpSpec::new(vec![2, 3, 1], bounds(-2.0, 2.0)).unwrap(),
            DomainBox::cube(1, -2.0, 2.0),
        )
        .unwrap()
        .init_seeded(seed)
    }

    fn linear_traj(id: usize, slope: f64) -> Trajectory {
        let times: Vec<f64> = (0..11).map(|i| 0.1 * i as f64).collect();
        Trajectory {
            id,
            states: times.iter().map(|t| vec![0.5 + slope * t]).collect(),
            times,
            control: vec![0.2],
        }
    }

    #[test]
    fn kfold_partition_properties() {
        let splits = kfold_split(10, 10, 3).unwrap();
        assert!(splits.iter().all(|(_, v)| v.len() == 1));
        let splits = kfold_split(23, 4, 9).unwrap();
        let mut all: Vec<usize> = splits.iter().flat_map(|(_, v)| v.clone()).collect();
        all.sort_unstable();
        assert_eq!(all, (0..23).collect::<Vec<_>>());
        let sizes: Vec<usize> = splits.iter().map(|(_, v)| v.len()).collect();
        assert!(sizes.iter().max().unwrap() - sizes.iter().min().unwrap() <= 1);
        for (t, v) in &splits {
            assert_eq!(t.len() + v.len(), 23);
            assert!(t.iter().all(|i| !v.contains(i)));
        }
        assert_eq!(splits, kfold_split(23, 4, 9).unwrap());
        assert!(kfold_split(3, 4, 0).is_err());
    }

    #[test]
    fn losses_are_order_invariant() {
        let field = tiny_field(1);
        let trajs: Vec<Trajectory> = (0..4).map(|i| linear_traj(i, 0.1 * i as f64)).collect();
        let data = TrainingData::new(&trajs, Objective::GradMatching).unwrap();
        let fwd: Vec<&Sample> = data.samples.iter().collect();
        let rev: Vec<&Sample> = data.samples.iter().rev().collect();
        let (a, _) = loss_grad_matching(&field, &fwd).unwrap();
        let (b, _) = loss_grad_matching(&field, &rev).unwrap();
        assert!((a - b).abs() <= 1e-15 * a.abs());
    }

    #[test]
    fn traj_matching_scaling_and_single_sample() {
        let field = tiny_field(2);
        let mut one = linear_traj(0, 0.0);
        one.times.truncate(1);
        one.states.truncate(1);
        let data = TrainingData::new(&[one], Objective::TrajMatching).unwrap();
        let (l, g) = loss_traj_matching(&field, &[&data.samples[0]], 1).unwrap();
        assert_eq!(l, 0.0);
        assert!(g.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn training_reduces_loss_and_is_deterministic() {
        let trajs: Vec<Trajectory> = (0..6).map(|i| linear_traj(i, -0.2 + 0.08 * i as f64)).collect();
        let data = TrainingData::new(&trajs, Objective::GradMatching).unwrap();
        let mut cfg = TrainConfig::new(Objective::GradMatching, 30, 2, 0.01);
        cfg.seed = 5;
        let a = train(&tiny_field(0), &data, &cfg, None).unwrap();
        let b = train(&tiny_field(0), &data, &cfg, None).unwrap();
        assert!(a.report.best_loss < a.report.initial_loss);
        assert_eq!(a.report.loss_history, b.report.loss_history);
        assert_eq!(a.model.params(), b.model.params());
    }

    #[test]
    fn config_validation() {
        let mut cfg = TrainConfig::new(Objective::GradMatching, 0, 2, 0.01);
        assert!(cfg.validate().is_err());
        cfg.epochs = 1;
        cfg.folds = 1;
        assert!(cfg.validate().is_err());
    }
}
