use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use serde_json::json;

use stablenode::analysis::{bifurcation_sweep, find_equilibria_nd, tail_window, SweepConfig};
use stablenode::benchmarks::{dataset_files, gen_dataset, SystemId};
use stablenode::dynamics::{FieldCheckpoint, SplitField, StructuredField};
use stablenode::experiments::{run_control_trials, state_noise, Model, Recipe, Scale};
use stablenode::integrate::{
    euler_maruyama_strided, fmt_f64, read_trajectory_csv, rk4_solve_strided, write_trajectory_csv, NoisePath,
    TimeGrid,
};
use stablenode::training::{cross_validate, train_restarts, Candidate, TrainConfig, TrainingData};

use crate::settings::{CliError, CliResult};
use crate::{BifurcateArgs, Common, ControlArgs, CvArgs, EquilibriaArgs, ModelArgs, SimulateArgs, TrainArgs};

/// On-disk checkpoint: the learned field plus the benchmark it was fit to.
#[derive(Debug, Serialize, Deserialize)]
struct CheckpointFile {
    system: SystemId,
    field: FieldCheckpoint,
}

fn recipe(common: &Common) -> CliResult<Recipe> {
    let name = common
        .system
        .as_deref()
        .ok_or_else(|| CliError::Config("--system is required".into()))?;
    let id: SystemId = name.parse()?;
    let scale = if common.paper_scale { Scale::Full } else { Scale::Desk };
    Ok(Recipe::new(id, scale))
}

fn write_json(path: &Path, value: &impl Serialize) -> CliResult<()> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    std::fs::write(path, bytes)?;
    Ok(())
}

fn write_checkpoint(common: &Common, recipe: &Recipe, model: &Model) -> CliResult<()> {
    let Model::Neural(field) = model else {
        return Err(CliError::Config("only learned fields are checkpointed".into()));
    };
    let file = CheckpointFile {
        system: recipe.system.id,
        field: field.to_checkpoint(),
    };
    write_json(&common.out.join("checkpoint.json"), &file)
}

fn load_model(common: &Common, recipe: &Recipe, args: &ModelArgs) -> CliResult<Model> {
    if common.oracle {
        if recipe.system.id == SystemId::TwoTanks {
            return Err(CliError::Config("two-tanks has no analytic splitting; pass a checkpoint".into()));
        }
        return Ok(recipe.oracle()?);
    }
    let path: PathBuf = common
        .settings
        .pick(args.checkpoint.clone(), "checkpoint")?
        .unwrap_or_else(|| common.out.join("checkpoint.json"));
    let text = std::fs::read_to_string(&path)
        .map_err(|e| CliError::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let file: CheckpointFile = serde_json::from_str(&text)?;
    if file.system != recipe.system.id {
        return Err(CliError::Config(format!(
            "checkpoint was fit to {}, not {}",
            file.system, recipe.system.id
        )));
    }
    Ok(Model::Neural(StructuredField::from_checkpoint(file.field)?))
}

fn load_data(common: &Common, recipe: &Recipe, data: &Option<PathBuf>) -> CliResult<TrainingData> {
    let path: PathBuf = common
        .settings
        .pick(data.clone(), "data")?
        .unwrap_or_else(|| common.out.join("dataset.csv"));
    let file = File::open(&path).map_err(|e| CliError::Config(format!("cannot open dataset {}: {e}", path.display())))?;
    let trajectories = read_trajectory_csv(file)?;
    if let Some(t) = trajectories.first() {
        if t.state_dim() != recipe.system.state_dim() || t.control.len() != recipe.system.control_dim() {
            return Err(CliError::Config(format!("{} does not hold {} data", path.display(), recipe.system.id)));
        }
    }
    Ok(TrainingData::new(&trajectories, recipe.train.objective)?)
}

fn train_config(common: &Common, base: TrainConfig, args: &TrainArgs) -> CliResult<TrainConfig> {
    let s = &common.settings;
    let mut config = base;
    config.epochs = s.pick_or(args.epochs, "epochs", config.epochs)?;
    config.batch_size = s.pick_or(args.batch_size, "batch_size", config.batch_size)?;
    config.lr0 = s.pick_or(args.lr, "lr", config.lr0)?;
    config.restarts = s.pick_or(args.restarts, "restarts", config.restarts)?;
    config.seed = common.seed;
    config.validate()?;
    Ok(config)
}

pub fn gen_data(common: &Common) -> CliResult<()> {
    let recipe = recipe(common)?;
    let dataset = gen_dataset(&recipe.system, &recipe.protocol)?;
    let (csv, manifest) = dataset_files(&dataset, &recipe.protocol, common.seed)?;
    std::fs::write(common.out.join("dataset.csv"), csv)?;
    write_json(&common.out.join("manifest.json"), &manifest)?;
    println!("{}: {} trajectories", recipe.system.id, manifest.num_trajectories);
    Ok(())
}

pub fn train(common: &Common, args: &TrainArgs) -> CliResult<()> {
    let recipe = recipe(common)?;
    let data = load_data(common, &recipe, &args.data)?;
    let config = train_config(common, recipe.final_train_config(), args)?;
    let build = |seed: u64| recipe.build_model(seed).expect("recipe architectures are valid");
    let start = Instant::now();
    let (model, runs) = train_restarts(&build, &data, &config);
    let report = json!({
        "system": recipe.system.id,
        "wall_time_s": start.elapsed().as_secs_f64(),
        "runs": runs,
    });
    write_json(&common.out.join("report.json"), &report)?;
    let model = model?;
    write_checkpoint(common, &recipe, &model)?;
    let best = runs.iter().filter(|r| r.error.is_none()).map(|r| r.best_loss).fold(f64::INFINITY, f64::min);
    if !best.is_finite() {
        return Err(stablenode::Error::NonFinite("final training loss".into()).into());
    }
    println!("best loss {best:e} over {} restarts", runs.len());
    Ok(())
}

pub fn cv(common: &Common, args: &CvArgs) -> CliResult<()> {
    let recipe = recipe(common)?;
    let data = load_data(common, &recipe, &args.train.data)?;
    let mut config = train_config(common, recipe.train.clone(), &args.train)?;
    config.folds = common.settings.pick_or(args.folds, "folds", config.folds)?;
    config.validate()?;
    let candidates: Vec<Candidate<'_, Model>> = recipe
        .candidates
        .iter()
        .map(|c| {
            Candidate::new(c.label(), move |seed| {
                Model::Neural(c.build(&recipe.system, seed).expect("recipe architectures are valid"))
            })
        })
        .collect();
    let start = Instant::now();
    let (model, report) = cross_validate(&candidates, &data, &config)?;
    write_json(
        &common.out.join("cv_report.json"),
        &json!({
            "system": recipe.system.id,
            "wall_time_s": start.elapsed().as_secs_f64(),
            "report": report,
        }),
    )?;
    write_checkpoint(common, &recipe, &model)?;
    for c in &report.candidates {
        println!("{:<40} mean validation loss {:e}", c.label, c.mean);
    }
    println!("selected {}", report.candidates[report.selected].label);
    Ok(())
}

fn check_dim(what: &str, expected: usize, got: &[f64]) -> CliResult<()> {
    if got.len() == expected {
        Ok(())
    } else {
        Err(CliError::Config(format!("{what} needs {expected} values, got {}", got.len())))
    }
}

pub fn simulate(common: &Common, args: &SimulateArgs) -> CliResult<()> {
    let recipe = recipe(common)?;
    let model = load_model(common, &recipe, &args.model)?;
    let s = &common.settings;
    let x0: Vec<f64> = s.pick_or(args.x0.clone(), "x0", recipe.control.x0.clone())?;
    let u: Vec<f64> = s.pick_or(args.u.clone(), "u", recipe.control.u0.clone())?;
    check_dim("x0", model.state_dim(), &x0)?;
    check_dim("u", model.control_dim(), &u)?;
    let t_end: f64 = s.pick_or(args.t_end, "t_end", 100.0)?;
    let dt: f64 = s.pick_or(args.dt, "dt", 0.01)?;
    let sigma: f64 = s.pick_or(args.sigma, "sigma", 0.0)?;
    let stride: usize = s.pick_or(args.record_every, "record_every", 1)?;
    if !(dt > 0.0 && t_end > 0.0) {
        return Err(CliError::Config("t_end and dt must be positive".into()));
    }
    let grid = TimeGrid::new(0.0, t_end, (t_end / dt).round().max(1.0) as usize)?;
    let mut traj = if sigma == 0.0 {
        rk4_solve_strided(|x, u| model.field(x, u), &x0, &u, grid, stride)?
    } else {
        let noise = NoisePath::generate(x0.len(), grid.n_steps, common.seed);
        euler_maruyama_strided(|x| model.field(x, &u), state_noise(sigma), &x0, grid, &noise, stride)?
    };
    traj.control = u;
    write_trajectory_csv(BufWriter::new(File::create(common.out.join("trajectory.csv"))?), &[traj])?;
    Ok(())
}

pub fn equilibria(common: &Common, args: &EquilibriaArgs) -> CliResult<()> {
    let recipe = recipe(common)?;
    let model = load_model(common, &recipe, &args.model)?;
    let u: Vec<f64> = common.settings.pick_or(args.u.clone(), "u", recipe.control.u0.clone())?;
    check_dim("u", model.control_dim(), &u)?;
    let (points, failed_starts) = if model.state_dim() == 1 {
        let (lo, hi, n_scan) = match &recipe.sweep {
            Some(sw) => (sw.state_lo, sw.state_hi, sw.n_scan),
            None => (recipe.model.domain.lo[0], recipe.model.domain.hi[0], 1000),
        };
        let cfg = SweepConfig {
            control_index: 0,
            base_control: u.clone(),
            grid: vec![u[0]],
            state_lo: lo,
            state_hi: hi,
            n_scan,
            residual: Recipe::residual_kind(&model),
        };
        let mut diagram = bifurcation_sweep(&model, &cfg)?;
        (diagram.branches.remove(0), 0)
    } else {
        let starts: usize = common.settings.pick_or(args.starts, "starts", 11)?;
        let roots = find_equilibria_nd(&model, &u, &recipe.model.domain, starts)?;
        (roots.roots, roots.failed_starts)
    };
    write_json(
        &common.out.join("equilibria.json"),
        &json!({ "system": recipe.system.id, "u": u, "equilibria": points, "failed_starts": failed_starts }),
    )?;
    for p in &points {
        let x: Vec<String> = p.x_star.iter().map(|v| format!("{v:.6}")).collect();
        println!("x* = ({}) {}", x.join(", "), p.stability.label());
    }
    Ok(())
}

pub fn bifurcate(common: &Common, args: &BifurcateArgs) -> CliResult<()> {
    let recipe = recipe(common)?;
    let model = load_model(common, &recipe, &args.model)?;
    let mut sweep = recipe
        .sweep
        .clone()
        .ok_or_else(|| CliError::Config(format!("{} has no scalar control sweep", recipe.system.id)))?;
    let s = &common.settings;
    sweep.lo = s.pick_or(args.lo, "lo", sweep.lo)?;
    sweep.hi = s.pick_or(args.hi, "hi", sweep.hi)?;
    sweep.points = s.pick_or(args.points, "points", sweep.points)?;
    sweep.n_scan = s.pick_or(args.n_scan, "n_scan", sweep.n_scan)?;
    let diagram = bifurcation_sweep(&model, &sweep.config(Recipe::residual_kind(&model)))?;

    let mut w = BufWriter::new(File::create(common.out.join("diagram.csv"))?);
    let d = model.state_dim();
    let header: Vec<String> = (0..d).map(|i| format!("x_star_{i}")).collect();
    writeln!(w, "control_value,{},stability", header.join(","))?;
    for (c, branch) in diagram.grid.iter().zip(&diagram.branches) {
        for p in branch {
            let xs: Vec<String> = p.x_star.iter().map(|&v| fmt_f64(v)).collect();
            writeln!(w, "{},{},{}", fmt_f64(*c), xs.join(","), p.stability.label())?;
        }
    }
    w.flush()?;
    write_json(&common.out.join("tipping.json"), &diagram.tipping_points)?;
    let tips: Vec<String> = diagram.tipping_points.iter().map(|t| format!("{t:.4}")).collect();
    println!("tipping points: [{}]", tips.join(", "));
    Ok(())
}

pub fn control(common: &Common, args: &ControlArgs) -> CliResult<()> {
    let mut recipe = recipe(common)?;
    let model = load_model(common, &recipe, &args.model)?;
    let s = &common.settings;
    let c = &mut recipe.control;
    c.k = s.pick_or(args.k, "k", c.k)?;
    c.eta = s.pick_or(args.eta, "eta", c.eta)?;
    c.sigma = s.pick_or(args.sigma, "sigma", c.sigma)?;
    c.n_targets = s.pick_or(args.targets, "targets", c.n_targets)?;
    c.trials = s.pick_or(args.trials, "trials", c.trials)?;
    c.period = s.pick_or(args.period, "period", c.period)?;
    if c.trials == 0 || c.n_targets == 0 || !(c.period > 0.0) || !(c.sigma >= 0.0) {
        return Err(CliError::Config("trials, targets and period must be positive, sigma non-negative".into()));
    }
    let (outcomes, metrics) = run_control_trials(&recipe, &model, recipe.control.trials, common.seed)?;
    let c = &recipe.control;

    let mut w = BufWriter::new(File::create(common.out.join("trials.csv"))?);
    let d = recipe.system.state_dim();
    let q = recipe.system.control_dim();
    let xs: Vec<String> = (0..d).map(|i| format!("x_{i}")).collect();
    let us: Vec<String> = (0..q).map(|j| format!("u_{j}")).collect();
    writeln!(w, "trial_id,target_id,t,{},{},phase", xs.join(","), us.join(","))?;
    for o in &outcomes {
        let tr = &o.trial;
        let windows: Vec<_> = o
            .targets
            .iter()
            .map(|t| tail_window(&tr.times, t.t_start, t.t_start + c.period, 0.2))
            .collect();
        for (i, ((t, x), u)) in tr.times.iter().zip(&tr.states).zip(&tr.controls).enumerate() {
            let target = tr.target_ids[i];
            // "settled" rows are the ones scored by the tracking metrics.
            let phase = if windows[target].contains(&i) { "settled" } else { "transient" };
            let xv: Vec<String> = x.iter().map(|&v| fmt_f64(v)).collect();
            let uv: Vec<String> = u.iter().map(|&v| fmt_f64(v)).collect();
            writeln!(w, "{},{target},{},{},{},{phase}", o.trial_id, fmt_f64(*t), xv.join(","), uv.join(","))?;
        }
    }
    w.flush()?;

    let targets: Vec<_> = outcomes.iter().map(|o| json!({ "trial_id": o.trial_id, "targets": o.targets })).collect();
    write_json(
        &common.out.join("summary.json"),
        &json!({
            "system": recipe.system.id,
            "controller": if common.oracle { "oracle" } else { "checkpoint" },
            "k": c.k,
            "eta": c.eta,
            "sigma": c.sigma,
            "trials": c.trials,
            "targets_per_trial": c.n_targets,
            "period": c.period,
            "seed": common.seed,
            "mean_nrmse": metrics.mean(),
            "metrics": metrics,
            "schedule": targets,
        }),
    )?;
    let fmt = |v: &[f64]| v.iter().map(|x| format!("{x:.3}")).collect::<Vec<_>>().join(", ");
    println!("mean nRMSE per state: [{}]", fmt(&metrics.mean()));
    println!("within 5%: [{}]  within 2%: [{}]", fmt(&metrics.within_5pct), fmt(&metrics.within_2pct));
    Ok(())
}
