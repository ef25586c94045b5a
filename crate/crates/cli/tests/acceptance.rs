//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and
//! exits non-zero if any fails. Pass criterion numbers to run a subset.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};

use stablenode::analysis::{classify_stability, contraction_bound, Stability};
use stablenode::benchmarks::{gen_dataset, OracleSplit, System, SystemId};
use stablenode::control::linear::{gd_linear, gradient_flow_linear, linear_minnorm, ridge_solve, LinearControlProblem};
use stablenode::control::iterate_g;
use stablenode::dynamics::{bounds, DomainBox, Featurizer, ParametricField, SplitField, StructuredField};
use stablenode::experiments::{mix_seed, run_control_trials, simulation_nrmse, Recipe, Scale};
use stablenode::integrate::{rk4_solve, rk4_solve_unrolled_grad, TimeGrid};
use stablenode::nnet::{MlpSpec, OutputBounds};
use stablenode::training::{train, TrainingData};

type Outcome = Result<String, String>;

/// Deterministic uniform draws.
struct Draws(u64, u64);

impl Draws {
    fn new(seed: u64) -> Self {
        Self(seed, 0)
    }

    fn unit(&mut self) -> f64 {
        self.1 += 1;
        (mix_seed(self.0, self.1) >> 11) as f64 / (1u64 << 53) as f64
    }

    fn range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.unit()
    }

    fn int(&mut self, lo: usize, hi: usize) -> usize {
        lo + (self.unit() * (hi - lo + 1) as f64) as usize % (hi - lo + 1)
    }

    fn vec(&mut self, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| self.range(lo, hi)).collect()
    }
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if scale < 1e-12 {
        diff
    } else {
        diff / scale
    }
}

fn central_diff(x: &[f64], h: f64, f: impl Fn(&[f64]) -> f64) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut p = x.to_vec();
            p[i] += h;
            let up = f(&p);
            p[i] -= 2.0 * h;
            (up - f(&p)) / (2.0 * h)
        })
        .collect()
}

fn random_field(rng: &mut Draws, d: usize, q: usize) -> StructuredField {
    let modes = rng.int(0, 3);
    let feat = if modes == 0 {
        Featurizer::disabled()
    } else {
        Featurizer::new(-1.0, 1.0, modes).unwrap()
    };
    let hidden = rng.int(2, 8);
    let f = MlpSpec::new(vec![d, hidden, d], bounds(-3.0, -0.05)).unwrap();
    let g = MlpSpec::new(vec![d * feat.len() + q, hidden, hidden, d], bounds(-2.0, 2.0)).unwrap();
    StructuredField::new(d, q, feat, f, g, DomainBox::cube(d, -1.0, 1.0))
        .unwrap()
        .init_seeded(mix_seed(rng.0, rng.1))
}

fn with_params(model: &StructuredField, p: &[f64]) -> StructuredField {
    let mut m = model.clone();
    m.set_params(p);
    m
}

fn criterion_1() -> Outcome {
    let mut rng = Draws::new(1);
    let (mut worst_mlp, mut worst_field, mut worst_rk4) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let depth = rng.int(1, 3);
        let mut layers = vec![rng.int(1, 4)];
        layers.extend((0..depth).map(|_| rng.int(1, 8)));
        layers.push(rng.int(1, 3));
        let lo = rng.range(-3.0, 1.0);
        let spec = MlpSpec::new(layers, OutputBounds::new(lo, lo + rng.range(0.5, 4.0)).unwrap()).unwrap();
        let params = spec.init_params(mix_seed(2, rng.1)).values;
        let input = rng.vec(spec.input_dim(), -2.0, 2.0);
        let cot = rng.vec(spec.output_dim(), -1.0, 1.0);
        let dot = |p: &[f64], x: &[f64]| -> f64 { spec.forward(p, x).unwrap().iter().zip(&cot).map(|(a, b)| a * b).sum() };
        let (gp, gx) = spec.backward(&params, &input, &cot).unwrap();
        worst_mlp = worst_mlp
            .max(rel_err(&gp, &central_diff(&params, 1e-6, |p| dot(p, &input))))
            .max(rel_err(&gx, &central_diff(&input, 1e-6, |x| dot(&params, x))));
    }
    for _ in 0..100 {
        let d = rng.int(1, 2);
        let q = rng.int(1, 2);
        let model = random_field(&mut rng, d, q);
        let x = rng.vec(d, -1.5, 1.5);
        let u = rng.vec(q, -1.0, 1.0);
        let cot = rng.vec(d, -1.0, 1.0);
        let dot = |m: &StructuredField, x: &[f64]| -> f64 { m.field(x, &u).iter().zip(&cot).map(|(a, b)| a * b).sum() };
        let mut tape = Default::default();
        let mut out = vec![0.0; d];
        model.field_taped(&x, &u, &mut tape, &mut out);
        let mut pg = vec![0.0; model.num_params()];
        let mut sg = vec![0.0; d];
        model.field_vjp(&tape, &cot, &mut pg, &mut sg);
        let fd_p = central_diff(model.params(), 1e-6, |p| dot(&with_params(&model, p), &x));
        worst_field = worst_field.max(rel_err(&pg, &fd_p)).max(rel_err(&sg, &central_diff(&x, 1e-6, |y| dot(&model, y))));
    }
    for _ in 0..100 {
        let d = rng.int(1, 2);
        let model = random_field(&mut rng, d, 1);
        let x0 = rng.vec(d, -1.0, 1.0);
        let u = rng.vec(1, -1.0, 1.0);
        let n = rng.int(2, 10);
        let grid = TimeGrid::new(0.0, rng.range(0.2, 2.0), n).unwrap();
        let cots: Vec<Vec<f64>> = (0..=n).map(|_| rng.vec(d, -1.0, 1.0)).collect();
        let loss = |m: &StructuredField| -> f64 {
            let traj = rk4_solve(|x, u| m.field(x, u), &x0, &u, grid).unwrap();
            traj.states.iter().zip(&cots).map(|(s, c)| s.iter().zip(c).map(|(a, b)| a * b).sum::<f64>()).sum()
        };
        let grad = rk4_solve_unrolled_grad(&model, &x0, &u, grid, &cots).unwrap();
        let fd = central_diff(model.params(), 1e-6, |p| loss(&with_params(&model, p)));
        worst_rk4 = worst_rk4.max(rel_err(&grad, &fd));
    }
    let detail = format!("worst relative error: mlp {worst_mlp:.1e}, field {worst_field:.1e}, unrolled rk4 {worst_rk4:.1e}");
    if worst_mlp <= 1e-4 && worst_field <= 1e-4 && worst_rk4 <= 1e-3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_2() -> Outcome {
    let mut rng = Draws::new(2);
    let mut worst = 0.0f64;
    for id in [SystemId::SymHysteresis, SystemId::Budworm, SystemId::ToggleSwitch] {
        let system = System::standard(id);
        for _ in 0..10_000 {
            let (x, u) = match id {
                SystemId::SymHysteresis => (vec![rng.range(-2.5, 2.5)], vec![rng.range(-1.5, 1.5)]),
                SystemId::Budworm => (vec![rng.range(1e-3, 12.0)], vec![rng.range(4.0, 12.0)]),
                _ => (rng.vec(2, 0.0, 6.0), [rng.vec(2, 0.0, 5.0), rng.vec(2, 1.0, 4.0)].concat()),
            };
            let (f, g) = system.analytic_split(&x, &u).map_err(|e| e.to_string())?;
            let rhs = system.rhs(&x, &u);
            for i in 0..x.len() {
                if !(f[i] < 0.0) {
                    return Err(format!("{id}: f = {} at {x:?}", f[i]));
                }
                worst = worst.max((f[i] * (x[i] - g[i]) - rhs[i]).abs());
            }
        }
    }
    let detail = format!("worst |f(x - g) - rhs| = {worst:.1e} over 3 x 10^4 points");
    if worst <= 1e-12 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_3() -> Outcome {
    let expected = 2.0 / 27f64.sqrt();
    let hyst = Recipe::new(SystemId::SymHysteresis, Scale::Desk);
    let sweep = hyst.sweep.as_ref().unwrap();
    let cell = (sweep.hi - sweep.lo) / (sweep.points - 1) as f64;
    let d = hyst.sweep_model(&hyst.oracle().unwrap()).map_err(|e| e.to_string())?;
    let hyst_ok = d.tipping_points.len() == 2
        && (d.tipping_points[0] + expected).abs() <= cell
        && (d.tipping_points[1] - expected).abs() <= cell;
    let bud = Recipe::new(SystemId::Budworm, Scale::Desk);
    let b = bud.sweep_model(&bud.oracle().unwrap()).map_err(|e| e.to_string())?;
    let bud_ok = b.tipping_points.len() == 2
        && (b.tipping_points[0] - 6.45).abs() <= 0.05
        && (b.tipping_points[1] - 9.93).abs() <= 0.05;
    let detail = format!(
        "hysteresis {:?} (cell {cell}), budworm {:?}",
        d.tipping_points, b.tipping_points
    );
    if hyst_ok && bud_ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// `g(x) = L tanh(x) + u + c`, Lipschitz with constant exactly `L`.
struct TanhMap {
    lip: f64,
    shift: f64,
}

impl SplitField for TanhMap {
    fn state_dim(&self) -> usize {
        1
    }

    fn control_dim(&self) -> usize {
        1
    }

    fn decay(&self, _: &[f64]) -> Vec<f64> {
        vec![-1.0]
    }

    fn equilibrium_map(&self, x: &[f64], u: &[f64]) -> Vec<f64> {
        vec![self.lip * x[0].tanh() + u[0] + self.shift]
    }

    fn equilibrium_map_vjp(&self, x: &[f64], _: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let t = x[0].tanh();
        (vec![c[0] * self.lip * (1.0 - t * t)], vec![c[0]])
    }
}

fn criterion_4() -> Outcome {
    // (a) sign of F'(x*) against dg/dx(x*) < 1 on every oracle equilibrium.
    let mut checked = 0;
    for id in [SystemId::SymHysteresis, SystemId::Budworm] {
        let recipe = Recipe::new(id, Scale::Desk);
        let oracle = OracleSplit::new(recipe.system).unwrap();
        let diagram = recipe.sweep_model(&recipe.oracle().unwrap()).map_err(|e| e.to_string())?;
        for p in diagram.points() {
            let dfdx = oracle.rhs_jacobian(&p.x_star, &p.u)[0];
            let (dg, _) = oracle.equilibrium_map_vjp(&p.x_star, &p.u, &[1.0]);
            if (dfdx < 0.0) != (dg[0] < 1.0) {
                return Err(format!("{id}: F' = {dfdx:e} but g' = {} at {:?}", dg[0], p.x_star));
            }
            if (dfdx < 0.0) != (p.stability == Stability::Stable) {
                return Err(format!("{id}: stability label disagrees with F' at {:?}", p.x_star));
            }
            checked += 1;
        }
    }
    // (b) geometric convergence of fixed-point iteration under known contractions.
    let mut worst_ratio = 0.0f64;
    for (i, lip) in [0.1, 0.35, 0.6, 0.9, 0.99].into_iter().enumerate() {
        let map = TanhMap { lip, shift: 0.3 * i as f64 };
        let u = [0.2];
        let mut x_star = vec![0.0];
        for _ in 0..100_000 {
            x_star = map.equilibrium_map(&x_star, &u);
        }
        let (bound, contracts) = contraction_bound(&map, &x_star, &u, 2.0).map_err(|e| e.to_string())?;
        if !contracts || bound > lip * (1.0 + 1e-6) {
            return Err(format!("contraction estimate {bound} for L = {lip}"));
        }
        for x0 in [-1.5, 0.4, 2.0] {
            let e0 = (x0 - x_star[0]).abs();
            for k in 1..=60 {
                let xk = iterate_g(&map, &[x0], &u, k)[0];
                let ek = (xk - x_star[0]).abs();
                let allowed = lip.powi(k as i32) * e0;
                if ek > allowed + 4.0 * f64::EPSILON * (1.0 + x_star[0].abs()) {
                    return Err(format!("L = {lip}, k = {k}: {ek:e} > {allowed:e}"));
                }
                if allowed > 1e-12 {
                    worst_ratio = worst_ratio.max(ek / allowed);
                }
            }
        }
    }
    // (c) a stable equilibrium whose implicit map is not a contraction.
    let hyst = OracleSplit::new(System::standard(SystemId::SymHysteresis)).unwrap();
    let u = [1.0];
    let x_star = stablenode::analysis::find_equilibria_1d(|x| hyst.field(&[x], &u)[0], -2.0, 2.0, 401);
    let [x_star] = x_star.as_slice() else {
        return Err(format!("expected one equilibrium at lambda = 1, got {x_star:?}"));
    };
    let slope = hyst.equilibrium_map_vjp(&[*x_star], &u, &[1.0]).0[0];
    let stability = classify_stability(|x| hyst.field(x, &u), &[*x_star]).map_err(|e| e.to_string())?;
    let detail = format!(
        "{checked} sweep equilibria consistent; worst |x_k - x*| / (L^k |x0 - x*|) = {worst_ratio:.3}; \
         lambda = 1: x* = {x_star:.4}, g' = {slope:.3}, {}",
        stability.label()
    );
    if slope.abs() > 1.0 && (slope.abs() - 1.43).abs() < 0.01 && stability == Stability::Stable {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn random_full_rank(rng: &mut Draws) -> DMatrix<f64> {
    loop {
        let q = rng.int(2, 5);
        let d = rng.int(q, 6);
        let g = DMatrix::from_fn(d, q, |_, _| rng.range(-1.0, 1.0));
        let s = g.clone().svd(false, false).singular_values;
        // Condition numbers up to 20 keep the gradient-flow grids small.
        if s.min() > 0.05 * s.max() {
            return g;
        }
    }
}

fn criterion_5() -> Outcome {
    let mut rng = Draws::new(5);
    let (mut worst_rate, mut worst_flow, mut worst_ridge) = (0.0f64, f64::NEG_INFINITY, 0.0f64);
    for _ in 0..100 {
        let g = random_full_rank(&mut rng);
        let (d, q) = g.shape();
        // A zero target puts the optimum at the origin, so errors stay
        // measurable far below the scale of the iterates.
        let prob = LinearControlProblem::new(g.clone(), DVector::zeros(d)).unwrap();
        let rho = prob.optimal_rate();
        let svd = g.clone().svd(false, true);
        let v_t = svd.v_t.unwrap();
        let (imax, imin) = (svd.singular_values.imax(), svd.singular_values.imin());
        // Equal weight on both extreme right singular vectors: the slowest mode pair.
        let u0 = (v_t.row(imax) + v_t.row(imin)).transpose();
        let hist = gd_linear(&prob, &u0, prob.optimal_step(), 200).map_err(|e| e.to_string())?;
        for r in hist.ratios(1e-250) {
            worst_rate = worst_rate.max((r - rho).abs());
        }
        // Random starts never contract slower than rho.
        let u_rand = DVector::from_vec(rng.vec(q, -1.0, 1.0));
        let hist = gd_linear(&prob, &u_rand, prob.optimal_step(), 200).map_err(|e| e.to_string())?;
        for r in hist.ratios(1e-250) {
            worst_rate = worst_rate.max(r - rho);
        }

        let target = DVector::from_vec(rng.vec(d, -1.0, 1.0));
        let prob = LinearControlProblem::new(g.clone(), target).unwrap();
        let eta = rng.range(0.2, 2.0);
        let (smax, smin) = prob.extreme_singular_values();
        let t_end = 3.0 / (eta * smin * smin);
        let n = ((t_end * eta * smax * smax) / 0.1).ceil() as usize;
        let flow = gradient_flow_linear(&prob, &u_rand, eta, TimeGrid::new(0.0, t_end, n).unwrap())
            .map_err(|e| e.to_string())?;
        let e0 = flow.errors[0];
        for (t, e) in flow.times.iter().zip(&flow.errors) {
            let bound = (-eta * smin * smin * t).exp() * e0;
            worst_flow = worst_flow.max((e - bound) / e0);
        }

        let ridge = ridge_solve(&prob.clone().with_ridge(1e-10)).map_err(|e| e.to_string())?;
        worst_ridge = worst_ridge.max((ridge - linear_minnorm(&prob)).norm());
    }
    let detail = format!(
        "max |ratio - rho| {worst_rate:.1e}; max flow excess over bound {worst_flow:.1e}; max ridge gap {worst_ridge:.1e}"
    );
    if worst_rate <= 1e-6 && worst_flow <= 1e-9 && worst_ridge <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_6() -> Outcome {
    let recipe = Recipe::new(SystemId::SymHysteresis, Scale::Desk);
    let ds = gen_dataset(&recipe.system, &recipe.protocol).map_err(|e| e.to_string())?;
    let data = TrainingData::new(&ds.trajectories, recipe.train.objective).map_err(|e| e.to_string())?;
    let model = recipe.build_model(recipe.train.seed).unwrap();
    let out = train(&model, &data, &recipe.final_train_config(), None).map_err(|e| e.to_string())?;
    let reduction = out.report.initial_loss / out.report.best_loss;
    let pairs: Vec<_> = ds.trajectories.iter().map(|t| (t.states[0].clone(), t.control.clone())).collect();
    let errs = simulation_nrmse(&out.model, &recipe.system, &pairs, 100.0, 0.05, 1.0, &[3.0]).map_err(|e| e.to_string())?;
    let mean = errs.iter().sum::<f64>() / errs.len() as f64;
    let tips = recipe.sweep_model(&out.model).map_err(|e| e.to_string())?.tipping_points;
    let expected = 2.0 / 27f64.sqrt();
    let tips_ok = tips.len() == 2 && (tips[0] + expected).abs() <= 0.05 && (tips[1] - expected).abs() <= 0.05;
    let detail = format!(
        "{} epochs; loss {:.2e} -> {:.2e} ({reduction:.1e}x); simulation nRMSE mean {mean:.2e}; tipping {tips:?}",
        out.report.config.epochs, out.report.initial_loss, out.report.best_loss
    );
    if mean <= 1e-2 && tips_ok && reduction >= 1e3 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn trained_controller(id: SystemId) -> Result<(Recipe, stablenode::experiments::Model, String), String> {
    let recipe = Recipe::new(id, Scale::Desk);
    let ds = gen_dataset(&recipe.system, &recipe.protocol).map_err(|e| e.to_string())?;
    let data = TrainingData::new(&ds.trajectories, recipe.train.objective).map_err(|e| e.to_string())?;
    let model = recipe.build_model(recipe.train.seed).unwrap();
    let out = train(&model, &data, &recipe.final_train_config(), None).map_err(|e| e.to_string())?;
    let note = format!("{} epochs, loss {:.2e}", out.report.config.epochs, out.report.best_loss);
    Ok((recipe, out.model, note))
}

fn criterion_7() -> Outcome {
    let (recipe, model, note) = trained_controller(SystemId::TwoTanks)?;
    let (outcomes, metrics) = run_control_trials(&recipe, &model, 10, 1).map_err(|e| e.to_string())?;
    let lowest = outcomes.iter().flat_map(|o| o.trial.control_min.iter().copied()).fold(f64::INFINITY, f64::min);
    let highest = outcomes.iter().flat_map(|o| o.trial.control_max.iter().copied()).fold(f64::NEG_INFINITY, f64::max);
    let gates_ok = lowest > 0.0 && highest < 1.0;
    let detail = format!(
        "{note}; within 5% per tank {:?} over {} targets; controls span [{lowest:.4}, {highest:.4}] over every step",
        metrics.within_5pct,
        metrics.nrmse.len()
    );
    if gates_ok && metrics.within_5pct.iter().all(|&f| f >= 0.9) {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_8() -> Outcome {
    let (recipe, model, note) = trained_controller(SystemId::Budworm)?;
    let (_, metrics) = run_control_trials(&recipe, &model, 10, 1).map_err(|e| e.to_string())?;
    let detail = format!(
        "{note}; within 5% {:.2} over {} targets (within 2% {:.2})",
        metrics.within_5pct[0],
        metrics.nrmse.len(),
        metrics.within_2pct[0]
    );
    if metrics.within_5pct[0] >= 0.85 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn criterion_9() -> Outcome {
    let mut rng = Draws::new(9);
    let (g_lo, g_hi) = (-2.0, 2.0);
    let mut worst = f64::NEG_INFINITY;
    for _ in 0..1000 {
        let d = rng.int(1, 2);
        let q = rng.int(1, 2);
        let model = random_field(&mut rng, d, q);
        // Twice the [-1, 1] domain box.
        let x0 = rng.vec(d, -2.0, 2.0);
        let u = rng.vec(q, -1.0, 1.0);
        let traj = rk4_solve(|x, u| model.field(x, u), &x0, &u, TimeGrid::new(0.0, 20.0, 400).unwrap())
            .map_err(|e| e.to_string())?;
        for s in &traj.states {
            for i in 0..d {
                let lo = x0[i].min(g_lo);
                let hi = x0[i].max(g_hi);
                worst = worst.max(lo - s[i]).max(s[i] - hi);
            }
        }
    }
    let detail = format!("max excursion outside the hull {worst:.1e} over 1000 fields");
    if worst <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let status = Command::new(env!("CARGO_BIN_EXE_stablenode"))
        .args(["--threads", "1", "--out"])
        .arg(dir)
        .args(args)
        .stdout(std::process::Stdio::null())
        .status()
        .map_err(|e| e.to_string())?;
    if status.success() {
        Ok(())
    } else {
        Err(format!("`{}` exited with {status}", args.join(" ")))
    }
}

/// File bytes, with the wall-clock field dropped from JSON reports.
fn comparable(path: &Path) -> Result<Vec<u8>, String> {
    let bytes = std::fs::read(path).map_err(|e| format!("{}: {e}", path.display()))?;
    if path.extension().is_some_and(|e| e == "json") {
        let mut v: serde_json::Value = serde_json::from_slice(&bytes).map_err(|e| e.to_string())?;
        if let Some(obj) = v.as_object_mut() {
            obj.remove("wall_time_s");
        }
        return serde_json::to_vec(&v).map_err(|e| e.to_string());
    }
    Ok(bytes)
}

fn criterion_10() -> Outcome {
    let steps: &[(&[&str], &[&str])] = &[
        (&["--system", "budworm", "gen-data"], &["dataset.csv", "manifest.json"]),
        (
            &["--system", "budworm", "train", "--epochs", "10", "--restarts", "2", "--batch-size", "50", "--lr", "0.01"],
            &["checkpoint.json", "report.json"],
        ),
        (&["--system", "budworm", "simulate", "--x0", "2", "--u", "7", "--t-end", "20", "--sigma", "0.02"], &["trajectory.csv"]),
        (&["--system", "budworm", "equilibria", "--u", "8"], &["equilibria.json"]),
        (&["--system", "budworm", "bifurcate", "--points", "80"], &["diagram.csv", "tipping.json"]),
        (
            &["--system", "budworm", "control", "--trials", "2", "--targets", "2", "--period", "20"],
            &["trials.csv", "summary.json"],
        ),
        (
            &["--system", "budworm", "cv", "--epochs", "1", "--folds", "2", "--restarts", "1", "--batch-size", "400"],
            &["cv_report.json", "checkpoint.json"],
        ),
    ];
    let runs: Vec<tempfile::TempDir> = (0..2).map(|_| tempfile::tempdir().unwrap()).collect();
    let mut compared = 0;
    for (args, files) in steps {
        for run in &runs {
            run_cli(run.path(), args)?;
        }
        for f in *files {
            let a = comparable(&runs[0].path().join(f))?;
            let b = comparable(&runs[1].path().join(f))?;
            if a != b {
                return Err(format!("{f} differs between runs of `{}`", args.join(" ")));
            }
            compared += 1;
        }
    }
    Ok(format!("{compared} output files byte-identical across two runs of {} commands", steps.len()))
}

fn main() {
    let criteria: [(usize, &str, fn() -> Outcome); 10] = [
        (1, "gradient correctness", criterion_1),
        (2, "oracle-split identity", criterion_2),
        (3, "bifurcation oracles", criterion_3),
        (4, "stability and contraction suite", criterion_4),
        (5, "linear-control theory", criterion_5),
        (6, "hysteresis end-to-end", criterion_6),
        (7, "tanks feedback control", criterion_7),
        (8, "budworm control", criterion_8),
        (9, "structural stability", criterion_9),
        (10, "CLI determinism", criterion_10),
    ];
    let selected: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (n, name, check) in criteria {
        if !selected.is_empty() && !selected.contains(&n) {
            continue;
        }
        let start = Instant::now();
        let outcome = check();
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("PASS criterion {n} ({name}, {secs:.1}s): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {n} ({name}, {secs:.1}s): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
