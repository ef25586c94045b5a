//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Every operation runs on the analytic split of a benchmark, so the page
//! needs no trained checkpoint. Results are returned as JSON strings.

use serde::Serialize;
use stablenode::analysis::{bifurcation_sweep, find_equilibria_nd, ResidualKind, Stability, SweepConfig};
use stablenode::benchmarks::{linspace, OracleSplit, System, SystemId, SystemParams};
use stablenode::dynamics::DomainBox;
use stablenode::experiments::{run_control_trials, Recipe, Scale};
use stablenode::integrate::{rk4_solve_strided, TimeGrid};
use wasm_bindgen::prelude::*;

type DemoResult<T> = std::result::Result<T, String>;

fn finite(name: &str, v: f64) -> DemoResult<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(format!("{name} must be a finite number"))
    }
}

#[derive(Debug, Serialize)]
pub struct DiagramPoint {
    pub kappa: f64,
    pub x: f64,
    pub stable: bool,
}

#[derive(Debug, Serialize)]
pub struct Diagram {
    pub points: Vec<DiagramPoint>,
    pub tipping_points: Vec<f64>,
}

/// Budworm equilibria against the carrying capacity `κ` for growth rate `r`.
pub fn budworm_diagram(r: f64, lo: f64, hi: f64, points: usize) -> DemoResult<Diagram> {
    let r = finite("r", r)?;
    if !(r > 0.0) {
        return Err("r must be positive".into());
    }
    if !(finite("lo", lo)? > 0.0 && finite("hi", hi)? > lo) {
        return Err("need 0 < lo < hi".into());
    }
    if !(2..=2000).contains(&points) {
        return Err("points must lie in 2..=2000".into());
    }
    let oracle = OracleSplit::new(System {
        id: SystemId::Budworm,
        params: SystemParams::Budworm { r },
    })
    .map_err(|e| e.to_string())?;
    let cfg = SweepConfig {
        control_index: 0,
        base_control: vec![lo],
        grid: linspace(lo, hi, points),
        state_lo: 0.05,
        state_hi: hi * 1.2,
        n_scan: 1200,
        residual: ResidualKind::VectorField,
    };
    let d = bifurcation_sweep(&oracle, &cfg).map_err(|e| e.to_string())?;
    Ok(Diagram {
        points: d
            .points()
            .map(|p| DiagramPoint {
                kappa: p.u[0],
                x: p.x_star[0],
                stable: p.stability == Stability::Stable,
            })
            .collect(),
        tipping_points: d.tipping_points,
    })
}

#[derive(Debug, Serialize)]
pub struct ControlRun {
    pub times: Vec<f64>,
    pub states: Vec<Vec<f64>>,
    pub controls: Vec<Vec<f64>>,
    pub target_starts: Vec<f64>,
    pub targets: Vec<Vec<f64>>,
    pub period: f64,
    pub nrmse: Vec<Vec<f64>>,
    pub within_5pct: Vec<f64>,
}

/// One closed-loop trial steered through the analytic equilibrium map.
pub fn control_trial(system: &str, n_targets: usize, eta: f64, sigma: f64, seed: u64) -> DemoResult<ControlRun> {
    let id: SystemId = system.parse().map_err(|e: stablenode::Error| e.to_string())?;
    if !matches!(id, SystemId::Budworm | SystemId::ToggleSwitch) {
        return Err("control demo supports budworm and toggle-switch".into());
    }
    if !(1..=20).contains(&n_targets) {
        return Err("targets must lie in 1..=20".into());
    }
    if !(finite("eta", eta)? > 0.0) || !(finite("sigma", sigma)? >= 0.0) {
        return Err("need eta > 0 and sigma >= 0".into());
    }
    let mut recipe = Recipe::new(id, Scale::Desk);
    recipe.control.n_targets = n_targets;
    recipe.control.eta = eta;
    recipe.control.sigma = sigma;
    let oracle = OracleSplit::new(recipe.system).map_err(|e| e.to_string())?;
    let (mut outcomes, report) = run_control_trials(&recipe, &oracle, 1, seed).map_err(|e| e.to_string())?;
    let o = outcomes.pop().ok_or("no trial was run")?;
    Ok(ControlRun {
        times: o.trial.times,
        states: o.trial.states,
        controls: o.trial.controls,
        target_starts: o.targets.iter().map(|t| t.t_start).collect(),
        targets: o.targets.into_iter().map(|t| t.x_star).collect(),
        period: recipe.control.period,
        nrmse: report.nrmse,
        within_5pct: report.within_5pct,
    })
}

#[derive(Debug, Serialize)]
pub struct BasinEquilibrium {
    pub x: Vec<f64>,
    pub stable: bool,
}

#[derive(Debug, Serialize)]
pub struct BasinMap {
    pub n: usize,
    pub extent: f64,
    pub equilibria: Vec<BasinEquilibrium>,
    /// Row-major `n × n` (row = `x2`, column = `x1`): index into `equilibria`
    /// of the stable point each start settles on, or `-1`.
    pub basin: Vec<i32>,
}

const BASIN_EXTENT: f64 = 6.0;

/// Which stable equilibrium of the toggle switch each initial state reaches.
pub fn toggle_basins(alpha1: f64, alpha2: f64, beta: f64, gamma: f64, n: usize) -> DemoResult<BasinMap> {
    let u = vec![finite("alpha1", alpha1)?, finite("alpha2", alpha2)?, finite("beta", beta)?, finite("gamma", gamma)?];
    if u.iter().any(|&v| v <= 0.0) {
        return Err("all toggle parameters must be positive".into());
    }
    if !(2..=120).contains(&n) {
        return Err("grid size must lie in 2..=120".into());
    }
    let system = System::standard(SystemId::ToggleSwitch);
    let oracle = OracleSplit::new(system).map_err(|e| e.to_string())?;
    let domain = DomainBox::cube(2, 0.0, BASIN_EXTENT);
    let roots = find_equilibria_nd(&oracle, &u, &domain, 15).map_err(|e| e.to_string())?;
    let equilibria: Vec<BasinEquilibrium> = roots
        .roots
        .iter()
        .map(|p| BasinEquilibrium {
            x: p.x_star.clone(),
            stable: p.stability == Stability::Stable,
        })
        .collect();
    let steps = 400;
    let grid = TimeGrid::new(0.0, 40.0, steps).map_err(|e| e.to_string())?;
    let axis = linspace(0.0, BASIN_EXTENT, n);
    let mut basin = Vec::with_capacity(n * n);
    for &x2 in &axis {
        for &x1 in &axis {
            let traj = rk4_solve_strided(|x, u| system.rhs(x, u), &[x1, x2], &u, grid, steps).map_err(|e| e.to_string())?;
            let end = traj.states.last().ok_or("empty trajectory")?;
            let hit = equilibria.iter().position(|e| {
                e.stable && e.x.iter().zip(end).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt() < 1e-2
            });
            basin.push(hit.map_or(-1, |i| i as i32));
        }
    }
    Ok(BasinMap {
        n,
        extent: BASIN_EXTENT,
        equilibria,
        basin,
    })
}

fn to_js<T: Serialize>(r: DemoResult<T>) -> Result<String, JsError> {
    let v = r.map_err(|e| JsError::new(&e))?;
    serde_json::to_string(&v).map_err(|e| JsError::new(&e.to_string()))
}

#[wasm_bindgen(js_name = budwormDiagram)]
pub fn budworm_diagram_js(r: f64, lo: f64, hi: f64, points: usize) -> Result<String, JsError> {
    to_js(budworm_diagram(r, lo, hi, points))
}

#[wasm_bindgen(js_name = controlTrial)]
pub fn control_trial_js(system: &str, n_targets: usize, eta: f64, sigma: f64, seed: u32) -> Result<String, JsError> {
    to_js(control_trial(system, n_targets, eta, sigma, seed as u64))
}

#[wasm_bindgen(js_name = toggleBasins)]
pub fn toggle_basins_js(alpha1: f64, alpha2: f64, beta: f64, gamma: f64, n: usize) -> Result<String, JsError> {
    to_js(toggle_basins(alpha1, alpha2, beta, gamma, n))
}
