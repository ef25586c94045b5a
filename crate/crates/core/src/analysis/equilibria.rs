use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::benchmarks::linspace;
use crate::dynamics::{DomainBox, SplitField};
use crate::error::{check_len, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Stability {
    Stable,
    Unstable,
    Marginal,
}

impl Stability {
    pub fn label(self) -> &'static str {
        match self {
            Stability::Stable => "stable",
            Stability::Unstable => "unstable",
            Stability::Marginal => "marginal",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EquilibriumPoint {
    pub x_star: Vec<f64>,
    pub u: Vec<f64>,
    pub stability: Stability,
    pub residual_norm: f64,
}

const BISECT_TOL: f64 = 1e-10;
/// Sign changes whose bisection limit still has a large residual are poles.
const POLE_REJECT: f64 = 1e-6;
const DEDUP_1D: f64 = 1e-6;

/// Roots of a scalar function on `[lo, hi]`: a uniform scan of `n_scan` cells
/// followed by bisection on every sign change.
///
/// Tangential roots without a sign change can be missed, and cells where the
/// function is not finite at an end are skipped.
pub fn find_equilibria_1d(residual: impl Fn(f64) -> f64, lo: f64, hi: f64, n_scan: usize) -> Vec<f64> {
    let n = n_scan.max(1);
    let xs: Vec<f64> = (0..=n).map(|i| lo + (hi - lo) * i as f64 / n as f64).collect();
    let rs: Vec<f64> = xs.iter().map(|&x| residual(x)).collect();
    let mut roots: Vec<f64> = Vec::new();
    for i in 0..n {
        let (mut a, mut b) = (xs[i], xs[i + 1]);
        let (mut ra, rb) = (rs[i], rs[i + 1]);
        if !ra.is_finite() || !rb.is_finite() {
            continue;
        }
        if ra == 0.0 {
            roots.push(a);
            continue;
        }
        if rb == 0.0 {
            if i + 1 == n {
                roots.push(b);
            }
            continue;
        }
        if ra.signum() == rb.signum() {
            continue;
        }
        let mut root = 0.5 * (a + b);
        for _ in 0..200 {
            root = 0.5 * (a + b);
            let rm = residual(root);
            if rm.abs() <= BISECT_TOL || b - a <= f64::EPSILON * root.abs().max(1.0) {
                break;
            }
            if rm.signum() == ra.signum() {
                a = root;
                ra = rm;
            } else {
                b = root;
            }
        }
        if residual(root).abs() <= POLE_REJECT {
            roots.push(root);
        }
    }
    roots.sort_by(f64::total_cmp);
    roots.dedup_by(|a, b| (*a - *b).abs() <= DEDUP_1D);
    roots
}

/// Central-difference Jacobian (row-major `d × d`) with step `h`.
pub fn fd_jacobian(f: impl Fn(&[f64]) -> Vec<f64>, x: &[f64], h: f64) -> Vec<f64> {
    let d = x.len();
    let mut jac = vec![0.0; d * d];
    let mut xp = x.to_vec();
    for j in 0..d {
        xp[j] = x[j] + h;
        let fp = f(&xp);
        xp[j] = x[j] - h;
        let fm = f(&xp);
        xp[j] = x[j];
        for i in 0..d {
            jac[i * d + j] = (fp[i] - fm[i]) / (2.0 * h);
        }
    }
    jac
}

/// Largest real part of the eigenvalues of a 1×1 or 2×2 matrix.
pub fn max_real_eigenvalue(jac: &[f64]) -> Result<f64> {
    match jac.len() {
        1 => Ok(jac[0]),
        4 => {
            let tr = jac[0] + jac[3];
            let det = jac[0] * jac[3] - jac[1] * jac[2];
            let disc = tr * tr - 4.0 * det;
            Ok(if disc >= 0.0 { 0.5 * (tr + disc.sqrt()) } else { 0.5 * tr })
        }
        n => Err(Error::InvalidConfig(format!(
            "stability classification supports d <= 2, got a matrix with {n} entries"
        ))),
    }
}

const STABILITY_EPS: f64 = 1e-8;
/// Largest `‖F(x*)‖` accepted as an equilibrium.
pub const EQUILIBRIUM_TOL: f64 = 1e-6;

/// Linear stability of `x*` for the vector field `rhs` from a
/// finite-difference Jacobian (`h = 1e−6`).
pub fn classify_stability(rhs: impl Fn(&[f64]) -> Vec<f64>, x_star: &[f64]) -> Result<Stability> {
    let r = rhs(x_star);
    let norm = r.iter().map(|v| v * v).sum::<f64>().sqrt();
    if !(norm <= EQUILIBRIUM_TOL) {
        return Err(Error::NotEquilibrium(norm));
    }
    let lam = max_real_eigenvalue(&fd_jacobian(rhs, x_star, 1e-6))?;
    Ok(if lam < -STABILITY_EPS {
        Stability::Stable
    } else if lam > STABILITY_EPS {
        Stability::Unstable
    } else {
        Stability::Marginal
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NdRoots {
    pub roots: Vec<EquilibriumPoint>,
    pub failed_starts: usize,
}

const NEWTON_TOL: f64 = 1e-8;
const DEDUP_ND: f64 = 1e-4;

fn newton(residual: &impl Fn(&[f64]) -> Vec<f64>, start: &[f64]) -> Option<(Vec<f64>, f64)> {
    let d = start.len();
    let norm = |v: &[f64]| v.iter().map(|a| a * a).sum::<f64>().sqrt();
    let mut x = start.to_vec();
    let mut r = residual(&x);
    let mut rn = norm(&r);
    for _ in 0..100 {
        if !rn.is_finite() {
            return None;
        }
        if rn <= NEWTON_TOL {
            return Some((x, rn));
        }
        let jac = DMatrix::from_row_slice(d, d, &fd_jacobian(residual, &x, 1e-6));
        let step = jac.lu().solve(&DVector::from_column_slice(&r))?;
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..30 {
            let trial: Vec<f64> = x.iter().zip(step.iter()).map(|(a, s)| a - t * s).collect();
            let rt = residual(&trial);
            let rtn = norm(&rt);
            if rtn < rn {
                x = trial;
                r = rt;
                rn = rtn;
                accepted = true;
                break;
            }
            t *= 0.5;
        }
        if !accepted {
            return None;
        }
    }
    (rn <= NEWTON_TOL).then_some((x, rn))
}

/// Equilibria `x = g(x, u)` by damped Newton from an `m^d` grid of starts over
/// `domain`, deduplicated and sorted lexicographically.
pub fn find_equilibria_nd(field: &impl SplitField, u: &[f64], domain: &DomainBox, m: usize) -> Result<NdRoots> {
    let d = field.state_dim();
    check_len("domain box", d, domain.dim())?;
    check_len("control", field.control_dim(), u.len())?;
    if d > 2 {
        return Err(Error::InvalidConfig("multistart root finding supports d <= 2".into()));
    }
    let axes: Vec<Vec<f64>> = (0..d).map(|i| linspace(domain.lo[i], domain.hi[i], m.max(1))).collect();
    let mut starts = vec![Vec::new()];
    for axis in &axes {
        starts = starts
            .iter()
            .flat_map(|p: &Vec<f64>| {
                axis.iter().map(move |&v| {
                    let mut q = p.clone();
                    q.push(v);
                    q
                })
            })
            .collect();
    }
    let residual = |x: &[f64]| field.residual(x, u);
    let mut found: Vec<(Vec<f64>, f64)> = Vec::new();
    let mut failed = 0;
    for s in &starts {
        match newton(&residual, s) {
            Some((x, rn)) => {
                let dup = found
                    .iter()
                    .any(|(y, _)| x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() <= DEDUP_ND);
                if !dup {
                    found.push((x, rn));
                }
            }
            None => failed += 1,
        }
    }
    found.sort_by(|a, b| {
        a.0.iter()
            .zip(&b.0)
            .map(|(p, q)| p.total_cmp(q))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let roots = found
        .into_iter()
        .map(|(x, rn)| {
            let stability = classify_stability(|y| field.field(y, u), &x).unwrap_or(Stability::Marginal);
            EquilibriumPoint {
                x_star: x,
                u: u.to_vec(),
                stability,
                residual_norm: rn,
            }
        })
        .collect();
    Ok(NdRoots {
        roots,
        failed_starts: failed,
    })
}

/// Sampled `sup ‖∂g/∂x‖₂` over the ball of `radius` around `x_star` (101
/// points per axis) and whether it is below 1.
pub fn contraction_bound(field: &impl SplitField, x_star: &[f64], u: &[f64], radius: f64) -> Result<(f64, bool)> {
    let d = field.state_dim();
    check_len("state", d, x_star.len())?;
    if d > 2 {
        return Err(Error::InvalidConfig("contraction sampling supports d <= 2".into()));
    }
    let offsets = linspace(-radius, radius, 101);
    let mut points = vec![Vec::new()];
    for i in 0..d {
        points = points
            .iter()
            .flat_map(|p: &Vec<f64>| {
                offsets.iter().map(move |&o| {
                    let mut q = p.clone();
                    q.push(x_star[i] + o);
                    q
                })
            })
            .collect();
    }
    let mut sup: f64 = 0.0;
    for p in &points {
        let dist = p.iter().zip(x_star).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
        if dist > radius * (1.0 + 1e-12) {
            continue;
        }
        let jac = fd_jacobian(|y| field.equilibrium_map(y, u), p, 1e-6);
        let norm = if d == 1 {
            jac[0].abs()
        } else {
            DMatrix::from_row_slice(d, d, &jac).singular_values().max()
        };
        sup = sup.max(norm);
    }
    Ok((sup, sup < 1.0))
}
