//! Anisotropic proximal mapping and envelope
//!
//! ```text
//! e(v) = inf_z f(z) + (1/lambda) phi(v - z),     P(v) = argmin of the same
//! ```
//!
//! computed either globally on a grid (any `f`, dimension at most 3) or
//! locally by damped Newton (smooth `f`), together with the envelope
//! gradient `(1/lambda) grad phi(v - z)`, the prox identity check
//! `z + grad phi*(lambda grad f(z)) = v`, and prox-boundedness evidence.

use std::fmt;
use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::Objective;
use crate::oracle::{grid_argmin, GridSpec};
use crate::potentials::{conjugate_gradient_from, newton_direction, Legendre};
use crate::splitting::backtrack;
use crate::Vector;

/// Gradient-norm tolerance of [`prox_local`].
pub const LOCAL_TOL: f64 = 1e-10;
/// Iteration cap of [`prox_local`].
pub const LOCAL_MAX_ITER: usize = 10_000;

/// Largest dimension accepted by [`prox_grid`].
pub const MAX_GRID_DIM: usize = 3;

/// `f`, `phi` and `lambda` of one envelope.
#[derive(Clone, Debug)]
pub struct ProxProblem {
    pub f: Arc<dyn Objective>,
    pub phi: Arc<dyn Legendre>,
    pub lambda: f64,
}

impl ProxProblem {
    pub fn new(f: Arc<dyn Objective>, phi: Arc<dyn Legendre>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::arg(format!("lambda must be positive and finite, got {lambda}")));
        }
        if f.dim() != phi.dim() {
            return Err(Error::arg(format!(
                "objective has dimension {} but potential has dimension {}",
                f.dim(),
                phi.dim()
            )));
        }
        Ok(Self { f, phi, lambda })
    }

    pub fn dim(&self) -> usize {
        self.f.dim()
    }

    /// True when `f` has no declared lower bound, so no threshold on
    /// `lambda` is known.
    pub fn threshold_unknown(&self) -> bool {
        self.f.lower_bound() == f64::NEG_INFINITY
    }

    /// The inner objective `f(z) + (1/lambda) phi(v - z)`.
    pub fn inner(&self, v: &Vector, z: &Vector) -> f64 {
        let fz = self.f.value(z);
        if fz == f64::INFINITY {
            return fz;
        }
        let w = v - z;
        fz + self.phi.raw_value(w.as_slice()) / self.lambda
    }

    /// Gradient of the inner objective in `z`, when `f` is differentiable.
    fn inner_gradient(&self, v: &Vector, z: &Vector) -> Option<Vector> {
        let gf = self.f.gradient(z)?;
        let w = v - z;
        let mut gp = DVector::zeros(w.len());
        self.phi.raw_gradient(w.as_slice(), gp.as_mut_slice());
        Some(gf - gp / self.lambda)
    }

    fn check_point(&self, v: &Vector) -> Result<()> {
        if v.len() != self.dim() {
            return Err(Error::arg(format!("point has {} coordinates, problem has {}", v.len(), self.dim())));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ProxMethod {
    GridOracle,
    LocalNewton,
}

impl fmt::Display for ProxMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ProxMethod::GridOracle => "grid_oracle",
            ProxMethod::LocalNewton => "local_newton",
        })
    }
}

#[derive(Clone, Debug)]
pub struct ProxResult {
    pub minimizers: Vec<Vector>,
    pub envelope: f64,
    /// Present when the prox is single-valued.
    pub envelope_gradient: Option<Vector>,
    pub multivalued: bool,
    pub method: ProxMethod,
}

impl ProxResult {
    /// The (first) minimizer.
    pub fn z(&self) -> &Vector {
        &self.minimizers[0]
    }
}

/// Global prox on a grid of `z` values.
pub fn prox_grid(prob: &ProxProblem, v: &Vector, grid: &GridSpec) -> Result<ProxResult> {
    prob.check_point(v)?;
    if v.len() > MAX_GRID_DIM {
        return Err(Error::arg(format!("grid prox limited to dimension {MAX_GRID_DIM}")));
    }
    if grid.dim() != v.len() {
        return Err(Error::arg("grid dimension differs from the point"));
    }
    let min = grid_argmin(|z: &Vector| prob.inner(v, z), grid)?;
    let envelope = prob.inner(v, &min.argmins[0]);
    let multivalued = min.argmins.len() > 1;
    let envelope_gradient = if multivalued {
        None
    } else {
        Some(envelope_gradient(prob, v, &min.argmins[0])?)
    };
    Ok(ProxResult {
        minimizers: min.argmins,
        envelope,
        envelope_gradient,
        multivalued,
        method: ProxMethod::GridOracle,
    })
}

/// Grid of half-width `radius` and `points` per axis centred on `v`, refined
/// `refinements` times.
pub fn grid_around(v: &Vector, radius: f64, points: usize, refinements: usize) -> Result<GridSpec> {
    Ok(GridSpec::around(v, radius, points)?.with_refinements(refinements))
}

/// Local prox by damped Newton (gradient steps when `f` has no Hessian)
/// started at `init` (default `v`), with non-increasing feasible steps.
pub fn prox_local(prob: &ProxProblem, v: &Vector, init: Option<&Vector>) -> Result<ProxResult> {
    prob.check_point(v)?;
    if !prob.f.is_smooth() {
        return Err(Error::arg(format!(
            "{} is not smooth; use the grid prox instead",
            prob.f.label()
        )));
    }
    let mut z = init.cloned().unwrap_or_else(|| v.clone());
    prob.check_point(&z)?;
    let mut val = prob.inner(v, &z);
    if !val.is_finite() {
        return Err(Error::arg("initial point is infeasible: v - init is outside the potential's domain"));
    }
    let grad = |z: &Vector| {
        prob.inner_gradient(v, z)
            .ok_or_else(|| Error::arg(format!("{} is not differentiable at {:?}", prob.f.label(), z.as_slice())))
    };
    let mut g = grad(&z)?;
    let mut prev: Option<(Vector, Vector)> = None;
    for it in 0..LOCAL_MAX_ITER {
        if g.norm() <= LOCAL_TOL {
            return local_result(prob, v, z, val);
        }
        let newton = prob.f.hessian(&z).map(|hf| {
            let w = v - &z;
            let h = hf + prob.phi.raw_hessian(w.as_slice()) / prob.lambda;
            newton_direction(&h, &g)
        });
        let (dir, step0) = match newton {
            Some(d) if d.dot(&g) < 0.0 => (d, 1.0),
            _ => (-&g, bb_step(prev.as_ref(), &z, &g)),
        };
        let (t, new_val) = backtrack(val, step0, |t| prob.inner(v, &(&z + &dir * t))).map_err(|e| {
            if g.norm() <= 1e3 * LOCAL_TOL {
                Error::NonConvergence {
                    iterations: it,
                    residual: g.norm(),
                }
            } else {
                e.at_iteration(it)
            }
        })?;
        let z_new = &z + &dir * t;
        let g_new = grad(&z_new)?;
        prev = Some((z_new.clone() - &z, g_new.clone() - &g));
        z = z_new;
        g = g_new;
        val = new_val;
    }
    if g.norm() <= LOCAL_TOL {
        return local_result(prob, v, z, val);
    }
    Err(Error::NonConvergence {
        iterations: LOCAL_MAX_ITER,
        residual: g.norm(),
    })
}

/// Barzilai-Borwein step from the last displacement, 1 on the first step.
fn bb_step(prev: Option<&(Vector, Vector)>, _z: &Vector, g: &Vector) -> f64 {
    match prev {
        Some((s, y)) => {
            let sy = s.dot(y);
            if sy > 0.0 {
                s.norm_squared() / sy
            } else {
                1.0 / g.norm().max(1.0)
            }
        }
        None => 1.0 / g.norm().max(1.0),
    }
}

fn local_result(prob: &ProxProblem, v: &Vector, z: Vector, envelope: f64) -> Result<ProxResult> {
    let envelope_gradient = Some(envelope_gradient(prob, v, &z)?);
    Ok(ProxResult {
        minimizers: vec![z],
        envelope,
        envelope_gradient,
        multivalued: false,
        method: ProxMethod::LocalNewton,
    })
}

/// `(1/lambda) grad phi(v - z)`.
pub fn envelope_gradient(prob: &ProxProblem, v: &Vector, z: &Vector) -> Result<Vector> {
    prob.check_point(v)?;
    prob.check_point(z)?;
    Ok(prob.phi.gradient(&(v - z))? / prob.lambda)
}

/// How to compute the prox inside [`stationarity_measure`].
#[derive(Clone, Debug)]
pub enum ProxSolver {
    Grid(GridSpec),
    /// Local solver, started at the given point or at `v`.
    Local(Option<Vector>),
}

impl ProxSolver {
    pub fn solve(&self, prob: &ProxProblem, v: &Vector) -> Result<ProxResult> {
        match self {
            ProxSolver::Grid(g) => prox_grid(prob, v, g),
            ProxSolver::Local(init) => prox_local(prob, v, init.as_ref()),
        }
    }
}

/// `|grad e(u)|` from the computed prox; an error when the prox is not
/// single-valued.
pub fn stationarity_measure(prob: &ProxProblem, u: &Vector, solver: &ProxSolver) -> Result<f64> {
    let r = solver.solve(prob, u)?;
    r.envelope_gradient
        .map(|g| g.norm())
        .ok_or_else(|| Error::arg("prox is multivalued; the envelope is not differentiable here"))
}

const IDENTITY_TOL: f64 = 1e-13;
const IDENTITY_MAX_ITER: usize = 50;

/// Solves `z + grad phi*(lambda grad f(z)) = v` by Newton from the local prox
/// and returns `|z_identity - z_prox|`.
pub fn prox_identity_residual(prob: &ProxProblem, v: &Vector) -> Result<f64> {
    let z_prox = prox_local(prob, v, None)?.minimizers.remove(0);
    let z_id = solve_prox_identity(prob, v, &z_prox)?;
    Ok((z_id - z_prox).norm())
}

/// Newton iteration on `G(z) = z + grad phi*(lambda grad f(z)) - v`.
pub fn solve_prox_identity(prob: &ProxProblem, v: &Vector, z0: &Vector) -> Result<Vector> {
    prob.check_point(v)?;
    let n = v.len();
    let eval = |z: &Vector, w_warm: &Vector| -> Result<(Vector, Vector)> {
        let gf = prob
            .f
            .gradient(z)
            .ok_or_else(|| Error::arg("prox identity needs a differentiable f"))?;
        let warm = if prob.phi.in_domain(w_warm.as_slice()) {
            w_warm.clone()
        } else {
            DVector::zeros(n)
        };
        let w = conjugate_gradient_from(prob.phi.as_ref(), &(gf * prob.lambda), &warm)?;
        let g = z + &w - v;
        Ok((w, g))
    };
    let mut z = z0.clone();
    let (mut w, mut g) = eval(&z, &(v - &z))?;
    let mut best = g.norm();
    for _ in 0..IDENTITY_MAX_ITER {
        if best <= IDENTITY_TOL {
            break;
        }
        let hf = prob
            .f
            .hessian(&z)
            .ok_or_else(|| Error::arg("prox identity needs the Hessian of f"))?;
        let hphi = prob.phi.raw_hessian(w.as_slice());
        // Jacobian I + H_phi(w)^{-1} lambda H_f(z)
        let solve = hphi
            .clone()
            .cholesky()
            .ok_or(Error::Inversion {
                iterations: 0,
                residual: best,
            })?;
        let jac = DMatrix::identity(n, n) + solve.solve(&(hf * prob.lambda));
        let step = jac.lu().solve(&g).ok_or(Error::Inversion {
            iterations: 0,
            residual: best,
        })?;
        let z_new = &z - step;
        let (w_new, g_new) = eval(&z_new, &w)?;
        if g_new.norm() >= best {
            break;
        }
        z = z_new;
        w = w_new;
        g = g_new;
        best = g.norm();
    }
    if best <= 1e-10 * (1.0 + v.norm()) {
        Ok(z)
    } else {
        Err(Error::Inversion {
            iterations: IDENTITY_MAX_ITER,
            residual: best,
        })
    }
}

/// Sample points per axis of the `v`-ball in [`prox_bound_certificate`].
pub const CERTIFICATE_POINTS: usize = 11;

/// Lower-bound evidence `beta_hat = min e(v)` over grid points `v` within
/// `eps` of `v_bar`, each envelope taken on `grid` (absolute `z`
/// coordinates, no refinement). When the minimum sits on the `z`-grid
/// boundary the grid is doubled twice; strictly decreasing minima that stay
/// on the boundary are reported as [`Error::UnboundedBelow`].
pub fn prox_bound_certificate(prob: &ProxProblem, v_bar: &Vector, eps: f64, grid: &GridSpec) -> Result<f64> {
    prob.check_point(v_bar)?;
    if !(eps > 0.0) {
        return Err(Error::arg("ball radius must be positive"));
    }
    let vgrid = GridSpec::around(v_bar, eps, CERTIFICATE_POINTS)?;
    let vs: Vec<Vector> = vgrid.iter_points().filter(|v| (v - v_bar).norm() <= eps * (1.0 + 1e-12)).collect();

    let mut minima = Vec::new();
    let mut z_grid = GridSpec { refinements: 0, ..grid.clone() };
    for scale in 0..3 {
        let evals: Vec<Result<(f64, bool)>> = vs
            .par_iter()
            .map(|v| {
                let m = grid_argmin(|z: &Vector| prob.inner(v, z), &z_grid)?;
                Ok((m.value, m.argmins.iter().any(|a| on_boundary(a, &z_grid))))
            })
            .collect();
        let mut best: Option<(f64, bool)> = None;
        for e in evals {
            match e {
                Ok((val, edge)) => {
                    if best.is_none_or(|(b, _)| val < b) {
                        best = Some((val, edge));
                    }
                }
                Err(Error::EmptyFeasible) => {}
                Err(other) => return Err(other),
            }
        }
        let (val, edge) = best.ok_or(Error::EmptyFeasible)?;
        minima.push(val);
        if !edge {
            break;
        }
        if scale == 2 {
            let decreasing = minima.windows(2).all(|w| w[1] < w[0] - 1e-9 * w[0].abs().max(1.0));
            if decreasing {
                return Err(Error::UnboundedBelow { minima });
            }
        }
        z_grid = expand(&z_grid, 2.0);
    }
    Ok(minima.iter().cloned().fold(f64::INFINITY, f64::min))
}

fn on_boundary(z: &Vector, grid: &GridSpec) -> bool {
    z.iter().enumerate().any(|(i, &x)| {
        let tol = 1e-9 * (grid.upper[i] - grid.lower[i]);
        (x - grid.lower[i]).abs() <= tol || (grid.upper[i] - x).abs() <= tol
    })
}

fn expand(grid: &GridSpec, factor: f64) -> GridSpec {
    let mut g = grid.clone();
    for i in 0..g.dim() {
        let c = 0.5 * (g.lower[i] + g.upper[i]);
        let h = 0.5 * (g.upper[i] - g.lower[i]) * factor;
        g.lower[i] = c - h;
        g.upper[i] = c + h;
        g.points[i] = (g.points[i] - 1) * factor as usize + 1;
    }
    g
}

/// One row of an envelope scan.
#[derive(Clone, Debug)]
pub struct ScanRow {
    pub v: Vector,
    /// `+inf` when the prox is empty.
    pub envelope: f64,
    pub envelope_gradient: Option<Vector>,
    pub n_minimizers: usize,
    pub method: ProxMethod,
}

/// Envelope, gradient and prox multiplicity at each `v`. Empty prox sets
/// give an infinite envelope and zero minimizers; other failures abort.
pub fn envelope_scan(prob: &ProxProblem, vs: &[Vector], solver: &ProxSolver) -> Result<Vec<ScanRow>> {
    let method = match solver {
        ProxSolver::Grid(_) => ProxMethod::GridOracle,
        ProxSolver::Local(_) => ProxMethod::LocalNewton,
    };
    vs.par_iter()
        .map(|v| match solver.solve(prob, v) {
            Ok(r) => Ok(ScanRow {
                v: v.clone(),
                envelope: r.envelope,
                n_minimizers: r.minimizers.len(),
                envelope_gradient: r.envelope_gradient,
                method: r.method,
            }),
            Err(Error::EmptyFeasible) => Ok(ScanRow {
                v: v.clone(),
                envelope: f64::INFINITY,
                envelope_gradient: None,
                n_minimizers: 0,
                method,
            }),
            Err(e) => Err(e),
        })
        .collect()
}

/// As [`envelope_scan`] with a grid of half-width `radius` centred on each
/// `v`.
pub fn envelope_scan_grid(
    prob: &ProxProblem,
    vs: &[Vector],
    radius: f64,
    points: usize,
    refinements: usize,
) -> Result<Vec<ScanRow>> {
    vs.par_iter()
        .map(|v| {
            let g = grid_around(v, radius, points, refinements)?;
            Ok(envelope_scan(prob, std::slice::from_ref(v), &ProxSolver::Grid(g))?.remove(0))
        })
        .collect()
}

/// CSV columns `v0.., envelope, envelope_grad0.., n_minimizers, method`;
/// gradient cells are blank when the prox is not single-valued.
pub fn write_envelope_csv<W: Write>(out: W, rows: &[ScanRow]) -> Result<()> {
    let n = rows.first().map_or(0, |r| r.v.len());
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    let mut header: Vec<String> = (0..n).map(|i| format!("v{i}")).collect();
    header.push("envelope".into());
    header.extend((0..n).map(|i| format!("envelope_grad{i}")));
    header.push("n_minimizers".into());
    header.push("method".into());
    w.write_record(&header)?;
    for r in rows {
        let mut rec: Vec<String> = r.v.iter().map(|x| x.to_string()).collect();
        rec.push(r.envelope.to_string());
        match &r.envelope_gradient {
            Some(g) => rec.extend(g.iter().map(|x| x.to_string())),
            None => rec.extend(std::iter::repeat_n(String::new(), n)),
        }
        rec.push(r.n_minimizers.to_string());
        rec.push(r.method.to_string());
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

/// Huber function `|v|^2/2` for `|v| <= 1`, `|v| - 1/2` beyond: the envelope
/// of `|.|` under the quadratic potential with `lambda = 1`.
pub fn huber(v: f64) -> f64 {
    if v.abs() <= 1.0 {
        0.5 * v * v
    } else {
        v.abs() - 0.5
    }
}
