//! Penalized splitting model
//!
//! ```text
//! F(u, z) = f(z) + (1/lambda) phi(A u - z) + g(u)
//! ```
//!
//! with its stationarity residuals, a step-halving line search that keeps
//! `A u - z` inside the potential's domain, and Gauss-Seidel alternating
//! minimization by linearized (gradient) block steps.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::models::Objective;
use crate::potentials::{newton_direction, Legendre};
use crate::prox::{ProxProblem, ProxSolver};
use crate::record::{AltMinRecord, AltMinRow};
use crate::Vector;

/// Maximum number of step halvings in [`backtrack`].
pub const MAX_HALVINGS: usize = 50;

/// Relative slack for "not above" comparisons of objective values, so that
/// iterations near a minimizer are not stalled by rounding in `F`.
pub const ROUNDING_SLACK: f64 = 4.0 * f64::EPSILON;

/// `b` is not above `a` up to [`ROUNDING_SLACK`].
pub fn not_above(b: f64, a: f64) -> bool {
    b <= a + ROUNDING_SLACK * a.abs()
}

/// Tries `step0 * 2^-k` for `k = 0..=MAX_HALVINGS` and returns the first
/// step whose trial value is finite and not above `f0` (see [`not_above`]),
/// with that value.
pub fn backtrack(f0: f64, step0: f64, trial: impl Fn(f64) -> f64) -> Result<(f64, f64)> {
    let mut t = step0;
    for _ in 0..=MAX_HALVINGS {
        let v = trial(t);
        if v.is_finite() && not_above(v, f0) {
            return Ok((t, v));
        }
        t *= 0.5;
    }
    Err(Error::LineSearch {
        halvings: MAX_HALVINGS,
        context: format!(" from step {step0:e}"),
    })
}

/// The coupling matrix `A`.
#[derive(Clone, Debug, PartialEq)]
pub enum Coupling {
    Dense(DMatrix<f64>),
    /// `[I_n; ...; I_n]` with `copies` blocks.
    StackedIdentity { n: usize, copies: usize },
}

impl Coupling {
    pub fn stacked(n: usize, copies: usize) -> Result<Self> {
        if n == 0 || copies == 0 {
            return Err(Error::arg("stacked identity needs positive size and copy count"));
        }
        Ok(Coupling::StackedIdentity { n, copies })
    }

    /// Rows `m`.
    pub fn rows(&self) -> usize {
        match self {
            Coupling::Dense(a) => a.nrows(),
            Coupling::StackedIdentity { n, copies } => n * copies,
        }
    }

    /// Columns `n`.
    pub fn cols(&self) -> usize {
        match self {
            Coupling::Dense(a) => a.ncols(),
            Coupling::StackedIdentity { n, .. } => *n,
        }
    }

    pub fn apply(&self, u: &Vector) -> Vector {
        match self {
            Coupling::Dense(a) => a * u,
            Coupling::StackedIdentity { n, copies } => {
                DVector::from_fn(n * copies, |i, _| u[i % n])
            }
        }
    }

    pub fn apply_transpose(&self, y: &Vector) -> Vector {
        match self {
            Coupling::Dense(a) => a.tr_mul(y),
            Coupling::StackedIdentity { n, copies } => {
                let mut out = DVector::zeros(*n);
                for j in 0..*copies {
                    out += y.rows(j * n, *n);
                }
                out
            }
        }
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        match self {
            Coupling::Dense(a) => a.clone(),
            Coupling::StackedIdentity { n, copies } => {
                DMatrix::from_fn(n * copies, *n, |i, j| if i % n == j { 1.0 } else { 0.0 })
            }
        }
    }
}

/// The `g(u)` term: zero or `(1/2) u^T Q u + b^T u`.
#[derive(Clone, Debug, PartialEq)]
pub enum GTerm {
    Zero,
    Quadratic { q: DMatrix<f64>, b: Vector },
}

impl GTerm {
    pub fn value(&self, u: &Vector) -> f64 {
        match self {
            GTerm::Zero => 0.0,
            GTerm::Quadratic { q, b } => 0.5 * u.dot(&(q * u)) + b.dot(u),
        }
    }

    pub fn gradient(&self, u: &Vector) -> Vector {
        match self {
            GTerm::Zero => DVector::zeros(u.len()),
            GTerm::Quadratic { q, b } => q * u + b,
        }
    }

    pub fn hessian(&self, n: usize) -> DMatrix<f64> {
        match self {
            GTerm::Zero => DMatrix::zeros(n, n),
            GTerm::Quadratic { q, .. } => q.clone(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct SplittingProblem {
    /// Block objective on `R^m`.
    pub f: Arc<dyn Objective>,
    pub g: GTerm,
    pub a: Coupling,
    /// Potential on `R^m`.
    pub phi: Arc<dyn Legendre>,
    pub lambda: f64,
    /// Use `u - tau A^T grad phi` literally instead of scaling the
    /// coupling gradient by `1/lambda`.
    pub tau_includes_inv_lambda: bool,
}

impl SplittingProblem {
    pub fn new(f: Arc<dyn Objective>, g: GTerm, a: Coupling, phi: Arc<dyn Legendre>, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0) || !lambda.is_finite() {
            return Err(Error::arg(format!("lambda must be positive and finite, got {lambda}")));
        }
        let (m, n) = (a.rows(), a.cols());
        if f.dim() != m || phi.dim() != m {
            return Err(Error::arg(format!(
                "A is {m}x{n} but f has dimension {} and phi dimension {}",
                f.dim(),
                phi.dim()
            )));
        }
        if let GTerm::Quadratic { q, b } = &g {
            if q.shape() != (n, n) || b.len() != n {
                return Err(Error::arg("g has the wrong dimension"));
            }
        }
        if let Coupling::Dense(d) = &a {
            if d.rank(1e-12) < n {
                return Err(Error::arg("coupling matrix must have full column rank"));
            }
        }
        Ok(Self {
            f,
            g,
            a,
            phi,
            lambda,
            tau_includes_inv_lambda: false,
        })
    }

    /// Coefficient in front of `A^T grad phi` in the u-step.
    fn u_coupling_coef(&self) -> f64 {
        if self.tau_includes_inv_lambda {
            1.0
        } else {
            1.0 / self.lambda
        }
    }

    /// Envelope problem of `f` under the same potential.
    pub fn prox_problem(&self) -> Result<ProxProblem> {
        ProxProblem::new(self.f.clone(), self.phi.clone(), self.lambda)
    }

    fn phi_grad(&self, w: &Vector) -> Vector {
        let mut g = DVector::zeros(w.len());
        self.phi.raw_gradient(w.as_slice(), g.as_mut_slice());
        g
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SplittingState {
    pub u: Vector,
    pub z: Vector,
}

impl SplittingState {
    /// `z = A u`.
    pub fn consistent(prob: &SplittingProblem, u: Vector) -> Self {
        let z = prob.a.apply(&u);
        Self { u, z }
    }

    pub fn coupling_residual(&self, prob: &SplittingProblem) -> Vector {
        prob.a.apply(&self.u) - &self.z
    }
}

/// `F(u, z)`; `+inf` when `A u - z` is outside the domain or `f(z)` is.
pub fn objective(prob: &SplittingProblem, s: &SplittingState) -> f64 {
    let w = s.coupling_residual(prob);
    let p = prob.phi.raw_value(w.as_slice());
    if p == f64::INFINITY {
        return p;
    }
    let fz = prob.f.value(&s.z);
    if fz == f64::INFINITY {
        return fz;
    }
    fz + p / prob.lambda + prob.g.value(&s.u)
}

#[derive(Clone, Debug, PartialEq)]
pub struct StationarityResiduals {
    pub r_u: f64,
    /// Absent where `f` is not differentiable at `z`.
    pub r_z: Option<f64>,
    pub envelope_residual: Option<f64>,
}

impl StationarityResiduals {
    pub fn max_splitting(&self) -> f64 {
        self.r_u.max(self.r_z.unwrap_or(f64::INFINITY))
    }
}

/// Residual norms of the two stationarity conditions, and optionally of
/// `A^T grad e(A u) + grad g(u)` with the prox computed by `envelope`.
pub fn residuals(
    prob: &SplittingProblem,
    s: &SplittingState,
    envelope: Option<&ProxSolver>,
) -> Result<StationarityResiduals> {
    let w = s.coupling_residual(prob);
    prob.phi.require_domain(w.as_slice())?;
    let y = prob.phi_grad(&w) / prob.lambda;
    let r_u = (prob.a.apply_transpose(&y) + prob.g.gradient(&s.u)).norm();
    let r_z = prob.f.gradient(&s.z).map(|gf| (gf - &y).norm());
    let envelope_residual = match envelope {
        Some(solver) => {
            let pp = prob.prox_problem()?;
            let v = prob.a.apply(&s.u);
            let r = solver.solve(&pp, &v)?;
            let ge = r
                .envelope_gradient
                .ok_or_else(|| Error::arg("prox is multivalued at A u"))?;
            Some((prob.a.apply_transpose(&ge) + prob.g.gradient(&s.u)).norm())
        }
        None => None,
    };
    Ok(StationarityResiduals {
        r_u,
        r_z,
        envelope_residual,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Block {
    U,
    Z,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LineSearchOutcome {
    pub step: f64,
    pub value: f64,
    pub halvings: usize,
}

/// Largest step `step0 * 2^-k` (`k = 0..=50`) along `direction` on one
/// block that keeps `F` finite and not above its current value.
pub fn feasibility_line_search(
    prob: &SplittingProblem,
    s: &SplittingState,
    block: Block,
    direction: &Vector,
    step0: f64,
) -> Result<LineSearchOutcome> {
    let f0 = objective(prob, s);
    if !f0.is_finite() {
        return Err(Error::arg("line search started from an infeasible state"));
    }
    let trial = |t: f64| {
        let mut st = s.clone();
        match block {
            Block::U => st.u += direction * t,
            Block::Z => st.z += direction * t,
        }
        objective(prob, &st)
    };
    let (step, value) = backtrack(f0, step0, trial)?;
    let halvings = (step0 / step).log2().round() as usize;
    Ok(LineSearchOutcome { step, value, halvings })
}

/// Descent direction of the u-step, `-(c A^T grad phi(A u - z) + grad g(u))`
/// with `c = 1/lambda` (or 1 in the literal convention).
pub fn u_direction(prob: &SplittingProblem, s: &SplittingState) -> Result<Vector> {
    let w = s.coupling_residual(prob);
    prob.phi.require_domain(w.as_slice())?;
    let gc = prob.a.apply_transpose(&prob.phi_grad(&w)) * prob.u_coupling_coef();
    Ok(-(gc + prob.g.gradient(&s.u)))
}

/// One line-searched gradient step in `u` from step `tau`.
pub fn u_gradient_step(prob: &SplittingProblem, s: &SplittingState, tau: f64) -> Result<(Vector, LineSearchOutcome)> {
    let d = u_direction(prob, s)?;
    let ls = feasibility_line_search(prob, s, Block::U, &d, tau)?;
    Ok((&s.u + d * ls.step, ls))
}

/// Exact minimization of `F(., z)`: the block mean for quadratic `phi`,
/// stacked-identity `A` and `g = 0`; damped Newton otherwise.
pub fn exact_u_step(prob: &SplittingProblem, s: &SplittingState) -> Result<Vector> {
    if let (true, Coupling::StackedIdentity { n, copies }, GTerm::Zero) = (prob.phi.is_quadratic(), &prob.a, &prob.g) {
        let blocks: Vec<Vector> = (0..*copies).map(|j| s.z.rows(j * n, *n).into_owned()).collect();
        return Ok(block_mean(&blocks));
    }
    let a = prob.a.to_dense();
    let n = prob.a.cols();
    let mut st = s.clone();
    for it in 0..200 {
        let w = st.coupling_residual(prob);
        let grad = prob.a.apply_transpose(&prob.phi_grad(&w)) / prob.lambda + prob.g.gradient(&st.u);
        if grad.norm() <= 1e-12 * (1.0 + st.u.norm()) {
            return Ok(st.u);
        }
        let h = a.tr_mul(&(prob.phi.raw_hessian(w.as_slice()) * &a)) / prob.lambda + prob.g.hessian(n);
        let d = newton_direction(&h, &grad);
        let ls = feasibility_line_search(prob, &st, Block::U, &d, 1.0).map_err(|e| e.at_iteration(it))?;
        if ls.step * d.norm() <= f64::EPSILON * (1.0 + st.u.norm()) {
            return Ok(st.u);
        }
        st.u += d * ls.step;
    }
    Ok(st.u)
}

/// `(1/M) sum_j z_j`.
pub fn block_mean(blocks: &[Vector]) -> Vector {
    let mut sum = DVector::zeros(blocks[0].len());
    for b in blocks {
        sum += b;
    }
    sum / blocks.len() as f64
}

/// Componentwise median of the blocks, lower median for even counts. This
/// is the u-minimizer for the (non-Legendre) penalty `|.|_1`.
pub fn u_median(blocks: &[Vector]) -> Result<Vector> {
    let first = blocks.first().ok_or_else(|| Error::arg("median of no blocks"))?;
    if blocks.iter().any(|b| b.len() != first.len()) {
        return Err(Error::arg("blocks differ in length"));
    }
    let k = (blocks.len() - 1) / 2;
    Ok(DVector::from_fn(first.len(), |i, _| {
        let mut col: Vec<f64> = blocks.iter().map(|b| b[i]).collect();
        col.sort_by(f64::total_cmp);
        col[k]
    }))
}

/// Descent direction of the z-step, `-(grad f(z) - (1/lambda) grad phi(A u - z))`.
pub fn z_direction(prob: &SplittingProblem, s: &SplittingState) -> Result<Vector> {
    let w = s.coupling_residual(prob);
    prob.phi.require_domain(w.as_slice())?;
    let gf = prob
        .f
        .gradient(&s.z)
        .ok_or_else(|| Error::arg(format!("{} is not differentiable at the current z", prob.f.label())))?;
    Ok(-(gf - prob.phi_grad(&w) / prob.lambda))
}

/// One line-searched gradient step in `z` from step `sigma`.
pub fn z_gradient_step(prob: &SplittingProblem, s: &SplittingState, sigma: f64) -> Result<(Vector, LineSearchOutcome)> {
    let d = z_direction(prob, s)?;
    let ls = feasibility_line_search(prob, s, Block::Z, &d, sigma)?;
    Ok((&s.z + d * ls.step, ls))
}

#[derive(Clone, Debug)]
pub struct AltMinOptions {
    pub tau: f64,
    pub sigma: f64,
    /// Stop when both splitting residuals are at most this.
    pub tol: f64,
    pub max_iter: usize,
    /// Minimize exactly in `u` instead of a gradient step.
    pub exact_u: bool,
    /// Log the envelope residual with the local prox (warm-started at `z`)
    /// every `envelope_every` iterations and at the end; 0 disables it.
    pub envelope_every: usize,
}

impl Default for AltMinOptions {
    fn default() -> Self {
        Self {
            tau: 0.01,
            sigma: 0.01,
            tol: 1e-8,
            max_iter: 100_000,
            exact_u: false,
            envelope_every: 0,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AltMinOutcome {
    pub state: SplittingState,
    pub record: AltMinRecord,
    pub converged: bool,
    pub iterations: usize,
    pub residuals: StationarityResiduals,
}

/// Alternating u-step / z-step iterations from `init` until both splitting
/// residuals fall below `opts.tol`.
pub fn alternate_min(prob: &SplittingProblem, init: SplittingState, opts: &AltMinOptions) -> Result<AltMinOutcome> {
    if !(opts.tau > 0.0 && opts.sigma > 0.0) {
        return Err(Error::arg("tau and sigma must be positive"));
    }
    if init.u.len() != prob.a.cols() || init.z.len() != prob.a.rows() {
        return Err(Error::arg("initial state has the wrong dimensions"));
    }
    if !objective(prob, &init).is_finite() {
        return Err(Error::arg("initial state is infeasible"));
    }
    let envelope_at = |it: usize, last: bool| opts.envelope_every > 0 && (last || it.is_multiple_of(opts.envelope_every));
    let log = |s: &SplittingState, it: usize, env: bool, steps: (Option<f64>, Option<f64>)| -> Result<(AltMinRow, StationarityResiduals)> {
        let solver = ProxSolver::Local(Some(s.z.clone()));
        let r = residuals(prob, s, env.then_some(&solver)).map_err(|e| e.at_iteration(it))?;
        Ok((
            AltMinRow {
                iter: it,
                f: objective(prob, s),
                r_u: r.r_u,
                r_z: r.r_z,
                envelope_residual: r.envelope_residual,
                step_u: steps.0,
                step_z: steps.1,
            },
            r,
        ))
    };

    let mut s = init;
    let mut record = AltMinRecord::new();
    let (row, mut res) = log(&s, 0, envelope_at(0, false), (None, None))?;
    record.push(row);
    let mut it = 0;
    while res.max_splitting() > opts.tol && it < opts.max_iter {
        it += 1;
        let step_u = if opts.exact_u {
            let u = exact_u_step(prob, &s).map_err(|e| e.at_iteration(it))?;
            let step = (&u - &s.u).norm();
            let f_old = objective(prob, &s);
            let trial = SplittingState { u: u.clone(), z: s.z.clone() };
            if not_above(objective(prob, &trial), f_old) {
                s.u = u;
            }
            step
        } else {
            let (u, ls) = u_gradient_step(prob, &s, opts.tau).map_err(|e| e.at_iteration(it))?;
            s.u = u;
            ls.step
        };
        let (z, ls) = z_gradient_step(prob, &s, opts.sigma).map_err(|e| e.at_iteration(it))?;
        s.z = z;
        let (mut row, r) = log(&s, it, false, (Some(step_u), Some(ls.step)))?;
        res = r;
        let last = res.max_splitting() <= opts.tol || it == opts.max_iter;
        if envelope_at(it, last) {
            let (r2, rr) = log(&s, it, true, (row.step_u, row.step_z))?;
            row = r2;
            res = rr;
        }
        record.push(row);
    }
    if it == 0 && opts.envelope_every > 0 && res.envelope_residual.is_none() {
        let (row, r) = log(&s, 0, true, (None, None))?;
        record.rows[0] = row;
        res = r;
    }
    Ok(AltMinOutcome {
        converged: res.max_splitting() <= opts.tol,
        state: s,
        record,
        iterations: it,
        residuals: res,
    })
}
