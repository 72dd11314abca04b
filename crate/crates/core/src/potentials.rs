//! Legendre potentials: the penalty functions used to build anisotropic
//! envelopes, together with their calculus and executable admissibility
//! checks.
//!
//! Every potential satisfies `phi(0) = 0`, `grad phi(0) = 0` and has an open
//! domain. Points outside the domain evaluate to `f64::INFINITY`; gradients and
//! Hessians there are domain errors.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::Vector;

/// The six penalty shapes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PotentialKind {
    /// `(c/2)|w|^2`, with `c = 1` by default.
    Quad,
    /// `sum |w_i|^3 + (eps/2)|w|^2`.
    Cubic,
    /// `tan(|w|^2)` on `|w| < sqrt(pi/2)`.
    Tan,
    /// `sum tan(w_i^2)` on `|w_i| < sqrt(pi/2)`.
    TanSep,
    /// `-log(1 - |w|^2)` on `|w| < 1`.
    Log,
    /// `sum -log(1 - w_i^2)` on `|w_i| < 1`.
    LogSep,
}

impl PotentialKind {
    pub const ALL: [PotentialKind; 6] = [
        PotentialKind::Quad,
        PotentialKind::Cubic,
        PotentialKind::Tan,
        PotentialKind::TanSep,
        PotentialKind::Log,
        PotentialKind::LogSep,
    ];

    pub fn name(self) -> &'static str {
        match self {
            PotentialKind::Quad => "quad",
            PotentialKind::Cubic => "cubic",
            PotentialKind::Tan => "tan",
            PotentialKind::TanSep => "tan-sep",
            PotentialKind::Log => "log",
            PotentialKind::LogSep => "log-sep",
        }
    }

    /// Euclidean (or per-coordinate, for the separable kinds) radius of the domain.
    pub fn domain_radius(self) -> f64 {
        match self {
            PotentialKind::Quad | PotentialKind::Cubic => f64::INFINITY,
            PotentialKind::Tan | PotentialKind::TanSep => FRAC_PI_2.sqrt(),
            PotentialKind::Log | PotentialKind::LogSep => 1.0,
        }
    }

    /// Whether the domain bound applies per coordinate rather than to the norm.
    pub fn coordinatewise_domain(self) -> bool {
        matches!(self, PotentialKind::TanSep | PotentialKind::LogSep)
    }
}

impl fmt::Display for PotentialKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for PotentialKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('_', "-").as_str() {
            "quad" => Ok(PotentialKind::Quad),
            "cubic" => Ok(PotentialKind::Cubic),
            "tan" => Ok(PotentialKind::Tan),
            "tan-sep" => Ok(PotentialKind::TanSep),
            "log" => Ok(PotentialKind::Log),
            "log-sep" => Ok(PotentialKind::LogSep),
            other => Err(Error::arg(format!("unknown potential kind `{other}`"))),
        }
    }
}

/// A convex penalty with an open domain, differentiable on its interior.
///
/// The `raw_*` methods take slices of length [`Legendre::dim`] and skip the
/// dimension and domain checks; the provided methods perform them.
pub trait Legendre: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    /// Value, `+inf` outside the domain. Never NaN.
    fn raw_value(&self, w: &[f64]) -> f64;

    /// Gradient at an in-domain point.
    fn raw_gradient(&self, w: &[f64], out: &mut [f64]);

    /// Hessian at an in-domain point.
    fn raw_hessian(&self, w: &[f64]) -> DMatrix<f64>;

    /// `Some((measured, limit))` when `w` lies outside the domain.
    fn domain_violation(&self, w: &[f64]) -> Option<(f64, f64)>;

    /// False when the potential is known to violate the positive-definite
    /// Hessian requirement somewhere (pure cubic at the origin).
    fn is_admissible(&self) -> bool {
        true
    }

    /// True for isotropic quadratics, whose consensus minimizer is the mean.
    fn is_quadratic(&self) -> bool {
        false
    }

    fn label(&self) -> String;

    fn in_domain(&self, w: &[f64]) -> bool {
        self.domain_violation(w).is_none()
    }

    fn value(&self, w: &Vector) -> Result<f64> {
        check_dim(self.dim(), w.len())?;
        Ok(self.raw_value(w.as_slice()))
    }

    fn gradient(&self, w: &Vector) -> Result<Vector> {
        check_dim(self.dim(), w.len())?;
        self.require_domain(w.as_slice())?;
        let mut out = DVector::zeros(w.len());
        self.raw_gradient(w.as_slice(), out.as_mut_slice());
        Ok(out)
    }

    fn hessian(&self, w: &Vector) -> Result<DMatrix<f64>> {
        check_dim(self.dim(), w.len())?;
        self.require_domain(w.as_slice())?;
        Ok(self.raw_hessian(w.as_slice()))
    }

    fn require_domain(&self, w: &[f64]) -> Result<()> {
        match self.domain_violation(w) {
            None => Ok(()),
            Some((norm, limit)) => Err(Error::Domain {
                what: format!("point outside dom {}", self.label()),
                norm,
                limit,
            }),
        }
    }
}

impl<T: Legendre + ?Sized> Legendre for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn raw_value(&self, w: &[f64]) -> f64 {
        (**self).raw_value(w)
    }
    fn raw_gradient(&self, w: &[f64], out: &mut [f64]) {
        (**self).raw_gradient(w, out)
    }
    fn raw_hessian(&self, w: &[f64]) -> DMatrix<f64> {
        (**self).raw_hessian(w)
    }
    fn domain_violation(&self, w: &[f64]) -> Option<(f64, f64)> {
        (**self).domain_violation(w)
    }
    fn is_admissible(&self) -> bool {
        (**self).is_admissible()
    }
    fn is_quadratic(&self) -> bool {
        (**self).is_quadratic()
    }
    fn label(&self) -> String {
        (**self).label()
    }
}

fn check_dim(expected: usize, got: usize) -> Result<()> {
    if expected != got {
        return Err(Error::arg(format!(
            "dimension mismatch: potential acts on {expected} coordinates, got {got}"
        )));
    }
    Ok(())
}

fn sq_norm(w: &[f64]) -> f64 {
    w.iter().map(|x| x * x).sum()
}

fn sec2(s: f64) -> f64 {
    let c = s.cos();
    1.0 / (c * c)
}

/// One of the table potentials acting on `dim` coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LegendrePotential {
    pub kind: PotentialKind,
    pub dim: usize,
    /// Coefficient of the quadratic added to cubic; ignored by other kinds.
    pub epsilon_quad: f64,
    /// Quad is `(quad_scale / 2)|w|^2`; `2.0` recovers the unhalved `|w|^2`.
    pub quad_scale: f64,
}

impl LegendrePotential {
    pub fn new(kind: PotentialKind, dim: usize) -> Self {
        Self {
            kind,
            dim,
            epsilon_quad: 0.0,
            quad_scale: 1.0,
        }
    }

    pub fn with_epsilon(mut self, eps: f64) -> Self {
        self.epsilon_quad = eps;
        self
    }

    pub fn with_quad_scale(mut self, scale: f64) -> Self {
        self.quad_scale = scale;
        self
    }

    pub fn domain_radius(&self) -> f64 {
        self.kind.domain_radius()
    }

    // The formulas below work on slices of any length so that layer-scaled
    // composites can reuse them on blocks of varying size.

    pub(crate) fn violation_of(&self, w: &[f64]) -> Option<(f64, f64)> {
        let r = self.kind.domain_radius();
        if r.is_infinite() {
            if w.iter().all(|x| x.is_finite()) {
                return None;
            }
            return Some((f64::INFINITY, r));
        }
        if self.kind.coordinatewise_domain() {
            let m = w.iter().fold(0.0_f64, |a, x| a.max(x.abs()));
            let inside = match self.kind {
                PotentialKind::TanSep => w.iter().all(|x| x * x < FRAC_PI_2),
                _ => w.iter().all(|x| x * x < 1.0),
            };
            (!inside || m.is_nan()).then_some((m, r))
        } else {
            let s = sq_norm(w);
            let inside = match self.kind {
                PotentialKind::Tan => s < FRAC_PI_2,
                _ => s < 1.0,
            };
            (!inside || s.is_nan()).then(|| (s.sqrt(), r))
        }
    }

    pub(crate) fn value_of(&self, w: &[f64]) -> f64 {
        if self.violation_of(w).is_some() {
            return f64::INFINITY;
        }
        match self.kind {
            PotentialKind::Quad => 0.5 * self.quad_scale * sq_norm(w),
            PotentialKind::Cubic => {
                w.iter().map(|x| x.abs().powi(3)).sum::<f64>() + 0.5 * self.epsilon_quad * sq_norm(w)
            }
            PotentialKind::Tan => sq_norm(w).tan(),
            PotentialKind::TanSep => w.iter().map(|x| (x * x).tan()).sum(),
            PotentialKind::Log => -(-sq_norm(w)).ln_1p(),
            PotentialKind::LogSep => w.iter().map(|x| -(-(x * x)).ln_1p()).sum(),
        }
    }

    pub(crate) fn gradient_of(&self, w: &[f64], out: &mut [f64]) {
        match self.kind {
            PotentialKind::Quad => {
                for (o, x) in out.iter_mut().zip(w) {
                    *o = self.quad_scale * x;
                }
            }
            PotentialKind::Cubic => {
                for (o, x) in out.iter_mut().zip(w) {
                    *o = 3.0 * x.abs() * x + self.epsilon_quad * x;
                }
            }
            PotentialKind::Tan => {
                let c = 2.0 * sec2(sq_norm(w));
                for (o, x) in out.iter_mut().zip(w) {
                    *o = c * x;
                }
            }
            PotentialKind::TanSep => {
                for (o, x) in out.iter_mut().zip(w) {
                    *o = 2.0 * x * sec2(x * x);
                }
            }
            PotentialKind::Log => {
                let c = 2.0 / (1.0 - sq_norm(w));
                for (o, x) in out.iter_mut().zip(w) {
                    *o = c * x;
                }
            }
            PotentialKind::LogSep => {
                for (o, x) in out.iter_mut().zip(w) {
                    *o = 2.0 * x / (1.0 - x * x);
                }
            }
        }
    }

    pub(crate) fn hessian_of(&self, w: &[f64]) -> DMatrix<f64> {
        let n = w.len();
        match self.kind {
            PotentialKind::Quad => DMatrix::identity(n, n) * self.quad_scale,
            PotentialKind::Cubic => {
                DMatrix::from_diagonal(&DVector::from_iterator(
                    n,
                    w.iter().map(|x| 6.0 * x.abs() + self.epsilon_quad),
                ))
            }
            PotentialKind::Tan => {
                let s = sq_norm(w);
                let sc = sec2(s);
                let wv = DVector::from_column_slice(w);
                DMatrix::identity(n, n) * (2.0 * sc) + &wv * wv.transpose() * (8.0 * sc * s.tan())
            }
            PotentialKind::TanSep => DMatrix::from_diagonal(&DVector::from_iterator(
                n,
                w.iter().map(|x| {
                    let s = x * x;
                    let sc = sec2(s);
                    2.0 * sc + 8.0 * s * sc * s.tan()
                }),
            )),
            PotentialKind::Log => {
                let d = 1.0 - sq_norm(w);
                let wv = DVector::from_column_slice(w);
                DMatrix::identity(n, n) * (2.0 / d) + &wv * wv.transpose() * (4.0 / (d * d))
            }
            PotentialKind::LogSep => DMatrix::from_diagonal(&DVector::from_iterator(
                n,
                w.iter().map(|x| {
                    let d = 1.0 - x * x;
                    2.0 * (1.0 + x * x) / (d * d)
                }),
            )),
        }
    }
}

impl Legendre for LegendrePotential {
    fn dim(&self) -> usize {
        self.dim
    }
    fn raw_value(&self, w: &[f64]) -> f64 {
        self.value_of(w)
    }
    fn raw_gradient(&self, w: &[f64], out: &mut [f64]) {
        self.gradient_of(w, out)
    }
    fn raw_hessian(&self, w: &[f64]) -> DMatrix<f64> {
        self.hessian_of(w)
    }
    fn domain_violation(&self, w: &[f64]) -> Option<(f64, f64)> {
        self.violation_of(w)
    }
    fn is_admissible(&self) -> bool {
        !(self.kind == PotentialKind::Cubic && self.epsilon_quad <= 0.0)
    }
    fn is_quadratic(&self) -> bool {
        self.kind == PotentialKind::Quad
    }
    fn label(&self) -> String {
        match self.kind {
            PotentialKind::Cubic if self.epsilon_quad > 0.0 => {
                format!("cubic(eps={})", self.epsilon_quad)
            }
            PotentialKind::Quad if self.quad_scale != 1.0 => {
                format!("quad(scale={})", self.quad_scale)
            }
            k => k.name().to_string(),
        }
    }
}

/// `M` independent copies of a base potential acting on consecutive blocks.
#[derive(Clone, Debug)]
pub struct Separable<P> {
    pub base: P,
    pub copies: usize,
}

/// Block-diagonal potential `phi(w) = sum_j base(w_j)` over `copies` blocks.
pub fn separable<P: Legendre>(base: P, copies: usize) -> Result<Separable<P>> {
    if copies == 0 {
        return Err(Error::arg("separable potential needs at least one copy"));
    }
    Ok(Separable { base, copies })
}

impl<P: Legendre> Legendre for Separable<P> {
    fn dim(&self) -> usize {
        self.base.dim() * self.copies
    }
    fn raw_value(&self, w: &[f64]) -> f64 {
        w.chunks(self.base.dim()).map(|b| self.base.raw_value(b)).sum()
    }
    fn raw_gradient(&self, w: &[f64], out: &mut [f64]) {
        let n = self.base.dim();
        for (b, o) in w.chunks(n).zip(out.chunks_mut(n)) {
            self.base.raw_gradient(b, o);
        }
    }
    fn raw_hessian(&self, w: &[f64]) -> DMatrix<f64> {
        let n = self.base.dim();
        let mut h = DMatrix::zeros(w.len(), w.len());
        for (j, b) in w.chunks(n).enumerate() {
            h.view_mut((j * n, j * n), (n, n)).copy_from(&self.base.raw_hessian(b));
        }
        h
    }
    fn domain_violation(&self, w: &[f64]) -> Option<(f64, f64)> {
        w.chunks(self.base.dim()).find_map(|b| self.base.domain_violation(b))
    }
    fn is_admissible(&self) -> bool {
        self.base.is_admissible()
    }
    fn is_quadratic(&self) -> bool {
        self.base.is_quadratic()
    }
    fn label(&self) -> String {
        format!("{}^{}", self.base.label(), self.copies)
    }
}

/// Per-layer scaled potential `sum_l base(w_l / eta)`.
///
/// The base potential's own `dim` is ignored; its formula is applied to each
/// layer block, whose sizes are given by `layer_shapes`.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerScaledPotential {
    pub base: LegendrePotential,
    pub eta: f64,
    pub layer_shapes: Vec<usize>,
}

pub fn layer_scaled(base: LegendrePotential, eta: f64, shapes: &[usize]) -> Result<LayerScaledPotential> {
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(Error::arg(format!("eta must be positive, got {eta}")));
    }
    if shapes.is_empty() || shapes.contains(&0) {
        return Err(Error::arg("layer shapes must be nonempty and positive"));
    }
    Ok(LayerScaledPotential {
        base,
        eta,
        layer_shapes: shapes.to_vec(),
    })
}

impl LayerScaledPotential {
    fn blocks<'a>(&'a self, w: &'a [f64]) -> impl Iterator<Item = (usize, &'a [f64])> + 'a {
        let mut start = 0;
        self.layer_shapes.iter().map(move |&len| {
            let s = start;
            start += len;
            (s, &w[s..s + len])
        })
    }

    fn scaled(&self, b: &[f64]) -> Vec<f64> {
        b.iter().map(|x| x / self.eta).collect()
    }
}

impl Legendre for LayerScaledPotential {
    fn dim(&self) -> usize {
        self.layer_shapes.iter().sum()
    }
    fn raw_value(&self, w: &[f64]) -> f64 {
        self.blocks(w).map(|(_, b)| self.base.value_of(&self.scaled(b))).sum()
    }
    fn raw_gradient(&self, w: &[f64], out: &mut [f64]) {
        for (s, b) in self.blocks(w) {
            let o = &mut out[s..s + b.len()];
            self.base.gradient_of(&self.scaled(b), o);
            for x in o.iter_mut() {
                *x /= self.eta;
            }
        }
    }
    fn raw_hessian(&self, w: &[f64]) -> DMatrix<f64> {
        let mut h = DMatrix::zeros(w.len(), w.len());
        let inv2 = 1.0 / (self.eta * self.eta);
        for (s, b) in self.blocks(w) {
            let hb = self.base.hessian_of(&self.scaled(b)) * inv2;
            h.view_mut((s, s), (b.len(), b.len())).copy_from(&hb);
        }
        h
    }
    fn domain_violation(&self, w: &[f64]) -> Option<(f64, f64)> {
        self.blocks(w).find_map(|(_, b)| {
            self.base
                .violation_of(&self.scaled(b))
                .map(|(m, r)| (m * self.eta, r * self.eta))
        })
    }
    fn is_admissible(&self) -> bool {
        self.base.is_admissible()
    }
    fn is_quadratic(&self) -> bool {
        self.base.is_quadratic()
    }
    fn label(&self) -> String {
        format!("{}[eta={}]", self.base.label(), self.eta)
    }
}

/// Bregman distance `phi(w') - phi(w) - <grad phi(w), w' - w>`, `+inf` when
/// either point leaves the domain.
pub fn bregman(p: &dyn Legendre, w_prime: &Vector, w: &Vector) -> f64 {
    if !p.in_domain(w.as_slice()) {
        return f64::INFINITY;
    }
    let fp = p.raw_value(w_prime.as_slice());
    if !fp.is_finite() {
        return f64::INFINITY;
    }
    let mut g = vec![0.0; w.len()];
    p.raw_gradient(w.as_slice(), &mut g);
    let lin: f64 = g.iter().zip(w_prime.iter().zip(w.iter())).map(|(gi, (a, b))| gi * (a - b)).sum();
    (fp - p.raw_value(w.as_slice()) - lin).max(0.0)
}

const INVERSION_TOL: f64 = 1e-10;
const INVERSION_MAX_ITER: usize = 200;

/// Solve `grad phi(w) = y` (the gradient of the convex conjugate at `y`) by
/// damped Newton started at the origin.
pub fn conjugate_gradient(p: &dyn Legendre, y: &Vector) -> Result<Vector> {
    conjugate_gradient_from(p, y, &DVector::zeros(y.len()))
}

/// As [`conjugate_gradient`], warm-started at an in-domain `w0`.
pub fn conjugate_gradient_from(p: &dyn Legendre, y: &Vector, w0: &Vector) -> Result<Vector> {
    check_dim(p.dim(), y.len())?;
    check_dim(p.dim(), w0.len())?;
    p.require_domain(w0.as_slice())?;
    let n = y.len();
    // merit psi(w) = phi(w) - <y, w>, convex with gradient grad phi - y
    let psi = |w: &Vector| p.raw_value(w.as_slice()) - y.dot(w);
    let residual = |w: &Vector| {
        let mut g = DVector::zeros(n);
        p.raw_gradient(w.as_slice(), g.as_mut_slice());
        g - y
    };

    let mut w = w0.clone();
    let mut r = residual(&w);
    let mut rn = r.norm();
    let mut polish = 0;
    for _ in 0..INVERSION_MAX_ITER {
        if rn <= INVERSION_TOL {
            polish += 1;
            if polish > 3 || rn == 0.0 {
                return Ok(w);
            }
        }
        let h = p.raw_hessian(w.as_slice());
        let d = newton_direction(&h, &r);
        let f0 = psi(&w);
        let slope = r.dot(&d);
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..80 {
            let trial = &w + &d * t;
            if p.in_domain(trial.as_slice()) {
                let ft = psi(&trial);
                let rt = residual(&trial);
                let rtn = rt.norm();
                if (ft.is_finite() && ft <= f0 + 1e-4 * t * slope) || rtn < rn {
                    accepted = Some((trial, rt, rtn));
                    break;
                }
            }
            t *= 0.5;
        }
        match accepted {
            Some((trial, rt, rtn)) => {
                if rn <= INVERSION_TOL && rtn >= rn {
                    return Ok(w);
                }
                w = trial;
                r = rt;
                rn = rtn;
            }
            None if rn <= INVERSION_TOL => return Ok(w),
            None => break,
        }
    }
    if rn <= INVERSION_TOL {
        return Ok(w);
    }
    Err(Error::Inversion {
        iterations: INVERSION_MAX_ITER,
        residual: rn,
    })
}

/// Newton direction `-H^{-1} r`, Levenberg-regularized when `H` is not
/// numerically positive definite.
pub(crate) fn newton_direction(h: &DMatrix<f64>, r: &Vector) -> Vector {
    if let Some(ch) = h.clone().cholesky() {
        return -ch.solve(r);
    }
    let scale = h.diagonal().amax().max(r.norm()).max(1e-300);
    let mut mu = 1e-10 * scale;
    loop {
        let reg = h + DMatrix::identity(h.nrows(), h.ncols()) * mu;
        if let Some(ch) = reg.cholesky() {
            return -ch.solve(r);
        }
        mu *= 10.0;
    }
}

/// The five admissibility assumptions on a potential.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Assumption {
    /// Proper, convex and Legendre.
    A1,
    /// Open domain.
    A2,
    /// Twice differentiable with positive definite Hessian.
    A3,
    /// Super-coercive.
    A4,
    /// `phi(0) = 0`, `grad phi(0) = 0`.
    A5,
}

#[derive(Clone, Debug)]
pub struct AssumptionCheck {
    pub assumption: Assumption,
    pub passed: bool,
    pub detail: String,
    pub witness: Option<Vec<f64>>,
}

#[derive(Clone, Debug)]
pub struct AssumptionReport {
    pub potential: String,
    pub checks: Vec<AssumptionCheck>,
}

impl AssumptionReport {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn get(&self, a: Assumption) -> &AssumptionCheck {
        self.checks.iter().find(|c| c.assumption == a).expect("all five assumptions are checked")
    }

    pub fn passed(&self, a: Assumption) -> bool {
        self.get(a).passed
    }
}

impl fmt::Display for AssumptionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "potential: {}", self.potential)?;
        for c in &self.checks {
            let status = if c.passed { "pass" } else { "FAIL" };
            write!(f, "  {:?}  {:<4}  {}", c.assumption, status, c.detail)?;
            if let Some(w) = &c.witness {
                write!(f, "  witness={w:?}")?;
            }
            writeln!(f)?;
        }
        Ok(())
    }
}

/// Sampling plan for [`check_assumptions`].
#[derive(Clone, Debug)]
pub struct SampleSpec {
    /// Random in-domain points (the origin is always added).
    pub interior: usize,
    /// Random directions used for boundary approach and coercivity rays.
    pub rays: usize,
    /// Boundary approach reaches `(1 - 10^-k)` of the boundary, `k = 1..=steps`;
    /// coercivity rays go out to `2^steps`.
    pub approach_steps: u32,
    /// Radius used for interior sampling along unbounded directions.
    pub radius_cap: f64,
    pub seed: u64,
}

impl Default for SampleSpec {
    fn default() -> Self {
        Self {
            interior: 200,
            rays: 8,
            approach_steps: 6,
            radius_cap: 3.0,
            seed: 0,
        }
    }
}

/// Distance along the unit direction `d` to the domain boundary, or `None`
/// when the ray stays inside up to a large radius.
pub(crate) fn boundary_distance(p: &dyn Legendre, d: &[f64]) -> Option<f64> {
    let at = |t: f64| d.iter().map(|x| x * t).collect::<Vec<_>>();
    let far = 1e6;
    if p.in_domain(&at(far)) {
        return None;
    }
    let (mut lo, mut hi) = (0.0, far);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        if p.in_domain(&at(mid)) {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    Some(lo)
}

pub(crate) fn random_direction(rng: &mut impl Rng, n: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let norm = sq_norm(&v).sqrt();
        if norm > 1e-3 && norm <= 1.0 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Random in-domain samples: direction uniform on the sphere, radius a
/// fraction (at most `max_frac`) of the boundary distance.
pub fn sample_in_domain(p: &dyn Legendre, count: usize, max_frac: f64, radius_cap: f64, seed: u64) -> Vec<Vector> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count)
        .map(|_| {
            let d = random_direction(&mut rng, p.dim());
            let reach = boundary_distance(p, &d).map_or(radius_cap, |b| b * max_frac);
            let t = rng.random_range(0.0..1.0) * reach;
            DVector::from_iterator(d.len(), d.iter().map(|x| x * t))
        })
        .collect()
}

/// Executable check of the five admissibility assumptions. Failures are
/// report entries carrying a witness point.
pub fn check_assumptions(p: &dyn Legendre, samples: &SampleSpec) -> AssumptionReport {
    let n = p.dim();
    let mut rng = ChaCha8Rng::seed_from_u64(samples.seed);
    let mut points = vec![DVector::zeros(n)];
    points.extend(sample_in_domain(p, samples.interior, 0.95, samples.radius_cap, samples.seed ^ 0x9e37));
    let dirs: Vec<Vec<f64>> = (0..samples.rays.max(1)).map(|_| random_direction(&mut rng, n)).collect();
    let grad = |w: &[f64]| {
        let mut g = vec![0.0; n];
        p.raw_gradient(w, &mut g);
        g
    };

    // A1: convexity via Bregman nonnegativity, strictness via midpoints,
    // essential smoothness via gradient blow-up at the boundary.
    let mut a1 = AssumptionCheck {
        assumption: Assumption::A1,
        passed: true,
        detail: "convex, strictly convex on samples, gradient blows up at the boundary".into(),
        witness: None,
    };
    'pairs: for (i, a) in points.iter().enumerate() {
        let b = &points[(i * 7 + 3) % points.len()];
        if (a - b).norm() < 1e-9 {
            continue;
        }
        let fa = p.raw_value(a.as_slice());
        let fb = p.raw_value(b.as_slice());
        let mid: Vector = (a + b) * 0.5;
        let fm = p.raw_value(mid.as_slice());
        let tol = 1e-12 * (1.0 + fa.abs() + fb.abs());
        if !(fm < 0.5 * (fa + fb) + tol) || bregman(p, a, b) < 0.0 {
            a1.passed = false;
            a1.detail = "convexity violated".into();
            a1.witness = Some(mid.as_slice().to_vec());
            break 'pairs;
        }
    }
    if a1.passed {
        for d in &dirs {
            if let Some(b) = boundary_distance(p, d) {
                let w: Vec<f64> = d.iter().map(|x| x * b * (1.0 - 1e-6)).collect();
                let gn = sq_norm(&grad(&w)).sqrt();
                if !(gn > 1e3) {
                    a1.passed = false;
                    a1.detail = format!("gradient norm {gn:.3e} does not blow up at the boundary");
                    a1.witness = Some(w);
                    break;
                }
            }
        }
    }

    // A2: open domain; value finite inside, increasing toward the boundary,
    // infinite on it.
    let mut a2 = AssumptionCheck {
        assumption: Assumption::A2,
        passed: true,
        detail: String::new(),
        witness: None,
    };
    let mut bounded_rays = 0;
    let mut min_final = f64::INFINITY;
    for d in &dirs {
        let Some(b) = boundary_distance(p, d) else { continue };
        bounded_rays += 1;
        let mut prev = p.raw_value(&vec![0.0; n]);
        for k in 1..=samples.approach_steps {
            let t = b * (1.0 - 10f64.powi(-(k as i32)));
            let w: Vec<f64> = d.iter().map(|x| x * t).collect();
            let v = p.raw_value(&w);
            if !v.is_finite() || !(v > prev) {
                a2.passed = false;
                a2.detail = format!("value not finite and increasing along boundary approach (step {k})");
                a2.witness = Some(w);
                break;
            }
            prev = v;
        }
        min_final = min_final.min(prev);
        let edge: Vec<f64> = d.iter().map(|x| x * b * (1.0 + 1e-12)).collect();
        if a2.passed && p.raw_value(&edge).is_finite() {
            a2.passed = false;
            a2.detail = "value finite beyond the boundary".into();
            a2.witness = Some(edge);
        }
        if a2.passed && !(prev > 10.0) {
            a2.passed = false;
            a2.detail = format!("boundary blow-up too weak: {prev:.3e}");
        }
        if !a2.passed {
            break;
        }
    }
    if a2.passed {
        a2.detail = if bounded_rays == 0 {
            "domain is the whole space".into()
        } else {
            format!("boundary blow-up on {bounded_rays} rays, min final value {min_final:.3}")
        };
    }

    // A3: Hessian symmetric positive definite at every interior sample.
    let mut a3 = AssumptionCheck {
        assumption: Assumption::A3,
        passed: true,
        detail: String::new(),
        witness: None,
    };
    let mut min_eig = f64::INFINITY;
    for w in &points {
        let h = p.raw_hessian(w.as_slice());
        let asym = (&h - h.transpose()).amax();
        let eig = h.clone().symmetric_eigenvalues().min();
        min_eig = min_eig.min(eig);
        if asym > 1e-9 * (1.0 + h.amax()) || !(eig > 0.0) {
            a3.passed = false;
            a3.detail = format!("Hessian min eigenvalue {eig:.3e} (asymmetry {asym:.1e})");
            a3.witness = Some(w.as_slice().to_vec());
            break;
        }
    }
    if a3.passed {
        a3.detail = format!("min Hessian eigenvalue {min_eig:.3e} over {} samples", points.len());
    }

    // A4: super-coercivity on unbounded rays; bounded rays are covered by A2.
    let mut a4 = AssumptionCheck {
        assumption: Assumption::A4,
        passed: true,
        detail: String::new(),
        witness: None,
    };
    let mut unbounded_rays = 0;
    for d in &dirs {
        if boundary_distance(p, d).is_some() {
            continue;
        }
        unbounded_rays += 1;
        let ratio = |t: f64| {
            let w: Vec<f64> = d.iter().map(|x| x * t).collect();
            (p.raw_value(&w) / t, w)
        };
        let (first, _) = ratio(1.0);
        let mut prev = first;
        for k in 1..=samples.approach_steps.max(4) {
            let (r, w) = ratio(2f64.powi(k as i32));
            if !(r > prev) {
                a4.passed = false;
                a4.detail = format!("phi(w)/|w| not increasing at |w| = 2^{k}");
                a4.witness = Some(w);
                break;
            }
            prev = r;
        }
        if a4.passed && !(prev > 4.0 * first) {
            a4.passed = false;
            a4.detail = "phi(w)/|w| grows too slowly".into();
        }
        if !a4.passed {
            break;
        }
    }
    if a4.passed {
        a4.detail = if unbounded_rays == 0 {
            "bounded domain: coercive by boundary blow-up".into()
        } else {
            format!("phi(w)/|w| increasing on {unbounded_rays} rays")
        };
        if unbounded_rays == 0 && !a2.passed {
            a4.passed = false;
            a4.detail = "bounded domain without boundary blow-up".into();
        }
    }

    // A5
    let zero = vec![0.0; n];
    let v0 = p.raw_value(&zero);
    let g0 = sq_norm(&grad(&zero)).sqrt();
    let a5 = AssumptionCheck {
        assumption: Assumption::A5,
        passed: v0.abs() <= 1e-14 && g0 <= 1e-14,
        detail: format!("phi(0) = {v0:e}, |grad phi(0)| = {g0:e}"),
        witness: (v0.abs() > 1e-14 || g0 > 1e-14).then(|| zero.clone()),
    };

    AssumptionReport {
        potential: p.label(),
        checks: vec![a1, a2, a3, a4, a5],
    }
}

/// Parsed form of `<kind>[:eta=<float>][:eps=<float>]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PotentialSpec {
    pub kind: PotentialKind,
    pub eta: f64,
    pub eps: f64,
}

impl PotentialSpec {
    pub fn new(kind: PotentialKind) -> Self {
        Self { kind, eta: 1.0, eps: 0.0 }
    }

    /// The unscaled potential on `dim` coordinates.
    pub fn atom(&self, dim: usize) -> LegendrePotential {
        LegendrePotential::new(self.kind, dim).with_epsilon(self.eps)
    }

    /// The potential on `dim` coordinates scaled by `eta` as a single layer.
    pub fn build(&self, dim: usize) -> Result<LayerScaledPotential> {
        layer_scaled(self.atom(dim), self.eta, &[dim])
    }

    pub fn build_layered(&self, shapes: &[usize]) -> Result<LayerScaledPotential> {
        layer_scaled(self.atom(shapes.iter().sum()), self.eta, shapes)
    }
}

impl fmt::Display for PotentialSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.kind)?;
        if self.eta != 1.0 {
            write!(f, ":eta={}", self.eta)?;
        }
        if self.eps != 0.0 {
            write!(f, ":eps={}", self.eps)?;
        }
        Ok(())
    }
}

impl FromStr for PotentialSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let kind: PotentialKind = parts.next().unwrap_or_default().parse()?;
        let mut spec = PotentialSpec::new(kind);
        for part in parts {
            let (key, val) = part
                .split_once('=')
                .ok_or_else(|| Error::arg(format!("malformed potential option `{part}`")))?;
            let x: f64 = val
                .trim()
                .parse()
                .map_err(|_| Error::arg(format!("potential option `{key}` is not a number: `{val}`")))?;
            match key.trim() {
                "eta" if x > 0.0 => spec.eta = x,
                "eta" => return Err(Error::arg(format!("eta must be positive, got {x}"))),
                "eps" if x >= 0.0 => spec.eps = x,
                "eps" => return Err(Error::arg(format!("eps must be nonnegative, got {x}"))),
                other => return Err(Error::arg(format!("unknown potential option `{other}`"))),
            }
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    fn pot(kind: PotentialKind, n: usize) -> LegendrePotential {
        LegendrePotential::new(kind, n)
    }

    fn central_diff(p: &dyn Legendre, w: &Vector, h: f64) -> Vector {
        let mut g = DVector::zeros(w.len());
        for i in 0..w.len() {
            let mut a = w.clone();
            let mut b = w.clone();
            a[i] += h;
            b[i] -= h;
            g[i] = (p.raw_value(a.as_slice()) - p.raw_value(b.as_slice())) / (2.0 * h);
        }
        g
    }

    #[test]
    fn table_values() {
        assert_eq!(pot(PotentialKind::Quad, 2).value(&dvector![2.0, 0.0]).unwrap(), 2.0);
        assert_eq!(pot(PotentialKind::Tan, 3).value(&DVector::zeros(3)).unwrap(), 0.0);
        let on_sphere = dvector![0.6, 0.8];
        assert_eq!(pot(PotentialKind::Log, 2).value(&on_sphere).unwrap(), f64::INFINITY);
        assert!(pot(PotentialKind::Quad, 2).value(&dvector![1.0]).is_err());
    }

    #[test]
    fn never_nan_outside() {
        for kind in PotentialKind::ALL {
            let p = pot(kind, 2);
            for w in [dvector![5.0, 5.0], dvector![1.0, 0.0], dvector![f64::NAN, 0.0]] {
                let v = p.raw_value(w.as_slice());
                assert!(!v.is_nan(), "{kind} at {w:?}");
            }
        }
    }

    #[test]
    fn gradient_examples() {
        let g = pot(PotentialKind::LogSep, 1).gradient(&dvector![0.5]).unwrap();
        assert!((g[0] - 4.0 / 3.0).abs() < 1e-15);

        for kind in PotentialKind::ALL {
            let p = pot(kind, 3).with_epsilon(1e-6);
            assert_eq!(p.gradient(&DVector::zeros(3)).unwrap(), DVector::zeros(3));
        }

        let p = pot(PotentialKind::Tan, 2);
        let w = dvector![0.3, 0.4];
        let g = p.gradient(&w).unwrap();
        let expect = dvector![0.6, 0.8] / 0.25f64.cos().powi(2);
        assert!((&g - &expect).norm() < 1e-14);
        assert!((&g - central_diff(&p, &w, 1e-6)).norm() < 1e-8);
    }

    #[test]
    fn gradient_outside_domain_is_error() {
        let err = pot(PotentialKind::Log, 1).gradient(&dvector![1.5]).unwrap_err();
        match err {
            Error::Domain { norm, limit, .. } => {
                assert_eq!(norm, 1.5);
                assert_eq!(limit, 1.0);
            }
            e => panic!("unexpected {e:?}"),
        }
    }

    #[test]
    fn hessian_examples() {
        let h = pot(PotentialKind::Quad, 3).hessian(&dvector![1.0, -2.0, 0.5]).unwrap();
        assert_eq!(h, DMatrix::identity(3, 3));

        let cubic = pot(PotentialKind::Cubic, 2);
        assert_eq!(cubic.hessian(&DVector::zeros(2)).unwrap(), DMatrix::zeros(2, 2));
        assert!(!cubic.is_admissible());
        assert!(cubic.with_epsilon(1e-6).is_admissible());

        // second difference of -log(1 - w^2) at 0.5
        let p = pot(PotentialKind::Log, 1);
        let h = 1e-4;
        let f = |x: f64| p.raw_value(&[x]);
        let fd = (f(0.5 + h) - 2.0 * f(0.5) + f(0.5 - h)) / (h * h);
        let an = p.hessian(&dvector![0.5]).unwrap()[(0, 0)];
        assert!((an - fd).abs() < 1e-5 * an, "{an} vs {fd}");
        // closed form 2(1 + w^2)/(1 - w^2)^2
        assert!((an - 2.0 * 1.25 / 0.5625).abs() < 1e-12);
    }

    #[test]
    fn conjugate_examples() {
        let q = pot(PotentialKind::Quad, 2);
        let w = conjugate_gradient(&q, &dvector![3.0, -1.0]).unwrap();
        assert!((w - dvector![3.0, -1.0]).norm() < 1e-12);
        for kind in PotentialKind::ALL {
            let w = conjugate_gradient(&pot(kind, 2), &DVector::zeros(2)).unwrap();
            assert_eq!(w, DVector::zeros(2));
        }
        let w = conjugate_gradient(&pot(PotentialKind::LogSep, 1), &dvector![4.0 / 3.0]).unwrap();
        assert!((w[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn conjugate_pure_cubic_away_from_origin() {
        let p = pot(PotentialKind::Cubic, 2);
        let w0 = dvector![0.7, -0.002];
        let y = p.gradient(&w0).unwrap();
        let w = conjugate_gradient(&p, &y).unwrap();
        assert!((w - w0).norm() < 1e-8);
    }

    #[test]
    fn assumption_reports() {
        let spec = SampleSpec::default();
        assert!(check_assumptions(&pot(PotentialKind::Quad, 2), &spec).all_passed());

        let r = check_assumptions(&pot(PotentialKind::Cubic, 2), &spec);
        assert!(!r.passed(Assumption::A3));
        assert_eq!(r.get(Assumption::A3).witness.as_deref(), Some(&[0.0, 0.0][..]));
        assert!(r.passed(Assumption::A1) && r.passed(Assumption::A4) && r.passed(Assumption::A5));

        let r = check_assumptions(&pot(PotentialKind::Log, 2), &spec);
        assert!(r.all_passed(), "{r}");
        // log blow-up at |w| = 1 - 1e-6
        let v = pot(PotentialKind::Log, 1).raw_value(&[1.0 - 1e-6]);
        assert!(v > 13.0);
    }

    #[test]
    fn separable_blocks() {
        let s = separable(pot(PotentialKind::Quad, 1), 3).unwrap();
        assert_eq!(s.value(&dvector![1.0, 0.0, 0.0]).unwrap(), 0.5);

        let s = separable(pot(PotentialKind::Log, 2), 2).unwrap();
        let w = dvector![0.1, 0.2, -0.5, 0.3];
        let g = s.gradient(&w).unwrap();
        let g1 = pot(PotentialKind::Log, 2).gradient(&dvector![0.1, 0.2]).unwrap();
        let g2 = pot(PotentialKind::Log, 2).gradient(&dvector![-0.5, 0.3]).unwrap();
        assert_eq!(g.rows(0, 2), g1.rows(0, 2));
        assert_eq!(g.rows(2, 2), g2.rows(0, 2));

        let h = s.hessian(&w).unwrap();
        let e = h.symmetric_eigenvalues().min();
        let e1 = pot(PotentialKind::Log, 2).hessian(&dvector![0.1, 0.2]).unwrap().symmetric_eigenvalues().min();
        let e2 = pot(PotentialKind::Log, 2).hessian(&dvector![-0.5, 0.3]).unwrap().symmetric_eigenvalues().min();
        assert!((e - e1.min(e2)).abs() < 1e-12);
        assert!(separable(pot(PotentialKind::Log, 2), 0).is_err());
    }

    #[test]
    fn layer_scaling() {
        let base = pot(PotentialKind::Tan, 3);
        let one = layer_scaled(base, 1.0, &[3]).unwrap();
        for w in sample_in_domain(&base, 20, 0.9, 2.0, 5) {
            assert_eq!(one.raw_value(w.as_slice()), base.raw_value(w.as_slice()));
        }
        let q = layer_scaled(pot(PotentialKind::Quad, 1), 2.0, &[1]).unwrap();
        assert_eq!(q.value(&dvector![2.0]).unwrap(), 0.5);
        assert!(layer_scaled(base, 0.0, &[3]).is_err());
        assert!(layer_scaled(base, 1.0, &[]).is_err());

        let ls = layer_scaled(pot(PotentialKind::Log, 1), 2.0, &[2, 3]).unwrap();
        let w = dvector![0.3, -0.4, 0.2, 0.9, -1.1];
        assert!((ls.gradient(&w).unwrap() - central_diff(&ls, &w, 1e-6)).norm() < 1e-7);
        // domain: |w_l / eta| < 1 per layer
        assert!(ls.in_domain(&[0.3, 0.4, 1.9, 0.1, 0.1]));
        assert!(!ls.in_domain(&[0.3, 0.4, 2.1, 0.1, 0.1]));
    }

    #[test]
    fn bregman_examples() {
        let q = pot(PotentialKind::Quad, 1);
        assert_eq!(bregman(&q, &dvector![1.0], &dvector![0.0]), 0.5);
        let l = pot(PotentialKind::Log, 1);
        let b = bregman(&l, &dvector![0.5], &dvector![0.0]);
        assert!((b - (-(0.75f64).ln())).abs() < 1e-15);
        assert_eq!(bregman(&l, &dvector![0.3], &dvector![0.3]), 0.0);
        assert_eq!(bregman(&l, &dvector![0.3], &dvector![1.3]), f64::INFINITY);
        assert_eq!(bregman(&l, &dvector![1.3], &dvector![0.3]), f64::INFINITY);
    }

    #[test]
    fn spec_strings() {
        let s: PotentialSpec = "log-sep:eta=2.0".parse().unwrap();
        assert_eq!(s.kind, PotentialKind::LogSep);
        assert_eq!(s.eta, 2.0);
        let s: PotentialSpec = "cubic:eps=1e-6".parse().unwrap();
        assert_eq!(s.eps, 1e-6);
        assert_eq!(s.to_string().parse::<PotentialSpec>().unwrap(), s);
        assert!("log:eta=-1".parse::<PotentialSpec>().is_err());
        assert!("hyperbolic".parse::<PotentialSpec>().is_err());
        assert!("log:foo=1".parse::<PotentialSpec>().is_err());
    }
}
