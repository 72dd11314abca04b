//! Independent verification tools: central finite differences, dense-grid
//! global minimization and empirical local convexity constants.
//!
//! Nothing in here uses the analytic machinery it is meant to check; the grid
//! minimizer only evaluates the scalar field it is given.

use std::io::Write;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::potentials::Legendre;
use crate::Vector;

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn finite_diff_gradient<F>(f: F, x: &Vector, h: f64) -> Result<Vector>
where
    F: Fn(&Vector) -> f64,
{
    let mut g = DVector::zeros(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let xi = x[i];
        probe[i] = xi + h;
        let fp = f(&probe);
        probe[i] = xi - h;
        let fm = f(&probe);
        probe[i] = xi;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Stencil { coordinate: i });
        }
        g[i] = (fp - fm) / (2.0 * h);
    }
    Ok(g)
}

/// Maximum number of grid points evaluated in one pass.
pub const MAX_GRID_POINTS: usize = 10_000_000;
/// Values within this absolute distance of the minimum count as ties.
pub const TIE_TOLERANCE: f64 = 1e-12;
const MAX_CANDIDATES: usize = 64;

/// A tensor grid over a box, optionally refined around the best points.
#[derive(Clone, Debug, PartialEq)]
pub struct GridSpec {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub points: Vec<usize>,
    /// Number of zoom-in passes after the initial scan.
    pub refinements: usize,
    /// Each refinement shrinks the box width by this factor.
    pub shrink: f64,
}

impl GridSpec {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, points: Vec<usize>) -> Result<Self> {
        let g = Self {
            lower,
            upper,
            points,
            refinements: 2,
            shrink: 10.0,
        };
        g.validate()?;
        Ok(g)
    }

    /// Same bounds and resolution in every dimension.
    pub fn cube(dim: usize, lower: f64, upper: f64, points: usize) -> Result<Self> {
        Self::new(vec![lower; dim], vec![upper; dim], vec![points; dim])
    }

    /// A cube centred at `center` with half-width `radius`.
    pub fn around(center: &Vector, radius: f64, points: usize) -> Result<Self> {
        Self::new(
            center.iter().map(|c| c - radius).collect(),
            center.iter().map(|c| c + radius).collect(),
            vec![points; center.len()],
        )
    }

    pub fn with_refinements(mut self, levels: usize) -> Self {
        self.refinements = levels;
        self
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn total_points(&self) -> usize {
        self.points.iter().product()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.lower.len();
        if d == 0 || self.upper.len() != d || self.points.len() != d {
            return Err(Error::arg("grid bounds and point counts must share a nonzero dimension"));
        }
        for i in 0..d {
            if !self.lower[i].is_finite() || !self.upper[i].is_finite() || self.lower[i] >= self.upper[i] {
                return Err(Error::arg(format!(
                    "grid bounds [{}, {}] in dimension {i} are not a finite interval",
                    self.lower[i], self.upper[i]
                )));
            }
            if self.points[i] < 3 {
                return Err(Error::arg("grids need at least 3 points per dimension"));
            }
        }
        let total = self.points.iter().try_fold(1usize, |a, &p| a.checked_mul(p));
        match total {
            Some(t) if t <= MAX_GRID_POINTS => {}
            _ => return Err(Error::arg(format!("grid exceeds {MAX_GRID_POINTS} points"))),
        }
        if !(self.shrink > 1.0) {
            return Err(Error::arg("refinement shrink factor must exceed 1"));
        }
        Ok(())
    }

    fn cell(&self) -> Vec<f64> {
        (0..self.dim())
            .map(|i| (self.upper[i] - self.lower[i]) / (self.points[i] - 1) as f64)
            .collect()
    }

    /// Grid point with multi-index `idx`, written as `lower + width * k/(n-1)`
    /// so that round values in the box land exactly on the grid.
    fn point(&self, flat: usize) -> Vector {
        let mut rem = flat;
        DVector::from_iterator(
            self.dim(),
            (0..self.dim()).map(|i| {
                let n = self.points[i];
                let k = rem % n;
                rem /= n;
                self.lower[i] + (self.upper[i] - self.lower[i]) * k as f64 / (n - 1) as f64
            }),
        )
    }

    /// All grid points in evaluation order (first coordinate fastest).
    pub fn iter_points(&self) -> impl Iterator<Item = Vector> + '_ {
        (0..self.total_points()).map(|i| self.point(i))
    }
}

/// Result of a grid minimization.
#[derive(Clone, Debug)]
pub struct GridMinimum {
    /// One representative per distinct minimizing region.
    pub argmins: Vec<Vector>,
    pub value: f64,
    /// Final grid spacing per dimension.
    pub resolution: Vec<f64>,
}

/// Evaluate `f` on every grid point, in grid order. Parallel, but the output
/// is identical to a sequential pass.
pub fn grid_scan<F>(f: &F, grid: &GridSpec) -> Result<Vec<(Vector, f64)>>
where
    F: Fn(&Vector) -> f64 + Sync,
{
    grid.validate()?;
    Ok((0..grid.total_points())
        .into_par_iter()
        .map(|i| {
            let p = grid.point(i);
            let v = f(&p);
            (p, v)
        })
        .collect())
}

/// Write a scan as CSV: one column per coordinate, then `value`.
pub fn write_scan_csv<W: Write>(out: W, scan: &[(Vector, f64)]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
    if let Some((p, _)) = scan.first() {
        let mut header: Vec<String> = (0..p.len()).map(|i| format!("x{i}")).collect();
        header.push("value".into());
        w.write_record(&header)?;
    }
    for (p, v) in scan {
        let mut row: Vec<String> = p.iter().map(|x| x.to_string()).collect();
        row.push(v.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Dense-grid global minimization with optional zoom-in refinement.
///
/// Points within [`TIE_TOLERANCE`] of the minimum are kept; adjacent tied
/// points are merged into one representative, so `argmins.len() > 1` means
/// separated minimizers.
pub fn grid_argmin<F>(f: F, grid: &GridSpec) -> Result<GridMinimum>
where
    F: Fn(&Vector) -> f64 + Sync,
{
    grid.validate()?;
    let scan = grid_scan(&f, grid)?;
    let (mut value, mut reps) = select(scan, &grid.cell())?;
    let mut box_width: Vec<f64> = (0..grid.dim()).map(|i| grid.upper[i] - grid.lower[i]).collect();
    let mut resolution = grid.cell();

    for _ in 0..grid.refinements {
        for w in box_width.iter_mut() {
            *w /= grid.shrink;
        }
        let mut evaluated: Vec<(Vector, f64)> = Vec::new();
        for c in &reps {
            evaluated.push((c.clone(), f(c)));
            let local = zoom_box(grid, c, &box_width);
            evaluated.extend(
                (0..local.total()).into_par_iter().map(|i| {
                    let p = local.point(i);
                    let v = f(&p);
                    (p, v)
                }).collect::<Vec<_>>(),
            );
        }
        resolution = box_width
            .iter()
            .zip(&grid.points)
            .map(|(w, &n)| w / (n - 1) as f64)
            .collect();
        let (v, r) = select(evaluated, &resolution)?;
        value = v;
        reps = r;
    }
    Ok(GridMinimum {
        argmins: reps,
        value,
        resolution,
    })
}

/// Refinement box centred on `c`, clipped to the original bounds. Points are
/// `c + half * t` so the centre itself is hit exactly.
struct ZoomBox {
    center: Vec<f64>,
    lo: Vec<f64>,
    hi: Vec<f64>,
    points: Vec<usize>,
}

impl ZoomBox {
    fn total(&self) -> usize {
        self.points.iter().product()
    }

    fn point(&self, flat: usize) -> Vector {
        let mut rem = flat;
        DVector::from_iterator(
            self.center.len(),
            (0..self.center.len()).map(|i| {
                let n = self.points[i];
                let k = rem % n;
                rem /= n;
                let t = -1.0 + 2.0 * k as f64 / (n - 1) as f64;
                let half = if t < 0.0 { self.center[i] - self.lo[i] } else { self.hi[i] - self.center[i] };
                self.center[i] + half * t
            }),
        )
    }
}

fn zoom_box(grid: &GridSpec, c: &Vector, width: &[f64]) -> ZoomBox {
    let d = grid.dim();
    ZoomBox {
        center: c.iter().copied().collect(),
        lo: (0..d).map(|i| (c[i] - 0.5 * width[i]).max(grid.lower[i])).collect(),
        hi: (0..d).map(|i| (c[i] + 0.5 * width[i]).min(grid.upper[i])).collect(),
        points: grid.points.clone(),
    }
}

/// Minimum value and clustered tie representatives, in evaluation order.
fn select(evaluated: Vec<(Vector, f64)>, cell: &[f64]) -> Result<(f64, Vec<Vector>)> {
    let min = evaluated
        .iter()
        .map(|(_, v)| *v)
        .filter(|v| !v.is_nan() && *v < f64::INFINITY)
        .fold(f64::INFINITY, f64::min);
    if !min.is_finite() {
        if min == f64::NEG_INFINITY {
            return Err(Error::UnboundedBelow { minima: vec![min] });
        }
        return Err(Error::EmptyFeasible);
    }
    let mut reps: Vec<Vector> = Vec::new();
    for (p, v) in evaluated {
        if v.is_nan() || v > min + TIE_TOLERANCE {
            continue;
        }
        let near = reps.iter().any(|r| {
            r.iter()
                .zip(p.iter())
                .zip(cell)
                .all(|((a, b), h)| (a - b).abs() <= 1.5 * h)
        });
        if !near {
            reps.push(p);
            if reps.len() >= MAX_CANDIDATES {
                break;
            }
        }
    }
    Ok((min, reps))
}

/// Empirical local strong-convexity and gradient-Lipschitz constants.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConvexityConstants {
    /// Smallest sampled Hessian eigenvalue.
    pub mu_hat: f64,
    /// Largest sampled Hessian eigenvalue.
    pub gamma_hat: f64,
    /// `mu_hat > 0`.
    pub admissible: bool,
}

/// Sample Hessian eigenvalues over the box `[lower, upper]`, which must lie
/// inside the domain. The centre, the corners and the origin (when inside the
/// box) are always included.
pub fn local_convexity_constants(
    p: &dyn Legendre,
    lower: &[f64],
    upper: &[f64],
    n_samples: usize,
) -> Result<ConvexityConstants> {
    let d = p.dim();
    if lower.len() != d || upper.len() != d {
        return Err(Error::arg("box dimension does not match the potential"));
    }
    if lower.iter().zip(upper).any(|(a, b)| !(a <= b)) {
        return Err(Error::arg("box lower bounds must not exceed upper bounds"));
    }
    let mut pts: Vec<Vec<f64>> = Vec::new();
    for mask in 0..(1usize << d) {
        pts.push((0..d).map(|i| if mask >> i & 1 == 1 { upper[i] } else { lower[i] }).collect());
    }
    // domains are convex, so corners inside imply the whole box is inside
    if let Some(c) = pts.iter().find(|c| !p.in_domain(c)) {
        return Err(Error::arg(format!("box corner {c:?} lies outside the potential's domain")));
    }
    pts.push((0..d).map(|i| 0.5 * (lower[i] + upper[i])).collect());
    if (0..d).all(|i| lower[i] <= 0.0 && upper[i] >= 0.0) {
        pts.push(vec![0.0; d]);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed);
    for _ in 0..n_samples {
        pts.push(
            (0..d)
                .map(|i| if lower[i] < upper[i] { rng.random_range(lower[i]..=upper[i]) } else { lower[i] })
                .collect(),
        );
    }
    let mut mu = f64::INFINITY;
    let mut gamma: f64 = 0.0;
    for w in &pts {
        let eig = p.raw_hessian(w).symmetric_eigenvalues();
        mu = mu.min(eig.min());
        gamma = gamma.max(eig.max());
    }
    Ok(ConvexityConstants {
        mu_hat: mu,
        gamma_hat: gamma,
        admissible: mu > 0.0,
    })
}
