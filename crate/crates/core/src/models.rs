//! Functions to be smoothed or trained: nonconvex test functions, quadratic
//! objectives, a small ReLU network with softmax cross-entropy, and synthetic
//! classification data.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::Vector;

/// A scalar objective on `R^dim`, extended-valued (`+inf` off its domain).
pub trait Objective: Send + Sync + fmt::Debug {
    fn dim(&self) -> usize;

    fn value(&self, z: &Vector) -> f64;

    /// Gradient where the function is differentiable, `None` otherwise.
    fn gradient(&self, z: &Vector) -> Option<Vector>;

    fn hessian(&self, _z: &Vector) -> Option<DMatrix<f64>> {
        None
    }

    /// Declared infimum; `-inf` when unknown or unbounded.
    fn lower_bound(&self) -> f64 {
        f64::NEG_INFINITY
    }

    /// Whether the function is differentiable on its whole domain.
    fn is_smooth(&self) -> bool;

    fn label(&self) -> String;
}

impl<T: Objective + ?Sized> Objective for Arc<T> {
    fn dim(&self) -> usize {
        (**self).dim()
    }
    fn value(&self, z: &Vector) -> f64 {
        (**self).value(z)
    }
    fn gradient(&self, z: &Vector) -> Option<Vector> {
        (**self).gradient(z)
    }
    fn hessian(&self, z: &Vector) -> Option<DMatrix<f64>> {
        (**self).hessian(z)
    }
    fn lower_bound(&self) -> f64 {
        (**self).lower_bound()
    }
    fn is_smooth(&self) -> bool {
        (**self).is_smooth()
    }
    fn label(&self) -> String {
        (**self).label()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum TestFunctionKind {
    /// `sum |z_i|`
    Abs,
    /// `sum -cos(z_i)`
    NegCos,
    /// `sum (z_i^2 - 1)^2`
    DoubleWell,
    /// `(1 - x)^2 + 100 (y - x^2)^2`, two-dimensional only.
    Rosenbrock2d,
    /// Indicator of `{0, 1}`, one-dimensional only.
    TwoPointIndicator,
    /// `|z|^2 / 2`
    Quadratic,
    /// `-|z|^2`, unbounded below.
    NegQuadratic,
    /// Identically zero.
    Zero,
}

impl TestFunctionKind {
    pub const ALL: [TestFunctionKind; 8] = [
        TestFunctionKind::Abs,
        TestFunctionKind::NegCos,
        TestFunctionKind::DoubleWell,
        TestFunctionKind::Rosenbrock2d,
        TestFunctionKind::TwoPointIndicator,
        TestFunctionKind::Quadratic,
        TestFunctionKind::NegQuadratic,
        TestFunctionKind::Zero,
    ];

    pub fn name(self) -> &'static str {
        match self {
            TestFunctionKind::Abs => "abs",
            TestFunctionKind::NegCos => "neg_cos",
            TestFunctionKind::DoubleWell => "double_well",
            TestFunctionKind::Rosenbrock2d => "rosenbrock_2d",
            TestFunctionKind::TwoPointIndicator => "two_point_indicator",
            TestFunctionKind::Quadratic => "quadratic",
            TestFunctionKind::NegQuadratic => "neg_quadratic",
            TestFunctionKind::Zero => "zero",
        }
    }
}

impl FromStr for TestFunctionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        TestFunctionKind::ALL
            .into_iter()
            .find(|k| k.name() == norm)
            .ok_or_else(|| Error::arg(format!("unknown test function `{s}`")))
    }
}

impl fmt::Display for TestFunctionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A small nonconvex (or nonsmooth) test function with regularity metadata.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TestFunction {
    pub kind: TestFunctionKind,
    pub dimension: usize,
}

impl TestFunction {
    pub fn new(kind: TestFunctionKind, dimension: usize) -> Result<Self> {
        let ok = match kind {
            TestFunctionKind::Rosenbrock2d => dimension == 2,
            TestFunctionKind::TwoPointIndicator => dimension == 1,
            _ => (1..=2).contains(&dimension),
        };
        if !ok {
            return Err(Error::arg(format!("{kind} is not defined in dimension {dimension}")));
        }
        Ok(Self { kind, dimension })
    }

    /// One-dimensional instance (two-dimensional for Rosenbrock).
    pub fn scalar(kind: TestFunctionKind) -> Self {
        let d = if kind == TestFunctionKind::Rosenbrock2d { 2 } else { 1 };
        Self { kind, dimension: d }
    }

    /// Points where the function is not differentiable (per coordinate for
    /// the separable kinds).
    pub fn nonsmooth_points(&self) -> Vec<f64> {
        match self.kind {
            TestFunctionKind::Abs => vec![0.0],
            TestFunctionKind::TwoPointIndicator => vec![0.0, 1.0],
            _ => Vec::new(),
        }
    }

    /// True for C^2 and convex functions, and for indicators of smooth
    /// manifolds.
    pub fn prox_regular_everywhere(&self) -> bool {
        true
    }

    /// Value and, where differentiable, gradient.
    pub fn eval(&self, z: &Vector) -> Result<(f64, Option<Vector>)> {
        if z.len() != self.dimension {
            return Err(Error::arg(format!(
                "{} expects {} coordinates, got {}",
                self.kind,
                self.dimension,
                z.len()
            )));
        }
        Ok((self.value(z), self.gradient(z)))
    }
}

impl Objective for TestFunction {
    fn dim(&self) -> usize {
        self.dimension
    }

    fn value(&self, z: &Vector) -> f64 {
        match self.kind {
            TestFunctionKind::Abs => z.iter().map(|x| x.abs()).sum(),
            TestFunctionKind::NegCos => z.iter().map(|x| -x.cos()).sum(),
            TestFunctionKind::DoubleWell => z.iter().map(|x| (x * x - 1.0).powi(2)).sum(),
            TestFunctionKind::Rosenbrock2d => (1.0 - z[0]).powi(2) + 100.0 * (z[1] - z[0] * z[0]).powi(2),
            TestFunctionKind::TwoPointIndicator => {
                if z[0] == 0.0 || z[0] == 1.0 {
                    0.0
                } else {
                    f64::INFINITY
                }
            }
            TestFunctionKind::Quadratic => 0.5 * z.norm_squared(),
            TestFunctionKind::NegQuadratic => -z.norm_squared(),
            TestFunctionKind::Zero => 0.0,
        }
    }

    fn gradient(&self, z: &Vector) -> Option<Vector> {
        match self.kind {
            TestFunctionKind::Abs => {
                if z.iter().any(|x| *x == 0.0) {
                    None
                } else {
                    Some(z.map(f64::signum))
                }
            }
            TestFunctionKind::NegCos => Some(z.map(f64::sin)),
            TestFunctionKind::DoubleWell => Some(z.map(|x| 4.0 * x * (x * x - 1.0))),
            TestFunctionKind::Rosenbrock2d => {
                let (x, y) = (z[0], z[1]);
                Some(DVector::from_vec(vec![
                    -2.0 * (1.0 - x) - 400.0 * x * (y - x * x),
                    200.0 * (y - x * x),
                ]))
            }
            TestFunctionKind::TwoPointIndicator => None,
            TestFunctionKind::Quadratic => Some(z.clone()),
            TestFunctionKind::NegQuadratic => Some(z * -2.0),
            TestFunctionKind::Zero => Some(DVector::zeros(z.len())),
        }
    }

    fn hessian(&self, z: &Vector) -> Option<DMatrix<f64>> {
        let n = z.len();
        match self.kind {
            TestFunctionKind::Abs => self.gradient(z).map(|_| DMatrix::zeros(n, n)),
            TestFunctionKind::NegCos => Some(DMatrix::from_diagonal(&z.map(f64::cos))),
            TestFunctionKind::DoubleWell => Some(DMatrix::from_diagonal(&z.map(|x| 12.0 * x * x - 4.0))),
            TestFunctionKind::Rosenbrock2d => {
                let (x, y) = (z[0], z[1]);
                Some(DMatrix::from_row_slice(
                    2,
                    2,
                    &[2.0 - 400.0 * (y - 3.0 * x * x), -400.0 * x, -400.0 * x, 200.0],
                ))
            }
            TestFunctionKind::TwoPointIndicator => None,
            TestFunctionKind::Quadratic => Some(DMatrix::identity(n, n)),
            TestFunctionKind::NegQuadratic => Some(DMatrix::identity(n, n) * -2.0),
            TestFunctionKind::Zero => Some(DMatrix::zeros(n, n)),
        }
    }

    fn lower_bound(&self) -> f64 {
        match self.kind {
            TestFunctionKind::NegCos => -(self.dimension as f64),
            TestFunctionKind::NegQuadratic => f64::NEG_INFINITY,
            _ => 0.0,
        }
    }

    fn is_smooth(&self) -> bool {
        !matches!(self.kind, TestFunctionKind::Abs | TestFunctionKind::TwoPointIndicator)
    }

    fn label(&self) -> String {
        self.kind.name().to_string()
    }
}

/// `f(z) = (1/2)(z - c)^T P (z - c)`.
#[derive(Clone, Debug, PartialEq)]
pub struct QuadraticObjective {
    pub p: DMatrix<f64>,
    pub c: Vector,
}

impl QuadraticObjective {
    pub fn new(p: DMatrix<f64>, c: Vector) -> Result<Self> {
        if !p.is_square() || p.nrows() != c.len() {
            return Err(Error::arg("quadratic objective needs a square matrix matching the centre"));
        }
        if (&p - p.transpose()).amax() > 1e-12 * (1.0 + p.amax()) {
            return Err(Error::arg("quadratic objective matrix must be symmetric"));
        }
        Ok(Self { p, c })
    }

    /// Diagonal instance with the given curvatures.
    pub fn diagonal(curvatures: &[f64], center: &[f64]) -> Result<Self> {
        Self::new(
            DMatrix::from_diagonal(&DVector::from_column_slice(curvatures)),
            DVector::from_column_slice(center),
        )
    }

    pub fn minimizer(&self) -> Vector {
        self.c.clone()
    }
}

impl Objective for QuadraticObjective {
    fn dim(&self) -> usize {
        self.c.len()
    }
    fn value(&self, z: &Vector) -> f64 {
        let d = z - &self.c;
        0.5 * d.dot(&(&self.p * &d))
    }
    fn gradient(&self, z: &Vector) -> Option<Vector> {
        Some(&self.p * (z - &self.c))
    }
    fn hessian(&self, _z: &Vector) -> Option<DMatrix<f64>> {
        Some(self.p.clone())
    }
    fn lower_bound(&self) -> f64 {
        if self.p.clone().symmetric_eigenvalues().min() >= 0.0 {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
    fn is_smooth(&self) -> bool {
        true
    }
    fn label(&self) -> String {
        format!("quadratic[{}]", self.c.len())
    }
}

/// `f(z) = sum_j f_j(z_j)` over consecutive blocks.
#[derive(Clone, Debug)]
pub struct BlockSum {
    pub blocks: Vec<Arc<dyn Objective>>,
}

impl BlockSum {
    pub fn new(blocks: Vec<Arc<dyn Objective>>) -> Result<Self> {
        if blocks.is_empty() {
            return Err(Error::arg("block sum needs at least one block"));
        }
        Ok(Self { blocks })
    }

    /// `copies` identical blocks.
    pub fn repeated(f: Arc<dyn Objective>, copies: usize) -> Result<Self> {
        Self::new(vec![f; copies])
    }

    fn split<'a>(&'a self, z: &'a Vector) -> impl Iterator<Item = (usize, &'a Arc<dyn Objective>, Vector)> + 'a {
        let mut start = 0;
        self.blocks.iter().map(move |b| {
            let s = start;
            start += b.dim();
            (s, b, z.rows(s, b.dim()).into_owned())
        })
    }
}

impl Objective for BlockSum {
    fn dim(&self) -> usize {
        self.blocks.iter().map(|b| b.dim()).sum()
    }
    fn value(&self, z: &Vector) -> f64 {
        self.split(z).map(|(_, b, zj)| b.value(&zj)).sum()
    }
    fn gradient(&self, z: &Vector) -> Option<Vector> {
        let mut g = DVector::zeros(z.len());
        for (s, b, zj) in self.split(z) {
            g.rows_mut(s, b.dim()).copy_from(&b.gradient(&zj)?);
        }
        Some(g)
    }
    fn hessian(&self, z: &Vector) -> Option<DMatrix<f64>> {
        let mut h = DMatrix::zeros(z.len(), z.len());
        for (s, b, zj) in self.split(z) {
            h.view_mut((s, s), (b.dim(), b.dim())).copy_from(&b.hessian(&zj)?);
        }
        Some(h)
    }
    fn lower_bound(&self) -> f64 {
        self.blocks.iter().map(|b| b.lower_bound()).sum()
    }
    fn is_smooth(&self) -> bool {
        self.blocks.iter().all(|b| b.is_smooth())
    }
    fn label(&self) -> String {
        format!("sum of {} blocks", self.blocks.len())
    }
}

/// Labelled feature vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub inputs: Vec<Vec<f64>>,
    pub labels: Vec<usize>,
    pub n_classes: usize,
}

impl Dataset {
    pub fn new(inputs: Vec<Vec<f64>>, labels: Vec<usize>, n_classes: usize) -> Result<Self> {
        if inputs.len() != labels.len() {
            return Err(Error::arg("inputs and labels differ in length"));
        }
        if let Some(&bad) = labels.iter().find(|&&h| h >= n_classes) {
            return Err(Error::arg(format!("label {bad} outside 0..{n_classes}")));
        }
        if let Some(first) = inputs.first() {
            if inputs.iter().any(|x| x.len() != first.len()) {
                return Err(Error::arg("feature vectors differ in length"));
            }
        }
        Ok(Self {
            inputs,
            labels,
            n_classes,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn n_features(&self) -> usize {
        self.inputs.first().map_or(0, Vec::len)
    }

    /// The full index universe `0..len`.
    pub fn indices(&self) -> Vec<usize> {
        (0..self.len()).collect()
    }

    /// CSV with feature columns `x0, x1, ...` followed by `label`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new().terminator(csv::Terminator::Any(b'\n')).from_writer(out);
        let mut header: Vec<String> = (0..self.n_features()).map(|i| format!("x{i}")).collect();
        header.push("label".into());
        w.write_record(&header)?;
        for (x, h) in self.inputs.iter().zip(&self.labels) {
            let mut row: Vec<String> = x.iter().map(|v| v.to_string()).collect();
            row.push(h.to_string());
            w.write_record(&row)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Inverse of [`Dataset::write_csv`]; the class count is `max label + 1`.
    pub fn read_csv<R: Read>(input: R) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let mut inputs = Vec::new();
        let mut labels = Vec::new();
        for (line, rec) in r.records().enumerate() {
            let rec = rec?;
            let n = rec.len();
            if n < 2 {
                return Err(Error::arg(format!("dataset row {} has fewer than two columns", line + 2)));
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|_| Error::arg(format!("dataset row {}: bad number `{s}`", line + 2)))
            };
            inputs.push(rec.iter().take(n - 1).map(parse).collect::<Result<Vec<_>>>()?);
            labels.push(
                rec[n - 1]
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::arg(format!("dataset row {}: bad label", line + 2)))?,
            );
        }
        let classes = labels.iter().max().map_or(0, |m| m + 1);
        Dataset::new(inputs, labels, classes)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SynthKind {
    TwoGaussians,
    TwoMoons,
}

impl FromStr for SynthKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "two_gaussians" => Ok(SynthKind::TwoGaussians),
            "two_moons" => Ok(SynthKind::TwoMoons),
            other => Err(Error::arg(format!("unknown dataset kind `{other}`"))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SynthKind::TwoGaussians => "two_gaussians",
            SynthKind::TwoMoons => "two_moons",
        })
    }
}

/// Class means of the two-Gaussians set.
pub const GAUSSIAN_MEANS: [[f64; 2]; 2] = [[-1.0, 0.0], [1.0, 0.0]];

/// Deterministic two-class 2-D data: the first `n/2` (rounded down) points
/// are class 0, the rest class 1. `noise` is the standard deviation of the
/// isotropic Gaussian perturbation.
pub fn synth_dataset(kind: SynthKind, n: usize, noise: f64, seed: u64) -> Result<Dataset> {
    if n < 2 {
        return Err(Error::arg("synthetic datasets need at least two points"));
    }
    if !(noise >= 0.0) {
        return Err(Error::arg("noise must be nonnegative"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, noise.max(f64::MIN_POSITIVE)).expect("valid std dev");
    let jitter = |rng: &mut ChaCha8Rng| if noise > 0.0 { normal.sample(rng) } else { 0.0 };
    let n0 = n / 2;
    let mut inputs = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let h = usize::from(i >= n0);
        let base = match kind {
            SynthKind::TwoGaussians => GAUSSIAN_MEANS[h],
            SynthKind::TwoMoons => {
                let t = rng.random_range(0.0..std::f64::consts::PI);
                if h == 0 {
                    [t.cos(), t.sin()]
                } else {
                    [1.0 - t.cos(), 0.5 - t.sin()]
                }
            }
        };
        let x = vec![base[0] + jitter(&mut rng), base[1] + jitter(&mut rng)];
        inputs.push(x);
        labels.push(h);
    }
    Dataset::new(inputs, labels, 2)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShardMode {
    /// Every worker sees the whole index set.
    FullOverlap,
    /// Round-robin partition.
    Disjoint,
}

impl FromStr for ShardMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "full_overlap" => Ok(ShardMode::FullOverlap),
            "disjoint" => Ok(ShardMode::Disjoint),
            other => Err(Error::arg(format!("unknown shard mode `{other}`"))),
        }
    }
}

impl fmt::Display for ShardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ShardMode::FullOverlap => "full_overlap",
            ShardMode::Disjoint => "disjoint",
        })
    }
}

/// Index sets `I_j` for `workers` workers over `0..n`.
pub fn shard_indices(n: usize, workers: usize, mode: ShardMode) -> Result<Vec<Vec<usize>>> {
    if workers == 0 {
        return Err(Error::arg("need at least one worker"));
    }
    match mode {
        ShardMode::FullOverlap => Ok(vec![(0..n).collect(); workers]),
        ShardMode::Disjoint => {
            if n < workers {
                return Err(Error::arg(format!("cannot split {n} samples over {workers} workers")));
            }
            let mut shards = vec![Vec::new(); workers];
            for i in 0..n {
                shards[i % workers].push(i);
            }
            Ok(shards)
        }
    }
}

pub fn shard_dataset(d: &Dataset, workers: usize, mode: ShardMode) -> Result<Vec<Vec<usize>>> {
    shard_indices(d.len(), workers, mode)
}

/// Fully connected ReLU network with identity output, softmax cross-entropy
/// loss and regularizer `R(z) = (nu/2)|z|^2`.
///
/// Parameters live in one flat vector; each layer contributes its weight
/// matrix (`fan_out x fan_in`, row-major) followed by its bias.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpModel {
    pub layer_sizes: Vec<usize>,
    pub nu: f64,
}

/// One layer's weights and bias.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub weights: DMatrix<f64>,
    pub bias: Vector,
}

impl MlpModel {
    pub fn new(layer_sizes: Vec<usize>, nu: f64) -> Result<Self> {
        if layer_sizes.len() < 2 || layer_sizes.contains(&0) {
            return Err(Error::arg("an MLP needs at least two positive layer sizes"));
        }
        if !(nu >= 0.0) {
            return Err(Error::arg("regularization weight must be nonnegative"));
        }
        Ok(Self { layer_sizes, nu })
    }

    pub fn n_layers(&self) -> usize {
        self.layer_sizes.len() - 1
    }

    pub fn n_classes(&self) -> usize {
        *self.layer_sizes.last().expect("validated nonempty")
    }

    /// Parameter count per layer: `fan_in * fan_out + fan_out`.
    pub fn layer_param_sizes(&self) -> Vec<usize> {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1] + w[1]).collect()
    }

    pub fn param_len(&self) -> usize {
        self.layer_param_sizes().iter().sum()
    }

    /// Uniform in `[-s, s]` with `s = 1/sqrt(fan_in)` per layer.
    pub fn init_params(&self, rng: &mut impl Rng) -> Vector {
        let mut z = Vec::with_capacity(self.param_len());
        for w in self.layer_sizes.windows(2) {
            let s = 1.0 / (w[0] as f64).sqrt();
            for _ in 0..(w[0] * w[1] + w[1]) {
                z.push(rng.random_range(-s..=s));
            }
        }
        DVector::from_vec(z)
    }

    pub fn unflatten(&self, z: &Vector) -> Result<Vec<Layer>> {
        self.check_len(z)?;
        let mut off = 0;
        Ok(self
            .layer_sizes
            .windows(2)
            .map(|w| {
                let (fi, fo) = (w[0], w[1]);
                let weights = DMatrix::from_row_slice(fo, fi, &z.as_slice()[off..off + fi * fo]);
                off += fi * fo;
                let bias = z.rows(off, fo).into_owned();
                off += fo;
                Layer { weights, bias }
            })
            .collect())
    }

    pub fn flatten(&self, layers: &[Layer]) -> Result<Vector> {
        if layers.len() != self.n_layers() {
            return Err(Error::arg("layer count mismatch"));
        }
        let mut z = Vec::with_capacity(self.param_len());
        for (l, w) in layers.iter().zip(self.layer_sizes.windows(2)) {
            if l.weights.shape() != (w[1], w[0]) || l.bias.len() != w[1] {
                return Err(Error::arg("layer shape mismatch"));
            }
            for r in 0..w[1] {
                z.extend(l.weights.row(r).iter());
            }
            z.extend(l.bias.iter());
        }
        Ok(DVector::from_vec(z))
    }

    fn check_len(&self, z: &Vector) -> Result<()> {
        if z.len() != self.param_len() {
            return Err(Error::arg(format!(
                "parameter vector has {} entries, model expects {}",
                z.len(),
                self.param_len()
            )));
        }
        Ok(())
    }

    /// Output logits for input `x`.
    pub fn forward(&self, z: &Vector, x: &[f64]) -> Result<Vec<f64>> {
        self.check_len(z)?;
        Ok(self.forward_cached(z.as_slice(), x).pop().expect("at least one layer"))
    }

    /// Activations per layer: input, hidden post-ReLU values, final logits.
    fn forward_cached(&self, z: &[f64], x: &[f64]) -> Vec<Vec<f64>> {
        let mut acts = vec![x.to_vec()];
        let mut off = 0;
        let last = self.n_layers() - 1;
        for (l, w) in self.layer_sizes.windows(2).enumerate() {
            let (fi, fo) = (w[0], w[1]);
            let a = acts.last().expect("nonempty");
            let bias = &z[off + fi * fo..off + fi * fo + fo];
            let out: Vec<f64> = (0..fo)
                .map(|r| {
                    let row = &z[off + r * fi..off + (r + 1) * fi];
                    let pre = row.iter().zip(a).map(|(p, q)| p * q).sum::<f64>() + bias[r];
                    if l == last {
                        pre
                    } else {
                        pre.max(0.0)
                    }
                })
                .collect();
            off += fi * fo + fo;
            acts.push(out);
        }
        acts
    }

    pub fn predict(&self, z: &Vector, x: &[f64]) -> Result<usize> {
        let logits = self.forward(z, x)?;
        Ok(argmax(&logits))
    }

    /// Softmax NLL of one sample, accumulating its gradient into `grad`.
    fn sample_loss_grad(&self, z: &[f64], x: &[f64], h: usize, weight: f64, grad: &mut [f64]) -> f64 {
        let acts = self.forward_cached(z, x);
        let logits = acts.last().expect("nonempty");
        let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let sum_exp: f64 = logits.iter().map(|v| (v - m).exp()).sum();
        let lse = m + sum_exp.ln();
        let loss = lse - logits[h];

        let mut delta: Vec<f64> = logits.iter().map(|v| (v - lse).exp()).collect();
        delta[h] -= 1.0;

        let sizes = self.layer_param_sizes();
        let mut ends: Vec<usize> = sizes
            .iter()
            .scan(0, |acc, s| {
                *acc += s;
                Some(*acc)
            })
            .collect();
        for l in (0..self.n_layers()).rev() {
            let (fi, fo) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let end = ends.pop().expect("one end per layer");
            let off = end - sizes[l];
            let a_prev = &acts[l];
            for r in 0..fo {
                let d = weight * delta[r];
                if d != 0.0 {
                    for c in 0..fi {
                        grad[off + r * fi + c] += d * a_prev[c];
                    }
                    grad[off + fi * fo + r] += d;
                }
            }
            if l > 0 {
                let mut back = vec![0.0; fi];
                for r in 0..fo {
                    if delta[r] != 0.0 {
                        for c in 0..fi {
                            back[c] += z[off + r * fi + c] * delta[r];
                        }
                    }
                }
                // ReLU derivative from the post-activation value
                for (b, a) in back.iter_mut().zip(a_prev) {
                    if *a <= 0.0 {
                        *b = 0.0;
                    }
                }
                delta = back;
            }
        }
        loss
    }

    /// Mean softmax NLL over `batch` (indices into `data`) and its gradient,
    /// without the regularizer.
    pub fn data_loss_grad(&self, z: &Vector, data: &Dataset, batch: &[usize]) -> Result<(f64, Vector)> {
        self.check_len(z)?;
        if batch.is_empty() {
            return Err(Error::arg("empty minibatch"));
        }
        let mut grad = vec![0.0; z.len()];
        let w = 1.0 / batch.len() as f64;
        let mut loss = 0.0;
        for &i in batch {
            let h = data.labels[i];
            if h >= self.n_classes() {
                return Err(Error::arg(format!("label {h} outside the model's {} classes", self.n_classes())));
            }
            loss += self.sample_loss_grad(z.as_slice(), &data.inputs[i], h, w, &mut grad);
        }
        Ok((loss * w, DVector::from_vec(grad)))
    }

    /// Mean loss plus `R(z)` and the exact gradient of that sum.
    pub fn loss_grad(&self, z: &Vector, data: &Dataset, batch: &[usize]) -> Result<(f64, Vector)> {
        let (l, g) = self.data_loss_grad(z, data, batch)?;
        Ok((l + self.reg_value(z), g + self.reg_grad(z)))
    }

    /// As [`MlpModel::loss_grad`] for explicit `(x, h)` pairs.
    pub fn loss_grad_pairs(&self, z: &Vector, batch: &[(Vec<f64>, usize)]) -> Result<(f64, Vector)> {
        let (inputs, labels): (Vec<_>, Vec<_>) = batch.iter().cloned().unzip();
        let data = Dataset {
            inputs,
            labels,
            n_classes: self.n_classes(),
        };
        self.loss_grad(z, &data, &data.indices())
    }

    pub fn reg_value(&self, z: &Vector) -> f64 {
        0.5 * self.nu * z.norm_squared()
    }

    pub fn reg_grad(&self, z: &Vector) -> Vector {
        z * self.nu
    }

    /// Fraction of misclassified samples among `idx`.
    pub fn error_rate(&self, z: &Vector, data: &Dataset, idx: &[usize]) -> Result<f64> {
        self.check_len(z)?;
        if idx.is_empty() {
            return Ok(0.0);
        }
        let wrong = idx
            .iter()
            .filter(|&&i| argmax(&self.forward_cached(z.as_slice(), &data.inputs[i]).pop().unwrap()) != data.labels[i])
            .count();
        Ok(wrong as f64 / idx.len() as f64)
    }
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// The full-data objective `mean loss + R` of a network as an [`Objective`].
#[derive(Clone, Debug)]
pub struct MlpObjective {
    pub model: MlpModel,
    pub data: Arc<Dataset>,
    pub indices: Vec<usize>,
}

impl Objective for MlpObjective {
    fn dim(&self) -> usize {
        self.model.param_len()
    }
    fn value(&self, z: &Vector) -> f64 {
        self.model.loss_grad(z, &self.data, &self.indices).map_or(f64::INFINITY, |(l, _)| l)
    }
    fn gradient(&self, z: &Vector) -> Option<Vector> {
        self.model.loss_grad(z, &self.data, &self.indices).ok().map(|(_, g)| g)
    }
    fn lower_bound(&self) -> f64 {
        0.0
    }
    fn is_smooth(&self) -> bool {
        // ReLU kinks have measure zero; treated as smooth
        true
    }
    fn label(&self) -> String {
        format!("mlp{:?}", self.model.layer_sizes)
    }
}
