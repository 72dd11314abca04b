//! Simulated synchronous consensus training.
//!
//! `M` workers each hold a copy `z_j` of the parameters and a momentum
//! buffer. Each round first moves the consensus variable
//!
//! ```text
//! u' = u - tau (1/lambda) sum_j grad phi(u - z_j)
//! ```
//!
//! and then lets every worker take a Nesterov step on its minibatch
//! estimate of
//!
//! ```text
//! Delta_j(z) = delta_j(z) + grad R(z) - (1/lambda) grad phi(u' - z).
//! ```
//!
//! With the quadratic potential and full data overlap this is momentum
//! EASGD. All randomness comes from per-worker streams keyed by
//! `(seed, worker, iteration)`, so records do not depend on the thread count.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DVector;
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::models::{shard_indices, Dataset, MlpModel, Objective, ShardMode};
use crate::potentials::{Legendre, LayerScaledPotential, PotentialSpec};
use crate::prox::{prox_local, ProxProblem};
use crate::record::{TrainRecord, TrainRow};
use crate::splitting::backtrack;
use crate::Vector;

/// Halvings allowed in the momentum feasibility backstop.
pub const BACKSTOP_HALVINGS: usize = 50;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainerConfig {
    pub workers: usize,
    pub potential: PotentialSpec,
    pub lambda: f64,
    pub tau: f64,
    pub sigma: f64,
    /// `sigma_t = sigma / (1 + sigma_decay t)`; 0 keeps it constant.
    pub sigma_decay: f64,
    pub kappa: f64,
    pub batch_size: usize,
    pub iterations: usize,
    pub seed: u64,
    pub shard_mode: ShardMode,
    /// Use the whole shard every round instead of sampling.
    pub full_batch: bool,
    /// Literal consensus step `u - tau sum_j grad phi(u - z_j)`.
    pub tau_includes_inv_lambda: bool,
    /// Evaluate worker deltas against `u^t` instead of `u^{t+1}`.
    pub delta_uses_stale_u: bool,
    /// Metrics cadence; the last round is always logged.
    pub log_every: usize,
    /// Envelope-gradient measure cadence (0 disables); only for models that
    /// expose an [`Objective`].
    pub envelope_every: usize,
    /// Worker thread count, 0 for the rayon default.
    pub threads: usize,
    /// Fill the `wall_ms` column.
    pub timing: bool,
    /// Worker copies start at `u^0` plus uniform noise in `[-s, s]` per
    /// coordinate, one stream per worker; 0 starts them all at `u^0`.
    pub init_spread: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        Self {
            workers: 4,
            potential: PotentialSpec::new(crate::potentials::PotentialKind::Quad),
            lambda: 0.1,
            tau: 0.005,
            sigma: 0.005,
            sigma_decay: 0.0,
            kappa: 0.9,
            batch_size: 20,
            iterations: 2000,
            seed: 0,
            shard_mode: ShardMode::FullOverlap,
            full_batch: false,
            tau_includes_inv_lambda: false,
            delta_uses_stale_u: false,
            log_every: 50,
            envelope_every: 0,
            threads: 0,
            timing: false,
            init_spread: 0.0,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::arg(m.to_string()));
        if self.workers == 0 {
            return bad("need at least one worker");
        }
        if !(self.lambda > 0.0 && self.tau > 0.0 && self.sigma > 0.0) {
            return bad("lambda, tau and sigma must be positive");
        }
        if !(0.0..1.0).contains(&self.kappa) {
            return bad("kappa must lie in [0, 1)");
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return bad("batch size and iteration count must be positive");
        }
        if !(self.sigma_decay >= 0.0) {
            return bad("sigma decay must be nonnegative");
        }
        if !(self.init_spread >= 0.0 && self.init_spread.is_finite()) {
            return bad("init spread must be nonnegative");
        }
        Ok(())
    }

    pub fn sigma_at(&self, t: usize) -> f64 {
        self.sigma / (1.0 + self.sigma_decay * t as f64)
    }
}

/// What a worker trains: per-sample losses to draw minibatches from, or a
/// deterministic function.
pub trait WorkerModel: Send + Sync {
    fn dim(&self) -> usize;

    /// Block sizes for the layer-scaled potential.
    fn layer_shapes(&self) -> Vec<usize>;

    /// Size of the sample universe that is sharded across workers.
    fn n_samples(&self) -> usize;

    /// Mean data-loss gradient over `batch` (without the regularizer).
    fn data_grad(&self, z: &Vector, batch: &[usize]) -> Result<Vector>;

    /// Mean data loss over `idx` plus `R(z)`.
    fn shard_objective(&self, z: &Vector, idx: &[usize]) -> Result<f64>;

    fn reg_grad(&self, z: &Vector) -> Vector;

    /// Loss and, for classifiers, error rate of `u` on the full set.
    fn train_metrics(&self, u: &Vector) -> Result<(f64, Option<f64>)>;

    fn init(&self, rng: &mut ChaCha8Rng) -> Vector;

    /// The per-copy objective whose envelope is monitored, if cheap enough.
    fn envelope_target(&self) -> Option<Arc<dyn Objective>> {
        None
    }
}

/// A network trained on a dataset.
#[derive(Clone, Debug)]
pub struct MlpTask {
    pub model: MlpModel,
    pub data: Arc<Dataset>,
}

impl WorkerModel for MlpTask {
    fn dim(&self) -> usize {
        self.model.param_len()
    }
    fn layer_shapes(&self) -> Vec<usize> {
        self.model.layer_param_sizes()
    }
    fn n_samples(&self) -> usize {
        self.data.len()
    }
    fn data_grad(&self, z: &Vector, batch: &[usize]) -> Result<Vector> {
        Ok(self.model.data_loss_grad(z, &self.data, batch)?.1)
    }
    fn shard_objective(&self, z: &Vector, idx: &[usize]) -> Result<f64> {
        Ok(self.model.loss_grad(z, &self.data, idx)?.0)
    }
    fn reg_grad(&self, z: &Vector) -> Vector {
        self.model.reg_grad(z)
    }
    fn train_metrics(&self, u: &Vector) -> Result<(f64, Option<f64>)> {
        let all = self.data.indices();
        let loss = self.model.data_loss_grad(u, &self.data, &all)?.0;
        Ok((loss, Some(self.model.error_rate(u, &self.data, &all)?)))
    }
    fn init(&self, rng: &mut ChaCha8Rng) -> Vector {
        self.model.init_params(rng)
    }
}

/// Every worker minimizes the same deterministic `f`, started at `start`.
#[derive(Clone, Debug)]
pub struct ObjectiveTask {
    pub f: Arc<dyn Objective>,
    pub start: Vector,
}

impl WorkerModel for ObjectiveTask {
    fn dim(&self) -> usize {
        self.f.dim()
    }
    fn layer_shapes(&self) -> Vec<usize> {
        vec![self.f.dim()]
    }
    fn n_samples(&self) -> usize {
        1
    }
    fn data_grad(&self, z: &Vector, _batch: &[usize]) -> Result<Vector> {
        self.f
            .gradient(z)
            .ok_or_else(|| Error::arg(format!("{} is not differentiable at the iterate", self.f.label())))
    }
    fn shard_objective(&self, z: &Vector, _idx: &[usize]) -> Result<f64> {
        Ok(self.f.value(z))
    }
    fn reg_grad(&self, z: &Vector) -> Vector {
        DVector::zeros(z.len())
    }
    fn train_metrics(&self, u: &Vector) -> Result<(f64, Option<f64>)> {
        Ok((self.f.value(u), None))
    }
    fn init(&self, _rng: &mut ChaCha8Rng) -> Vector {
        self.start.clone()
    }
    fn envelope_target(&self) -> Option<Arc<dyn Objective>> {
        Some(self.f.clone())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WorkerState {
    pub index: usize,
    pub z: Vector,
    pub velocity: Vector,
}

/// Seed of worker `j`'s stream at iteration `t` (splitmix64 finalizer over
/// the three keys).
pub fn stream_seed(seed: u64, worker: usize, iteration: usize) -> u64 {
    let mix = |mut x: u64| {
        x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        x ^ (x >> 31)
    };
    let a = mix(seed.wrapping_add(0x9e37_79b9_7f4a_7c15));
    let b = mix(a ^ (worker as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    mix(b ^ (iteration as u64).wrapping_add(1).wrapping_mul(0xd1b5_4a32_d192_ed03))
}

/// Uniform minibatch of `batch_size` distinct shard entries (the whole
/// shard when it is not larger), in draw order.
pub fn minibatch(seed: u64, worker: usize, iteration: usize, shard: &[usize], batch_size: usize) -> Vec<usize> {
    if batch_size >= shard.len() {
        return shard.to_vec();
    }
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(seed, worker, iteration));
    sample(&mut rng, shard.len(), batch_size).iter().map(|i| shard[i]).collect()
}

fn grad_of(phi: &dyn Legendre, w: &Vector) -> Result<Vector> {
    phi.gradient(w)
}

/// `Delta = delta + grad R(z) - (1/lambda) grad phi(u - z)` at `z` for the
/// given minibatch.
pub fn worker_delta(
    model: &dyn WorkerModel,
    phi: &dyn Legendre,
    lambda: f64,
    u: &Vector,
    z: &Vector,
    batch: &[usize],
) -> Result<Vector> {
    let coupling = grad_of(phi, &(u - z))? / lambda;
    Ok(model.data_grad(z, batch)? + model.reg_grad(z) - coupling)
}

/// Nesterov step `v' = kappa v - sigma Delta(z + kappa v)`, `z' = z + v'`.
/// The look-ahead momentum and then `v'` are halved until `u - .` stays in
/// the domain. Returns the number of halvings.
pub fn momentum_step(
    w: &mut WorkerState,
    u_next: &Vector,
    delta: impl Fn(&Vector) -> Result<Vector>,
    sigma: f64,
    kappa: f64,
    phi: &dyn Legendre,
) -> Result<usize> {
    let feasible = |p: &Vector| phi.in_domain((u_next - p).as_slice());
    let mut coast = &w.velocity * kappa;
    let mut halvings = 0;
    while !feasible(&(&w.z + &coast)) {
        halvings += 1;
        if halvings > BACKSTOP_HALVINGS {
            return Err(backstop_error(w.index));
        }
        coast *= 0.5;
    }
    let d = delta(&(&w.z + &coast))?;
    let mut v = coast - d * sigma;
    let mut k = 0;
    while !feasible(&(&w.z + &v)) {
        k += 1;
        if k > BACKSTOP_HALVINGS {
            return Err(backstop_error(w.index));
        }
        v *= 0.5;
    }
    w.z += &v;
    w.velocity = v;
    Ok(halvings + k)
}

fn backstop_error(worker: usize) -> Error {
    Error::LineSearch {
        halvings: BACKSTOP_HALVINGS,
        context: format!(" in the momentum backstop of worker {worker}"),
    }
}

/// `u' = u - tau c sum_j grad phi(u - z_j)` with `c = 1/lambda` (1 when
/// `literal`), line-searched on `tau` so that the coupling term stays finite
/// and does not increase. Returns `u'` and the accepted step.
pub fn consensus_update(
    u: &Vector,
    zs: &[Vector],
    tau: f64,
    phi: &dyn Legendre,
    lambda: f64,
    literal: bool,
) -> Result<(Vector, f64)> {
    let coef = if literal { 1.0 } else { 1.0 / lambda };
    let mut g = DVector::zeros(u.len());
    for z in zs {
        g += grad_of(phi, &(u - z))?;
    }
    let dir = g * -coef;
    let coupling = |v: &Vector| -> f64 { zs.iter().map(|z| phi.raw_value((v - z).as_slice())).sum() };
    let c0 = coupling(u);
    let (t, _) = backtrack(c0, tau, |t| coupling(&(u + &dir * t)))?;
    Ok((u + dir * t, t))
}

/// `max_j |u - z_j|_inf`.
pub fn consensus_gap(u: &Vector, zs: &[Vector]) -> f64 {
    zs.iter().map(|z| (u - z).amax()).fold(0.0, f64::max)
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub record: TrainRecord,
    pub u: Vector,
    pub workers: Vec<WorkerState>,
    /// Logged objective values that were infinite or NaN.
    pub nonfinite_objectives: usize,
    /// Step halvings taken by consensus and momentum backstops.
    pub halvings: usize,
}

/// The per-worker potential for `model` under `cfg`.
pub fn worker_potential(cfg: &TrainerConfig, model: &dyn WorkerModel) -> Result<LayerScaledPotential> {
    cfg.potential.build_layered(&model.layer_shapes())
}

/// Runs `cfg.iterations` synchronous rounds.
pub fn train(cfg: &TrainerConfig, model: &dyn WorkerModel) -> Result<TrainOutcome> {
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| Error::arg(format!("cannot build thread pool: {e}")))?;
    pool.install(|| train_in_pool(cfg, model))
}

fn train_in_pool(cfg: &TrainerConfig, model: &dyn WorkerModel) -> Result<TrainOutcome> {
    let phi = worker_potential(cfg, model)?;
    let shards = shard_indices(model.n_samples(), cfg.workers, cfg.shard_mode)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, usize::MAX, usize::MAX));
    let mut u = model.init(&mut init_rng);
    if u.len() != model.dim() {
        return Err(Error::arg("initial point has the wrong dimension"));
    }
    let mut workers: Vec<WorkerState> = (0..cfg.workers)
        .map(|j| {
            let mut z = u.clone();
            if cfg.init_spread > 0.0 {
                let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(cfg.seed, j, usize::MAX));
                z.iter_mut().for_each(|x| *x += rng.random_range(-cfg.init_spread..=cfg.init_spread));
                if !phi.in_domain((&u - &z).as_slice()) {
                    return Err(Error::arg("init spread leaves the domain of the potential"));
                }
            }
            Ok(WorkerState {
                index: j,
                z,
                velocity: DVector::zeros(u.len()),
            })
        })
        .collect::<Result<_>>()?;
    let envelope = match (cfg.envelope_every, model.envelope_target()) {
        (0, _) | (_, None) => None,
        (_, Some(f)) => Some(ProxProblem::new(f, Arc::new(phi.clone()), cfg.lambda)?),
    };

    let started = Instant::now();
    let mut record = TrainRecord::new();
    let mut nonfinite = 0;
    let mut halvings = 0;
    let log = |t: usize, u: &Vector, workers: &[WorkerState], record: &mut TrainRecord, nonfinite: &mut usize| -> Result<()> {
        let mut f = 0.0;
        for (w, shard) in workers.iter().zip(&shards) {
            f += model.shard_objective(&w.z, shard)? + phi.raw_value((u - &w.z).as_slice()) / cfg.lambda;
        }
        if !f.is_finite() {
            *nonfinite += 1;
        }
        let (train_loss, train_error) = model.train_metrics(u)?;
        let zs: Vec<Vector> = workers.iter().map(|w| w.z.clone()).collect();
        let envelope_grad_norm = match &envelope {
            Some(p) if t.is_multiple_of(cfg.envelope_every) || t == cfg.iterations => {
                let r = prox_local(p, u, None).map_err(|e| e.at_iteration(t))?;
                r.envelope_gradient.map(|g| g.norm())
            }
            _ => None,
        };
        record.push(TrainRow {
            iter: t,
            f,
            train_loss,
            train_error,
            consensus_gap: consensus_gap(u, &zs),
            envelope_grad_norm,
            wall_ms: cfg.timing.then(|| started.elapsed().as_secs_f64() * 1e3),
        });
        Ok(())
    };
    log(0, &u, &workers, &mut record, &mut nonfinite)?;

    for t in 0..cfg.iterations {
        let zs: Vec<Vector> = workers.iter().map(|w| w.z.clone()).collect();
        let (u_next, step) = consensus_update(&u, &zs, cfg.tau, &phi, cfg.lambda, cfg.tau_includes_inv_lambda)
            .map_err(|e| e.at_iteration(t))?;
        halvings += (cfg.tau / step).log2().round() as usize;
        let u_delta = if cfg.delta_uses_stale_u { &u } else { &u_next };
        let sigma = cfg.sigma_at(t);
        let results: Vec<Result<usize>> = workers
            .par_iter_mut()
            .zip(shards.par_iter())
            .map(|(w, shard)| {
                let batch = if cfg.full_batch {
                    shard.clone()
                } else {
                    minibatch(cfg.seed, w.index, t, shard, cfg.batch_size)
                };
                let delta = |z: &Vector| worker_delta(model, &phi, cfg.lambda, u_delta, z, &batch);
                momentum_step(w, &u_next, delta, sigma, cfg.kappa, &phi)
            })
            .collect();
        for r in results {
            halvings += r.map_err(|e| e.at_iteration(t))?;
        }
        u = u_next;
        let it = t + 1;
        if it % cfg.log_every.max(1) == 0 || it == cfg.iterations {
            log(it, &u, &workers, &mut record, &mut nonfinite)?;
        }
    }
    Ok(TrainOutcome {
        record,
        u,
        workers,
        nonfinite_objectives: nonfinite,
        halvings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{synth_dataset, QuadraticObjective, SynthKind};
    use crate::potentials::{LegendrePotential, PotentialKind};
    use nalgebra::dvector;

    fn pot(kind: PotentialKind) -> LegendrePotential {
        LegendrePotential::new(kind, 1)
    }

    #[test]
    fn delta_examples() {
        // scalar toy: delta 0.5, grad R 0.1, coupling 0.2
        #[derive(Debug)]
        struct Toy;
        impl WorkerModel for Toy {
            fn dim(&self) -> usize {
                1
            }
            fn layer_shapes(&self) -> Vec<usize> {
                vec![1]
            }
            fn n_samples(&self) -> usize {
                1
            }
            fn data_grad(&self, _: &Vector, _: &[usize]) -> Result<Vector> {
                Ok(dvector![0.5])
            }
            fn shard_objective(&self, _: &Vector, _: &[usize]) -> Result<f64> {
                Ok(0.0)
            }
            fn reg_grad(&self, _: &Vector) -> Vector {
                dvector![0.1]
            }
            fn train_metrics(&self, _: &Vector) -> Result<(f64, Option<f64>)> {
                Ok((0.0, None))
            }
            fn init(&self, _: &mut ChaCha8Rng) -> Vector {
                dvector![0.0]
            }
        }
        // quad: (1/lambda) (u - z) = 0.2 with lambda = 1
        let d = worker_delta(&Toy, &pot(PotentialKind::Quad), 1.0, &dvector![0.2], &dvector![0.0], &[0]).unwrap();
        assert!((d[0] - 0.4).abs() < 1e-15);
    }

    #[test]
    fn delta_zero_at_critical_consensus() {
        let f: Arc<dyn Objective> = Arc::new(QuadraticObjective::diagonal(&[2.0], &[0.7]).unwrap());
        let task = ObjectiveTask { f, start: dvector![0.7] };
        let d = worker_delta(&task, &pot(PotentialKind::Tan), 0.1, &dvector![0.7], &dvector![0.7], &[0]).unwrap();
        assert_eq!(d[0], 0.0);
    }

    #[test]
    fn momentum_examples() {
        let phi = pot(PotentialKind::Quad);
        let mut w = WorkerState {
            index: 0,
            z: dvector![1.0],
            velocity: dvector![0.5],
        };
        momentum_step(&mut w, &dvector![0.0], |_| Ok(dvector![0.0]), 0.1, 0.9, &phi).unwrap();
        assert_eq!((w.z[0], w.velocity[0]), (1.45, 0.45));

        // kappa = 0 is a plain step
        let mut w = WorkerState {
            index: 0,
            z: dvector![1.0],
            velocity: dvector![3.0],
        };
        momentum_step(&mut w, &dvector![0.0], |z| Ok(z * 2.0), 0.1, 0.0, &phi).unwrap();
        assert!((w.z[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn momentum_matches_scalar_recursion() {
        // f(z) = 1.5 z^2, quad potential, fixed u = 0.3
        let (a, lambda, u, sigma, kappa) = (3.0, 0.5, 0.3, 0.05, 0.9);
        let phi = pot(PotentialKind::Quad);
        let mut w = WorkerState {
            index: 0,
            z: dvector![2.0],
            velocity: dvector![0.0],
        };
        let (mut z, mut v) = (2.0f64, 0.0f64);
        for _ in 0..200 {
            let grad = |y: &Vector| Ok(dvector![a * y[0] - (u - y[0]) / lambda]);
            momentum_step(&mut w, &dvector![u], grad, sigma, kappa, &phi).unwrap();
            let y = z + kappa * v;
            v = kappa * v - sigma * (a * y - (u - y) / lambda);
            z += v;
        }
        assert!((w.z[0] - z).abs() < 1e-15);
    }

    #[test]
    fn momentum_backstop_keeps_feasible() {
        let phi = pot(PotentialKind::Log);
        let mut w = WorkerState {
            index: 0,
            z: dvector![0.0],
            velocity: dvector![0.0],
        };
        let h = momentum_step(&mut w, &dvector![0.0], |_| Ok(dvector![-30.0]), 0.1, 0.5, &phi).unwrap();
        assert!(h >= 2);
        assert!(phi.in_domain(&[-w.z[0]]));
    }

    #[test]
    fn consensus_examples() {
        let q = pot(PotentialKind::Quad);
        for m in [2usize, 4, 8] {
            let zs: Vec<Vector> = (0..m).map(|j| dvector![j as f64 * 0.7 - 1.0]).collect();
            let mean = zs.iter().map(|z| z[0]).sum::<f64>() / m as f64;
            let lambda = 0.2;
            let (u, _) = consensus_update(&dvector![0.4], &zs, lambda / m as f64, &q, lambda, false).unwrap();
            assert!((u[0] - mean).abs() <= 1e-12);
        }
        let same = vec![dvector![0.3]; 3];
        assert_eq!(consensus_update(&dvector![0.3], &same, 0.1, &q, 1.0, false).unwrap().0[0], 0.3);
        let ls = pot(PotentialKind::LogSep);
        let (u, _) = consensus_update(&dvector![0.0], &[dvector![0.5], dvector![-0.5]], 0.1, &ls, 1.0, false).unwrap();
        assert_eq!(u[0], 0.0);
    }

    #[test]
    fn gap_examples() {
        let u = dvector![1.0, 2.0];
        assert_eq!(consensus_gap(&u, &[u.clone(), u.clone()]), 0.0);
        assert_eq!(consensus_gap(&u, &[dvector![1.3, 2.0], u.clone()]), 0.30000000000000004);
    }

    #[test]
    fn streams_are_distinct_and_stable() {
        let a = minibatch(7, 0, 3, &(0..50).collect::<Vec<_>>(), 5);
        let b = minibatch(7, 1, 3, &(0..50).collect::<Vec<_>>(), 5);
        assert_ne!(a, b);
        assert_eq!(a, minibatch(7, 0, 3, &(0..50).collect::<Vec<_>>(), 5));
        assert_eq!(minibatch(7, 0, 3, &[4, 5], 5), vec![4, 5]);
    }

    #[test]
    fn deterministic_quadratic_reaches_consensus() {
        let f: Arc<dyn Objective> = Arc::new(QuadraticObjective::diagonal(&[1.0, 3.0], &[0.5, -0.2]).unwrap());
        let task = ObjectiveTask {
            f: f.clone(),
            start: dvector![0.0, 0.0],
        };
        let cfg = TrainerConfig {
            workers: 4,
            potential: PotentialSpec::new(PotentialKind::Quad),
            lambda: 0.05,
            tau: 0.05 / 4.0,
            sigma: 0.04,
            kappa: 0.5,
            iterations: 3000,
            full_batch: true,
            log_every: 500,
            envelope_every: 500,
            init_spread: 0.2,
            ..Default::default()
        };
        let out = train(&cfg, &task).unwrap();
        assert!(out.record.rows[0].consensus_gap > 0.1);
        let last = out.record.last().unwrap();
        assert!(last.consensus_gap <= 1e-8);
        assert!(f.gradient(&out.u).unwrap().norm() <= 1e-8);
        assert!(last.envelope_grad_norm.unwrap() <= 1e-8);
    }

    #[test]
    fn single_worker_without_coupling_is_sgd() {
        let data = Arc::new(synth_dataset(SynthKind::TwoGaussians, 40, 0.5, 1).unwrap());
        let model = MlpModel::new(vec![2, 4, 2], 1e-4).unwrap();
        let task = MlpTask {
            model: model.clone(),
            data: data.clone(),
        };
        let cfg = TrainerConfig {
            workers: 1,
            lambda: 1e12,
            kappa: 0.0,
            sigma: 0.1,
            batch_size: 5,
            iterations: 100,
            seed: 9,
            ..Default::default()
        };
        let out = train(&cfg, &task).unwrap();
        let mut z = model.init_params(&mut ChaCha8Rng::seed_from_u64(stream_seed(9, usize::MAX, usize::MAX)));
        for t in 0..100 {
            let b = minibatch(9, 0, t, &data.indices(), 5);
            z -= model.loss_grad(&z, &data, &b).unwrap().1 * 0.1;
        }
        assert!((&out.workers[0].z - z).amax() <= 1e-6);
    }

    #[test]
    fn thread_count_does_not_change_the_record() {
        let data = Arc::new(synth_dataset(SynthKind::TwoMoons, 60, 0.1, 2).unwrap());
        let task = MlpTask {
            model: MlpModel::new(vec![2, 8, 2], 1e-4).unwrap(),
            data,
        };
        let run = |threads| {
            let cfg = TrainerConfig {
                potential: "log".parse().unwrap(),
                iterations: 60,
                log_every: 10,
                sigma: 0.05,
                tau: 0.005,
                threads,
                ..Default::default()
            };
            train(&cfg, &task).unwrap().record.to_csv_string()
        };
        let one = run(1);
        assert_eq!(one, run(3));
    }
}
