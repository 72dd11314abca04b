//! Deterministic consensus on a diagonal quadratic with four workers. With
//! the quad potential and tau = lambda / M the consensus step is the mean of
//! the worker copies. Workers start at scattered points.

use std::sync::Arc;

use aniso::distributed::{train, ObjectiveTask, TrainerConfig};
use aniso::models::{Objective, QuadraticObjective};
use aniso::potentials::{PotentialKind, PotentialSpec};
use nalgebra::dvector;

fn main() -> aniso::Result<()> {
    let q = QuadraticObjective::diagonal(&[1.0, 3.0], &[0.5, -0.2])?;
    let target = q.minimizer();
    let f: Arc<dyn Objective> = Arc::new(q);
    for kind in [PotentialKind::Quad, PotentialKind::Tan, PotentialKind::Log] {
        let cfg = TrainerConfig {
            workers: 4,
            potential: PotentialSpec::new(kind),
            lambda: 0.05,
            tau: 0.05 / 4.0,
            sigma: 0.02,
            kappa: 0.5,
            iterations: 3000,
            full_batch: true,
            log_every: 1000,
            init_spread: 0.3,
            ..Default::default()
        };
        let task = ObjectiveTask {
            f: f.clone(),
            start: dvector![0.0, 0.0],
        };
        let out = train(&cfg, &task)?;
        for row in &out.record.rows {
            println!("{kind:<5} iter {:>5}  F {:.3e}  gap {:.3e}", row.iter, row.f, row.consensus_gap);
        }
        println!("{kind:<5} |u - u*| = {:.3e}", (&out.u - &target).amax());
    }
    Ok(())
}
