//! Trains the two-Gaussians classifier with four workers under every
//! potential and prints final metrics.
//!
//! Usage: `cargo run --release --example toy_training [sigma] [lambda] [noise]`

use std::sync::Arc;
use std::time::Instant;

use aniso::distributed::{train, MlpTask, TrainerConfig};
use aniso::models::{synth_dataset, MlpModel, SynthKind};
use aniso::potentials::{PotentialKind, PotentialSpec};

fn main() -> aniso::Result<()> {
    let args: Vec<f64> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let sigma = args.first().copied().unwrap_or(0.05);
    let lambda = args.get(1).copied().unwrap_or(0.1);
    let noise = args.get(2).copied().unwrap_or(0.5);

    let data = Arc::new(synth_dataset(SynthKind::TwoGaussians, 200, noise, 1)?);
    let task = MlpTask {
        model: MlpModel::new(vec![2, 16, 2], 1e-4)?,
        data,
    };
    println!("{:<8} {:>10} {:>10} {:>12} {:>8}", "phi", "loss", "error", "gap", "secs");
    for kind in PotentialKind::ALL {
        let cfg = TrainerConfig {
            potential: PotentialSpec::new(kind),
            lambda,
            sigma,
            tau: sigma,
            kappa: 0.9,
            iterations: 2000,
            seed: 3,
            ..Default::default()
        };
        let t0 = Instant::now();
        let out = train(&cfg, &task)?;
        let last = out.record.last().expect("final row");
        println!(
            "{:<8} {:>10.5} {:>10.4} {:>12.3e} {:>8.2}",
            kind.name(),
            last.train_loss,
            last.train_error.unwrap_or(f64::NAN),
            last.consensus_gap,
            t0.elapsed().as_secs_f64()
        );
    }
    Ok(())
}
