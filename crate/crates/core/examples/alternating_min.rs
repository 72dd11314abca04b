//! Alternating minimization of the splitting model for -cos with the tan and
//! log potentials, reporting the splitting and envelope residuals.
//!
//! Usage: `cargo run --release --example alternating_min [u0]`

use std::sync::Arc;

use aniso::models::{TestFunction, TestFunctionKind};
use aniso::potentials::{LegendrePotential, PotentialKind};
use aniso::splitting::{alternate_min, AltMinOptions, Coupling, GTerm, SplittingProblem, SplittingState};
use nalgebra::dvector;

fn main() -> aniso::Result<()> {
    let u0: f64 = std::env::args().nth(1).and_then(|a| a.parse().ok()).unwrap_or(2.5);
    for kind in [PotentialKind::Tan, PotentialKind::Log] {
        let prob = SplittingProblem::new(
            Arc::new(TestFunction::scalar(TestFunctionKind::NegCos)),
            GTerm::Zero,
            Coupling::stacked(1, 1)?,
            Arc::new(LegendrePotential::new(kind, 1)),
            0.1,
        )?;
        let opts = AltMinOptions {
            tau: 0.05,
            sigma: 0.05,
            envelope_every: 100,
            ..Default::default()
        };
        let out = alternate_min(&prob, SplittingState::consistent(&prob, dvector![u0]), &opts)?;
        println!(
            "{kind}: {} iterations, u = {:.3e}, r_u = {:.2e}, r_z = {:.2e}, envelope residual = {:.2e}",
            out.iterations,
            out.state.u[0],
            out.residuals.r_u,
            out.residuals.r_z.unwrap_or(f64::NAN),
            out.residuals.envelope_residual.unwrap_or(f64::NAN)
        );
    }
    Ok(())
}
