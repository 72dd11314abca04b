//! Envelope of |z| under the quadratic potential, compared with the Huber
//! function, and the same envelope under the bounded-domain potentials.

use std::sync::Arc;

use aniso::models::{TestFunction, TestFunctionKind};
use aniso::potentials::{LegendrePotential, PotentialKind};
use aniso::prox::{envelope_scan_grid, huber, ProxProblem};
use nalgebra::dvector;

fn main() -> aniso::Result<()> {
    let vs: Vec<_> = (0..=12).map(|i| dvector![-3.0 + 0.5 * i as f64]).collect();
    let f = Arc::new(TestFunction::scalar(TestFunctionKind::Abs));
    let kinds = [PotentialKind::Quad, PotentialKind::Tan, PotentialKind::Log];
    let mut columns = Vec::new();
    for kind in kinds {
        let prob = ProxProblem::new(f.clone(), Arc::new(LegendrePotential::new(kind, 1)), 1.0)?;
        columns.push(envelope_scan_grid(&prob, &vs, 1.5, 301, 3)?);
    }
    println!("{:>6} {:>10} {:>10} {:>10} {:>10}", "v", "huber", "quad", "tan", "log");
    for (i, v) in vs.iter().enumerate() {
        println!(
            "{:>6.2} {:>10.6} {:>10.6} {:>10.6} {:>10.6}",
            v[0],
            huber(v[0]),
            columns[0][i].envelope,
            columns[1][i].envelope,
            columns[2][i].envelope
        );
    }
    Ok(())
}
