//! Checks that the local prox of a smooth function solves
//! z + grad phi*(lambda grad f(z)) = v.

use std::sync::Arc;

use aniso::models::{TestFunction, TestFunctionKind};
use aniso::potentials::{LegendrePotential, PotentialKind};
use aniso::prox::{prox_identity_residual, prox_local, ProxProblem};
use nalgebra::dvector;

fn main() -> aniso::Result<()> {
    let f = Arc::new(TestFunction::scalar(TestFunctionKind::DoubleWell));
    for kind in [PotentialKind::Quad, PotentialKind::Tan, PotentialKind::Log] {
        let prob = ProxProblem::new(f.clone(), Arc::new(LegendrePotential::new(kind, 1)), 0.1)?;
        for v in [-1.5, -0.3, 0.4, 1.2] {
            let v = dvector![v];
            let z = prox_local(&prob, &v, None)?.z()[0];
            let r = prox_identity_residual(&prob, &v)?;
            println!("{kind:<4} v = {:>5.2}  z = {z:>9.6}  identity residual {r:.1e}", v[0]);
        }
    }
    Ok(())
}
