//! Runs the admissibility checks on every potential in three dimensions.

use aniso::potentials::{check_assumptions, LegendrePotential, PotentialKind, SampleSpec};

fn main() {
    for kind in PotentialKind::ALL {
        let p = LegendrePotential::new(kind, 3);
        let report = check_assumptions(&p, &SampleSpec::default());
        println!("{report}");
    }
}
