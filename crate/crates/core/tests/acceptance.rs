//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any
//! failure. Tolerances are pinned in the constants below.

use std::process::ExitCode;
use std::sync::Arc;
use std::time::{Duration, Instant};

use aniso::distributed::{consensus_update, train, MlpTask, ObjectiveTask, TrainerConfig};
use aniso::models::{synth_dataset, MlpModel, Objective, QuadraticObjective, ShardMode, SynthKind, TestFunction, TestFunctionKind};
use aniso::oracle::{finite_diff_gradient, GridSpec};
use aniso::potentials::{
    check_assumptions, conjugate_gradient, sample_in_domain, Assumption, Legendre, LegendrePotential, PotentialKind,
    PotentialSpec, SampleSpec,
};
use aniso::prox::{
    envelope_scan_grid, grid_around, huber, prox_grid, prox_identity_residual, ProxProblem, ProxSolver,
};
use aniso::splitting::{alternate_min, block_mean, u_median, AltMinOptions, Coupling, GTerm, SplittingProblem, SplittingState};
use aniso::{Error, Vector};
use nalgebra::{dvector, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = std::result::Result<String, String>;

const FD_STEP: f64 = 1e-4;
const ORACLE_RADIUS: f64 = 1.5;
const ORACLE_POINTS: usize = 301;
const ORACLE_REFINEMENTS: usize = 4;

const C1_GRID_TOL: f64 = 1e-3;
const C1_HUBER_TOL: f64 = 1e-6;
const C1_BUDGET: Duration = Duration::from_secs(60);
const C2_TOL: f64 = 1e-6;
const C3_SPLIT_TOL: f64 = 1e-8;
const C3_ENVELOPE_TOL: f64 = 1e-6;
const C3_FD_TOL: f64 = 1e-4;
const C4_TOL: f64 = 1e-8;
const C5_TOL: f64 = 1e-8;
const C6_MEAN_TOL: f64 = 1e-12;
const C7_TOL: f64 = 1e-8;
const C7_MAX_ITER: usize = 5000;
const C7_INIT_SPREAD: f64 = 0.3;
const C8_MAX_ERROR: f64 = 0.05;
const C8_MAX_GAP: f64 = 0.1;
const C8_BUDGET: Duration = Duration::from_secs(300);
const C10_MONOTONE_SLACK: f64 = 1e-12;

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

fn problem(f: TestFunctionKind, phi: PotentialKind, lambda: f64) -> ProxProblem {
    ProxProblem::new(
        Arc::new(TestFunction::scalar(f)),
        Arc::new(LegendrePotential::new(phi, 1)),
        lambda,
    )
    .expect("valid problem")
}

fn oracle_grid(v: &Vector) -> GridSpec {
    grid_around(v, ORACLE_RADIUS, ORACLE_POINTS, ORACLE_REFINEMENTS).expect("valid grid")
}

fn grid_envelope(p: &ProxProblem, v: &Vector) -> f64 {
    prox_grid(p, v, &oracle_grid(v)).map_or(f64::NAN, |r| r.envelope)
}

/// Worst relative gap between the analytic envelope gradient and central
/// differences of the grid envelope, over scan points with a unique prox.
fn gradient_law(p: &ProxProblem, vs: &[f64]) -> std::result::Result<(f64, usize, usize), String> {
    let mut worst: f64 = 0.0;
    let (mut used, mut skipped) = (0, 0);
    for &v in vs {
        let v = dvector![v];
        let r = prox_grid(p, &v, &oracle_grid(&v)).map_err(|e| format!("prox at {}: {e}", v[0]))?;
        let Some(g) = r.envelope_gradient else {
            skipped += 1;
            continue;
        };
        let fd = finite_diff_gradient(|x| grid_envelope(p, x), &v, FD_STEP)
            .map_err(|e| format!("stencil at {}: {e}", v[0]))?;
        worst = worst.max(rel_err(g[0], fd[0]));
        used += 1;
    }
    Ok((worst, used, skipped))
}

fn c1() -> Outcome {
    let start = Instant::now();
    let vs = linspace(-2.0, 2.0, 50);
    let mut worst: f64 = 0.0;
    let mut used = 0;
    let mut skipped = 0;
    for f in [TestFunctionKind::NegCos, TestFunctionKind::DoubleWell] {
        for phi in [PotentialKind::Quad, PotentialKind::Tan, PotentialKind::Log] {
            for lambda in [0.05, 0.1] {
                let (w, u, s) = gradient_law(&problem(f, phi, lambda), &vs)?;
                if w > C1_GRID_TOL {
                    return Err(format!("{f}/{phi}/lambda={lambda}: max rel err {w:.3e} > {C1_GRID_TOL:e}"));
                }
                worst = worst.max(w);
                used += u;
                skipped += s;
            }
        }
    }
    let (huber_worst, ..) = gradient_law(&problem(TestFunctionKind::Abs, PotentialKind::Quad, 1.0), &linspace(-3.0, 3.0, 50))?;
    if huber_worst > C1_HUBER_TOL {
        return Err(format!("Huber: max rel err {huber_worst:.3e} > {C1_HUBER_TOL:e}"));
    }
    let elapsed = start.elapsed();
    if elapsed > C1_BUDGET {
        return Err(format!("took {elapsed:.1?}, budget {C1_BUDGET:?}"));
    }
    Ok(format!(
        "{used} points (skipped {skipped} multivalued), max rel err {worst:.2e}; Huber {huber_worst:.2e}; {elapsed:.1?}"
    ))
}

fn c2() -> Outcome {
    let p = problem(TestFunctionKind::Abs, PotentialKind::Quad, 1.0);
    let vs: Vec<Vector> = linspace(-3.0, 3.0, 601).into_iter().map(|v| dvector![v]).collect();
    let rows = envelope_scan_grid(&p, &vs, ORACLE_RADIUS, ORACLE_POINTS, ORACLE_REFINEMENTS).map_err(|e| e.to_string())?;
    let mut worst_value: f64 = 0.0;
    for (v, row) in vs.iter().zip(&rows) {
        worst_value = worst_value.max((row.envelope - huber(v[0])).abs());
        let r = prox_grid(&p, v, &oracle_grid(v)).map_err(|e| e.to_string())?;
        let g = r.envelope_gradient.as_ref().ok_or("multivalued prox for abs")?;
        if g[0] != (v[0] - r.z()[0]) / 1.0 {
            return Err(format!("gradient {} != v - z at v = {}", g[0], v[0]));
        }
        if row.envelope_gradient.as_ref().map(|x| x[0]) != Some(g[0]) {
            return Err(format!("scan gradient differs from prox gradient at v = {}", v[0]));
        }
    }
    if worst_value > C2_TOL {
        return Err(format!("max |envelope - huber| = {worst_value:.3e} > {C2_TOL:e}"));
    }
    Ok(format!("601 points, max |envelope - huber| = {worst_value:.2e}, gradient = v - z exactly"))
}

fn c3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let opts = AltMinOptions {
        tau: 0.05,
        sigma: 0.05,
        tol: C3_SPLIT_TOL,
        max_iter: 100_000,
        exact_u: false,
        envelope_every: 0,
    };
    let mut converged = 0;
    let mut worst_env: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    for phi in [PotentialKind::Tan, PotentialKind::Log] {
        let prob = SplittingProblem::new(
            Arc::new(TestFunction::scalar(TestFunctionKind::NegCos)),
            GTerm::Zero,
            Coupling::stacked(1, 1).expect("coupling"),
            Arc::new(LegendrePotential::new(phi, 1)),
            0.1,
        )
        .map_err(|e| e.to_string())?;
        let prox = prob.prox_problem().map_err(|e| e.to_string())?;
        for _ in 0..10 {
            let u0 = rng.random_range(-3.0..3.0);
            let out = alternate_min(&prob, SplittingState::consistent(&prob, dvector![u0]), &opts)
                .map_err(|e| format!("{phi} from {u0}: {e}"))?;
            if !out.converged {
                continue;
            }
            converged += 1;
            let res = aniso::splitting::residuals(&prob, &out.state, Some(&ProxSolver::Local(Some(out.state.z.clone()))))
                .map_err(|e| e.to_string())?;
            let env = res.envelope_residual.ok_or("no envelope residual")?;
            let fd = finite_diff_gradient(|x| grid_envelope(&prox, x), &out.state.u, FD_STEP).map_err(|e| e.to_string())?;
            if env > C3_ENVELOPE_TOL || fd[0].abs() > C3_FD_TOL {
                return Err(format!(
                    "{phi} from {u0}: envelope residual {env:.3e}, finite-difference gradient {:.3e}",
                    fd[0]
                ));
            }
            worst_env = worst_env.max(env);
            worst_fd = worst_fd.max(fd[0].abs());
        }
    }
    if converged == 0 {
        return Err("no run converged".into());
    }
    Ok(format!(
        "{converged}/20 runs converged; max envelope residual {worst_env:.2e}, max |FD grid gradient| {worst_fd:.2e}"
    ))
}

fn c4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(44);
    let mut worst: f64 = 0.0;
    let mut count = 0;
    for f in [TestFunctionKind::Quadratic, TestFunctionKind::NegCos, TestFunctionKind::DoubleWell] {
        for phi in [PotentialKind::Quad, PotentialKind::Tan, PotentialKind::Log] {
            let p = problem(f, phi, 0.1);
            for _ in 0..20 {
                let v = dvector![rng.random_range(-2.0..2.0)];
                let r = prox_identity_residual(&p, &v).map_err(|e| format!("{f}/{phi} at {}: {e}", v[0]))?;
                if r > C4_TOL {
                    return Err(format!("{f}/{phi} at v = {}: residual {r:.3e}", v[0]));
                }
                worst = worst.max(r);
                count += 1;
            }
        }
    }
    Ok(format!("{count} solves, max |z_identity - z_prox| = {worst:.2e}"))
}

fn c5() -> Outcome {
    let mut worst: f64 = 0.0;
    for kind in PotentialKind::ALL {
        let p = LegendrePotential::new(kind, 3);
        for w in sample_in_domain(&p, 100, 0.9, 3.0, 55) {
            let back = conjugate_gradient(&p, &p.gradient(&w).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
            let err = (&back - &w).amax();
            if err > C5_TOL {
                return Err(format!("{kind}: round trip error {err:.3e} at {:?}", w.as_slice()));
            }
            worst = worst.max(err);
        }
        let report = check_assumptions(&p, &SampleSpec::default());
        if kind == PotentialKind::Cubic {
            let a3 = report.get(Assumption::A3);
            let others_pass = [Assumption::A1, Assumption::A2, Assumption::A4, Assumption::A5]
                .iter()
                .all(|&a| report.passed(a));
            let witness_at_origin = a3.witness.as_ref().is_some_and(|w| w.iter().all(|x| *x == 0.0));
            if a3.passed || !witness_at_origin || !others_pass {
                return Err(format!("cubic report unexpected:\n{report}"));
            }
        } else if !report.all_passed() {
            return Err(format!("{kind} fails:\n{report}"));
        }
    }
    Ok(format!(
        "600 round trips, max error {worst:.2e}; A1-A5 pass except cubic A3 with witness 0"
    ))
}

fn c6() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(66);
    let lambda = 0.1;
    let mut worst: f64 = 0.0;
    for m in [2usize, 4, 8] {
        let phi = LegendrePotential::new(PotentialKind::Quad, 5);
        for _ in 0..10 {
            let zs: Vec<Vector> = (0..m).map(|_| DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0))).collect();
            let u = DVector::from_fn(5, |_, _| rng.random_range(-2.0..2.0));
            let (u_next, _) = consensus_update(&u, &zs, lambda / m as f64, &phi, lambda, false).map_err(|e| e.to_string())?;
            let err = (&u_next - block_mean(&zs)).amax();
            if err > C6_MEAN_TOL {
                return Err(format!("M = {m}: |u' - mean| = {err:.3e}"));
            }
            worst = worst.max(err);
        }
    }
    for inst in 0..20 {
        let m = 3 + inst % 4;
        let zs: Vec<Vector> = (0..m).map(|_| dvector![rng.random_range(-2.0..2.0)]).collect();
        let cost = |u: f64| zs.iter().map(|z| (u - z[0]).abs()).sum::<f64>();
        let med = u_median(&zs).map_err(|e| e.to_string())?[0];
        let grid_best = linspace(-2.5, 2.5, 50_001).into_iter().map(cost).fold(f64::INFINITY, f64::min);
        if cost(med) > grid_best + 1e-12 {
            return Err(format!("instance {inst}: median cost {} > grid {grid_best}", cost(med)));
        }
    }
    Ok(format!("u' = mean within {worst:.2e} for M in {{2,4,8}}; median optimal on 20 instances"))
}

fn c7() -> Outcome {
    let f: Arc<dyn Objective> = Arc::new(QuadraticObjective::diagonal(&[1.0, 3.0], &[0.5, -0.2]).map_err(|e| e.to_string())?);
    let mut lines = Vec::new();
    for kind in PotentialKind::ALL.into_iter().filter(|k| *k != PotentialKind::Cubic) {
        let cfg = TrainerConfig {
            workers: 4,
            potential: PotentialSpec::new(kind),
            lambda: 0.05,
            tau: 0.05 / 4.0,
            sigma: 0.02,
            kappa: 0.5,
            iterations: C7_MAX_ITER,
            full_batch: true,
            shard_mode: ShardMode::FullOverlap,
            log_every: 1000,
            init_spread: C7_INIT_SPREAD,
            ..Default::default()
        };
        let task = ObjectiveTask {
            f: f.clone(),
            start: dvector![0.0, 0.0],
        };
        let out = train(&cfg, &task).map_err(|e| format!("{kind}: {e}"))?;
        let initial_gap = out.record.rows[0].consensus_gap;
        if initial_gap < C7_INIT_SPREAD / 2.0 {
            return Err(format!("{kind}: workers start too close ({initial_gap:.3e})"));
        }
        let gap = out.record.last().expect("logged").consensus_gap;
        let grad = f.gradient(&out.u).expect("smooth").norm();
        if gap > C7_TOL || grad > C7_TOL {
            return Err(format!("{kind}: gap {gap:.3e}, |grad f(u)| {grad:.3e}"));
        }
        lines.push(format!("{kind} {gap:.0e}/{grad:.0e}"));
    }
    Ok(format!("workers spread by {C7_INIT_SPREAD}; gap/|grad| after {C7_MAX_ITER} iterations: {}", lines.join(", ")))
}

fn toy_config(kind: PotentialKind, threads: usize) -> TrainerConfig {
    TrainerConfig {
        workers: 4,
        potential: PotentialSpec::new(kind),
        lambda: 0.1,
        tau: 0.05,
        sigma: 0.05,
        kappa: 0.9,
        batch_size: 20,
        iterations: 2000,
        seed: 3,
        log_every: 50,
        threads,
        ..Default::default()
    }
}

fn toy_task() -> MlpTask {
    MlpTask {
        model: MlpModel::new(vec![2, 16, 2], 1e-4).expect("model"),
        data: Arc::new(synth_dataset(SynthKind::TwoGaussians, 200, 0.5, 1).expect("data")),
    }
}

fn c8() -> Outcome {
    let start = Instant::now();
    let task = toy_task();
    let mut lines = Vec::new();
    for kind in PotentialKind::ALL {
        let out = train(&toy_config(kind, 0), &task).map_err(|e| format!("{kind}: {e}"))?;
        let last = out.record.last().expect("logged");
        let err = last.train_error.expect("classification");
        if err > C8_MAX_ERROR || last.consensus_gap > C8_MAX_GAP {
            return Err(format!("{kind}: train error {err}, gap {:.3e}", last.consensus_gap));
        }
        if kind.domain_radius().is_finite() && out.nonfinite_objectives > 0 {
            return Err(format!("{kind}: {} non-finite objective evaluations", out.nonfinite_objectives));
        }
        lines.push(format!("{kind} err={err:.3} gap={:.1e}", last.consensus_gap));
    }
    let elapsed = start.elapsed();
    if elapsed > C8_BUDGET {
        return Err(format!("took {elapsed:.1?}, budget {C8_BUDGET:?}"));
    }
    Ok(format!("{}; {elapsed:.1?}", lines.join(", ")))
}

fn c9() -> Outcome {
    let task = toy_task();
    let records: Vec<String> = [1, 2, 4]
        .iter()
        .map(|&t| train(&toy_config(PotentialKind::Quad, t), &task).map(|o| o.record.to_csv_string()))
        .collect::<aniso::Result<_>>()
        .map_err(|e| e.to_string())?;
    if records[0] != records[1] || records[0] != records[2] {
        return Err("records differ across thread counts".into());
    }
    Ok(format!("1, 2 and 4 threads give identical {}-byte records", records[0].len()))
}

fn c10() -> Outcome {
    let vs: Vec<Vector> = linspace(-2.0, 2.0, 41).into_iter().map(|v| dvector![v]).collect();
    let lambdas = [0.05, 0.1, 0.5, 1.0];
    let mut checked = 0;
    for f in [TestFunctionKind::Abs, TestFunctionKind::NegCos, TestFunctionKind::DoubleWell, TestFunctionKind::Quadratic] {
        let fv = TestFunction::scalar(f);
        for phi in PotentialKind::ALL {
            let mut previous: Option<Vec<f64>> = None;
            for &lambda in &lambdas {
                let p = problem(f, phi, lambda);
                let mut env = Vec::new();
                for v in &vs {
                    let r = prox_grid(&p, v, &oracle_grid(v)).map_err(|e| format!("{f}/{phi} at {}: {e}", v[0]))?;
                    if r.minimizers.is_empty() {
                        return Err(format!("{f}/{phi}: empty prox at {}", v[0]));
                    }
                    if r.envelope > fv.value(v) {
                        return Err(format!("{f}/{phi}/lambda={lambda}: envelope above f at {}", v[0]));
                    }
                    env.push(r.envelope);
                    checked += 1;
                }
                if let Some(prev) = &previous {
                    if let Some(i) = (0..vs.len()).find(|&i| env[i] > prev[i] + C10_MONOTONE_SLACK) {
                        return Err(format!("{f}/{phi}: envelope increases with lambda at {}", vs[i][0]));
                    }
                }
                previous = Some(env);
            }
        }
    }

    // dom f = {0, 1}, so the prox is empty exactly outside (-r, 1 + r)
    let mut feasibility = 0;
    for phi in [PotentialKind::Tan, PotentialKind::Log] {
        let p = problem(TestFunctionKind::TwoPointIndicator, phi, 1.0);
        let r = phi.domain_radius();
        let grid = GridSpec::cube(1, -1.0, 2.0, 301).map_err(|e| e.to_string())?;
        for v in linspace(-r - 1.0, 1.0 + r + 1.0, 37) {
            let inside = v > -r && v < 1.0 + r;
            match prox_grid(&p, &dvector![v], &grid) {
                Ok(res) if inside && !res.minimizers.is_empty() => {}
                Err(Error::EmptyFeasible) if !inside => {}
                other => return Err(format!("{phi} at v = {v} (inside = {inside}): {other:?}")),
            }
            feasibility += 1;
        }
    }

    let p = problem(TestFunctionKind::TwoPointIndicator, PotentialKind::Quad, 1.0);
    let r = prox_grid(&p, &dvector![0.5], &GridSpec::cube(1, -1.0, 2.0, 301).map_err(|e| e.to_string())?)
        .map_err(|e| e.to_string())?;
    let zs: Vec<f64> = r.minimizers.iter().map(|z| z[0]).collect();
    if !r.multivalued || zs != [0.0, 1.0] || (r.envelope - 0.125).abs() > 1e-15 {
        return Err(format!("indicator at 0.5: minimizers {zs:?}, envelope {}", r.envelope));
    }
    Ok(format!(
        "{checked} envelope points, {feasibility} feasibility points; indicator prox {{0, 1}} with envelope 0.125"
    ))
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("1 gradient formula", c1),
        ("2 Huber specialization", c2),
        ("3 translation of stationarity", c3),
        ("4 prox identity", c4),
        ("5 Legendre calculus", c5),
        ("6 consensus mean and median", c6),
        ("7 perfect consensus", c7),
        ("8 toy training", c8),
        ("9 determinism", c9),
        ("10 envelope structure", c10),
    ];
    let mut failed = 0;
    for (name, check) in criteria {
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
