//! Batch front end behind the `aniso` binary.
//!
//! Configs are flat `key = value` files with `#` comments and dotted keys;
//! `key=value` arguments on the command line override the file. Every run
//! writes its CSV artifacts, the fully resolved config (`resolved.cfg`) and a
//! `schema.json` into its output directory.
//!
//! Exit codes: 0 on success, 2 for config or argument errors, 3 for
//! numerical failures.

use std::collections::BTreeMap;
use std::fmt;
use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Parser, ValueEnum};
use nalgebra::DVector;
use rayon::prelude::*;
use serde_json::json;

use crate::distributed::{train, MlpTask, ObjectiveTask, TrainOutcome, TrainerConfig, WorkerModel};
use crate::error::{Error, Result};
use crate::models::{synth_dataset, BlockSum, Dataset, MlpModel, Objective, ShardMode, SynthKind, TestFunction};
use crate::oracle::GridSpec;
use crate::potentials::{check_assumptions, separable, AssumptionReport, PotentialKind, PotentialSpec, SampleSpec};
use crate::prox::{envelope_scan, envelope_scan_grid, prox_grid, prox_local, write_envelope_csv, grid_around, ProxProblem, ProxResult, ProxSolver};
use crate::record::{AltMinRow, RecordRow, TrainRow};
use crate::splitting::{alternate_min, AltMinOptions, Coupling, GTerm, SplittingProblem, SplittingState};
use crate::Vector;

/// Version written to every `schema.json`.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, ValueEnum)]
pub enum Subcommand {
    CheckPotential,
    EnvelopeScan,
    Prox,
    AltMin,
    Train,
    Grid,
}

impl Subcommand {
    pub fn name(self) -> &'static str {
        match self {
            Subcommand::CheckPotential => "check-potential",
            Subcommand::EnvelopeScan => "envelope-scan",
            Subcommand::Prox => "prox",
            Subcommand::AltMin => "alt-min",
            Subcommand::Train => "train",
            Subcommand::Grid => "grid",
        }
    }

    fn bit(self) -> u8 {
        1 << (self as u8)
    }
}

impl fmt::Display for Subcommand {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

const CP: u8 = 1;
const ES: u8 = 2;
const PX: u8 = 4;
const AM: u8 = 8;
const TR: u8 = 16;
const GR: u8 = 32;
const ALL: u8 = CP | ES | PX | AM | TR | GR;
const RUN: u8 = TR | GR;

/// `(key, default, subcommands)`.
const KEYS: &[(&str, &str, u8)] = &[
    ("seed", "0", ALL),
    ("out_dir", "", ALL),
    ("threads", "0", RUN),
    ("potential.kind", "quad", ALL),
    ("potential.eta", "1", ALL),
    ("potential.eps", "0", ALL),
    ("potential.dim", "2", CP),
    ("samples.interior", "200", CP),
    ("f.kind", "neg_cos", ES | PX | AM | RUN),
    ("f.dim", "1", ES | PX | AM | RUN),
    ("lambda", "0.1", ES | PX | AM | RUN),
    ("scan.lower", "-3", ES),
    ("scan.upper", "3", ES),
    ("scan.points", "601", ES),
    ("prox.method", "grid", ES | PX),
    ("oracle.radius", "1.5", ES | PX),
    ("oracle.points", "301", ES | PX),
    ("oracle.refinements", "3", ES | PX),
    ("v", "0", PX),
    ("init", "", PX),
    ("u0", "0.4", AM | RUN),
    ("copies", "1", AM),
    ("tau", "0.05", AM | RUN),
    ("sigma", "0.05", AM | RUN),
    ("tol", "1e-8", AM),
    ("max_iter", "100000", AM),
    ("exact_u", "false", AM),
    ("tau_includes_inv_lambda", "false", AM | RUN),
    ("envelope_every", "0", AM | RUN),
    ("workers", "4", RUN),
    ("kappa", "0.9", RUN),
    ("batch_size", "20", RUN),
    ("iterations", "2000", RUN),
    ("shard_mode", "full_overlap", RUN),
    ("full_batch", "false", RUN),
    ("delta_uses_stale_u", "false", RUN),
    ("log_every", "50", RUN),
    ("timing", "false", RUN),
    ("sigma_decay", "0", RUN),
    ("init_spread", "0", RUN),
    ("model.kind", "mlp", RUN),
    ("model.layers", "2,16,2", RUN),
    ("model.nu", "1e-4", RUN),
    ("data.kind", "two_gaussians", RUN),
    ("data.n", "200", RUN),
    ("data.noise", "0.5", RUN),
    ("data.seed", "1", RUN),
    ("data.test_n", "200", RUN),
    ("data.file", "", RUN),
    ("data.test_file", "", RUN),
    ("lr", "", GR),
    ("grid.max_runs", "500", GR),
];

/// Keys that may hold comma-separated lists in a `grid` config, in the
/// order the cartesian product is enumerated.
pub const SWEEP_KEYS: &[&str] = &["potential.kind", "potential.eta", "potential.eps", "lambda", "lr", "tau", "sigma", "kappa"];

/// A flat key/value config.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Config {
    values: BTreeMap<String, String>,
}

impl Config {
    /// Parses `key = value` lines; `#` starts a comment, blank lines are
    /// skipped, duplicate keys are rejected.
    pub fn parse(text: &str) -> Result<Self> {
        Ok(Self::parse_lines(text)?.0)
    }

    fn parse_lines(text: &str) -> Result<(Self, BTreeMap<String, usize>)> {
        let mut values = BTreeMap::new();
        let mut lines = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {n}: expected `key = value`, got `{line}`")))?;
            let k = k.trim();
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(Error::Config(format!("line {n}: bad key `{k}`")));
            }
            if lines.insert(k.to_string(), n).is_some() {
                return Err(Error::Config(format!("line {n}: duplicate key `{k}`")));
            }
            values.insert(k.to_string(), v.trim().to_string());
        }
        Ok((Self { values }, lines))
    }

    /// One `key = value` line per entry, sorted by key.
    pub fn emit(&self) -> String {
        self.values.iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn set(&mut self, key: &str, value: &str) {
        self.values.insert(key.to_string(), value.trim().to_string());
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.values.get(key).map(String::as_str)
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.values.keys().map(String::as_str)
    }

    fn raw(&self, key: &str) -> Result<&str> {
        self.get(key).ok_or_else(|| Error::Config(format!("missing key `{key}`")))
    }

    pub fn string(&self, key: &str) -> Result<String> {
        Ok(self.raw(key)?.to_string())
    }

    pub fn f64(&self, key: &str) -> Result<f64> {
        let s = self.raw(key)?;
        s.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: `{s}` is not a number")))
    }

    pub fn usize(&self, key: &str) -> Result<usize> {
        let s = self.raw(key)?;
        s.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: `{s}` is not a nonnegative integer")))
    }

    pub fn u64(&self, key: &str) -> Result<u64> {
        let s = self.raw(key)?;
        s.parse()
            .map_err(|_| Error::Config(format!("key `{key}`: `{s}` is not a nonnegative integer")))
    }

    pub fn bool(&self, key: &str) -> Result<bool> {
        match self.raw(key)? {
            "true" | "1" | "yes" => Ok(true),
            "false" | "0" | "no" => Ok(false),
            s => Err(Error::Config(format!("key `{key}`: `{s}` is not a boolean"))),
        }
    }

    /// Comma-separated values, empty for an empty string.
    pub fn list(&self, key: &str) -> Result<Vec<String>> {
        let s = self.raw(key)?;
        if s.is_empty() {
            return Ok(Vec::new());
        }
        Ok(s.split(',').map(|x| x.trim().to_string()).collect())
    }

    pub fn vector(&self, key: &str) -> Result<Vector> {
        let items = self.list(key)?;
        let xs = items
            .iter()
            .map(|x| {
                x.parse::<f64>()
                    .map_err(|_| Error::Config(format!("key `{key}`: `{x}` is not a number")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(DVector::from_vec(xs))
    }

    pub fn usizes(&self, key: &str) -> Result<Vec<usize>> {
        self.list(key)?
            .iter()
            .map(|x| {
                x.parse::<usize>()
                    .map_err(|_| Error::Config(format!("key `{key}`: `{x}` is not an integer")))
            })
            .collect()
    }

    /// Parses a string-valued key with `FromStr`, reporting the key on error.
    pub fn parsed<T: std::str::FromStr<Err = Error>>(&self, key: &str) -> Result<T> {
        self.raw(key)?
            .parse()
            .map_err(|e: Error| Error::Config(format!("key `{key}`: {}", strip_prefix(&e))))
    }

    pub fn potential(&self) -> Result<PotentialSpec> {
        Ok(PotentialSpec {
            kind: self.parsed::<PotentialKind>("potential.kind")?,
            eta: self.f64("potential.eta")?,
            eps: self.f64("potential.eps")?,
        })
    }
}

fn strip_prefix(e: &Error) -> String {
    match e {
        Error::Argument(m) | Error::Config(m) => m.clone(),
        other => other.to_string(),
    }
}

/// Keys accepted by `sub`, with their defaults.
pub fn schema(sub: Subcommand) -> Vec<(&'static str, &'static str)> {
    KEYS.iter().filter(|k| k.2 & sub.bit() != 0).map(|k| (k.0, k.1)).collect()
}

/// Applies `file_text` and then `overrides` (`key=value`) on top of the
/// defaults for `sub`. Unknown keys are rejected.
pub fn resolve(sub: Subcommand, file_text: Option<&str>, overrides: &[String]) -> Result<Config> {
    let known = schema(sub);
    let is_known = |k: &str| known.iter().any(|(n, _)| *n == k);
    let mut cfg = Config::default();
    for (k, d) in &known {
        cfg.set(k, d);
    }
    if let Some(text) = file_text {
        let (file, lines) = Config::parse_lines(text)?;
        for (k, v) in &file.values {
            if !is_known(k) {
                return Err(Error::Config(format!("line {}: unknown key `{k}` for {sub}", lines[k])));
            }
            cfg.set(k, v);
        }
    }
    for o in overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override `{o}` is not of the form key=value")))?;
        let k = k.trim();
        if !is_known(k) {
            return Err(Error::Config(format!("override: unknown key `{k}` for {sub}")));
        }
        cfg.set(k, v);
    }
    if sub != Subcommand::Grid {
        for k in SWEEP_KEYS {
            if let Some(v) = cfg.get(k) {
                if v.contains(',') {
                    return Err(Error::Config(format!("key `{k}` takes a single value outside `grid`")));
                }
            }
        }
    }
    Ok(cfg)
}

/// Command line of the `aniso` binary.
#[derive(Debug, Parser)]
#[command(name = "aniso", version, about = "Anisotropic proximal envelopes and consensus splitting experiments")]
pub struct Cli {
    #[arg(value_enum)]
    pub subcommand: Subcommand,
    /// Config file with `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` overrides; `check-potential` also accepts a bare potential name.
    pub overrides: Vec<String>,
}

/// What a finished subcommand produced.
#[derive(Clone, Debug, Default)]
pub struct RunSummary {
    pub out_dir: PathBuf,
    pub artifacts: Vec<String>,
    /// Human-readable report printed to stdout.
    pub report: String,
}

/// Maps an error to the process exit code.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Argument(_) | Error::Config(_) | Error::Io(_) => 2,
        _ => 3,
    }
}

/// Parses `args` (including the program name), runs, prints the report or a
/// diagnostic line, and returns the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run_cli(&cli) {
        Ok(s) => {
            print!("{}", s.report);
            0
        }
        Err(e) => {
            eprintln!("aniso {}: {e}", cli.subcommand);
            exit_code(&e)
        }
    }
}

/// Resolves the config of `cli` and runs it.
pub fn run_cli(cli: &Cli) -> Result<RunSummary> {
    let text = match &cli.config {
        Some(p) => Some(fs::read_to_string(p).map_err(|e| Error::Config(format!("cannot read {}: {e}", p.display())))?),
        None => None,
    };
    let overrides: Vec<String> = cli
        .overrides
        .iter()
        .map(|o| {
            if cli.subcommand == Subcommand::CheckPotential && !o.contains('=') {
                format!("potential.kind={o}")
            } else {
                o.clone()
            }
        })
        .collect();
    let cfg = resolve(cli.subcommand, text.as_deref(), &overrides)?;
    run(cli.subcommand, &cfg)
}

fn out_dir(sub: Subcommand, cfg: &Config) -> Result<PathBuf> {
    let d = cfg.string("out_dir")?;
    Ok(if d.is_empty() {
        Path::new("out").join(sub.name())
    } else {
        PathBuf::from(d)
    })
}

/// Runs `sub` with a resolved config, writing artifacts to `out_dir`.
pub fn run(sub: Subcommand, cfg: &Config) -> Result<RunSummary> {
    let dir = out_dir(sub, cfg)?;
    fs::create_dir_all(&dir)?;
    fs::write(dir.join("resolved.cfg"), cfg.emit())?;
    let mut summary = match sub {
        Subcommand::CheckPotential => run_check_potential(cfg, &dir),
        Subcommand::EnvelopeScan => run_envelope_scan(cfg, &dir),
        Subcommand::Prox => run_prox(cfg, &dir),
        Subcommand::AltMin => run_alt_min(cfg, &dir),
        Subcommand::Train => run_train(cfg, &dir),
        Subcommand::Grid => run_grid(cfg, &dir),
    }?;
    let columns: BTreeMap<&str, Vec<String>> = summary
        .artifacts
        .iter()
        .filter(|a| a.ends_with(".csv"))
        .map(|a| (a.as_str(), csv_header(&dir.join(a))))
        .collect();
    let schema = json!({
        "schema_version": SCHEMA_VERSION,
        "subcommand": sub.name(),
        "config": "resolved.cfg",
        "artifacts": columns,
    });
    fs::write(dir.join("schema.json"), serde_json::to_string_pretty(&schema).expect("valid json") + "\n")?;
    summary.out_dir = dir;
    Ok(summary)
}

fn csv_header(path: &Path) -> Vec<String> {
    csv::Reader::from_path(path)
        .and_then(|mut r| r.headers().map(|h| h.iter().map(String::from).collect()))
        .unwrap_or_default()
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    Ok(BufWriter::new(File::create(path)?))
}

fn test_function(cfg: &Config) -> Result<TestFunction> {
    TestFunction::new(cfg.parsed("f.kind")?, cfg.usize("f.dim")?)
}

fn prox_problem(cfg: &Config) -> Result<ProxProblem> {
    let f = test_function(cfg)?;
    let phi = cfg.potential()?.build(f.dimension)?;
    ProxProblem::new(Arc::new(f), Arc::new(phi), cfg.f64("lambda")?)
}

fn run_check_potential(cfg: &Config, dir: &Path) -> Result<RunSummary> {
    let spec = cfg.potential()?;
    let p = spec.build(cfg.usize("potential.dim")?)?;
    let report = check_assumptions(
        &p,
        &SampleSpec {
            interior: cfg.usize("samples.interior")?,
            seed: cfg.u64("seed")?,
            ..Default::default()
        },
    );
    write_assumptions_csv(&report, &dir.join("assumptions.csv"))?;
    Ok(RunSummary {
        artifacts: vec!["assumptions.csv".into()],
        report: report.to_string(),
        ..Default::default()
    })
}

fn write_assumptions_csv(report: &AssumptionReport, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?);
    w.write_record(["potential", "assumption", "passed", "detail", "witness"])?;
    for c in &report.checks {
        let witness = c
            .witness
            .as_ref()
            .map(|v| v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(" "))
            .unwrap_or_default();
        w.write_record([
            report.potential.clone(),
            format!("{:?}", c.assumption),
            c.passed.to_string(),
            c.detail.clone(),
            witness,
        ])?;
    }
    w.flush()?;
    Ok(())
}

fn solver(cfg: &Config, v: &Vector) -> Result<ProxSolver> {
    match cfg.string("prox.method")?.as_str() {
        "grid" => Ok(ProxSolver::Grid(grid_around(
            v,
            cfg.f64("oracle.radius")?,
            cfg.usize("oracle.points")?,
            cfg.usize("oracle.refinements")?,
        )?)),
        "local" => Ok(ProxSolver::Local(None)),
        other => Err(Error::Config(format!("key `prox.method`: expected grid or local, got `{other}`"))),
    }
}

fn run_envelope_scan(cfg: &Config, dir: &Path) -> Result<RunSummary> {
    let prob = prox_problem(cfg)?;
    let n = prob.dim();
    let grid = GridSpec::cube(n, cfg.f64("scan.lower")?, cfg.f64("scan.upper")?, cfg.usize("scan.points")?)?;
    let vs: Vec<Vector> = grid.iter_points().collect();
    let rows = match cfg.string("prox.method")?.as_str() {
        "grid" => envelope_scan_grid(
            &prob,
            &vs,
            cfg.f64("oracle.radius")?,
            cfg.usize("oracle.points")?,
            cfg.usize("oracle.refinements")?,
        )?,
        _ => envelope_scan(&prob, &vs, &solver(cfg, &vs[0])?)?,
    };
    write_envelope_csv(create(&dir.join("envelope.csv"))?, &rows)?;
    let multi = rows.iter().filter(|r| r.n_minimizers > 1).count();
    let empty = rows.iter().filter(|r| r.n_minimizers == 0).count();
    Ok(RunSummary {
        artifacts: vec!["envelope.csv".into()],
        report: format!(
            "{} scan points, {multi} with several minimizers, {empty} with empty prox\n",
            rows.len()
        ),
        ..Default::default()
    })
}

fn prox_json(v: &Vector, r: &ProxResult) -> serde_json::Value {
    let vec = |x: &Vector| x.iter().cloned().collect::<Vec<f64>>();
    json!({
        "v": vec(v),
        "minimizers": r.minimizers.iter().map(vec).collect::<Vec<_>>(),
        "envelope": r.envelope,
        "envelope_gradient": r.envelope_gradient.as_ref().map(vec),
        "multivalued": r.multivalued,
        "method": r.method.to_string(),
    })
}

fn run_prox(cfg: &Config, dir: &Path) -> Result<RunSummary> {
    let prob = prox_problem(cfg)?;
    let v = cfg.vector("v")?;
    let r = match cfg.string("prox.method")?.as_str() {
        "local" => {
            let init = cfg.vector("init")?;
            prox_local(&prob, &v, if init.is_empty() { None } else { Some(&init) })?
        }
        _ => match solver(cfg, &v)? {
            ProxSolver::Grid(g) => prox_grid(&prob, &v, &g)?,
            ProxSolver::Local(_) => unreachable!("grid method"),
        },
    };
    let j = prox_json(&v, &r);
    fs::write(dir.join("prox.json"), serde_json::to_string_pretty(&j).expect("valid json") + "\n")?;
    Ok(RunSummary {
        artifacts: vec!["prox.json".into()],
        report: format!(
            "envelope {} at v = {:?}; minimizers {:?}\n",
            r.envelope,
            v.as_slice(),
            r.minimizers.iter().map(|z| z.as_slice().to_vec()).collect::<Vec<_>>()
        ),
        ..Default::default()
    })
}

fn run_alt_min(cfg: &Config, dir: &Path) -> Result<RunSummary> {
    let f = test_function(cfg)?;
    let n = f.dimension;
    let copies = cfg.usize("copies")?;
    let atom = cfg.potential()?.build(n)?;
    let fhat: Arc<dyn Objective> = if copies == 1 {
        Arc::new(f)
    } else {
        Arc::new(BlockSum::repeated(Arc::new(f), copies)?)
    };
    let mut prob = SplittingProblem::new(
        fhat,
        GTerm::Zero,
        Coupling::stacked(n, copies)?,
        Arc::new(separable(atom, copies)?),
        cfg.f64("lambda")?,
    )?;
    prob.tau_includes_inv_lambda = cfg.bool("tau_includes_inv_lambda")?;
    let u0 = cfg.vector("u0")?;
    if u0.len() != n {
        return Err(Error::Config(format!("key `u0`: expected {n} values")));
    }
    let opts = AltMinOptions {
        tau: cfg.f64("tau")?,
        sigma: cfg.f64("sigma")?,
        tol: cfg.f64("tol")?,
        max_iter: cfg.usize("max_iter")?,
        exact_u: cfg.bool("exact_u")?,
        envelope_every: cfg.usize("envelope_every")?,
    };
    let out = alternate_min(&prob, SplittingState::consistent(&prob, u0), &opts)?;
    out.record.write_csv(create(&dir.join("altmin.csv"))?)?;
    if !out.converged {
        return Err(Error::NonConvergence {
            iterations: out.iterations,
            residual: out.residuals.max_splitting(),
        });
    }
    Ok(RunSummary {
        artifacts: vec!["altmin.csv".into()],
        report: format!(
            "converged after {} iterations: u = {:?}, r_u = {:e}, r_z = {:e}{}\n",
            out.iterations,
            out.state.u.as_slice(),
            out.residuals.r_u,
            out.residuals.r_z.unwrap_or(f64::NAN),
            out.residuals
                .envelope_residual
                .map(|e| format!(", envelope residual = {e:e}"))
                .unwrap_or_default()
        ),
        ..Default::default()
    })
}

/// The trainer settings of a `train` config (or one `grid` combination).
pub fn trainer_config(cfg: &Config) -> Result<TrainerConfig> {
    Ok(TrainerConfig {
        workers: cfg.usize("workers")?,
        potential: cfg.potential()?,
        lambda: cfg.f64("lambda")?,
        tau: cfg.f64("tau")?,
        sigma: cfg.f64("sigma")?,
        sigma_decay: cfg.f64("sigma_decay")?,
        kappa: cfg.f64("kappa")?,
        batch_size: cfg.usize("batch_size")?,
        iterations: cfg.usize("iterations")?,
        seed: cfg.u64("seed")?,
        shard_mode: cfg.parsed::<ShardMode>("shard_mode")?,
        full_batch: cfg.bool("full_batch")?,
        tau_includes_inv_lambda: cfg.bool("tau_includes_inv_lambda")?,
        delta_uses_stale_u: cfg.bool("delta_uses_stale_u")?,
        log_every: cfg.usize("log_every")?,
        envelope_every: cfg.usize("envelope_every")?,
        threads: cfg.usize("threads")?,
        timing: cfg.bool("timing")?,
        init_spread: cfg.f64("init_spread")?,
    })
}

/// Training task plus an optional held-out set.
pub struct Task {
    pub model: Box<dyn WorkerModel>,
    mlp: Option<(MlpModel, Arc<Dataset>)>,
    function: Option<Arc<dyn Objective>>,
}

impl Task {
    pub fn from_config(cfg: &Config) -> Result<Self> {
        match cfg.string("model.kind")?.as_str() {
            "mlp" => {
                let model = MlpModel::new(cfg.usizes("model.layers")?, cfg.f64("model.nu")?)?;
                let load = |file_key: &str, n_key: &str, seed_offset: u64| -> Result<Dataset> {
                    let file = cfg.string(file_key)?;
                    if file.is_empty() {
                        synth_dataset(
                            cfg.parsed::<SynthKind>("data.kind")?,
                            cfg.usize(n_key)?,
                            cfg.f64("data.noise")?,
                            cfg.u64("data.seed")? + seed_offset,
                        )
                    } else {
                        Dataset::read_csv(File::open(&file).map_err(|e| Error::Config(format!("cannot read {file}: {e}")))?)
                    }
                };
                let train = Arc::new(load("data.file", "data.n", 0)?);
                let test = Arc::new(load("data.test_file", "data.test_n", 1)?);
                Ok(Self {
                    model: Box::new(MlpTask {
                        model: model.clone(),
                        data: train,
                    }),
                    mlp: Some((model, test)),
                    function: None,
                })
            }
            "function" => {
                let f: Arc<dyn Objective> = Arc::new(test_function(cfg)?);
                let start = cfg.vector("u0")?;
                if start.len() != f.dim() {
                    return Err(Error::Config(format!("key `u0`: expected {} values", f.dim())));
                }
                Ok(Self {
                    model: Box::new(ObjectiveTask { f: f.clone(), start }),
                    mlp: None,
                    function: Some(f),
                })
            }
            other => Err(Error::Config(format!("key `model.kind`: expected mlp or function, got `{other}`"))),
        }
    }

    /// Loss and error on the held-out set (the function value for
    /// deterministic tasks).
    pub fn test_metrics(&self, u: &Vector) -> Result<(f64, Option<f64>)> {
        if let Some((m, test)) = &self.mlp {
            let idx = test.indices();
            return Ok((m.data_loss_grad(u, test, &idx)?.0, Some(m.error_rate(u, test, &idx)?)));
        }
        let f = self.function.as_ref().expect("function task");
        Ok((f.value(u), None))
    }
}

/// Final numbers of one training run.
#[derive(Clone, Debug, PartialEq)]
pub struct FinalMetrics {
    pub objective: f64,
    pub train_loss: f64,
    pub train_error: Option<f64>,
    pub test_loss: f64,
    pub test_error: Option<f64>,
    pub consensus_gap: f64,
    pub nonfinite_objectives: usize,
}

impl FinalMetrics {
    fn failed() -> Self {
        Self {
            objective: f64::NAN,
            train_loss: f64::NAN,
            train_error: None,
            test_loss: f64::NAN,
            test_error: None,
            consensus_gap: f64::NAN,
            nonfinite_objectives: 0,
        }
    }
}

fn final_metrics(task: &Task, out: &TrainOutcome) -> Result<FinalMetrics> {
    let last = out.record.last().expect("final round is always logged");
    let (test_loss, test_error) = task.test_metrics(&out.u)?;
    Ok(FinalMetrics {
        objective: last.f,
        train_loss: last.train_loss,
        train_error: last.train_error,
        test_loss,
        test_error,
        consensus_gap: last.consensus_gap,
        nonfinite_objectives: out.nonfinite_objectives,
    })
}

fn run_train(cfg: &Config, dir: &Path) -> Result<RunSummary> {
    let task = Task::from_config(cfg)?;
    let tc = trainer_config(cfg)?;
    let out = train(&tc, task.model.as_ref())?;
    out.record.write_csv(create(&dir.join("train.csv"))?)?;
    let m = final_metrics(&task, &out)?;
    let j = json!({
        "objective": m.objective,
        "train_loss": m.train_loss,
        "train_error": m.train_error,
        "test_loss": m.test_loss,
        "test_error": m.test_error,
        "consensus_gap": m.consensus_gap,
        "nonfinite_objectives": m.nonfinite_objectives,
    });
    fs::write(dir.join("final.json"), serde_json::to_string_pretty(&j).expect("valid json") + "\n")?;
    Ok(RunSummary {
        artifacts: vec!["train.csv".into(), "final.json".into()],
        report: format!(
            "{}: train loss {:.6}, train error {}, test loss {:.6}, test error {}, consensus gap {:.3e}\n",
            tc.potential,
            m.train_loss,
            fmt_opt(m.train_error),
            m.test_loss,
            fmt_opt(m.test_error),
            m.consensus_gap
        ),
        ..Default::default()
    })
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map_or_else(|| "-".into(), |v| format!("{v:.4}"))
}

/// One completed grid combination.
#[derive(Clone, Debug)]
pub struct GridRun {
    pub index: usize,
    /// The sweep-key values of this combination, in [`SWEEP_KEYS`] order.
    pub settings: Vec<(String, String)>,
    pub metrics: FinalMetrics,
    /// The numerical failure that stopped the run; its metrics are NaN.
    pub failure: Option<String>,
}

impl GridRun {
    pub fn potential(&self) -> &str {
        self.setting("potential.kind").unwrap_or("")
    }

    pub fn setting(&self, key: &str) -> Option<&str> {
        self.settings.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }
}

/// A single-valued config and the sweep settings that produced it.
pub type GridCombo = (Config, Vec<(String, String)>);

/// Expands the list-valued sweep keys into single-valued configs. `lr`, when
/// set, ties `sigma = tau`. Seeds are `seed + run index`.
pub fn expand_grid(cfg: &Config) -> Result<Vec<GridCombo>> {
    let mut axes: Vec<(&str, Vec<String>)> = Vec::new();
    let lr = cfg.list("lr")?;
    for &k in SWEEP_KEYS {
        if (k == "tau" || k == "sigma") && !lr.is_empty() {
            continue;
        }
        let vals = cfg.list(k)?;
        if vals.is_empty() {
            continue;
        }
        axes.push((k, vals));
    }
    let total: usize = axes.iter().map(|(_, v)| v.len()).product();
    let cap = cfg.usize("grid.max_runs")?;
    if total > cap {
        return Err(Error::Config(format!("grid has {total} runs, above grid.max_runs = {cap}")));
    }
    let base_seed = cfg.u64("seed")?;
    let mut out = Vec::with_capacity(total);
    for idx in 0..total {
        let mut rem = idx;
        let mut chosen = vec![String::new(); axes.len()];
        for (a, (_, vals)) in axes.iter().enumerate().rev() {
            chosen[a] = vals[rem % vals.len()].clone();
            rem /= vals.len();
        }
        let mut c = cfg.clone();
        let mut settings = Vec::new();
        for ((k, _), v) in axes.iter().zip(&chosen) {
            if *k == "lr" {
                c.set("sigma", v);
                c.set("tau", v);
            } else {
                c.set(k, v);
            }
            settings.push((k.to_string(), v.clone()));
        }
        c.set("lr", "");
        c.set("seed", &(base_seed + idx as u64).to_string());
        out.push((c, settings));
    }
    Ok(out)
}

/// Runs every grid combination (in parallel) and returns them in index order.
/// Runs that diverge or hit a numerical failure are kept with NaN metrics;
/// config errors abort the whole grid.
pub fn grid_search(cfg: &Config, record_dir: Option<&Path>) -> Result<Vec<GridRun>> {
    let combos = expand_grid(cfg)?;
    combos
        .par_iter()
        .enumerate()
        .map(|(index, (c, settings))| {
            let task = Task::from_config(c)?;
            let mut tc = trainer_config(c)?;
            tc.threads = 1;
            let run = train(&tc, task.model.as_ref()).and_then(|out| {
                if let Some(d) = record_dir {
                    out.record.write_csv(create(&d.join(format!("run_{index:04}.csv")))?)?;
                }
                final_metrics(&task, &out)
            });
            let (metrics, failure) = match run {
                Ok(m) => (m, None),
                Err(e) if e.is_numerical() => (FinalMetrics::failed(), Some(e.to_string())),
                Err(e) => return Err(e),
            };
            Ok(GridRun {
                index,
                settings: settings.clone(),
                metrics,
                failure,
            })
        })
        .collect()
}

/// Ranking key: NaN and missing values sort last.
fn rank(x: Option<f64>) -> f64 {
    match x {
        Some(v) if v.is_finite() => v,
        _ => f64::INFINITY,
    }
}

/// Best run per potential by `key` (ties go to the lower run index), in the
/// order the potentials first appear.
pub fn best_per_potential(runs: &[GridRun], key: impl Fn(&GridRun) -> Option<f64>) -> Vec<&GridRun> {
    let mut order: Vec<&str> = Vec::new();
    for r in runs {
        if !order.contains(&r.potential()) {
            order.push(r.potential());
        }
    }
    order
        .iter()
        .map(|p| {
            runs.iter()
                .filter(|r| r.potential() == *p)
                .min_by(|a, b| rank(key(a)).total_cmp(&rank(key(b))).then(a.index.cmp(&b.index)))
                .expect("nonempty group")
        })
        .collect()
}

const SUMMARY_COLUMNS: &[&str] = &["potential", "Objective", "Train Loss", "Train Error", "Test Loss", "Test Error"];

fn opt_cell(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

fn metric_cells(m: &FinalMetrics) -> Vec<String> {
    vec![
        m.objective.to_string(),
        m.train_loss.to_string(),
        opt_cell(m.train_error),
        m.test_loss.to_string(),
        opt_cell(m.test_error),
    ]
}

fn write_runs_csv(runs: &[GridRun], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?);
    let mut header = vec!["run".to_string()];
    if let Some(r) = runs.first() {
        header.extend(r.settings.iter().map(|(k, _)| k.clone()));
    }
    header.extend(SUMMARY_COLUMNS[1..].iter().map(|s| s.to_string()));
    header.push("consensus_gap".into());
    header.push("nonfinite_objectives".into());
    header.push("failure".into());
    w.write_record(&header)?;
    for r in runs {
        let mut row = vec![r.index.to_string()];
        row.extend(r.settings.iter().map(|(_, v)| v.clone()));
        row.extend(metric_cells(&r.metrics));
        row.push(r.metrics.consensus_gap.to_string());
        row.push(r.metrics.nonfinite_objectives.to_string());
        row.push(r.failure.clone().unwrap_or_default());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn write_best_csv(best: &[&GridRun], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?);
    let mut header: Vec<String> = SUMMARY_COLUMNS.iter().map(|s| s.to_string()).collect();
    header.push("run".into());
    if let Some(r) = best.first() {
        header.extend(r.settings.iter().filter(|(k, _)| k != "potential.kind").map(|(k, _)| k.clone()));
    }
    w.write_record(&header)?;
    for r in best {
        let mut row = vec![r.potential().to_string()];
        row.extend(metric_cells(&r.metrics));
        row.push(r.index.to_string());
        row.extend(r.settings.iter().filter(|(k, _)| k != "potential.kind").map(|(_, v)| v.clone()));
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Each column minimized independently over all runs of a potential.
fn write_per_column_csv(runs: &[GridRun], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .terminator(csv::Terminator::Any(b'\n'))
        .from_writer(create(path)?);
    w.write_record(SUMMARY_COLUMNS)?;
    let columns: [fn(&FinalMetrics) -> Option<f64>; 5] = [
        |m| Some(m.objective),
        |m| Some(m.train_loss),
        |m| m.train_error,
        |m| Some(m.test_loss),
        |m| m.test_error,
    ];
    for first in best_per_potential(runs, |r| Some(r.metrics.train_loss)) {
        let p = first.potential();
        let mut row = vec![p.to_string()];
        for col in columns {
            let best = runs
                .iter()
                .filter(|r| r.potential() == p)
                .filter_map(|r| col(&r.metrics))
                .filter(|v| v.is_finite())
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.min(v))));
            row.push(opt_cell(best));
        }
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

fn run_grid(cfg: &Config, dir: &Path) -> Result<RunSummary> {
    let runs = grid_search(cfg, Some(&dir.join("runs")))?;
    write_runs_csv(&runs, &dir.join("runs.csv"))?;
    let by_loss = best_per_potential(&runs, |r| Some(r.metrics.train_loss));
    let by_error = best_per_potential(&runs, |r| r.metrics.test_error.or(Some(r.metrics.test_loss)));
    write_best_csv(&by_loss, &dir.join("summary_train_loss.csv"))?;
    write_best_csv(&by_error, &dir.join("summary_test_error.csv"))?;
    write_per_column_csv(&runs, &dir.join("summary_per_column.csv"))?;

    let failed = runs.iter().filter(|r| r.failure.is_some()).count();
    let mut report = format!("{} runs, {failed} failed\n", runs.len());
    report.push_str(&format!(
        "{:<10} {:>12} {:>12} {:>12} {:>12} {:>12}\n",
        "potential", "Objective", "Train Loss", "Train Error", "Test Loss", "Test Error"
    ));
    for r in &by_loss {
        let m = &r.metrics;
        report.push_str(&format!(
            "{:<10} {:>12.5} {:>12.5} {:>12} {:>12.5} {:>12}\n",
            r.potential(),
            m.objective,
            m.train_loss,
            fmt_opt(m.train_error),
            m.test_loss,
            fmt_opt(m.test_error)
        ));
    }
    Ok(RunSummary {
        artifacts: vec![
            "runs.csv".into(),
            "summary_train_loss.csv".into(),
            "summary_test_error.csv".into(),
            "summary_per_column.csv".into(),
        ],
        report,
        ..Default::default()
    })
}

/// CSV headers of the record types, for documentation and schema checks.
pub fn record_headers() -> [(&'static str, &'static [&'static str]); 2] {
    [("altmin.csv", AltMinRow::HEADER), ("train.csv", TrainRow::HEADER)]
}
