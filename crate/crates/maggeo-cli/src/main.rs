//! Command-line front end: simulate, find, index, reduce, audit, continue.

mod spec;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use maggeo::apriori_audit::{audit, homotopy_continuation, BranchStatus, ContinuationOptions};
use maggeo::closed_orbits::{
    catalog_entries, catalog_json, classify, degree_sum, multistart_search, orbit_from_state, ClosedOrbit, ShootOptions,
};
use maggeo::magnetic_flow::{integrate, FlowKind, PhaseState};
use maggeo::variational::monodromy;
use maggeo::reduction::{k_to_r, reduced_zeros, report_json, seed_from_reduction};
use maggeo::sphere_geometry::ConformalMetric;
use maggeo::Error;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

#[derive(Parser, Debug)]
#[command(name = "maggeo", version, about = "Closed curves of prescribed geodesic curvature on conformal spheres")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Integrate one trajectory and write it as CSV.
    Simulate(SimulateArgs),
    /// Multistart search for closed orbits; writes an orbit catalog.
    Find(FindArgs),
    /// Degrees of the orbits in a catalog.
    Index(IndexArgs),
    /// Reduced field of a perturbation of the round problem, its zeros and seeds.
    Reduce(ReduceArgs),
    /// Hypothesis checks, Gauss–Bonnet and length bounds.
    Audit(AuditArgs),
    /// Two-stage homotopy continuation with degree tracking.
    Continue(ContinueArgs),
}

#[derive(Args, Debug, Clone, Serialize)]
struct Common {
    /// round | zonal:c1,c2,.. | poly:<expr> | @file.json
    #[arg(long)]
    metric: Option<String>,
    /// Polynomial in x, y, z (e.g. "1+0.01*z") or @file.json. Defaults to k0 + eps*z.
    #[arg(long)]
    k: Option<String>,
    #[arg(long, default_value_t = 1.0)]
    k0: f64,
    #[arg(long, default_value_t = 0.0)]
    eps: f64,
    #[arg(long, default_value_t = 1e-12)]
    tol: f64,
    #[arg(long, default_value_t = 0)]
    rng: u64,
    /// Output directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, Serialize)]
enum Kind {
    Prescribed,
    Magnetic,
}

#[derive(Args, Debug, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    /// Start point "x1,x2,x3"; defaults to the latitude circle start for k(e3).
    #[arg(long)]
    x: Option<String>,
    /// Start velocity "v1,v2,v3"; rescaled to unit g-speed for prescribed flow.
    #[arg(long)]
    v: Option<String>,
    /// Integration time; defaults to one period of the latitude circle.
    #[arg(long)]
    time: Option<f64>,
    #[arg(long, value_enum, default_value_t = Kind::Prescribed)]
    kind: Kind,
}

#[derive(Args, Debug, Serialize)]
struct FindArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 200)]
    seeds: usize,
}

#[derive(Args, Debug, Serialize)]
struct IndexArgs {
    #[command(flatten)]
    common: Common,
    /// Catalog written by `find`; its metric and k are used unless overridden.
    #[arg(long)]
    catalog: PathBuf,
}

#[derive(Args, Debug, Serialize)]
struct ReduceArgs {
    #[command(flatten)]
    common: Common,
    /// Perturbation k1 as a polynomial expression.
    #[arg(long, default_value = "z")]
    k1: String,
}

#[derive(Args, Debug, Serialize)]
struct AuditArgs {
    #[command(flatten)]
    common: Common,
    /// Audit the orbits of this catalog instead of running a search.
    #[arg(long)]
    catalog: Option<PathBuf>,
    #[arg(long, default_value_t = 200)]
    seeds: usize,
    /// Known lower bound on the injectivity radius.
    #[arg(long)]
    inj: Option<f64>,
}

#[derive(Args, Debug, Serialize)]
struct ContinueArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = 10)]
    steps: usize,
    /// Amplitude of the symmetry-breaking start term.
    #[arg(long, default_value_t = 0.01)]
    regularization: f64,
}

/// Serialized configuration and its hash, stamped into every output.
struct Manifest {
    config: Value,
    hash: String,
    out: PathBuf,
    files: Vec<String>,
}

impl Manifest {
    fn new(command: &str, args: &impl Serialize, out: &Path) -> Result<Self, Error> {
        let config = json!({
            "command": command,
            "args": args,
            "version": env!("CARGO_PKG_VERSION"),
        });
        let text = serde_json::to_string(&config).expect("config serializes");
        let hash = format!("{:x}", Sha256::digest(text.as_bytes()));
        std::fs::create_dir_all(out).map_err(|e| Error::Config(format!("--out {}: {e}", out.display())))?;
        Ok(Self { config, hash, out: out.to_path_buf(), files: Vec::new() })
    }

    fn write(&mut self, name: &str, body: &str) -> Result<(), Error> {
        let path = self.out.join(name);
        std::fs::write(&path, body).map_err(|e| Error::Config(format!("cannot write {}: {e}", path.display())))?;
        self.files.push(name.to_string());
        Ok(())
    }

    fn write_json(&mut self, name: &str, mut value: Value) -> Result<(), Error> {
        if let Value::Object(map) = &mut value {
            map.insert("manifest_hash".into(), Value::String(self.hash.clone()));
            map.insert("config".into(), self.config.clone());
        }
        self.write(name, &(serde_json::to_string_pretty(&value).expect("json") + "\n"))
    }

    fn write_csv(&mut self, name: &str, body: &str) -> Result<(), Error> {
        self.write(name, &format!("# manifest {}\n{body}", self.hash))
    }

    fn finish(mut self) -> Result<(), Error> {
        let files = self.files.clone();
        self.write_json("manifest.json", json!({ "files": files }))?;
        for f in &self.files {
            println!("{}", self.out.join(f).display());
        }
        Ok(())
    }
}

fn metric_of(common: &Common) -> Result<ConformalMetric, Error> {
    spec::metric(common.metric.as_deref().unwrap_or("round"))
}

fn shoot_options(common: &Common) -> ShootOptions {
    ShootOptions { tol: common.tol, ..Default::default() }
}

fn simulate(args: &SimulateArgs) -> Result<(), Error> {
    let c = &args.common;
    let m = metric_of(c)?;
    let k = spec::curvature_or_default(c.k.as_deref(), c.k0, c.eps)?;
    let kind = match args.kind {
        Kind::Prescribed => FlowKind::Prescribed,
        Kind::Magnetic => FlowKind::Magnetic,
    };
    let north = maggeo::sphere_geometry::Vec3::z();
    let r = k_to_r(k.value(&north)).unwrap_or(1.0);
    let x = match &args.x {
        Some(s) => spec::vec3(s, "--x")?,
        None => maggeo::sphere_geometry::Vec3::new(r, 0.0, (1.0 - r * r).sqrt()),
    };
    if (x.norm() - 1.0).abs() > 1e-9 {
        return Err(Error::Config("--x: start point must be on the unit sphere".into()));
    }
    let v = match &args.v {
        Some(s) => spec::vec3(s, "--v")?,
        None => maggeo::sphere_geometry::Vec3::y(),
    };
    let mut s0 = PhaseState::new(x, v);
    if kind == FlowKind::Prescribed || args.v.is_none() {
        s0 = s0.with_speed(&m, 1.0);
    }
    let time = args.time.unwrap_or(2.0 * std::f64::consts::PI * r);
    let traj = integrate(&m, &k, &s0, time, c.tol, kind)?;
    let mut man = Manifest::new("simulate", args, &c.out)?;
    man.write_csv("trajectory.csv", &traj.to_csv(&m))?;
    man.write_json(
        "summary.json",
        json!({
            "metric": c.metric.clone().unwrap_or_else(|| "round".into()),
            "k": k.id(),
            "tol": c.tol,
            "closure_error": traj.last().distance(&s0),
            "speed_drift": traj.speed_drift,
            "steps": traj.times.len(),
        }),
    )?;
    man.finish()
}

/// A `--k` string that reproduces the curvature of this run.
fn curvature_spec(c: &Common) -> String {
    c.k.clone().unwrap_or_else(|| {
        let sign = if c.eps.is_sign_negative() { '-' } else { '+' };
        format!("{:?} {sign} {:?}*z", c.k0, c.eps.abs())
    })
}

fn find(args: &FindArgs) -> Result<(), Error> {
    let c = &args.common;
    let m = metric_of(c)?;
    let k = spec::curvature_or_default(c.k.as_deref(), c.k0, c.eps)?;
    let rep = multistart_search(&m, &k, args.seeds, c.rng, &shoot_options(c))?;
    let mut cat = catalog_json(&rep.orbits);
    if let Value::Object(map) = &mut cat {
        map.insert(
            "search".into(),
            json!({
                "attempts": rep.attempts,
                "converged": rep.converged,
                "duplicates": rep.duplicates,
                "failures": rep.failures,
                "simple_orbits": rep.simple_orbits().len(),
            }),
        );
        map.insert("metric".into(), json!(c.metric.clone().unwrap_or_else(|| "round".into())));
        map.insert("k".into(), json!(curvature_spec(c)));
    }
    let mut man = Manifest::new("find", args, &c.out)?;
    man.write_json("catalog.json", cat)?;
    man.finish()
}

fn load_catalog(path: &Path) -> Result<Value, Error> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("--catalog {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Config(format!("--catalog {}: {e}", path.display())))
}

/// Orbits of a catalog re-integrated and classified under the given (or catalogued) data.
fn catalog_orbits(common: &Common, path: &Path) -> Result<(ConformalMetric, maggeo::magnetic_flow::CurvatureFunction, Vec<ClosedOrbit>), Error> {
    let cat = load_catalog(path)?;
    let metric_spec = common
        .metric
        .clone()
        .or_else(|| cat.get("metric").and_then(|v| v.as_str()).map(String::from))
        .unwrap_or_else(|| "round".into());
    let m = spec::metric(&metric_spec)?;
    let k = match (&common.k, cat.get("k").and_then(|v| v.as_str())) {
        (Some(s), _) => spec::curvature(s)?,
        (None, Some(s)) => spec::curvature(s)?,
        (None, None) => spec::curvature_or_default(None, common.k0, common.eps)?,
    };
    let opts = shoot_options(common);
    let mut orbits = Vec::new();
    for (state, period, seed) in catalog_entries(&cat)? {
        let mut o = orbit_from_state(&m, &k, FlowKind::Prescribed, &state, period, common.tol)?;
        o.seed_id = seed;
        classify(&m, &k, &mut o, &opts)?;
        orbits.push(o);
    }
    Ok((m, k, orbits))
}

fn index(args: &IndexArgs) -> Result<(), Error> {
    let (m, k, orbits) = catalog_orbits(&args.common, &args.catalog)?;
    let refs: Vec<&ClosedOrbit> = orbits.iter().collect();
    let sum = degree_sum(&refs).ok();
    let monodromies = orbits
        .iter()
        .map(|o| monodromy(&m, &k, &o.trajectory, o.kind).map(|mono| mono.to_json()))
        .collect::<Result<Vec<_>, Error>>()?;
    let mut man = Manifest::new("index", args, &args.common.out)?;
    man.write_json(
        "degrees.json",
        json!({
            "degrees": orbits.iter().map(|o| o.degree).collect::<Vec<_>>(),
            "index": orbits.iter().map(|o| o.index).collect::<Vec<_>>(),
            "degree_sum": sum,
        }),
    )?;
    man.write_json("monodromy.json", json!({ "orbits": monodromies }))?;
    man.finish()?;
    for (i, o) in orbits.iter().enumerate() {
        if let (Some(idx), Some(d)) = (&o.index, o.degree) {
            if idx.index > 1 {
                return Err(Error::InvariantViolation(format!("orbit {i}: fixed-point index {} exceeds 1", idx.index)));
            }
            if d != -idx.index {
                return Err(Error::InvariantViolation(format!("orbit {i}: degree {d} is not minus the index {}", idx.index)));
            }
        }
    }
    if let Some(o) = orbits.iter().find(|o| o.degree.is_none()) {
        let certificate = o.index.as_ref().map_or(0.0, |i| i.certificate);
        return Err(Error::UncertifiedIndex { certificate, noise: 0.0 });
    }
    Ok(())
}

fn reduce(args: &ReduceArgs) -> Result<(), Error> {
    let c = &args.common;
    let k1 = spec::curvature(&args.k1)?;
    let r = k_to_r(c.k0)?;
    let zeros = reduced_zeros(&k1, r)?;
    let round = ConformalMetric::round();
    let seeds: Vec<Value> = zeros
        .iter()
        .filter(|z| !z.degenerate)
        .map(|z| {
            let s = seed_from_reduction(&round, c.k0, z, c.eps)?;
            Ok(json!({ "x": s.state.x.as_slice(), "v": s.state.v.as_slice(), "period": s.period, "predicted_degree": s.predicted_degree }))
        })
        .collect::<Result<_, Error>>()?;
    let mut report = report_json(c.k0, &k1, &zeros);
    if let Value::Object(map) = &mut report {
        map.insert("seeds".into(), Value::Array(seeds));
        map.insert("eps".into(), json!(c.eps));
    }
    let mut man = Manifest::new("reduce", args, &c.out)?;
    man.write_json("reduction.json", report)?;
    man.finish()
}

fn run_audit(args: &AuditArgs) -> Result<(), Error> {
    let c = &args.common;
    let (m, k, orbits) = match &args.catalog {
        Some(path) => catalog_orbits(c, path)?,
        None => {
            let m = metric_of(c)?;
            let k = spec::curvature_or_default(c.k.as_deref(), c.k0, c.eps)?;
            let orbits = multistart_search(&m, &k, args.seeds, c.rng, &shoot_options(c))?.orbits;
            (m, k, orbits)
        }
    };
    let report = audit(&m, &k, &orbits, args.inj)?;
    let mut man = Manifest::new("audit", args, &c.out)?;
    man.write_json("audit.json", serde_json::to_value(&report).expect("report serializes"))?;
    man.finish()
}

fn run_continue(args: &ContinueArgs) -> Result<(), Error> {
    let c = &args.common;
    let m = metric_of(c)?;
    let k = spec::curvature_or_default(c.k.as_deref(), c.k0, c.eps)?;
    let opts = ContinuationOptions {
        steps: args.steps,
        regularization: args.regularization,
        shoot: shoot_options(c),
        ..Default::default()
    };
    let log = homotopy_continuation(&m, &k, c.k0, &opts)?;
    let mut man = Manifest::new("continue", args, &c.out)?;
    man.write_csv("continuation.csv", &log.to_csv())?;
    man.write_json(
        "continuation.json",
        json!({
            "start_k": log.start_k,
            "warnings": log.warnings,
            "branches": log.branches.iter().map(|b| json!({
                "id": b.id,
                "axis": b.axis.as_slice(),
                "predicted_degree": b.predicted_degree,
                "status": b.status,
                "folds": b.folds,
                "final_degree": b.final_orbit.as_ref().and_then(|o| o.degree),
            })).collect::<Vec<_>>(),
            "degree_sums": log.degree_sums.iter().map(|(s, t, d)| json!({"stage": s, "t": t, "sum": d})).collect::<Vec<_>>(),
            "final_degree_sum": log.final_degree_sum(),
        }),
    )?;
    man.finish()?;
    if let Some(b) = log.branches.iter().find(|b| b.status != BranchStatus::Completed) {
        eprintln!("branch {} did not reach t = 1: {:?}", b.id, b.status);
        return Err(Error::NoConvergence { iterations: b.id, residual: f64::NAN });
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Find(a) => find(a),
        Command::Index(a) => index(a),
        Command::Reduce(a) => reduce(a),
        Command::Audit(a) => run_audit(a),
        Command::Continue(a) => run_continue(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
