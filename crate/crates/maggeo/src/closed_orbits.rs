//! Closed orbits of the prescribed curvature flow: Poincaré-section shooting,
//! multistart search, deduplication modulo time shifts, and classification.

use std::collections::BTreeMap;

use nalgebra::{Matrix2, Vector2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::magnetic_flow::{integrate, CurvatureFunction, FlowKind, PhaseState, Trajectory};
use crate::poincare::{fixed_point_index, return_coords, IndexResult, ReturnOptions, Section};
use crate::sphere_geometry::{project_tangent, rotation, ConformalMetric, Vec3};
use crate::variational::monodromy;

#[derive(Clone, Copy, Debug)]
pub struct ShootOptions {
    pub tol: f64,
    pub max_iter: usize,
    pub fd_step: f64,
    pub max_step: f64,
    /// Convergence threshold on |P(z) − z|.
    pub g_tol: f64,
}

impl Default for ShootOptions {
    fn default() -> Self {
        Self { tol: 1e-12, max_iter: 60, fd_step: 1e-6, max_step: 0.25, g_tol: 1e-10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Simplicity {
    Simple,
    NotSimple,
    /// Tangential near-contact below 1e−7 without a transverse crossing.
    Inconclusive,
}

#[derive(Clone, Debug)]
pub struct ClosedOrbit {
    pub initial: PhaseState,
    pub period: f64,
    /// Phase-space closure error after one period.
    pub residual: f64,
    pub kind: FlowKind,
    pub trajectory: Trajectory,
    /// Set when the shooting Jacobian was degenerate (orbit inside a family).
    pub degenerate: bool,
    pub dp: Option<Matrix2<f64>>,
    pub index: Option<IndexResult>,
    pub degree: Option<i32>,
    pub simple: Option<Simplicity>,
    pub multiplicity: Option<i32>,
    pub seed_id: Option<usize>,
}

impl ClosedOrbit {
    pub fn samples(&self, n: usize) -> Vec<PhaseState> {
        self.trajectory.sample_periodic(n)
    }

    pub fn is_simple(&self) -> bool {
        self.simple == Some(Simplicity::Simple)
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "initial": { "x": self.initial.x.as_slice(), "v": self.initial.v.as_slice() },
            "period": self.period,
            "residual": self.residual,
            "degree": self.degree,
            "simple": self.simple,
            "multiplicity": self.multiplicity,
            "degenerate": self.degenerate,
            "dP": self.dp.map(|d| [d[(0, 0)], d[(0, 1)], d[(1, 0)], d[(1, 1)]]),
            "index": self.index,
            "provenance": { "seed_id": self.seed_id },
        })
    }
}

/// Re-integrates a catalogued orbit and checks that it closes.
pub fn orbit_from_state(
    m: &ConformalMetric,
    k: &CurvatureFunction,
    kind: FlowKind,
    initial: &PhaseState,
    period: f64,
    tol: f64,
) -> Result<ClosedOrbit> {
    if !(period > 0.0) {
        return Err(Error::Contract(format!("orbit period {period} is not positive")));
    }
    let opts = ShootOptions { tol, ..Default::default() };
    finish(m, k, kind, initial, period, &opts, false)
        .map_err(|e| match e {
            Error::NoConvergence { residual, .. } => Error::Contract(format!("orbit does not close (residual {residual:e})")),
            other => other,
        })
}

/// Initial states, periods and seed ids from a catalog written by [`catalog_json`].
pub fn catalog_entries(catalog: &serde_json::Value) -> Result<Vec<(PhaseState, f64, Option<usize>)>> {
    let orbits = catalog
        .get("orbits")
        .and_then(|o| o.as_array())
        .ok_or_else(|| Error::Config("catalog: missing key 'orbits'".into()))?;
    let vec3 = |v: &serde_json::Value, key: &str, i: usize| -> Result<Vec3> {
        let a: Vec<f64> = v
            .get(key)
            .and_then(|x| x.as_array())
            .map(|a| a.iter().filter_map(|x| x.as_f64()).collect())
            .unwrap_or_default();
        if a.len() != 3 {
            return Err(Error::Config(format!("catalog: orbits[{i}].initial.{key} must hold 3 numbers")));
        }
        Ok(Vec3::new(a[0], a[1], a[2]))
    };
    orbits
        .iter()
        .enumerate()
        .map(|(i, o)| {
            let init = o.get("initial").ok_or_else(|| Error::Config(format!("catalog: orbits[{i}] missing key 'initial'")))?;
            let period = o
                .get("period")
                .and_then(|p| p.as_f64())
                .ok_or_else(|| Error::Config(format!("catalog: orbits[{i}] missing key 'period'")))?;
            let seed = o.pointer("/provenance/seed_id").and_then(|s| s.as_u64()).map(|s| s as usize);
            Ok((PhaseState::new(vec3(init, "x", i)?, vec3(init, "v", i)?), period, seed))
        })
        .collect()
}

pub fn catalog_json(orbits: &[ClosedOrbit]) -> serde_json::Value {
    serde_json::json!({ "orbits": orbits.iter().map(|o| o.to_json()).collect::<Vec<_>>() })
}

/// Length 2π/√(k² + K) of a circle of geodesic curvature k in constant curvature K,
/// evaluated with local values at unit g-speed.
pub fn period_guess(m: &ConformalMetric, k: &CurvatureFunction, x: &Vec3) -> f64 {
    let kx = k.value(x);
    let q = kx * kx + m.gauss_curvature(x);
    if q > 1e-6 {
        2.0 * std::f64::consts::PI / q.sqrt()
    } else {
        2.0 * std::f64::consts::PI
    }
}

struct Newton2 {
    step: Vector2<f64>,
    condition: f64,
    sigma_max: f64,
}

fn min_norm_step(j: &Matrix2<f64>, g: &Vector2<f64>) -> Newton2 {
    let svd = j.svd(true, true);
    let s = svd.singular_values;
    let sigma_max = s.max();
    let sigma_min = s.min();
    let condition = if sigma_min > 0.0 { sigma_max / sigma_min } else { f64::INFINITY };
    let u = svd.u.unwrap();
    let vt = svd.v_t.unwrap();
    let mut step = Vector2::zeros();
    for i in 0..2 {
        if s[i] > 1e-8 * sigma_max && s[i] > 0.0 {
            let coef = u.column(i).dot(g) / s[i];
            step -= vt.row(i).transpose() * coef;
        }
    }
    Newton2 { step, condition, sigma_max }
}

/// Newton iteration on G(z) = P(z) − z in a section recentred after every step.
pub fn shoot(
    m: &ConformalMetric,
    k: &CurvatureFunction,
    kind: FlowKind,
    guess: &PhaseState,
    period: f64,
    opts: &ShootOptions,
) -> Result<ClosedOrbit> {
    if !(guess.v.norm() > 0.0) {
        return Err(Error::Contract("shooting guess has zero velocity".into()));
    }
    let start = match kind {
        FlowKind::Prescribed => PhaseState::new(guess.x, guess.v).with_speed(m, 1.0),
        FlowKind::Magnetic => PhaseState::new(guess.x, guess.v),
    };
    let ropts = ReturnOptions { tol: opts.tol, ..Default::default() };
    let mut sec = Section::new(m, k, kind, &start, period)?;
    let zero = Vector2::zeros();
    let mut g_norm = f64::INFINITY;
    let mut degenerate = false;
    for _ in 0..opts.max_iter {
        let (p0, t0, _) = return_coords(m, k, &sec, &zero, &ropts)?;
        sec.period_guess = t0;
        let g0 = p0;
        g_norm = g0.norm();
        if g_norm < opts.g_tol {
            return finish(m, k, kind, &sec.base, t0, opts, degenerate);
        }
        let h = opts.fd_step;
        let cols: Vec<Result<Vector2<f64>>> = (0..2)
            .into_par_iter()
            .map(|j| {
                let mut e = Vector2::zeros();
                e[j] = h;
                let (p, _, _) = return_coords(m, k, &sec, &e, &ropts)?;
                Ok((p - e - g0) / h)
            })
            .collect();
        let mut jac = Matrix2::zeros();
        for (j, c) in cols.into_iter().enumerate() {
            jac.set_column(j, &c?);
        }
        let newton = min_norm_step(&jac, &g0);
        degenerate = newton.condition > 1e12 || newton.sigma_max < 1e-7;
        if degenerate && g_norm > 1e-8 {
            return Err(Error::DegenerateOrbit { condition: newton.condition });
        }
        let mut dz = newton.step;
        if dz.norm() > opts.max_step {
            dz *= opts.max_step / dz.norm();
        }
        if dz.norm() < 1e-14 {
            break;
        }
        // Backtracking on |G|.
        let mut accepted = None;
        for _ in 0..8 {
            if let Ok((p, t, _)) = return_coords(m, k, &sec, &dz, &ropts) {
                if (p - dz).norm() < g_norm {
                    accepted = Some((dz, t));
                    break;
                }
            }
            dz *= 0.5;
        }
        let (dz, t) = match accepted {
            Some(a) => a,
            None => break,
        };
        let mut next = sec.recentred(m, k, &dz)?;
        next.period_guess = t;
        sec = next;
    }
    Err(Error::NoConvergence { iterations: opts.max_iter, residual: g_norm })
}

fn finish(
    m: &ConformalMetric,
    k: &CurvatureFunction,
    kind: FlowKind,
    start: &PhaseState,
    period: f64,
    opts: &ShootOptions,
    degenerate: bool,
) -> Result<ClosedOrbit> {
    let trajectory = integrate(m, k, start, period, opts.tol, kind)?;
    let residual = trajectory.last().distance(start);
    if residual > 1e-8 {
        return Err(Error::NoConvergence { iterations: 0, residual });
    }
    Ok(ClosedOrbit {
        initial: *start,
        period,
        residual,
        kind,
        trajectory,
        degenerate,
        dp: None,
        index: None,
        degree: None,
        simple: None,
        multiplicity: None,
        seed_id: None,
    })
}

/// Radius of the probe circle for the winding fallback.
pub const INDEX_RADIUS: f64 = 1e-3;

/// Fills dP, index, degree and simplicity. Degenerate or uncertified orbits keep
/// `degree = None`.
pub fn classify(m: &ConformalMetric, k: &CurvatureFunction, orbit: &mut ClosedOrbit, opts: &ShootOptions) -> Result<()> {
    let pts: Vec<Vec3> = orbit.samples(1024).iter().map(|s| s.x).collect();
    let mult = covering_multiplicity(&pts);
    orbit.multiplicity = Some(mult);
    orbit.simple = Some(simplicity(&pts, mult));
    let mono = monodromy(m, k, &orbit.trajectory, orbit.kind)?;
    let dp = mono.reduced_block();
    orbit.dp = Some(dp);
    let sec = Section::new(m, k, orbit.kind, &orbit.initial, orbit.period)?;
    let ropts = ReturnOptions { tol: opts.tol, ..Default::default() };
    match fixed_point_index(m, k, &sec, Some(&dp), INDEX_RADIUS, &ropts) {
        Ok(idx) => {
            orbit.index = Some(idx);
            orbit.degree = Some(-idx.index);
            Ok(())
        }
        Err(Error::UncertifiedIndex { .. }) => {
            orbit.degenerate = true;
            Ok(())
        }
        Err(e) => Err(e),
    }
}

/// Quasi-uniform unit-speed seeds: rotated Fibonacci positions × 8 directions.
pub fn seeds(m: &ConformalMetric, n_seeds: usize, rng_seed: u64) -> Vec<PhaseState> {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let axis = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
    let axis = if axis.norm() > 1e-3 { axis.normalize() } else { Vec3::z() };
    let rot = rotation(&axis, rng.gen_range(0.0..2.0 * std::f64::consts::PI));
    let n_pos = n_seeds.div_ceil(8).max(1);
    let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
    let mut out = Vec::with_capacity(n_seeds);
    'outer: for i in 0..n_pos {
        let z = 1.0 - (2.0 * i as f64 + 1.0) / n_pos as f64;
        let rho = (1.0 - z * z).sqrt();
        let phi = golden * i as f64;
        let x = rot * Vec3::new(rho * phi.cos(), rho * phi.sin(), z);
        let e1 = crate::sphere_geometry::any_orthonormal(&x);
        let e2 = x.cross(&e1);
        for d in 0..8 {
            if out.len() == n_seeds {
                break 'outer;
            }
            let a = std::f64::consts::PI * d as f64 / 4.0;
            out.push(PhaseState::new(x, e1 * a.cos() + e2 * a.sin()).with_speed(m, 1.0));
        }
    }
    out
}

#[derive(Clone, Debug)]
pub struct MultistartReport {
    pub orbits: Vec<ClosedOrbit>,
    pub attempts: usize,
    pub converged: usize,
    pub duplicates: usize,
    pub failures: BTreeMap<String, usize>,
}

impl MultistartReport {
    pub fn simple_orbits(&self) -> Vec<&ClosedOrbit> {
        self.orbits.iter().filter(|o| o.is_simple()).collect()
    }
}

fn failure_kind(e: &Error) -> &'static str {
    match e {
        Error::NoConvergence { .. } => "no_convergence",
        Error::DegenerateOrbit { .. } => "degenerate_orbit",
        Error::NoReturn { .. } => "no_return",
        Error::IntegrationFailure { .. } => "integration_failure",
        Error::Contract(_) => "contract",
        _ => "other",
    }
}

pub fn multistart_search(
    m: &ConformalMetric,
    k: &CurvatureFunction,
    n_seeds: usize,
    rng_seed: u64,
    opts: &ShootOptions,
) -> Result<MultistartReport> {
    if n_seeds == 0 {
        return Err(Error::Contract("multistart needs at least one seed".into()));
    }
    let kind = FlowKind::Prescribed;
    let seeds = seeds(m, n_seeds, rng_seed);
    let results: Vec<Result<ClosedOrbit>> = seeds
        .par_iter()
        .enumerate()
        .map(|(i, s)| {
            let mut o = shoot(m, k, kind, s, period_guess(m, k, &s.x), opts)?;
            o.seed_id = Some(i);
            Ok(o)
        })
        .collect();
    let mut failures = BTreeMap::new();
    let mut unique: Vec<ClosedOrbit> = Vec::new();
    let mut converged = 0;
    let mut duplicates = 0;
    for r in results {
        match r {
            Ok(o) => {
                converged += 1;
                if unique.iter().any(|u| same_orbit(u, &o)) {
                    duplicates += 1;
                } else {
                    unique.push(o);
                }
            }
            Err(e) => *failures.entry(failure_kind(&e).to_string()).or_insert(0) += 1,
        }
    }
    let classified: Vec<Result<ClosedOrbit>> = unique
        .into_par_iter()
        .map(|mut o| {
            classify(m, k, &mut o, opts)?;
            Ok(o)
        })
        .collect();
    let orbits = classified.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(MultistartReport { orbits, attempts: seeds.len(), converged, duplicates, failures })
}

/// Σ degrees over pairwise distinct nondegenerate orbits.
pub fn degree_sum(orbits: &[&ClosedOrbit]) -> Result<i32> {
    let mut total = 0;
    for o in orbits {
        match o.degree {
            Some(d) if !o.degenerate => total += d,
            _ => return Err(Error::Contract("degree sum over a degenerate orbit".into())),
        }
    }
    Ok(total)
}

/// Distance threshold for identifying two orbits modulo time shifts.
pub const DEDUP_THRESHOLD: f64 = 1e-5;

fn mean_point(o: &ClosedOrbit) -> Vec3 {
    let pts = o.samples(64);
    pts.iter().fold(Vec3::zeros(), |a, s| a + s.x) / pts.len() as f64
}

/// Same geometric orbit modulo the time-shift action.
pub fn same_orbit(a: &ClosedOrbit, b: &ClosedOrbit) -> bool {
    dedup_distance(a, b) < DEDUP_THRESHOLD
}

/// Phase-aligned pointwise phase-space distance (an upper bound on the Hausdorff
/// distance), or infinity when the cheap prefilter already separates the orbits.
pub fn dedup_distance(a: &ClosedOrbit, b: &ClosedOrbit) -> f64 {
    let (ta, tb) = (a.period, b.period);
    if (ta - tb).abs() > 1e-4 * ta.max(tb) {
        return f64::INFINITY;
    }
    if (mean_point(a) - mean_point(b)).norm() > 1e-3 {
        return f64::INFINITY;
    }
    let s0 = a.initial;
    let t0 = b.trajectory.times[0];
    let dist = |phi: f64| b.trajectory.state_at(t0 + phi.rem_euclid(tb)).distance(&s0);
    let n = 256;
    let mut best = (0.0, f64::INFINITY);
    for i in 0..n {
        let phi = tb * i as f64 / n as f64;
        let d = dist(phi);
        if d < best.1 {
            best = (phi, d);
        }
    }
    // Golden-section refinement in the bracket around the coarse minimum.
    let gr = (5f64.sqrt() - 1.0) / 2.0;
    let (mut lo, mut hi) = (best.0 - tb / n as f64, best.0 + tb / n as f64);
    let mut c = hi - gr * (hi - lo);
    let mut d = lo + gr * (hi - lo);
    let (mut fc, mut fd) = (dist(c), dist(d));
    for _ in 0..80 {
        if fc < fd {
            hi = d;
            d = c;
            fd = fc;
            c = hi - gr * (hi - lo);
            fc = dist(c);
        } else {
            lo = c;
            c = d;
            fc = fd;
            d = lo + gr * (hi - lo);
            fd = dist(d);
        }
    }
    let phi = 0.5 * (lo + hi);
    let ta0 = a.trajectory.times[0];
    (0..n)
        .map(|i| {
            let u = i as f64 / n as f64;
            let sa = a.trajectory.state_at(ta0 + ta * u);
            let sb = b.trajectory.state_at(t0 + (phi + tb * u).rem_euclid(tb));
            sa.distance(&sb)
        })
        .fold(0.0, f64::max)
}

/// Projection point far from the curve and a right-handed plane basis.
fn projection_pole(pts: &[Vec3]) -> (Vec3, Vec3, Vec3) {
    let grid = crate::sphere_geometry::IcoGrid::new(2);
    let mut best = (Vec3::z(), -1.0);
    for t in &grid.triangles {
        for q in [t.a, t.centroid()] {
            let d = pts.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (q, d);
            }
        }
    }
    let q = best.0;
    let e1 = crate::sphere_geometry::any_orthonormal(&q);
    let e2 = q.cross(&e1);
    (q, e1, e2)
}

/// Orientation-preserving stereographic projection from `q` (outward normal on the sphere).
pub fn stereographic(p: &Vec3, q: &Vec3, e1: &Vec3, e2: &Vec3) -> Vector2<f64> {
    let den = 1.0 - p.dot(q);
    Vector2::new(p.dot(e2), p.dot(e1)) / den
}

pub fn winding_number(poly: &[Vector2<f64>], c: &Vector2<f64>) -> i32 {
    let n = poly.len();
    let mut total = 0.0;
    for i in 0..n {
        let a = poly[i] - c;
        let b = poly[(i + 1) % n] - c;
        total += (a.x * b.y - a.y * b.x).atan2(a.dot(&b));
    }
    (total / (2.0 * std::f64::consts::PI)).round() as i32
}

pub fn signed_area(poly: &[Vector2<f64>]) -> f64 {
    let n = poly.len();
    (0..n).map(|i| poly[i].x * poly[(i + 1) % n].y - poly[(i + 1) % n].x * poly[i].y).sum::<f64>() / 2.0
}

fn distance_to_polygon(poly: &[Vector2<f64>], c: &Vector2<f64>) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| {
            let a = poly[i];
            let b = poly[(i + 1) % n];
            let ab = b - a;
            let t = ((c - a).dot(&ab) / ab.norm_squared().max(1e-300)).clamp(0.0, 1.0);
            (a + ab * t - c).norm()
        })
        .fold(f64::INFINITY, f64::min)
}

/// Winding number of the stereographic image about its centroid, retried at four
/// jittered points; the most frequent value wins.
pub fn covering_multiplicity(pts: &[Vec3]) -> i32 {
    let (q, e1, e2) = projection_pole(pts);
    let poly: Vec<Vector2<f64>> = pts.iter().map(|p| stereographic(p, &q, &e1, &e2)).collect();
    let centroid = poly.iter().fold(Vector2::zeros(), |a, p| a + p) / poly.len() as f64;
    let scale = poly.iter().map(|p| (p - centroid).norm()).fold(0.0, f64::max);
    let mut candidates = vec![centroid];
    for i in 0..4 {
        let a = 0.7 + i as f64 * std::f64::consts::FRAC_PI_2;
        candidates.push(centroid + Vector2::new(a.cos(), a.sin()) * (0.05 * scale));
    }
    let mut counts: BTreeMap<i32, usize> = BTreeMap::new();
    for c in candidates {
        if distance_to_polygon(&poly, &c) > 1e-6 * scale {
            *counts.entry(winding_number(&poly, &c)).or_insert(0) += 1;
        }
    }
    counts
        .into_iter()
        .max_by(|a, b| a.1.cmp(&b.1).then(a.0.abs().cmp(&b.0.abs())))
        .map(|(w, _)| w)
        .unwrap_or(0)
}

fn orient(a: &Vec3, b: &Vec3, c: &Vec3) -> f64 {
    a.dot(&b.cross(c))
}

/// Chordal distance between two short arcs, approximated by segment distance.
fn segment_distance(a: &Vec3, b: &Vec3, c: &Vec3, d: &Vec3) -> f64 {
    let mut best = f64::INFINITY;
    let pd = |p: &Vec3, s0: &Vec3, s1: &Vec3| {
        let e = s1 - s0;
        let t = ((p - s0).dot(&e) / e.norm_squared().max(1e-300)).clamp(0.0, 1.0);
        (s0 + e * t - p).norm()
    };
    for (p, s0, s1) in [(a, c, d), (b, c, d), (c, a, b), (d, a, b)] {
        best = best.min(pd(p, s0, s1));
    }
    best
}

/// Transverse self-intersection test over non-adjacent arcs with a spatial hash.
pub fn simplicity(pts: &[Vec3], multiplicity: i32) -> Simplicity {
    if multiplicity.abs() >= 2 {
        return Simplicity::NotSimple;
    }
    let n = pts.len();
    let seg_len = (0..n).map(|i| (pts[(i + 1) % n] - pts[i]).norm()).fold(0.0, f64::max);
    let cell = (2.0 * seg_len).max(1e-9);
    let key = |p: &Vec3| ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64);
    let mut grid: std::collections::HashMap<(i64, i64, i64), Vec<usize>> = std::collections::HashMap::new();
    for i in 0..n {
        let mid = (pts[i] + pts[(i + 1) % n]) * 0.5;
        grid.entry(key(&mid)).or_default().push(i);
    }
    let mut near_contact = false;
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        let (kx, ky, kz) = key(&((a + b) * 0.5));
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(list) = grid.get(&(kx + dx, ky + dy, kz + dz)) else { continue };
                    for &j in list {
                        if j <= i {
                            continue;
                        }
                        let gap = (j - i).min(n + i - j);
                        if gap < 2 {
                            continue;
                        }
                        let (c, d) = (pts[j], pts[(j + 1) % n]);
                        let o1 = orient(&a, &b, &c);
                        let o2 = orient(&a, &b, &d);
                        let o3 = orient(&c, &d, &a);
                        let o4 = orient(&c, &d, &b);
                        if o1 * o2 < 0.0 && o3 * o4 < 0.0 && a.dot(&c) > 0.0 {
                            return Simplicity::NotSimple;
                        }
                        if segment_distance(&a, &b, &c, &d) < 1e-7 {
                            near_contact = true;
                        }
                    }
                }
            }
        }
    }
    if near_contact {
        Simplicity::Inconclusive
    } else {
        Simplicity::Simple
    }
}

/// Axis (normalized mean point) and extreme distances of the points from it.
pub fn latitude_fit(pts: &[Vec3]) -> (Vec3, f64, f64) {
    let mean = pts.iter().fold(Vec3::zeros(), |a, p| a + p) / pts.len() as f64;
    let axis = if mean.norm() > 1e-12 { mean.normalize() } else { Vec3::z() };
    let d: Vec<f64> = pts.iter().map(|p| project_tangent(&axis, p).norm()).collect();
    let lo = d.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = d.iter().cloned().fold(0.0, f64::max);
    (axis, lo, hi)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::magnetic_flow::{acceleration, geodesic_curvature};
    use crate::variational::{circle_jet, CircleFrame};
    use std::f64::consts::PI;

    fn circle_points(r: f64, turns: usize, n: usize) -> Vec<Vec3> {
        let c = (1.0 - r * r).sqrt();
        (0..n)
            .map(|i| {
                let a = 2.0 * PI * turns as f64 * i as f64 / n as f64;
                Vec3::new(r * a.cos(), r * a.sin(), c)
            })
            .collect()
    }

    #[test]
    fn simplicity_fixtures() {
        let once = circle_points(0.5, 1, 400);
        assert_eq!(covering_multiplicity(&once).abs(), 1);
        assert_eq!(simplicity(&once, 1), Simplicity::Simple);
        let twice = circle_points(0.5, 2, 800);
        let m = covering_multiplicity(&twice);
        assert_eq!(m.abs(), 2);
        assert_eq!(simplicity(&twice, m), Simplicity::NotSimple);
        // Figure eight: inverse stereographic image of the lemniscate of Gerono.
        let fig8: Vec<Vec3> = (0..600)
            .map(|i| {
                let t = 2.0 * PI * i as f64 / 600.0;
                let (px, py) = (0.5 * t.cos(), 0.5 * t.sin() * t.cos());
                let s = px * px + py * py;
                Vec3::new(2.0 * px, 2.0 * py, s - 1.0) / (s + 1.0)
            })
            .collect();
        let m = covering_multiplicity(&fig8);
        assert_eq!(simplicity(&fig8, m), Simplicity::NotSimple);
    }

    #[test]
    fn shoot_converges_to_latitude_circle() {
        let m = ConformalMetric::round();
        let k = CurvatureFunction::constant(1.0);
        let f = CircleFrame::new(Vec3::y(), Vec3::x(), Vec3::z()).unwrap();
        let r = 1.0 / 2f64.sqrt();
        let (x, v, _) = circle_jet(r, &f, 0.0);
        let guess = PhaseState::new(x + Vec3::new(0.01, -0.02, 0.0), v + Vec3::new(0.0, 0.0, 0.3));
        let mut o = shoot(&m, &k, FlowKind::Prescribed, &guess, 4.0, &ShootOptions::default()).unwrap();
        let pts: Vec<Vec3> = o.samples(256).iter().map(|s| s.x).collect();
        let (_, lo, hi) = latitude_fit(&pts);
        assert!((lo - r).abs() < 1e-8 && (hi - r).abs() < 1e-8);
        classify(&m, &k, &mut o, &ShootOptions::default()).unwrap();
        assert!(o.degenerate);
        assert_eq!(o.degree, None);
        assert!(degree_sum(&[&o]).is_err());
    }

    #[test]
    fn perturbed_orbit_from_reduced_seed() {
        let m = ConformalMetric::round();
        let k = CurvatureFunction::linear_perturbation(1.0, 0.01, Vec3::z());
        let f = CircleFrame::new(Vec3::y(), Vec3::x(), Vec3::z()).unwrap();
        let r = 1.0 / 2f64.sqrt();
        let (x, v, _) = circle_jet(r, &f, 0.0);
        let mut o = shoot(&m, &k, FlowKind::Prescribed, &PhaseState::new(x, v), 2.0 * PI * r, &ShootOptions::default()).unwrap();
        assert!(o.residual < 1e-10, "{}", o.residual);
        assert!(!o.degenerate);
        classify(&m, &k, &mut o, &ShootOptions::default()).unwrap();
        assert_eq!(o.degree, Some(-1));
        assert_eq!(o.simple, Some(Simplicity::Simple));
        // Independent re-check of the equation and of the curvature identity.
        for s in o.samples(64) {
            let a = acceleration(&m, &k, FlowKind::Prescribed, &s.x, &s.v);
            let kg = geodesic_curvature(&m, &s.x, &s.v, &a);
            assert!((kg - k.value(&s.x)).abs() < 1e-6);
        }
    }

    #[test]
    fn dedup_examples() {
        let m = ConformalMetric::round();
        let k = CurvatureFunction::linear_perturbation(1.0, 0.01, Vec3::z());
        let opts = ShootOptions::default();
        let r = 1.0 / 2f64.sqrt();
        let up = CircleFrame::new(Vec3::y(), Vec3::x(), Vec3::z()).unwrap();
        let down = CircleFrame::new(Vec3::x(), Vec3::y(), -Vec3::z()).unwrap();
        let (x, v, _) = circle_jet(r, &up, 0.0);
        let a = shoot(&m, &k, FlowKind::Prescribed, &PhaseState::new(x, v), 2.0 * PI * r, &opts).unwrap();
        let shifted_start = a.trajectory.state_at(0.37 * a.period);
        let b = shoot(&m, &k, FlowKind::Prescribed, &shifted_start, a.period, &opts).unwrap();
        assert!(same_orbit(&a, &b));
        let (x, v, _) = circle_jet(r, &down, 0.0);
        let c = shoot(&m, &k, FlowKind::Prescribed, &PhaseState::new(x, v), 2.0 * PI * r, &opts).unwrap();
        assert!(!same_orbit(&a, &c));
        let k2 = CurvatureFunction::linear_perturbation(1.0, 0.011, Vec3::z());
        let d = shoot(&m, &k2, FlowKind::Prescribed, &a.initial, a.period, &opts).unwrap();
        assert!(!same_orbit(&a, &d));
    }

    #[test]
    fn degree_sum_examples() {
        assert_eq!(degree_sum(&[]).unwrap(), 0);
        let m = ConformalMetric::round();
        let k = CurvatureFunction::linear_perturbation(1.0, 0.01, Vec3::z());
        let f = CircleFrame::new(Vec3::y(), Vec3::x(), Vec3::z()).unwrap();
        let (x, v, _) = circle_jet(1.0 / 2f64.sqrt(), &f, 0.0);
        let mut o = shoot(&m, &k, FlowKind::Prescribed, &PhaseState::new(x, v), 4.4, &ShootOptions::default()).unwrap();
        classify(&m, &k, &mut o, &ShootOptions::default()).unwrap();
        assert_eq!(degree_sum(&[&o]).unwrap(), -1);
    }

    #[test]
    fn catalog_round_trip() {
        let m = ConformalMetric::round();
        let k = CurvatureFunction::linear_perturbation(1.0, 0.01, Vec3::z());
        let f = CircleFrame::new(Vec3::y(), Vec3::x(), Vec3::z()).unwrap();
        let (x, v, _) = circle_jet(1.0 / 2f64.sqrt(), &f, 0.0);
        let o = shoot(&m, &k, FlowKind::Prescribed, &PhaseState::new(x, v), 4.4, &ShootOptions::default()).unwrap();
        let text = serde_json::to_string(&catalog_json(&[o.clone()])).unwrap();
        let entries = catalog_entries(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(entries.len(), 1);
        let back = orbit_from_state(&m, &k, FlowKind::Prescribed, &entries[0].0, entries[0].1, 1e-12).unwrap();
        assert!(back.residual < 1e-9);
        let open = orbit_from_state(&m, &k, FlowKind::Prescribed, &entries[0].0, entries[0].1 * 0.9, 1e-12);
        assert!(matches!(open, Err(Error::Contract(_))));
        assert!(matches!(catalog_entries(&serde_json::json!({"orbit": []})), Err(Error::Config(_))));
    }

    #[test]
    fn seeds_are_deterministic_and_unit_speed() {
        let m = ConformalMetric::zonal(&[0.1]);
        let a = seeds(&m, 20, 9);
        let b = seeds(&m, 20, 9);
        assert_eq!(a.len(), 20);
        assert_eq!(a, b);
        assert!(a.iter().all(|s| (s.speed(&m) - 1.0).abs() < 1e-12));
        assert_ne!(seeds(&m, 20, 10), a);
    }
}
