//! Two-stage homotopy (metric, then curvature function) with pseudo-arclength
//! tracking of closed orbits and degree bookkeeping.

use nalgebra::{Matrix3, Vector2, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_orbits::{classify, shoot, ClosedOrbit, ShootOptions};
use crate::error::{Error, Result};
use crate::magnetic_flow::{CurvatureFunction, FlowKind};
use crate::poincare::{return_coords, ReturnOptions, Section};
use crate::poly::Poly3;
use crate::reduction::{k_to_r, reduced_zeros, seed_from_reduction};
use crate::sphere_geometry::{ConformalMetric, Vec3};

use super::{hypothesis_check, Verdict};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Metric,
    Curvature,
}

#[derive(Clone, Debug)]
pub struct ContinuationOptions {
    pub steps: usize,
    /// Amplitude of the symmetry-breaking term added to k₀ at the start.
    pub regularization: f64,
    /// Overrides the regularized start curvature function.
    pub start_k: Option<CurvatureFunction>,
    pub max_halvings: u32,
    pub shoot: ShootOptions,
    pub inj: Option<f64>,
}

impl Default for ContinuationOptions {
    fn default() -> Self {
        Self { steps: 10, regularization: 0.01, start_k: None, max_halvings: 4, shoot: ShootOptions::default(), inj: None }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ContinuationRecord {
    pub stage: Stage,
    pub t: f64,
    pub branch: usize,
    pub residual: f64,
    pub degree: Option<i32>,
    pub period: f64,
    pub det_dp_minus_id: f64,
    pub x0: [f64; 3],
    pub v0: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "status")]
pub enum BranchStatus {
    Completed,
    Terminated { stage: Stage, t: f64, reason: String },
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub id: usize,
    pub axis: Vec3,
    pub predicted_degree: i32,
    pub status: BranchStatus,
    pub final_orbit: Option<ClosedOrbit>,
    pub folds: usize,
}

#[derive(Clone, Debug)]
pub struct ContinuationLog {
    pub records: Vec<ContinuationRecord>,
    pub branches: Vec<Branch>,
    pub warnings: Vec<String>,
    pub start_k: String,
    /// Σ degrees over branches, evaluated at every recorded (stage, t).
    pub degree_sums: Vec<(Stage, f64, Option<i32>)>,
}

impl ContinuationLog {
    pub fn terminated(&self) -> usize {
        self.branches.iter().filter(|b| b.status != BranchStatus::Completed).count()
    }

    pub fn final_degree_sum(&self) -> Option<i32> {
        self.branches.iter().map(|b| b.final_orbit.as_ref().and_then(|o| o.degree)).sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("stage,t,branch,residual,degree,period\n");
        for r in &self.records {
            let stage = match r.stage {
                Stage::Metric => "metric",
                Stage::Curvature => "curvature",
            };
            let deg = r.degree.map(|d| d.to_string()).unwrap_or_else(|| "NA".into());
            s.push_str(&format!("{stage},{:.12},{},{:.3e},{deg},{:.12}\n", r.t, r.branch, r.residual, r.period));
        }
        s
    }
}

fn poly_of(k: &CurvatureFunction) -> Result<Poly3> {
    k.poly().cloned().ok_or_else(|| Error::Unsupported("continuation needs polynomial curvature functions".into()))
}

fn blend_k(a: &Poly3, b: &Poly3, t: f64) -> CurvatureFunction {
    CurvatureFunction::from_poly(a.scale(1.0 - t).add(&b.scale(t)).simplified(), format!("k@t={t}"))
}

/// The start curvature k₀ + δ·d with d the non-constant part of the target
/// scaled to sup ≤ 1, or ⟨x, e₃⟩ when the target has no non-constant part.
fn regularized_start(k0: f64, target: &Poly3, delta: f64) -> Poly3 {
    let dir = Poly3 { terms: target.terms.iter().filter(|m| m.exps != [0, 0, 0]).cloned().collect() }.simplified();
    let base = Poly3::constant(k0);
    let amp = dir.sphere_abs_bound();
    if dir.is_zero() || amp < 1e-12 {
        base.add(&Poly3::linear(Vec3::z()).scale(delta))
    } else {
        base.add(&dir.scale(delta / amp))
    }
}

struct Homotopy {
    metric_target: ConformalMetric,
    start_k: Poly3,
    target_k: Poly3,
}

impl Homotopy {
    fn at(&self, stage: Stage, t: f64) -> (ConformalMetric, CurvatureFunction) {
        match stage {
            Stage::Metric => (self.metric_target.blended(t), CurvatureFunction::from_poly(self.start_k.clone(), "k_start")),
            Stage::Curvature => (self.metric_target.clone(), blend_k(&self.start_k, &self.target_k, t)),
        }
    }
}

fn record(stage: Stage, t: f64, branch: usize, o: &ClosedOrbit) -> ContinuationRecord {
    let det = o.dp.map(|d| (d - nalgebra::Matrix2::identity()).determinant()).unwrap_or(f64::NAN);
    ContinuationRecord {
        stage,
        t,
        branch,
        residual: o.residual,
        degree: o.degree,
        period: o.period,
        det_dp_minus_id: det,
        x0: [o.initial.x.x, o.initial.x.y, o.initial.x.z],
        v0: [o.initial.v.x, o.initial.v.y, o.initial.v.z],
    }
}

/// G(z, t) = P_t(z) − z in a fixed section.
fn residual_map(h: &Homotopy, stage: Stage, sec: &Section, y: &Vector3<f64>, opts: &ReturnOptions) -> Result<Vector2<f64>> {
    let (m, k) = h.at(stage, y[2]);
    let z = Vector2::new(y[0], y[1]);
    let (p, _, _) = return_coords(&m, &k, sec, &z, opts)?;
    Ok(p - z)
}

fn jacobian(h: &Homotopy, stage: Stage, sec: &Section, y: &Vector3<f64>, g0: &Vector2<f64>, opts: &ReturnOptions) -> Result<nalgebra::Matrix2x3<f64>> {
    let steps = [1e-6, 1e-6, 1e-6];
    let cols: Vec<Result<Vector2<f64>>> = (0..3)
        .into_par_iter()
        .map(|i| {
            let mut e = Vector3::zeros();
            e[i] = steps[i];
            Ok((residual_map(h, stage, sec, &(y + e), opts)? - g0) / steps[i])
        })
        .collect();
    let mut j = nalgebra::Matrix2x3::zeros();
    for (i, c) in cols.into_iter().enumerate() {
        j.set_column(i, &c?);
    }
    Ok(j)
}

struct StepOutcome {
    orbit: ClosedOrbit,
    t: f64,
    tangent: Vector3<f64>,
}

/// One predictor–corrector step of length `ds` from `orbit` at parameter `t`.
fn arclength_step(
    h: &Homotopy,
    stage: Stage,
    orbit: &ClosedOrbit,
    t: f64,
    prev_tangent: Option<&Vector3<f64>>,
    ds: f64,
    opts: &ContinuationOptions,
) -> Result<StepOutcome> {
    let ropts = ReturnOptions { tol: opts.shoot.tol, ..Default::default() };
    let (m, k) = h.at(stage, t);
    let sec = Section::new(&m, &k, FlowKind::Prescribed, &orbit.initial, orbit.period)?;
    let y0 = Vector3::new(0.0, 0.0, t);
    let g0 = residual_map(h, stage, &sec, &y0, &ropts)?;
    let j = jacobian(h, stage, &sec, &y0, &g0, &ropts)?;
    let mut tangent = j.row(0).transpose().cross(&j.row(1).transpose());
    if tangent.norm() < 1e-14 {
        return Err(Error::DegenerateOrbit { condition: f64::INFINITY });
    }
    tangent.normalize_mut();
    let flip = match prev_tangent {
        Some(p) => tangent.dot(p) < 0.0,
        None => tangent[2] < 0.0,
    };
    if flip {
        tangent = -tangent;
    }
    // Land exactly on t = 1 with a natural-parameter corrector.
    let landing = tangent[2] > 0.0 && t + 1.05 * ds * tangent[2] >= 1.0;
    let pred = if landing {
        let s = (1.0 - t) / tangent[2];
        let mut p = y0 + tangent * s;
        p[2] = 1.0;
        p
    } else {
        y0 + tangent * ds
    };
    let mut y = pred;
    let mut converged = false;
    for _ in 0..10 {
        let g = residual_map(h, stage, &sec, &y, &ropts)?;
        let constraint = if landing { y[2] - 1.0 } else { tangent.dot(&(y - pred)) };
        if g.norm() < opts.shoot.g_tol && constraint.abs() < 1e-12 {
            converged = true;
            break;
        }
        let jy = jacobian(h, stage, &sec, &y, &g, &ropts)?;
        let mut a = Matrix3::zeros();
        a.fixed_view_mut::<2, 3>(0, 0).copy_from(&jy);
        let last = if landing { Vector3::new(0.0, 0.0, 1.0) } else { tangent };
        a.set_row(2, &last.transpose());
        let rhs = Vector3::new(-g[0], -g[1], -constraint);
        let dy = a.lu().solve(&rhs).ok_or(Error::DegenerateOrbit { condition: f64::INFINITY })?;
        y += dy;
        if dy.norm() < 1e-14 {
            converged = g.norm() < 1e-8;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence { iterations: 10, residual: f64::NAN });
    }
    let t_new = y[2];
    let (m1, k1) = h.at(stage, t_new);
    let start = sec.state(&m1, &Vector2::new(y[0], y[1]))?;
    let mut o = shoot(&m1, &k1, FlowKind::Prescribed, &start, orbit.period, &opts.shoot)?;
    classify(&m1, &k1, &mut o, &opts.shoot)?;
    Ok(StepOutcome { orbit: o, t: t_new, tangent })
}

fn track(
    h: &Homotopy,
    stages: &[Stage],
    id: usize,
    start: ClosedOrbit,
    axis: Vec3,
    predicted: i32,
    opts: &ContinuationOptions,
) -> Result<(Branch, Vec<ContinuationRecord>)> {
    let mut records = vec![record(stages[0], 0.0, id, &start)];
    let mut orbit = start;
    let mut folds = 0;
    let base_ds = 1.0 / opts.steps.max(1) as f64;
    for &stage in stages {
        let mut t = 0.0;
        let mut ds = base_ds;
        let mut prev: Option<Vector3<f64>> = None;
        let mut halvings = 0;
        if stage != stages[0] {
            records.push(record(stage, 0.0, id, &orbit));
        }
        while t < 1.0 - 1e-12 {
            match arclength_step(h, stage, &orbit, t, prev.as_ref(), ds, opts) {
                Ok(step) => {
                    let fold = step.tangent[2] <= 0.0 || prev.is_some_and(|p: Vector3<f64>| p[2] * step.tangent[2] < 0.0);
                    if fold {
                        folds += 1;
                    }
                    if step.orbit.degree != orbit.degree && orbit.degree.is_some() && step.orbit.degree.is_some() && !fold {
                        return Err(Error::InvariantViolation(format!(
                            "branch {id}: degree changed from {:?} to {:?} at t = {} without a fold",
                            orbit.degree, step.orbit.degree, step.t
                        )));
                    }
                    records.push(record(stage, step.t, id, &step.orbit));
                    orbit = step.orbit;
                    t = step.t;
                    prev = Some(step.tangent);
                    halvings = 0;
                    ds = (ds * 2.0).min(base_ds);
                }
                Err(e @ Error::InvariantViolation(_)) => return Err(e),
                Err(e) => {
                    halvings += 1;
                    if halvings > opts.max_halvings {
                        let branch = Branch {
                            id,
                            axis,
                            predicted_degree: predicted,
                            status: BranchStatus::Terminated { stage, t, reason: e.to_string() },
                            final_orbit: None,
                            folds,
                        };
                        return Ok((branch, records));
                    }
                    ds *= 0.5;
                }
            }
        }
    }
    let branch = Branch { id, axis, predicted_degree: predicted, status: BranchStatus::Completed, final_orbit: Some(orbit), folds };
    Ok((branch, records))
}

/// Continues the orbits of (g₀, k₀ + regularization) through g_t = (1−t)g₀ + t g
/// and then k_t = (1−t)k_start + t k.
pub fn homotopy_continuation(
    metric_target: &ConformalMetric,
    k_target: &CurvatureFunction,
    k0: f64,
    opts: &ContinuationOptions,
) -> Result<ContinuationLog> {
    k_to_r(k0)?;
    let target_k = poly_of(k_target)?;
    let start_k = match &opts.start_k {
        Some(k) => poly_of(k)?,
        None => regularized_start(k0, &target_k, opts.regularization),
    };
    let h = Homotopy { metric_target: metric_target.clone(), start_k, target_k };
    let stages: Vec<Stage> =
        if metric_target.is_round() { vec![Stage::Curvature] } else { vec![Stage::Metric, Stage::Curvature] };

    let mut warnings = Vec::new();
    for &stage in &stages {
        for i in 0..=opts.steps {
            let t = i as f64 / opts.steps.max(1) as f64;
            let (m, k) = h.at(stage, t);
            if k.check_positive().is_err() {
                warnings.push(format!("{stage:?} t = {t}: k is not positive"));
            }
            let (hy, _) = hypothesis_check(&m, &k, opts.inj);
            if ![&hy.injectivity, &hy.positive_curvature, &hy.pinching].iter().any(|v| v.verdict == Verdict::Satisfied) {
                warnings.push(format!("{stage:?} t = {t}: no sufficient condition is satisfied"));
            }
        }
    }

    // Census at t = 0 from the reduction of the start perturbation.
    let round = ConformalMetric::round();
    let start_fn = CurvatureFunction::from_poly(h.start_k.clone(), "k_start");
    let direction = CurvatureFunction::from_poly(h.start_k.add(&Poly3::constant(-k0)).simplified(), "direction");
    let zeros = reduced_zeros(&direction, k_to_r(k0)?)?;
    let mut starts = Vec::new();
    for z in zeros.iter().filter(|z| !z.degenerate) {
        let seed = seed_from_reduction(&round, k0, z, opts.regularization)?;
        let mut o = shoot(&round, &start_fn, FlowKind::Prescribed, &seed.state, seed.period, &opts.shoot)?;
        classify(&round, &start_fn, &mut o, &opts.shoot)?;
        if o.degree.is_some() && o.degree != Some(seed.predicted_degree) {
            return Err(Error::InvariantViolation(format!(
                "orbit degree {:?} at axis {:?} differs from the reduced prediction {}",
                o.degree,
                z.w.as_slice(),
                seed.predicted_degree
            )));
        }
        starts.push((o, z.w, seed.predicted_degree));
    }
    // The start orbits are only meaningful on the metric stage's first problem.
    let first = h.at(stages[0], 0.0);
    debug_assert!(first.0.is_round() || stages[0] == Stage::Metric);

    let tracked: Vec<Result<(Branch, Vec<ContinuationRecord>)>> = starts
        .into_par_iter()
        .enumerate()
        .map(|(id, (o, w, p))| track(&h, &stages, id, o, w, p, opts))
        .collect();
    let mut branches = Vec::new();
    let mut records = Vec::new();
    for r in tracked {
        let (b, rec) = r?;
        branches.push(b);
        records.extend(rec);
    }
    let degree_sums = census(&records, &branches, &stages);
    Ok(ContinuationLog { records, branches, warnings, start_k: h.start_k.to_string(), degree_sums })
}

fn stage_rank(stages: &[Stage], s: Stage) -> usize {
    stages.iter().position(|&x| x == s).unwrap_or(0)
}

/// Σ degrees at every recorded point, each branch contributing its latest record.
fn census(records: &[ContinuationRecord], branches: &[Branch], stages: &[Stage]) -> Vec<(Stage, f64, Option<i32>)> {
    let key = |r: &ContinuationRecord| (stage_rank(stages, r.stage), r.t);
    let mut points: Vec<(usize, f64)> = records.iter().map(key).collect();
    points.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
    points.dedup();
    points
        .into_iter()
        .map(|(si, t)| {
            let mut sum = Some(0);
            for b in branches {
                let latest = records
                    .iter()
                    .filter(|r| r.branch == b.id && key(r) <= (si, t))
                    .max_by(|a, c| key(a).0.cmp(&key(c).0).then(key(a).1.total_cmp(&key(c).1)));
                sum = match (sum, latest.and_then(|r| r.degree)) {
                    (Some(s), Some(d)) => Some(s + d),
                    _ => None,
                };
            }
            (stages[si], t, sum)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn regularized_start_examples() {
        let target = Poly3::constant(1.0).add(&Poly3::linear(Vec3::z()).scale(0.3));
        let s = regularized_start(1.0, &target, 0.01);
        assert!((s.value(&Vec3::z()) - 1.01).abs() < 1e-12);
        assert!((s.value(&-Vec3::z()) - 0.99).abs() < 1e-12);
        let s = regularized_start(1.0, &Poly3::constant(1.0), 0.01);
        assert!((s.value(&Vec3::z()) - 1.01).abs() < 1e-12);
    }

    #[test]
    fn identity_homotopy_keeps_branches_constant() {
        let k = CurvatureFunction::linear_perturbation(1.0, 0.02, Vec3::z());
        let opts = ContinuationOptions { steps: 4, start_k: Some(k.clone()), ..Default::default() };
        let log = homotopy_continuation(&ConformalMetric::round(), &k, 1.0, &opts).unwrap();
        assert_eq!(log.branches.len(), 2);
        assert_eq!(log.terminated(), 0);
        for b in &log.branches {
            let recs: Vec<_> = log.records.iter().filter(|r| r.branch == b.id).collect();
            for r in &recs {
                assert!((r.period - recs[0].period).abs() < 1e-8);
                assert_eq!(r.degree, Some(-1));
            }
        }
        assert!(log.degree_sums.iter().all(|(_, _, s)| *s == Some(-2)));
        assert_eq!(log.final_degree_sum(), Some(-2));
        assert!(log.to_csv().lines().count() > 2);
    }

    #[test]
    fn curvature_stage_conserves_degree() {
        let k = CurvatureFunction::linear_perturbation(1.0, 0.3, Vec3::z());
        let log = homotopy_continuation(&ConformalMetric::round(), &k, 1.0, &ContinuationOptions::default()).unwrap();
        assert_eq!(log.terminated(), 0);
        assert!(log.degree_sums.iter().all(|(_, _, s)| *s == Some(-2)), "{:?}", log.degree_sums);
        assert!(log.records.iter().any(|r| (r.t - 1.0).abs() < 1e-15));
    }
}
