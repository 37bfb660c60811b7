//! A priori checks on concrete (g, k): Gauss–Bonnet on found orbits, the length
//! bound, and the curvature/injectivity hypotheses; plus homotopy continuation.

mod continuation;

pub use continuation::{
    homotopy_continuation, Branch, BranchStatus, ContinuationLog, ContinuationOptions, ContinuationRecord, Stage,
};

use std::collections::HashMap;

use nalgebra::Vector2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::closed_orbits::{signed_area, stereographic, ClosedOrbit};
use crate::error::{Error, Result};
use crate::magnetic_flow::CurvatureFunction;
use crate::reduction::k_to_r;
use crate::sphere_geometry::{any_orthonormal, field_extremes, ConformalMetric, Extremes, IcoGrid, SphericalTriangle, Vec3, DEFAULT_LEVEL};

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// Samples of the orbit used as the boundary polygon.
pub const BOUNDARY_SAMPLES: usize = 2048;
/// Extra subdivision levels for cells that touch the curve.
pub const BOUNDARY_REFINEMENT: u32 = 8;
/// Nodes closer than this to the curve are not classified; their weight is split
/// evenly between the two sides and counted in the error bound.
pub const NODE_EXCLUSION: f64 = 1e-6;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GaussBonnet {
    pub line_integral: f64,
    pub interior_curvature: f64,
    pub interior_area: f64,
    pub exterior_area: f64,
    /// Quadrature volume of the whole sphere with the same cells.
    pub volume: f64,
    pub residual: f64,
    /// Area of the unclassified near-curve cells.
    pub skipped_area: f64,
    /// Largest change of the residual from reassigning the unclassified cells.
    pub error_bound: f64,
}

struct Boundary {
    polygon: Vec<Vector2<f64>>,
    points: Vec<Vec3>,
    pole: Vec3,
    e1: Vec3,
    e2: Vec3,
    /// Left side of the curve maps to the unbounded component.
    left_is_outside: bool,
    buckets: HashMap<(i64, i64, i64), Vec<usize>>,
    bucket: f64,
    half_segment: f64,
}

/// Winding number by signed edge crossings.
fn crossing_winding(poly: &[Vector2<f64>], p: &Vector2<f64>) -> i32 {
    let n = poly.len();
    let mut wn = 0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let side = (b.x - a.x) * (p.y - a.y) - (p.x - a.x) * (b.y - a.y);
        if a.y <= p.y {
            if b.y > p.y && side > 0.0 {
                wn += 1;
            }
        } else if b.y <= p.y && side < 0.0 {
            wn -= 1;
        }
    }
    wn
}

impl Boundary {
    fn new(points: Vec<Vec3>) -> Self {
        // Pole as far as possible from the curve, among a coarse grid.
        let grid = IcoGrid::new(2);
        let mut best = (Vec3::z(), -1.0);
        for t in &grid.triangles {
            let q = t.centroid();
            let d = points.iter().map(|p| (p - q).norm()).fold(f64::INFINITY, f64::min);
            if d > best.1 {
                best = (q, d);
            }
        }
        let pole = best.0;
        let e1 = any_orthonormal(&pole);
        let e2 = pole.cross(&e1);
        let polygon: Vec<Vector2<f64>> = points.iter().map(|p| stereographic(p, &pole, &e1, &e2)).collect();
        let left_is_outside = signed_area(&polygon) < 0.0;
        let n = points.len();
        let half_segment = (0..n).map(|i| (points[(i + 1) % n] - points[i]).norm()).fold(0.0, f64::max) / 2.0;
        let bucket = 0.02;
        let mut buckets: HashMap<(i64, i64, i64), Vec<usize>> = HashMap::new();
        for i in 0..n {
            let mid = (points[i] + points[(i + 1) % n]) * 0.5;
            buckets.entry(Self::key(&mid, bucket)).or_default().push(i);
        }
        Self { polygon, points, pole, e1, e2, left_is_outside, buckets, bucket, half_segment }
    }

    fn key(p: &Vec3, cell: f64) -> (i64, i64, i64) {
        ((p.x / cell).floor() as i64, (p.y / cell).floor() as i64, (p.z / cell).floor() as i64)
    }

    /// Whether `p` lies on the left of the curve (the side N_g points into).
    fn on_left(&self, p: &Vec3) -> bool {
        if (p - self.pole).norm() < 1e-12 {
            return self.left_is_outside;
        }
        let w = crossing_winding(&self.polygon, &stereographic(p, &self.pole, &self.e1, &self.e2));
        w == 1 || (w == 0 && self.left_is_outside)
    }

    fn segment_distance(&self, i: usize, p: &Vec3) -> f64 {
        let a = self.points[i];
        let b = self.points[(i + 1) % self.points.len()];
        let ab = b - a;
        let t = ((p - a).dot(&ab) / ab.norm_squared().max(1e-300)).clamp(0.0, 1.0);
        (a + ab * t - p).norm()
    }

    /// Distance to the curve if it is below `limit`, else infinity.
    fn distance_within(&self, p: &Vec3, limit: f64) -> f64 {
        let reach = limit + self.half_segment;
        let r = (reach / self.bucket).ceil() as i64;
        if r > 6 {
            return (0..self.points.len()).map(|i| self.segment_distance(i, p)).fold(f64::INFINITY, f64::min);
        }
        let (kx, ky, kz) = Self::key(p, self.bucket);
        let mut best = f64::INFINITY;
        for dx in -r..=r {
            for dy in -r..=r {
                for dz in -r..=r {
                    if let Some(list) = self.buckets.get(&(kx + dx, ky + dy, kz + dz)) {
                        for &i in list {
                            best = best.min(self.segment_distance(i, p));
                        }
                    }
                }
            }
        }
        if best < limit {
            best
        } else {
            f64::INFINITY
        }
    }
}

struct Cell {
    tri: SphericalTriangle,
    depth: u32,
}

#[derive(Clone, Copy, Default)]
struct Split {
    k_left: f64,
    k_right: f64,
    a_left: f64,
    a_right: f64,
    skipped_area: f64,
    skipped_k: f64,
    total_area: f64,
}

impl Split {
    fn merge(self, o: Self) -> Self {
        Self {
            k_left: self.k_left + o.k_left,
            k_right: self.k_right + o.k_right,
            a_left: self.a_left + o.a_left,
            a_right: self.a_right + o.a_right,
            skipped_area: self.skipped_area + o.skipped_area,
            skipped_k: self.skipped_k + o.skipped_k,
            total_area: self.total_area + o.total_area,
        }
    }
}

/// Integrates the curvature density (1 − Δ₀u) and the area density e^{2u} over
/// each side of the curve, refining cells that touch it.
fn split_integral(boundary: &Boundary, m: &ConformalMetric, level: u32) -> Split {
    let grid = IcoGrid::new(level);
    // Collected then summed in order so that reruns are bit-identical.
    let parts: Vec<Split> = grid
        .triangles
        .par_iter()
        .map(|t| {
            let mut acc = Split::default();
            let mut stack = vec![Cell { tri: *t, depth: 0 }];
            while let Some(cell) = stack.pop() {
                let c = cell.tri.centroid();
                let near = 1.5 * cell.tri.radius();
                let d = boundary.distance_within(&c, near.max(NODE_EXCLUSION));
                if d < near && cell.depth < BOUNDARY_REFINEMENT {
                    stack.extend(cell.tri.subdivide().into_iter().map(|tri| Cell { tri, depth: cell.depth + 1 }));
                    continue;
                }
                let area = cell.tri.area();
                let kv = (1.0 - m.jet(&c).lap) * area;
                let av = m.density(&c) * area;
                acc.total_area += av;
                if d < NODE_EXCLUSION {
                    acc.skipped_area += av;
                    acc.skipped_k += kv.abs();
                    acc.k_left += 0.5 * kv;
                    acc.a_left += 0.5 * av;
                    acc.k_right += 0.5 * kv;
                    acc.a_right += 0.5 * av;
                } else if boundary.on_left(&c) {
                    acc.k_left += kv;
                    acc.a_left += av;
                } else {
                    acc.k_right += kv;
                    acc.a_right += av;
                }
            }
            acc
        })
        .collect();
    parts.into_iter().fold(Split::default(), Split::merge)
}

/// |∫_γ k ds + ∫_Ω K dA − 2π| where Ω is the region N_g points into.
pub fn gauss_bonnet_residual(m: &ConformalMetric, k: &CurvatureFunction, orbit: &ClosedOrbit) -> Result<GaussBonnet> {
    gauss_bonnet_with(m, k, orbit, false, DEFAULT_LEVEL)
}

/// Same audit with the orbit orientation reversed, which selects the complementary region.
pub fn gauss_bonnet_flipped(m: &ConformalMetric, k: &CurvatureFunction, orbit: &ClosedOrbit) -> Result<GaussBonnet> {
    gauss_bonnet_with(m, k, orbit, true, DEFAULT_LEVEL)
}

pub fn gauss_bonnet_with(m: &ConformalMetric, k: &CurvatureFunction, orbit: &ClosedOrbit, flip: bool, level: u32) -> Result<GaussBonnet> {
    if orbit.simple == Some(crate::closed_orbits::Simplicity::NotSimple) {
        return Err(Error::Contract("Gauss–Bonnet audit needs a simple orbit".into()));
    }
    let samples = orbit.samples(BOUNDARY_SAMPLES);
    let dt = orbit.period / BOUNDARY_SAMPLES as f64;
    // Traversed backwards the curve has speed |v| and curvature −k.
    let sign = if flip { -1.0 } else { 1.0 };
    let line_integral = sign * samples.iter().map(|s| k.value(&s.x) * m.norm_at(&s.x, &s.v)).sum::<f64>() * dt;
    let mut points: Vec<Vec3> = samples.iter().map(|s| s.x).collect();
    if flip {
        points.reverse();
    }
    let boundary = Boundary::new(points);
    let sp = split_integral(&boundary, m, level);
    let residual = (line_integral + sp.k_left - TAU).abs();
    Ok(GaussBonnet {
        line_integral,
        interior_curvature: sp.k_left,
        interior_area: sp.a_left,
        exterior_area: sp.a_right,
        volume: sp.total_area,
        residual,
        skipped_area: sp.skipped_area,
        error_bound: 0.5 * sp.skipped_k,
    })
}

/// Closed-form audit of the latitude circle of curvature k₀ on the round sphere.
pub fn latitude_closed_form(k0: f64) -> Result<(f64, f64, f64)> {
    let r = k_to_r(k0)?;
    let c = (1.0 - r * r).sqrt();
    let line = TAU * r * k0;
    let cap = TAU * (1.0 - c);
    Ok((line, cap, (line + cap - TAU).abs()))
}

/// Quadrature volume of (S², g).
pub fn volume(m: &ConformalMetric, level: u32) -> f64 {
    let grid = IcoGrid::new(level);
    grid.triangles.iter().map(|t| t.area() * m.density(&t.centroid())).sum()
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CurvatureExtremes {
    pub k: Extremes,
    pub gauss: Extremes,
    /// sup of max(−K, 0), with the Gauss-curvature margin.
    pub sup_negative: f64,
    pub volume: f64,
    /// π / √sup K when K > 0 everywhere, else the user value if any.
    pub inj_lower_bound: Option<f64>,
    pub inj_supplied: bool,
}

pub fn curvature_extremes(m: &ConformalMetric, k: &CurvatureFunction, inj: Option<f64>) -> CurvatureExtremes {
    let kf = |x: &Vec3| k.value(x);
    let kx = field_extremes(&kf, DEFAULT_LEVEL, k.poly().map(|p| p.sphere_lipschitz_bound()));
    let gf = |x: &Vec3| m.gauss_curvature(x);
    let gx = field_extremes(&gf, DEFAULT_LEVEL, None);
    let sup_negative = (-gx.inf + gx.margin).max(0.0);
    let sup_negative = if gx.inf - gx.margin > 0.0 { 0.0 } else { sup_negative };
    let (inj_lower_bound, inj_supplied) = match inj {
        Some(v) => (Some(v), true),
        None if gx.inf - gx.margin > 0.0 => (Some(std::f64::consts::PI / (gx.sup + gx.margin).sqrt()), false),
        None => (None, false),
    };
    CurvatureExtremes { k: kx, gauss: gx, sup_negative, volume: volume(m, DEFAULT_LEVEL), inj_lower_bound, inj_supplied }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Satisfied,
    Failed,
    Indeterminate,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HypothesisVerdict {
    pub name: String,
    pub verdict: Verdict,
    pub slack: f64,
    pub margin: f64,
    pub note: String,
}

fn verdict(name: &str, slack: f64, margin: f64, note: &str) -> HypothesisVerdict {
    let v = if slack > margin {
        Verdict::Satisfied
    } else if slack < -margin {
        Verdict::Failed
    } else {
        Verdict::Indeterminate
    };
    HypothesisVerdict { name: name.into(), verdict: v, slack, margin, note: note.into() }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Hypotheses {
    pub injectivity: HypothesisVerdict,
    pub positive_curvature: HypothesisVerdict,
    pub pinching: HypothesisVerdict,
}

impl Hypotheses {
    pub fn any_satisfied(&self) -> bool {
        [&self.injectivity, &self.positive_curvature, &self.pinching].iter().any(|v| v.verdict == Verdict::Satisfied)
    }
}

/// The three sufficient conditions on (g, k), each with its numeric slack.
pub fn hypothesis_check(m: &ConformalMetric, k: &CurvatureFunction, inj: Option<f64>) -> (Hypotheses, CurvatureExtremes) {
    let ex = curvature_extremes(m, k, inj);
    let (kinf, km) = (ex.k.inf, ex.k.margin);
    let (ginf, gsup, gm) = (ex.gauss.inf, ex.gauss.sup, ex.gauss.margin);
    let injectivity = match ex.inj_lower_bound {
        Some(injv) => {
            let rhs = (TAU + ex.sup_negative * ex.volume) / injv;
            let note = if ex.inj_supplied { "user-supplied injectivity radius" } else { "conservative: inj ≥ π/√sup K" };
            // Margin propagated from k and from the curvature-based injectivity bound.
            let dinj = if ex.inj_supplied { 0.0 } else { 0.5 * gm / (gsup + gm).max(1e-12) };
            verdict("injectivity", 4.0 * kinf - rhs, 4.0 * km + rhs * dinj, note)
        }
        None => HypothesisVerdict {
            name: "injectivity".into(),
            verdict: Verdict::Indeterminate,
            slack: f64::NAN,
            margin: f64::NAN,
            note: "K ≤ 0 somewhere and no injectivity radius supplied".into(),
        },
    };
    let pos_slack = ginf.min(2.0 * kinf - gsup.max(0.0).sqrt());
    let sqrt_margin = if gsup > 0.0 { gm / (2.0 * gsup.sqrt()) } else { gm.sqrt() };
    let positive_curvature = verdict("positive_curvature", pos_slack, gm.max(2.0 * km + sqrt_margin), "K > 0 and 2 inf k ≥ √sup K");
    let pinching = verdict("pinching", 4.0 * ginf - gsup, 5.0 * gm, "sup K < 4 inf K");
    (Hypotheses { injectivity, positive_curvature, pinching }, ex)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LengthBound {
    pub length: f64,
    pub upper_bound: f64,
    pub slack: f64,
    pub holds: bool,
}

/// Measured g-length against (inf k)^{-1}(2π + sup K⁻ · vol), with margins.
pub fn length_bound_check(m: &ConformalMetric, k: &CurvatureFunction, orbit: &ClosedOrbit, ex: &CurvatureExtremes) -> LengthBound {
    let samples = orbit.samples(BOUNDARY_SAMPLES);
    let length = samples.iter().map(|s| m.norm_at(&s.x, &s.v)).sum::<f64>() * orbit.period / BOUNDARY_SAMPLES as f64;
    let _ = k;
    let kinf = ex.k.inf - ex.k.margin;
    let upper_bound = if kinf > 0.0 { (TAU + ex.sup_negative * ex.volume) / kinf } else { f64::INFINITY };
    let slack = upper_bound - length;
    LengthBound { length, upper_bound, slack, holds: slack > 0.0 }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct AuditReport {
    pub gb_residuals: Vec<f64>,
    pub gauss_bonnet: Vec<GaussBonnet>,
    pub length_bounds: Vec<LengthBound>,
    pub min_length: Option<f64>,
    pub extremes: CurvatureExtremes,
    pub hypotheses: Hypotheses,
    pub degree_sum: Option<i32>,
    pub orbit_degrees: Vec<Option<i32>>,
}

pub fn audit(m: &ConformalMetric, k: &CurvatureFunction, orbits: &[ClosedOrbit], inj: Option<f64>) -> Result<AuditReport> {
    let (hypotheses, extremes) = hypothesis_check(m, k, inj);
    let mut gauss_bonnet = Vec::new();
    let mut length_bounds = Vec::new();
    for o in orbits.iter().filter(|o| o.is_simple()) {
        gauss_bonnet.push(gauss_bonnet_residual(m, k, o)?);
        length_bounds.push(length_bound_check(m, k, o, &extremes));
    }
    let refs: Vec<&ClosedOrbit> = orbits.iter().filter(|o| o.is_simple()).collect();
    Ok(AuditReport {
        gb_residuals: gauss_bonnet.iter().map(|g| g.residual).collect(),
        min_length: length_bounds.iter().map(|l| l.length).reduce(f64::min),
        gauss_bonnet,
        length_bounds,
        extremes,
        hypotheses,
        degree_sum: crate::closed_orbits::degree_sum(&refs).ok(),
        orbit_degrees: orbits.iter().map(|o| o.degree).collect(),
    })
}
