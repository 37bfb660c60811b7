//! Transversal sections, first-return maps, linearized return maps and
//! fixed-point indices.

use nalgebra::{Matrix2, Matrix4, Matrix4x2, Vector2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{Dopri5, Segment};
use crate::magnetic_flow::{CurvatureFunction, FlowKind, FlowSystem, PhaseState, Trajectory};
use crate::sphere_geometry::{minimal_rotation, ConformalMetric, Vec3};
use crate::variational::{flow_direction, monodromy, section_basis, JacobiState, PhaseFrame};

/// Default integration tolerance for return map evaluations.
pub const RETURN_TOL: f64 = 1e-11;

/// Hyperplane section through θ in the chart ψ(x, v) = (x/⟨x,x₀⟩ − x₀, R_x v − v₀),
/// parametrized by the two directions orthogonal to the flow and energy directions.
#[derive(Clone, Debug)]
pub struct Section {
    pub base: PhaseState,
    pub speed: f64,
    pub kind: FlowKind,
    pub period_guess: f64,
    pub frame: PhaseFrame,
    pub basis: Matrix4x2<f64>,
    shear: Matrix4<f64>,
    shear_inv: Matrix4<f64>,
    normal: Vector4<f64>,
}

#[derive(Clone, Copy, Debug)]
pub struct ReturnOptions {
    pub tol: f64,
    /// Give up after this many period guesses.
    pub horizon_factor: f64,
    /// Crossings earlier than this fraction of the period guess are ignored.
    pub min_fraction: f64,
}

impl Default for ReturnOptions {
    fn default() -> Self {
        Self { tol: RETURN_TOL, horizon_factor: 10.0, min_fraction: 0.25 }
    }
}

impl Section {
    pub fn new(m: &ConformalMetric, k: &CurvatureFunction, kind: FlowKind, base: &PhaseState, period_guess: f64) -> Result<Self> {
        let base = PhaseState::new(base.x, base.v);
        let speed = base.speed(m);
        if !(speed > 0.0) {
            return Err(Error::Contract("section base has zero velocity".into()));
        }
        let frame = PhaseFrame::at(m, &base);
        let kx = k.value(&base.x);
        let basis = section_basis(speed, kx, kind);
        let jet = m.jet(&base.x);
        let mut shear = Matrix4::zeros();
        for i in 0..4 {
            let mut c = Vector4::zeros();
            c[i] = 1.0;
            let f = frame.field(&c);
            let g = JacobiState { v: f.v, dv: f.dv - ConformalMetric::christoffel(&jet, &base.v, &f.v) };
            shear.set_column(i, &frame.coords(&g));
        }
        let shear_inv = shear.try_inverse().ok_or_else(|| Error::Contract("singular chart shear".into()))?;
        let energy = Vector4::new(0.0, 0.0, 1.0, 0.0);
        let spanning = [shear * basis.column(0), shear * basis.column(1), shear * energy];
        // Normal: orthogonal complement of the three spanning vectors.
        let mut q: Vec<Vector4<f64>> = Vec::new();
        for v in spanning.iter() {
            let mut w = *v;
            for u in &q {
                w -= u * u.dot(&w);
            }
            q.push(w.normalize());
        }
        let mut normal = Vector4::zeros();
        for i in 0..4 {
            let mut w = Vector4::zeros();
            w[i] = 1.0;
            for u in &q {
                w -= u * u.dot(&w);
            }
            if w.norm() > normal.norm() {
                normal = w;
            }
        }
        let mut normal = normal.normalize();
        let f = shear * flow_direction(speed, kx, kind);
        if f.dot(&normal) < 0.0 {
            normal = -normal;
        }
        if f.dot(&normal) < 1e-6 * f.norm() {
            return Err(Error::Contract("section is not transversal to the flow".into()));
        }
        Ok(Self { base, speed, kind, period_guess, frame, basis, shear, shear_inv, normal })
    }

    /// ψ(p) in frame coordinates.
    pub fn chart(&self, p: &PhaseState) -> Vector4<f64> {
        let x0 = self.base.x;
        let v = p.x / p.x.dot(&x0) - x0;
        let rot = minimal_rotation(&p.x, &x0);
        let w = rot * p.v - self.base.v;
        self.frame.coords(&JacobiState { v, dv: w })
    }

    pub fn gated(&self, p: &PhaseState) -> bool {
        p.x.dot(&self.base.x) > 0.5
    }

    /// Signed distance to the section hyperplane in chart coordinates.
    pub fn height(&self, p: &PhaseState) -> f64 {
        self.chart(p).dot(&self.normal)
    }

    /// Section coordinates of a point near the section.
    pub fn coords(&self, p: &PhaseState) -> Vector2<f64> {
        self.basis.transpose() * (self.shear_inv * self.chart(p))
    }

    /// The section point with coordinates `z` and the section's g-speed.
    pub fn state(&self, m: &ConformalMetric, z: &Vector2<f64>) -> Result<PhaseState> {
        let q = self.shear * (self.basis * z);
        let f = self.frame.field(&q);
        let x0 = self.base.x;
        let x = (x0 + f.v).normalize();
        let a = self.base.v + f.dv;
        let ea = self.frame.ea;
        let target = self.speed * self.speed * (-2.0 * m.u(&x)).exp();
        // |a + s e_a|² = target, smallest root.
        let qa = ea.norm_squared();
        let qb = 2.0 * a.dot(&ea);
        let qc = a.norm_squared() - target;
        let disc = qb * qb - 4.0 * qa * qc;
        if disc < 0.0 {
            return Err(Error::Contract("section point outside the energy level".into()));
        }
        let q = -0.5 * (qb + qb.signum() * disc.sqrt());
        let s = if q == 0.0 {
            0.0
        } else {
            let (r1, r2) = (q / qa, qc / q);
            if r1.abs() < r2.abs() { r1 } else { r2 }
        };
        let vt = a + ea * s;
        let rot = minimal_rotation(&x, &x0);
        Ok(PhaseState::new(x, rot.transpose() * vt))
    }

    /// A section of the same orbit recentred at `z`.
    pub fn recentred(&self, m: &ConformalMetric, k: &CurvatureFunction, z: &Vector2<f64>) -> Result<Self> {
        let s = self.state(m, z)?;
        Self::new(m, k, self.kind, &s, self.period_guess)
    }
}

fn locate_root(seg: &Segment, dim: usize, f: &dyn Fn(&[f64]) -> f64, mut a: f64, mut b: f64, mut fa: f64) -> f64 {
    let mut buf = vec![0.0; dim];
    for _ in 0..200 {
        let mid = 0.5 * (a + b);
        if (b - a).abs() < 1e-15 * mid.abs().max(1.0) {
            break;
        }
        seg.eval_into(mid, &mut buf);
        let fm = f(&buf);
        if (fm < 0.0) == (fa < 0.0) {
            a = mid;
            fa = fm;
        } else {
            b = mid;
        }
    }
    0.5 * (a + b)
}

/// First crossing of the section from below after the minimum time.
pub fn return_map(
    m: &ConformalMetric,
    k: &CurvatureFunction,
    sec: &Section,
    s: &PhaseState,
    opts: &ReturnOptions,
) -> Result<(PhaseState, f64)> {
    let speed = s.speed(m);
    let sys = FlowSystem::new(m, k, sec.kind, speed);
    let horizon = opts.horizon_factor * sec.period_guess;
    let min_time = opts.min_fraction * sec.period_guess;
    let mut stepper = Dopri5::new(&sys, 0.0, &s.to_array(), opts.tol, sec.period_guess);
    let h_of = |y: &[f64]| {
        let p = PhaseState::from_slice(y);
        if sec.gated(&p) {
            Some(sec.height(&p))
        } else {
            None
        }
    };
    let mut prev_t = stepper.t;
    let mut prev_y = stepper.y.clone();
    let mut prev_h = h_of(&prev_y);
    loop {
        let done = stepper
            .step(horizon)
            .map_err(|f| Error::IntegrationFailure { t: f.t, message: f.message, partial: Box::new(None) })?;
        let h_new = h_of(&stepper.y);
        if stepper.t > min_time {
            if let (Some(a), Some(b)) = (prev_h, h_new) {
                if a < 0.0 && b >= 0.0 {
                    let seg = stepper.last.clone().expect("accepted step");
                    let hf = |y: &[f64]| sec.height(&PhaseState::from_slice(y));
                    let t_lo = seg.t0.max(min_time);
                    let mut buf = vec![0.0; 6];
                    seg.eval_into(t_lo, &mut buf);
                    let h_lo = hf(&buf);
                    let tau0 = if h_lo < 0.0 { locate_root(&seg, 6, &hf, t_lo, seg.t1(), h_lo) } else { t_lo };
                    return Ok(refine_crossing(&sys, sec, prev_t, &prev_y, tau0, opts.tol));
                }
            }
        }
        if done {
            return Err(Error::NoReturn { horizon });
        }
        prev_t = stepper.t;
        prev_y.copy_from_slice(&stepper.y);
        prev_h = h_new;
    }
}

/// Secant refinement of the crossing time using exact single steps from the start of
/// the step that contains it.
fn refine_crossing(sys: &FlowSystem<'_>, sec: &Section, t0: f64, y0: &[f64], tau: f64, tol: f64) -> (PhaseState, f64) {
    let mut st = Dopri5::new(sys, t0, y0, tol, 1.0);
    let mut eval = |t: f64| {
        let y = if t > t0 { st.trial_step(t - t0) } else { y0.to_vec() };
        let p = PhaseState::from_slice(&y);
        (sec.height(&p), p)
    };
    let (mut h1, mut p1) = eval(tau);
    let mut t1 = tau;
    let dt = 1e-7 * sec.period_guess;
    let mut t2 = tau + if h1 > 0.0 { -dt } else { dt };
    let (mut h2, mut p2) = eval(t2);
    for _ in 0..8 {
        if h1 == 0.0 || h2 == h1 {
            break;
        }
        let t3 = t2 - h2 * (t2 - t1) / (h2 - h1);
        let (h3, p3) = eval(t3);
        t1 = t2;
        h1 = h2;
        p1 = p2;
        t2 = t3;
        h2 = h3;
        p2 = p3;
        if (t2 - t1).abs() < 1e-14 * t2.abs().max(1.0) {
            break;
        }
    }
    let _ = p1;
    (p2, t2)
}

/// P(z) for a section, as a planar map.
pub fn return_coords(
    m: &ConformalMetric,
    k: &CurvatureFunction,
    sec: &Section,
    z: &Vector2<f64>,
    opts: &ReturnOptions,
) -> Result<(Vector2<f64>, f64, PhaseState)> {
    let s = sec.state(m, z)?;
    let (p, t) = return_map(m, k, sec, &s, opts)?;
    Ok((sec.coords(&p), t, p))
}

/// dP from the monodromy restricted to the section directions.
pub fn linearized_return(m: &ConformalMetric, k: &CurvatureFunction, orbit: &Trajectory) -> Result<Matrix2<f64>> {
    Ok(monodromy(m, k, orbit, orbit.kind)?.reduced_block())
}

/// Central finite differences of the return map in section coordinates.
pub fn finite_difference_return(
    m: &ConformalMetric,
    k: &CurvatureFunction,
    sec: &Section,
    offset: f64,
    opts: &ReturnOptions,
) -> Result<Matrix2<f64>> {
    let mut out = Matrix2::zeros();
    for j in 0..2 {
        let mut e = Vector2::zeros();
        e[j] = offset;
        let (p, _, _) = return_coords(m, k, sec, &e, opts)?;
        let (q, _, _) = return_coords(m, k, sec, &(-e), opts)?;
        out.set_column(j, &((p - q) / (2.0 * offset)));
    }
    Ok(out)
}

pub trait PlanarMap: Sync {
    fn apply(&self, z: &Vector2<f64>) -> Result<Vector2<f64>>;
    /// Evaluation noise of `apply`.
    fn noise(&self) -> f64;
}

/// Planar map given by a closure, used for synthetic fixtures.
pub struct FnMap<F: Fn(&Vector2<f64>) -> Vector2<f64> + Sync> {
    pub f: F,
    pub noise: f64,
}

impl<F: Fn(&Vector2<f64>) -> Vector2<f64> + Sync> PlanarMap for FnMap<F> {
    fn apply(&self, z: &Vector2<f64>) -> Result<Vector2<f64>> {
        Ok((self.f)(z))
    }
    fn noise(&self) -> f64 {
        self.noise
    }
}

/// Return map of a section around its base point.
pub struct SectionMap<'a> {
    pub metric: &'a ConformalMetric,
    pub k: &'a CurvatureFunction,
    pub section: &'a Section,
    pub opts: ReturnOptions,
    pub noise: f64,
}

impl PlanarMap for SectionMap<'_> {
    fn apply(&self, z: &Vector2<f64>) -> Result<Vector2<f64>> {
        Ok(return_coords(self.metric, self.k, self.section, z, &self.opts)?.0)
    }
    fn noise(&self) -> f64 {
        self.noise
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IndexMethod {
    SignDet,
    Winding,
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct IndexResult {
    pub index: i32,
    pub method: IndexMethod,
    pub certificate: f64,
    pub radius: f64,
    pub probes: usize,
}

/// Threshold on |det(dP − I)| above which the sign formula is used.
pub const SIGN_DET_THRESHOLD: f64 = 1e-6;

fn winding(map: &dyn PlanarMap, center: &Vector2<f64>, radius: f64, probes: usize) -> Result<(i32, f64, f64)> {
    let vals: Vec<Vector2<f64>> = {
        use rayon::prelude::*;
        (0..probes)
            .into_par_iter()
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / probes as f64;
                let z = center + Vector2::new(a.cos(), a.sin()) * radius;
                map.apply(&z).map(|p| p - z)
            })
            .collect::<Result<Vec<_>>>()?
    };
    let cert = vals.iter().map(|d| d.norm()).fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    let mut max_jump: f64 = 0.0;
    for i in 0..probes {
        let a = vals[i];
        let b = vals[(i + 1) % probes];
        let d = (a.x * b.y - a.y * b.x).atan2(a.dot(&b));
        max_jump = max_jump.max(d.abs());
        total += d;
    }
    Ok(((total / (2.0 * std::f64::consts::PI)).round() as i32, cert, max_jump))
}

/// Fixed-point index of `map` at `center`, by the sign formula when `dp` is clearly
/// nondegenerate and by the winding number of P(z) − z otherwise.
pub fn index_of(map: &dyn PlanarMap, center: &Vector2<f64>, dp: Option<&Matrix2<f64>>, radius: f64) -> Result<IndexResult> {
    if let Some(dp) = dp {
        let det = (dp - Matrix2::identity()).determinant();
        if det.abs() > SIGN_DET_THRESHOLD {
            let index = if det > 0.0 { 1 } else { -1 };
            return Ok(IndexResult { index, method: IndexMethod::SignDet, certificate: det.abs(), radius, probes: 0 });
        }
    }
    let mut probes = 64;
    loop {
        let (index, cert, jump) = winding(map, center, radius, probes)?;
        let noise = map.noise();
        let resolved = jump < 0.5 * std::f64::consts::PI;
        if cert > 10.0 * noise && resolved {
            if index > 1 {
                return Err(Error::InvariantViolation(format!(
                    "fixed-point index {index} > 1 contradicts area preservation"
                )));
            }
            return Ok(IndexResult { index, method: IndexMethod::Winding, certificate: cert, radius, probes });
        }
        if probes > 64 || cert <= 10.0 * noise {
            return Err(Error::UncertifiedIndex { certificate: cert, noise });
        }
        probes *= 2;
    }
}

/// Index of the return map of `sec` at its base point.
pub fn fixed_point_index(
    m: &ConformalMetric,
    k: &CurvatureFunction,
    sec: &Section,
    dp: Option<&Matrix2<f64>>,
    radius: f64,
    opts: &ReturnOptions,
) -> Result<IndexResult> {
    let (p0, _, _) = return_coords(m, k, sec, &Vector2::zeros(), opts)?;
    let noise = p0.norm().max(100.0 * opts.tol);
    let map = SectionMap { metric: m, k, section: sec, opts: *opts, noise };
    index_of(&map, &Vector2::zeros(), dp, radius)
}

/// Degree contribution −i(P, θ) of a closed orbit.
pub fn orbit_degree_from_index(r: &IndexResult) -> i32 {
    -r.index
}

/// A unit-speed section point from a geometric point and direction.
pub fn unit_state(m: &ConformalMetric, x: &Vec3, dir: &Vec3) -> PhaseState {
    PhaseState::new(*x, *dir).with_speed(m, 1.0)
}
