//! Prescribed geodesic curvature flow D_t γ̇ = |γ̇|_g k(γ) J γ̇ and the magnetic
//! geodesic flow D_t γ̇ = k(γ) J γ̇ on a conformal sphere.

use std::fmt;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{integrate as dopri, DenseSolution, OdeSystem};
use crate::poly::Poly3;
use crate::sphere_geometry::{project_tangent, ConformalMetric, Vec3};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlowKind {
    Magnetic,
    Prescribed,
}

/// Curvature target k on the sphere.
#[derive(Clone)]
pub enum CurvatureFunction {
    Poly { poly: Poly3, id: String },
    /// Pointwise evaluator without derivative data.
    Opaque { f: Arc<dyn Fn(&Vec3) -> f64 + Send + Sync>, id: String },
}

impl fmt::Debug for CurvatureFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CurvatureFunction::Poly { poly, id } => f.debug_struct("Poly").field("id", id).field("poly", poly).finish(),
            CurvatureFunction::Opaque { id, .. } => f.debug_struct("Opaque").field("id", id).finish(),
        }
    }
}

impl CurvatureFunction {
    pub fn constant(k0: f64) -> Self {
        Self::Poly { poly: Poly3::constant(k0), id: format!("{k0}") }
    }

    pub fn from_poly(poly: Poly3, id: impl Into<String>) -> Self {
        Self::Poly { poly: poly.simplified(), id: id.into() }
    }

    /// k₀ + ε⟨x, axis⟩.
    pub fn linear_perturbation(k0: f64, eps: f64, axis: Vec3) -> Self {
        Self::from_poly(
            Poly3::constant(k0).add(&Poly3::linear(axis).scale(eps)),
            format!("{k0}+{eps}<x,({},{},{})>", axis[0], axis[1], axis[2]),
        )
    }

    pub fn opaque(f: impl Fn(&Vec3) -> f64 + Send + Sync + 'static, id: impl Into<String>) -> Self {
        Self::Opaque { f: Arc::new(f), id: id.into() }
    }

    pub fn id(&self) -> &str {
        match self {
            Self::Poly { id, .. } | Self::Opaque { id, .. } => id,
        }
    }

    pub fn poly(&self) -> Option<&Poly3> {
        match self {
            Self::Poly { poly, .. } => Some(poly),
            Self::Opaque { .. } => None,
        }
    }

    pub fn value(&self, x: &Vec3) -> f64 {
        match self {
            Self::Poly { poly, .. } => poly.value(x),
            Self::Opaque { f, .. } => f(x),
        }
    }

    /// Round-metric gradient, tangent at `x`.
    pub fn gradient(&self, x: &Vec3) -> Result<Vec3> {
        match self {
            Self::Poly { poly, .. } => Ok(project_tangent(x, &poly.gradient(x))),
            Self::Opaque { id, .. } => Err(Error::Unsupported(format!("curvature function {id} has no gradient"))),
        }
    }

    pub fn scaled(&self, s: f64) -> Self {
        match self {
            Self::Poly { poly, id } => Self::Poly { poly: poly.scale(s), id: format!("{s}*({id})") },
            Self::Opaque { f, id } => {
                let f = f.clone();
                Self::Opaque { f: Arc::new(move |x| s * f(x)), id: format!("{s}*({id})") }
            }
        }
    }

    /// (1 − t) k₀ + t k.
    pub fn interpolate(k0: f64, target: &Self, t: f64) -> Result<Self> {
        let poly = target
            .poly()
            .ok_or_else(|| Error::Unsupported("interpolation needs a polynomial curvature function".into()))?;
        Ok(Self::from_poly(
            Poly3::constant((1.0 - t) * k0).add(&poly.scale(t)),
            format!("(1-{t})*{k0}+{t}*({})", target.id()),
        ))
    }

    /// Checks k > 0 on an icosahedral sample.
    pub fn check_positive(&self) -> Result<()> {
        let grid = crate::sphere_geometry::IcoGrid::new(3);
        for t in &grid.triangles {
            let c = t.centroid();
            if !(self.value(&c) > 0.0) {
                return Err(Error::Contract(format!("curvature function {} is not positive", self.id())));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PhaseState {
    pub x: Vec3,
    pub v: Vec3,
}

impl PhaseState {
    /// Normalizes `x` and removes the normal part of `v`.
    pub fn new(x: Vec3, v: Vec3) -> Self {
        let x = x.normalize();
        Self { x, v: project_tangent(&x, &v) }
    }

    pub fn speed(&self, m: &ConformalMetric) -> f64 {
        m.norm_at(&self.x, &self.v)
    }

    /// Same direction, g-speed `c`.
    pub fn with_speed(&self, m: &ConformalMetric, c: f64) -> Self {
        Self { x: self.x, v: self.v * (c / self.speed(m)) }
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.x[0], self.x[1], self.x[2], self.v[0], self.v[1], self.v[2]]
    }

    pub fn from_slice(y: &[f64]) -> Self {
        Self { x: Vec3::new(y[0], y[1], y[2]), v: Vec3::new(y[3], y[4], y[5]) }
    }

    pub fn distance(&self, other: &Self) -> f64 {
        ((self.x - other.x).norm_squared() + (self.v - other.v).norm_squared()).sqrt()
    }
}

/// Ambient second derivative γ̈ whose covariant part is `field · J v` with
/// `field = |v|_g k(x)` (prescribed) or `k(x)` (magnetic).
pub fn acceleration(m: &ConformalMetric, k: &CurvatureFunction, kind: FlowKind, x: &Vec3, v: &Vec3) -> Vec3 {
    let j = m.jet(x);
    let v2 = v.norm_squared();
    let field = match kind {
        FlowKind::Prescribed => j.u.exp() * v2.sqrt() * k.value(x),
        FlowKind::Magnetic => k.value(x),
    };
    x.cross(v) * field - v * (2.0 * j.grad.dot(v)) + j.grad * v2 - x * v2
}

pub fn prescribed_rhs(m: &ConformalMetric, k: &CurvatureFunction, s: &PhaseState) -> (Vec3, Vec3) {
    (s.v, acceleration(m, k, FlowKind::Prescribed, &s.x, &s.v))
}

pub fn magnetic_rhs(m: &ConformalMetric, k: &CurvatureFunction, s: &PhaseState) -> (Vec3, Vec3) {
    (s.v, acceleration(m, k, FlowKind::Magnetic, &s.x, &s.v))
}

/// First-order system on (x, v) ∈ R⁶ with projection back to constant g-speed.
pub struct FlowSystem<'a> {
    pub metric: &'a ConformalMetric,
    pub k: &'a CurvatureFunction,
    pub kind: FlowKind,
    pub speed: f64,
}

impl<'a> FlowSystem<'a> {
    pub fn new(metric: &'a ConformalMetric, k: &'a CurvatureFunction, kind: FlowKind, speed: f64) -> Self {
        Self { metric, k, kind, speed }
    }

    pub fn project_state(&self, y: &mut [f64]) {
        let x = Vec3::new(y[0], y[1], y[2]).normalize();
        let v = project_tangent(&x, &Vec3::new(y[3], y[4], y[5]));
        let s = self.metric.norm_at(&x, &v);
        let v = if s > 0.0 { v * (self.speed / s) } else { v };
        y[..3].copy_from_slice(x.as_slice());
        y[3..6].copy_from_slice(v.as_slice());
    }
}

impl OdeSystem for FlowSystem<'_> {
    fn dim(&self) -> usize {
        6
    }

    fn rhs(&self, _t: f64, y: &[f64], dy: &mut [f64]) {
        let x = Vec3::new(y[0], y[1], y[2]);
        let v = Vec3::new(y[3], y[4], y[5]);
        let a = acceleration(self.metric, self.k, self.kind, &x, &v);
        dy[..3].copy_from_slice(v.as_slice());
        dy[3..6].copy_from_slice(a.as_slice());
    }

    fn project(&self, y: &mut [f64]) {
        self.project_state(y);
    }
}

/// Sampled solution with dense output. `time_scale` and `velocity_scale` describe a
/// reparametrization t ↦ time_scale · t of the integrated curve.
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub states: Vec<PhaseState>,
    pub metric_id: String,
    pub k_id: String,
    pub kind: FlowKind,
    /// The curve solves `kind` with the curvature function multiplied by this factor.
    pub field_scale: f64,
    pub tol: f64,
    pub speed_drift: f64,
    dense: DenseSolution,
    time_scale: f64,
}

impl Trajectory {
    pub fn period(&self) -> f64 {
        self.times.last().unwrap() - self.times[0]
    }

    pub fn t_end(&self) -> f64 {
        *self.times.last().unwrap()
    }

    pub fn state_at(&self, t: f64) -> PhaseState {
        let y = self.dense.eval(t * self.time_scale);
        let s = PhaseState::from_slice(&y);
        PhaseState::new(s.x, s.v * self.time_scale)
    }

    pub fn initial(&self) -> PhaseState {
        self.states[0]
    }

    pub fn last(&self) -> PhaseState {
        *self.states.last().unwrap()
    }

    /// Equispaced samples over [t₀, t_end) (end point excluded).
    pub fn sample_periodic(&self, n: usize) -> Vec<PhaseState> {
        let t0 = self.times[0];
        let p = self.period();
        (0..n).map(|i| self.state_at(t0 + p * i as f64 / n as f64)).collect()
    }

    pub fn to_csv(&self, m: &ConformalMetric) -> String {
        let mut out = String::from("t,x1,x2,x3,v1,v2,v3,speed_g\n");
        for (t, s) in self.times.iter().zip(&self.states) {
            out.push_str(&format!(
                "{t:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}\n",
                s.x[0],
                s.x[1],
                s.x[2],
                s.v[0],
                s.v[1],
                s.v[2],
                s.speed(m)
            ));
        }
        out
    }
}

fn wrap(
    m: &ConformalMetric,
    k: &CurvatureFunction,
    kind: FlowKind,
    tol: f64,
    s0_speed: f64,
    sol: DenseSolution,
) -> Trajectory {
    let states: Vec<PhaseState> = sol.states.iter().map(|y| PhaseState::from_slice(y)).collect();
    let mut drift: f64 = 0.0;
    let mut buf = vec![0.0; 6];
    for seg in &sol.segments {
        seg.eval_into(seg.t0 + 0.5 * seg.h, &mut buf);
        let s = PhaseState::from_slice(&buf);
        let x = s.x.normalize();
        let v = project_tangent(&x, &s.v);
        drift = drift.max((m.norm_at(&x, &v) - s0_speed).abs());
    }
    Trajectory {
        times: sol.times.clone(),
        states,
        metric_id: m.id.clone(),
        k_id: k.id().to_string(),
        kind,
        field_scale: 1.0,
        tol,
        speed_drift: drift,
        dense: sol,
        time_scale: 1.0,
    }
}

pub fn integrate(
    m: &ConformalMetric,
    k: &CurvatureFunction,
    s0: &PhaseState,
    t_final: f64,
    tol: f64,
    kind: FlowKind,
) -> Result<Trajectory> {
    if !(t_final > 0.0) || !(tol > 0.0) {
        return Err(Error::Contract("integration needs T > 0 and tol > 0".into()));
    }
    let s0 = PhaseState::new(s0.x, s0.v);
    let speed = s0.speed(m);
    if !(speed > 0.0) {
        return Err(Error::Contract("initial velocity vanishes".into()));
    }
    let sys = FlowSystem::new(m, k, kind, speed);
    match dopri(&sys, 0.0, &s0.to_array(), t_final, tol) {
        Ok(sol) => Ok(wrap(m, k, kind, tol, speed, sol)),
        Err(e) => {
            let partial = wrap(m, k, kind, tol, speed, e.partial);
            Err(Error::IntegrationFailure { t: e.failure.t, message: e.failure.message, partial: Box::new(Some(partial)) })
        }
    }
}

/// Rescales a constant-speed prescribed solution to g-speed `c`; the result is a
/// magnetic geodesic for the field c·k.
pub fn reparametrize_to_energy(m: &ConformalMetric, traj: &Trajectory, c: f64) -> Result<Trajectory> {
    if !(c > 0.0) {
        return Err(Error::Contract("target energy must be positive".into()));
    }
    if traj.kind != FlowKind::Prescribed {
        return Err(Error::Contract("reparametrization expects a prescribed-flow trajectory".into()));
    }
    let speeds: Vec<f64> = traj.states.iter().map(|s| s.speed(m)).collect();
    let s = speeds[0];
    let bound = (10.0 * traj.tol * traj.period()).max(1e-12) + traj.speed_drift;
    if speeds.iter().any(|v| (v - s).abs() > bound * s.max(1.0)) {
        return Err(Error::Contract("input trajectory does not have constant speed".into()));
    }
    // New time τ with t = τ·c/s.
    let ratio = c / s;
    let mut out = traj.clone();
    out.times = traj.times.iter().map(|t| t / ratio).collect();
    out.states = traj.states.iter().map(|st| PhaseState { x: st.x, v: st.v * ratio }).collect();
    out.time_scale = traj.time_scale * ratio;
    out.kind = FlowKind::Magnetic;
    out.field_scale = traj.field_scale * c;
    out.k_id = format!("{c}*({})", traj.k_id);
    out.speed_drift = traj.speed_drift * ratio;
    Ok(out)
}

/// Largest mismatch between the ambient acceleration implied by the integrated flow
/// and the right-hand side of the trajectory's declared equation.
pub fn equation_residual(m: &ConformalMetric, k: &CurvatureFunction, traj: &Trajectory, original_kind: FlowKind) -> f64 {
    let ratio = traj.time_scale;
    let declared = k.scaled(traj.field_scale);
    traj.times
        .iter()
        .map(|&t| {
            let tau = t * ratio;
            let y = traj.dense.eval(tau);
            let base = PhaseState::from_slice(&y);
            let a_orig = acceleration(m, k, original_kind, &base.x, &base.v);
            let s = traj.state_at(t);
            let a_new = acceleration(m, &declared, traj.kind, &s.x, &s.v);
            (a_orig * ratio * ratio - a_new).norm()
        })
        .fold(0.0, f64::max)
}

/// Geodesic curvature ⟨D_t γ̇, N⟩_g / |γ̇|²_g with N = J γ̇ / |γ̇|_g.
pub fn geodesic_curvature(m: &ConformalMetric, x: &Vec3, v: &Vec3, acc: &Vec3) -> f64 {
    let d = m.covariant_accel(x, v, acc);
    let s = m.norm_at(x, v);
    let n = x.cross(v) / s;
    m.inner_at(x, &d, &n) / (s * s)
}
