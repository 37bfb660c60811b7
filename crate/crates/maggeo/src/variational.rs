//! Jacobi (linearized) flows along trajectories, monodromy matrices and the
//! explicit kernel fields of the latitude family.

use nalgebra::{Complex, Matrix2, Matrix4, Matrix4x2, Vector4};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{integrate as dopri, OdeSystem};
use crate::magnetic_flow::{CurvatureFunction, FlowKind, FlowSystem, PhaseState, Trajectory};
use crate::sphere_geometry::{project_tangent, ConformalMetric, Vec3};

/// Tolerances below this value trigger joint integration of base and Jacobi states.
pub const JOINT_TOL: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobiState {
    pub v: Vec3,
    /// Covariant derivative D_t V.
    pub dv: Vec3,
}

impl JacobiState {
    pub fn zero() -> Self {
        Self { v: Vec3::zeros(), dv: Vec3::zeros() }
    }

    pub fn scale(&self, s: f64) -> Self {
        Self { v: self.v * s, dv: self.dv * s }
    }

    pub fn add(&self, o: &Self) -> Self {
        Self { v: self.v + o.v, dv: self.dv + o.dv }
    }

    pub fn norm(&self) -> f64 {
        (self.v.norm_squared() + self.dv.norm_squared()).sqrt()
    }
}

/// Second covariant derivative of a Jacobi field given V and D_t V.
pub fn jacobi_second_derivative(
    m: &ConformalMetric,
    k: &CurvatureFunction,
    kind: FlowKind,
    x: &Vec3,
    vel: &Vec3,
    v: &Vec3,
    dv: &Vec3,
) -> Vec3 {
    let j = m.jet(x);
    let dens = (2.0 * j.u).exp();
    let curv = (-2.0 * j.u).exp() * (1.0 - j.lap);
    let s2 = dens * vel.norm_squared();
    let s = s2.sqrt();
    let kx = k.value(x);
    // Gradient availability is checked by the callers.
    let dk = k.gradient(x).map(|g| g.dot(v)).unwrap_or(0.0);
    let jvel = x.cross(vel);
    let jdv = x.cross(dv);
    let curvature_term = (v * s2 - vel * (dens * v.dot(vel))) * (-curv);
    match kind {
        FlowKind::Prescribed => {
            curvature_term + jdv * (s * kx) + jvel * (s * dk) + jvel * (dens * dv.dot(vel) / s * kx)
        }
        FlowKind::Magnetic => curvature_term + jdv * kx + jvel * dk,
    }
}

/// Ambient time derivatives of (V, D_t V) along the base curve.
fn jacobi_rhs(
    m: &ConformalMetric,
    k: &CurvatureFunction,
    kind: FlowKind,
    x: &Vec3,
    vel: &Vec3,
    v: &Vec3,
    dv: &Vec3,
) -> (Vec3, Vec3) {
    let j = m.jet(x);
    let d2 = jacobi_second_derivative(m, k, kind, x, vel, v, dv);
    let vdot = dv - ConformalMetric::christoffel(&j, vel, v) - x * v.dot(vel);
    let wdot = d2 - ConformalMetric::christoffel(&j, vel, dv) - x * dv.dot(vel);
    (vdot, wdot)
}

fn read3(y: &[f64], i: usize) -> Vec3 {
    Vec3::new(y[i], y[i + 1], y[i + 2])
}

fn write3(y: &mut [f64], i: usize, v: &Vec3) {
    y[i..i + 3].copy_from_slice(v.as_slice());
}

/// Base flow together with `cols` Jacobi fields.
struct JointSystem<'a> {
    flow: FlowSystem<'a>,
    cols: usize,
}

impl OdeSystem for JointSystem<'_> {
    fn dim(&self) -> usize {
        6 + 6 * self.cols
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        self.flow.rhs(t, &y[..6], &mut dy[..6]);
        let x = read3(y, 0);
        let vel = read3(y, 3);
        for c in 0..self.cols {
            let o = 6 + 6 * c;
            let (a, b) = jacobi_rhs(self.flow.metric, self.flow.k, self.flow.kind, &x, &vel, &read3(y, o), &read3(y, o + 3));
            write3(dy, o, &a);
            write3(dy, o + 3, &b);
        }
    }

    fn project(&self, y: &mut [f64]) {
        self.flow.project_state(&mut y[..6]);
        let x = read3(y, 0);
        for c in 0..self.cols {
            let o = 6 + 6 * c;
            let a = project_tangent(&x, &read3(y, o));
            let b = project_tangent(&x, &read3(y, o + 3));
            write3(y, o, &a);
            write3(y, o + 3, &b);
        }
    }
}

/// Jacobi fields only, with coefficients read from a trajectory's dense output.
struct DenseCoefficientSystem<'a> {
    metric: &'a ConformalMetric,
    k: &'a CurvatureFunction,
    kind: FlowKind,
    traj: &'a Trajectory,
    cols: usize,
}

impl OdeSystem for DenseCoefficientSystem<'_> {
    fn dim(&self) -> usize {
        6 * self.cols
    }

    fn rhs(&self, t: f64, y: &[f64], dy: &mut [f64]) {
        let s = self.traj.state_at(t);
        for c in 0..self.cols {
            let o = 6 * c;
            let (a, b) = jacobi_rhs(self.metric, self.k, self.kind, &s.x, &s.v, &read3(y, o), &read3(y, o + 3));
            write3(dy, o, &a);
            write3(dy, o + 3, &b);
        }
    }
}

/// Sampled evolution of several Jacobi fields along a trajectory.
#[derive(Clone, Debug)]
pub struct JacobiEvolution {
    pub times: Vec<f64>,
    pub base: Vec<PhaseState>,
    /// fields[i][c] is column c at times[i].
    pub fields: Vec<Vec<JacobiState>>,
}

impl JacobiEvolution {
    pub fn last(&self) -> &[JacobiState] {
        self.fields.last().unwrap()
    }
}

pub fn jacobi_evolution(
    m: &ConformalMetric,
    k: &CurvatureFunction,
    kind: FlowKind,
    traj: &Trajectory,
    inits: &[JacobiState],
) -> Result<JacobiEvolution> {
    if let CurvatureFunction::Opaque { id, .. } = k {
        return Err(Error::Unsupported(format!("Jacobi flow needs the gradient of {id}")));
    }
    let cols = inits.len();
    let s0 = traj.initial();
    let t0 = traj.times[0];
    let t1 = traj.t_end();
    let fail = |e: Box<crate::integrator::IntegrationError>| Error::IntegrationFailure {
        t: e.failure.t,
        message: e.failure.message,
        partial: Box::new(None),
    };
    if traj.tol < JOINT_TOL {
        let speed = s0.speed(m);
        let sys = JointSystem { flow: FlowSystem::new(m, k, kind, speed), cols };
        let mut y0 = s0.to_array().to_vec();
        for init in inits {
            y0.extend_from_slice(init.v.as_slice());
            y0.extend_from_slice(init.dv.as_slice());
        }
        let sol = dopri(&sys, t0, &y0, t1, traj.tol).map_err(fail)?;
        let base = sol.states.iter().map(|y| PhaseState::from_slice(y)).collect();
        let fields = sol
            .states
            .iter()
            .map(|y| (0..cols).map(|c| JacobiState { v: read3(y, 6 + 6 * c), dv: read3(y, 9 + 6 * c) }).collect())
            .collect();
        Ok(JacobiEvolution { times: sol.times, base, fields })
    } else {
        let sys = DenseCoefficientSystem { metric: m, k, kind, traj, cols };
        let mut y0 = Vec::with_capacity(6 * cols);
        for init in inits {
            y0.extend_from_slice(init.v.as_slice());
            y0.extend_from_slice(init.dv.as_slice());
        }
        let sol = dopri(&sys, t0, &y0, t1, traj.tol).map_err(fail)?;
        let base: Vec<PhaseState> = sol.times.iter().map(|&t| traj.state_at(t)).collect();
        let fields = sol
            .states
            .iter()
            .zip(&base)
            .map(|(y, b)| {
                (0..cols)
                    .map(|c| JacobiState {
                        v: project_tangent(&b.x, &read3(y, 6 * c)),
                        dv: project_tangent(&b.x, &read3(y, 6 * c + 3)),
                    })
                    .collect()
            })
            .collect();
        Ok(JacobiEvolution { times: sol.times, base, fields })
    }
}

pub fn jacobi_prescribed_flow(m: &ConformalMetric, k: &CurvatureFunction, traj: &Trajectory, init: &JacobiState) -> Result<JacobiState> {
    Ok(jacobi_evolution(m, k, FlowKind::Prescribed, traj, &[*init])?.last()[0])
}

pub fn jacobi_magnetic_flow(m: &ConformalMetric, k: &CurvatureFunction, traj: &Trajectory, init: &JacobiState) -> Result<JacobiState> {
    Ok(jacobi_evolution(m, k, FlowKind::Magnetic, traj, &[*init])?.last()[0])
}

/// max_t |⟨D_t V, γ̇⟩_g − ⟨D_t V(0), γ̇(0)⟩_g| over all columns.
pub fn pairing_drift(m: &ConformalMetric, evo: &JacobiEvolution) -> f64 {
    let pairing = |b: &PhaseState, j: &JacobiState| m.inner_at(&b.x, &j.dv, &b.v);
    let p0: Vec<f64> = evo.fields[0].iter().map(|j| pairing(&evo.base[0], j)).collect();
    let mut drift: f64 = 0.0;
    for (b, cols) in evo.base.iter().zip(&evo.fields) {
        for (j, p) in cols.iter().zip(&p0) {
            drift = drift.max((pairing(b, j) - p).abs());
        }
    }
    drift
}

/// g-orthonormal frame (e_a, e_b) at a phase point with e_a along the velocity.
#[derive(Clone, Copy, Debug)]
pub struct PhaseFrame {
    pub x: Vec3,
    pub ea: Vec3,
    pub eb: Vec3,
}

impl PhaseFrame {
    pub fn at(m: &ConformalMetric, s: &PhaseState) -> Self {
        let scale = (-m.u(&s.x)).exp();
        let ea = s.v.normalize() * scale;
        let eb = s.x.cross(&ea);
        Self { x: s.x, ea, eb }
    }

    fn density(&self) -> f64 {
        1.0 / self.ea.norm_squared()
    }

    pub fn coords(&self, j: &JacobiState) -> Vector4<f64> {
        let d = self.density();
        Vector4::new(d * j.v.dot(&self.ea), d * j.v.dot(&self.eb), d * j.dv.dot(&self.ea), d * j.dv.dot(&self.eb))
    }

    pub fn field(&self, c: &Vector4<f64>) -> JacobiState {
        JacobiState { v: self.ea * c[0] + self.eb * c[1], dv: self.ea * c[2] + self.eb * c[3] }
    }
}

/// Orthonormal basis of the section directions: orthogonal to the flow direction
/// (s, 0, 0, s² k) and to the energy direction (0, 0, 1, 0) in frame coordinates.
pub fn section_basis(speed: f64, kx: f64, kind: FlowKind) -> Matrix4x2<f64> {
    let curv = match kind {
        FlowKind::Prescribed => speed * speed * kx,
        FlowKind::Magnetic => speed * kx,
    };
    let b2 = Vector4::new(curv, 0.0, 0.0, -speed).normalize();
    Matrix4x2::from_columns(&[Vector4::new(0.0, 1.0, 0.0, 0.0), b2])
}

/// Flow direction (γ̇, D_t γ̇) in frame coordinates.
pub fn flow_direction(speed: f64, kx: f64, kind: FlowKind) -> Vector4<f64> {
    let curv = match kind {
        FlowKind::Prescribed => speed * speed * kx,
        FlowKind::Magnetic => speed * kx,
    };
    Vector4::new(speed, 0.0, 0.0, curv)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Monodromy {
    pub matrix: Matrix4<f64>,
    pub period: f64,
    pub speed: f64,
    pub kind: FlowKind,
    /// k at the base point, fixing the flow direction in frame coordinates.
    pub k_base: f64,
}

impl Monodromy {
    pub fn eigenvalues(&self) -> Vec<Complex<f64>> {
        let mut ev: Vec<Complex<f64>> = self.matrix.complex_eigenvalues().iter().cloned().collect();
        ev.sort_by(|a, b| a.re.total_cmp(&b.re).then(a.im.total_cmp(&b.im)));
        ev
    }

    /// The linearized return map Bᵀ M B on the section directions.
    pub fn reduced_block(&self) -> Matrix2<f64> {
        let b = section_basis(self.speed, self.k_base, self.kind);
        b.transpose() * self.matrix * b
    }

    pub fn to_json(&self) -> serde_json::Value {
        let rows: Vec<f64> = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).map(|(i, j)| self.matrix[(i, j)]).collect();
        let rb = self.reduced_block();
        serde_json::json!({
            "period": self.period,
            "matrix": rows,
            "eigenvalues": self.eigenvalues().iter().map(|c| [c.re, c.im]).collect::<Vec<_>>(),
            "reduced_block": [rb[(0, 0)], rb[(0, 1)], rb[(1, 0)], rb[(1, 1)]],
        })
    }
}

pub fn closure_error(orbit: &Trajectory) -> f64 {
    orbit.last().distance(&orbit.initial())
}

/// Period map of the linearized flow in the g-orthonormal frame at the start point.
pub fn monodromy(m: &ConformalMetric, k: &CurvatureFunction, orbit: &Trajectory, kind: FlowKind) -> Result<Monodromy> {
    let s0 = orbit.initial();
    let speed = s0.speed(m);
    let gap = closure_error(orbit);
    if gap > 1e-8 * (1.0 + speed) {
        return Err(Error::Contract(format!("orbit does not close (gap {gap:e})")));
    }
    let frame = PhaseFrame::at(m, &s0);
    let inits: Vec<JacobiState> = (0..4)
        .map(|i| {
            let mut c = Vector4::zeros();
            c[i] = 1.0;
            frame.field(&c)
        })
        .collect();
    let evo = jacobi_evolution(m, k, kind, orbit, &inits)?;
    let mut matrix = Matrix4::zeros();
    for (i, j) in evo.last().iter().enumerate() {
        matrix.set_column(i, &frame.coords(j));
    }
    Ok(Monodromy { matrix, period: orbit.period(), speed, kind, k_base: k.value(&s0.x) })
}

/// Frame (v₀, v₁, w) of a latitude circle with w = v₁ × v₀.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CircleFrame {
    pub v0: Vec3,
    pub v1: Vec3,
    pub w: Vec3,
}

impl CircleFrame {
    pub fn new(v0: Vec3, v1: Vec3, w: Vec3) -> Result<Self> {
        let f = Self { v0, v1, w };
        f.check()?;
        Ok(f)
    }

    /// Completes a unit axis `w` with v₁ = `hint` projected and v₀ = w × v₁.
    pub fn from_axis(w: &Vec3, hint: &Vec3) -> Self {
        let w = w.normalize();
        let mut v1 = project_tangent(&w, hint);
        if v1.norm() < 1e-8 {
            v1 = crate::sphere_geometry::any_orthonormal(&w);
        }
        let v1 = v1.normalize();
        let v0 = w.cross(&v1);
        Self { v0, v1, w }
    }

    pub fn check(&self) -> Result<()> {
        let tol = 1e-12;
        let ok = (self.v0.norm() - 1.0).abs() < tol
            && (self.v1.norm() - 1.0).abs() < tol
            && (self.w.norm() - 1.0).abs() < tol
            && self.v0.dot(&self.v1).abs() < tol
            && self.v0.dot(&self.w).abs() < tol
            && self.v1.dot(&self.w).abs() < tol;
        if !ok {
            return Err(Error::Contract("frame is not orthonormal".into()));
        }
        if (self.v1.cross(&self.v0) - self.w).norm() > 1e-10 {
            return Err(Error::Contract("frame is not positively oriented (w ≠ v₁ × v₀)".into()));
        }
        Ok(())
    }
}

/// Point, velocity and acceleration of α(t) = √(1−r²) w + r cos(2πt) v₁ + r sin(2πt) v₀.
pub fn circle_jet(r: f64, f: &CircleFrame, t: f64) -> (Vec3, Vec3, Vec3) {
    let c = (1.0 - r * r).sqrt();
    let tau = 2.0 * std::f64::consts::PI;
    let (sn, cs) = (tau * t).sin_cos();
    let x = f.w * c + f.v1 * (r * cs) + f.v0 * (r * sn);
    let v = (f.v0 * cs - f.v1 * sn) * (tau * r);
    let a = (f.v1 * cs + f.v0 * sn) * (-tau * tau * r);
    (x, v, a)
}

/// Kernel fields W₀ = t α̇, W₁ = α̇, W₂ = r k₀ v₁ − r cos(2πt) w, W₃ = r k₀ v₀ − r sin(2πt) w.
pub fn kernel_fields(r: f64, frame: &CircleFrame, t: f64) -> Result<[JacobiState; 4]> {
    frame.check()?;
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Domain(format!("radius {r} outside (0, 1)")));
    }
    let tau = 2.0 * std::f64::consts::PI;
    let c = (1.0 - r * r).sqrt();
    let (x, v, a) = circle_jet(r, frame, t);
    let proj = |y: Vec3| project_tangent(&x, &y);
    let dvel = proj(a);
    let (sn, cs) = (tau * t).sin_cos();
    let w2 = frame.v1 * c - frame.w * (r * cs);
    let w2dot = frame.w * (tau * r * sn);
    let w3 = frame.v0 * c - frame.w * (r * sn);
    let w3dot = frame.w * (-tau * r * cs);
    Ok([
        JacobiState { v: v * t, dv: v + dvel * t },
        JacobiState { v, dv: dvel },
        JacobiState { v: w2, dv: proj(w2dot) },
        JacobiState { v: w3, dv: proj(w3dot) },
    ])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::magnetic_flow::{acceleration, integrate};
    use crate::poly::Poly3;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    fn standard_frame() -> CircleFrame {
        CircleFrame::new(Vec3::y(), Vec3::x(), Vec3::z()).unwrap()
    }

    fn latitude_orbit(k0: f64, tol: f64) -> (Trajectory, f64) {
        let r = 1.0 / (1.0 + k0 * k0).sqrt();
        let (x, v, _) = circle_jet(r, &standard_frame(), 0.0);
        let traj = integrate(&ConformalMetric::round(), &CurvatureFunction::constant(k0), &PhaseState::new(x, v), 1.0, tol, FlowKind::Prescribed).unwrap();
        (traj, r)
    }

    fn test_metric() -> ConformalMetric {
        ConformalMetric::from_poly(Poly3::zonal(&[0.15, -0.1]).add(&Poly3::harmonic(2, 2).unwrap().scale(0.1)), "test")
    }

    fn random_tangent(rng: &mut impl Rng, x: &Vec3) -> Vec3 {
        project_tangent(x, &Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)))
    }

    #[test]
    fn velocity_field_solves_linearization() {
        let m = test_metric();
        let k = CurvatureFunction::linear_perturbation(1.0, 0.3, Vec3::z());
        let s0 = PhaseState::new(Vec3::new(0.3, 0.2, 0.9), Vec3::new(1.0, 0.0, -0.2)).with_speed(&m, 1.0);
        let traj = integrate(&m, &k, &s0, 3.0, 1e-11, FlowKind::Prescribed).unwrap();
        let dstate = |s: &PhaseState| {
            let a = acceleration(&m, &k, FlowKind::Prescribed, &s.x, &s.v);
            JacobiState { v: s.v, dv: m.covariant_accel(&s.x, &s.v, &a) }
        };
        let out = jacobi_prescribed_flow(&m, &k, &traj, &dstate(&s0)).unwrap();
        let expected = dstate(&traj.last());
        assert!(out.add(&expected.scale(-1.0)).norm() < 1e-7);
    }

    #[test]
    fn w2_matches_closed_form_after_one_period() {
        let (traj, r) = latitude_orbit(1.0, 1e-11);
        let f = standard_frame();
        let init = kernel_fields(r, &f, 0.0).unwrap()[2];
        let out = jacobi_prescribed_flow(&ConformalMetric::round(), &CurvatureFunction::constant(1.0), &traj, &init).unwrap();
        let expected = kernel_fields(r, &f, 1.0).unwrap()[2];
        assert!(out.add(&expected.scale(-1.0)).norm() < 1e-7);
    }

    fn fd_oracle(m: &ConformalMetric, k: &CurvatureFunction, kind: FlowKind, s0: &PhaseState, init: &JacobiState, t: f64) -> JacobiState {
        // Curve through s0 in the direction (V, D V): x(ε) = normalize(x + εV), with
        // v(ε) = parallel-ish transport chosen so that D_ε v = D V at ε = 0.
        let h = 1e-6;
        let j = m.jet(&s0.x);
        let run = |e: f64| {
            let x = (s0.x + init.v * e).normalize();
            let dvel = init.dv - ConformalMetric::christoffel(&j, &init.v, &s0.v);
            let v = project_tangent(&x, &(s0.v + dvel * e - s0.x * (s0.v.dot(&init.v) * e)));
            let s = PhaseState::new(x, v);
            integrate(m, k, &s, t, 1e-12, kind).unwrap().last()
        };
        let p = run(h);
        let q = run(-h);
        let base = integrate(m, k, s0, t, 1e-12, kind).unwrap().last();
        let jb = m.jet(&base.x);
        let vv = (p.x - q.x) / (2.0 * h);
        let dvel = (p.v - q.v) / (2.0 * h);
        JacobiState {
            v: project_tangent(&base.x, &vv),
            dv: project_tangent(&base.x, &dvel) + ConformalMetric::christoffel(&jb, &vv, &base.v),
        }
    }

    #[test]
    fn prescribed_flow_matches_finite_difference_oracle() {
        let m = test_metric();
        let k = CurvatureFunction::linear_perturbation(1.0, 0.3, Vec3::new(0.3, 0.0, 1.0).normalize());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let x = Vec3::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)).normalize();
            let s0 = PhaseState::new(x, random_tangent(&mut rng, &x)).with_speed(&m, 1.0);
            let init = JacobiState { v: random_tangent(&mut rng, &x), dv: random_tangent(&mut rng, &x) };
            let traj = integrate(&m, &k, &s0, 2.0, 1e-12, FlowKind::Prescribed).unwrap();
            let out = jacobi_prescribed_flow(&m, &k, &traj, &init).unwrap();
            let oracle = fd_oracle(&m, &k, FlowKind::Prescribed, &s0, &init, 2.0);
            assert!(out.add(&oracle.scale(-1.0)).norm() < 2e-5, "{:?} vs {:?}", out, oracle);
        }
    }

    #[test]
    fn magnetic_flow_matches_finite_difference_oracle() {
        let m = test_metric();
        let k = CurvatureFunction::linear_perturbation(0.8, 0.4, Vec3::x());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let x = Vec3::new(0.4, -0.5, 0.3).normalize();
        let s0 = PhaseState::new(x, random_tangent(&mut rng, &x)).with_speed(&m, 1.3);
        let init = JacobiState { v: random_tangent(&mut rng, &x), dv: random_tangent(&mut rng, &x) };
        let traj = integrate(&m, &k, &s0, 2.0, 1e-12, FlowKind::Magnetic).unwrap();
        let out = jacobi_magnetic_flow(&m, &k, &traj, &init).unwrap();
        let oracle = fd_oracle(&m, &k, FlowKind::Magnetic, &s0, &init, 2.0);
        assert!(out.add(&oracle.scale(-1.0)).norm() < 2e-5);
        let zero = jacobi_magnetic_flow(&m, &k, &traj, &JacobiState::zero()).unwrap();
        assert_eq!(zero.norm(), 0.0);
    }

    #[test]
    fn dense_coefficient_route_agrees_with_joint_route() {
        let m = test_metric();
        let k = CurvatureFunction::linear_perturbation(1.0, 0.3, Vec3::z());
        let s0 = PhaseState::new(Vec3::new(0.1, 0.7, 0.5), Vec3::new(1.0, 0.0, 0.0)).with_speed(&m, 1.0);
        let init = JacobiState { v: project_tangent(&s0.x, &Vec3::new(0.2, 0.1, -0.4)), dv: project_tangent(&s0.x, &Vec3::new(0.0, 0.3, 0.1)) };
        let joint = integrate(&m, &k, &s0, 2.0, 1e-11, FlowKind::Prescribed).unwrap();
        let loose = integrate(&m, &k, &s0, 2.0, 1e-8, FlowKind::Prescribed).unwrap();
        let a = jacobi_prescribed_flow(&m, &k, &joint, &init).unwrap();
        let b = jacobi_prescribed_flow(&m, &k, &loose, &init).unwrap();
        assert!(a.add(&b.scale(-1.0)).norm() < 1e-5);
    }

    #[test]
    fn flows_coincide_when_pairing_vanishes() {
        let (traj, r) = latitude_orbit(1.0, 1e-11);
        let m = ConformalMetric::round();
        let k = CurvatureFunction::constant(1.0);
        // Unit speed version of the latitude orbit.
        let s0 = traj.initial().with_speed(&m, 1.0);
        let unit = integrate(&m, &k, &s0, 2.0 * PI * r, 1e-11, FlowKind::Prescribed).unwrap();
        let x = s0.x;
        let init = JacobiState { v: project_tangent(&x, &Vec3::new(0.3, 0.2, 0.1)), dv: x.cross(&s0.v) * 0.4 };
        let a = jacobi_prescribed_flow(&m, &k, &unit, &init).unwrap();
        let b = jacobi_magnetic_flow(&m, &k, &unit, &init).unwrap();
        assert!(a.add(&b.scale(-1.0)).norm() < 1e-8);
    }

    #[test]
    fn pairing_is_conserved() {
        let (traj, r) = latitude_orbit(1.0, 1e-11);
        let f = standard_frame();
        let m = ConformalMetric::round();
        let k = CurvatureFunction::constant(1.0);
        let fields = kernel_fields(r, &f, 0.0).unwrap();
        let evo = jacobi_evolution(&m, &k, FlowKind::Prescribed, &traj, &[fields[2], fields[1]]).unwrap();
        assert!(pairing_drift(&m, &evo) < 1e-9);

        let m = test_metric();
        let k = CurvatureFunction::linear_perturbation(1.0, 0.2, Vec3::y());
        let s0 = PhaseState::new(Vec3::new(0.6, 0.1, 0.5), Vec3::new(0.0, 0.0, 1.0)).with_speed(&m, 1.0);
        let traj = integrate(&m, &k, &s0, 5.0, 1e-11, FlowKind::Prescribed).unwrap();
        let init = JacobiState { v: project_tangent(&s0.x, &Vec3::new(0.2, 0.5, 0.1)), dv: project_tangent(&s0.x, &Vec3::new(0.3, -0.2, 0.6)) };
        let evo = jacobi_evolution(&m, &k, FlowKind::Prescribed, &traj, &[init]).unwrap();
        assert!(pairing_drift(&m, &evo) < 1e-7);
    }

    #[test]
    fn jacobi_flow_is_linear() {
        let m = test_metric();
        let k = CurvatureFunction::linear_perturbation(1.0, 0.2, Vec3::z());
        let s0 = PhaseState::new(Vec3::new(0.6, 0.1, 0.5), Vec3::new(0.0, 0.0, 1.0)).with_speed(&m, 1.0);
        let traj = integrate(&m, &k, &s0, 2.0, 1e-11, FlowKind::Prescribed).unwrap();
        let a = JacobiState { v: project_tangent(&s0.x, &Vec3::new(0.2, 0.5, 0.1)), dv: project_tangent(&s0.x, &Vec3::new(0.3, -0.2, 0.6)) };
        let b = JacobiState { v: project_tangent(&s0.x, &Vec3::new(-0.1, 0.4, 0.3)), dv: project_tangent(&s0.x, &Vec3::new(0.5, 0.1, 0.0)) };
        let evo = jacobi_evolution(&m, &k, FlowKind::Prescribed, &traj, &[a, b, a.scale(2.0).add(&b.scale(-3.0))]).unwrap();
        let last = evo.last();
        let comb = last[0].scale(2.0).add(&last[1].scale(-3.0));
        assert!(comb.add(&last[2].scale(-1.0)).norm() < 1e-9);
    }

    #[test]
    fn kernel_field_values() {
        let r = 1.0 / 2f64.sqrt();
        let k0 = (1.0 - r * r).sqrt() / r;
        let f = standard_frame();
        let w = kernel_fields(r, &f, 0.0).unwrap();
        assert!((w[3].v - f.v0 * (r * k0)).norm() < 1e-14);
        let expected = (f.v1 * k0 - f.w) * (2.0 * PI * r.powi(3));
        assert!((w[3].dv - expected).norm() < 1e-13);
        for t in [0.0, 0.3, 0.77] {
            let (_, v, _) = circle_jet(r, &f, t);
            assert!((kernel_fields(r, &f, t).unwrap()[1].v - v).norm() < 1e-15);
        }
        let bad = CircleFrame { v0: Vec3::x(), v1: Vec3::y(), w: Vec3::z() };
        assert!(kernel_fields(r, &bad, 0.0).is_err());
    }

    // D_t of a tangent field Y along α on the round sphere is P(Ẏ), so
    // D²W = Ẅ − ⟨Ẅ, α⟩ α − ⟨Ẇ, α⟩ α̇ after projecting the derivative of P(Ẇ).
    #[test]
    fn kernel_fields_solve_linearized_equation() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let m = ConformalMetric::round();
        for _ in 0..100 {
            let r: f64 = rng.gen_range(0.2..0.95);
            let k0 = (1.0 - r * r).sqrt() / r;
            let k = CurvatureFunction::constant(k0);
            let f = standard_frame();
            let t: f64 = rng.gen_range(0.0..1.0);
            let tau = 2.0 * PI;
            let (x, vel, _) = circle_jet(r, &f, t);
            let (sn, cs) = (tau * t).sin_cos();
            let fields = [
                (f.v1 * (r * k0) - f.w * (r * cs), f.w * (tau * r * sn), f.w * (tau * tau * r * cs)),
                (f.v0 * (r * k0) - f.w * (r * sn), f.w * (-tau * r * cs), f.w * (tau * tau * r * sn)),
            ];
            for (wv, wd, wdd) in fields {
                let dw = project_tangent(&x, &wd);
                let d2 = wdd - x * wdd.dot(&x) - vel * wd.dot(&x);
                let rhs = jacobi_second_derivative(&m, &k, FlowKind::Prescribed, &x, &vel, &wv, &dw);
                assert!((d2 - rhs).norm() < 1e-12, "{}", (d2 - rhs).norm());
            }
        }
    }

    #[test]
    fn kernel_fields_fixed_by_monodromy() {
        let (traj, r) = latitude_orbit(1.0, 1e-11);
        let m = ConformalMetric::round();
        let k = CurvatureFunction::constant(1.0);
        let mono = monodromy(&m, &k, &traj, FlowKind::Prescribed).unwrap();
        let frame = PhaseFrame::at(&m, &traj.initial());
        let fields = kernel_fields(r, &standard_frame(), 0.0).unwrap();
        for (i, w) in fields.iter().enumerate() {
            let c = frame.coords(w);
            let defect = (mono.matrix * c - c).norm();
            if i == 0 {
                assert!(defect > 1e-3);
            } else {
                assert!(defect < 1e-6, "W{i}: {defect}");
            }
        }
        let ev = mono.eigenvalues();
        assert!(ev.iter().any(|z| (z - Complex::new(1.0, 0.0)).norm() < 1e-6));
        let rb = mono.reduced_block();
        assert!((rb.determinant() - 1.0).abs() < 1e-6);
        assert!((rb - Matrix2::identity()).norm() < 1e-6);
    }

    #[test]
    fn great_circle_monodromy_matches_analytic_jacobi_fields() {
        // On the round sphere with k ≡ 0 the normal Jacobi field is a(t) = a₀ cos t + a₁ sin t
        // and the tangential one is b(t) = b₀ + b₁ t, so after t = 2π the map is a shear.
        let m = ConformalMetric::round();
        let k = CurvatureFunction::constant(0.0);
        let s0 = PhaseState::new(Vec3::x(), Vec3::y());
        let traj = integrate(&m, &k, &s0, 2.0 * PI, 1e-12, FlowKind::Prescribed).unwrap();
        let mono = monodromy(&m, &k, &traj, FlowKind::Prescribed).unwrap();
        let mut expected = Matrix4::identity();
        expected[(0, 2)] = 2.0 * PI;
        assert!((mono.matrix - expected).norm() < 1e-7, "{}", mono.matrix);
    }

    #[test]
    fn monodromy_rejects_open_curves() {
        let m = ConformalMetric::round();
        let k = CurvatureFunction::constant(1.0);
        let traj = integrate(&m, &k, &PhaseState::new(Vec3::x(), Vec3::y()), 1.0, 1e-10, FlowKind::Prescribed).unwrap();
        assert!(matches!(monodromy(&m, &k, &traj, FlowKind::Prescribed), Err(Error::Contract(_))));
    }

    #[test]
    fn opaque_curvature_is_unsupported() {
        let (traj, _) = latitude_orbit(1.0, 1e-10);
        let k = CurvatureFunction::opaque(|_| 1.0, "opaque");
        let r = jacobi_prescribed_flow(&ConformalMetric::round(), &k, &traj, &JacobiState::zero());
        assert!(matches!(r, Err(Error::Unsupported(_))));
    }
}
