//! Finite-dimensional reduction around the latitude family of the round sphere:
//! the reduced field on the family's axis sphere, its zeros and local degrees,
//! and shooting seeds for the perturbed problem.

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::magnetic_flow::{CurvatureFunction, PhaseState};
use crate::poly::Poly3;
use crate::sphere_geometry::{any_orthonormal, project_tangent, ConformalMetric, SurfacePoint, Vec3};
use crate::variational::{circle_jet, CircleFrame};

const TAU: f64 = 2.0 * std::f64::consts::PI;

/// Quadrature nodes for the Fourier extraction. Exact for polynomial data up to
/// degree 63 on the circle.
pub const FOURIER_NODES: usize = 128;

/// Radius r = (1 + k₀²)^{-1/2} of the circles of constant curvature k₀.
pub fn k_to_r(k0: f64) -> Result<f64> {
    if !(k0 > 0.0) || !k0.is_finite() {
        return Err(Error::Domain(format!("k0 = {k0} must be positive")));
    }
    Ok(1.0 / (1.0 + k0 * k0).sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatitudeFamily {
    pub r: f64,
    pub k0: f64,
    pub frame: CircleFrame,
}

impl LatitudeFamily {
    pub fn new(k0: f64, frame: CircleFrame) -> Result<Self> {
        frame.check()?;
        Ok(Self { r: k_to_r(k0)?, k0, frame })
    }

    /// Great-circle limit (k₀ = 0, r = 1).
    pub fn great_circle(frame: CircleFrame) -> Result<Self> {
        frame.check()?;
        Ok(Self { r: 1.0, k0: 0.0, frame })
    }

    pub fn point(&self, t: f64) -> SurfacePoint {
        let (x, _, _) = circle_jet(self.r, &self.frame, t);
        SurfacePoint::new(x).expect("family point is on the sphere")
    }

    /// Residual of −D_tα̇ + |α̇| k₀ α × α̇ = 0 on the round sphere at time t.
    pub fn equation_residual(&self, t: f64) -> f64 {
        let (x, v, a) = circle_jet(self.r, &self.frame, t);
        let dv = project_tangent(&x, &a);
        (-dv + x.cross(&v) * (v.norm() * self.k0)).norm()
    }
}

pub fn family_point(fam: &LatitudeFamily, t: f64) -> SurfacePoint {
    fam.point(t)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReducedFieldValue {
    pub a2: f64,
    pub a3: f64,
}

impl ReducedFieldValue {
    /// The value as a tangent vector at the family axis w: a₂ v₁ + a₃ v₀.
    pub fn as_tangent(&self, frame: &CircleFrame) -> Vec3 {
        frame.v1 * self.a2 + frame.v0 * self.a3
    }
}

/// First-order change of the curvature equation along a latitude circle,
/// expressed as an effective curvature perturbation at (x, unit normal).
pub trait Perturbation: Sync {
    fn effective(&self, x: &Vec3, normal: &Vec3) -> f64;
    fn id(&self) -> String;
}

impl Perturbation for CurvatureFunction {
    fn effective(&self, x: &Vec3, _normal: &Vec3) -> f64 {
        self.value(x)
    }
    fn id(&self) -> String {
        CurvatureFunction::id(self).to_string()
    }
}

/// Conformal factor change g = e^{2εû} g₀ at fixed curvature k₀. The geodesic
/// curvature transforms as e^{-u}(κ − ∂_N u), so to first order the round
/// problem sees k₀ + ε(k₀ û + ∂_N û).
#[derive(Clone, Debug)]
pub struct MetricPerturbation {
    pub factor: Poly3,
    pub k0: f64,
}

impl Perturbation for MetricPerturbation {
    fn effective(&self, x: &Vec3, normal: &Vec3) -> f64 {
        let jet = self.factor.jet(x);
        self.k0 * jet.value + jet.grad.dot(normal)
    }
    fn id(&self) -> String {
        format!("metric({:?})", self.factor.terms.len())
    }
}

/// Sum of weighted perturbations.
pub struct Combined<'a>(pub Vec<(f64, &'a dyn Perturbation)>);

impl Perturbation for Combined<'_> {
    fn effective(&self, x: &Vec3, normal: &Vec3) -> f64 {
        self.0.iter().map(|(c, p)| c * p.effective(x, normal)).sum()
    }
    fn id(&self) -> String {
        self.0.iter().map(|(c, p)| format!("{c}*{}", p.id())).collect::<Vec<_>>().join("+")
    }
}

/// Fourier extraction of the W₂/W₃ components of the perturbation along the circle.
pub fn reduced_field(pert: &dyn Perturbation, fam: &LatitudeFamily) -> ReducedFieldValue {
    let r = fam.r;
    let n = FOURIER_NODES;
    let (mut c, mut s) = (0.0, 0.0);
    for i in 0..n {
        let t = i as f64 / n as f64;
        let (x, v, _) = circle_jet(r, &fam.frame, t);
        let normal = x.cross(&v) / v.norm();
        let lam = v.norm() * pert.effective(&x, &normal);
        let (sn, cs) = (TAU * t).sin_cos();
        c += lam * cs;
        s += lam * sn;
    }
    c *= 2.0 / n as f64;
    s *= 2.0 / n as f64;
    let scale = -TAU * r / (TAU * TAU * r * r + 1.0);
    ReducedFieldValue { a2: scale * c, a3: scale * s }
}

/// Reduced field as a tangent vector field in the axis variable w.
pub fn axis_field(pert: &dyn Perturbation, r: f64, w: &Vec3) -> Vec3 {
    let frame = CircleFrame::from_axis(w, &any_orthonormal(w));
    let fam = LatitudeFamily { r, k0: (1.0 - r * r).sqrt() / r, frame };
    reduced_field(pert, &fam).as_tangent(&frame)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReducedZero {
    pub w: Vec3,
    pub local_degree: i32,
    pub jacobian: Matrix2<f64>,
    pub condition: f64,
    pub degenerate: bool,
}

impl ReducedZero {
    /// Orbit degree predicted for the continued orbit.
    pub fn predicted_orbit_degree(&self) -> i32 {
        -self.local_degree
    }
}

fn tangent_basis(w: &Vec3) -> (Vec3, Vec3) {
    let e1 = any_orthonormal(w);
    (e1, w.cross(&e1))
}

fn chart(w0: &Vec3, e1: &Vec3, e2: &Vec3, y: &Vector2<f64>) -> Vec3 {
    (w0 + e1 * y[0] + e2 * y[1]).normalize()
}

fn local_map(pert: &dyn Perturbation, r: f64, w0: &Vec3, e1: &Vec3, e2: &Vec3, y: &Vector2<f64>) -> Vector2<f64> {
    let f = axis_field(pert, r, &chart(w0, e1, e2, y));
    Vector2::new(f.dot(e1), f.dot(e2))
}

fn local_jacobian(pert: &dyn Perturbation, r: f64, w0: &Vec3, e1: &Vec3, e2: &Vec3) -> Matrix2<f64> {
    let h = 1e-5;
    let mut j = Matrix2::zeros();
    for i in 0..2 {
        let mut d = Vector2::zeros();
        d[i] = h;
        let col = (local_map(pert, r, w0, e1, e2, &d) - local_map(pert, r, w0, e1, e2, &(-d))) / (2.0 * h);
        j.set_column(i, &col);
    }
    j
}

/// Zeros of the reduced field on the axis sphere, located by Newton from an
/// icosahedral grid of starts. Local degrees are signs of the Jacobian
/// determinant in an oriented tangent basis.
pub fn reduced_zeros(pert: &dyn Perturbation, r: f64) -> Result<Vec<ReducedZero>> {
    if !(r > 0.0 && r < 1.0) {
        return Err(Error::Domain(format!("radius {r} outside (0, 1)")));
    }
    let grid = crate::sphere_geometry::IcoGrid::new(1);
    let mut starts: Vec<Vec3> = grid.triangles.iter().map(|t| t.centroid()).collect();
    starts.extend(grid.triangles.iter().map(|t| t.a));
    let scale = starts.iter().map(|w| axis_field(pert, r, w).norm()).fold(0.0, f64::max);
    if scale < 1e-13 {
        return Err(Error::DegenerateZero("reduced field vanishes identically".into()));
    }
    let found: Vec<Vec3> = {
        use rayon::prelude::*;
        starts
            .par_iter()
            .filter_map(|w0| {
                let mut w = *w0;
                for _ in 0..60 {
                    let (e1, e2) = tangent_basis(&w);
                    let g = local_map(pert, r, &w, &e1, &e2, &Vector2::zeros());
                    if g.norm() < 1e-14 * scale.max(1.0) {
                        return Some(w);
                    }
                    let j = local_jacobian(pert, r, &w, &e1, &e2);
                    let mut dy = j.lu().solve(&(-g))?;
                    if dy.norm() > 0.3 {
                        dy *= 0.3 / dy.norm();
                    }
                    w = chart(&w, &e1, &e2, &dy);
                    if dy.norm() < 1e-15 {
                        return Some(w);
                    }
                }
                let (e1, e2) = tangent_basis(&w);
                (local_map(pert, r, &w, &e1, &e2, &Vector2::zeros()).norm() < 1e-10 * scale).then_some(w)
            })
            .collect()
    };
    let mut zeros: Vec<ReducedZero> = Vec::new();
    for w in found {
        if zeros.iter().any(|z| (z.w - w).norm() < 1e-6) {
            continue;
        }
        let (e1, e2) = tangent_basis(&w);
        let jac = local_jacobian(pert, r, &w, &e1, &e2);
        let sv = jac.singular_values();
        let condition = if sv.min() > 0.0 { sv.max() / sv.min() } else { f64::INFINITY };
        let det = jac.determinant();
        let degenerate = condition > 1e10;
        zeros.push(ReducedZero {
            w,
            local_degree: if degenerate { 0 } else { det.signum() as i32 },
            jacobian: jac,
            condition,
            degenerate,
        });
    }
    zeros.sort_by(|a, b| b.w.z.partial_cmp(&a.w.z).unwrap().then(b.w.x.partial_cmp(&a.w.x).unwrap()));
    Ok(zeros)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReductionSeed {
    pub state: PhaseState,
    pub period: f64,
    pub w: Vec3,
    pub predicted_degree: i32,
    pub eps: f64,
}

/// Unit-speed point of the family circle with axis `zero.w`, used as a shooting seed.
pub fn seed_from_reduction(m: &ConformalMetric, k0: f64, zero: &ReducedZero, eps: f64) -> Result<ReductionSeed> {
    if zero.degenerate {
        return Err(Error::DegenerateZero(format!("zero at {:?} is degenerate", zero.w.as_slice())));
    }
    let r = k_to_r(k0)?;
    let frame = CircleFrame::from_axis(&zero.w, &any_orthonormal(&zero.w));
    let (x, v, _) = circle_jet(r, &frame, 0.0);
    let state = PhaseState::new(x, v).with_speed(m, 1.0);
    let length = TAU * r * (m.u(&x)).exp();
    Ok(ReductionSeed { state, period: length, w: zero.w, predicted_degree: zero.predicted_orbit_degree(), eps })
}

pub fn report_json(k0: f64, pert: &dyn Perturbation, zeros: &[ReducedZero]) -> serde_json::Value {
    serde_json::json!({
        "k0": k0,
        "r": k_to_r(k0).ok(),
        "perturbation": pert.id(),
        "zeros": zeros.iter().map(|z| serde_json::json!({
            "w": z.w.as_slice(),
            "local_degree": z.local_degree,
            "jacobian": [[z.jacobian[(0,0)], z.jacobian[(0,1)]], [z.jacobian[(1,0)], z.jacobian[(1,1)]]],
            "condition": z.condition,
            "degenerate": z.degenerate,
        })).collect::<Vec<_>>(),
        "predicted_orbit_degrees": zeros.iter().map(|z| z.predicted_orbit_degree()).collect::<Vec<_>>(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sphere_geometry::rotation;
    use nalgebra::DMatrix;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn e3_linear() -> CurvatureFunction {
        CurvatureFunction::from_poly(Poly3::linear(Vec3::z()), "x3")
    }

    fn closed_form(r: f64, frame: &CircleFrame) -> (f64, f64) {
        let c = -4.0 * PI * PI * r.powi(3) / (4.0 * PI * PI * r * r + 1.0);
        (c * frame.v1.z, c * frame.v0.z)
    }

    fn random_frame(a: f64, b: f64, c: f64) -> CircleFrame {
        let w = Vec3::new(a.cos() * b.sin(), a.sin() * b.sin(), b.cos());
        let f = CircleFrame::from_axis(&w, &any_orthonormal(&w));
        let rot = rotation(&f.w, c);
        CircleFrame::new(rot * f.v0, rot * f.v1, f.w).unwrap()
    }

    #[test]
    fn radius_examples() {
        assert!((k_to_r(1.0).unwrap() - 1.0 / 2f64.sqrt()).abs() < 1e-15);
        assert!((k_to_r(2.0).unwrap() - 1.0 / 5f64.sqrt()).abs() < 1e-15);
        assert!(matches!(k_to_r(0.0), Err(Error::Domain(_))));
        assert!(matches!(k_to_r(-1.0), Err(Error::Domain(_))));
        let frame = CircleFrame::new(Vec3::y(), Vec3::x(), Vec3::z()).unwrap();
        let fam = LatitudeFamily::new(2.0, frame).unwrap();
        assert!((fam.k0 * fam.r - (1.0 - fam.r * fam.r).sqrt()).abs() < 1e-12);
        for i in 0..50 {
            assert!(fam.equation_residual(i as f64 / 50.0) < 1e-12);
        }
        let gc = LatitudeFamily::great_circle(frame).unwrap();
        assert!(gc.point(0.3).x().z.abs() < 1e-15);
        assert!(gc.equation_residual(0.3) < 1e-12);
    }

    #[test]
    fn poles_are_zeros() {
        let r = 1.0 / 2f64.sqrt();
        let frame = CircleFrame::new(Vec3::y(), Vec3::x(), Vec3::z()).unwrap();
        let v = reduced_field(&e3_linear(), &LatitudeFamily::new(1.0, frame).unwrap());
        assert!(v.a2.abs() < 1e-15 && v.a3.abs() < 1e-15);
        let tilted = random_frame(0.3, 0.8, 0.4);
        let v = reduced_field(&e3_linear(), &LatitudeFamily::new(1.0, tilted).unwrap());
        let (a2, a3) = closed_form(r, &tilted);
        assert!((v.a2 - a2).abs() < 1e-12 && (v.a3 - a3).abs() < 1e-12);
    }

    proptest! {
        #[test]
        fn closed_form_agreement(k0 in 0.2f64..4.0, a in 0.0f64..6.3, b in 0.0f64..3.1, c in 0.0f64..6.3) {
            let f = random_frame(a, b, c);
            let fam = LatitudeFamily::new(k0, f).unwrap();
            let v = reduced_field(&e3_linear(), &fam);
            let (a2, a3) = closed_form(fam.r, &f);
            prop_assert!((v.a2 - a2).abs() < 1e-12 && (v.a3 - a3).abs() < 1e-12);
        }

        #[test]
        fn linearity(a in -2.0f64..2.0, b in -2.0f64..2.0, p in 0.0f64..6.3, q in 0.0f64..3.1) {
            let k1 = CurvatureFunction::from_poly(Poly3::monomial([2, 0, 0], 1.0).add(&Poly3::linear(Vec3::y())), "k1");
            let k2 = CurvatureFunction::from_poly(Poly3::monomial([0, 1, 2], 1.0), "k2");
            let sum = CurvatureFunction::from_poly(k1.poly().unwrap().scale(a).add(&k2.poly().unwrap().scale(b)), "sum");
            let fam = LatitudeFamily::new(1.3, random_frame(p, q, 0.2)).unwrap();
            let (v1, v2, vs) = (reduced_field(&k1, &fam), reduced_field(&k2, &fam), reduced_field(&sum, &fam));
            prop_assert!((vs.a2 - a * v1.a2 - b * v2.a2).abs() < 1e-12);
            prop_assert!((vs.a3 - a * v1.a3 - b * v2.a3).abs() < 1e-12);
        }

        #[test]
        fn rotation_equivariance(ax in 0.0f64..6.3, ay in 0.0f64..3.1, angle in 0.0f64..6.3, p in 0.0f64..6.3, q in 0.0f64..3.1) {
            let axis = Vec3::new(ax.cos() * ay.sin(), ax.sin() * ay.sin(), ay.cos());
            let rot = rotation(&axis, angle);
            let inv = rot.transpose();
            let base = Poly3::monomial([1, 1, 0], 1.0).add(&Poly3::monomial([0, 0, 3], 0.5));
            let k1 = CurvatureFunction::from_poly(base.clone(), "k1");
            let rotated = CurvatureFunction::opaque(move |x| base.value(&(inv * x)), "k1 rotated");
            let f = random_frame(p, q, 1.0);
            let rf = CircleFrame::new(rot * f.v0, rot * f.v1, rot * f.w).unwrap();
            let v = reduced_field(&k1, &LatitudeFamily::new(0.8, f).unwrap()).as_tangent(&f);
            let rv = reduced_field(&rotated, &LatitudeFamily::new(0.8, rf).unwrap()).as_tangent(&rf);
            prop_assert!((rot * v - rv).norm() < 1e-10);
        }

        #[test]
        fn axis_field_ignores_frame_phase(p in 0.0f64..6.3, q in 0.0f64..3.1, c in 0.0f64..6.3) {
            let k1 = CurvatureFunction::from_poly(Poly3::monomial([2, 0, 1], 1.0).add(&Poly3::linear(Vec3::x())), "k1");
            let f0 = random_frame(p, q, 0.0);
            let f1 = random_frame(p, q, c);
            let a = reduced_field(&k1, &LatitudeFamily::new(1.0, f0).unwrap()).as_tangent(&f0);
            let b = reduced_field(&k1, &LatitudeFamily::new(1.0, f1).unwrap()).as_tangent(&f1);
            prop_assert!((a - b).norm() < 1e-12);
        }
    }

    /// Assembles μ(t) α × α̇ on a fine grid and projects onto cos(2πt) α × α̇ and
    /// sin(2πt) α × α̇ scaled by (4π²r² + 1), by least squares.
    fn least_squares_oracle(k1: &CurvatureFunction, fam: &LatitudeFamily) -> (f64, f64) {
        let n = 1024;
        let r = fam.r;
        let lam = 4.0 * PI * PI * r * r + 1.0;
        let mut a = DMatrix::zeros(3 * n, 2);
        let mut b = nalgebra::DVector::zeros(3 * n);
        for i in 0..n {
            let t = i as f64 / n as f64;
            let (x, v, _) = circle_jet(r, &fam.frame, t);
            let nrm = x.cross(&v);
            let rhs = nrm * (v.norm() * k1.value(&x));
            for d in 0..3 {
                a[(3 * i + d, 0)] = lam * (2.0 * PI * t).cos() * nrm[d];
                a[(3 * i + d, 1)] = lam * (2.0 * PI * t).sin() * nrm[d];
                b[3 * i + d] = rhs[d];
            }
        }
        let sol = a.svd(true, true).solve(&b, 1e-14).unwrap();
        (sol[0], sol[1])
    }

    #[test]
    fn least_squares_projection_oracle() {
        // Pin the W₂/W₃ normalization once on the linear case.
        let f = random_frame(0.4, 1.1, 0.7);
        let fam = LatitudeFamily::new(1.0, f).unwrap();
        let (p, q) = least_squares_oracle(&e3_linear(), &fam);
        let (a2, a3) = closed_form(fam.r, &f);
        let norm2 = a2 / p;
        assert!((a3 / q - norm2).abs() < 1e-9);
        let k1 = CurvatureFunction::from_poly(Poly3::monomial([2, 0, 0], 1.0), "x1^2");
        for frame in [random_frame(0.2, 0.9, 0.1), random_frame(2.0, 2.2, 1.7)] {
            let fam = LatitudeFamily::new(1.0, frame).unwrap();
            let (p, q) = least_squares_oracle(&k1, &fam);
            let v = reduced_field(&k1, &fam);
            assert!((v.a2 - norm2 * p).abs() < 1e-8, "{} {}", v.a2, norm2 * p);
            assert!((v.a3 - norm2 * q).abs() < 1e-8);
        }
    }

    #[test]
    fn zeros_of_linear_perturbation() {
        let r = 1.0 / 2f64.sqrt();
        let zeros = reduced_zeros(&e3_linear(), r).unwrap();
        assert_eq!(zeros.len(), 2);
        assert!((zeros[0].w - Vec3::z()).norm() < 1e-10);
        assert!((zeros[1].w + Vec3::z()).norm() < 1e-10);
        for z in &zeros {
            assert_eq!(z.local_degree, 1);
            assert_eq!(z.predicted_orbit_degree(), -1);
            let kappa = 4.0 * PI * PI * r.powi(3) / (4.0 * PI * PI * r * r + 1.0);
            let sign = z.w.z.signum();
            assert!((z.jacobian - Matrix2::identity() * (sign * kappa)).norm() < 1e-8);
        }
        let tilted = CurvatureFunction::from_poly(Poly3::linear(Vec3::new(0.2, 0.0, 1.0)), "tilted");
        let zeros = reduced_zeros(&tilted, r).unwrap();
        let axis = Vec3::new(0.2, 0.0, 1.0).normalize();
        assert_eq!(zeros.len(), 2);
        assert!((zeros[0].w - axis).norm() < 1e-8);
        assert!((zeros[1].w + axis).norm() < 1e-8);
    }

    #[test]
    fn local_degrees_sum_to_euler_characteristic() {
        let k1 = CurvatureFunction::from_poly(
            Poly3::linear(Vec3::new(0.3, -0.2, 1.0)).add(&Poly3::harmonic(2, 1).unwrap().scale(0.6)),
            "mixed",
        );
        let zeros = reduced_zeros(&k1, 0.6).unwrap();
        assert!(zeros.iter().all(|z| !z.degenerate));
        assert_eq!(zeros.iter().map(|z| z.local_degree).sum::<i32>(), 2);
    }

    #[test]
    fn constant_perturbation_is_degenerate() {
        let k1 = CurvatureFunction::constant(1.0);
        assert!(matches!(reduced_zeros(&k1, 0.7), Err(Error::DegenerateZero(_))));
    }

    #[test]
    fn linear_conformal_factor_is_first_order_degenerate() {
        // A linear factor is a Möbius pullback to first order: k₀ r = √(1−r²) makes
        // the position and normal terms cancel for every k₀.
        for k0 in [0.5, 1.0, 2.0] {
            let p = MetricPerturbation { factor: Poly3::linear(Vec3::z()), k0 };
            assert!(matches!(reduced_zeros(&p, k_to_r(k0).unwrap()), Err(Error::DegenerateZero(_))));
        }
        let p = MetricPerturbation { factor: Poly3::monomial([0, 0, 3], 1.0), k0: 1.0 };
        let zeros = reduced_zeros(&p, k_to_r(1.0).unwrap()).unwrap();
        assert!(zeros.iter().any(|z| (z.w - Vec3::z()).norm() < 1e-8));
    }

    #[test]
    fn seed_at_zero_eps_is_family_orbit() {
        let m = ConformalMetric::round();
        let zeros = reduced_zeros(&e3_linear(), 1.0 / 2f64.sqrt()).unwrap();
        let seed = seed_from_reduction(&m, 1.0, &zeros[0], 0.0).unwrap();
        assert_eq!(seed.predicted_degree, -1);
        let traj = crate::magnetic_flow::integrate(
            &m,
            &CurvatureFunction::constant(1.0),
            &seed.state,
            seed.period,
            1e-12,
            crate::magnetic_flow::FlowKind::Prescribed,
        )
        .unwrap();
        assert!(traj.last().distance(&seed.state) < 1e-10);
        let mut bad = zeros[0].clone();
        bad.degenerate = true;
        assert!(seed_from_reduction(&m, 1.0, &bad, 0.01).is_err());
    }
}
