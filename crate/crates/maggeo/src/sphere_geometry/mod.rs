//! Conformal metrics g = e^{2u} g₀ on the unit sphere in ambient coordinates.

mod quadrature;

pub use quadrature::{field_extremes, quadrature, Extremes, IcoGrid, SphericalTriangle, DEFAULT_LEVEL};

use nalgebra::Vector3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::poly::Poly3;

pub type Vec3 = Vector3<f64>;

/// Tolerance for unit-norm and tangency checks after projection.
pub const PROJECTION_TOL: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SurfacePoint(Vec3);

impl SurfacePoint {
    /// Normalizes `x`; fails on the zero vector.
    pub fn new(x: Vec3) -> Result<Self> {
        let n = x.norm();
        if !(n > 0.0) || !n.is_finite() {
            return Err(Error::Contract("cannot place a zero vector on the sphere".into()));
        }
        Ok(Self(x / n))
    }

    pub fn x(&self) -> Vec3 {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TangentVector {
    pub base: SurfacePoint,
    pub v: Vec3,
}

impl TangentVector {
    /// Removes the normal component of `v` at `base`.
    pub fn new(base: SurfacePoint, v: Vec3) -> Self {
        Self { base, v: project_tangent(&base.x(), &v) }
    }
}

pub fn project_tangent(x: &Vec3, v: &Vec3) -> Vec3 {
    v - x * x.dot(v)
}

/// Any unit vector orthogonal to `x`.
pub fn any_orthonormal(x: &Vec3) -> Vec3 {
    let a = if x[0].abs() < 0.6 { Vec3::x() } else if x[1].abs() < 0.6 { Vec3::y() } else { Vec3::z() };
    project_tangent(x, &a).normalize()
}

/// Rotation matrix of angle `angle` about the unit `axis`.
pub fn rotation(axis: &Vec3, angle: f64) -> nalgebra::Matrix3<f64> {
    nalgebra::Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(*axis), angle).into_inner()
}

/// Minimal rotation taking the unit vector `from` to the unit vector `to`.
pub fn minimal_rotation(from: &Vec3, to: &Vec3) -> nalgebra::Matrix3<f64> {
    let c = from.dot(to);
    let axis = from.cross(to);
    let s = axis.norm();
    if s < 1e-300 {
        if c > 0.0 {
            return nalgebra::Matrix3::identity();
        }
        return rotation(&any_orthonormal(from), std::f64::consts::PI);
    }
    rotation(&(axis / s), s.atan2(c))
}

/// First-order data of the log-conformal factor at a point.
#[derive(Clone, Copy, Debug)]
pub struct FactorJet {
    pub u: f64,
    /// Round-metric gradient (tangent at the point).
    pub grad: Vec3,
    /// Round-metric Laplace–Beltrami.
    pub lap: f64,
}

/// g = e^{2u} g₀ with u the restriction of a polynomial. With `blend = t < 1` the
/// factor is replaced by e^{2u_t} = (1 − t) + t e^{2u}.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConformalMetric {
    pub factor: Poly3,
    pub blend: f64,
    pub id: String,
}

impl ConformalMetric {
    pub fn round() -> Self {
        Self { factor: Poly3::zero(), blend: 1.0, id: "round".into() }
    }

    pub fn from_poly(factor: Poly3, id: impl Into<String>) -> Self {
        Self { factor: factor.simplified(), blend: 1.0, id: id.into() }
    }

    pub fn constant(c: f64) -> Self {
        Self::from_poly(Poly3::constant(c), format!("constant({c})"))
    }

    pub fn zonal(coeffs: &[f64]) -> Self {
        Self::from_poly(Poly3::zonal(coeffs), format!("zonal{coeffs:?}"))
    }

    /// Metric interpolation (1 − t) g₀ + t g.
    pub fn blended(&self, t: f64) -> Self {
        Self { factor: self.factor.clone(), blend: t, id: format!("{}@t={t}", self.id) }
    }

    pub fn is_round(&self) -> bool {
        self.factor.is_zero()
    }

    pub fn jet(&self, x: &Vec3) -> FactorJet {
        let pj = self.factor.jet(x);
        let xg = x.dot(&pj.grad);
        let grad = pj.grad - x * xg;
        let lap = pj.hess.trace() - (x.transpose() * pj.hess * x)[0] - 2.0 * xg;
        let t = self.blend;
        if t == 1.0 {
            return FactorJet { u: pj.value, grad, lap };
        }
        let e = (2.0 * pj.value).exp();
        let s = (1.0 - t) + t * e;
        let g2 = grad.norm_squared();
        FactorJet {
            u: 0.5 * s.ln(),
            grad: grad * (t * e / s),
            lap: t * e * (2.0 * g2 + lap) / s - 2.0 * t * t * e * e * g2 / (s * s),
        }
    }

    pub fn u(&self, x: &Vec3) -> f64 {
        if self.blend == 1.0 {
            return self.factor.value(x);
        }
        let e = (2.0 * self.factor.value(x)).exp();
        0.5 * ((1.0 - self.blend) + self.blend * e).ln()
    }

    /// e^{2u}, the area density relative to the round metric.
    pub fn density(&self, x: &Vec3) -> f64 {
        (2.0 * self.u(x)).exp()
    }

    pub fn inner_at(&self, x: &Vec3, a: &Vec3, b: &Vec3) -> f64 {
        self.density(x) * a.dot(b)
    }

    pub fn norm_at(&self, x: &Vec3, a: &Vec3) -> f64 {
        self.u(x).exp() * a.norm()
    }

    pub fn metric_inner(&self, at: &SurfacePoint, a: &TangentVector, b: &TangentVector) -> Result<f64> {
        check_base(at, a)?;
        check_base(at, b)?;
        Ok(self.inner_at(&at.x(), &a.v, &b.v))
    }

    /// J_g v = x × v.
    pub fn rotate(&self, at: &SurfacePoint, a: &TangentVector) -> Result<TangentVector> {
        check_base(at, a)?;
        Ok(TangentVector { base: *at, v: at.x().cross(&a.v) })
    }

    pub fn gauss_curvature(&self, x: &Vec3) -> f64 {
        let j = self.jet(x);
        (-2.0 * j.u).exp() * (1.0 - j.lap)
    }

    /// Γ(a, w) = du(a) w + du(w) a − ⟨a, w⟩₀ ∇u, the difference between the covariant
    /// derivatives of g and g₀.
    pub fn christoffel(jet: &FactorJet, a: &Vec3, w: &Vec3) -> Vec3 {
        w * jet.grad.dot(a) + a * jet.grad.dot(w) - jet.grad * a.dot(w)
    }

    /// D_t γ̇ from the ambient position, velocity and acceleration.
    pub fn covariant_accel(&self, x: &Vec3, v: &Vec3, acc: &Vec3) -> Vec3 {
        let j = self.jet(x);
        project_tangent(x, acc) + Self::christoffel(&j, v, v)
    }
}

fn check_base(at: &SurfacePoint, a: &TangentVector) -> Result<()> {
    if (at.x() - a.base.x()).norm() > 1e-12 {
        return Err(Error::Contract("tangent vector based at a different point".into()));
    }
    Ok(())
}
