//! Discretized loop-space fields: the curvature field X and the reference field
//! W along a sampled closed curve, computed by Fourier collocation in the
//! tangent/normal frame.

use nalgebra::DMatrix;
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::magnetic_flow::CurvatureFunction;
use crate::sphere_geometry::{project_tangent, ConformalMetric, Vec3};

const TAU: f64 = 2.0 * std::f64::consts::PI;

pub const DEFAULT_SAMPLES: usize = 256;

/// Collocation matrices beyond this condition number are rejected.
pub const MAX_CONDITION: f64 = 1e12;

/// Spectral derivative (period 1) of real samples; the Nyquist mode is dropped.
pub fn spectral_derivative(values: &[f64], order: u32) -> Vec<f64> {
    let n = values.len();
    let mut planner = FftPlanner::<f64>::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let mut buf: Vec<Complex64> = values.iter().map(|&v| Complex64::new(v, 0.0)).collect();
    fwd.process(&mut buf);
    for (j, c) in buf.iter_mut().enumerate() {
        let freq = if j < n / 2 {
            j as f64
        } else if j == n / 2 && n % 2 == 0 {
            0.0
        } else {
            j as f64 - n as f64
        };
        let ik = Complex64::new(0.0, TAU * freq);
        *c *= ik.powu(order);
        if freq == 0.0 && j != 0 {
            *c = Complex64::new(0.0, 0.0);
        }
    }
    inv.process(&mut buf);
    buf.iter().map(|c| c.re / n as f64).collect()
}

fn derivative_vec3(points: &[Vec3], order: u32) -> Vec<Vec3> {
    let comps: Vec<Vec<f64>> =
        (0..3).map(|d| spectral_derivative(&points.iter().map(|p| p[d]).collect::<Vec<_>>(), order)).collect();
    (0..points.len()).map(|i| Vec3::new(comps[0][i], comps[1][i], comps[2][i])).collect()
}

/// First-derivative collocation matrix on n equispaced nodes of [0, 1).
pub fn differentiation_matrix(n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |j, k| {
        if j == k {
            0.0
        } else {
            let d = j as f64 - k as f64;
            let sign = if (j + k) % 2 == 0 { 1.0 } else { -1.0 };
            TAU * 0.5 * sign / (std::f64::consts::PI * d / n as f64).tan()
        }
    })
}

/// A closed curve sampled at n equispaced parameter values t_j = j/n.
#[derive(Clone, Debug)]
pub struct LoopGrid {
    pub points: Vec<Vec3>,
    pub velocities: Vec<Vec3>,
    accelerations: Vec<Vec3>,
}

impl LoopGrid {
    pub fn new(points: Vec<Vec3>) -> Result<Self> {
        let n = points.len();
        if n < 8 || n % 2 != 0 {
            return Err(Error::Contract(format!("loop needs an even sample count ≥ 8, got {n}")));
        }
        let points: Vec<Vec3> = points
            .into_iter()
            .map(|p| {
                let r = p.norm();
                if (r - 1.0).abs() > 1e-9 {
                    Err(Error::Contract(format!("loop point off the sphere (|x| = {r})")))
                } else {
                    Ok(p / r)
                }
            })
            .collect::<Result<_>>()?;
        let max_gap = (0..n).map(|i| (points[(i + 1) % n] - points[i]).norm()).fold(0.0, f64::max);
        if max_gap >= TAU / (n as f64).sqrt() {
            return Err(Error::Contract(format!("loop under-resolved: gap {max_gap:.3e} at n = {n}")));
        }
        let raw_v = derivative_vec3(&points, 1);
        let raw_a = derivative_vec3(&points, 2);
        let velocities: Vec<Vec3> = points.iter().zip(&raw_v).map(|(x, v)| project_tangent(x, v)).collect();
        let min_speed = velocities.iter().map(|v| v.norm()).fold(f64::INFINITY, f64::min);
        if !(min_speed > 1e-9) {
            return Err(Error::Contract("loop velocity vanishes".into()));
        }
        Ok(Self { points, velocities, accelerations: raw_a })
    }

    pub fn from_fn(n: usize, f: impl Fn(f64) -> Vec3) -> Result<Self> {
        Self::new((0..n).map(|i| f(i as f64 / n as f64)).collect())
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Cyclic shift of the samples by `k` nodes.
    pub fn shifted(&self, k: usize) -> Self {
        let rot = |v: &Vec<Vec3>| {
            let mut v = v.clone();
            let len = v.len();
            v.rotate_left(k % len);
            v
        };
        Self { points: rot(&self.points), velocities: rot(&self.velocities), accelerations: rot(&self.accelerations) }
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut pts = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') || line.chars().next().is_some_and(|c| c.is_alphabetic()) {
                continue;
            }
            let vals: Vec<f64> = line
                .split(',')
                .map(|s| s.trim().parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("loop csv line {}: {e}", i + 1)))?;
            if vals.len() != 3 {
                return Err(Error::Config(format!("loop csv line {} has {} columns", i + 1, vals.len())));
            }
            pts.push(Vec3::new(vals[0], vals[1], vals[2]));
        }
        Self::new(pts)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,z\n");
        for p in &self.points {
            s.push_str(&format!("{:.17e},{:.17e},{:.17e}\n", p.x, p.y, p.z));
        }
        s
    }
}

/// Unit tangent/normal frame along the loop together with the speed s and the
/// frame rotation rate ρ = ⟨D_tγ̇, N⟩_g / s.
#[derive(Clone, Debug)]
pub struct LoopFrame {
    pub tangent: Vec<Vec3>,
    pub normal: Vec<Vec3>,
    pub speed: Vec<f64>,
    pub rate: Vec<f64>,
    /// ⟨D_tγ̇, T⟩_g, sampled directly.
    pub along: Vec<f64>,
}

impl LoopFrame {
    pub fn new(m: &ConformalMetric, lp: &LoopGrid) -> Self {
        let n = lp.len();
        let mut frame = Self {
            tangent: Vec::with_capacity(n),
            normal: Vec::with_capacity(n),
            speed: Vec::with_capacity(n),
            rate: Vec::with_capacity(n),
            along: Vec::with_capacity(n),
        };
        for i in 0..n {
            let (x, v) = (lp.points[i], lp.velocities[i]);
            let s = m.norm_at(&x, &v);
            let t = v / s;
            let nrm = x.cross(&t);
            let dv = m.covariant_accel(&x, &v, &lp.accelerations[i]);
            frame.tangent.push(t);
            frame.normal.push(nrm);
            frame.speed.push(s);
            frame.rate.push(m.inner_at(&x, &dv, &nrm) / s);
            frame.along.push(m.inner_at(&x, &dv, &t));
        }
        frame
    }
}

/// Complex frame components c = ⟨V, T⟩_g + i⟨V, N⟩_g of a tangent field.
pub fn frame_components(m: &ConformalMetric, lp: &LoopGrid, field: &[Vec3]) -> Result<Vec<Complex64>> {
    if field.len() != lp.len() {
        return Err(Error::Contract("field and loop lengths differ".into()));
    }
    let f = LoopFrame::new(m, lp);
    Ok((0..lp.len())
        .map(|i| {
            let x = &lp.points[i];
            Complex64::new(m.inner_at(x, &field[i], &f.tangent[i]), m.inner_at(x, &field[i], &f.normal[i]))
        })
        .collect())
}

pub fn from_components(m: &ConformalMetric, lp: &LoopGrid, c: &[Complex64]) -> Vec<Vec3> {
    let f = LoopFrame::new(m, lp);
    (0..lp.len()).map(|i| f.tangent[i] * c[i].re + f.normal[i] * c[i].im).collect()
}

#[derive(Clone, Debug)]
pub struct LoopField {
    pub values: Vec<Vec3>,
    pub components: Vec<Complex64>,
    /// (−D² + 1) applied to the components.
    pub forward: Vec<Complex64>,
    pub norm_h22: f64,
    pub condition: f64,
}

impl LoopField {
    pub fn max_tangency_defect(&self, lp: &LoopGrid) -> f64 {
        self.values.iter().zip(&lp.points).map(|(v, x)| v.dot(x).abs()).fold(0.0, f64::max)
    }
}

/// Collocation form of (−D² + 1) on frame components.
pub struct HelmholtzOperator {
    matrix: DMatrix<Complex64>,
}

impl HelmholtzOperator {
    pub fn new(frame: &LoopFrame) -> Self {
        let n = frame.rate.len();
        let d1 = differentiation_matrix(n);
        let d2 = &d1 * &d1;
        let drate = spectral_derivative(&frame.rate, 1);
        let i = Complex64::i();
        let matrix = DMatrix::from_fn(n, n, |j, k| {
            let mut v = Complex64::from(-d2[(j, k)]) - i * (2.0 * frame.rate[j] * d1[(j, k)]);
            if j == k {
                v += Complex64::from(1.0 + frame.rate[j] * frame.rate[j]) - i * drate[j];
            }
            v
        });
        Self { matrix }
    }

    pub fn apply(&self, c: &[Complex64]) -> Vec<Complex64> {
        let v = nalgebra::DVector::from_column_slice(c);
        (&self.matrix * v).iter().cloned().collect()
    }

    pub fn condition(&self) -> f64 {
        let sv = self.matrix.clone().singular_values();
        let lo = sv.min();
        if lo > 0.0 {
            sv.max() / lo
        } else {
            f64::INFINITY
        }
    }

    pub fn solve(&self, rhs: &[Complex64]) -> Result<(Vec<Complex64>, f64)> {
        let condition = self.condition();
        if !(condition < MAX_CONDITION) {
            return Err(Error::ResolutionTooLow { condition });
        }
        let b = nalgebra::DVector::from_column_slice(rhs);
        let sol = self.matrix.clone().lu().solve(&b).ok_or(Error::ResolutionTooLow { condition })?;
        Ok((sol.iter().cloned().collect(), condition))
    }
}

fn pairing(a: &[Complex64], b: &[Complex64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x * y.conj()).re).sum::<f64>() / a.len() as f64
}

fn solve_field(m: &ConformalMetric, lp: &LoopGrid, frame: &LoopFrame, rhs: &[Complex64]) -> Result<LoopField> {
    let op = HelmholtzOperator::new(frame);
    let (components, condition) = op.solve(rhs)?;
    let forward = op.apply(&components);
    let norm_h22 = pairing(&forward, &forward).sqrt();
    let values = (0..lp.len()).map(|i| frame.tangent[i] * components[i].re + frame.normal[i] * components[i].im).collect();
    let _ = m;
    Ok(LoopField { values, components, forward, norm_h22, condition })
}

/// Solves (−D_t² + 1)X = rhs for a tangent field along the loop.
pub fn apply_helmholtz_inverse(m: &ConformalMetric, lp: &LoopGrid, rhs: &[Vec3]) -> Result<LoopField> {
    for (x, v) in lp.points.iter().zip(rhs) {
        if v.dot(x).abs() > 1e-9 * (1.0 + v.norm()) {
            return Err(Error::Contract("right-hand side is not tangent along the loop".into()));
        }
    }
    let frame = LoopFrame::new(m, lp);
    let c = frame_components(m, lp, rhs)?;
    solve_field(m, lp, &frame, &c)
}

/// Forward operator (−D_t² + 1) applied to a tangent field, by spectral differentiation.
pub fn apply_helmholtz(m: &ConformalMetric, lp: &LoopGrid, field: &[Vec3]) -> Result<Vec<Vec3>> {
    let frame = LoopFrame::new(m, lp);
    let c = frame_components(m, lp, field)?;
    Ok(from_components(m, lp, &HelmholtzOperator::new(&frame).apply(&c)))
}

/// X with (−D² + 1)X = −D_tγ̇ + |γ̇|_g k(γ) Jγ̇.
pub fn x_field(m: &ConformalMetric, k: &CurvatureFunction, lp: &LoopGrid) -> Result<LoopField> {
    let frame = LoopFrame::new(m, lp);
    let ds = spectral_derivative(&frame.speed, 1);
    let rhs: Vec<Complex64> = (0..lp.len())
        .map(|i| {
            let s = frame.speed[i];
            Complex64::new(-ds[i], -frame.rate[i] * s + s * s * k.value(&lp.points[i]))
        })
        .collect();
    solve_field(m, lp, &frame, &rhs)
}

/// W with (−D² + 1)W = γ̇.
pub fn w_field(m: &ConformalMetric, lp: &LoopGrid) -> Result<LoopField> {
    let frame = LoopFrame::new(m, lp);
    let rhs: Vec<Complex64> = frame.speed.iter().map(|&s| Complex64::new(s, 0.0)).collect();
    solve_field(m, lp, &frame, &rhs)
}

/// Mean of Re⟨(−D²+1)A, (−D²+1)B⟩ over the nodes.
pub fn h22_pairing(a: &LoopField, b: &LoopField) -> f64 {
    pairing(&a.forward, &b.forward)
}

/// Normalized |⟨X, W⟩|; zero when X vanishes to rounding.
pub fn orthogonality_defect(m: &ConformalMetric, k: &CurvatureFunction, lp: &LoopGrid) -> Result<f64> {
    let x = x_field(m, k, lp)?;
    let w = w_field(m, lp)?;
    if x.norm_h22 < 1e-14 * (1.0 + w.norm_h22) {
        return Ok(0.0);
    }
    Ok(h22_pairing(&x, &w).abs() / (x.norm_h22 * w.norm_h22))
}
