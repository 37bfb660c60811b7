//! Icosahedral geodesic grids, centroid quadrature and grid-based extrema.

use serde::{Deserialize, Serialize};

use super::{any_orthonormal, ConformalMetric, SurfacePoint, Vec3};

pub const DEFAULT_LEVEL: u32 = 5;

#[derive(Clone, Copy, Debug)]
pub struct SphericalTriangle {
    pub a: Vec3,
    pub b: Vec3,
    pub c: Vec3,
}

impl SphericalTriangle {
    /// Exact spherical excess (Van Oosterom–Strackee).
    pub fn area(&self) -> f64 {
        let num = self.a.dot(&self.b.cross(&self.c)).abs();
        let den = 1.0 + self.a.dot(&self.b) + self.b.dot(&self.c) + self.c.dot(&self.a);
        2.0 * num.atan2(den)
    }

    pub fn centroid(&self) -> Vec3 {
        (self.a + self.b + self.c).normalize()
    }

    /// Largest angular distance from the centroid to a vertex.
    pub fn radius(&self) -> f64 {
        let c = self.centroid();
        [self.a, self.b, self.c]
            .iter()
            .map(|v| c.dot(v).clamp(-1.0, 1.0).acos())
            .fold(0.0, f64::max)
    }

    pub fn subdivide(&self) -> [SphericalTriangle; 4] {
        let ab = (self.a + self.b).normalize();
        let bc = (self.b + self.c).normalize();
        let ca = (self.c + self.a).normalize();
        [
            SphericalTriangle { a: self.a, b: ab, c: ca },
            SphericalTriangle { a: ab, b: self.b, c: bc },
            SphericalTriangle { a: ca, b: bc, c: self.c },
            SphericalTriangle { a: ab, b: bc, c: ca },
        ]
    }
}

#[derive(Clone, Debug)]
pub struct IcoGrid {
    pub level: u32,
    pub triangles: Vec<SphericalTriangle>,
}

impl IcoGrid {
    /// Icosahedron refined `level` times by midpoint subdivision (20·4^level faces).
    pub fn new(level: u32) -> Self {
        let phi = (1.0 + 5f64.sqrt()) / 2.0;
        let raw = [
            [-1.0, phi, 0.0],
            [1.0, phi, 0.0],
            [-1.0, -phi, 0.0],
            [1.0, -phi, 0.0],
            [0.0, -1.0, phi],
            [0.0, 1.0, phi],
            [0.0, -1.0, -phi],
            [0.0, 1.0, -phi],
            [phi, 0.0, -1.0],
            [phi, 0.0, 1.0],
            [-phi, 0.0, -1.0],
            [-phi, 0.0, 1.0],
        ];
        let v: Vec<Vec3> = raw.iter().map(|p| Vec3::new(p[0], p[1], p[2]).normalize()).collect();
        let faces = [
            [0, 11, 5],
            [0, 5, 1],
            [0, 1, 7],
            [0, 7, 10],
            [0, 10, 11],
            [1, 5, 9],
            [5, 11, 4],
            [11, 10, 2],
            [10, 7, 6],
            [7, 1, 8],
            [3, 9, 4],
            [3, 4, 2],
            [3, 2, 6],
            [3, 6, 8],
            [3, 8, 9],
            [4, 9, 5],
            [2, 4, 11],
            [6, 2, 10],
            [8, 6, 7],
            [9, 8, 1],
        ];
        let mut triangles: Vec<SphericalTriangle> =
            faces.iter().map(|f| SphericalTriangle { a: v[f[0]], b: v[f[1]], c: v[f[2]] }).collect();
        for _ in 0..level {
            triangles = triangles.iter().flat_map(|t| t.subdivide()).collect();
        }
        Self { level, triangles }
    }

    /// Upper bound on the distance from any sphere point to the nearest centroid or vertex.
    pub fn spacing(&self) -> f64 {
        self.triangles.iter().map(|t| t.radius()).fold(0.0, f64::max)
    }

    pub fn nodes_and_weights(&self) -> (Vec<SurfacePoint>, Vec<f64>) {
        let nodes = self.triangles.iter().map(|t| SurfacePoint(t.centroid())).collect();
        let weights = self.triangles.iter().map(|t| t.area()).collect();
        (nodes, weights)
    }
}

/// Centroid nodes and exact round areas. Σ wᵢ e^{2u(xᵢ)} approximates vol(S², g).
pub fn quadrature(_m: &ConformalMetric, level: u32) -> (Vec<SurfacePoint>, Vec<f64>) {
    IcoGrid::new(level.max(1)).nodes_and_weights()
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct Extremes {
    pub inf: f64,
    pub sup: f64,
    pub argmin: Vec3,
    pub argmax: Vec3,
    /// inf ≤ true inf + margin and sup ≥ true sup − margin.
    pub margin: f64,
    /// True when the margin rests on an estimated rather than supplied Lipschitz bound.
    pub heuristic: bool,
}

/// Pattern search in the tangent plane, shrinking from `step` to 1e−10.
fn refine(f: &dyn Fn(&Vec3) -> f64, start: Vec3, step: f64, sign: f64) -> (Vec3, f64) {
    let mut x = start;
    let mut fx = sign * f(&x);
    let mut h = step;
    while h > 1e-10 {
        let e1 = any_orthonormal(&x);
        let e2 = x.cross(&e1);
        let mut improved = false;
        for d in [e1, -e1, e2, -e2, (e1 + e2) / 2f64.sqrt(), -(e1 + e2) / 2f64.sqrt(), (e1 - e2) / 2f64.sqrt(), (e2 - e1) / 2f64.sqrt()] {
            let y = (x + d * h).normalize();
            let fy = sign * f(&y);
            if fy < fx {
                x = y;
                fx = fy;
                improved = true;
                break;
            }
        }
        if !improved {
            h *= 0.5;
        }
    }
    (x, sign * fx)
}

/// Grid extremes over vertices and centroids with one local refinement pass.
pub fn field_extremes(f: &(dyn Fn(&Vec3) -> f64 + Sync), level: u32, lipschitz: Option<f64>) -> Extremes {
    let grid = IcoGrid::new(level.max(1));
    let spacing = grid.spacing();
    let mut samples: Vec<(Vec3, f64)> = Vec::with_capacity(grid.triangles.len() * 2);
    for t in &grid.triangles {
        for p in [t.a, t.centroid()] {
            samples.push((p, f(&p)));
        }
    }
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&i, &j| samples[i].1.total_cmp(&samples[j].1));
    let candidates = 4.min(order.len());
    let mut inf = (samples[order[0]].0, samples[order[0]].1);
    let mut sup = (samples[order[order.len() - 1]].0, samples[order[order.len() - 1]].1);
    for &i in &order[..candidates] {
        let (x, v) = refine(f, samples[i].0, spacing, 1.0);
        if v < inf.1 {
            inf = (x, v);
        }
    }
    for &i in order.iter().rev().take(candidates) {
        let (x, v) = refine(f, samples[i].0, spacing, -1.0);
        if v > sup.1 {
            sup = (x, v);
        }
    }
    let (lip, heuristic) = match lipschitz {
        Some(l) => (l, false),
        None => {
            // Twice the steepest slope between a centroid and its vertices.
            let mut slope: f64 = 0.0;
            for t in &grid.triangles {
                let c = t.centroid();
                let fc = f(&c);
                for v in [t.a, t.b, t.c] {
                    let d = (c - v).norm();
                    if d > 0.0 {
                        slope = slope.max((f(&v) - fc).abs() / d);
                    }
                }
            }
            (2.0 * slope, true)
        }
    };
    Extremes { inf: inf.1, sup: sup.1, argmin: inf.0, argmax: sup.0, margin: spacing * lip, heuristic }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::poly::Poly3;
    use rand::{Rng, SeedableRng};
    use std::f64::consts::PI;

    #[test]
    fn round_total_is_four_pi() {
        let (_, w) = quadrature(&ConformalMetric::round(), DEFAULT_LEVEL);
        let total: f64 = w.iter().sum();
        assert!((total - 4.0 * PI).abs() < 1e-6);
        assert!(w.iter().all(|&x| x > 0.0));
    }

    #[test]
    fn constant_factor_total() {
        let m = ConformalMetric::constant(0.3);
        let (n, w) = quadrature(&m, DEFAULT_LEVEL);
        let total: f64 = n.iter().zip(&w).map(|(p, w)| w * m.density(&p.x())).sum();
        assert!((total - 4.0 * PI * 0.6f64.exp()).abs() < 1e-6);
    }

    #[test]
    fn zonal_volume_matches_monte_carlo() {
        let m = ConformalMetric::zonal(&[0.2]);
        let (n, w) = quadrature(&m, DEFAULT_LEVEL);
        let total: f64 = n.iter().zip(&w).map(|(p, w)| w * m.density(&p.x())).sum();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let samples = 1_000_000;
        let (mut s, mut s2) = (0.0, 0.0);
        for _ in 0..samples {
            // z is uniform on [−1, 1] for the uniform measure on the sphere.
            let z: f64 = rng.gen_range(-1.0..1.0);
            let f = 4.0 * PI * (0.4 * z).exp();
            s += f;
            s2 += f * f;
        }
        let mean = s / samples as f64;
        let sigma = ((s2 / samples as f64 - mean * mean) / samples as f64).sqrt();
        assert!((total - mean).abs() < 3.0 * sigma, "{total} {mean} {sigma}");
    }

    #[test]
    fn global_gauss_bonnet_for_shipped_metrics() {
        let metrics = [
            ConformalMetric::round(),
            ConformalMetric::zonal(&[0.1]),
            ConformalMetric::zonal(&[0.2, -0.1, 0.05]),
            ConformalMetric::from_poly(Poly3::harmonic(2, 1).unwrap().scale(0.2), "h21"),
        ];
        let grid = IcoGrid::new(6);
        let (n, w) = grid.nodes_and_weights();
        for m in metrics {
            let total: f64 = n.iter().zip(&w).map(|(p, w)| w * m.gauss_curvature(&p.x()) * m.density(&p.x())).sum();
            assert!((total - 4.0 * PI).abs() < 1e-4, "{}: {total}", m.id);
        }
    }

    #[test]
    fn extremes_of_simple_fields() {
        let e = field_extremes(&|_| 1.0, 3, Some(0.0));
        assert_eq!((e.inf, e.sup), (1.0, 1.0));
        let e = field_extremes(&|x: &Vec3| x[2], 3, Some(1.0));
        assert!((e.inf + 1.0).abs() < 1e-3 && (e.sup - 1.0).abs() < 1e-3);
    }

    #[test]
    fn curvature_extremes_bracket_dense_sampling() {
        let m = ConformalMetric::zonal(&[0.2]);
        let f = |x: &Vec3| m.gauss_curvature(x);
        let e = field_extremes(&f, 4, None);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for _ in 0..1_000_000 {
            let z: f64 = rng.gen_range(-1.0..1.0);
            let phi: f64 = rng.gen_range(0.0..2.0 * PI);
            let rho = (1.0 - z * z).sqrt();
            let k = f(&Vec3::new(rho * phi.cos(), rho * phi.sin(), z));
            lo = lo.min(k);
            hi = hi.max(k);
        }
        assert!(e.inf <= lo + e.margin && e.sup >= hi - e.margin);
        assert!(e.inf <= lo + 1e-9 && e.sup >= hi - 1e-9);
    }
}
