//! Orbits of small perturbations of the round problem: degree transfer from the
//! reduced field, O(ε) closeness, and the loop-space and pointwise equations.

use maggeo::closed_orbits::{classify, latitude_fit, multistart_search, shoot, ClosedOrbit, ShootOptions};
use maggeo::loop_field::{x_field, LoopGrid};
use maggeo::magnetic_flow::{equation_residual, geodesic_curvature, CurvatureFunction, FlowKind};
use maggeo::poly::Poly3;
use maggeo::reduction::{k_to_r, reduced_zeros, seed_from_reduction};
use maggeo::sphere_geometry::{ConformalMetric, Vec3};

fn seeded_orbits(m: &ConformalMetric, k1: &Poly3, eps: f64) -> Vec<(ClosedOrbit, i32, Vec3)> {
    let pert = CurvatureFunction::from_poly(k1.clone(), "k1");
    let k = CurvatureFunction::from_poly(Poly3::constant(1.0).add(&k1.scale(eps)), "k");
    let r = k_to_r(1.0).unwrap();
    let opts = ShootOptions::default();
    reduced_zeros(&pert, r)
        .unwrap()
        .iter()
        .map(|z| {
            let seed = seed_from_reduction(m, 1.0, z, eps).unwrap();
            let mut o = shoot(m, &k, FlowKind::Prescribed, &seed.state, seed.period, &opts).unwrap();
            classify(m, &k, &mut o, &opts).unwrap();
            (o, seed.predicted_degree, seed.w)
        })
        .collect()
}

#[test]
fn degrees_transfer_from_reduced_zeros() {
    let m = ConformalMetric::round();
    let tilted = Poly3::linear(Vec3::new(0.3, -0.5, 0.8).normalize());
    let cubic = Poly3::linear(Vec3::z()).add(&Poly3::harmonic(3, 1).unwrap().scale(0.3));
    for k1 in [Poly3::linear(Vec3::z()), tilted, cubic] {
        for eps in [0.005, 0.01, 0.02] {
            let found = seeded_orbits(&m, &k1, eps);
            assert!(!found.is_empty());
            let mut total = 0;
            for (o, predicted, _) in &found {
                assert!(o.is_simple());
                assert_eq!(o.degree, Some(*predicted), "k1 = {k1}, eps = {eps}");
                total += predicted;
            }
            assert_eq!(total, -2, "k1 = {k1}, eps = {eps}");
        }
    }
}

#[test]
fn continued_orbits_stay_within_order_eps() {
    let m = ConformalMetric::round();
    let k1 = Poly3::linear(Vec3::new(0.3, -0.5, 0.8).normalize());
    let r = k_to_r(1.0).unwrap();
    let deviation = |eps: f64| -> Vec<f64> {
        seeded_orbits(&m, &k1, eps)
            .iter()
            .map(|(o, _, w)| {
                let pts: Vec<Vec3> = o.samples(256).iter().map(|s| s.x).collect();
                let (axis, lo, hi) = latitude_fit(&pts);
                (axis - w).norm().max((lo - r).abs()).max((hi - r).abs())
            })
            .collect()
    };
    let small = deviation(0.005);
    let large = deviation(0.01);
    assert_eq!((small.len(), large.len()), (2, 2));
    for (a, b) in small.iter().zip(&large) {
        assert!(*a < 0.005 && *b < 0.01, "{a} {b}");
        let ratio = b / a;
        assert!((1.6..2.4).contains(&ratio), "ratio {ratio}");
    }
}

#[test]
fn found_orbits_are_zeros_of_the_loop_field() {
    let m = ConformalMetric::round();
    let k = CurvatureFunction::linear_perturbation(1.0, 0.01, Vec3::z());
    let rep = multistart_search(&m, &k, 40, 7, &ShootOptions::default()).unwrap();
    assert_eq!(rep.simple_orbits().len(), 2);
    for o in rep.simple_orbits() {
        let lp = LoopGrid::new(o.samples(256).iter().map(|s| s.x).collect()).unwrap();
        let x = x_field(&m, &k, &lp).unwrap();
        assert!(x.norm_h22 < 1e-6, "{}", x.norm_h22);
    }
}

#[test]
fn curvature_identity_on_zonal_orbits() {
    let m = ConformalMetric::zonal(&[0.1]);
    let k = CurvatureFunction::linear_perturbation(1.0, 0.05, Vec3::z());
    let rep = multistart_search(&m, &k, 40, 3, &ShootOptions::default()).unwrap();
    assert!(!rep.simple_orbits().is_empty());
    for o in rep.simple_orbits() {
        let traj = &o.trajectory;
        assert!(equation_residual(&m, &k, traj, FlowKind::Prescribed) < 1e-7);
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        for i in 1..64 {
            let t = o.period * i as f64 / 64.0;
            let s = traj.state_at(t);
            // Acceleration from the dense output only, independent of the flow's right-hand side.
            let acc = (traj.state_at(t + h).v - traj.state_at(t - h).v) / (2.0 * h);
            worst = worst.max((geodesic_curvature(&m, &s.x, &s.v, &acc) - k.value(&s.x)).abs());
        }
        assert!(worst < 1e-6, "{worst}");
    }
}
