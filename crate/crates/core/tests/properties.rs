//! Cross-module properties: exponent invariance, reproducibility across
//! worker counts, dynamo growth, and controllability sweeps.

use std::f64::consts::{PI, TAU};

use proptest::prelude::*;
use rabc_core::control::{max_gap_drift, plan_one_point, plan_projective, plan_two_point, ANGLE_TOL, POSITION_TOL};
use rabc_core::dynamo::{magnetic_growth_series, MagneticInitialField, NormExponent};
use rabc_core::lyapunov::{lyapunov_spectrum, projective_step, top_lyapunov, UnitVector3};
use rabc_core::transport::{correlation_mc, init_field, BackTrajectoryGrid, InitialCondition};
use rabc_core::{noise_path, sample_noise, NoiseConfig, TorusPoint};

fn cfg(seed: u64) -> NoiseConfig {
    NoiseConfig::new(PI, seed).unwrap()
}

fn within(a: (f64, f64), b: (f64, f64), k: f64) -> bool {
    (a.0 - b.0).abs() <= k * (a.1 * a.1 + b.1 * b.1).sqrt()
}

#[test]
fn exponent_ignores_initial_direction_and_point() {
    let c = cfg(7);
    let base = top_lyapunov(&c, TorusPoint::origin(), UnitVector3::e1(), 4000, 40).unwrap();
    let other_v = top_lyapunov(&c, TorusPoint::origin(), UnitVector3::new(0.0, 0.0, 1.0).unwrap(), 4000, 40).unwrap();
    let other_x = top_lyapunov(&c, TorusPoint::new(2.0, 4.0, 1.0), UnitVector3::e1(), 4000, 40).unwrap();
    let spec = lyapunov_spectrum(&c, TorusPoint::origin(), 4000, 40).unwrap();
    let b = (base.lambda, base.stderr);
    assert!(within(b, (other_v.lambda, other_v.stderr), 3.0));
    assert!(within(b, (other_x.lambda, other_x.stderr), 3.0));
    assert!(within(b, (spec.lambdas[0], spec.stderrs[0]), 3.0));
    assert!(spec.lambdas[0] > 0.0 && spec.lambdas[2] < 0.0);
}

#[test]
fn direction_stays_unit_over_long_runs() {
    let c = cfg(3);
    let mut x = TorusPoint::origin();
    let mut v = UnitVector3::e1();
    let mut worst: f64 = 0.0;
    for i in 0..1_000_000 {
        let (nx, nv, _) = projective_step(x, &v, &sample_noise(&c, 0, i)).unwrap();
        x = nx;
        v = nv;
        worst = worst.max((v.norm() - 1.0).abs());
    }
    assert!(worst < 1e-12, "{worst:e}");
}

#[test]
fn estimates_do_not_depend_on_worker_count() {
    let run = |threads| {
        rayon::ThreadPoolBuilder::new().num_threads(threads).build().unwrap().install(|| {
            let c = cfg(5);
            let l = top_lyapunov(&c, TorusPoint::origin(), UnitVector3::e1(), 500, 9).unwrap();
            let s = lyapunov_spectrum(&c, TorusPoint::origin(), 500, 9).unwrap();
            let path = noise_path(&c, 0, 6);
            let g = init_field(&InitialCondition::SinX, 8).unwrap();
            let m = correlation_mc(&g, &g, path.as_slice(), 1e-3, 3000, &[0, 3, 6], 9).unwrap();
            let b = magnetic_growth_series(
                &MagneticInitialField::Abc { a: 1.0, b: 1.0, c: 1.0 },
                path.as_slice(),
                NormExponent::Finite(2.0),
                16,
                &[0, 3, 6],
            )
            .unwrap();
            (l, s, m, b)
        })
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn correlation_decays_without_diffusion() {
    let g = init_field(&InitialCondition::SinX, 16).unwrap();
    let path = noise_path(&cfg(42), 0, 20);
    let times: Vec<usize> = (0..=20).collect();
    let m = correlation_mc(&g, &g, path.as_slice(), 0.0, 20_000, &times, 1).unwrap();
    assert!((m.value[0] - 0.5).abs() < 3.0 * m.stderr[0] + 1e-3);
    let crossing = m.value.iter().position(|v| v.abs() < 1e-2);
    assert!(crossing.is_some(), "{:?}", m.value);
}

#[test]
fn preimages_stay_uniform() {
    let mut grid = BackTrajectoryGrid::new(32).unwrap();
    let path = noise_path(&cfg(8), 0, 10);
    grid.pull_back(path.as_slice());
    let (_, p) = grid.uniformity(4).unwrap();
    assert!(p > 0.01, "p = {p}");
}

#[test]
fn dynamo_grows_and_norms_are_ordered() {
    let path = noise_path(&cfg(42), 0, 30);
    let times: Vec<usize> = (0..=30).collect();
    let b0 = MagneticInitialField::Constant([0.0, 0.0, 1.0]);
    let series = |p| magnetic_growth_series(&b0, path.as_slice(), p, 32, &times).unwrap().values;
    let (l1, l2, linf) = (
        series(NormExponent::Finite(1.0)),
        series(NormExponent::Finite(2.0)),
        series(NormExponent::Infinity),
    );
    // strictly increasing after a finite transient
    let last_drop = (1..l1.len()).filter(|&n| l1[n] <= l1[n - 1]).max().unwrap_or(0);
    assert!(last_drop < 20, "L¹ series still falls at n = {last_drop}: {l1:?}");
    for n in 0..l1.len() {
        assert!(l2[n] >= l1[n] * (1.0 - 1e-12));
        assert!(linf[n] >= l2[n] * (1.0 - 1e-12));
    }
}

fn point() -> impl Strategy<Value = TorusPoint> {
    (0.0..TAU, 0.0..TAU, 0.0..TAU).prop_map(|(x, y, z)| TorusPoint::new(x, y, z))
}

fn direction() -> impl Strategy<Value = UnitVector3> {
    (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64)
        .prop_filter("nonzero", |(a, b, c)| a * a + b * b + c * c > 1e-2)
        .prop_map(|(a, b, c)| UnitVector3::new(a, b, c).unwrap())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_point_plans_land(x in point(), xs in point(), u in 0.3..PI) {
        let plan = plan_one_point(x, xs, u).unwrap();
        prop_assert!(plan.samples().iter().all(|w| w.max_amplitude() <= u));
        prop_assert!(plan.position_error().unwrap() < 1e-10);
    }

    #[test]
    fn projective_plans_land(x in point(), xs in point(), v in direction(), vs in direction(), u in 1.2..PI) {
        let plan = plan_projective(x, v, xs, vs, u).unwrap();
        prop_assert!(plan.samples().iter().all(|w| w.max_amplitude() <= u));
        prop_assert!(plan.position_error().unwrap() < POSITION_TOL);
        prop_assert!(plan.direction_error().unwrap() < ANGLE_TOL);
    }

    #[test]
    fn two_point_plans_land(a in point(), b in point(), c in point(), d in point(), u in 1.2..PI, eps in 0.05..0.5f64) {
        prop_assume!(a.dist(&b) > 1e-6 && c.dist(&d) > 1e-6);
        let plan = plan_two_point(a, b, c, d, u, eps).unwrap();
        prop_assert!(plan.samples().iter().all(|w| w.max_amplitude() <= u));
        prop_assert!(plan.position_error().unwrap() < 1e-6);
        // the rigid phase starts where the contraction ends
        let start = plan.segment("contract").unwrap();
        let (p, q) = start.iter().fold((a, b), |(p, q), w| (rabc_core::torus::step(p, w), rabc_core::torus::step(q, w)));
        prop_assert!(max_gap_drift(p, q, plan.segment("rigid").unwrap()) < 1e-12);
    }
}
