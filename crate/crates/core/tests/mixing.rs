//! Statistical properties of exact κ = 0 transport at N = 64, U = π.

use std::f64::consts::PI;

use rabc_core::transport::{init_field, mixing_norm, pullback_evolve, InitialCondition};
use rabc_core::{noise_path, NoiseConfig};

/// Ḣ⁻¹ series, L² deviation and largest |mean| for seeds `0..10` over 20 iterations.
fn runs() -> Vec<(Vec<f64>, f64, f64)> {
    let field0 = init_field(&InitialCondition::SinX, 64).unwrap();
    let times: Vec<usize> = (0..=20).collect();
    (0..10)
        .map(|seed| {
            let path = noise_path(&NoiseConfig::new(PI, seed).unwrap(), 0, 20);
            let fields = pullback_evolve(&field0, path.as_slice(), &times).unwrap();
            let l0 = fields[0].l2_norm();
            let l2 = fields.iter().map(|f| (f.l2_norm() / l0 - 1.0).abs()).fold(0.0, f64::max);
            let mean = fields.iter().map(|f| f.coefficient([0, 0, 0]).norm()).fold(0.0, f64::max);
            (fields.iter().map(|f| mixing_norm(f, 1.0)).collect(), l2, mean)
        })
        .collect()
}

#[test]
fn conservation_and_monotone_majority() {
    let runs = runs();
    for (seed, (_, l2, mean)) in runs.iter().enumerate() {
        assert!(*l2 < 5e-3, "seed {seed}: L² drift {l2:e}");
        assert!(*mean < 1e-12, "seed {seed}: mean {mean:e}");
    }
    // every 10-iteration window starting after iteration 5
    let decreasing = runs
        .iter()
        .filter(|(h, _, _)| (5..=10).all(|n| h[n + 10] < h[n]))
        .count();
    let report: Vec<String> = runs
        .iter()
        .map(|(h, _, _)| format!("{:.4}→{:.4}→{:.4}", h[5], h[10], h[20]))
        .collect();
    assert!(decreasing >= 8, "{decreasing}/10 decreasing: {report:?}");
    // decay from the initial √½
    assert!(runs.iter().all(|(h, _, _)| (h[0] - 0.5f64.sqrt()).abs() < 1e-12 && h[20] < 0.1 * h[0]));
}
