use hybrid_ensemble::bracket::poisson_bracket_ps;
use hybrid_ensemble::measurement::*;
use hybrid_ensemble::observables::{ClassicalObservable, PhaseFunction, QuantumObservable, QuantumOperator};
use hybrid_ensemble::{HybridError, HybridGrid};
use num_complex::Complex64;

fn c(re: f64, im: f64) -> Complex64 {
    Complex64::new(re, im)
}

fn qubit_setup() -> (HybridGrid, MeasurementSetup) {
    let g = HybridGrid::discrete(2, -12.0, 12.0, 256).unwrap();
    let s = MeasurementSetup::gaussian(&g, QuantumOperator::pauli_z(), 4.0, 1.0, 0.5).unwrap();
    (g, s)
}

#[test]
fn rk4_interaction_matches_the_shifted_sum() {
    let (g, setup) = qubit_setup();
    let psi_q = amplitudes(&[c(0.6, 0.0), c(0.0, 0.8)]);
    let num = evolve_measurement(&g, &psi_q, &setup, 0.0005, 1.0).unwrap();
    let exact = exact_post_measurement(&g, &psi_q, &setup, 1.0).unwrap();
    let d = l2_distance(&num, &exact).unwrap();
    assert!(d < 1e-6, "{d}");
}

#[test]
fn branch_weights_are_born_probabilities() {
    let (g, setup) = qubit_setup();
    let psi_q = amplitudes(&[c(0.6, 0.0), c(0.0, 0.8)]);
    let e = exact_post_measurement(&g, &psi_q, &setup, 1.0).unwrap();
    let r = pointer_distribution(&e, &setup).unwrap();
    assert!(r.overlap < 1e-12);
    // eigenspaces sorted by eigenvalue: -1 (second level), +1 (first level)
    let expected = [(-1.0, 0.64), (1.0, 0.36)];
    for ((l, w), (le, we)) in r.branch_weights.iter().zip(expected) {
        assert!((l - le).abs() < 1e-12);
        assert!((w - we).abs() < 1e-9, "{w} vs {we}");
    }
}

#[test]
fn degenerate_eigenvalue_gets_the_projector_weight() {
    let g = HybridGrid::discrete(3, -12.0, 12.0, 256).unwrap();
    let setup = MeasurementSetup::gaussian(&g, QuantumOperator::diagonal("M", &[1.0, 1.0, -1.0]), 4.0, 1.0, 0.5).unwrap();
    let psi_q = amplitudes(&[c(0.6, 0.0), c(0.0, 0.48), c(0.64, 0.0)]);
    let p = setup.branch_probabilities(&psi_q);
    assert!((p[0].1 - 0.4096).abs() < 1e-12 && (p[1].1 - 0.5904).abs() < 1e-12);
    let e = evolve_measurement(&g, &psi_q, &setup, 0.0005, 1.0).unwrap();
    let r = pointer_distribution(&e, &setup).unwrap();
    assert!((r.branch_weights[0].1 - 0.4096).abs() < 1e-9);
    assert!((r.branch_weights[1].1 - 0.5904).abs() < 1e-9);
    // reading in the degenerate branch keeps the relative amplitudes inside it
    let col = collapse(&e, &setup, 4.0).unwrap();
    let marg = col.psi_a.mapv(|z| z.norm_sqr());
    let expected = [0.36 / 0.5904, 0.2304 / 0.5904, 0.0];
    for (m, x) in marg.iter().zip(expected) {
        assert!((m - x).abs() < 1e-8, "{marg:?}");
    }
}

#[test]
fn collapse_in_a_rotated_basis() {
    // measuring sigma_x: eigenvectors (1, +-1)/sqrt 2
    let g = HybridGrid::discrete(2, -12.0, 12.0, 256).unwrap();
    let setup = MeasurementSetup::gaussian(&g, QuantumOperator::pauli_x(), 4.0, 1.0, 0.5).unwrap();
    let (th, ph) = (0.4f64, 1.1f64);
    let psi_q = amplitudes(&[c(th.cos(), 0.0), Complex64::from_polar(th.sin(), ph)]);
    let plus = 0.5 * (1.0 + (2.0 * th).sin() * ph.cos());
    let p = setup.branch_probabilities(&psi_q);
    assert!((p[1].1 - plus).abs() < 1e-12);
    let e = evolve_measurement(&g, &psi_q, &setup, 0.0005, 1.0).unwrap();
    for (a, lambda) in [(4.0, 1.0), (-4.0, -1.0)] {
        let col = collapse(&e, &setup, a).unwrap();
        assert_eq!(col.eigenvalue, lambda);
        for z in col.psi_a.iter() {
            assert!((z.norm_sqr() - 0.5).abs() < 1e-8);
        }
        let rel = col.psi_a[1] / col.psi_a[0];
        assert!((rel - c(lambda, 0.0)).norm() < 1e-8);
    }
}

#[test]
fn collapsed_state_is_strongly_separable() {
    let (g, setup) = qubit_setup();
    let psi_q = amplitudes(&[c(0.6, 0.0), c(0.0, 0.8)]);
    let e = evolve_measurement(&g, &psi_q, &setup, 0.0005, 1.0).unwrap();
    let col = collapse(&e, &setup, -4.0).unwrap();
    let fs = [PhaseFunction::x(), PhaseFunction::k(), PhaseFunction::kinetic(1.0), PhaseFunction::xk(), PhaseFunction::x2()];
    let ms = [QuantumOperator::pauli_x(), QuantumOperator::pauli_y(), QuantumOperator::pauli_z()];
    for f in &fs {
        for m in &ms {
            let b = poisson_bracket_ps(&ClassicalObservable::new(f.clone()), &QuantumObservable::new(m.clone()), &col.ensemble).unwrap();
            assert!(b.value.abs() < 1e-9, "{} {}: {}", f.label(), m.label(), b.value);
        }
    }
}

#[test]
fn reading_between_branches_is_ambiguous() {
    let (g, setup) = qubit_setup();
    let e = exact_post_measurement(&g, &amplitudes(&[c(1.0, 0.0), c(1.0, 0.0)]), &setup, 1.0).unwrap();
    assert!(matches!(collapse(&e, &setup, 0.0), Err(HybridError::AmbiguousReading(_))));
    // pointers that overlap put a mid reading in both supports
    let wide = MeasurementSetup::gaussian(&g, QuantumOperator::pauli_z(), 0.5, 1.0, 0.5).unwrap();
    let e = exact_post_measurement(&g, &amplitudes(&[c(1.0, 0.0), c(1.0, 0.0)]), &wide, 1.0).unwrap();
    assert!(matches!(collapse(&e, &wide, 0.0), Err(HybridError::AmbiguousReading(_))));
}
