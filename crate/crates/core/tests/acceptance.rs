use sqha_core::acceptance::{run, Mutation};

fn check(id: u8) {
    let outcome = run(id, &Mutation::default());
    println!("{outcome}");
    assert!(outcome.passed, "{outcome}");
}

#[test]
fn c01_eigenstate_stationarity() {
    check(1);
}

#[test]
fn c02_oracle_equivalence() {
    check(2);
}

#[test]
fn c03_quantum_potential_reproduction() {
    check(3);
}

#[test]
fn c04_kernel_fidelity() {
    check(4);
}

#[test]
fn c05_kernel_admissibility() {
    check(5);
}

#[test]
fn c06_scaling_laws() {
    check(6);
}

#[test]
fn c07_estimator_closure() {
    check(7);
}

#[test]
fn c08_tails_and_nonlocality() {
    check(8);
}

#[test]
fn c09_regime_classifier() {
    check(9);
}

#[test]
fn c10_zero_noise_and_reproducibility() {
    check(10);
}

#[test]
fn wrong_qp_prefactor_is_caught() {
    let m = Mutation { qp_scale: 0.5 };
    for id in [1, 3] {
        let outcome = run(id, &m);
        println!("mutated: {outcome}");
        assert!(!outcome.passed, "{outcome}");
    }
}
