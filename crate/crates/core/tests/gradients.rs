use subtune_core::gradcheck::{run_suite, TOLERANCE};

#[test]
fn every_tensor_matches_finite_differences() {
    let checks = run_suite(10, 2024).unwrap();
    let mut failures = Vec::new();
    for c in &checks {
        println!(
            "{:<24} {:<18} instances={} resampled={} max_rel={:.3e}",
            c.case, c.tensor, c.instances, c.resampled, c.max_rel_error
        );
        if !c.passed() {
            failures.push(format!("{} {}", c.case, c.tensor));
        }
    }
    assert!(failures.is_empty(), "above {TOLERANCE}: {failures:?}");
}
