//! Negative control for the gradient check. Lives in its own test binary
//! because the fault hook is process-wide.

use emotcav::validate::gradient_integrity;

#[test]
fn injected_fault_is_caught_and_cleared() {
    let r = gradient_integrity(0, 2, true);
    assert!(!r.passed, "{}", r.detail);
    assert!(r.detail.contains("tanh"), "{}", r.detail);
    let r = gradient_integrity(0, 2, false);
    assert!(r.passed, "{}", r.detail);
}
