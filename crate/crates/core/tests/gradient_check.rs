//! Analytic gradients against central finite differences.

mod common;

use anylevel::diffusion::ArchSpec;

#[test]
fn gradients_match_finite_differences_with_attention() {
    let report = common::gradient_check(common::tiny_arch(true), 11);
    assert!(report.num_params <= 5_000, "{} parameters", report.num_params);
    for (name, err) in &report.group_errors {
        assert!(*err < 1e-3, "{name}: relative error {err:e}");
    }
}

#[test]
fn gradients_match_finite_differences_without_attention() {
    let report = common::gradient_check(ArchSpec { attention: false, ..common::tiny_arch(false) }, 12);
    for (name, err) in &report.group_errors {
        assert!(*err < 1e-3, "{name}: relative error {err:e}");
    }
}
