//! Analytic gradients of the teacher-forced loss against central finite
//! differences on a miniature model with random parameters.

mod common;

#[test]
fn analytic_gradients_match_central_differences() {
    let r = common::gradient_check(150);
    println!(
        "checked {} coordinates, worst relative error {:e}",
        r.checked, r.worst_relative_error
    );
    assert_eq!(r.checked, 150);
    assert!(r.worst_relative_error <= 1e-3, "worst {:e}", r.worst_relative_error);
}
