use msdamil::verify::{run_gradcheck, OBJECTIVE_CHECK, REL_TOL};
use msdamil::OpKind;

#[test]
fn every_check_passes_on_a_clean_build() {
    let report = run_gradcheck(None).unwrap();
    assert!(report.passed(), "{report}");
    for r in &report.results {
        assert!(r.comparison.max_relative_error < REL_TOL, "{}", r.name);
        assert!(r.comparison.elements > 0, "{}", r.name);
    }
}

#[test]
fn report_covers_the_composite_objective() {
    let report = run_gradcheck(None).unwrap();
    let objective = report.get(OBJECTIVE_CHECK).unwrap();
    assert!(objective.passed());
    assert!(report.to_string().lines().any(|l| l.starts_with(OBJECTIVE_CHECK)));
}

#[test]
fn perturbed_tanh_is_named() {
    let report = run_gradcheck(Some(OpKind::Tanh)).unwrap();
    assert!(!report.passed());
    assert!(report.failures().contains(&"tanh"));
    assert!(report.to_string().contains("FAILED: tanh"));
}

#[test]
fn every_backward_rule_is_exercised() {
    let kinds = [
        "matmul",
        "transpose",
        "add",
        "mul",
        "scale",
        "sum",
        "add_row_bias",
        "reshape",
        "concat_rows",
        "conv2d",
        "tanh",
        "relu",
        "maxpool2x2",
        "softmax",
        "cross_entropy",
        "row_grad_scale",
    ];
    for name in kinds {
        let kind = OpKind::parse(name).unwrap();
        let report = run_gradcheck(Some(kind)).unwrap();
        assert!(!report.passed(), "a fault in {name} went unnoticed");
    }
}
