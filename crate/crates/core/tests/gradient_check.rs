mod common;

use casil::types::ActionKind;
use common::gradient_errors;

fn check(kind: ActionKind) {
    let errors = gradient_errors(kind);
    let names: Vec<&str> = errors.iter().map(|(g, _, _)| g.as_str()).collect();
    assert_eq!(names, ["text", "obs", "skill", "gen", "policy"]);
    for (group, rel, nonzero) in errors {
        assert!(nonzero, "group {group} has an all-zero gradient");
        assert!(rel < 1e-4, "group {group}: relative error {rel:e}");
    }
}

#[test]
fn casil_loss_gradients_match_finite_differences_discrete() {
    check(ActionKind::Discrete);
}

#[test]
fn casil_loss_gradients_match_finite_differences_continuous() {
    check(ActionKind::Continuous);
}
