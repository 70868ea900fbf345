mod common;

use common::{load_cases, score};
use qase::metrics::{squad_em, squad_f1};

#[test]
fn fixture_has_twenty_cases() {
    assert_eq!(load_cases().len(), 20);
}

#[test]
fn every_case_matches_hand_computed_value() {
    for case in load_cases() {
        let expected = case.expected.0 as f64 / case.expected.1 as f64;
        let got = score(&case);
        assert!((got - expected).abs() <= f64::EPSILON, "{}: got {got}, expected {expected}", case.name);
    }
}

#[test]
fn empty_gold_list_is_an_error() {
    assert!(squad_em("x", &[]).is_err());
    assert!(squad_f1("x", &[]).is_err());
}
