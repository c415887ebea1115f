mod common;

#[test]
fn cbf_no_false_negatives() {
    common::cbf_no_false_negatives().unwrap();
}

#[test]
fn cbf_fpr_scaling() {
    common::cbf_fpr_scaling().unwrap();
}

#[test]
fn pcb_round_trip() {
    common::pcb_round_trip().unwrap();
}

#[test]
fn fork_choice_order_independent() {
    common::fork_choice_order_independent().unwrap();
}

#[test]
fn recents_window_safety() {
    common::recents_window_safety().unwrap();
}

#[test]
fn deterministic_replay() {
    common::deterministic_replay().unwrap();
}
