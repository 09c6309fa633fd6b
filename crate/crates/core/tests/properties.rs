use btb_validation::props::{self, CASES};

#[test]
fn dq_projection_round_trips() {
    props::dq_round_trip(CASES).unwrap();
}

#[test]
fn norton_and_thevenin_forms_agree() {
    props::norton_equivalence(CASES).unwrap();
}

#[test]
fn power_is_frame_invariant() {
    props::power_rotation_invariance(CASES).unwrap();
}

#[test]
fn network_solution_superposes() {
    props::superposition(CASES).unwrap();
}

#[test]
fn removing_a_load_restores_admittance_exactly() {
    props::stamp_unstamp(CASES).unwrap();
}

#[test]
fn unloaded_network_sits_at_source_voltage() {
    props::unloaded_source(CASES).unwrap();
}

#[test]
fn power_steps_do_not_jump_states() {
    props::event_continuity(CASES).unwrap();
}
