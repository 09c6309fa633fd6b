use btb_core::scenario::{EventAction, InitMode};
use btb_core::{parse_scenario_str, Scenario};
use btb_validation::shipped;

fn power_steps(s: &Scenario) -> Vec<(f64, f64)> {
    s.events
        .iter()
        .map(|e| match e.action {
            EventAction::MscPRef(p) => (e.time, p),
            other => panic!("unexpected event {other:?}"),
        })
        .collect()
}

#[test]
fn scenario_a_parses_cleanly() {
    let s = shipped("scenario_a.cfg");
    assert!(s.warnings().is_empty(), "{:?}", s.warnings());
    assert_eq!(power_steps(&s), vec![(7.0, 45e3), (15.0, 20e3)]);
    assert_eq!(s.simulation.init_mode, InitMode::EquilibriumInit);
    assert_eq!(s.simulation.t_stop, 20.0);
}

#[test]
fn scenario_b_parses_cleanly() {
    let s = shipped("scenario_b.cfg");
    assert!(s.warnings().is_empty(), "{:?}", s.warnings());
    assert_eq!(power_steps(&s), vec![(7.0, 20e3), (15.0, -20e3)]);
}

#[test]
fn shipped_parameters_match_the_reference_design() {
    let s = shipped("scenario_a.cfg");
    let mut r = Scenario::reference_50kva();
    r.events = s.events.clone();
    assert_eq!(s, r);
}

#[test]
fn shipped_scenarios_round_trip() {
    for name in ["scenario_a.cfg", "scenario_b.cfg"] {
        let s = shipped(name);
        assert_eq!(parse_scenario_str(&s.to_string()).unwrap(), s, "{name}");
    }
}
