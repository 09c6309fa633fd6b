//! Scenario fixtures, trace helpers and the randomized property suites shared
//! by the integration tests and the acceptance run.

pub mod props;

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};
use std::path::PathBuf;

use btb_core::{parse_scenario, OutputRow, Scenario};

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
        .join("../../scenarios")
        .join(name)
}

pub fn shipped(name: &str) -> Scenario {
    parse_scenario(&scenario_path(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
}

/// Hash of the exact bit patterns of every logged value.
pub fn rows_hash(rows: &[OutputRow]) -> u64 {
    let mut h = DefaultHasher::new();
    for r in rows {
        for v in r.values() {
            v.to_bits().hash(&mut h);
        }
    }
    h.finish()
}

/// Peak phase current magnitude at a PCC, from the logged power and voltage.
pub fn current_magnitude(p: f64, q: f64, v_mag: f64) -> f64 {
    2.0 / 3.0 * p.hypot(q) / v_mag
}

/// Last row strictly before `t`.
pub fn row_before(rows: &[OutputRow], t: f64) -> OutputRow {
    *rows.iter().rev().find(|r| r.t < t - 1e-9).expect("row before t")
}

/// Row at `t` on the logging grid.
pub fn row_at(rows: &[OutputRow], t: f64) -> OutputRow {
    *rows
        .iter()
        .find(|r| (r.t - t).abs() < 1e-9)
        .unwrap_or_else(|| panic!("no row at t = {t}"))
}
