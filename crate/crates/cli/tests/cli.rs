use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const HEADER: &str = "t,v_dc,i_dc_g,i_dc_m,p_g,q_g,p_m,q_m,v_g_mag,v_g_ang,v_m_mag,v_m_ang,e_g_d,e_g_q,e_m_d,e_m_q";

fn scenario(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

fn btbsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_btbsim")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Scenario A with its events replaced.
fn with_events(dir: &Path, events: &str) -> PathBuf {
    let text = std::fs::read_to_string(scenario("scenario_a.cfg")).unwrap();
    let head = &text[..text.find("[events]").unwrap()];
    let path = dir.join("edited.cfg");
    std::fs::write(&path, format!("{head}[events]\n{events}")).unwrap();
    path
}

#[test]
fn run_writes_full_csv() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.csv");
    let o = btbsim(&["run", scenario("scenario_a.cfg").to_str().unwrap(), "--t-stop", "20", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], HEADER);
    assert_eq!(lines.len() - 1, 20_001);
    assert!(lines.last().unwrap().starts_with("20,"));
}

#[test]
fn csv_goes_to_stdout_without_out() {
    let o = btbsim(&["run", scenario("scenario_a.cfg").to_str().unwrap(), "--t-stop", "0.1", "--stride", "10"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(text.lines().next().unwrap(), HEADER);
    assert_eq!(text.lines().count(), 1 + 11);
}

#[test]
fn summary_reports_final_values() {
    let o = btbsim(&["run", scenario("scenario_a.cfg").to_str().unwrap(), "--summary"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let value = |name: &str| -> f64 {
        let line = text.lines().find(|l| l.trim_start().starts_with(name)).unwrap();
        line.split('=').nth(1).unwrap().trim().parse().unwrap()
    };
    assert!((value("p_m") - 20e3).abs() < 1.0, "{text}");
    assert!((value("v_dc") - 600.0).abs() < 1.0, "{text}");
    assert!(text.contains("after the event at 7 s"));
    assert!(text.contains("steady-state solver"));
}

#[test]
fn compare_is_within_threshold() {
    let o = btbsim(&["run", scenario("scenario_b.cfg").to_str().unwrap(), "--compare"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let text = stdout(&o);
    let dv: f64 = text
        .lines()
        .find(|l| l.starts_with("v_dc"))
        .unwrap()
        .split_whitespace()
        .nth(1)
        .unwrap()
        .parse()
        .unwrap();
    assert!(dv < 3.0, "{text}");
}

#[test]
fn compare_threshold_failure_exits_4() {
    let o = btbsim(&[
        "run",
        scenario("scenario_b.cfg").to_str().unwrap(),
        "--t-stop",
        "8",
        "--compare",
        "--max-dv-dc",
        "0.01",
    ]);
    assert_eq!(code(&o), 4, "{}", stderr(&o));
    assert!(stderr(&o).contains("threshold"));
}

#[test]
fn oracle_mode_writes_same_grid() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o.csv");
    let o = btbsim(&[
        "run",
        scenario("scenario_a.cfg").to_str().unwrap(),
        "--oracle",
        "--t-stop",
        "0.5",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 1 + 501);
}

#[test]
fn usage_errors_exit_1() {
    assert_eq!(code(&btbsim(&[])), 1);
    assert_eq!(code(&btbsim(&["run"])), 1);
    assert_eq!(code(&btbsim(&["run", scenario("scenario_a.cfg").to_str().unwrap(), "--dt", "0.5"])), 1);
    assert_eq!(code(&btbsim(&["--help"])), 0);
}

#[test]
fn parse_errors_exit_2_with_location() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(scenario("scenario_a.cfg")).unwrap();
    let path = dir.path().join("bad.cfg");
    std::fs::write(&path, text.replace("c_dc = 5000 uF", "")).unwrap();
    let o = btbsim(&["run", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("c_dc") && err.contains("dclink"), "{err}");

    let path = with_events(dir.path(), "msc.p_ref = 45 kW @ 15 s\nmsc.p_ref = 20 kW @ 7 s\n");
    let o = btbsim(&["check", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("15") && err.contains('7'), "{err}");
}

#[test]
fn model_failure_exits_3_and_keeps_partial_csv() {
    let dir = tempfile::tempdir().unwrap();
    let path = with_events(dir.path(), "msc.p_ref = 20 kW @ 0 s\ngrid.load_add = 0 0.0001 0 @ 0.5 s\n");
    let out = dir.path().join("partial.csv");
    let o = btbsim(&["run", path.to_str().unwrap(), "--t-stop", "1", "--out", out.to_str().unwrap()]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    assert!(stderr(&o).contains("t = 0.5"), "{}", stderr(&o));
    let text = std::fs::read_to_string(&out).unwrap();
    assert_eq!(text.lines().count(), 1 + 501);
}

#[test]
fn check_accepts_shipped_scenarios() {
    for name in ["scenario_a.cfg", "scenario_b.cfg"] {
        let o = btbsim(&["check", scenario(name).to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        assert!(stdout(&o).contains("2 events"));
        assert!(stderr(&o).is_empty(), "{}", stderr(&o));
    }
}

#[test]
fn plot_layout_follows_scenario() {
    let dir = tempfile::tempdir().unwrap();
    for (name, expect, other) in [("scenario_a.cfg", "\"i_dc_m\"", "\"p_g\""), ("scenario_b.cfg", "\"p_g\"", "\"i_dc_m\"")] {
        let csv = dir.path().join(format!("{name}.csv"));
        let o = btbsim(&["run", scenario(name).to_str().unwrap(), "--out", csv.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        let script = dir.path().join("plot.py");
        let o = btbsim(&["plot", csv.to_str().unwrap(), "--out", script.to_str().unwrap()]);
        assert_eq!(code(&o), 0, "{}", stderr(&o));
        let text = std::fs::read_to_string(&script).unwrap();
        assert!(text.contains(expect) && !text.contains(other), "{name}");
    }
    let o = btbsim(&["plot", dir.path().join("scenario_a.cfg.csv").to_str().unwrap(), "--layout", "powers"]);
    assert!(stdout(&o).contains("\"p_m\""));
}

#[test]
fn plot_rejects_empty_or_foreign_csv() {
    let dir = tempfile::tempdir().unwrap();
    let empty = dir.path().join("empty.csv");
    std::fs::write(&empty, "").unwrap();
    assert_eq!(code(&btbsim(&["plot", empty.to_str().unwrap()])), 2);
    std::fs::write(&empty, format!("{HEADER}\n")).unwrap();
    assert_eq!(code(&btbsim(&["plot", empty.to_str().unwrap()])), 2);
    let foreign = dir.path().join("foreign.csv");
    std::fs::write(&foreign, "a,b\n1,2\n").unwrap();
    assert_eq!(code(&btbsim(&["plot", foreign.to_str().unwrap()])), 2);
}
