//! Every shipped scenario parses, round-trips and passes its checks.

use pulsesync::scenario::Scenario;
use pulsesync::sim::simulate;
use std::path::PathBuf;

fn library() -> Vec<(String, Scenario)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios");
    let mut out: Vec<(String, Scenario)> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .map(|p| {
            let sc = Scenario::from_json(&std::fs::read_to_string(&p).unwrap()).unwrap();
            (p.file_name().unwrap().to_string_lossy().into_owned(), sc)
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn library_covers_the_expected_scenarios() {
    let names: Vec<String> = library().into_iter().map(|(n, _)| n).collect();
    for want in ["fault_free_baseline.json", "silent_fault.json", "split_fault.json", "worst_drift.json", "stabilization_from_chaos.json"] {
        assert!(names.iter().any(|n| n == want), "missing {want}");
    }
}

#[test]
fn library_round_trips() {
    for (name, sc) in library() {
        assert_eq!(Scenario::from_json(&sc.to_json()).unwrap(), sc, "{name}");
    }
}

#[test]
fn library_scenarios_pass() {
    for (name, sc) in library() {
        let r = simulate(&sc).unwrap();
        assert!(r.passed(), "{name}: {:?}", r.violation_counts);
        assert!(r.steady_state_skew <= r.e_limit, "{name}");
    }
}
