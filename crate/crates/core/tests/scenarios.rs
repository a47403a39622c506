//! Public-API checks on the shipped scenario files.

use std::path::PathBuf;

use pmsg_control::config::{builtin_config, load_config};
use pmsg_control::sim::{compute_metrics, run_closed_loop, Fidelity};
use pmsg_control::verify::{inner_loop_regulation, numerical_invariants, oracle_equivalence};

fn shipped(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("scenarios").join(format!("{name}.cfg"))
}

#[test]
fn shipped_files_match_builtins() {
    for name in ["case1", "case2"] {
        assert_eq!(load_config(&shipped(name)).unwrap(), builtin_config(name).unwrap());
    }
}

#[test]
fn switched_case1_from_config() {
    let text = std::fs::read_to_string(shipped("case1")).unwrap().replace("fidelity = averaged", "fidelity = switched");
    let text = text.replace("integrator_step = 5us", "integrator_step = 1us").replace("duration = 80ms", "duration = 20ms");
    let doc = pmsg_control::config::parse_config(&text).unwrap();
    assert_eq!(doc.scenario.fidelity, Fidelity::Switched);
    let trace = run_closed_loop(&doc.scenario).unwrap();
    let m = compute_metrics(&trace, &doc.scenario).unwrap();
    let s = &m.segments[0];
    assert!((s.v_dc_mean - 540.0).abs() < 2.0, "{s:?}");
    assert!((s.i_d + 62.0).abs() < 3.0 && (s.i_q + 135.3).abs() < 3.0, "{s:?}");
}

#[test]
fn standalone_checks_pass() {
    for (name, r) in [
        ("oracle", oracle_equivalence()),
        ("inner loop", inner_loop_regulation()),
        ("invariants", numerical_invariants()),
    ] {
        let (ok, detail) = r.unwrap();
        assert!(ok, "{name}: {detail}");
    }
}
