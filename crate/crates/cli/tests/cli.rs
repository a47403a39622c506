use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn pmsg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pmsg")).args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn scenario(name: &str) -> String {
    format!("{}/../core/scenarios/{name}.cfg", env!("CARGO_MANIFEST_DIR"))
}

fn metrics(dir: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

fn seg(m: &serde_json::Value, k: usize, key: &str) -> f64 {
    m["segments"][k][key].as_f64().unwrap()
}

#[test]
fn optimal_currents_case1_point() {
    let o = pmsg(&["optimal-currents", "-43.5kW", "7000rpm", "540V", "bmw-i3", "--verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let line = stdout(&o);
    let f: Vec<&str> = line.trim().split(',').collect();
    assert_eq!(f.len(), 9);
    let (i_d, i_q): (f64, f64) = (f[0].parse().unwrap(), f[1].parse().unwrap());
    assert!((i_d + 62.0).abs() <= 1.0 && (i_q + 135.3).abs() <= 1.0, "{line}");
    assert_eq!(f[8], "true");
}

#[test]
fn optimal_currents_zero_power_json() {
    let o = pmsg(&["optimal-currents", "0W", "7000rpm", "540V", "--format", "json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_str(&stdout(&o)).unwrap();
    assert_eq!(v["i_d"].as_f64(), Some(0.0));
    assert_eq!(v["i_q"].as_f64(), Some(0.0));
    assert_eq!(v["feasible"].as_bool(), Some(true));
}

#[test]
fn optimal_currents_infeasible_reports_boundary() {
    let o = pmsg(&["optimal-currents", "-300kW", "7000rpm", "540V"]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("infeasible"));
    assert!(stdout(&o).contains(",false,"));
}

#[test]
fn optimal_currents_bad_unit() {
    let o = pmsg(&["optimal-currents", "-43.5kX", "7000rpm", "540V"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("power"), "{}", stderr(&o));
}

#[test]
fn case1_builtin_writes_trace_and_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmsg(&["case1", "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let trace = fs::read_to_string(dir.path().join("trace.csv")).unwrap();
    let mut lines = trace.lines();
    assert_eq!(lines.next(), Some("# pmsg-trace v1"));
    assert!(lines.next().unwrap().starts_with("t,v_dc,i_d,i_q"));
    assert_eq!(trace.lines().count(), 2 + 3200);
    let m = metrics(dir.path());
    assert!((seg(&m, 0, "i_d") + 62.0).abs() < 2.0 && (seg(&m, 0, "i_q") + 135.3).abs() < 2.0);
    assert!((seg(&m, 1, "i_d") + 93.5).abs() < 2.0 && (seg(&m, 1, "i_q") + 174.9).abs() < 2.0);
}

#[test]
fn run_case2_file_stays_in_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let o = pmsg(&["run", &scenario("case2"), "-o", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let m = metrics(dir.path());
    assert!(m["v_dc_min"].as_f64().unwrap() >= 420.0);
    assert!(m["v_dc_max"].as_f64().unwrap() <= 670.0);
    assert_eq!(m["segments"].as_array().unwrap().len(), 3);
}

fn write_cfg(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SHORT: &str = "[scenario]\nname = short\nspeed = 7000rpm\nload = 0s:20kW, 5ms:30kW\nduration = 10ms\n[output]\ndecimation = 4\n";

#[test]
fn runs_are_bit_identical_and_decimated() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "short.cfg", SHORT);
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    assert_eq!(pmsg(&["run", &cfg, "-o", a.to_str().unwrap()]).status.code(), Some(0));
    assert_eq!(pmsg(&["run", &cfg, "-o", b.to_str().unwrap()]).status.code(), Some(0));
    let ta = fs::read(a.join("trace.csv")).unwrap();
    assert_eq!(ta, fs::read(b.join("trace.csv")).unwrap());
    assert_eq!(String::from_utf8(ta).unwrap().lines().count(), 2 + 100);
}

#[test]
fn parallel_jobs_use_isolated_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let c1 = write_cfg(dir.path(), "one.cfg", SHORT);
    let c2 = write_cfg(dir.path(), "two.cfg", &SHORT.replace("20kW", "10kW"));
    let out = dir.path().join("out");
    let o = pmsg(&["run", &c1, &c2, "-o", out.to_str().unwrap(), "--jobs", "2"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(out.join("one/trace.csv").exists() && out.join("two/metrics.json").exists());
    assert_eq!(seg(&metrics(&out.join("two")), 0, "p_load"), 10e3);
}

#[test]
fn config_errors_exit_1_and_name_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(dir.path(), "bad.cfg", "[machine]\npreset = bmw-i3\nl_d = 0.090mX\n");
    let o = pmsg(&["run", &cfg, "-o", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("l_d") && stderr(&o).contains("line 3"), "{}", stderr(&o));

    let cfg = write_cfg(dir.path(), "unknown.cfg", "[scenario]\nspeeed = 7000rpm\n");
    let o = pmsg(&["run", &cfg, "-o", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("speeed"), "{}", stderr(&o));

    let o = pmsg(&["run", dir.path().join("missing.cfg").to_str().unwrap(), "-o", "x"]);
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn divergence_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_cfg(
        dir.path(),
        "heavy.cfg",
        "[scenario]\nspeed = 7000rpm\nload = 400kW\nduration = 50ms\ninitial = state\ninitial_v_dc = 540V\n",
    );
    let o = pmsg(&["run", &cfg, "-o", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("diverged"));
}

#[test]
fn verify_passes() {
    let o = pmsg(&["verify"]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let out = stdout(&o);
    assert_eq!(out.lines().filter(|l| l.starts_with("[PASS]")).count(), 11, "{out}");
}
