//! Scenario files.
//!
//! Sectioned `key = value` text. Physical values take a unit suffix with an
//! optional SI prefix (`0.090mH`, `1mF`, `43.5kW`, `25us`); bare numbers are
//! read in SI base units. Profiles are comma-separated `time:value` pairs.
//! `#` starts a comment. Unknown sections and keys are rejected. Without a
//! `[machine]` preset or constants the BMW i3 machine is used.
//!
//! ```text
//! [machine]
//! preset = bmw-i3
//!
//! [scenario]
//! speed = 7000rpm
//! load = 0s:43.5kW, 40ms:62.25kW
//! duration = 80ms
//! ```

use std::collections::HashMap;
use std::path::Path;

use thiserror::Error;

use crate::current_loop::ObserverMode;
use crate::machine::MachineParams;
use crate::sim::{Fidelity, InitialCondition, LoadEstimator, Profile, Scenario};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("line {line}: {key}: {message}")]
    Key { line: usize, key: String, message: String },
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
}

/// Output paths (relative to the run's output directory) and trace decimation.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputConfig {
    pub trace: String,
    pub metrics: String,
    pub decimation: usize,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { trace: "trace.csv".into(), metrics: "metrics.json".into(), decimation: 1 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConfigDocument {
    pub scenario: Scenario,
    pub output: OutputConfig,
}

const CASE1: &str = include_str!("../scenarios/case1.cfg");
const CASE2: &str = include_str!("../scenarios/case2.cfg");

/// Text of a built-in scenario (`case1`, `case2`).
pub fn builtin(name: &str) -> Option<&'static str> {
    match name {
        "case1" => Some(CASE1),
        "case2" => Some(CASE2),
        _ => None,
    }
}

pub fn builtin_config(name: &str) -> Result<ConfigDocument, ConfigError> {
    parse_config(builtin(name).ok_or_else(|| ConfigError::Invalid(format!("no built-in scenario {name:?}")))?)
}

pub fn load_config(path: &Path) -> Result<ConfigDocument, ConfigError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.display().to_string(), source })?;
    parse_config(&text)
}

const PREFIXES: [(&str, f64); 9] = [
    ("p", 1e-12),
    ("n", 1e-9),
    ("u", 1e-6),
    ("µ", 1e-6),
    ("m", 1e-3),
    ("k", 1e3),
    ("M", 1e6),
    ("G", 1e9),
    ("", 1.0),
];

/// Parses `<number>[<prefix><unit>]` where `unit` is one of `units`.
pub fn parse_quantity(text: &str, units: &[&str]) -> Result<f64, String> {
    let text = text.trim();
    let split = text
        .char_indices()
        .find(|&(_, c)| !(c.is_ascii_digit() || matches!(c, '+' | '-' | '.' | 'e' | 'E')))
        .map_or(text.len(), |(i, _)| i);
    // back off over a trailing exponent marker that belongs to nothing
    let mut cut = split;
    let value = loop {
        match text[..cut].parse::<f64>() {
            Ok(v) => break v,
            Err(_) if cut > 0 => cut -= 1,
            Err(_) => return Err(format!("expected a number, got {text:?}")),
        }
    };
    if !value.is_finite() {
        return Err(format!("value {text:?} is not finite"));
    }
    let suffix = text[cut..].trim();
    if suffix.is_empty() {
        return Ok(value);
    }
    for unit in units {
        if let Some(prefix) = suffix.strip_suffix(unit) {
            if let Some((_, scale)) = PREFIXES.iter().find(|(p, _)| *p == prefix) {
                return Ok(value * scale);
            }
        }
    }
    Err(format!("unknown unit {suffix:?} (expected {})", units.join(" or ")))
}

fn parse_bool(text: &str) -> Result<bool, String> {
    match text.trim() {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        other => Err(format!("expected true or false, got {other:?}")),
    }
}

fn parse_count(text: &str) -> Result<usize, String> {
    text.trim().parse::<usize>().map_err(|_| format!("expected a nonnegative integer, got {:?}", text.trim()))
}

fn parse_pair(text: &str) -> Result<[f64; 2], String> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(format!("expected two comma-separated numbers, got {text:?}"));
    }
    Ok([parse_quantity(parts[0], &[])?, parse_quantity(parts[1], &[])?])
}

fn parse_profile(text: &str, units: &[&str]) -> Result<Profile, String> {
    let mut steps = Vec::new();
    for item in text.split(',') {
        let item = item.trim();
        match item.split_once(':') {
            Some((t, v)) => steps.push((parse_quantity(t, &["s"])?, parse_quantity(v, units)?)),
            None if steps.is_empty() && !text.contains(',') => steps.push((0.0, parse_quantity(item, units)?)),
            None => return Err(format!("profile entries must be time:value, got {item:?}")),
        }
    }
    Profile::new(steps).map_err(|e| e.to_string())
}

struct Entry {
    line: usize,
    value: String,
}

type Section = HashMap<String, Entry>;

const SECTIONS: [(&str, &[&str]); 5] = [
    ("machine", &["preset", "l_d", "l_q", "r_s", "lambda_m", "poles", "i_peak", "t_max", "p_max", "n_max"]),
    ("dc_link", &["c", "r", "v_dc_ref", "v_dc_min", "v_dc_max", "v_floor"]),
    (
        "controller",
        &[
            "pole_d",
            "pole_q",
            "observer",
            "hold_compensation",
            "t_s_inner",
            "t_s_outer",
            "horizon",
            "q_weight",
            "r_weight",
            "max_sqp_iters",
            "kkt_tol",
            "slack_linear",
            "slack_quadratic",
            "load_estimator",
            "estimator_tau",
        ],
    ),
    (
        "scenario",
        &[
            "name",
            "duration",
            "fidelity",
            "integrator_step",
            "f_sw",
            "speed",
            "load",
            "initial",
            "initial_v_dc",
            "initial_i_d",
            "initial_i_q",
        ],
    ),
    ("output", &["trace", "metrics", "decimation"]),
];

fn tokenize(text: &str) -> Result<HashMap<&'static str, Section>, ConfigError> {
    let mut doc: HashMap<&'static str, Section> = HashMap::new();
    let mut current: Option<(&'static str, &'static [&'static str])> = None;
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        if let Some(name) = content.strip_prefix('[') {
            let name = name
                .strip_suffix(']')
                .ok_or_else(|| ConfigError::Syntax { line, message: format!("malformed section header {content:?}") })?
                .trim();
            let (sname, keys) = SECTIONS
                .iter()
                .find(|(s, _)| *s == name)
                .ok_or_else(|| ConfigError::Syntax { line, message: format!("unknown section [{name}]") })?;
            current = Some((sname, keys));
            doc.entry(sname).or_default();
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| ConfigError::Syntax { line, message: format!("expected key = value, got {content:?}") })?;
        let key = key.trim();
        let value = value.trim();
        let (sname, keys) =
            current.ok_or_else(|| ConfigError::Key { line, key: key.into(), message: "key outside of any section".into() })?;
        if !keys.contains(&key) {
            return Err(ConfigError::Key { line, key: key.into(), message: format!("unknown key in [{sname}]") });
        }
        let section = doc.get_mut(sname).expect("section inserted");
        if let Some(prev) = section.get(key) {
            return Err(ConfigError::Key {
                line,
                key: key.into(),
                message: format!("duplicate key (first set on line {})", prev.line),
            });
        }
        section.insert(key.to_string(), Entry { line, value: value.to_string() });
    }
    Ok(doc)
}

/// Typed access to one section that attaches the line and key to every error.
struct Reader<'a> {
    section: Option<&'a Section>,
}

impl Reader<'_> {
    fn get<T>(&self, key: &str, parse: impl FnOnce(&str) -> Result<T, String>) -> Result<Option<T>, ConfigError> {
        let Some(e) = self.section.and_then(|s| s.get(key)) else { return Ok(None) };
        parse(&e.value).map(Some).map_err(|message| ConfigError::Key { line: e.line, key: key.into(), message })
    }

    fn quantity(&self, key: &str, units: &[&str]) -> Result<Option<f64>, ConfigError> {
        self.get(key, |v| parse_quantity(v, units))
    }

    fn set(&self, key: &str, units: &[&str], target: &mut f64) -> Result<(), ConfigError> {
        if let Some(v) = self.quantity(key, units)? {
            *target = v;
        }
        Ok(())
    }

    fn line(&self, key: &str) -> usize {
        self.section.and_then(|s| s.get(key)).map_or(0, |e| e.line)
    }
}

const HENRY: &[&str] = &["H"];
const OHM: &[&str] = &["Ohm", "ohm", "Ω"];
const VOLT: &[&str] = &["V"];
const FLUX: &[&str] = &["Wb", "Vs", "V·s"];
const AMP: &[&str] = &["A"];
const WATT: &[&str] = &["W"];
const SECOND: &[&str] = &["s"];
const FARAD: &[&str] = &["F"];
const HERTZ: &[&str] = &["Hz"];
const RPM: &[&str] = &["rpm"];
const TORQUE: &[&str] = &["Nm", "N·m"];
const RAD_S: &[&str] = &["rad/s"];

pub fn parse_config(text: &str) -> Result<ConfigDocument, ConfigError> {
    let doc = tokenize(text)?;
    let section = |name: &str| Reader { section: doc.get(name) };

    let m = section("machine");
    let mut machine = match m.get("preset", |v| MachineParams::preset(v).ok_or_else(|| format!("unknown preset {v:?}")))? {
        Some(p) => p,
        None => {
            let missing: Vec<&str> = ["l_d", "l_q", "r_s", "lambda_m", "poles", "i_peak", "t_max", "p_max", "n_max"]
                .into_iter()
                .filter(|k| m.section.is_none_or(|s| !s.contains_key(*k)))
                .collect();
            // an absent or empty [machine] section means the default preset
            if !missing.is_empty() && missing.len() < 9 {
                return Err(ConfigError::Invalid(format!(
                    "[machine] needs a preset or all constants; missing {}",
                    missing.join(", ")
                )));
            }
            MachineParams::bmw_i3()
        }
    };
    m.set("l_d", HENRY, &mut machine.l_d)?;
    m.set("l_q", HENRY, &mut machine.l_q)?;
    m.set("r_s", OHM, &mut machine.r_s)?;
    m.set("lambda_m", FLUX, &mut machine.lambda_m)?;
    if let Some(p) = m.get("poles", |v| v.trim().parse::<u32>().map_err(|_| format!("expected an integer, got {v:?}")))? {
        machine.poles = p;
    }
    m.set("i_peak", AMP, &mut machine.i_peak)?;
    m.set("t_max", TORQUE, &mut machine.t_max)?;
    m.set("p_max", WATT, &mut machine.p_max)?;
    m.set("n_max", RPM, &mut machine.n_max)?;

    let d = section("dc_link");
    let mut dc = crate::machine::DcLinkParams::default();
    d.set("c", FARAD, &mut dc.c)?;
    d.set("r", OHM, &mut dc.r)?;
    d.set("v_dc_ref", VOLT, &mut dc.v_dc_ref)?;
    d.set("v_dc_min", VOLT, &mut dc.v_dc_min)?;
    d.set("v_dc_max", VOLT, &mut dc.v_dc_max)?;
    d.set("v_floor", VOLT, &mut dc.v_floor)?;

    let mut sc = Scenario::new("scenario", machine, dc);

    let c = section("controller");
    c.set("pole_d", RAD_S, &mut sc.inner.pole_d)?;
    c.set("pole_q", RAD_S, &mut sc.inner.pole_q)?;
    if let Some(o) = c.get("observer", |v| match v {
        "identity" => Ok(ObserverMode::Identity),
        "luenberger" => Ok(ObserverMode::Luenberger),
        _ => Err(format!("expected identity or luenberger, got {v:?}")),
    })? {
        sc.inner.observer = o;
    }
    if let Some(b) = c.get("hold_compensation", parse_bool)? {
        sc.inner.hold_compensation = b;
    }
    c.set("t_s_inner", SECOND, &mut sc.inner.t_s)?;
    c.set("t_s_outer", SECOND, &mut sc.nmpc.t_s)?;
    if let Some(n) = c.get("horizon", parse_count)? {
        sc.nmpc.horizon_n = n;
    }
    if let Some(q) = c.get("q_weight", parse_pair)? {
        sc.nmpc.q_weight = q;
    }
    if let Some(r) = c.get("r_weight", parse_pair)? {
        sc.nmpc.r_weight = r;
    }
    if let Some(n) = c.get("max_sqp_iters", parse_count)? {
        sc.nmpc.max_sqp_iters = n;
    }
    c.set("kkt_tol", &[], &mut sc.nmpc.kkt_tol)?;
    c.set("slack_linear", &[], &mut sc.nmpc.slack_weights[0])?;
    c.set("slack_quadratic", &[], &mut sc.nmpc.slack_weights[1])?;
    let tau = c.quantity("estimator_tau", SECOND)?.unwrap_or(2e-4);
    if let Some(e) = c.get("load_estimator", |v| match v {
        "sensed" => Ok(LoadEstimator::Sensed),
        "reconstructed" => Ok(LoadEstimator::Reconstructed { tau }),
        _ => Err(format!("expected sensed or reconstructed, got {v:?}")),
    })? {
        sc.load_estimator = e;
    }

    let s = section("scenario");
    if let Some(name) = s.get("name", |v| Ok(v.to_string()))? {
        sc.name = name;
    }
    if let Some(f) = s.get("fidelity", |v| match v {
        "averaged" => Ok(Fidelity::Averaged),
        "switched" => Ok(Fidelity::Switched),
        _ => Err(format!("expected averaged or switched, got {v:?}")),
    })? {
        if f == Fidelity::Switched {
            sc = sc.switched();
        }
    }
    s.set("integrator_step", SECOND, &mut sc.integrator_step)?;
    s.set("f_sw", HERTZ, &mut sc.f_sw)?;
    s.set("duration", SECOND, &mut sc.duration)?;
    if let Some(p) = s.get("speed", |v| parse_profile(v, RPM))? {
        sc.speed_rpm = p;
    }
    if let Some(p) = s.get("load", |v| parse_profile(v, WATT))? {
        sc.load_w = p;
    }
    let initial = s.get("initial", |v| match v {
        "settled" | "state" => Ok(v.to_string()),
        _ => Err(format!("expected settled or state, got {v:?}")),
    })?;
    let v0 = s.quantity("initial_v_dc", VOLT)?;
    let d0 = s.quantity("initial_i_d", AMP)?;
    let q0 = s.quantity("initial_i_q", AMP)?;
    match initial.as_deref() {
        Some("state") => {
            sc.initial = InitialCondition::State {
                v_dc: v0.unwrap_or(sc.dc_link.v_dc_ref),
                i_d: d0.unwrap_or(0.0),
                i_q: q0.unwrap_or(0.0),
            };
        }
        _ if v0.is_some() || d0.is_some() || q0.is_some() => {
            return Err(ConfigError::Key {
                line: s.line("initial"),
                key: "initial".into(),
                message: "initial_* values need initial = state".into(),
            });
        }
        _ => {}
    }

    // controller bounds follow the dc link and machine sections
    sc.nmpc.v_dc_ref = sc.dc_link.v_dc_ref;
    sc.nmpc.v_dc_min = sc.dc_link.v_dc_min;
    sc.nmpc.v_dc_max = sc.dc_link.v_dc_max;
    sc.nmpc.i_peak = sc.machine.i_peak;

    let o = section("output");
    let mut output = OutputConfig::default();
    if let Some(t) = o.get("trace", |v| Ok(v.to_string()))? {
        output.trace = t;
    }
    if let Some(m) = o.get("metrics", |v| Ok(v.to_string()))? {
        output.metrics = m;
    }
    if let Some(n) = o.get("decimation", parse_count)? {
        if n == 0 {
            return Err(ConfigError::Key { line: o.line("decimation"), key: "decimation".into(), message: "must be >= 1".into() });
        }
        output.decimation = n;
    }

    sc.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
    Ok(ConfigDocument { scenario: sc, output })
}
