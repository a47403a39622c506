//! Acceptance checks shared by the integration tests and `pmsg verify`.
//!
//! Each check returns a [`CheckResult`] with a pass flag and a one-line
//! detail. [`run_all`] runs the reference scenarios once and evaluates every
//! check against them.

use std::time::Instant;

use serde::Serialize;

use crate::config::builtin_config;
use crate::current_loop::{CurrentController, InnerLoopConfig};
use crate::error::Result;
use crate::machine::{
    electrical_power, inverse_park, park_transform, plant_derivatives_with_voltages, rpm_to_electrical,
    DcLinkParams, MachineParams, OperatingPoint, PlantState,
};
use crate::nmpc::{discretize_fe, reduced_dynamics, ReducedState};
use crate::sim::pwm::{sine_pwm, switching_phases};
use crate::sim::{compute_metrics, run_closed_loop, run_current_loop, Metrics, Scenario, Trace};
use crate::steady_state::{brute_force_oracle, solve_static, StaticProblem};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub id: &'static str,
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
    /// Wall-clock seconds spent in the check itself.
    pub elapsed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Report {
    pub checks: Vec<CheckResult>,
    pub elapsed: f64,
}

impl Report {
    pub fn all_passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }
}

/// Closed-loop run of a built-in scenario with its metrics.
#[derive(Debug, Clone)]
pub struct CaseRun {
    pub scenario: Scenario,
    pub trace: Trace,
    pub metrics: Metrics,
}

pub fn run_case(name: &str) -> Result<CaseRun> {
    let scenario = builtin_config(name)
        .map_err(|e| crate::Error::InvalidParameter(e.to_string()))?
        .scenario;
    let trace = run_closed_loop(&scenario)?;
    let metrics = compute_metrics(&trace, &scenario)?;
    Ok(CaseRun { scenario, trace, metrics })
}

fn check(id: &'static str, name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let (passed, detail) = f().unwrap_or_else(|e| (false, format!("error: {e}")));
    CheckResult { id, name, passed, detail, elapsed: start.elapsed().as_secs_f64() }
}

fn case_check(
    id: &'static str,
    name: &'static str,
    run: &Result<CaseRun>,
    f: impl FnOnce(&CaseRun) -> (bool, String),
) -> CheckResult {
    check(id, name, || run.as_ref().map(f).map_err(Clone::clone))
}

fn omega(rpm: f64) -> f64 {
    rpm_to_electrical(rpm, MachineParams::bmw_i3().poles).1
}

fn static_point(p_e: f64, rpm: f64, expected: (f64, f64)) -> Result<(bool, String)> {
    let prob = StaticProblem { p_e, omega_r: omega(rpm), v_dc: 540.0, mp: MachineParams::bmw_i3() };
    let start = Instant::now();
    let s = solve_static(&prob)?;
    let ms = start.elapsed().as_secs_f64() * 1e3;
    let ok = s.feasible && (s.i_d - expected.0).abs() <= 1.0 && (s.i_q - expected.1).abs() <= 1.0 && ms < 10.0;
    Ok((ok, format!("(i_d, i_q) = ({:.2}, {:.2}) A, expected ({}, {}) ± 1 A, {ms:.3} ms", s.i_d, s.i_q, expected.0, expected.1)))
}

/// Small deterministic generator for the randomized checks.
struct Lcg(u64);

impl Lcg {
    fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        self.0 = self.0.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        lo + (hi - lo) * ((self.0 >> 11) as f64 / (1u64 << 53) as f64)
    }
}

/// Solver versus 0.25 A grid oracle on 100 random generating points.
pub fn oracle_equivalence() -> Result<(bool, String)> {
    let mp = MachineParams::bmw_i3();
    let mut rng = Lcg(0x5eed);
    let (mut worst, mut feasible, mut mismatched) = (0.0f64, 0, 0);
    let start = Instant::now();
    for _ in 0..100 {
        let p_e = rng.uniform(-mp.p_max, 0.0);
        let rpm = rng.uniform(1000.0, mp.n_max);
        let v_dc = rng.uniform(420.0, 670.0);
        let prob = StaticProblem { p_e, omega_r: omega(rpm), v_dc, mp };
        let s = solve_static(&prob)?;
        let o = brute_force_oracle(&prob, 0.25)?;
        if s.feasible != o.feasible {
            mismatched += 1;
        } else if s.feasible {
            feasible += 1;
            worst = worst.max((s.i_d - o.i_d).abs()).max((s.i_q - o.i_q).abs());
        }
    }
    let secs = start.elapsed().as_secs_f64();
    Ok((
        mismatched == 0 && worst <= 1.0 && secs < 60.0,
        format!("{feasible}/100 feasible, max deviation {worst:.3} A, {mismatched} feasibility mismatches, {secs:.2} s"),
    ))
}

fn steady_optimality(run: &CaseRun) -> (bool, String) {
    let mut ok = true;
    let mut parts = Vec::new();
    for s in &run.metrics.segments {
        let (dd, dq) = (s.i_d - s.optimum.0, s.i_q - s.optimum.1);
        ok &= dd.abs() <= 2.0 && dq.abs() <= 2.0;
        parts.push(format!(
            "{:.2} kW: ({:.2}, {:.2}) vs ({:.2}, {:.2}) A",
            s.p_load / 1e3,
            s.i_d,
            s.i_q,
            s.optimum.0,
            s.optimum.1
        ));
    }
    (ok, parts.join("; "))
}

fn case1_settling(run: &CaseRun) -> (bool, String) {
    let Some(seg) = run.metrics.segments.get(1) else { return (false, "no segment after the step".into()) };
    match seg.settling_time {
        Some(t) => (t <= 15e-3, format!("settled in {:.2} ms after the step (limit 15 ms)", t * 1e3)),
        None => (false, "never settled in the ±1 % band".into()),
    }
}

fn case2_bounds(run: &CaseRun) -> (bool, String) {
    let m = &run.metrics;
    let v_ref = run.scenario.dc_link.v_dc_ref;
    let in_bounds = m.v_dc_min >= 420.0 && m.v_dc_max <= 670.0;
    // worst steady-window excursion per segment
    let mut worst = 0.0f64;
    for s in &m.segments {
        let from = s.t_end - crate::sim::metrics::STEADY_FRACTION * (s.t_end - s.t_start);
        for r in run.trace.rows.iter().filter(|r| r.t >= from - 1e-9 && r.t < s.t_end - 1e-9) {
            worst = worst.max((r.v_dc - v_ref).abs());
        }
    }
    (
        in_bounds && worst <= 1.0,
        format!(
            "v_dc in [{:.2}, {:.2}] V (limits [420, 670]); worst steady deviation {worst:.3} V (limit 1 V)",
            m.v_dc_min, m.v_dc_max
        ),
    )
}

fn heavy_segment(run: &CaseRun) -> Option<&crate::sim::SegmentMetrics> {
    run.metrics.segments.iter().max_by(|a, b| a.p_load.total_cmp(&b.p_load))
}

fn case2_ellipse(run: &CaseRun) -> (bool, String) {
    let Some(s) = heavy_segment(run) else { return (false, "no segments".into()) };
    let ok = s.ellipse_residual.abs() < 0.01 && (s.d_abc_peak - 1.0).abs() <= 0.01;
    (ok, format!("ellipse residual {:+.3} %, |d_abc| peak {:.4}", s.ellipse_residual * 100.0, s.d_abc_peak))
}

fn case2_flux_weakening(run: &CaseRun) -> Result<(bool, String)> {
    let Some(s) = heavy_segment(run) else { return Ok((false, "no segments".into())) };
    let sc = &run.scenario;
    let v = sc.dc_link.v_dc_ref;
    let p_e = -(v * v / sc.dc_link.r + s.p_load);
    let w = rpm_to_electrical(s.speed_rpm, sc.machine.poles).1;
    // unconstrained by the voltage ellipse: same power at an unlimited bus
    let mtpa = solve_static(&StaticProblem { p_e, omega_r: w, v_dc: 1e5, mp: sc.machine })?;
    Ok((s.i_d < mtpa.i_d, format!("steady i_d {:.2} A vs unconstrained optimum i_d {:.2} A", s.i_d, mtpa.i_d)))
}

/// Step responses of both current loops at a fixed bus.
pub fn inner_loop_regulation() -> Result<(bool, String)> {
    let mp = MachineParams::bmw_i3();
    let cfg = InnerLoopConfig::default();
    let w = omega(7000.0);
    let tau = -1.0 / cfg.pole_d.max(cfg.pole_q);
    let step = 10.0;
    let (mut worst_err, mut worst_cross, mut saturated) = (0.0f64, 0.0f64, false);
    for start in [(0.0, 0.0), (-62.0, -135.3), (-93.5, -174.9)] {
        for (axis, sign) in [(0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0)] {
            let target = if axis == 0 { (start.0 + sign * step, start.1) } else { (start.0, start.1 + sign * step) };
            let resp = run_current_loop(&mp, cfg, w, 540.0, start, target, 10.0 * tau, 5e-6)?;
            saturated |= resp.saturated;
            for &(t, i_d, i_q) in &resp.samples {
                let (own, own_ref, cross, cross_ref) =
                    if axis == 0 { (i_d, target.0, i_q, start.1) } else { (i_q, target.1, i_d, start.0) };
                worst_cross = worst_cross.max((cross - cross_ref).abs() / step);
                if t >= 5.0 * tau - 1e-12 {
                    worst_err = worst_err.max((own - own_ref).abs() / step);
                }
            }
        }
    }
    Ok((
        !saturated && worst_err < 1e-3 && worst_cross < 1e-2,
        format!(
            "error after 5τ = {:.1} µs: {:.4} % of step; cross-axis peak {:.4} % of step",
            5.0 * tau * 1e6,
            worst_err * 100.0,
            worst_cross * 100.0
        ),
    ))
}

/// Park round trip, regulator equations, energy bookkeeping, FE order and PWM averaging.
pub fn numerical_invariants() -> Result<(bool, String)> {
    let mp = MachineParams::bmw_i3();
    let dp = DcLinkParams::default();
    let mut rng = Lcg(42);

    let mut park = 0.0f64;
    for _ in 0..1000 {
        let abc = [rng.uniform(-400.0, 400.0), rng.uniform(-400.0, 400.0), rng.uniform(-400.0, 400.0)];
        let theta = rng.uniform(-10.0, 10.0);
        let back = inverse_park(park_transform(abc, theta), theta);
        for k in 0..3 {
            park = park.max((back[k] - abc[k]).abs() / abc[k].abs().max(1.0));
        }
    }

    let ctrl = CurrentController::new(InnerLoopConfig::default(), &mp, dp.v_floor)?;
    let reg = [ctrl.d.regulator_residuals(), ctrl.q.regulator_residuals()]
        .iter()
        .fold(0.0f64, |m, r| m.max(r.0.abs()).max(r.1.abs()));

    // bus: C v v̇ = −v²/R − (3/2) v·i − v i_L
    // machine: v·i = r_s|i|² + L_d i_d i̇_d + L_q i_q i̇_q + (2/3) P_e
    let mut energy = 0.0f64;
    for _ in 0..1000 {
        let st = PlantState {
            v_dc: rng.uniform(300.0, 700.0),
            i_d: rng.uniform(-400.0, 100.0),
            i_q: rng.uniform(-400.0, 400.0),
            theta_r: 0.0,
        };
        let (v_d, v_q) = (rng.uniform(-300.0, 300.0), rng.uniform(-300.0, 300.0));
        let op = OperatingPoint::from_rpm(rng.uniform(0.0, mp.n_max), mp.poles, rng.uniform(-100.0, 300.0));
        let f = plant_derivatives_with_voltages(&st, v_d, v_q, &op, &mp, &dp);
        let vi = v_d * st.i_d + v_q * st.i_q;
        let bus_lhs = dp.c * st.v_dc * f[0];
        let bus_rhs = -st.v_dc * st.v_dc / dp.r - 1.5 * vi - st.v_dc * op.i_load;
        let scale = (st.v_dc * st.v_dc / dp.r).abs() + (1.5 * vi).abs() + (st.v_dc * op.i_load).abs();
        energy = energy.max((bus_lhs - bus_rhs).abs() / scale);
        let machine_rhs = mp.r_s * (st.i_d * st.i_d + st.i_q * st.i_q)
            + mp.l_d * st.i_d * f[1]
            + mp.l_q * st.i_q * f[2]
            + electrical_power(st.i_d, st.i_q, op.omega_r, &mp) / 1.5;
        let scale = vi.abs() + (electrical_power(st.i_d, st.i_q, op.omega_r, &mp) / 1.5).abs() + 1.0;
        energy = energy.max((vi - machine_rhs).abs() / scale);
    }

    // Forward Euler: halving the step halves the global error
    let w = omega(7000.0);
    let x0 = ReducedState { v_dc: 520.0, e_int: 0.0 };
    let u = (-90.0, -175.0);
    let horizon = 2e-3;
    let reference = {
        let n = 4000;
        let h = horizon / n as f64;
        let mut x = x0;
        let f = |x: ReducedState| reduced_dynamics(x, u, 60.0, w, &mp, &dp);
        for _ in 0..n {
            let k1 = f(x)?;
            let k2 = f(ReducedState { v_dc: x.v_dc + 0.5 * h * k1.v_dc, e_int: 0.0 })?;
            let k3 = f(ReducedState { v_dc: x.v_dc + 0.5 * h * k2.v_dc, e_int: 0.0 })?;
            let k4 = f(ReducedState { v_dc: x.v_dc + h * k3.v_dc, e_int: 0.0 })?;
            x.v_dc += h / 6.0 * (k1.v_dc + 2.0 * k2.v_dc + 2.0 * k3.v_dc + k4.v_dc);
        }
        x.v_dc
    };
    let fe_error = |n: usize| -> Result<f64> {
        let mut x = x0;
        for _ in 0..n {
            x = discretize_fe(x, u, 60.0, w, horizon / n as f64, &mp, &dp)?;
        }
        Ok((x.v_dc - reference).abs())
    };
    let (e1, e2, e3) = (fe_error(10)?, fe_error(20)?, fe_error(40)?);
    let order = ((e1 / e2).log2() + (e2 / e3).log2()) / 2.0;

    // PWM: the sampled leg average over one carrier period equals the duty
    let mut pwm = 0.0f64;
    for k in 0..=40 {
        let d = -1.0 + k as f64 * 0.05;
        let p = switching_phases([d, 0.0, 0.0]);
        let exact = 2.0 * (p[1] - p[0]) - 1.0;
        let samples = 2000;
        let sampled =
            (0..samples).map(|j| sine_pwm([d, 0.0, 0.0], (j as f64 + 0.5) / samples as f64)[0]).sum::<f64>() / samples as f64;
        pwm = pwm.max((exact - d).abs()).max((sampled - d).abs());
    }

    let ok = park < 1e-12 && reg < 1e-10 && energy < 1e-9 && (order - 1.0).abs() < 0.1 && pwm < 0.01;
    Ok((
        ok,
        format!(
            "park {park:.1e}, regulator {reg:.1e}, energy {energy:.1e}, FE order {order:.3}, PWM average error {:.3} %",
            pwm * 100.0
        ),
    ))
}

/// Inner-loop settling versus the outer-loop voltage transient of Case 1.
fn time_scale_separation(run: &CaseRun) -> Result<(bool, String)> {
    let mp = MachineParams::bmw_i3();
    let cfg = InnerLoopConfig::default();
    let resp = run_current_loop(&mp, cfg, omega(7000.0), 540.0, (-62.0, -135.3), (-93.5, -174.9), 2e-3, 5e-6)?;
    let err = |s: &(f64, f64, f64)| ((s.1 + 93.5).abs() / 31.5).max((s.2 + 174.9).abs() / 39.6);
    let inner = match resp.samples.iter().rposition(|s| err(s) > 0.01) {
        Some(i) => resp.samples.get(i + 1).map_or(f64::INFINITY, |s| s.0),
        None => 0.0,
    };
    let outer = run.metrics.segments.get(1).and_then(|s| s.settling_time).unwrap_or(f64::NAN);
    Ok((
        outer >= 10.0 * inner,
        format!("current loop settles (1 %) in {:.0} µs, voltage in {:.2} ms, ratio {:.0}", inner * 1e6, outer * 1e3, outer / inner),
    ))
}

/// Runs every acceptance check.
pub fn run_all() -> Report {
    let start = Instant::now();
    let (case1, case2, oracle) = std::thread::scope(|s| {
        let c1 = s.spawn(|| run_case("case1"));
        let c2 = s.spawn(|| run_case("case2"));
        let o = s.spawn(|| check("3", "oracle equivalence", oracle_equivalence));
        (c1.join().expect("case1 thread"), c2.join().expect("case2 thread"), o.join().expect("oracle thread"))
    });
    let checks = vec![
        check("1", "static optimum, 43.5 kW @ 7000 rpm", || static_point(-43.5e3, 7000.0, (-62.0, -135.3))),
        check("2", "static optimum, 62.25 kW @ 7000 rpm", || static_point(-62.25e3, 7000.0, (-93.5, -174.9))),
        oracle,
        case_check("4", "NMPC steady-state optimality (case 1)", &case1, steady_optimality),
        case_check("5", "voltage settling after the step (case 1)", &case1, case1_settling),
        case_check("6", "voltage bounds and recovery (case 2)", &case2, case2_bounds),
        case_check("7", "voltage ellipse binding (case 2)", &case2, case2_ellipse),
        check("8", "flux-weakening direction (case 2)", || {
            case2.as_ref().map_err(Clone::clone).and_then(case2_flux_weakening)
        }),
        check("9", "inner-loop output regulation", inner_loop_regulation),
        check("10", "numerical invariants", numerical_invariants),
        check("T", "time-scale separation", || case1.as_ref().map_err(Clone::clone).and_then(time_scale_separation)),
    ];
    Report { checks, elapsed: start.elapsed().as_secs_f64() }
}
