use approx::assert_relative_eq;
use proptest::prelude::*;

use super::*;
use crate::machine::{plant_derivatives_with_voltages, rpm_to_electrical, OperatingPoint, PlantState};
use crate::steady_state::{solve_static, steady_stator_voltage, StaticProblem};

fn mp() -> MachineParams {
    MachineParams::bmw_i3()
}

fn omega(rpm: f64) -> f64 {
    rpm_to_electrical(rpm, mp().poles).1
}

#[test]
fn zero_input_decays_through_resistor() {
    let dp = DcLinkParams::default();
    let x = ReducedState { v_dc: 500.0, e_int: 0.3 };
    let f = reduced_dynamics(x, (0.0, 0.0), 0.0, omega(7000.0), &mp(), &dp).unwrap();
    assert_relative_eq!(f.v_dc, -500.0 / (dp.r * dp.c), epsilon = 1e-12);
    assert_relative_eq!(f.e_int, 40.0, epsilon = 1e-12);
}

#[test]
fn rejects_voltage_below_floor() {
    let dp = DcLinkParams::default();
    let x = ReducedState { v_dc: 0.5, e_int: 0.0 };
    assert!(matches!(
        reduced_dynamics(x, (0.0, 0.0), 0.0, 0.0, &mp(), &dp),
        Err(Error::NonPositiveVoltage { .. })
    ));
    assert!(discretize_fe(x, (0.0, 0.0), 0.0, 0.0, 1e-4, &mp(), &dp).is_err());
}

proptest! {
    #[test]
    fn reduced_model_matches_full_model_at_current_equilibrium(
        v in 300.0f64..700.0, i_d in -300.0f64..50.0, i_q in -300.0f64..300.0,
        rpm in 500.0f64..11000.0, i_load in -50.0f64..200.0,
    ) {
        let m = mp();
        let dp = DcLinkParams::default();
        let w = omega(rpm);
        let (v_d, v_q) = steady_stator_voltage(i_d, i_q, w, &m);
        let state = PlantState { v_dc: v, i_d, i_q, theta_r: 0.0 };
        let op = OperatingPoint { omega_r: w, omega_m: w / m.pole_pairs(), i_load };
        let full = plant_derivatives_with_voltages(&state, v_d, v_q, &op, &m, &dp);
        let reduced = reduced_dynamics(ReducedState { v_dc: v, e_int: 0.0 }, (i_d, i_q), i_load, w, &m, &dp).unwrap();
        prop_assert!(full[1].abs() < 1e-6 && full[2].abs() < 1e-6, "currents not at equilibrium: {:?}", full);
        prop_assert!((full[0] - reduced.v_dc).abs() <= 1e-9 * (1.0 + full[0].abs()), "{} vs {}", full[0], reduced.v_dc);
    }
}

#[test]
fn case1_operating_point_is_nearly_stationary() {
    let m = mp();
    let dp = DcLinkParams::default();
    let i_load = 43.5e3 / 540.0;
    let f = reduced_dynamics(ReducedState { v_dc: 540.0, e_int: 0.0 }, (-62.0, -135.3), i_load, omega(7000.0), &m, &dp)
        .unwrap();
    // residual comes from the stator copper loss, which the static optimum ignores
    // (≈ 1.5·r_s·|i|² ≈ 176 W) plus the bleed resistor (29 W): a few hundred V/s on 1 mF.
    assert!(f.v_dc.abs() < 500.0, "{}", f.v_dc);
    assert!(f.v_dc < 0.0);
}

#[test]
fn forward_euler_basics() {
    let m = mp();
    let dp = DcLinkParams::default();
    let x = ReducedState { v_dc: 530.0, e_int: 0.01 };
    let u = (-50.0, -120.0);
    assert_eq!(discretize_fe(x, u, 70.0, omega(7000.0), 0.0, &m, &dp).unwrap(), x);
    let f = reduced_dynamics(x, u, 70.0, omega(7000.0), &m, &dp).unwrap();
    let n = discretize_fe(x, u, 70.0, omega(7000.0), 1e-4, &m, &dp).unwrap();
    assert_relative_eq!(n.v_dc, x.v_dc + 1e-4 * f.v_dc, epsilon = 1e-12);
    assert_relative_eq!(n.e_int, x.e_int + 1e-4 * f.e_int, epsilon = 1e-15);
    assert!(discretize_fe(x, u, 70.0, 0.0, -1.0, &m, &dp).is_err());
}

fn rk4_reduced(x: ReducedState, u: (f64, f64), i_load: f64, w: f64, h: f64, steps: usize) -> ReducedState {
    let m = mp();
    let dp = DcLinkParams::default();
    let f = |x: ReducedState| reduced_dynamics(x, u, i_load, w, &m, &dp).unwrap();
    let add = |x: ReducedState, k: ReducedState, s: f64| ReducedState { v_dc: x.v_dc + s * k.v_dc, e_int: x.e_int + s * k.e_int };
    let mut x = x;
    for _ in 0..steps {
        let k1 = f(x);
        let k2 = f(add(x, k1, h / 2.0));
        let k3 = f(add(x, k2, h / 2.0));
        let k4 = f(add(x, k3, h));
        x = ReducedState {
            v_dc: x.v_dc + h / 6.0 * (k1.v_dc + 2.0 * k2.v_dc + 2.0 * k3.v_dc + k4.v_dc),
            e_int: x.e_int + h / 6.0 * (k1.e_int + 2.0 * k2.e_int + 2.0 * k3.e_int + k4.e_int),
        };
    }
    x
}

#[test]
fn forward_euler_is_first_order() {
    let m = mp();
    let dp = DcLinkParams::default();
    let w = omega(7000.0);
    let x = ReducedState { v_dc: 520.0, e_int: 0.0 };
    let u = (-90.0, -175.0);
    let t_final = 2e-3;
    let global_error = |steps: usize| {
        let h = t_final / steps as f64;
        let mut xf = x;
        for _ in 0..steps {
            xf = discretize_fe(xf, u, 60.0, w, h, &m, &dp).unwrap();
        }
        let reference = rk4_reduced(x, u, 60.0, w, t_final / 4000.0, 4000);
        (xf.v_dc - reference.v_dc).abs()
    };
    let e1 = global_error(10);
    let e2 = global_error(20);
    let e3 = global_error(40);
    assert!(e1 > 0.0);
    assert!((e1 / e2 - 2.0).abs() < 0.1, "ratio {}", e1 / e2);
    assert!((e2 / e3 - 2.0).abs() < 0.05, "ratio {}", e2 / e3);
}

#[test]
fn reference_equilibrium_needs_no_input() {
    let m = mp();
    let dp = DcLinkParams { r: 1e12, ..DcLinkParams::default() };
    let cfg = NmpcConfig::new(&m, &dp);
    let sol = build_and_solve_ocp(ReducedState { v_dc: 540.0, e_int: 0.0 }, 0.0, omega(7000.0), &cfg, &m, &dp, None)
        .unwrap();
    assert!(sol.converged);
    for u in &sol.u_sequence {
        assert!(u.0.abs() < 1e-3 && u.1.abs() < 1e-3, "{u:?}");
    }
    assert!(sol.cost.abs() < 1e-8);
    assert_eq!(sol.x_sequence.len(), cfg.horizon_n + 1);
}

/// Reduced plant in closed loop with the controller; constant power load.
fn closed_loop(ctrl: &mut NmpcController, p_load: f64, w: f64, v0: f64, periods: usize) -> (f64, (f64, f64)) {
    let mut x = ReducedState { v_dc: v0, e_int: 0.0 };
    let mut u = (0.0, 0.0);
    for _ in 0..periods {
        u = ctrl.step(x.v_dc, p_load / x.v_dc, w);
        for _ in 0..50 {
            x = rk4_reduced(x, u, p_load / x.v_dc, w, ctrl.cfg.t_s / 50.0, 1);
        }
    }
    (x.v_dc, u)
}

fn static_optimum(p_load: f64, w: f64, dp: &DcLinkParams) -> (f64, f64) {
    let v = dp.v_dc_ref;
    let prob = StaticProblem { p_e: -(v * v / dp.r + p_load), omega_r: w, v_dc: v, mp: mp() };
    let s = solve_static(&prob).unwrap();
    (s.i_d, s.i_q)
}

#[test]
fn steady_state_input_matches_static_optimum() {
    let m = mp();
    let dp = DcLinkParams::default();
    for (p, rpm) in [(43.5e3, 7000.0), (62.25e3, 7000.0), (34e3, 8000.0)] {
        let w = omega(rpm);
        let mut ctrl = NmpcController::new(NmpcConfig::new(&m, &dp), &m, &dp).unwrap();
        let (v, u) = closed_loop(&mut ctrl, p, w, 540.0, 160);
        let opt = static_optimum(p, w, &dp);
        assert!((v - 540.0).abs() < 0.5, "v = {v}");
        assert!((u.0 - opt.0).abs() < 2.0 && (u.1 - opt.1).abs() < 2.0, "{u:?} vs {opt:?} at {p} W");
        let d = ctrl.diagnostics().unwrap();
        assert!(d.converged && !d.fallback);
        assert!(!d.ellipse_active);
    }
}

#[test]
fn heavy_load_settles_on_voltage_ellipse() {
    let m = mp();
    let dp = DcLinkParams::default();
    let w = omega(8000.0);
    let mut ctrl = NmpcController::new(NmpcConfig::new(&m, &dp), &m, &dp).unwrap();
    let (v, u) = closed_loop(&mut ctrl, 81e3, w, 540.0, 200);
    assert!((v - 540.0).abs() < 0.5, "v = {v}");
    let d = ctrl.diagnostics().unwrap();
    assert!(d.ellipse_active, "{d:?}");
    let lhs = (w * m.l_q * u.1).powi(2) + (w * m.l_d * u.0 + w * m.lambda_m).powi(2);
    let rhs = (v / 2.0).powi(2);
    assert!((lhs / rhs - 1.0).abs() < 1e-3, "{lhs} vs {rhs}");
    // flux weakening moves i_d beyond the unconstrained minimum-current point
    let opt = static_optimum(81e3, w, &dp);
    assert!((u.0 - opt.0).abs() < 2.0 && (u.1 - opt.1).abs() < 2.0, "{u:?} vs {opt:?}");
}

#[test]
fn receding_horizon_is_a_fixed_point_at_steady_state() {
    let m = mp();
    let dp = DcLinkParams::default();
    let w = omega(7000.0);
    let mut ctrl = NmpcController::new(NmpcConfig::new(&m, &dp), &m, &dp).unwrap();
    let (v, u) = closed_loop(&mut ctrl, 43.5e3, w, 540.0, 160);
    let u2 = ctrl.step(v, 43.5e3 / v, w);
    assert!((u.0 - u2.0).abs() < 1e-3 && (u.1 - u2.1).abs() < 1e-3, "{u:?} vs {u2:?}");
}

#[test]
fn load_step_moves_references_toward_new_optimum() {
    let m = mp();
    let dp = DcLinkParams::default();
    let w = omega(7000.0);
    let mut ctrl = NmpcController::new(NmpcConfig::new(&m, &dp), &m, &dp).unwrap();
    let (v, _) = closed_loop(&mut ctrl, 43.5e3, w, 540.0, 80);
    let (_, u) = closed_loop(&mut ctrl, 62.25e3, w, v, 120);
    assert!((u.0 + 93.5).abs() < 2.0 && (u.1 + 174.9).abs() < 2.0, "{u:?}");
}

#[test]
fn warm_and_cold_starts_agree() {
    let m = mp();
    let dp = DcLinkParams::default();
    let w = omega(7000.0);
    let cfg = NmpcConfig::new(&m, &dp);
    let mut ctrl = NmpcController::new(cfg, &m, &dp).unwrap();
    let (v, _) = closed_loop(&mut ctrl, 43.5e3, w, 540.0, 40);
    // a disturbance so the warm start is not already optimal
    let v = v - 4.0;
    let x0 = ReducedState { v_dc: v, e_int: ctrl.integrator() };
    let i_l = 62.25e3 / v;
    let warm = build_and_solve_ocp(x0, i_l, w, &cfg, &m, &dp, ctrl.memory()).unwrap();
    let cold = build_and_solve_ocp(x0, i_l, w, &cfg, &m, &dp, None).unwrap();
    assert!(warm.converged && cold.converged);
    let (a, b) = (warm.u_sequence[0], cold.u_sequence[0]);
    assert!((a.0 - b.0).abs() < 0.05 && (a.1 - b.1).abs() < 0.05, "{a:?} vs {b:?}");
    assert!(warm.iterations <= cold.iterations, "warm {} cold {}", warm.iterations, cold.iterations);
}

#[test]
fn solution_respects_constraints() {
    let m = mp();
    let dp = DcLinkParams::default();
    let w = omega(8000.0);
    let cfg = NmpcConfig::new(&m, &dp);
    let x0 = ReducedState { v_dc: 500.0, e_int: 0.2 };
    let sol = build_and_solve_ocp(x0, 160.0, w, &cfg, &m, &dp, None).unwrap();
    for (k, u) in sol.u_sequence.iter().enumerate() {
        assert!(u.0 * u.0 + u.1 * u.1 <= m.i_peak * m.i_peak * (1.0 + 1e-6));
        let v = sol.x_sequence[k].v_dc;
        let lhs = (w * m.l_q * u.1).powi(2) + (w * m.l_d * u.0 + w * m.lambda_m).powi(2);
        assert!(lhs <= (v / 2.0).powi(2) * (1.0 + 1e-6));
    }
    for x in &sol.x_sequence[1..] {
        assert!(x.v_dc >= cfg.v_dc_min - 1e-3 && x.v_dc <= cfg.v_dc_max + 1e-3);
    }
}

#[test]
fn failed_solve_holds_previous_reference() {
    let m = mp();
    let dp = DcLinkParams::default();
    let mut ctrl = NmpcController::new(NmpcConfig::new(&m, &dp), &m, &dp).unwrap();
    ctrl.set_reference(-10.0, -20.0);
    let u = ctrl.step(0.5, 0.0, omega(7000.0));
    assert_eq!(u, (-10.0, -20.0));
    assert!(ctrl.diagnostics().unwrap().fallback);
}

#[test]
fn projection_enforces_circle_and_ellipse() {
    let m = mp();
    let dp = DcLinkParams::default();
    let ctrl = NmpcController::new(NmpcConfig::new(&m, &dp), &m, &dp).unwrap();
    let w = omega(8000.0);
    let (u, projected) = ctrl.project((-300.0, -300.0), 540.0, w);
    assert!(projected);
    assert!(u.0.hypot(u.1) <= m.i_peak + 1e-9);
    let lhs = (w * m.l_q * u.1).powi(2) + (w * m.l_d * u.0 + w * m.lambda_m).powi(2);
    assert!(lhs <= (540.0f64 / 2.0).powi(2) * (1.0 + 1e-4));
    let (u, projected) = ctrl.project((-50.0, -100.0), 540.0, w);
    assert!(!projected);
    assert_eq!(u, (-50.0, -100.0));
}

#[test]
fn config_validation() {
    let mut cfg = NmpcConfig::default();
    assert!(cfg.validate().is_ok());
    cfg.horizon_n = 0;
    assert!(cfg.validate().is_err());
    let cfg = NmpcConfig { r_weight: [0.0, 0.1], ..NmpcConfig::default() };
    assert!(cfg.validate().is_err());
}
