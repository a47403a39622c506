//! Machine and dc-link parameters, reference-frame transforms and the
//! averaged plant model of the generator + active rectifier.
//!
//! Stator currents follow the motor convention (positive current flows into
//! the machine), so generation shows up as negative `i_q` and negative
//! electrical power. The rectifier delivers `-(3/2)(v_d i_d + v_q i_q)` to the
//! dc bus.

use std::f64::consts::{PI, TAU};

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};

/// Electrical constants and ratings of an interior permanent magnet machine.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MachineParams {
    /// d-axis inductance (H)
    pub l_d: f64,
    /// q-axis inductance (H)
    pub l_q: f64,
    /// stator resistance (Ω)
    pub r_s: f64,
    /// permanent magnet flux linkage (V·s)
    pub lambda_m: f64,
    pub poles: u32,
    /// peak phase current (A)
    pub i_peak: f64,
    /// torque rating (N·m)
    pub t_max: f64,
    /// power rating (W)
    pub p_max: f64,
    /// speed rating (rpm)
    pub n_max: f64,
}

impl MachineParams {
    /// BMW i3 traction machine.
    pub const fn bmw_i3() -> Self {
        Self {
            l_d: 0.090e-3,
            l_q: 0.255e-3,
            r_s: 5.3e-3,
            lambda_m: 0.0385,
            poles: 12,
            i_peak: 400.0,
            t_max: 250.0,
            p_max: 125e3,
            n_max: 11400.0,
        }
    }

    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "bmw-i3" => Some(Self::bmw_i3()),
            _ => None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("l_d", self.l_d),
            ("l_q", self.l_q),
            ("r_s", self.r_s),
            ("lambda_m", self.lambda_m),
            ("i_peak", self.i_peak),
            ("t_max", self.t_max),
            ("p_max", self.p_max),
            ("n_max", self.n_max),
        ] {
            ensure(v.is_finite() && v > 0.0, || {
                format!("machine constant {name} must be positive, got {v}")
            })?;
        }
        ensure(self.poles >= 2 && self.poles.is_multiple_of(2), || {
            format!("pole count must be even and >= 2, got {}", self.poles)
        })
    }

    /// Pole pairs as a float.
    pub fn pole_pairs(&self) -> f64 {
        f64::from(self.poles) / 2.0
    }

    /// `L_d - L_q`, negative for a salient interior magnet rotor.
    pub fn saliency(&self) -> f64 {
        self.l_d - self.l_q
    }
}

/// Dc-side capacitor, bleed resistor and voltage limits.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DcLinkParams {
    /// bus capacitance (F)
    pub c: f64,
    /// parallel resistance (Ω)
    pub r: f64,
    pub v_dc_ref: f64,
    pub v_dc_min: f64,
    pub v_dc_max: f64,
    /// Lowest bus voltage the model accepts before reporting a singularity.
    pub v_floor: f64,
}

impl Default for DcLinkParams {
    fn default() -> Self {
        Self {
            c: 1e-3,
            r: 10e3,
            v_dc_ref: 540.0,
            v_dc_min: 420.0,
            v_dc_max: 670.0,
            v_floor: 1.0,
        }
    }
}

impl DcLinkParams {
    pub fn validate(&self) -> Result<()> {
        ensure(self.c > 0.0 && self.r > 0.0, || {
            format!("dc link needs c > 0 and r > 0 (c = {}, r = {})", self.c, self.r)
        })?;
        ensure(
            0.0 < self.v_dc_min && self.v_dc_min < self.v_dc_ref && self.v_dc_ref < self.v_dc_max,
            || {
                format!(
                    "dc voltages must satisfy 0 < min < ref < max (got {}, {}, {})",
                    self.v_dc_min, self.v_dc_ref, self.v_dc_max
                )
            },
        )?;
        ensure(self.v_floor > 0.0 && self.v_floor < self.v_dc_min, || {
            format!("v_floor {} must lie in (0, v_dc_min)", self.v_floor)
        })
    }
}

/// Continuous plant state.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct PlantState {
    pub v_dc: f64,
    pub i_d: f64,
    pub i_q: f64,
    /// Electrical rotor angle, kept in `[0, 2π)`.
    pub theta_r: f64,
}

impl PlantState {
    pub fn to_array(self) -> [f64; 4] {
        [self.v_dc, self.i_d, self.i_q, self.theta_r]
    }

    /// Builds a state from an array, wrapping the angle.
    pub fn from_array(x: [f64; 4]) -> Self {
        Self { v_dc: x[0], i_d: x[1], i_q: x[2], theta_r: wrap_angle(x[3]) }
    }
}

/// Sine-PWM modulation indices in the rotor frame.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct DutyCycles {
    pub d_d: f64,
    pub d_q: f64,
}

impl DutyCycles {
    /// Clamps both indices to `[-1, 1]`; the flag reports whether anything moved.
    pub fn saturate(self) -> (Self, bool) {
        let d_d = self.d_d.clamp(-1.0, 1.0);
        let d_q = self.d_q.clamp(-1.0, 1.0);
        (Self { d_d, d_q }, d_d != self.d_d || d_q != self.d_q)
    }

    /// Terminal voltages `(v_d, v_q)` produced on a bus at `v_dc`.
    pub fn voltages(self, v_dc: f64) -> (f64, f64) {
        (self.d_d * v_dc / 2.0, self.d_q * v_dc / 2.0)
    }

    pub fn from_voltages(v_d: f64, v_q: f64, v_dc: f64) -> Self {
        Self { d_d: 2.0 * v_d / v_dc, d_q: 2.0 * v_q / v_dc }
    }
}

/// Exogenous inputs: shaft speed and dc load current.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OperatingPoint {
    pub omega_r: f64,
    pub omega_m: f64,
    pub i_load: f64,
}

impl OperatingPoint {
    pub fn from_rpm(n: f64, poles: u32, i_load: f64) -> Self {
        let (omega_m, omega_r) = rpm_to_electrical(n, poles);
        Self { omega_r, omega_m, i_load }
    }
}

/// Mechanical and electrical angular speed `(ω_m, ω_r)` in rad/s for a shaft speed in rpm.
pub fn rpm_to_electrical(n: f64, poles: u32) -> (f64, f64) {
    let omega_m = n * TAU / 60.0;
    (omega_m, f64::from(poles) / 2.0 * omega_m)
}

pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(TAU);
    // rem_euclid can round up to exactly TAU for tiny negative inputs
    if w >= TAU {
        0.0
    } else {
        w
    }
}

const TWO_THIRDS_PI: f64 = 2.0 * PI / 3.0;

/// Amplitude-invariant abc → dq0 transform (2/3 scaling, zero-sequence row included).
pub fn park_transform(abc: [f64; 3], theta_r: f64) -> [f64; 3] {
    let [a, b, c] = abc;
    let (s0, c0) = theta_r.sin_cos();
    let (s1, c1) = (theta_r - TWO_THIRDS_PI).sin_cos();
    let (s2, c2) = (theta_r + TWO_THIRDS_PI).sin_cos();
    [
        2.0 / 3.0 * (c0 * a + c1 * b + c2 * c),
        -2.0 / 3.0 * (s0 * a + s1 * b + s2 * c),
        (a + b + c) / 3.0,
    ]
}

/// dq0 → abc, the exact inverse of [`park_transform`].
pub fn inverse_park(dq0: [f64; 3], theta_r: f64) -> [f64; 3] {
    let [d, q, z] = dq0;
    let phase = |shift: f64| {
        let (s, c) = (theta_r + shift).sin_cos();
        c * d - s * q + z
    };
    [phase(0.0), phase(-TWO_THIRDS_PI), phase(TWO_THIRDS_PI)]
}

/// Time derivative `(v̇_dc, i̇_d, i̇_q, θ̇_r)` of the averaged plant.
pub fn plant_derivatives(
    state: &PlantState,
    duty: DutyCycles,
    op: &OperatingPoint,
    mp: &MachineParams,
    dp: &DcLinkParams,
) -> Result<[f64; 4]> {
    if !(state.v_dc > dp.v_floor) {
        return Err(Error::NonPositiveVoltage { v_dc: state.v_dc, floor: dp.v_floor });
    }
    let (v_d, v_q) = duty.voltages(state.v_dc);
    Ok(plant_derivatives_with_voltages(state, v_d, v_q, op, mp, dp))
}

/// Same as [`plant_derivatives`] but driven by terminal voltages directly.
/// Used by the switched simulation where the bridge voltage is not `d·v_dc/2`
/// at every instant. No floor check.
pub fn plant_derivatives_with_voltages(
    state: &PlantState,
    v_d: f64,
    v_q: f64,
    op: &OperatingPoint,
    mp: &MachineParams,
    dp: &DcLinkParams,
) -> [f64; 4] {
    let PlantState { v_dc, i_d, i_q, .. } = *state;
    let w = op.omega_r;
    let p_stator = 1.5 * (v_d * i_d + v_q * i_q);
    let dv = -v_dc / (dp.r * dp.c) - p_stator / (dp.c * v_dc) - op.i_load / dp.c;
    let did = (-mp.r_s * i_d + w * mp.l_q * i_q + v_d) / mp.l_d;
    let diq = (-mp.r_s * i_q - w * mp.l_d * i_d - w * mp.lambda_m + v_q) / mp.l_q;
    [dv, did, diq, w]
}

/// Electromagnetic torque in N·m.
pub fn electrical_torque(i_d: f64, i_q: f64, mp: &MachineParams) -> f64 {
    1.5 * mp.pole_pairs() * (mp.lambda_m * i_q + mp.saliency() * i_q * i_d)
}

/// Air-gap electrical power in W; negative while generating.
pub fn electrical_power(i_d: f64, i_q: f64, omega_r: f64, mp: &MachineParams) -> f64 {
    1.5 * omega_r * i_q * (mp.lambda_m + mp.saliency() * i_d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn op(n: f64, i_load: f64) -> OperatingPoint {
        OperatingPoint::from_rpm(n, 12, i_load)
    }

    #[test]
    fn aligned_cosines_map_to_unit_d() {
        for th in [0.0f64, 0.3, 1.7, 4.0, 6.1] {
            let abc = [th.cos(), (th - TWO_THIRDS_PI).cos(), (th + TWO_THIRDS_PI).cos()];
            let dq0 = park_transform(abc, th);
            assert_relative_eq!(dq0[0], 1.0, epsilon = 1e-14);
            assert!(dq0[1].abs() < 1e-14 && dq0[2].abs() < 1e-14);
        }
    }

    #[test]
    fn common_mode_lands_in_zero_sequence() {
        assert_eq!(park_transform([0.0; 3], 1.2), [0.0; 3]);
        let dq0 = park_transform([1.0, 1.0, 1.0], 0.77);
        assert!(dq0[0].abs() < 1e-15 && dq0[1].abs() < 1e-15);
        assert_relative_eq!(dq0[2], 1.0, epsilon = 1e-15);
    }

    #[test]
    fn inverse_park_columns() {
        let abc = inverse_park([1.0, 0.0, 0.0], 0.0);
        assert_relative_eq!(abc[0], 1.0, epsilon = 1e-15);
        assert_relative_eq!(abc[1], -0.5, epsilon = 1e-15);
        assert_relative_eq!(abc[2], -0.5, epsilon = 1e-15);
        let abc = inverse_park([0.0, 0.0, 1.0], 2.2);
        for x in abc {
            assert_relative_eq!(x, 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn rpm_conversion() {
        let (wm, wr) = rpm_to_electrical(7000.0, 12);
        assert_relative_eq!(wm, 733.038, epsilon = 1e-3);
        assert_relative_eq!(wr, 4398.23, epsilon = 1e-2);
        assert_eq!(rpm_to_electrical(0.0, 12), (0.0, 0.0));
        assert_relative_eq!(rpm_to_electrical(8000.0, 12).1, 5026.55, epsilon = 1e-2);
    }

    #[test]
    fn open_circuit_derivatives() {
        let mp = MachineParams::bmw_i3();
        let dp = DcLinkParams::default();
        let s = PlantState { v_dc: 540.0, ..Default::default() };
        let o = op(7000.0, 0.0);
        let d = plant_derivatives(&s, DutyCycles::default(), &o, &mp, &dp).unwrap();
        assert_relative_eq!(d[0], -540.0 / (dp.r * dp.c), epsilon = 1e-12);
        assert_eq!(d[1], 0.0);
        assert_relative_eq!(d[2], -o.omega_r * mp.lambda_m / mp.l_q, epsilon = 1e-9);
        assert_eq!(d[3], o.omega_r);
    }

    #[test]
    fn resistive_decay_at_standstill() {
        let mp = MachineParams::bmw_i3();
        let dp = DcLinkParams::default();
        let s = PlantState { v_dc: 540.0, i_d: 1.0, ..Default::default() };
        let d = plant_derivatives(&s, DutyCycles::default(), &op(0.0, 0.0), &mp, &dp).unwrap();
        assert_relative_eq!(d[1], -mp.r_s / mp.l_d, epsilon = 1e-12);
    }

    #[test]
    fn voltage_floor_is_rejected() {
        let mp = MachineParams::bmw_i3();
        let dp = DcLinkParams::default();
        for v in [1.0, 0.0, -3.0, f64::NAN] {
            let s = PlantState { v_dc: v, ..Default::default() };
            let r = plant_derivatives(&s, DutyCycles::default(), &op(1000.0, 0.0), &mp, &dp);
            assert!(matches!(r, Err(Error::NonPositiveVoltage { .. })), "{v}");
        }
    }

    #[test]
    fn torque_and_power_at_light_load_point() {
        let mp = MachineParams::bmw_i3();
        assert_eq!(electrical_torque(-80.0, 0.0, &mp), 0.0);
        let te = electrical_torque(-62.0, -135.3, &mp);
        assert_relative_eq!(te, -59.34, epsilon = 0.01);
        let (wm, wr) = rpm_to_electrical(7000.0, 12);
        let pe = electrical_power(-62.0, -135.3, wr, &mp);
        assert_relative_eq!(pe, te * wm, max_relative = 1e-12);
        assert!((pe + 43.5e3).abs() < 0.005 * 43.5e3);
        let pe = electrical_power(-93.5, -174.9, wr, &mp);
        assert!((pe + 62.25e3).abs() < 0.005 * 62.25e3);
        assert_eq!(electrical_power(-50.0, 0.0, wr, &mp), 0.0);
    }

    #[test]
    fn preset_and_validation() {
        let mp = MachineParams::preset("bmw-i3").unwrap();
        mp.validate().unwrap();
        assert!(MachineParams::preset("nope").is_none());
        assert!(MachineParams { poles: 7, ..mp }.validate().is_err());
        assert!(MachineParams { l_d: 0.0, ..mp }.validate().is_err());
        DcLinkParams::default().validate().unwrap();
        assert!(DcLinkParams { v_dc_min: 600.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn wrap_angle_stays_in_range() {
        for th in [-1e-18, -0.1, 0.0, TAU, 7.0, -100.0] {
            let w = wrap_angle(th);
            assert!((0.0..TAU).contains(&w), "{th} -> {w}");
        }
    }

    proptest! {
        #[test]
        fn park_round_trip(a in -500.0..500.0f64, b in -500.0..500.0f64, c in -500.0..500.0f64,
                           th in -20.0..20.0f64) {
            let back = inverse_park(park_transform([a, b, c], th), th);
            let scale = a.abs().max(b.abs()).max(c.abs()).max(1.0);
            for (x, y) in back.iter().zip([a, b, c]) {
                prop_assert!((x - y).abs() <= 1e-12 * scale);
            }
        }

        #[test]
        fn transform_power_invariance(v in prop::array::uniform3(-300.0..300.0f64),
                                      i in prop::array::uniform3(-300.0..300.0f64),
                                      th in 0.0..TAU) {
            let vd = park_transform(v, th);
            let id = park_transform(i, th);
            let p_abc: f64 = v.iter().zip(i).map(|(a, b)| a * b).sum();
            let p_dq = 1.5 * (vd[0] * id[0] + vd[1] * id[1]) + 3.0 * vd[2] * id[2];
            prop_assert!((p_abc - p_dq).abs() <= 1e-9 * (1.0 + p_abc.abs()));
        }

        #[test]
        fn dc_energy_balance(v_dc in 50.0..800.0f64, i_d in -400.0..400.0f64, i_q in -400.0..400.0f64,
                             d_d in -1.0..1.0f64, d_q in -1.0..1.0f64, n in 0.0..11400.0f64,
                             i_load in -200.0..200.0f64) {
            let mp = MachineParams::bmw_i3();
            let dp = DcLinkParams::default();
            let s = PlantState { v_dc, i_d, i_q, theta_r: 0.0 };
            let duty = DutyCycles { d_d, d_q };
            let der = plant_derivatives(&s, duty, &op(n, i_load), &mp, &dp).unwrap();
            let (v_d, v_q) = duty.voltages(v_dc);
            let lhs = dp.c * v_dc * der[0];
            let rhs = -v_dc * v_dc / dp.r - 1.5 * (v_d * i_d + v_q * i_q) - v_dc * i_load;
            let scale = (v_dc * v_dc / dp.r).abs() + (1.5 * (v_d * i_d + v_q * i_q)).abs() + (v_dc * i_load).abs();
            prop_assert!((lhs - rhs).abs() <= 1e-9 * scale.max(1.0));
        }

        #[test]
        fn power_equals_torque_times_speed(i_d in -400.0..400.0f64, i_q in -400.0..400.0f64,
                                           n in 0.0..11400.0f64) {
            let mp = MachineParams::bmw_i3();
            let (wm, wr) = rpm_to_electrical(n, mp.poles);
            let pe = electrical_power(i_d, i_q, wr, &mp);
            let te = electrical_torque(i_d, i_q, &mp);
            prop_assert!((pe - te * wm).abs() <= 1e-12 * (1.0 + pe.abs()));
        }
    }
}
