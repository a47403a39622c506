//! Triangle-carrier sine PWM.

/// Carrier value in `[-1, 1]` at phase `φ ∈ [0, 1)`: `+1` at the period
/// boundaries, `−1` at mid-period, so a leg is on for a window centred on the valley.
pub fn carrier(phase: f64) -> f64 {
    4.0 * (phase - 0.5).abs() - 1.0
}

/// Leg switch states for phase duties `duty_abc` at carrier phase `φ`: `+1`
/// connects the leg to the positive rail (`+v_dc/2`), `−1` to the negative one.
pub fn sine_pwm(duty_abc: [f64; 3], carrier_phase: f64) -> [f64; 3] {
    let c = carrier(carrier_phase.rem_euclid(1.0));
    duty_abc.map(|d| if d >= c { 1.0 } else { -1.0 })
}

/// Carrier phases in `(0, 1)` where a leg with duty `d` switches, plus the
/// carrier valley. Between consecutive breakpoints every switch state is constant.
pub fn switching_phases(duty_abc: [f64; 3]) -> [f64; 7] {
    let mut p = [0.5; 7];
    for (x, d) in duty_abc.iter().enumerate() {
        let d = d.clamp(-1.0, 1.0);
        p[2 * x] = (1.0 - d) / 4.0;
        p[2 * x + 1] = (3.0 + d) / 4.0;
    }
    p
}

/// Phase duties clipped to the linear modulation range; the flag reports clipping.
pub fn clip_duties(duty_abc: [f64; 3]) -> ([f64; 3], bool) {
    let clipped = duty_abc.map(|d| d.clamp(-1.0, 1.0));
    (clipped, clipped != duty_abc)
}
