//! Closed-loop simulation of the plant under the two-time-scale controller.
//!
//! The plant is integrated with classical RK4. The current controller runs
//! every `T_s-i`, the voltage controller every `T_s-o`, and the dc load is a
//! constant-power sink `i_L = P/v_dc` re-evaluated at every RK4 stage.

pub mod metrics;
pub mod pwm;

use std::io::{self, Write};

use serde::{Deserialize, Serialize};

use crate::current_loop::{ControlOutput, CurrentController, InnerLoopConfig};
use crate::error::{ensure, Error, Result};
use crate::machine::{
    electrical_power, inverse_park, park_transform, plant_derivatives_with_voltages, rpm_to_electrical,
    wrap_angle, DcLinkParams, DutyCycles, MachineParams, OperatingPoint, PlantState,
};
use crate::nmpc::{build_and_solve_ocp, reduced_dynamics, NmpcConfig, NmpcController, NmpcDiagnostics, ReducedState};
use crate::steady_state::{solve_static, StaticProblem};

pub use metrics::{compute_metrics, Metrics, SegmentMetrics};
pub use pwm::sine_pwm;

/// Tolerance used when comparing sample times against profile switch times.
const TIME_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fidelity {
    /// Bridge voltage is the duty-weighted average `d·v_dc/2`.
    Averaged,
    /// Bridge legs switch between the rails by sine PWM.
    Switched,
}

/// Source of the load-current value handed to the voltage controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LoadEstimator {
    /// The load current is measured.
    Sensed,
    /// Reconstructed from the bus power balance with a filtered `v̇_dc`
    /// (filter time constant in s).
    Reconstructed { tau: f64 },
}

/// Piecewise-constant signal given as `(start time, value)` pairs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Profile {
    steps: Vec<(f64, f64)>,
}

impl Profile {
    pub fn constant(value: f64) -> Self {
        Self { steps: vec![(0.0, value)] }
    }

    /// Steps must start at or before `t = 0` and have strictly increasing times.
    pub fn new(steps: Vec<(f64, f64)>) -> Result<Self> {
        ensure(!steps.is_empty(), || "profile needs at least one step".into())?;
        ensure(steps[0].0 <= 0.0, || format!("profile must start at t <= 0, first step is at {} s", steps[0].0))?;
        ensure(steps.windows(2).all(|w| w[1].0 > w[0].0), || "profile times must be strictly increasing".into())?;
        ensure(steps.iter().all(|(t, v)| t.is_finite() && v.is_finite()), || "profile entries must be finite".into())?;
        Ok(Self { steps })
    }

    pub fn steps(&self) -> &[(f64, f64)] {
        &self.steps
    }

    pub fn value_at(&self, t: f64) -> f64 {
        self.steps.iter().take_while(|(s, _)| *s <= t + TIME_EPS).last().map_or(self.steps[0].1, |s| s.1)
    }

    /// Switch times strictly inside `(0, end)`.
    pub fn breakpoints(&self, end: f64) -> impl Iterator<Item = f64> + '_ {
        self.steps.iter().map(|s| s.0).filter(move |&t| t > TIME_EPS && t < end - TIME_EPS)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum InitialCondition {
    /// Bus at its reference, currents at the static optimum for the initial
    /// load and the voltage controller's integrator pre-settled.
    Settled,
    /// Explicit plant state; controller integrator starts at zero.
    State { v_dc: f64, i_d: f64, i_q: f64 },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub name: String,
    pub machine: MachineParams,
    pub dc_link: DcLinkParams,
    pub speed_rpm: Profile,
    /// Dc load power (W).
    pub load_w: Profile,
    pub duration: f64,
    pub fidelity: Fidelity,
    /// RK4 step (s).
    pub integrator_step: f64,
    /// Carrier frequency (Hz); only used in switched mode.
    pub f_sw: f64,
    pub inner: InnerLoopConfig,
    pub nmpc: NmpcConfig,
    pub load_estimator: LoadEstimator,
    pub initial: InitialCondition,
}

impl Scenario {
    /// Constant-speed, constant-load scenario with default controller settings.
    pub fn new(name: &str, machine: MachineParams, dc_link: DcLinkParams) -> Self {
        Self {
            name: name.to_string(),
            nmpc: NmpcConfig::new(&machine, &dc_link),
            machine,
            dc_link,
            speed_rpm: Profile::constant(7000.0),
            load_w: Profile::constant(0.0),
            duration: 0.05,
            fidelity: Fidelity::Averaged,
            integrator_step: 5e-6,
            f_sw: 40e3,
            inner: InnerLoopConfig::default(),
            load_estimator: LoadEstimator::Sensed,
            initial: InitialCondition::Settled,
        }
    }

    /// Switches to switched PWM with the default 1 µs integrator step.
    pub fn switched(mut self) -> Self {
        self.fidelity = Fidelity::Switched;
        self.integrator_step = 1e-6;
        self
    }

    fn ratio(a: f64, b: f64) -> Option<usize> {
        let r = a / b;
        let n = r.round();
        (n >= 1.0 && (r - n).abs() < 1e-6).then_some(n as usize)
    }

    pub fn validate(&self) -> Result<()> {
        self.machine.validate()?;
        self.dc_link.validate()?;
        self.nmpc.validate()?;
        ensure(self.duration > 0.0 && self.duration.is_finite(), || "duration must be positive".into())?;
        let h = self.integrator_step;
        let ts_i = self.inner.t_s;
        ensure(h > 0.0, || "integrator step must be positive".into())?;
        match self.fidelity {
            Fidelity::Averaged => ensure(h <= ts_i / 5.0 * (1.0 + 1e-9), || {
                format!("averaged mode needs integrator step <= T_s-i/5 = {} s, got {h}", ts_i / 5.0)
            })?,
            Fidelity::Switched => {
                ensure(self.f_sw > 0.0, || "switching frequency must be positive".into())?;
                ensure(h <= 1.0 / (25.0 * self.f_sw) * (1.0 + 1e-9), || {
                    format!("switched mode needs integrator step <= 1/(25 f_sw) = {} s, got {h}", 1.0 / (25.0 * self.f_sw))
                })?
            }
        }
        ensure(Self::ratio(ts_i, h).is_some(), || "T_s-i must be an integer multiple of the integrator step".into())?;
        ensure(Self::ratio(self.nmpc.t_s, ts_i).is_some(), || "T_s-o must be an integer multiple of T_s-i".into())?;
        ensure(self.speed_rpm.steps().iter().all(|s| s.1 >= 0.0), || "speed must be nonnegative".into())?;
        Ok(())
    }

    fn omega_r(&self, t: f64) -> f64 {
        rpm_to_electrical(self.speed_rpm.value_at(t), self.machine.poles).1
    }
}

/// One sampled row of a closed-loop run.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct TraceRow {
    pub t: f64,
    pub v_dc: f64,
    pub i_d: f64,
    pub i_q: f64,
    pub i_d_ref: f64,
    pub i_q_ref: f64,
    pub d_d: f64,
    pub d_q: f64,
    pub i_abc: [f64; 3],
    /// Phase duties after clipping to the modulation range.
    pub d_abc: [f64; 3],
    pub i_load: f64,
    pub p_e: f64,
    pub p_load: f64,
    pub speed_rpm: f64,
    pub e_int: f64,
    pub saturated: bool,
    /// A voltage-controller solve happened at this sample.
    pub nmpc_solved: bool,
    pub nmpc: NmpcDiagnostics,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize)]
pub struct Trace {
    pub sample_period: f64,
    pub rows: Vec<TraceRow>,
}

/// First line of every trace CSV.
pub const TRACE_VERSION: &str = "# pmsg-trace v1";

pub const TRACE_COLUMNS: [&str; 32] = [
    "t", "v_dc", "i_d", "i_q", "i_d_ref", "i_q_ref", "d_d", "d_q", "i_a", "i_b", "i_c", "d_a", "d_b", "d_c",
    "i_load", "p_e", "p_load", "speed_rpm", "e_int", "saturated", "nmpc_solved", "nmpc_iterations", "nmpc_kkt",
    "nmpc_converged", "nmpc_relaxed", "nmpc_fallback", "nmpc_projected", "circle_active", "ellipse_active",
    "max_slack", "nmpc_cost", "nmpc_ok",
];

impl Trace {
    /// Writes a versioned CSV: a comment line, the header, then every `decimation`-th row.
    pub fn write_csv<W: Write>(&self, mut w: W, decimation: usize) -> io::Result<()> {
        writeln!(w, "{TRACE_VERSION}")?;
        writeln!(w, "{}", TRACE_COLUMNS.join(","))?;
        let b = |x: bool| u8::from(x);
        for r in self.rows.iter().step_by(decimation.max(1)) {
            let n = &r.nmpc;
            writeln!(
                w,
                "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
                r.t,
                r.v_dc,
                r.i_d,
                r.i_q,
                r.i_d_ref,
                r.i_q_ref,
                r.d_d,
                r.d_q,
                r.i_abc[0],
                r.i_abc[1],
                r.i_abc[2],
                r.d_abc[0],
                r.d_abc[1],
                r.d_abc[2],
                r.i_load,
                r.p_e,
                r.p_load,
                r.speed_rpm,
                r.e_int,
                b(r.saturated),
                b(r.nmpc_solved),
                n.iterations,
                n.kkt_residual,
                b(n.converged),
                b(n.relaxed),
                b(n.fallback),
                b(n.projected),
                b(n.circle_active),
                b(n.ellipse_active),
                n.max_slack,
                n.cost,
                b(!n.fallback),
            )?;
        }
        w.flush()
    }

    pub fn is_finite(&self) -> bool {
        self.rows.iter().all(|r| {
            [r.t, r.v_dc, r.i_d, r.i_q, r.i_d_ref, r.i_q_ref, r.d_d, r.d_q, r.i_load, r.p_e, r.e_int]
                .iter()
                .chain(&r.i_abc)
                .chain(&r.d_abc)
                .all(|x| x.is_finite())
        })
    }
}

fn rk4(x: [f64; 4], h: f64, f: impl Fn(&[f64; 4]) -> [f64; 4]) -> [f64; 4] {
    let add = |x: &[f64; 4], k: &[f64; 4], s: f64| std::array::from_fn(|i| x[i] + s * k[i]);
    let k1 = f(&x);
    let k2 = f(&add(&x, &k1, h / 2.0));
    let k3 = f(&add(&x, &k2, h / 2.0));
    let k4 = f(&add(&x, &k3, h));
    std::array::from_fn(|i| x[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i]))
}

/// Phase duties for dq duties at rotor angle `θ`, clipped to `[-1, 1]`.
pub fn phase_duties(duty: DutyCycles, theta_r: f64) -> ([f64; 3], bool) {
    pwm::clip_duties(inverse_park([duty.d_d, duty.d_q, 0.0], theta_r))
}

/// Terminal dq voltages of the averaged bridge at angle `θ` (overmodulation clipped per phase).
fn averaged_voltages(duty: DutyCycles, theta_r: f64, v_dc: f64) -> (f64, f64) {
    let (d_abc, clipped) = phase_duties(duty, theta_r);
    if clipped {
        let dq = park_transform(d_abc, theta_r);
        (dq[0] * v_dc / 2.0, dq[1] * v_dc / 2.0)
    } else {
        duty.voltages(v_dc)
    }
}

struct Plant<'a> {
    mp: &'a MachineParams,
    dp: &'a DcLinkParams,
    omega_r: f64,
    p_load: f64,
}

impl Plant<'_> {
    fn derivatives(&self, x: &[f64; 4], v_d: f64, v_q: f64) -> [f64; 4] {
        let s = PlantState { v_dc: x[0], i_d: x[1], i_q: x[2], theta_r: x[3] };
        let i_load = if self.p_load == 0.0 { 0.0 } else { self.p_load / x[0] };
        let op = OperatingPoint { omega_r: self.omega_r, omega_m: self.omega_r / self.mp.pole_pairs(), i_load };
        plant_derivatives_with_voltages(&s, v_d, v_q, &op, self.mp, self.dp)
    }

    /// Averaged bridge over `[0, t]` with `n` RK4 steps.
    fn averaged(&self, mut x: [f64; 4], duty: DutyCycles, t: f64, n: usize) -> [f64; 4] {
        let h = t / n as f64;
        for _ in 0..n {
            x = rk4(x, h, |s| {
                let (v_d, v_q) = averaged_voltages(duty, s[3], s[0]);
                self.derivatives(s, v_d, v_q)
            });
        }
        x
    }

    /// Switched bridge over `[t0, t0 + t]`; every RK4 step is split at the
    /// carrier crossings so the switch states are constant on each piece.
    fn switched(&self, mut x: [f64; 4], duty: DutyCycles, t0: f64, t: f64, n: usize, f_sw: f64) -> [f64; 4] {
        let h = t / n as f64;
        let mut cuts = Vec::with_capacity(16);
        for k in 0..n {
            let (ta, tb) = (t0 + k as f64 * h, t0 + (k + 1) as f64 * h);
            let (d_abc, _) = phase_duties(duty, x[3] + self.omega_r * h / 2.0);
            let (pa, pb) = (ta * f_sw, tb * f_sw);
            cuts.clear();
            cuts.push(pa);
            let base = pa.floor();
            for period in [base, base + 1.0] {
                for p in pwm::switching_phases(d_abc) {
                    let c = period + p;
                    if c > pa && c < pb {
                        cuts.push(c);
                    }
                }
            }
            cuts.push(pb);
            cuts.sort_by(f64::total_cmp);
            for w in cuts.windows(2) {
                let dt = (w[1] - w[0]) / f_sw;
                if dt <= 0.0 {
                    continue;
                }
                let sw = sine_pwm(d_abc, 0.5 * (w[0] + w[1]));
                x = rk4(x, dt, |s| {
                    let leg = sw.map(|v| v * s[0] / 2.0);
                    let dq = park_transform(leg, s[3]);
                    self.derivatives(s, dq[0], dq[1])
                });
            }
        }
        x
    }
}

/// Static optimum at the reference voltage for load `p_load` (the generator
/// also supplies the bleed resistor).
pub fn operating_point_optimum(p_load: f64, omega_r: f64, mp: &MachineParams, dp: &DcLinkParams) -> Result<(f64, f64)> {
    let v = dp.v_dc_ref;
    let s = solve_static(&StaticProblem { p_e: -(v * v / dp.r + p_load), omega_r, v_dc: v, mp: *mp })?;
    Ok((s.i_d, s.i_q))
}

/// Integrator value at which the voltage controller holds `v*` in steady
/// state for a constant load, found by a secant search on the bus balance.
pub fn settled_integrator(
    cfg: &NmpcConfig,
    i_load: f64,
    omega_r: f64,
    mp: &MachineParams,
    dp: &DcLinkParams,
) -> Result<f64> {
    let dp_ref = DcLinkParams { v_dc_ref: cfg.v_dc_ref, ..*dp };
    let balance = |e: f64| -> Result<f64> {
        let x0 = ReducedState { v_dc: cfg.v_dc_ref, e_int: e };
        let sol = build_and_solve_ocp(x0, i_load, omega_r, cfg, mp, &dp_ref, None)?;
        Ok(reduced_dynamics(x0, sol.u_sequence[0], i_load, omega_r, mp, &dp_ref)?.v_dc)
    };
    let (mut e0, mut e1) = (0.0, 0.05);
    let (mut g0, mut g1) = (balance(e0)?, balance(e1)?);
    for _ in 0..30 {
        if g1.abs() < 1e-3 || g1 == g0 {
            break;
        }
        let e2 = e1 - g1 * (e1 - e0) / (g1 - g0);
        (e0, g0) = (e1, g1);
        e1 = e2;
        g1 = balance(e1)?;
    }
    Ok(e1)
}

struct LoadObserver {
    mode: LoadEstimator,
    v_prev: Option<f64>,
    v_dot: f64,
}

impl LoadObserver {
    fn update(&mut self, v: f64, p_bridge: f64, sensed: f64, dp: &DcLinkParams, dt: f64) -> f64 {
        match self.mode {
            LoadEstimator::Sensed => sensed,
            LoadEstimator::Reconstructed { tau } => {
                if let Some(vp) = self.v_prev {
                    let raw = (v - vp) / dt;
                    self.v_dot += dt / (tau + dt) * (raw - self.v_dot);
                }
                self.v_prev = Some(v);
                p_bridge / v - v / dp.r - dp.c * self.v_dot
            }
        }
    }
}

/// Runs the scenario and returns the trace sampled at `T_s-i`.
pub fn run_closed_loop(sc: &Scenario) -> Result<Trace> {
    sc.validate()?;
    let mp = &sc.machine;
    let dp = &sc.dc_link;
    let ts_i = sc.inner.t_s;
    let n_sub = Scenario::ratio(ts_i, sc.integrator_step).expect("validated");
    let per_outer = Scenario::ratio(sc.nmpc.t_s, ts_i).expect("validated");
    let n_samples = (sc.duration / ts_i).round() as usize;

    let mut inner = CurrentController::new(sc.inner, mp, dp.v_floor)?;
    let mut outer = NmpcController::new(sc.nmpc, mp, dp)?;
    let w0 = sc.omega_r(0.0);
    let p0 = sc.load_w.value_at(0.0);
    let state0 = match sc.initial {
        InitialCondition::Settled => {
            let (i_d, i_q) = operating_point_optimum(p0, w0, mp, dp)?;
            let v = sc.nmpc.v_dc_ref;
            outer.set_integrator(settled_integrator(&sc.nmpc, p0 / v, w0, mp, dp)?);
            PlantState { v_dc: v, i_d, i_q, theta_r: 0.0 }
        }
        InitialCondition::State { v_dc, i_d, i_q } => PlantState { v_dc, i_d, i_q, theta_r: 0.0 },
    };
    outer.set_reference(state0.i_d, state0.i_q);
    inner.reset_estimates(state0.i_d, state0.i_q);
    inner.set_reference(state0.i_d, state0.i_q);

    let mut observer = LoadObserver { mode: sc.load_estimator, v_prev: None, v_dot: 0.0 };
    let mut last_out: Option<ControlOutput> = None;
    let mut x = state0.to_array();
    let mut rows = Vec::with_capacity(n_samples);
    let v_hi = 2.0 * dp.v_dc_max;

    for k in 0..n_samples {
        let t = k as f64 * ts_i;
        let w = sc.omega_r(t);
        let p_load = sc.load_w.value_at(t);
        let (v, i_d, i_q, theta) = (x[0], x[1], x[2], x[3]);
        if !(v > dp.v_floor && v < v_hi) || !x.iter().all(|s| s.is_finite()) {
            return Err(Error::SimulationDiverged { t, v_dc: v });
        }
        let i_load = p_load / v;
        let p_bridge = last_out.map_or(0.0, |o| {
            let (v_d, v_q) = o.duty.voltages(v);
            -1.5 * (v_d * i_d + v_q * i_q)
        });
        let i_load_est = observer.update(v, p_bridge, i_load, dp, ts_i);
        let solved = k % per_outer == 0;
        if solved {
            let estimate = if last_out.is_some() { i_load_est } else { i_load };
            let (rd, rq) = outer.step(v, estimate, w);
            inner.set_reference(rd, rq);
        }
        let out = inner.step((i_d, i_q), w, v)?;
        last_out = Some(out);
        let (d_abc, clipped) = phase_duties(out.duty, theta);
        rows.push(TraceRow {
            t,
            v_dc: v,
            i_d,
            i_q,
            i_d_ref: inner.state.i_d_ref,
            i_q_ref: inner.state.i_q_ref,
            d_d: out.duty.d_d,
            d_q: out.duty.d_q,
            i_abc: inverse_park([i_d, i_q, 0.0], theta),
            d_abc,
            i_load,
            p_e: electrical_power(i_d, i_q, w, mp),
            p_load,
            speed_rpm: sc.speed_rpm.value_at(t),
            e_int: outer.integrator(),
            saturated: out.saturated || clipped,
            nmpc_solved: solved,
            nmpc: outer.diagnostics().copied().unwrap_or_default(),
        });

        let plant = Plant { mp, dp, omega_r: w, p_load };
        x = match sc.fidelity {
            Fidelity::Averaged => plant.averaged(x, out.duty, ts_i, n_sub),
            Fidelity::Switched => plant.switched(x, out.duty, t, ts_i, n_sub, sc.f_sw),
        };
        x[3] = wrap_angle(x[3]);
    }
    let t_end = n_samples as f64 * ts_i;
    if !(x[0] > dp.v_floor && x[0] < v_hi) || !x.iter().all(|s| s.is_finite()) {
        return Err(Error::SimulationDiverged { t: t_end, v_dc: x[0] });
    }
    Ok(Trace { sample_period: ts_i, rows })
}

/// Current-loop response with the bus held at a fixed voltage.
#[derive(Debug, Clone, PartialEq)]
pub struct CurrentResponse {
    /// `(t, i_d, i_q)` at every inner sample, including the final state.
    pub samples: Vec<(f64, f64, f64)>,
    pub saturated: bool,
}

/// Simulates only the current loop: `v_dc` frozen, constant speed, averaged
/// bridge, references stepped from `initial` to `reference` at `t = 0`.
#[allow(clippy::too_many_arguments)]
pub fn run_current_loop(
    mp: &MachineParams,
    cfg: InnerLoopConfig,
    omega_r: f64,
    v_dc: f64,
    initial: (f64, f64),
    reference: (f64, f64),
    duration: f64,
    integrator_step: f64,
) -> Result<CurrentResponse> {
    let mut ctrl = CurrentController::new(cfg, mp, 0.0)?;
    ctrl.reset_estimates(initial.0, initial.1);
    ctrl.set_reference(reference.0, reference.1);
    let n_sub = Scenario::ratio(cfg.t_s, integrator_step)
        .ok_or_else(|| Error::InvalidParameter("T_s-i must be a multiple of the integrator step".into()))?;
    let h = cfg.t_s / n_sub as f64;
    let n = (duration / cfg.t_s).round() as usize;
    let (mut i_d, mut i_q) = initial;
    let mut samples = Vec::with_capacity(n + 1);
    let mut saturated = false;
    for k in 0..n {
        samples.push((k as f64 * cfg.t_s, i_d, i_q));
        let out = ctrl.step((i_d, i_q), omega_r, v_dc)?;
        saturated |= out.saturated;
        let (v_d, v_q) = out.duty.voltages(v_dc);
        let f = |s: &[f64; 4]| {
            let did = (-mp.r_s * s[1] + omega_r * mp.l_q * s[2] + v_d) / mp.l_d;
            let diq = (-mp.r_s * s[2] - omega_r * mp.l_d * s[1] - omega_r * mp.lambda_m + v_q) / mp.l_q;
            [0.0, did, diq, 0.0]
        };
        let mut x = [v_dc, i_d, i_q, 0.0];
        for _ in 0..n_sub {
            x = rk4(x, h, f);
        }
        (i_d, i_q) = (x[1], x[2]);
    }
    samples.push((n as f64 * cfg.t_s, i_d, i_q));
    Ok(CurrentResponse { samples, saturated })
}
