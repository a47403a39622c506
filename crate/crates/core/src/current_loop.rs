//! Fast dq current loops.
//!
//! Cross-coupling and back-emf are cancelled by feedforward, which leaves two
//! scalar first-order plants `i̇ = a·i + b·ṽ`. Each axis is closed with an
//! output-regulation law `ṽ = K·ξ + T·i*`, where the constant reference is
//! generated by the exosystem `ẋ* = S·x*` with `S = 0`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::machine::{DutyCycles, MachineParams};

/// Default closed-loop pole: one decade below a 40 kHz switching frequency.
pub const DEFAULT_POLE: f64 = -2.0 * std::f64::consts::PI * 4000.0;

/// Scalar state-space model of one decoupled axis plus its exosystem.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AxisModel {
    pub a: f64,
    pub b: f64,
    /// Output row: `e = c·i + q·i*`.
    pub c: f64,
    pub q: f64,
    /// Exosystem matrix, zero for constant references.
    pub s: f64,
}

impl AxisModel {
    pub fn d_axis(mp: &MachineParams) -> Self {
        Self::tracking(-mp.r_s / mp.l_d, 1.0 / mp.l_d)
    }

    pub fn q_axis(mp: &MachineParams) -> Self {
        Self::tracking(-mp.r_s / mp.l_q, 1.0 / mp.l_q)
    }

    fn tracking(a: f64, b: f64) -> Self {
        Self { a, b, c: -1.0, q: 1.0, s: 0.0 }
    }
}

/// Gains of one axis together with the solution of its regulator equations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RegulatorDesign {
    pub model: AxisModel,
    /// Feedback gain `K` (V/A).
    pub k: f64,
    /// Feedforward gain `T` (V/A).
    pub t: f64,
    /// Regulator-equation solution `Π`.
    pub pi: f64,
    /// Luenberger gain `L` (1/s); only used by [`ObserverMode::Luenberger`].
    pub observer_gain: f64,
}

impl RegulatorDesign {
    pub fn closed_loop_pole(&self) -> f64 {
        self.model.a + self.model.b * self.k
    }

    /// Residuals of `AΠ + B(KΠ + T) = ΠS` and `CΠ + Q = 0`.
    pub fn regulator_residuals(&self) -> (f64, f64) {
        let m = &self.model;
        (
            m.a * self.pi + m.b * (self.k * self.pi + self.t) - self.pi * m.s,
            m.c * self.pi + m.q,
        )
    }

    /// Static control law `u = K·ξ + T·x*`.
    pub fn control(&self, estimate: f64, reference: f64) -> f64 {
        self.k * estimate + self.t * reference
    }
}

/// Places the closed-loop pole of one axis and solves the regulator equations.
///
/// The observer pole is put five times further left than the controller pole.
pub fn synthesize_axis(model: AxisModel, desired_pole: f64) -> Result<RegulatorDesign> {
    if model.b == 0.0 || !model.b.is_finite() {
        return Err(Error::UncontrollableAxis);
    }
    if !(desired_pole < 0.0) || !desired_pole.is_finite() {
        return Err(Error::UnstableRequest { pole: desired_pole });
    }
    if model.c == 0.0 {
        return Err(Error::InvalidParameter("axis output row c must be nonzero".into()));
    }
    let k = (desired_pole - model.a) / model.b;
    let pi = -model.q / model.c;
    let t = (pi * model.s - model.a * pi) / model.b - k * pi;
    let observer_gain = model.a - 5.0 * desired_pole;
    Ok(RegulatorDesign { model, k, t, pi, observer_gain })
}

/// Cross-coupling and back-emf feedforward: maps the decoupled inputs
/// `(ṽ_d, ṽ_q)` to the stator voltages `(v_d, v_q)`.
pub fn decouple(
    v_tilde_d: f64,
    v_tilde_q: f64,
    i_d: f64,
    i_q: f64,
    omega_r: f64,
    mp: &MachineParams,
) -> (f64, f64) {
    (
        v_tilde_d - omega_r * mp.l_q * i_q,
        v_tilde_q + omega_r * mp.l_d * i_d + omega_r * mp.lambda_m,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum ObserverMode {
    /// ξ is the latest measurement.
    #[default]
    Identity,
    /// ξ̇ = aξ + bu + L(y − ξ), propagated exactly over each hold interval.
    Luenberger,
}

/// Estimates, references and the last decoupled input of the two axes.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct InnerLoopState {
    pub xi_d: f64,
    pub xi_q: f64,
    pub i_d_ref: f64,
    pub i_q_ref: f64,
    /// Decoupled inputs applied over the last hold interval.
    pub u_d: f64,
    pub u_q: f64,
}

/// Advances both axis estimates by `dt`.
pub fn observer_step(
    state: &InnerLoopState,
    measured: (f64, f64),
    designs: (&RegulatorDesign, &RegulatorDesign),
    mode: ObserverMode,
    dt: f64,
) -> InnerLoopState {
    let mut next = *state;
    match mode {
        ObserverMode::Identity => {
            next.xi_d = measured.0;
            next.xi_q = measured.1;
        }
        ObserverMode::Luenberger => {
            next.xi_d = luenberger_axis(state.xi_d, measured.0, state.u_d, designs.0, dt);
            next.xi_q = luenberger_axis(state.xi_q, measured.1, state.u_q, designs.1, dt);
        }
    }
    next
}

fn luenberger_axis(xi: f64, y: f64, u: f64, design: &RegulatorDesign, dt: f64) -> f64 {
    let m = &design.model;
    let l = design.observer_gain;
    let f = m.a - l;
    let forcing = m.b * u + l * y;
    // exact ZOH solution of ξ̇ = fξ + forcing
    let phi = (f * dt).exp();
    let gamma = if f.abs() * dt < 1e-12 { dt } else { (f * dt).exp_m1() / f };
    phi * xi + gamma * forcing
}

/// Mean of `i(τ)` over `[0, hold]` for `i̇ = a·i + b·u` with constant `u`.
pub fn hold_average(model: &AxisModel, i0: f64, u: f64, hold: f64) -> f64 {
    let at = model.a * hold;
    if at.abs() < 1e-9 {
        return i0 + 0.5 * model.b * u * hold;
    }
    // φ1 = (e^{aT} − 1)/(aT)
    let phi1 = at.exp_m1() / at;
    i0 * phi1 + model.b * u / model.a * (phi1 - 1.0)
}

/// Output of one current-controller update.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ControlOutput {
    pub duty: DutyCycles,
    pub saturated: bool,
    pub v_tilde_d: f64,
    pub v_tilde_q: f64,
    pub v_d: f64,
    pub v_q: f64,
}

/// Computes duty cycles from the control law, decoupling and modulator inversion.
///
/// With `hold = Some(T)` the coupling terms use the current predicted to be
/// averaged over the next zero-order-hold interval instead of the sample.
#[allow(clippy::too_many_arguments)]
pub fn control_step(
    state: &InnerLoopState,
    d_design: &RegulatorDesign,
    q_design: &RegulatorDesign,
    measured: (f64, f64),
    omega_r: f64,
    v_dc: f64,
    mp: &MachineParams,
    v_floor: f64,
    hold: Option<f64>,
) -> Result<ControlOutput> {
    if !(v_dc > v_floor) {
        return Err(Error::VoltageFloor { v_dc, floor: v_floor });
    }
    let v_tilde_d = d_design.control(state.xi_d, state.i_d_ref);
    let v_tilde_q = q_design.control(state.xi_q, state.i_q_ref);
    let (i_d, i_q) = match hold {
        Some(h) if h > 0.0 => (
            hold_average(&d_design.model, measured.0, v_tilde_d, h),
            hold_average(&q_design.model, measured.1, v_tilde_q, h),
        ),
        _ => measured,
    };
    let (v_d, v_q) = decouple(v_tilde_d, v_tilde_q, i_d, i_q, omega_r, mp);
    let (duty, saturated) = DutyCycles::from_voltages(v_d, v_q, v_dc).saturate();
    Ok(ControlOutput { duty, saturated, v_tilde_d, v_tilde_q, v_d, v_q })
}

/// Tunables of the inner loop.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InnerLoopConfig {
    pub pole_d: f64,
    pub pole_q: f64,
    pub observer: ObserverMode,
    /// Sampling period `T_s-i` (s).
    pub t_s: f64,
    /// Use hold-averaged currents in the decoupling feedforward.
    pub hold_compensation: bool,
}

impl Default for InnerLoopConfig {
    fn default() -> Self {
        Self {
            pole_d: DEFAULT_POLE,
            pole_q: DEFAULT_POLE,
            observer: ObserverMode::Identity,
            t_s: 25e-6,
            hold_compensation: true,
        }
    }
}

/// Stateful sampled current controller owning its designs and estimates.
#[derive(Debug, Clone)]
pub struct CurrentController {
    pub config: InnerLoopConfig,
    pub d: RegulatorDesign,
    pub q: RegulatorDesign,
    pub state: InnerLoopState,
    mp: MachineParams,
    v_floor: f64,
}

impl CurrentController {
    pub fn new(config: InnerLoopConfig, mp: &MachineParams, v_floor: f64) -> Result<Self> {
        if !(config.t_s > 0.0) {
            return Err(Error::InvalidParameter(format!("inner sampling period {} must be > 0", config.t_s)));
        }
        Ok(Self {
            d: synthesize_axis(AxisModel::d_axis(mp), config.pole_d)?,
            q: synthesize_axis(AxisModel::q_axis(mp), config.pole_q)?,
            config,
            state: InnerLoopState::default(),
            mp: *mp,
            v_floor,
        })
    }

    pub fn set_reference(&mut self, i_d_ref: f64, i_q_ref: f64) {
        self.state.i_d_ref = i_d_ref;
        self.state.i_q_ref = i_q_ref;
    }

    /// Seeds the estimates, e.g. before the first sample.
    pub fn reset_estimates(&mut self, i_d: f64, i_q: f64) {
        self.state.xi_d = i_d;
        self.state.xi_q = i_q;
    }

    /// One sample: update the estimate and compute the duty cycles to hold until the next one.
    pub fn step(&mut self, measured: (f64, f64), omega_r: f64, v_dc: f64) -> Result<ControlOutput> {
        self.state = observer_step(&self.state, measured, (&self.d, &self.q), self.config.observer, self.config.t_s);
        let hold = self.config.hold_compensation.then_some(self.config.t_s);
        let out = control_step(&self.state, &self.d, &self.q, measured, omega_r, v_dc, &self.mp, self.v_floor, hold)?;
        self.state.u_d = out.v_tilde_d;
        self.state.u_q = out.v_tilde_q;
        Ok(out)
    }
}
