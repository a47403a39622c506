//! Slow dc-voltage loop: integral-extended reduced model, Forward-Euler
//! transcription and a receding-horizon SQP controller.
//!
//! With the current loops assumed converged, the stator currents become the
//! inputs of a scalar bus model. An integrator state `e_int` is appended so the
//! predictive controller has integral action against load mismatch.

mod ocp;
pub mod qp;
pub mod sqp;

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::machine::{DcLinkParams, MachineParams};

pub use ocp::{build_and_solve_ocp, OcpSolution};

/// State of the integral-extended reduced model.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ReducedState {
    /// dc bus voltage (V)
    pub v_dc: f64,
    /// integral of the voltage error (V·s)
    pub e_int: f64,
}

/// Horizon, weights and bounds of the predictive voltage controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NmpcConfig {
    pub horizon_n: usize,
    /// sampling period (s)
    pub t_s: f64,
    /// diagonal state weight on `(v_dc − v*, e_int)`
    pub q_weight: [f64; 2],
    /// diagonal input weight on `(i_d, i_q)`
    pub r_weight: [f64; 2],
    pub v_dc_min: f64,
    pub v_dc_max: f64,
    pub i_peak: f64,
    pub v_dc_ref: f64,
    pub max_sqp_iters: usize,
    /// KKT tolerance in the solver's scaled units
    pub kkt_tol: f64,
    /// Linear and quadratic weights of the voltage-box slack (scaled units).
    pub slack_weights: [f64; 2],
}

impl NmpcConfig {
    /// Defaults with bounds and ratings taken from the machine and dc link.
    pub fn new(mp: &MachineParams, dp: &DcLinkParams) -> Self {
        Self {
            horizon_n: 10,
            t_s: 0.5e-3,
            q_weight: [0.1, 9000.0],
            r_weight: [0.1, 0.1],
            v_dc_min: dp.v_dc_min,
            v_dc_max: dp.v_dc_max,
            i_peak: mp.i_peak,
            v_dc_ref: dp.v_dc_ref,
            max_sqp_iters: 100,
            kkt_tol: 1e-8,
            slack_weights: [1e3, 1e5],
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure(self.horizon_n >= 1, || "horizon_n must be at least 1".into())?;
        ensure(self.t_s > 0.0 && self.t_s.is_finite(), || format!("t_s must be positive, got {}", self.t_s))?;
        ensure(self.q_weight.iter().all(|&q| q > 0.0 && q.is_finite()), || {
            format!("q_weight must be positive on the diagonal, got {:?}", self.q_weight)
        })?;
        ensure(self.r_weight.iter().all(|&r| r > 0.0 && r.is_finite()), || {
            format!("r_weight must be positive on the diagonal, got {:?}", self.r_weight)
        })?;
        ensure(
            0.0 < self.v_dc_min && self.v_dc_min < self.v_dc_ref && self.v_dc_ref < self.v_dc_max,
            || "NMPC voltages must satisfy 0 < v_dc_min < v_dc_ref < v_dc_max".into(),
        )?;
        ensure(self.i_peak > 0.0, || "i_peak must be positive".into())?;
        ensure(self.max_sqp_iters >= 1, || "max_sqp_iters must be at least 1".into())?;
        ensure(self.kkt_tol > 0.0, || "kkt_tol must be positive".into())?;
        ensure(self.slack_weights.iter().all(|&w| w >= 0.0), || "slack weights must be nonnegative".into())
    }
}

impl Default for NmpcConfig {
    fn default() -> Self {
        Self::new(&MachineParams::bmw_i3(), &DcLinkParams::default())
    }
}

/// Electrical power term of the reduced bus model, `−r_s|i|² + ω(L_q−L_d)i_q i_d − ωλ i_q` (W·2/3).
pub(crate) fn bridge_power(u: (f64, f64), omega_r: f64, mp: &MachineParams) -> f64 {
    let (i_d, i_q) = u;
    -mp.r_s * (i_d * i_d + i_q * i_q) + omega_r * (mp.l_q - mp.l_d) * i_q * i_d - omega_r * mp.lambda_m * i_q
}

/// Time derivative of the reduced state with the stator currents as inputs.
pub fn reduced_dynamics(
    x: ReducedState,
    u: (f64, f64),
    i_load: f64,
    omega_r: f64,
    mp: &MachineParams,
    dp: &DcLinkParams,
) -> Result<ReducedState> {
    if !(x.v_dc > dp.v_floor) {
        return Err(Error::NonPositiveVoltage { v_dc: x.v_dc, floor: dp.v_floor });
    }
    let v = x.v_dc;
    let dv = -v / (dp.r * dp.c) - i_load / dp.c + 1.5 / (dp.c * v) * bridge_power(u, omega_r, mp);
    Ok(ReducedState { v_dc: dv, e_int: dp.v_dc_ref - v })
}

/// One Forward-Euler step of [`reduced_dynamics`].
pub fn discretize_fe(
    x: ReducedState,
    u: (f64, f64),
    i_load: f64,
    omega_r: f64,
    t_s: f64,
    mp: &MachineParams,
    dp: &DcLinkParams,
) -> Result<ReducedState> {
    ensure(t_s >= 0.0 && t_s.is_finite(), || format!("t_s must be nonnegative, got {t_s}"))?;
    let f = reduced_dynamics(x, u, i_load, omega_r, mp, dp)?;
    Ok(ReducedState { v_dc: x.v_dc + t_s * f.v_dc, e_int: x.e_int + t_s * f.e_int })
}

/// Per-call solver diagnostics.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct NmpcDiagnostics {
    pub iterations: usize,
    pub kkt_residual: f64,
    pub converged: bool,
    /// The constraint-relaxed fallback QP was used.
    pub relaxed: bool,
    /// The previous reference was held because the solve failed.
    pub fallback: bool,
    /// The returned input was projected back onto the constraint set.
    pub projected: bool,
    pub circle_active: bool,
    pub ellipse_active: bool,
    /// Largest voltage-box slack over the horizon (V).
    pub max_slack: f64,
    pub cost: f64,
}

/// Receding-horizon voltage controller with its warm-start memory.
#[derive(Debug, Clone)]
pub struct NmpcController {
    pub cfg: NmpcConfig,
    mp: MachineParams,
    dp: DcLinkParams,
    e_int: f64,
    memory: Option<OcpSolution>,
    reference: (f64, f64),
    last: Option<NmpcDiagnostics>,
    warm_start: bool,
}

impl NmpcController {
    pub fn new(cfg: NmpcConfig, mp: &MachineParams, dp: &DcLinkParams) -> Result<Self> {
        cfg.validate()?;
        mp.validate()?;
        dp.validate()?;
        Ok(Self {
            cfg,
            mp: *mp,
            dp: *dp,
            e_int: 0.0,
            memory: None,
            reference: (0.0, 0.0),
            last: None,
            warm_start: true,
        })
    }

    /// Disables warm starting (every call solves from a cold start).
    pub fn without_warm_start(mut self) -> Self {
        self.warm_start = false;
        self
    }

    /// Reference returned if the very first solve fails.
    pub fn set_reference(&mut self, i_d: f64, i_q: f64) {
        self.reference = (i_d, i_q);
    }

    pub fn set_integrator(&mut self, e_int: f64) {
        self.e_int = e_int;
    }

    pub fn integrator(&self) -> f64 {
        self.e_int
    }

    pub fn reference(&self) -> (f64, f64) {
        self.reference
    }

    pub fn diagnostics(&self) -> Option<&NmpcDiagnostics> {
        self.last.as_ref()
    }

    pub fn memory(&self) -> Option<&OcpSolution> {
        self.memory.as_ref()
    }

    /// One controller period: solves the horizon problem from the measured
    /// bus voltage, returns the first current reference and advances the
    /// integrator. On solver failure the previous reference is held.
    pub fn step(&mut self, v_dc: f64, i_load: f64, omega_r: f64) -> (f64, f64) {
        let x0 = ReducedState { v_dc, e_int: self.e_int };
        let warm = if self.warm_start { self.memory.as_ref() } else { None };
        let solved = build_and_solve_ocp(x0, i_load, omega_r, &self.cfg, &self.mp, &self.dp, warm);
        let mut diag = NmpcDiagnostics::default();
        match solved {
            Ok(sol) if sol.usable() => {
                let (u, projected) = self.project(sol.u_sequence[0], v_dc, omega_r);
                diag = NmpcDiagnostics {
                    iterations: sol.iterations,
                    kkt_residual: sol.kkt_residual,
                    converged: sol.converged,
                    relaxed: sol.relaxed,
                    fallback: false,
                    projected,
                    circle_active: sol.circle_active,
                    ellipse_active: sol.ellipse_active,
                    max_slack: sol.slacks.iter().fold(0.0, |m: f64, &s| m.max(s)),
                    cost: sol.cost,
                };
                self.reference = u;
                self.memory = Some(sol.shifted());
            }
            Ok(sol) => {
                diag.iterations = sol.iterations;
                diag.kkt_residual = sol.kkt_residual;
                diag.fallback = true;
                self.memory = None;
            }
            Err(_) => {
                diag.fallback = true;
                self.memory = None;
            }
        }
        self.last = Some(diag);
        if v_dc.is_finite() {
            self.e_int += self.cfg.t_s * (self.cfg.v_dc_ref - v_dc);
        }
        self.reference
    }

    /// Scales `u` into the current circle and, if needed, bisects toward the
    /// deepest flux-weakening point until the voltage ellipse holds.
    fn project(&self, u: (f64, f64), v_dc: f64, omega_r: f64) -> ((f64, f64), bool) {
        let mut u = u;
        let mut projected = false;
        let i_pk = self.cfg.i_peak;
        let norm = u.0.hypot(u.1);
        if norm > i_pk {
            u = (u.0 * i_pk / norm, u.1 * i_pk / norm);
            projected = true;
        }
        let mp = &self.mp;
        let rhs = (v_dc / 2.0).powi(2);
        let ellipse = |p: (f64, f64)| {
            (omega_r * mp.l_q * p.1).powi(2) + (omega_r * mp.l_d * p.0 + omega_r * mp.lambda_m).powi(2)
        };
        if ellipse(u) > rhs * (1.0 + 1e-4) {
            let anchor = ((-mp.lambda_m / mp.l_d).max(-0.999 * i_pk), 0.0);
            if ellipse(anchor) <= rhs {
                let (mut lo, mut hi) = (0.0, 1.0);
                for _ in 0..60 {
                    let mid = 0.5 * (lo + hi);
                    let p = (anchor.0 + mid * (u.0 - anchor.0), anchor.1 + mid * (u.1 - anchor.1));
                    if ellipse(p) <= rhs {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                u = (anchor.0 + lo * (u.0 - anchor.0), anchor.1 + lo * (u.1 - anchor.1));
                projected = true;
            }
        }
        (u, projected)
    }
}

#[cfg(test)]
mod tests;
