//! Full transcription of the horizon problem.
//!
//! Decision vector, per stage `k = 0..N-1`: `[i_d,k, i_q,k, v_k+1, e_k+1, s_k+1]`
//! in scaled units (`i/I_peak`, `v/v*`, `e/(v*·T_s)`, `s/v*`). Forward-Euler
//! dynamics are equality rows; current circle, voltage ellipse and the
//! slack-softened voltage box are inequality rows.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use super::sqp::{self, Nlp, SqpOptions, SqpStatus};
use super::{bridge_power, NmpcConfig, ReducedState};
use crate::error::{Error, Result};
use crate::machine::{DcLinkParams, MachineParams};

const STAGE: usize = 5;
const INEQ: usize = 5;

/// Horizon solution in physical units with solver diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OcpSolution {
    /// `(i_d, i_q)` per stage (A)
    pub u_sequence: Vec<(f64, f64)>,
    /// `x_0 .. x_N`
    pub x_sequence: Vec<ReducedState>,
    /// voltage-box slack of `x_1 .. x_N` (V)
    pub slacks: Vec<f64>,
    /// scaled objective value
    pub cost: f64,
    pub kkt_residual: f64,
    /// worst constraint violation in scaled units
    pub primal_infeasibility: f64,
    pub iterations: usize,
    pub converged: bool,
    pub relaxed: bool,
    pub circle_active: bool,
    pub ellipse_active: bool,
}

impl OcpSolution {
    /// Finite and (nearly) feasible, so `u_0` may be applied.
    pub fn usable(&self) -> bool {
        self.primal_infeasibility <= 1e-3
            && self.u_sequence.iter().all(|u| u.0.is_finite() && u.1.is_finite())
    }

    /// Drops the first stage and repeats the last input, for warm starting the next period.
    pub fn shifted(&self) -> Self {
        let mut s = self.clone();
        if !s.u_sequence.is_empty() {
            s.u_sequence.remove(0);
            s.u_sequence.push(*self.u_sequence.last().unwrap());
        }
        s
    }
}

struct Problem<'a> {
    n: usize,
    x0: ReducedState,
    i_load: f64,
    omega_r: f64,
    cfg: &'a NmpcConfig,
    mp: &'a MachineParams,
    dp: &'a DcLinkParams,
    u_s: f64,
    v_s: f64,
    e_s: f64,
    j_s: f64,
    ell_s: f64,
}

impl<'a> Problem<'a> {
    fn new(
        x0: ReducedState,
        i_load: f64,
        omega_r: f64,
        cfg: &'a NmpcConfig,
        mp: &'a MachineParams,
        dp: &'a DcLinkParams,
    ) -> Self {
        let u_s = cfg.i_peak;
        let v_s = cfg.v_dc_ref;
        Self {
            n: cfg.horizon_n,
            x0,
            i_load,
            omega_r,
            cfg,
            mp,
            dp,
            u_s,
            v_s,
            e_s: v_s * cfg.t_s,
            j_s: cfg.r_weight[0].max(cfg.r_weight[1]) * u_s * u_s,
            ell_s: (v_s / 2.0).powi(2),
        }
    }

    /// Scaled `(v, e)` entering stage `k`.
    fn state(&self, z: &DVector<f64>, k: usize) -> (f64, f64) {
        if k == 0 {
            (self.x0.v_dc / self.v_s, self.x0.e_int / self.e_s)
        } else {
            let b = STAGE * (k - 1);
            (z[b + 2], z[b + 3])
        }
    }

    fn input(&self, z: &DVector<f64>, k: usize) -> (f64, f64) {
        (z[STAGE * k] * self.u_s, z[STAGE * k + 1] * self.u_s)
    }

    /// Bus derivative and its partials w.r.t. `(v, i_d, i_q)` in physical units.
    fn fv(&self, v: f64, u: (f64, f64)) -> (f64, f64, f64, f64) {
        let (mp, dp, w) = (self.mp, self.dp, self.omega_r);
        let p = bridge_power(u, w, mp);
        let k = 1.5 / (dp.c * v);
        let f = -v / (dp.r * dp.c) - self.i_load / dp.c + k * p;
        let dv = -1.0 / (dp.r * dp.c) - k * p / v;
        let did = k * (-2.0 * mp.r_s * u.0 + w * (mp.l_q - mp.l_d) * u.1);
        let diq = k * (-2.0 * mp.r_s * u.1 + w * (mp.l_q - mp.l_d) * u.0 - w * mp.lambda_m);
        (f, dv, did, diq)
    }

    fn weights(&self) -> (f64, f64, f64, f64) {
        let c = self.cfg;
        (
            c.q_weight[0] * self.v_s * self.v_s / self.j_s,
            c.q_weight[1] * self.e_s * self.e_s / self.j_s,
            c.r_weight[0] * self.u_s * self.u_s / self.j_s,
            c.r_weight[1] * self.u_s * self.u_s / self.j_s,
        )
    }

    fn v_ref_scaled(&self) -> f64 {
        self.cfg.v_dc_ref / self.v_s
    }

    /// Initial guess from an input sequence: states forward-simulated with FE.
    fn initial_guess(&self, u: &[(f64, f64)]) -> DVector<f64> {
        let mut z = DVector::zeros(STAGE * self.n);
        let (mut v, mut e) = (self.x0.v_dc, self.x0.e_int);
        let mut ok = true;
        for k in 0..self.n {
            let uk = u.get(k).or(u.last()).copied().unwrap_or((0.0, 0.0));
            let b = STAGE * k;
            z[b] = uk.0 / self.u_s;
            z[b + 1] = uk.1 / self.u_s;
            if ok {
                let (f, ..) = self.fv(v, uk);
                let vn = v + self.cfg.t_s * f;
                e += self.cfg.t_s * (self.cfg.v_dc_ref - v);
                v = vn;
                ok = v > self.dp.v_floor.max(0.05 * self.v_s) && v.is_finite();
            }
            if !ok {
                v = self.x0.v_dc;
                e = self.x0.e_int;
            }
            z[b + 2] = v / self.v_s;
            z[b + 3] = e / self.e_s;
            z[b + 4] = (self.cfg.v_dc_min - v).max(v - self.cfg.v_dc_max).max(0.0) / self.v_s;
        }
        z
    }
}

impl Nlp for Problem<'_> {
    fn dim(&self) -> usize {
        STAGE * self.n
    }

    fn is_valid(&self, z: &DVector<f64>) -> bool {
        let floor = self.dp.v_floor / self.v_s;
        z.iter().all(|v| v.is_finite()) && (0..=self.n).all(|k| self.state(z, k).0 > floor)
    }

    fn objective(&self, z: &DVector<f64>) -> f64 {
        let (wv, we, wd, wq) = self.weights();
        let vr = self.v_ref_scaled();
        let [sl, sq] = self.cfg.slack_weights;
        let mut f = 0.0;
        for k in 0..=self.n {
            let (v, e) = self.state(z, k);
            f += wv * (v - vr).powi(2) + we * e * e;
        }
        for k in 0..self.n {
            let b = STAGE * k;
            f += wd * z[b].powi(2) + wq * z[b + 1].powi(2);
            f += sl * z[b + 4] + sq * z[b + 4].powi(2);
        }
        f
    }

    fn gradient(&self, z: &DVector<f64>) -> DVector<f64> {
        let (wv, we, wd, wq) = self.weights();
        let vr = self.v_ref_scaled();
        let [sl, sq] = self.cfg.slack_weights;
        let mut g = DVector::zeros(self.dim());
        for k in 0..self.n {
            let b = STAGE * k;
            g[b] = 2.0 * wd * z[b];
            g[b + 1] = 2.0 * wq * z[b + 1];
            g[b + 2] = 2.0 * wv * (z[b + 2] - vr);
            g[b + 3] = 2.0 * we * z[b + 3];
            g[b + 4] = sl + 2.0 * sq * z[b + 4];
        }
        g
    }

    fn eq(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut c = DVector::zeros(2 * self.n);
        let ts = self.cfg.t_s;
        for k in 0..self.n {
            let (v, e) = self.state(z, k);
            let b = STAGE * k;
            let (f, ..) = self.fv(v * self.v_s, self.input(z, k));
            c[2 * k] = z[b + 2] - v - ts * f / self.v_s;
            c[2 * k + 1] = z[b + 3] - e - (self.cfg.v_dc_ref - v * self.v_s) / self.v_s;
        }
        c
    }

    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(2 * self.n, self.dim());
        let ts = self.cfg.t_s;
        for k in 0..self.n {
            let (v, _) = self.state(z, k);
            let b = STAGE * k;
            let (_, dv, did, diq) = self.fv(v * self.v_s, self.input(z, k));
            let (rv, re) = (2 * k, 2 * k + 1);
            j[(rv, b)] = -ts * did * self.u_s / self.v_s;
            j[(rv, b + 1)] = -ts * diq * self.u_s / self.v_s;
            j[(rv, b + 2)] = 1.0;
            j[(re, b + 3)] = 1.0;
            if k > 0 {
                let p = STAGE * (k - 1);
                j[(rv, p + 2)] = -1.0 - ts * dv;
                j[(re, p + 3)] = -1.0;
                j[(re, p + 2)] = 1.0;
            }
        }
        j
    }

    fn ineq(&self, z: &DVector<f64>) -> DVector<f64> {
        let mut h = DVector::zeros(INEQ * self.n);
        let (mp, w) = (self.mp, self.omega_r);
        let (lo, hi) = (self.cfg.v_dc_min / self.v_s, self.cfg.v_dc_max / self.v_s);
        let circle = (self.u_s / self.cfg.i_peak).powi(2);
        for k in 0..self.n {
            let b = STAGE * k;
            let r = INEQ * k;
            let (v, _) = self.state(z, k);
            let (i_d, i_q) = self.input(z, k);
            h[r] = 1.0 - circle * (z[b].powi(2) + z[b + 1].powi(2));
            h[r + 1] = ((v * self.v_s / 2.0).powi(2)
                - (w * mp.l_q * i_q).powi(2)
                - (w * mp.l_d * i_d + w * mp.lambda_m).powi(2))
                / self.ell_s;
            h[r + 2] = z[b + 2] - lo + z[b + 4];
            h[r + 3] = hi - z[b + 2] + z[b + 4];
            h[r + 4] = z[b + 4];
        }
        h
    }

    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(INEQ * self.n, self.dim());
        let (mp, w) = (self.mp, self.omega_r);
        let circle = (self.u_s / self.cfg.i_peak).powi(2);
        for k in 0..self.n {
            let b = STAGE * k;
            let r = INEQ * k;
            let (v, _) = self.state(z, k);
            let (i_d, i_q) = self.input(z, k);
            j[(r, b)] = -2.0 * circle * z[b];
            j[(r, b + 1)] = -2.0 * circle * z[b + 1];
            j[(r + 1, b)] = -2.0 * (w * mp.l_d * i_d + w * mp.lambda_m) * w * mp.l_d * self.u_s / self.ell_s;
            j[(r + 1, b + 1)] = -2.0 * (w * mp.l_q * i_q) * w * mp.l_q * self.u_s / self.ell_s;
            if k > 0 {
                j[(r + 1, STAGE * (k - 1) + 2)] = 2.0 * (v * self.v_s / 2.0) * (self.v_s / 2.0) / self.ell_s;
            }
            j[(r + 2, b + 2)] = 1.0;
            j[(r + 2, b + 4)] = 1.0;
            j[(r + 3, b + 2)] = -1.0;
            j[(r + 3, b + 4)] = 1.0;
            j[(r + 4, b + 4)] = 1.0;
        }
        j
    }

    fn initial_hessian(&self, _: &DVector<f64>) -> DMatrix<f64> {
        let (wv, we, wd, wq) = self.weights();
        let sq = self.cfg.slack_weights[1];
        let mut h = DMatrix::zeros(self.dim(), self.dim());
        for k in 0..self.n {
            let b = STAGE * k;
            h[(b, b)] = 2.0 * wd;
            h[(b + 1, b + 1)] = 2.0 * wq;
            h[(b + 2, b + 2)] = 2.0 * wv;
            h[(b + 3, b + 3)] = (2.0 * we).max(1e-3);
            h[(b + 4, b + 4)] = (2.0 * sq).max(1.0);
        }
        h
    }
}

/// Solves the horizon problem from `x0` with the load current held constant
/// over the horizon. `warm_start` supplies the initial input sequence (already
/// shifted by the caller); states are re-simulated from `x0`.
pub fn build_and_solve_ocp(
    x0: ReducedState,
    i_load_forecast: f64,
    omega_r: f64,
    cfg: &NmpcConfig,
    mp: &MachineParams,
    dp: &DcLinkParams,
    warm_start: Option<&OcpSolution>,
) -> Result<OcpSolution> {
    cfg.validate()?;
    if !(x0.v_dc > dp.v_floor) {
        return Err(Error::NonPositiveVoltage { v_dc: x0.v_dc, floor: dp.v_floor });
    }
    if !x0.e_int.is_finite() || !i_load_forecast.is_finite() || !omega_r.is_finite() {
        return Err(Error::InvalidParameter("NMPC inputs must be finite".into()));
    }
    let prob = Problem::new(x0, i_load_forecast, omega_r, cfg, mp, dp);
    let u0: Vec<(f64, f64)> = match warm_start {
        Some(w) if !w.u_sequence.is_empty() => w.u_sequence.clone(),
        _ => vec![(0.0, 0.0); cfg.horizon_n],
    };
    let z0 = prob.initial_guess(&u0);
    let opts = SqpOptions { max_iters: cfg.max_sqp_iters, kkt_tol: cfg.kkt_tol, ..SqpOptions::default() };
    let r = sqp::solve(&prob, z0, &opts);
    if r.status == SqpStatus::InvalidStart {
        return Err(Error::NonPositiveVoltage { v_dc: x0.v_dc, floor: dp.v_floor });
    }
    let z = &r.z;
    let n = cfg.horizon_n;
    let mut u_sequence = Vec::with_capacity(n);
    let mut x_sequence = Vec::with_capacity(n + 1);
    let mut slacks = Vec::with_capacity(n);
    x_sequence.push(x0);
    for k in 0..n {
        let b = STAGE * k;
        u_sequence.push(prob.input(z, k));
        x_sequence.push(ReducedState { v_dc: z[b + 2] * prob.v_s, e_int: z[b + 3] * prob.e_s });
        slacks.push(z[b + 4] * prob.v_s);
    }
    let h = prob.ineq(z);
    let tol = 1e-6;
    let active = |row: usize| h[row] <= tol || r.mu_in.get(row).is_some_and(|&m| m > tol);
    Ok(OcpSolution {
        u_sequence,
        x_sequence,
        slacks,
        cost: r.objective,
        kkt_residual: r.kkt_residual,
        primal_infeasibility: r.primal_infeasibility,
        iterations: r.iterations,
        converged: r.converged(),
        relaxed: r.relaxed,
        circle_active: active(0),
        ellipse_active: active(1),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn finite_difference_check(prob: &Problem<'_>, z: &DVector<f64>) {
        let h = 1e-7;
        let g = prob.gradient(z);
        let je = prob.eq_jacobian(z);
        let ji = prob.ineq_jacobian(z);
        for i in 0..z.len() {
            let mut zp = z.clone();
            let mut zm = z.clone();
            zp[i] += h;
            zm[i] -= h;
            let fd = (prob.objective(&zp) - prob.objective(&zm)) / (2.0 * h);
            assert!((fd - g[i]).abs() < 1e-5 * (1.0 + g[i].abs()), "grad {i}: {fd} vs {}", g[i]);
            let ce = (prob.eq(&zp) - prob.eq(&zm)) / (2.0 * h);
            let ci = (prob.ineq(&zp) - prob.ineq(&zm)) / (2.0 * h);
            for r in 0..ce.len() {
                assert!((ce[r] - je[(r, i)]).abs() < 1e-5 * (1.0 + je[(r, i)].abs()), "eq ({r},{i})");
            }
            for r in 0..ci.len() {
                assert!((ci[r] - ji[(r, i)]).abs() < 1e-5 * (1.0 + ji[(r, i)].abs()), "ineq ({r},{i})");
            }
        }
    }

    #[test]
    fn derivatives_match_finite_differences() {
        let mp = MachineParams::bmw_i3();
        let dp = DcLinkParams::default();
        let cfg = NmpcConfig { horizon_n: 4, ..NmpcConfig::new(&mp, &dp) };
        let omega = crate::machine::rpm_to_electrical(7000.0, mp.poles).1;
        let x0 = ReducedState { v_dc: 530.0, e_int: 0.05 };
        let prob = Problem::new(x0, 80.0, omega, &cfg, &mp, &dp);
        let mut z = prob.initial_guess(&[(-60.0, -130.0), (-70.0, -140.0), (-80.0, -150.0), (-90.0, -160.0)]);
        for k in 0..4 {
            z[STAGE * k + 4] = 0.01 * k as f64;
        }
        finite_difference_check(&prob, &z);
    }
}
