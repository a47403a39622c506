//! Minimum-current operating point for a prescribed electrical power.
//!
//! ```text
//!   min  i_d² + i_q²
//!   s.t. (3/2)ω_r i_q (λ_m + (L_d − L_q) i_d) = P_e
//!        i_d² + i_q² ≤ I_peak²
//!        (ω_r L_q i_q)² + (ω_r L_d i_d + ω_r λ_m)² ≤ (v_dc/2)²
//! ```
//!
//! The power equality is affine in `i_q`, so the problem reduces to one
//! variable. On each side of the singular current `i_d = −λ_m/(L_d − L_q)` the
//! reduced objective and both reduced constraints are convex, which makes the
//! feasible set an interval and the objective unimodal on it.

use serde::{Deserialize, Serialize};

use crate::error::{ensure, Result};
use crate::machine::MachineParams;

/// Half-width of the excluded band around the singular `i_d`, in V·s of
/// effective flux `λ_m + (L_d − L_q) i_d`.
pub const FLUX_GUARD: f64 = 1e-3;

/// Relative width of the constraint boundary band.
pub const BOUNDARY_TOL: f64 = 1e-6;

const GOLDEN: f64 = 0.618_033_988_749_894_8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticProblem {
    /// Electrical power (W), negative while generating.
    pub p_e: f64,
    pub omega_r: f64,
    pub v_dc: f64,
    pub mp: MachineParams,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ActiveConstraints {
    pub current_circle: bool,
    pub voltage_ellipse: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StaticSolution {
    pub i_d: f64,
    pub i_q: f64,
    pub norm_sq: f64,
    pub active: ActiveConstraints,
    pub feasible: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Region {
    Interior,
    Boundary,
    Exterior,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Membership {
    pub current: Region,
    pub voltage: Region,
}

impl Membership {
    pub fn inside(&self) -> bool {
        self.current != Region::Exterior && self.voltage != Region::Exterior
    }
}

impl StaticProblem {
    pub fn validate(&self) -> Result<()> {
        self.mp.validate()?;
        ensure(self.omega_r > 0.0 && self.omega_r.is_finite(), || {
            format!("electrical speed must be positive, got {}", self.omega_r)
        })?;
        ensure(self.v_dc > 0.0 && self.v_dc.is_finite(), || format!("v_dc must be positive, got {}", self.v_dc))?;
        ensure(self.p_e.is_finite(), || "power must be finite".into())
    }

    pub fn power(&self, i_d: f64, i_q: f64) -> f64 {
        crate::machine::electrical_power(i_d, i_q, self.omega_r, &self.mp)
    }

    /// Effective flux `λ_m + (L_d − L_q) i_d`.
    fn flux(&self, i_d: f64) -> f64 {
        self.mp.lambda_m + self.mp.saliency() * i_d
    }

    /// The `i_q` that delivers `p_e` at a given `i_d`.
    pub fn i_q_for(&self, i_d: f64) -> f64 {
        self.p_e / (1.5 * self.omega_r * self.flux(i_d))
    }

    /// `(lhs, rhs)` of the current circle.
    pub fn current_circle(&self, i_d: f64, i_q: f64) -> (f64, f64) {
        (i_d * i_d + i_q * i_q, self.mp.i_peak * self.mp.i_peak)
    }

    /// `(lhs, rhs)` of the voltage ellipse, stator resistance neglected.
    pub fn voltage_ellipse(&self, i_d: f64, i_q: f64) -> (f64, f64) {
        let w = self.omega_r;
        let vd = w * self.mp.l_q * i_q;
        let vq = w * (self.mp.l_d * i_d + self.mp.lambda_m);
        (vd * vd + vq * vq, 0.25 * self.v_dc * self.v_dc)
    }

    /// Voltage ellipse with the resistive drop kept, for sensitivity checks.
    pub fn voltage_ellipse_with_resistance(&self, i_d: f64, i_q: f64) -> (f64, f64) {
        let (vd, vq) = steady_stator_voltage(i_d, i_q, self.omega_r, &self.mp);
        (vd * vd + vq * vq, 0.25 * self.v_dc * self.v_dc)
    }

    fn feasible_point(&self, i_d: f64, i_q: f64) -> bool {
        let (c, cr) = self.current_circle(i_d, i_q);
        let (v, vr) = self.voltage_ellipse(i_d, i_q);
        c <= cr * (1.0 + BOUNDARY_TOL) && v <= vr * (1.0 + BOUNDARY_TOL)
    }

    fn solution(&self, i_d: f64, i_q: f64, feasible: bool) -> StaticSolution {
        let m = constraint_set_membership(i_d, i_q, self);
        StaticSolution {
            i_d,
            i_q,
            norm_sq: i_d * i_d + i_q * i_q,
            active: ActiveConstraints {
                current_circle: m.current == Region::Boundary,
                voltage_ellipse: m.voltage == Region::Boundary,
            },
            feasible,
        }
    }
}

/// Stator voltages that hold `(i_d, i_q)` constant, resistance included.
pub fn steady_stator_voltage(i_d: f64, i_q: f64, omega_r: f64, mp: &MachineParams) -> (f64, f64) {
    (
        mp.r_s * i_d - omega_r * mp.l_q * i_q,
        mp.r_s * i_q + omega_r * mp.l_d * i_d + omega_r * mp.lambda_m,
    )
}

fn classify(lhs: f64, rhs: f64) -> Region {
    if (lhs - rhs).abs() <= BOUNDARY_TOL * rhs {
        Region::Boundary
    } else if lhs < rhs {
        Region::Interior
    } else {
        Region::Exterior
    }
}

/// Classifies a point against the current circle and the voltage ellipse.
pub fn constraint_set_membership(i_d: f64, i_q: f64, prob: &StaticProblem) -> Membership {
    let (c, cr) = prob.current_circle(i_d, i_q);
    let (v, vr) = prob.voltage_ellipse(i_d, i_q);
    Membership { current: classify(c, cr), voltage: classify(v, vr) }
}

/// Golden-section minimization of a unimodal function on `[lo, hi]`.
pub fn golden_section<F: FnMut(f64) -> f64>(mut f: F, mut lo: f64, mut hi: f64, tol: f64) -> f64 {
    let mut x1 = hi - GOLDEN * (hi - lo);
    let mut x2 = lo + GOLDEN * (hi - lo);
    let mut f1 = f(x1);
    let mut f2 = f(x2);
    while hi - lo > tol {
        if f1 <= f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - GOLDEN * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + GOLDEN * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

/// Root of `f` in `[a, b]` given `f(a) <= 0 < f(b)` or the reverse.
fn bisect<F: Fn(f64) -> f64>(f: F, mut a: f64, mut b: f64) -> f64 {
    let mut fa = f(a);
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if m == a || m == b {
            break;
        }
        let fm = f(m);
        if (fm <= 0.0) == (fa <= 0.0) {
            a = m;
            fa = fm;
        } else {
            b = m;
        }
    }
    // return the side that satisfies the constraint
    if fa <= 0.0 {
        a
    } else {
        b
    }
}

/// Sub-interval of `[lo, hi]` where the convex function `h` is non-positive.
fn sublevel_interval<F: Fn(f64) -> f64>(h: F, lo: f64, hi: f64) -> Option<(f64, f64)> {
    let x_min = golden_section(&h, lo, hi, 1e-10 * (1.0 + hi.abs().max(lo.abs())));
    if h(x_min) > 0.0 {
        return None;
    }
    let left = if h(lo) <= 0.0 { lo } else { bisect(&h, x_min, lo) };
    let right = if h(hi) <= 0.0 { hi } else { bisect(&h, x_min, hi) };
    Some((left, right))
}

/// Branches of `i_d` on which the effective flux keeps one sign.
fn branches(prob: &StaticProblem) -> Vec<(f64, f64)> {
    let i_max = prob.mp.i_peak;
    let s = prob.mp.saliency();
    if s == 0.0 {
        return vec![(-i_max, i_max)];
    }
    let root = -prob.mp.lambda_m / s;
    let guard = FLUX_GUARD / s.abs();
    let mut out = Vec::with_capacity(2);
    if root - guard > -i_max {
        out.push((-i_max, (root - guard).min(i_max)));
    }
    if root + guard < i_max {
        out.push(((root + guard).max(-i_max), i_max));
    }
    out
}

/// Global minimum-norm currents delivering `p_e` inside the constraint set.
///
/// An unreachable power request returns the reachable point closest to it
/// with `feasible = false`.
pub fn solve_static(prob: &StaticProblem) -> Result<StaticSolution> {
    prob.validate()?;
    let i_pk2 = prob.mp.i_peak * prob.mp.i_peak;
    let mut best: Option<StaticSolution> = None;
    for (lo, hi) in branches(prob) {
        let norm = |i_d: f64| {
            let i_q = prob.i_q_for(i_d);
            i_d * i_d + i_q * i_q
        };
        let circle = |i_d: f64| (norm(i_d) - i_pk2) / i_pk2;
        let ellipse = |i_d: f64| {
            let (l, r) = prob.voltage_ellipse(i_d, prob.i_q_for(i_d));
            (l - r) / r
        };
        let Some((a1, b1)) = sublevel_interval(circle, lo, hi) else { continue };
        let Some((a2, b2)) = sublevel_interval(ellipse, lo, hi) else { continue };
        let (a, b) = (a1.max(a2), b1.min(b2));
        if a > b {
            continue;
        }
        let mut i_d = golden_section(norm, a, b, 1e-9 * (1.0 + b.abs().max(a.abs())));
        i_d = polish_interior(prob, i_d, a, b);
        let i_q = prob.i_q_for(i_d);
        let cand = prob.solution(i_d, i_q, true);
        best = Some(match best {
            None => cand,
            Some(prev) => pick(prob, prev, cand),
        });
    }
    match best {
        Some(sol) => Ok(sol),
        None => Ok(best_effort(prob)),
    }
}

/// Newton on the stationarity condition of the reduced objective.
fn polish_interior(prob: &StaticProblem, i_d0: f64, a: f64, b: f64) -> f64 {
    let s = prob.mp.saliency();
    let k = prob.p_e / (1.5 * prob.omega_r);
    let mut i_d = i_d0;
    for _ in 0..20 {
        let m = prob.flux(i_d);
        let i_q = k / m;
        let dq = -k * s / (m * m);
        let ddq = 2.0 * k * s * s / (m * m * m);
        let g1 = 2.0 * i_d + 2.0 * i_q * dq;
        let g2 = 2.0 + 2.0 * dq * dq + 2.0 * i_q * ddq;
        if g2 <= 0.0 {
            break;
        }
        let next = i_d - g1 / g2;
        if !(a..=b).contains(&next) {
            // stationary point lies outside: the optimum is the interval end
            return i_d0;
        }
        let done = (next - i_d).abs() <= 1e-13 * (1.0 + i_d.abs());
        i_d = next;
        if done {
            break;
        }
    }
    i_d
}

fn pick(prob: &StaticProblem, a: StaticSolution, b: StaticSolution) -> StaticSolution {
    let scale = a.norm_sq.max(b.norm_sq).max(1.0);
    if (a.norm_sq - b.norm_sq).abs() <= 1e-9 * scale {
        let sign = (prob.p_e / prob.omega_r).signum();
        if b.i_q.signum() == sign && a.i_q.signum() != sign {
            return b;
        }
        return a;
    }
    if b.norm_sq < a.norm_sq {
        b
    } else {
        a
    }
}

/// Largest `i_q` magnitude allowed at `i_d` by both constraints, or `None`
/// when `i_d` itself is outside the set.
fn i_q_limit(prob: &StaticProblem, i_d: f64) -> Option<f64> {
    let c = prob.mp.i_peak * prob.mp.i_peak - i_d * i_d;
    let w = prob.omega_r;
    let vq = w * (prob.mp.l_d * i_d + prob.mp.lambda_m);
    let e = 0.25 * prob.v_dc * prob.v_dc - vq * vq;
    if c < 0.0 || e < 0.0 {
        return None;
    }
    Some(c.sqrt().min(e.sqrt() / (w * prob.mp.l_q)))
}

/// Point of the constraint set whose power is closest to the request.
fn best_effort(prob: &StaticProblem) -> StaticSolution {
    let i_max = prob.mp.i_peak;
    let sign = if prob.p_e >= 0.0 { 1.0 } else { -1.0 };
    // signed power reachable at i_d, pushing |i_q| to its limit
    let reach = |i_d: f64| -> Option<(f64, f64)> {
        let lim = i_q_limit(prob, i_d)?;
        let flux = prob.flux(i_d);
        let i_q = if flux * sign >= 0.0 { lim } else { -lim };
        Some((i_q, prob.power(i_d, i_q)))
    };
    let n = 4000;
    let mut best: Option<(f64, f64, f64)> = None;
    for j in 0..=n {
        let i_d = -i_max + 2.0 * i_max * j as f64 / n as f64;
        if let Some((i_q, p)) = reach(i_d) {
            if best.is_none_or(|(_, _, bp)| sign * p > sign * bp) {
                best = Some((i_d, i_q, p));
            }
        }
    }
    let Some((i_d0, _, _)) = best else {
        // empty set: least ellipse violation on the d axis
        let i_d = (-prob.mp.lambda_m / prob.mp.l_d).clamp(-i_max, i_max);
        return prob.solution(i_d, 0.0, false);
    };
    let h = 2.0 * i_max / n as f64;
    let (lo, hi) = ((i_d0 - h).max(-i_max), (i_d0 + h).min(i_max));
    let i_d = golden_section(|x| reach(x).map_or(f64::INFINITY, |(_, p)| -sign * p), lo, hi, 1e-9);
    let (i_q, _) = reach(i_d).unwrap_or((0.0, 0.0));
    prob.solution(i_d, i_q, false)
}

/// Exhaustive reference: scan `i_d` on a grid, solve the power equality for
/// `i_q`, keep the feasible candidate of least norm.
pub fn brute_force_oracle(prob: &StaticProblem, grid_step: f64) -> Result<StaticSolution> {
    prob.validate()?;
    ensure(grid_step > 0.0, || format!("grid step must be positive, got {grid_step}"))?;
    let i_max = prob.mp.i_peak;
    let n = (2.0 * i_max / grid_step).round() as i64;
    let mut best: Option<(f64, f64, f64)> = None;
    for j in 0..=n {
        let i_d = -i_max + j as f64 * grid_step;
        let flux = prob.mp.lambda_m + prob.mp.saliency() * i_d;
        if flux.abs() < FLUX_GUARD {
            continue;
        }
        let i_q = prob.p_e / (1.5 * prob.omega_r * flux);
        if !prob.feasible_point(i_d, i_q) {
            continue;
        }
        let n2 = i_d * i_d + i_q * i_q;
        if best.is_none_or(|(_, _, b)| n2 < b) {
            best = Some((i_d, i_q, n2));
        }
    }
    Ok(match best {
        Some((i_d, i_q, _)) => prob.solution(i_d, i_q, true),
        None => best_effort(prob),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::machine::rpm_to_electrical;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn problem(p_e: f64, rpm: f64, v_dc: f64) -> StaticProblem {
        let mp = MachineParams::bmw_i3();
        StaticProblem { p_e, omega_r: rpm_to_electrical(rpm, mp.poles).1, v_dc, mp }
    }

    #[test]
    fn light_load_optimum() {
        let s = solve_static(&problem(-43.5e3, 7000.0, 540.0)).unwrap();
        assert!(s.feasible);
        assert!((s.i_d + 62.0).abs() <= 1.0 && (s.i_q + 135.3).abs() <= 1.0, "{s:?}");
        assert_eq!(s.active, ActiveConstraints::default());
    }

    #[test]
    fn heavy_load_optimum() {
        let s = solve_static(&problem(-62.25e3, 7000.0, 540.0)).unwrap();
        assert!((s.i_d + 93.5).abs() <= 1.0 && (s.i_q + 174.9).abs() <= 1.0, "{s:?}");
    }

    #[test]
    fn zero_power_is_zero_current() {
        let p = problem(0.0, 7000.0, 540.0);
        let s = solve_static(&p).unwrap();
        assert!(s.i_d.abs() < 1e-6 && s.i_q == 0.0 && s.norm_sq < 1e-12);
        let o = brute_force_oracle(&p, 0.5).unwrap();
        assert_eq!((o.i_d, o.i_q), (0.0, 0.0));
    }

    #[test]
    fn kkt_ratio_at_light_load_point() {
        // i_d / i_q = (L_d − L_q) i_q / (λ_m + (L_d − L_q) i_d) at an interior optimum
        let mp = MachineParams::bmw_i3();
        let (i_d, i_q) = (-62.0, -135.3);
        let lhs = i_d / i_q;
        let rhs = mp.saliency() * i_q / (mp.lambda_m + mp.saliency() * i_d);
        assert_relative_eq!(lhs, 0.458, epsilon = 2e-3);
        assert_relative_eq!(rhs, 0.458, epsilon = 2e-3);
        let s = solve_static(&problem(-43.5e3, 7000.0, 540.0)).unwrap();
        let lhs = s.i_d / s.i_q;
        let rhs = mp.saliency() * s.i_q / (mp.lambda_m + mp.saliency() * s.i_d);
        assert_relative_eq!(lhs, rhs, max_relative = 1e-6);
    }

    #[test]
    fn pulse_peak_binds_voltage_ellipse() {
        let p = problem(-81e3, 8000.0, 540.0);
        let s = solve_static(&p).unwrap();
        assert!(s.feasible && s.active.voltage_ellipse && !s.active.current_circle, "{s:?}");
        // flux weakening: more negative i_d than the unconstrained optimum
        let free = solve_static(&StaticProblem { v_dc: 1e4, ..p }).unwrap();
        assert!(s.i_d < free.i_d - 5.0);
        assert_relative_eq!(p.power(s.i_d, s.i_q), -81e3, max_relative = 1e-9);
    }

    #[test]
    fn membership_examples() {
        let p = problem(0.0, 8000.0, 540.0);
        let m = constraint_set_membership(0.0, 0.0, &p);
        assert_eq!(m, Membership { current: Region::Interior, voltage: Region::Interior });
        let (lhs, _) = p.voltage_ellipse(0.0, 0.0);
        assert_relative_eq!(lhs.sqrt(), 193.5, epsilon = 0.1);
        let m = constraint_set_membership(400.0, 0.0, &p);
        assert_eq!(m.current, Region::Boundary);
        assert_eq!(constraint_set_membership(0.0, 401.0, &p).current, Region::Exterior);
    }

    #[test]
    fn unreachable_power_reports_best_effort() {
        let p = problem(-300e3, 7000.0, 540.0);
        let s = solve_static(&p).unwrap();
        assert!(!s.feasible);
        assert!(constraint_set_membership(s.i_d, s.i_q, &p).inside());
        assert!(s.active.current_circle || s.active.voltage_ellipse);
        assert!(p.power(s.i_d, s.i_q) < -100e3);
        // no grid point does better
        let o = brute_force_oracle(&p, 1.0).unwrap();
        assert!(!o.feasible);
    }

    #[test]
    fn rejects_bad_problems() {
        assert!(solve_static(&problem(-1e3, 0.0, 540.0)).is_err());
        assert!(brute_force_oracle(&problem(-1e3, 7000.0, 540.0), 0.0).is_err());
    }

    #[test]
    fn monotone_q_current_in_power() {
        let mut last = 0.0;
        for k in 1..=20 {
            let s = solve_static(&problem(-3e3 * k as f64, 6000.0, 540.0)).unwrap();
            assert!(s.feasible);
            if s.active.voltage_ellipse || s.active.current_circle {
                break;
            }
            assert!(s.i_q.abs() > last);
            last = s.i_q.abs();
        }
    }

    #[test]
    fn golden_section_quadratic() {
        let x = golden_section(|x| (x - 1.234).powi(2), -10.0, 10.0, 1e-10);
        assert_relative_eq!(x, 1.234, epsilon = 1e-9);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(40))]
        #[test]
        fn matches_oracle(p in -125e3..125e3f64, rpm in 1000.0..11000.0f64, v in 420.0..670.0f64) {
            let prob = problem(p, rpm, v);
            let s = solve_static(&prob).unwrap();
            let o = brute_force_oracle(&prob, 0.25).unwrap();
            prop_assert_eq!(s.feasible, o.feasible);
            if s.feasible {
                prop_assert!((s.i_d - o.i_d).abs() <= 1.0 && (s.i_q - o.i_q).abs() <= 1.0,
                    "solver {:?} oracle {:?}", s, o);
                prop_assert!((prob.power(s.i_d, s.i_q) - p).abs() < 1.0);
            }
        }
    }
}
