//! Per-segment summary of a closed-loop run.

use serde::Serialize;

use super::{operating_point_optimum, Scenario, Trace, TraceRow};
use crate::error::{Error, Result};
use crate::machine::rpm_to_electrical;

/// Fraction of each segment, at its end, treated as steady state.
pub const STEADY_FRACTION: f64 = 0.2;
/// Half-width of the settling band relative to the voltage reference.
pub const SETTLING_BAND: f64 = 0.01;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SegmentMetrics {
    pub t_start: f64,
    pub t_end: f64,
    pub p_load: f64,
    pub speed_rpm: f64,
    /// Mean `(i_d, i_q)` over the steady window (A).
    pub i_d: f64,
    pub i_q: f64,
    pub v_dc_mean: f64,
    /// Time after the segment start from which `v_dc` stays in the ±1 % band;
    /// `None` if it never does.
    pub settling_time: Option<f64>,
    pub v_dc_min: f64,
    pub v_dc_max: f64,
    /// Rms phase current over the steady window (A).
    pub i_rms: f64,
    /// Static optimum at the same load and speed.
    pub optimum: (f64, f64),
    /// `‖(i_d, i_q)‖ / ‖optimum‖`
    pub optimality_ratio: f64,
    /// `((ω L_q i_q)² + (ω L_d i_d + ω λ)²) / (v_dc/2)² − 1` at the steady means.
    pub ellipse_residual: f64,
    /// Largest clipped phase duty over the segment and over its steady window.
    pub d_abc_peak: f64,
    pub d_abc_peak_steady: f64,
    /// Mean power into the bridge from the machine, `−(3/2)(v_d i_d + v_q i_q)` (W).
    pub p_ac: f64,
    /// Mean dc-side consumption `v_dc i_L + v_dc²/R` (W).
    pub p_dc: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Metrics {
    pub scenario: String,
    pub v_dc_min: f64,
    pub v_dc_max: f64,
    pub nmpc_solves: usize,
    pub nmpc_mean_iterations: f64,
    pub nmpc_max_iterations: usize,
    pub nmpc_fallbacks: usize,
    pub nmpc_relaxed: usize,
    pub nmpc_unconverged: usize,
    pub saturated_samples: usize,
    pub segments: Vec<SegmentMetrics>,
}

fn mean(rows: &[TraceRow], f: impl Fn(&TraceRow) -> f64) -> f64 {
    rows.iter().map(f).sum::<f64>() / rows.len() as f64
}

fn peak(rows: &[TraceRow]) -> f64 {
    rows.iter().flat_map(|r| r.d_abc).fold(0.0, |m: f64, d| m.max(d.abs()))
}

/// Segment boundaries: every load or speed switch time inside the run.
pub fn segment_bounds(sc: &Scenario) -> Vec<(f64, f64)> {
    let mut cuts: Vec<f64> = sc.load_w.breakpoints(sc.duration).chain(sc.speed_rpm.breakpoints(sc.duration)).collect();
    cuts.sort_by(f64::total_cmp);
    cuts.dedup_by(|a, b| (*a - *b).abs() < 1e-12);
    let mut bounds = Vec::with_capacity(cuts.len() + 1);
    let mut start = 0.0;
    for c in cuts {
        bounds.push((start, c));
        start = c;
    }
    bounds.push((start, sc.duration));
    bounds
}

pub fn compute_metrics(trace: &Trace, sc: &Scenario) -> Result<Metrics> {
    let mp = &sc.machine;
    let dp = &sc.dc_link;
    let v_ref = sc.nmpc.v_dc_ref;
    let eps = 1e-9;
    let mut segments = Vec::new();
    for (index, (t0, t1)) in segment_bounds(sc).into_iter().enumerate() {
        let rows: Vec<TraceRow> = trace.rows.iter().filter(|r| r.t >= t0 - eps && r.t < t1 - eps).copied().collect();
        let steady_from = t1 - STEADY_FRACTION * (t1 - t0);
        let steady: Vec<TraceRow> = rows.iter().filter(|r| r.t >= steady_from - eps).copied().collect();
        if steady.len() < 2 {
            return Err(Error::SegmentTooShort { segment: index });
        }
        let in_band = |r: &TraceRow| (r.v_dc - v_ref).abs() <= SETTLING_BAND * v_ref;
        let settling_time = match rows.iter().rposition(|r| !in_band(r)) {
            None => Some(0.0),
            Some(i) if i + 1 < rows.len() => Some(rows[i + 1].t - t0),
            Some(_) => None,
        };
        let p_load = sc.load_w.value_at(t0);
        let speed_rpm = sc.speed_rpm.value_at(t0);
        let w = rpm_to_electrical(speed_rpm, mp.poles).1;
        let i_d = mean(&steady, |r| r.i_d);
        let i_q = mean(&steady, |r| r.i_q);
        let v_mean = mean(&steady, |r| r.v_dc);
        let optimum = operating_point_optimum(p_load, w, mp, dp)?;
        let opt_norm = optimum.0.hypot(optimum.1);
        let optimality_ratio = if opt_norm > 0.0 { i_d.hypot(i_q) / opt_norm } else { f64::NAN };
        let ellipse = (w * mp.l_q * i_q).powi(2) + (w * mp.l_d * i_d + w * mp.lambda_m).powi(2);
        let p_ac = mean(&steady, |r| {
            let (v_d, v_q) = (r.d_d * r.v_dc / 2.0, r.d_q * r.v_dc / 2.0);
            -1.5 * (v_d * r.i_d + v_q * r.i_q)
        });
        let p_dc = mean(&steady, |r| r.v_dc * r.i_load + r.v_dc * r.v_dc / dp.r);
        segments.push(SegmentMetrics {
            t_start: t0,
            t_end: t1,
            p_load,
            speed_rpm,
            i_d,
            i_q,
            v_dc_mean: v_mean,
            settling_time,
            v_dc_min: rows.iter().map(|r| r.v_dc).fold(f64::INFINITY, f64::min),
            v_dc_max: rows.iter().map(|r| r.v_dc).fold(f64::NEG_INFINITY, f64::max),
            i_rms: (mean(&steady, |r| r.i_abc.iter().map(|i| i * i).sum::<f64>()) / 3.0).sqrt(),
            optimum,
            optimality_ratio,
            ellipse_residual: ellipse / (v_mean / 2.0).powi(2) - 1.0,
            d_abc_peak: peak(&rows),
            d_abc_peak_steady: peak(&steady),
            p_ac,
            p_dc,
        });
    }
    let solves: Vec<&TraceRow> = trace.rows.iter().filter(|r| r.nmpc_solved).collect();
    let n_solves = solves.len();
    Ok(Metrics {
        scenario: sc.name.clone(),
        v_dc_min: trace.rows.iter().map(|r| r.v_dc).fold(f64::INFINITY, f64::min),
        v_dc_max: trace.rows.iter().map(|r| r.v_dc).fold(f64::NEG_INFINITY, f64::max),
        nmpc_solves: n_solves,
        nmpc_mean_iterations: if n_solves == 0 {
            0.0
        } else {
            solves.iter().map(|r| r.nmpc.iterations as f64).sum::<f64>() / n_solves as f64
        },
        nmpc_max_iterations: solves.iter().map(|r| r.nmpc.iterations).max().unwrap_or(0),
        nmpc_fallbacks: solves.iter().filter(|r| r.nmpc.fallback).count(),
        nmpc_relaxed: solves.iter().filter(|r| r.nmpc.relaxed).count(),
        nmpc_unconverged: solves.iter().filter(|r| !r.nmpc.converged && !r.nmpc.fallback).count(),
        saturated_samples: trace.rows.iter().filter(|r| r.saturated).count(),
        segments,
    })
}
