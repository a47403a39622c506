//! Sequential quadratic programming with damped BFGS and an ℓ₁ merit line search.

use nalgebra::{DMatrix, DVector};

use super::qp::{solve_qp, QpError, QpProblem, QpSolution};

/// Smooth NLP `min f(z)  s.t. c(z) = 0, h(z) >= 0`.
pub trait Nlp {
    fn dim(&self) -> usize;
    /// Whether the model can be evaluated at `z` (e.g. the dc voltage is above the floor).
    fn is_valid(&self, z: &DVector<f64>) -> bool;
    fn objective(&self, z: &DVector<f64>) -> f64;
    fn gradient(&self, z: &DVector<f64>) -> DVector<f64>;
    fn eq(&self, z: &DVector<f64>) -> DVector<f64>;
    fn eq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;
    fn ineq(&self, z: &DVector<f64>) -> DVector<f64>;
    fn ineq_jacobian(&self, z: &DVector<f64>) -> DMatrix<f64>;
    /// Positive definite starting Hessian approximation.
    fn initial_hessian(&self, z: &DVector<f64>) -> DMatrix<f64>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SqpOptions {
    pub max_iters: usize,
    pub kkt_tol: f64,
    /// ℓ₁ penalty on inequality violation in the elastic fallback QP.
    pub elastic_penalty: f64,
    pub max_qp_iters: usize,
}

impl Default for SqpOptions {
    fn default() -> Self {
        Self { max_iters: 100, kkt_tol: 1e-6, elastic_penalty: 1e3, max_qp_iters: 500 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SqpStatus {
    Converged,
    MaxIterations,
    LineSearchFailed,
    QpFailed,
    InvalidStart,
}

#[derive(Debug, Clone)]
pub struct SqpResult {
    pub z: DVector<f64>,
    pub lambda_eq: DVector<f64>,
    pub mu_in: DVector<f64>,
    pub objective: f64,
    pub kkt_residual: f64,
    pub primal_infeasibility: f64,
    pub iterations: usize,
    pub status: SqpStatus,
    /// An elastic (constraint-relaxed) subproblem was used at some iteration.
    pub relaxed: bool,
}

impl SqpResult {
    pub fn converged(&self) -> bool {
        self.status == SqpStatus::Converged
    }
}

struct Eval {
    f: f64,
    g: DVector<f64>,
    c: DVector<f64>,
    jc: DMatrix<f64>,
    h: DVector<f64>,
    jh: DMatrix<f64>,
}

impl Eval {
    fn new(nlp: &impl Nlp, z: &DVector<f64>) -> Self {
        Self {
            f: nlp.objective(z),
            g: nlp.gradient(z),
            c: nlp.eq(z),
            jc: nlp.eq_jacobian(z),
            h: nlp.ineq(z),
            jh: nlp.ineq_jacobian(z),
        }
    }

    fn violation(&self) -> f64 {
        violation(&self.c, &self.h)
    }

    fn infeasibility(&self) -> f64 {
        let ce = self.c.amax();
        let hi = self.h.iter().fold(0.0f64, |m, &v| m.max(-v));
        ce.max(hi)
    }

    fn lagrangian_gradient(&self, lambda: &DVector<f64>, mu: &DVector<f64>) -> DVector<f64> {
        &self.g - self.jc.tr_mul(lambda) - self.jh.tr_mul(mu)
    }

    fn kkt(&self, lambda: &DVector<f64>, mu: &DVector<f64>) -> f64 {
        let scale = self.g.amax().max(1.0);
        let stat = self.lagrangian_gradient(lambda, mu).amax() / scale;
        let comp = self.h.iter().zip(mu.iter()).fold(0.0f64, |m, (h, u)| m.max((h * u).abs())) / scale;
        let dual = mu.iter().fold(0.0f64, |m, &u| m.max(-u));
        stat.max(self.infeasibility()).max(comp).max(dual)
    }
}

fn violation(c: &DVector<f64>, h: &DVector<f64>) -> f64 {
    c.iter().map(|v| v.abs()).sum::<f64>() + h.iter().map(|v| (-v).max(0.0)).sum::<f64>()
}

/// Solves the QP subproblem; if it is infeasible, falls back to an elastic
/// version in which every inequality gets a nonnegative relaxation variable.
fn subproblem(
    b: &DMatrix<f64>,
    ev: &Eval,
    opts: &SqpOptions,
) -> Result<(QpSolution, bool), QpError> {
    let neg_c = -&ev.c;
    let neg_h = -&ev.h;
    let qp = QpProblem { h: b, g: &ev.g, a_eq: &ev.jc, b_eq: &neg_c, a_in: &ev.jh, b_in: &neg_h };
    match solve_qp(&qp, opts.max_qp_iters) {
        Ok(s) => return Ok((s, false)),
        Err(QpError::Infeasible) | Err(QpError::MaxIterations) => {}
        Err(e) => return Err(e),
    }
    let n = ev.g.len();
    let mi = ev.h.len();
    let me = ev.c.len();
    let nn = n + mi;
    let mut hb = DMatrix::zeros(nn, nn);
    hb.view_mut((0, 0), (n, n)).copy_from(b);
    let reg = 1e-6 * b.diagonal().amax().max(1.0);
    for i in n..nn {
        hb[(i, i)] = reg;
    }
    let mut gb = DVector::zeros(nn);
    gb.rows_mut(0, n).copy_from(&ev.g);
    gb.rows_mut(n, mi).fill(opts.elastic_penalty);
    let mut ae = DMatrix::zeros(me, nn);
    ae.view_mut((0, 0), (me, n)).copy_from(&ev.jc);
    let mut ai = DMatrix::zeros(2 * mi, nn);
    ai.view_mut((0, 0), (mi, n)).copy_from(&ev.jh);
    let mut bi = DVector::zeros(2 * mi);
    for i in 0..mi {
        ai[(i, n + i)] = 1.0;
        ai[(mi + i, n + i)] = 1.0;
        bi[i] = -ev.h[i];
    }
    let qp = QpProblem { h: &hb, g: &gb, a_eq: &ae, b_eq: &neg_c, a_in: &ai, b_in: &bi };
    let s = solve_qp(&qp, opts.max_qp_iters * 2)?;
    let sol = QpSolution {
        x: s.x.rows(0, n).into_owned(),
        objective: s.objective,
        lambda_eq: s.lambda_eq,
        mu_in: s.mu_in.rows(0, mi).into_owned(),
        active: s.active.into_iter().filter(|&i| i < mi).collect(),
        iterations: s.iterations,
    };
    Ok((sol, true))
}

/// Powell-damped BFGS update keeping `b` positive definite.
fn bfgs_update(b: &mut DMatrix<f64>, s: &DVector<f64>, y: &DVector<f64>) {
    let bs = &*b * s;
    let sbs = s.dot(&bs);
    if sbs <= f64::MIN_POSITIVE {
        return;
    }
    let sy = s.dot(y);
    let theta = if sy >= 0.2 * sbs { 1.0 } else { 0.8 * sbs / (sbs - sy) };
    let r = y * theta + &bs * (1.0 - theta);
    let sr = s.dot(&r);
    if sr <= f64::MIN_POSITIVE {
        return;
    }
    b.ger(-1.0 / sbs, &bs, &bs, 1.0);
    b.ger(1.0 / sr, &r, &r, 1.0);
}

pub fn solve(nlp: &impl Nlp, z0: DVector<f64>, opts: &SqpOptions) -> SqpResult {
    let n = nlp.dim();
    let mut z = z0;
    if !nlp.is_valid(&z) {
        return SqpResult {
            lambda_eq: DVector::zeros(0),
            mu_in: DVector::zeros(0),
            objective: f64::NAN,
            kkt_residual: f64::INFINITY,
            primal_infeasibility: f64::INFINITY,
            iterations: 0,
            status: SqpStatus::InvalidStart,
            relaxed: false,
            z,
        };
    }
    let b0 = nlp.initial_hessian(&z);
    let mut b = b0.clone();
    let mut ev = Eval::new(nlp, &z);
    let mut lambda = DVector::zeros(ev.c.len());
    let mut mu = DVector::zeros(ev.h.len());
    let mut rho = 1.0f64;
    let mut relaxed = false;
    let mut kkt = f64::INFINITY;
    let mut status = SqpStatus::MaxIterations;
    let mut iterations = 0;
    let mut reset_once = false;

    while iterations < opts.max_iters {
        let (qp, elastic) = match subproblem(&b, &ev, opts) {
            Ok(r) => r,
            Err(_) => {
                status = SqpStatus::QpFailed;
                break;
            }
        };
        relaxed |= elastic;
        let p = qp.x;
        lambda = qp.lambda_eq;
        mu = qp.mu_in;
        kkt = ev.kkt(&lambda, &mu);
        if (kkt <= opts.kkt_tol || p.amax() <= f64::EPSILON * (1.0 + z.amax()))
            && ev.infeasibility() <= opts.kkt_tol.max(1e-9) {
                status = SqpStatus::Converged;
                break;
            }
        iterations += 1;

        let mult = lambda.amax().max(mu.amax());
        if rho < 1.1 * mult {
            rho = 1.1 * mult + 1e-3;
        }
        let phi0 = ev.f + rho * ev.violation();
        let descent = ev.g.dot(&p) - rho * ev.violation();
        let mut alpha = 1.0;
        let mut accepted = None;
        while alpha > 1e-10 {
            let zt = &z + &p * alpha;
            if nlp.is_valid(&zt) {
                let ft = nlp.objective(&zt);
                let phit = ft + rho * violation(&nlp.eq(&zt), &nlp.ineq(&zt));
                if phit.is_finite() && phit <= phi0 + 1e-4 * alpha * descent.min(0.0) {
                    accepted = Some(zt);
                    break;
                }
            }
            alpha *= 0.5;
        }
        let Some(zn) = accepted else {
            if !reset_once {
                reset_once = true;
                b = b0.clone();
                continue;
            }
            status = SqpStatus::LineSearchFailed;
            break;
        };
        reset_once = false;
        let evn = Eval::new(nlp, &zn);
        let s = &zn - &z;
        let y = evn.lagrangian_gradient(&lambda, &mu) - ev.lagrangian_gradient(&lambda, &mu);
        bfgs_update(&mut b, &s, &y);
        z = zn;
        ev = evn;
    }
    if status == SqpStatus::MaxIterations && iterations < opts.max_iters {
        status = SqpStatus::MaxIterations;
    }
    debug_assert_eq!(z.len(), n);
    SqpResult {
        objective: ev.f,
        primal_infeasibility: ev.infeasibility(),
        kkt_residual: kkt,
        lambda_eq: lambda,
        mu_in: mu,
        iterations,
        status,
        relaxed,
        z,
    }
}
