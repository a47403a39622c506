//! Dense strictly convex QP solver (Goldfarb–Idnani dual active set).
//!
//! ```text
//!   min  ½ xᵀH x + gᵀx
//!   s.t. A_eq x  = b_eq
//!        A_in x >= b_in
//! ```
//!
//! The solver starts from the unconstrained minimizer and adds violated
//! constraints one at a time, so no feasible starting point is needed. `J` and
//! `R` are kept as orthogonal/triangular factors and updated with Givens
//! rotations. Returned multipliers satisfy
//! `H x + g = A_eqᵀ λ + A_inᵀ μ` with `μ >= 0`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
pub enum QpError {
    #[error("QP Hessian is not positive definite")]
    NotPositiveDefinite,
    #[error("QP constraints are infeasible")]
    Infeasible,
    #[error("QP equality constraints are linearly dependent")]
    DependentEqualities,
    #[error("QP iteration limit reached")]
    MaxIterations,
    #[error("QP dimensions do not match")]
    Dimension,
}

pub struct QpProblem<'a> {
    pub h: &'a DMatrix<f64>,
    pub g: &'a DVector<f64>,
    pub a_eq: &'a DMatrix<f64>,
    pub b_eq: &'a DVector<f64>,
    pub a_in: &'a DMatrix<f64>,
    pub b_in: &'a DVector<f64>,
}

#[derive(Debug, Clone)]
pub struct QpSolution {
    pub x: DVector<f64>,
    pub objective: f64,
    pub lambda_eq: DVector<f64>,
    pub mu_in: DVector<f64>,
    /// Indices of inequality rows in the final active set.
    pub active: Vec<usize>,
    pub iterations: usize,
}

/// Active-set entry: equality row or inequality row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Row {
    Eq(usize),
    In(usize),
}

struct Factors {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    r_norm: f64,
    /// Active rows; the multiplier of `active[k]` is `u[k]`.
    active: Vec<Row>,
    u: Vec<f64>,
}

impl Factors {
    fn iq(&self) -> usize {
        self.active.len()
    }

    /// d = Jᵀ n
    fn compute_d(&self, np: &DVector<f64>) -> DVector<f64> {
        self.j.tr_mul(np)
    }

    /// Primal step direction z = J₂ d₂.
    fn compute_z(&self, d: &DVector<f64>) -> DVector<f64> {
        let iq = self.iq();
        let mut z = DVector::zeros(self.n);
        for col in iq..self.n {
            let dc = d[col];
            if dc != 0.0 {
                z.axpy(dc, &self.j.column(col), 1.0);
            }
        }
        z
    }

    /// Dual step direction r = R⁻¹ d₁.
    fn compute_r(&self, d: &DVector<f64>) -> Vec<f64> {
        let iq = self.iq();
        let mut r = vec![0.0; iq];
        for i in (0..iq).rev() {
            let sum: f64 = (i + 1..iq).map(|jj| self.r[(i, jj)] * r[jj]).sum();
            r[i] = (d[i] - sum) / self.r[(i, i)];
        }
        r
    }

    /// Appends a row whose transformed normal is `d`. Returns false if the
    /// normal is linearly dependent on the active set.
    fn add(&mut self, mut d: DVector<f64>, row: Row, multiplier: f64) -> bool {
        let n = self.n;
        let iq = self.iq();
        for jj in (iq + 1..n).rev() {
            let mut cc = d[jj - 1];
            let mut ss = d[jj];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[jj] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[jj - 1] = -h;
            } else {
                d[jj - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, jj - 1)];
                let t2 = self.j[(k, jj)];
                self.j[(k, jj - 1)] = t1 * cc + t2 * ss;
                self.j[(k, jj)] = xny * (t1 + self.j[(k, jj - 1)]) - t2;
            }
        }
        for i in 0..=iq {
            self.r[(i, iq)] = d[i];
        }
        if d[iq].abs() <= f64::EPSILON * self.r_norm {
            // undo: caller discards the row
            for i in 0..=iq {
                self.r[(i, iq)] = 0.0;
            }
            return false;
        }
        self.r_norm = self.r_norm.max(d[iq].abs());
        self.active.push(row);
        self.u.push(multiplier);
        true
    }

    /// Removes an inequality row from the active set.
    fn delete(&mut self, row: Row) {
        let n = self.n;
        let Some(qq) = self.active.iter().position(|&a| a == row) else {
            return;
        };
        let iq = self.iq();
        self.active.remove(qq);
        self.u.remove(qq);
        for i in qq..iq - 1 {
            for k in 0..n {
                self.r[(k, i)] = self.r[(k, i + 1)];
            }
        }
        for k in 0..n {
            self.r[(k, iq - 1)] = 0.0;
        }
        let iq = iq - 1;
        for jj in qq..iq {
            let mut cc = self.r[(jj, jj)];
            let mut ss = self.r[(jj + 1, jj)];
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(jj + 1, jj)] = 0.0;
            if cc < 0.0 {
                self.r[(jj, jj)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(jj, jj)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in jj + 1..iq {
                let t1 = self.r[(jj, k)];
                let t2 = self.r[(jj + 1, k)];
                self.r[(jj, k)] = t1 * cc + t2 * ss;
                self.r[(jj + 1, k)] = xny * (t1 + self.r[(jj, k)]) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, jj)];
                let t2 = self.j[(k, jj + 1)];
                self.j[(k, jj)] = t1 * cc + t2 * ss;
                self.j[(k, jj + 1)] = xny * (self.j[(k, jj)] + t1) - t2;
            }
        }
    }
}

pub fn solve_qp(p: &QpProblem<'_>, max_iter: usize) -> Result<QpSolution, QpError> {
    let n = p.g.len();
    let me = p.a_eq.nrows();
    let mi = p.a_in.nrows();
    if p.h.nrows() != n
        || p.h.ncols() != n
        || (me > 0 && p.a_eq.ncols() != n)
        || (mi > 0 && p.a_in.ncols() != n)
        || p.b_eq.len() != me
        || p.b_in.len() != mi
    {
        return Err(QpError::Dimension);
    }

    let chol = p.h.clone().cholesky().ok_or(QpError::NotPositiveDefinite)?;
    let l = chol.l();
    let l_inv = l
        .solve_lower_triangular(&DMatrix::identity(n, n))
        .ok_or(QpError::NotPositiveDefinite)?;
    let j = l_inv.transpose();
    let c1 = p.h.trace();
    let c2 = j.trace();

    let mut x = chol.solve(&(-p.g));
    let mut f = 0.5 * p.g.dot(&x);
    let mut fac = Factors {
        n,
        j,
        r: DMatrix::zeros(n, n),
        r_norm: 1.0,
        active: Vec::with_capacity(n),
        u: Vec::with_capacity(n),
    };
    let eq_row = |i: usize| -> DVector<f64> { p.a_eq.row(i).transpose() };
    let in_row = |i: usize| -> DVector<f64> { p.a_in.row(i).transpose() };

    for i in 0..me {
        let np = eq_row(i);
        let d = fac.compute_d(&np);
        let z = fac.compute_z(&d);
        let r = fac.compute_r(&d);
        let zn = z.dot(&np);
        let t2 = if z.dot(&z) > f64::EPSILON { (p.b_eq[i] - np.dot(&x)) / zn } else { 0.0 };
        x.axpy(t2, &z, 1.0);
        for (uk, rk) in fac.u.iter_mut().zip(&r) {
            *uk -= t2 * rk;
        }
        f += 0.5 * t2 * t2 * zn;
        if !fac.add(d, Row::Eq(i), t2) {
            return Err(QpError::DependentEqualities);
        }
    }

    // constraint bookkeeping: candidate = not active, included = not excluded after degeneracy
    let mut candidate = vec![true; mi];
    let mut included = vec![true; mi];
    let mut s = DVector::zeros(mi);
    let mut iterations = 0;
    let tol = mi as f64 * f64::EPSILON * c1 * c2 * 100.0;

    'outer: loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(QpError::MaxIterations);
        }
        for a in &fac.active {
            if let Row::In(i) = *a {
                candidate[i] = false;
            }
        }
        let mut psi = 0.0;
        for i in 0..mi {
            s[i] = p.a_in.row(i).dot(&x.transpose()) - p.b_in[i];
            psi += s[i].min(0.0);
        }
        if psi.abs() <= tol {
            break;
        }
        let saved_active = fac.active.clone();
        let saved_u = fac.u.clone();
        let saved_x = x.clone();

        'select: loop {
            let mut ip = None;
            let mut most = 0.0;
            for i in 0..mi {
                if s[i] < most && candidate[i] && included[i] {
                    most = s[i];
                    ip = Some(i);
                }
            }
            let Some(ip) = ip else { break 'outer };
            let np = in_row(ip);
            let mut u_new = 0.0;

            loop {
                let d = fac.compute_d(&np);
                let z = fac.compute_z(&d);
                let r = fac.compute_r(&d);
                // dual step length, blocked by an active inequality whose multiplier hits zero
                let mut t1 = f64::INFINITY;
                let mut blocking = None;
                for (k, &rk) in r.iter().enumerate() {
                    if let Row::In(row) = fac.active[k] {
                        if rk > 0.0 && fac.u[k] / rk < t1 {
                            t1 = fac.u[k] / rk;
                            blocking = Some(row);
                        }
                    }
                }
                let zn = z.dot(&np);
                let t2 = if z.dot(&z) > f64::EPSILON { -s[ip] / zn } else { f64::INFINITY };
                let t = t1.min(t2);
                if !t.is_finite() {
                    return Err(QpError::Infeasible);
                }
                if !t2.is_finite() {
                    for (uk, rk) in fac.u.iter_mut().zip(&r) {
                        *uk -= t * rk;
                    }
                    u_new += t;
                    let l = blocking.expect("finite dual step has a blocking row");
                    candidate[l] = true;
                    fac.delete(Row::In(l));
                    continue;
                }
                x.axpy(t, &z, 1.0);
                f += t * zn * (0.5 * t + u_new);
                for (uk, rk) in fac.u.iter_mut().zip(&r) {
                    *uk -= t * rk;
                }
                u_new += t;
                if (t - t2).abs() <= f64::EPSILON * t2.abs().max(1.0) {
                    if !fac.add(d, Row::In(ip), u_new) {
                        included[ip] = false;
                        candidate.iter_mut().for_each(|c| *c = true);
                        fac.active = saved_active.clone();
                        fac.u = saved_u.clone();
                        x = saved_x.clone();
                        // refactor from scratch for the restored set
                        rebuild(&mut fac, p, &chol);
                        for a in &fac.active {
                            if let Row::In(i) = *a {
                                candidate[i] = false;
                            }
                        }
                        continue 'select;
                    }
                    candidate[ip] = false;
                    continue 'outer;
                }
                let l = blocking.expect("partial step has a blocking row");
                candidate[l] = true;
                fac.delete(Row::In(l));
                s[ip] = np.dot(&x) - p.b_in[ip];
            }
        }
    }

    let mut lambda_eq = DVector::zeros(me);
    let mut mu_in = DVector::zeros(mi);
    let mut active = Vec::new();
    for (k, a) in fac.active.iter().enumerate() {
        match *a {
            Row::Eq(i) => lambda_eq[i] = fac.u[k],
            Row::In(i) => {
                mu_in[i] = fac.u[k];
                active.push(i);
            }
        }
    }
    let _ = f;
    let objective = 0.5 * x.dot(&(p.h * &x)) + p.g.dot(&x);
    Ok(QpSolution { x, objective, lambda_eq, mu_in, active, iterations })
}

/// Rebuilds `J` and `R` for the rows currently listed in `fac.active`.
fn rebuild(fac: &mut Factors, p: &QpProblem<'_>, chol: &nalgebra::Cholesky<f64, nalgebra::Dyn>) {
    let n = fac.n;
    let l = chol.l();
    let l_inv = l.solve_lower_triangular(&DMatrix::identity(n, n)).expect("factor exists");
    fac.j = l_inv.transpose();
    fac.r = DMatrix::zeros(n, n);
    fac.r_norm = 1.0;
    let rows = std::mem::take(&mut fac.active);
    let us = std::mem::take(&mut fac.u);
    for (row, u) in rows.into_iter().zip(us) {
        let np = match row {
            Row::Eq(i) => p.a_eq.row(i).transpose(),
            Row::In(i) => p.a_in.row(i).transpose(),
        };
        let d = fac.compute_d(&np);
        fac.add(d, row, u);
    }
}
