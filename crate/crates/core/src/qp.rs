//! Dense convex QP solver (dual active set, Goldfarb-Idnani).
//!
//! Solves
//!
//! ```text
//! minimize    1/2 x'Hx + g'x
//! subject to  A_eq x  = b_eq
//!             A_in x >= b_in
//!             lower <= x <= upper
//! ```
//!
//! with `H` symmetric positive semidefinite. A singular `H` is handled by a
//! proximal-point outer loop over strictly convex subproblems.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct QpProblem {
    pub hessian: DMatrix<f64>,
    pub gradient: DVector<f64>,
    pub a_eq: DMatrix<f64>,
    pub b_eq: DVector<f64>,
    pub a_in: DMatrix<f64>,
    pub b_in: DVector<f64>,
    /// Entries may be `-inf`.
    pub lower: DVector<f64>,
    /// Entries may be `+inf`.
    pub upper: DVector<f64>,
}

impl QpProblem {
    /// Unconstrained problem of dimension `n`.
    pub fn new(hessian: DMatrix<f64>, gradient: DVector<f64>) -> Self {
        let n = gradient.len();
        assert_eq!(hessian.shape(), (n, n));
        Self {
            hessian,
            gradient,
            a_eq: DMatrix::zeros(0, n),
            b_eq: DVector::zeros(0),
            a_in: DMatrix::zeros(0, n),
            b_in: DVector::zeros(0),
            lower: DVector::from_element(n, f64::NEG_INFINITY),
            upper: DVector::from_element(n, f64::INFINITY),
        }
    }

    pub fn with_equalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_eq = a;
        self.b_eq = b;
        self
    }

    pub fn with_inequalities(mut self, a: DMatrix<f64>, b: DVector<f64>) -> Self {
        self.a_in = a;
        self.b_in = b;
        self
    }

    pub fn with_bounds(mut self, lower: DVector<f64>, upper: DVector<f64>) -> Self {
        self.lower = lower;
        self.upper = upper;
        self
    }

    pub fn dim(&self) -> usize {
        self.gradient.len()
    }

    pub fn objective(&self, x: &DVector<f64>) -> f64 {
        0.5 * x.dot(&(&self.hessian * x)) + self.gradient.dot(x)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        let ok = self.hessian.shape() == (n, n)
            && self.a_eq.ncols() == n
            && self.a_eq.nrows() == self.b_eq.len()
            && self.a_in.ncols() == n
            && self.a_in.nrows() == self.b_in.len()
            && self.lower.len() == n
            && self.upper.len() == n;
        if !ok {
            return Err(Error::invalid("QP dimensions are inconsistent"));
        }
        let finite = self.hessian.iter().all(|v| v.is_finite())
            && self.gradient.iter().all(|v| v.is_finite())
            && self.a_eq.iter().chain(self.b_eq.iter()).all(|v| v.is_finite())
            && self.a_in.iter().chain(self.b_in.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(Error::invalid("QP data must be finite"));
        }
        if self.lower.iter().zip(self.upper.iter()).any(|(l, u)| l > u || l.is_nan() || u.is_nan()) {
            return Err(Error::invalid("QP bounds must satisfy lower <= upper"));
        }
        Ok(())
    }

    /// Writes the problem as plain text: dimensions, then dense rows with
    /// 17 significant digits.
    pub fn dump(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    pub fn to_text(&self) -> String {
        fn row(out: &mut String, label: &str, vals: impl Iterator<Item = f64>) {
            out.push_str(label);
            for v in vals {
                let _ = write!(out, " {v:.16e}");
            }
            out.push('\n');
        }
        let mut out = String::new();
        let _ = writeln!(out, "n {} m_eq {} m_in {}", self.dim(), self.b_eq.len(), self.b_in.len());
        for r in 0..self.dim() {
            row(&mut out, "H", self.hessian.row(r).iter().copied());
        }
        row(&mut out, "g", self.gradient.iter().copied());
        for r in 0..self.b_eq.len() {
            row(&mut out, "Aeq", self.a_eq.row(r).iter().copied().chain([self.b_eq[r]]));
        }
        for r in 0..self.b_in.len() {
            row(&mut out, "Ain", self.a_in.row(r).iter().copied().chain([self.b_in[r]]));
        }
        row(&mut out, "lo", self.lower.iter().copied());
        row(&mut out, "hi", self.upper.iter().copied());
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QpStatus {
    Optimal,
    MaxIterations,
    Infeasible,
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub status: QpStatus,
    pub x: DVector<f64>,
    pub objective: f64,
    /// Multipliers of the equality rows (free sign).
    pub y_eq: DVector<f64>,
    /// Multipliers of the inequality rows (nonnegative).
    pub y_in: DVector<f64>,
    pub y_lower: DVector<f64>,
    pub y_upper: DVector<f64>,
    pub iterations: usize,
    /// Largest constraint violation left when infeasibility was detected.
    pub infeasibility: f64,
    pub kkt: KktResidual,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct KktResidual {
    pub stationarity: f64,
    pub primal: f64,
    pub dual: f64,
    pub complementarity: f64,
}

impl KktResidual {
    pub fn max(&self) -> f64 {
        self.stationarity.max(self.primal).max(self.dual).max(self.complementarity)
    }
}

/// KKT residuals of a primal-dual pair, in the sign convention
/// `Hx + g = A_eq'y_eq + A_in'y_in + y_lower - y_upper`.
pub fn kkt_residual(
    qp: &QpProblem,
    x: &DVector<f64>,
    y_eq: &DVector<f64>,
    y_in: &DVector<f64>,
    y_lower: &DVector<f64>,
    y_upper: &DVector<f64>,
) -> KktResidual {
    let mut grad = &qp.hessian * x + &qp.gradient;
    grad -= qp.a_eq.transpose() * y_eq;
    grad -= qp.a_in.transpose() * y_in;
    grad -= y_lower;
    grad += y_upper;
    let stationarity = grad.amax();

    let mut primal: f64 = 0.0;
    let eq_res = &qp.a_eq * x - &qp.b_eq;
    primal = primal.max(eq_res.amax());
    let in_slack = &qp.a_in * x - &qp.b_in;
    let mut comp: f64 = 0.0;
    let mut dual: f64 = 0.0;
    for i in 0..in_slack.len() {
        primal = primal.max(-in_slack[i]);
        dual = dual.max(-y_in[i]);
        comp = comp.max((y_in[i] * in_slack[i]).abs());
    }
    for j in 0..x.len() {
        if qp.lower[j].is_finite() {
            let s = x[j] - qp.lower[j];
            primal = primal.max(-s);
            comp = comp.max((y_lower[j] * s).abs());
        } else {
            comp = comp.max(y_lower[j].abs());
        }
        if qp.upper[j].is_finite() {
            let s = qp.upper[j] - x[j];
            primal = primal.max(-s);
            comp = comp.max((y_upper[j] * s).abs());
        } else {
            comp = comp.max(y_upper[j].abs());
        }
        dual = dual.max(-y_lower[j]).max(-y_upper[j]);
    }
    KktResidual {
        stationarity,
        primal: primal.max(0.0),
        dual: dual.max(0.0),
        complementarity: comp,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QpOptions {
    /// Feasibility tolerance for inequality rows, relative to `1 + |b|`.
    pub feas_tol: f64,
    pub max_iterations: usize,
    /// Proximal weight for singular Hessians, relative to the Hessian diagonal.
    pub prox_weight: f64,
    pub max_prox_rounds: usize,
    /// Outer-loop stopping tolerance on the proximal step.
    pub prox_tol: f64,
}

impl Default for QpOptions {
    fn default() -> Self {
        Self {
            feas_tol: 1e-12,
            max_iterations: 0,
            prox_weight: 1e-4,
            max_prox_rounds: 500,
            prox_tol: 1e-13,
        }
    }
}

/// Solves `qp` with default options. `tol` only affects the reported status:
/// a solution whose KKT residual exceeds it is marked `MaxIterations`.
pub fn solve_qp(qp: &QpProblem, tol: f64) -> Result<QpSolution> {
    solve_qp_with(qp, tol, &QpOptions::default())
}

pub fn solve_qp_with(qp: &QpProblem, tol: f64, opts: &QpOptions) -> Result<QpSolution> {
    qp.validate()?;
    let n = qp.dim();
    let diag_scale = (0..n).map(|i| qp.hessian[(i, i)].abs()).fold(0.0, f64::max).max(1.0);

    if let Some(chol) = strict_cholesky(&qp.hessian, diag_scale) {
        let raw = dual_active_set(qp, &chol, &qp.gradient, opts);
        return Ok(finish(qp, raw, tol));
    }

    // Proximal point: x+ = argmin f(x) + eps/2 |x - x_k|^2 over the feasible set.
    let eps = opts.prox_weight * diag_scale;
    let mut h = qp.hessian.clone();
    for i in 0..n {
        h[(i, i)] += eps;
    }
    let chol = strict_cholesky(&h, diag_scale).ok_or_else(|| Error::invalid("QP Hessian is not positive semidefinite"))?;
    let mut x_prev: Option<DVector<f64>> = None;
    let mut total_iters = 0;
    let mut last = None;
    for _ in 0..opts.max_prox_rounds {
        let g = match &x_prev {
            Some(xp) => &qp.gradient - xp * eps,
            None => qp.gradient.clone(),
        };
        let raw = dual_active_set(qp, &chol, &g, opts);
        total_iters += raw.iterations;
        if raw.status != QpStatus::Optimal {
            let mut raw = raw;
            raw.iterations = total_iters;
            return Ok(finish(qp, raw, tol));
        }
        let step = x_prev.as_ref().map(|xp| (&raw.x - xp).amax()).unwrap_or(f64::INFINITY);
        let done = step <= opts.prox_tol * (1.0 + raw.x.amax());
        x_prev = Some(raw.x.clone());
        last = Some(raw);
        if done {
            break;
        }
    }
    let mut raw = last.expect("at least one proximal round");
    raw.iterations = total_iters;
    Ok(finish(qp, raw, tol))
}

/// Cholesky factor if `h` is numerically positive definite.
fn strict_cholesky(h: &DMatrix<f64>, scale: f64) -> Option<DMatrix<f64>> {
    let n = h.nrows();
    let chol = h.clone().cholesky()?;
    let l = chol.l();
    let min_pivot = (0..n).map(|i| l[(i, i)] * l[(i, i)]).fold(f64::INFINITY, f64::min);
    if n > 0 && min_pivot < 1e-10 * scale {
        return None;
    }
    Some(l)
}

struct RawSolution {
    status: QpStatus,
    x: DVector<f64>,
    y_eq: DVector<f64>,
    y_in: DVector<f64>,
    y_lower: DVector<f64>,
    y_upper: DVector<f64>,
    iterations: usize,
    infeasibility: f64,
}

fn finish(qp: &QpProblem, raw: RawSolution, tol: f64) -> QpSolution {
    let kkt = kkt_residual(qp, &raw.x, &raw.y_eq, &raw.y_in, &raw.y_lower, &raw.y_upper);
    let status = match raw.status {
        QpStatus::Optimal if kkt.max() > tol => QpStatus::MaxIterations,
        s => s,
    };
    QpSolution {
        status,
        objective: qp.objective(&raw.x),
        x: raw.x,
        y_eq: raw.y_eq,
        y_in: raw.y_in,
        y_lower: raw.y_lower,
        y_upper: raw.y_upper,
        iterations: raw.iterations,
        infeasibility: raw.infeasibility,
        kkt,
    }
}

/// Inequality constraints in the common form `n'x >= b`.
#[derive(Debug, Clone, Copy)]
enum Con {
    Row(usize),
    Lower(usize),
    Upper(usize),
}

struct Constraints<'a> {
    qp: &'a QpProblem,
    list: Vec<Con>,
}

impl<'a> Constraints<'a> {
    fn new(qp: &'a QpProblem) -> Self {
        let mut list: Vec<Con> = (0..qp.b_in.len()).map(Con::Row).collect();
        list.extend((0..qp.dim()).filter(|&j| qp.lower[j].is_finite()).map(Con::Lower));
        list.extend((0..qp.dim()).filter(|&j| qp.upper[j].is_finite()).map(Con::Upper));
        Self { qp, list }
    }

    fn slack(&self, i: usize, x: &DVector<f64>) -> f64 {
        match self.list[i] {
            Con::Row(r) => self.qp.a_in.row(r).transpose().dot(x) - self.qp.b_in[r],
            Con::Lower(j) => x[j] - self.qp.lower[j],
            Con::Upper(j) => self.qp.upper[j] - x[j],
        }
    }

    fn rhs(&self, i: usize) -> f64 {
        match self.list[i] {
            Con::Row(r) => self.qp.b_in[r],
            Con::Lower(j) => self.qp.lower[j],
            Con::Upper(j) => -self.qp.upper[j],
        }
    }

    fn normal(&self, i: usize) -> DVector<f64> {
        let n = self.qp.dim();
        match self.list[i] {
            Con::Row(r) => self.qp.a_in.row(r).transpose(),
            Con::Lower(j) => {
                let mut v = DVector::zeros(n);
                v[j] = 1.0;
                v
            }
            Con::Upper(j) => {
                let mut v = DVector::zeros(n);
                v[j] = -1.0;
                v
            }
        }
    }
}

/// Active-set bookkeeping: `J = L^-T Q` and the upper-triangular `R` with
/// `L^-1 N = Q R` for the active normals `N`.
struct Factor {
    n: usize,
    j: DMatrix<f64>,
    r: DMatrix<f64>,
    iq: usize,
    r_norm: f64,
}

impl Factor {
    fn new(l: &DMatrix<f64>) -> Self {
        let n = l.nrows();
        let lt = l.transpose();
        let j = lt
            .solve_upper_triangular(&DMatrix::identity(n, n))
            .expect("Cholesky factor has a positive diagonal");
        Self {
            n,
            j,
            r: DMatrix::zeros(n, n + 1),
            iq: 0,
            r_norm: 1.0,
        }
    }

    /// `d = J' np`.
    fn d(&self, np: &DVector<f64>) -> DVector<f64> {
        self.j.tr_mul(np)
    }

    /// Primal step direction in the null space of the active set.
    fn z(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut z = DVector::zeros(self.n);
        for c in self.iq..self.n {
            z.axpy(d[c], &self.j.column(c), 1.0);
        }
        z
    }

    /// Change of the active multipliers, `R r = d[..iq]`.
    fn r(&self, d: &DVector<f64>) -> DVector<f64> {
        let mut r = DVector::zeros(self.iq);
        for i in (0..self.iq).rev() {
            let mut sum = d[i];
            for k in i + 1..self.iq {
                sum -= self.r[(i, k)] * r[k];
            }
            r[i] = sum / self.r[(i, i)];
        }
        r
    }

    /// Appends a normal whose `d = J' np` is given. Returns false when the
    /// normal is linearly dependent on the active ones.
    fn add(&mut self, mut d: DVector<f64>) -> bool {
        let n = self.n;
        for c in (self.iq + 1..n).rev() {
            let (mut cc, mut ss) = (d[c - 1], d[c]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            d[c] = 0.0;
            ss /= h;
            cc /= h;
            if cc < 0.0 {
                cc = -cc;
                ss = -ss;
                d[c - 1] = -h;
            } else {
                d[c - 1] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in 0..n {
                let t1 = self.j[(k, c - 1)];
                let t2 = self.j[(k, c)];
                let a = t1 * cc + t2 * ss;
                self.j[(k, c - 1)] = a;
                self.j[(k, c)] = xny * (t1 + a) - t2;
            }
        }
        self.iq += 1;
        let iq = self.iq;
        for i in 0..iq {
            self.r[(i, iq - 1)] = d[i];
        }
        if iq > n || d[iq - 1].abs() <= f64::EPSILON * self.r_norm {
            return false;
        }
        self.r_norm = self.r_norm.max(d[iq - 1].abs());
        true
    }

    /// Removes the active column at position `pos` and restores the
    /// triangular form.
    fn remove(&mut self, pos: usize) {
        let n = self.n;
        let iq = self.iq;
        for c in pos..iq - 1 {
            for r in 0..n {
                self.r[(r, c)] = self.r[(r, c + 1)];
            }
        }
        for r in 0..n {
            self.r[(r, iq - 1)] = 0.0;
        }
        self.iq -= 1;
        let iq = self.iq;
        for c in pos..iq {
            let (mut cc, mut ss) = (self.r[(c, c)], self.r[(c + 1, c)]);
            let h = cc.hypot(ss);
            if h == 0.0 {
                continue;
            }
            cc /= h;
            ss /= h;
            self.r[(c + 1, c)] = 0.0;
            if cc < 0.0 {
                self.r[(c, c)] = -h;
                cc = -cc;
                ss = -ss;
            } else {
                self.r[(c, c)] = h;
            }
            let xny = ss / (1.0 + cc);
            for k in c + 1..iq {
                let t1 = self.r[(c, k)];
                let t2 = self.r[(c + 1, k)];
                let a = t1 * cc + t2 * ss;
                self.r[(c, k)] = a;
                self.r[(c + 1, k)] = xny * (t1 + a) - t2;
            }
            for k in 0..n {
                let t1 = self.j[(k, c)];
                let t2 = self.j[(k, c + 1)];
                let a = t1 * cc + t2 * ss;
                self.j[(k, c)] = a;
                self.j[(k, c + 1)] = xny * (a + t1) - t2;
            }
        }
    }
}

/// Entry of the active set: an equality row or an inequality from [`Constraints`].
#[derive(Debug, Clone, Copy, PartialEq)]
enum Active {
    Eq(usize),
    In(usize),
}

fn dual_active_set(qp: &QpProblem, l: &DMatrix<f64>, gradient: &DVector<f64>, opts: &QpOptions) -> RawSolution {
    let n = qp.dim();
    let cons = Constraints::new(qp);
    let m = cons.list.len();
    let meq = qp.b_eq.len();
    let max_iter = if opts.max_iterations > 0 {
        opts.max_iterations
    } else {
        50 * (n + m + meq) + 100
    };

    let mut fac = Factor::new(l);
    // Unconstrained minimizer x = -H^-1 g = -J J' g.
    let mut x = -(&fac.j * fac.j.tr_mul(gradient));
    let mut active: Vec<Active> = Vec::with_capacity(n);
    let mut u: Vec<f64> = Vec::with_capacity(n + 1);
    let mut iterations = 0;

    let out = |status: QpStatus, x: DVector<f64>, active: &[Active], u: &[f64], iterations: usize, infeasibility: f64| {
        let mut y_eq = DVector::zeros(meq);
        let mut y_in = DVector::zeros(qp.b_in.len());
        let mut y_lower = DVector::zeros(n);
        let mut y_upper = DVector::zeros(n);
        if status == QpStatus::Optimal {
            for (a, &ui) in active.iter().zip(u.iter()) {
                match *a {
                    Active::Eq(i) => y_eq[i] = ui,
                    Active::In(i) => match cons.list[i] {
                        Con::Row(r) => y_in[r] = ui,
                        Con::Lower(j) => y_lower[j] = ui,
                        Con::Upper(j) => y_upper[j] = ui,
                    },
                }
            }
        }
        RawSolution {
            status,
            x,
            y_eq,
            y_in,
            y_lower,
            y_upper,
            iterations,
            infeasibility,
        }
    };

    for i in 0..meq {
        let np = qp.a_eq.row(i).transpose();
        let d = fac.d(&np);
        let z = fac.z(&d);
        let r = fac.r(&d);
        let znp = z.dot(&np);
        let resid = qp.b_eq[i] - np.dot(&x);
        let t = if znp.abs() > 1e-14 * d.norm_squared().max(f64::MIN_POSITIVE) {
            resid / znp
        } else {
            0.0
        };
        x.axpy(t, &z, 1.0);
        for (k, rk) in r.iter().enumerate() {
            u[k] -= t * rk;
        }
        u.push(t);
        active.push(Active::Eq(i));
        if !fac.add(d) {
            // Dependent equality rows; consistent duplicates are tolerated.
            fac.iq -= 1;
            active.pop();
            u.pop();
            if resid.abs() > opts.feas_tol * (1.0 + qp.b_eq[i].abs()) * 1e3 {
                return out(QpStatus::Infeasible, x, &active, &u, iterations, resid.abs());
            }
        }
    }

    let tol_of = |i: usize| opts.feas_tol * (1.0 + cons.rhs(i).abs());
    let mut excluded = vec![false; m];
    let is_active = |active: &[Active], i: usize| active.contains(&Active::In(i));

    loop {
        iterations += 1;
        if iterations > max_iter {
            return out(QpStatus::MaxIterations, x, &active, &u, iterations, 0.0);
        }
        // Pick the most violated inactive constraint; lowest index on ties.
        let mut p = None;
        let mut worst = 0.0;
        for i in 0..m {
            if excluded[i] || is_active(&active, i) {
                continue;
            }
            let s = cons.slack(i, &x);
            if s < -tol_of(i) && s < worst {
                worst = s;
                p = Some(i);
            }
        }
        let Some(p) = p else {
            return out(QpStatus::Optimal, x, &active, &u, iterations, 0.0);
        };
        let np = cons.normal(p);
        let saved = (x.clone(), active.clone(), u.clone(), fac.j.clone(), fac.r.clone(), fac.iq);
        let mut u_p = 0.0;
        let mut s_p = worst;
        loop {
            let d = fac.d(&np);
            let z = fac.z(&d);
            let r = fac.r(&d);
            // Partial step: largest dual step keeping active multipliers >= 0.
            let mut t1 = f64::INFINITY;
            let mut drop = None;
            for k in 0..fac.iq {
                if let Active::In(_) = active[k] {
                    if r[k] > 0.0 {
                        let ratio = u[k] / r[k];
                        if ratio < t1 {
                            t1 = ratio;
                            drop = Some(k);
                        }
                    }
                }
            }
            let znp = z.dot(&np);
            let t2 = if znp > 1e-14 * d.norm_squared() {
                -s_p / znp
            } else {
                f64::INFINITY
            };
            let t = t1.min(t2);
            if !t.is_finite() {
                return out(QpStatus::Infeasible, x, &active, &u, iterations, -s_p);
            }
            if !t2.is_finite() {
                // Dual step only.
                for k in 0..fac.iq {
                    u[k] -= t * r[k];
                }
                u_p += t;
                let k = drop.expect("finite partial step");
                fac.remove(k);
                active.remove(k);
                u.remove(k);
                continue;
            }
            x.axpy(t, &z, 1.0);
            for k in 0..fac.iq {
                u[k] -= t * r[k];
            }
            u_p += t;
            if t == t2 {
                if fac.add(d) {
                    active.push(Active::In(p));
                    u.push(u_p);
                    excluded.iter_mut().for_each(|e| *e = false);
                } else {
                    // Degenerate: restore and skip this constraint for now.
                    fac.iq -= 1;
                    (x, active, u, fac.j, fac.r, fac.iq) = saved;
                    excluded[p] = true;
                }
                break;
            }
            let k = drop.expect("partial step has a blocking constraint");
            fac.remove(k);
            active.remove(k);
            u.remove(k);
            s_p = cons.slack(p, &x);
        }
    }
}
