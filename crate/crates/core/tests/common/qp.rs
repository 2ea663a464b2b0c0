
use nalgebra::{DMatrix, DVector};
use pcc_lmpc::qp::QpProblem;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Sum of uniforms is plenty for test data.
    (0..6).map(|_| rng.gen_range(-1.0..1.0)).sum::<f64>() / 1.4
}

fn matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| normal(rng))
}

fn vector(rng: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
    DVector::from_fn(n, |_, _| normal(rng))
}

/// Feasible random QP. `rank < n` gives a singular Hessian, in which case
/// box bounds keep the problem bounded.
pub fn random_qp(rng: &mut ChaCha8Rng, n: usize, rank: usize, m_eq: usize, m_in: usize, boxed: bool) -> QpProblem {
    let b = matrix(rng, rank, n);
    let mut h = b.transpose() * &b / rank.max(1) as f64;
    if rank >= n {
        for i in 0..n {
            h[(i, i)] += 0.05;
        }
    }
    let h = (&h + h.transpose()) * 0.5;
    let g = vector(rng, n) * 2.0;
    let x0 = vector(rng, n) * 0.5;
    let a_eq = matrix(rng, m_eq, n);
    let b_eq = &a_eq * &x0;
    let a_in = matrix(rng, m_in, n);
    let slack = DVector::from_fn(m_in, |_, _| rng.gen_range(0.0..0.5));
    let b_in = &a_in * &x0 - slack;
    let mut qp = QpProblem::new(h, g)
        .with_equalities(a_eq, b_eq)
        .with_inequalities(a_in, b_in);
    if boxed {
        let lo = x0.map(|v| v - rng.gen_range(0.2..1.5));
        let hi = x0.map(|v| v + rng.gen_range(0.2..1.5));
        qp = qp.with_bounds(lo, hi);
    }
    qp
}

/// Brute force over every subset of inequality constraints treated as
/// equalities: the smallest objective among feasible stationary points of
/// the equality-restricted problems.
pub fn enumerate_active_sets(qp: &QpProblem) -> Option<f64> {
    let n = qp.dim();
    let mut rows: Vec<(DVector<f64>, f64)> = Vec::new();
    for r in 0..qp.a_in.nrows() {
        rows.push((qp.a_in.row(r).transpose(), qp.b_in[r]));
    }
    for j in 0..n {
        if qp.lower[j].is_finite() {
            let mut e = DVector::zeros(n);
            e[j] = 1.0;
            rows.push((e, qp.lower[j]));
        }
        if qp.upper[j].is_finite() {
            let mut e = DVector::zeros(n);
            e[j] = -1.0;
            rows.push((e, -qp.upper[j]));
        }
    }
    let m = rows.len();
    assert!(m <= 16, "enumeration is exponential");
    let meq = qp.a_eq.nrows();
    let mut best: Option<f64> = None;
    for mask in 0u32..(1 << m) {
        let chosen: Vec<usize> = (0..m).filter(|i| mask & (1 << i) != 0).collect();
        let k = meq + chosen.len();
        if k > n {
            continue;
        }
        let mut kkt = DMatrix::zeros(n + k, n + k);
        let mut rhs = DVector::zeros(n + k);
        kkt.view_mut((0, 0), (n, n)).copy_from(&qp.hessian);
        for i in 0..n {
            rhs[i] = -qp.gradient[i];
        }
        for e in 0..meq {
            for c in 0..n {
                kkt[(n + e, c)] = qp.a_eq[(e, c)];
                kkt[(c, n + e)] = qp.a_eq[(e, c)];
            }
            rhs[n + e] = qp.b_eq[e];
        }
        for (t, &i) in chosen.iter().enumerate() {
            for c in 0..n {
                kkt[(n + meq + t, c)] = rows[i].0[c];
                kkt[(c, n + meq + t)] = rows[i].0[c];
            }
            rhs[n + meq + t] = rows[i].1;
        }
        let svd = kkt.clone().svd(true, true);
        let smax = svd.singular_values.max();
        if svd.singular_values.min() < 1e-10 * smax.max(1.0) {
            continue;
        }
        let Ok(sol) = svd.solve(&rhs, 0.0) else { continue };
        let x = sol.rows(0, n).into_owned();
        let feasible = rows.iter().all(|(a, b)| a.dot(&x) >= b - 1e-9)
            && (0..meq).all(|e| (qp.a_eq.row(e).transpose().dot(&x) - qp.b_eq[e]).abs() < 1e-9);
        if feasible {
            let f = qp.objective(&x);
            best = Some(best.map_or(f, |b: f64| b.min(f)));
        }
    }
    best
}

/// KKT residual recomputed entry by entry from the solution and multipliers,
/// with the sign convention `Hx + g = A_eq'y_eq + A_in'y_in + y_lo - y_hi`.
pub fn independent_kkt(qp: &QpProblem, sol: &pcc_lmpc::qp::QpSolution) -> f64 {
    let n = qp.dim();
    let x = &sol.x;
    let mut worst: f64 = 0.0;
    for j in 0..n {
        let mut r = qp.gradient[j];
        for c in 0..n {
            r += qp.hessian[(j, c)] * x[c];
        }
        for e in 0..qp.a_eq.nrows() {
            r -= qp.a_eq[(e, j)] * sol.y_eq[e];
        }
        for i in 0..qp.a_in.nrows() {
            r -= qp.a_in[(i, j)] * sol.y_in[i];
        }
        r -= sol.y_lower[j] - sol.y_upper[j];
        worst = worst.max(r.abs());
    }
    let row = |a: &DMatrix<f64>, i: usize| (0..n).map(|c| a[(i, c)] * x[c]).sum::<f64>();
    for e in 0..qp.a_eq.nrows() {
        worst = worst.max((row(&qp.a_eq, e) - qp.b_eq[e]).abs());
    }
    for i in 0..qp.a_in.nrows() {
        let slack = row(&qp.a_in, i) - qp.b_in[i];
        worst = worst.max(-slack).max(-sol.y_in[i]).max((slack * sol.y_in[i]).abs());
    }
    for j in 0..n {
        for (bound, y, sign) in [(qp.lower[j], sol.y_lower[j], 1.0), (qp.upper[j], sol.y_upper[j], -1.0)] {
            worst = worst.max(-y);
            if bound.is_finite() {
                let slack = sign * (x[j] - bound);
                worst = worst.max(-slack).max((slack * y).abs());
            } else {
                worst = worst.max(y.abs());
            }
        }
    }
    worst
}

/// Largest independent KKT residual over `count` random feasible QPs of
/// mixed size, rank and constraint structure.
pub fn kkt_sweep(seed: u64, count: usize) -> f64 {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for i in 0..count {
        let n = rng.gen_range(1..25);
        let semidefinite = i % 4 == 3 && n > 1;
        let rank = if semidefinite { rng.gen_range(1..n) } else { n };
        let m_eq = rng.gen_range(0..4).min(n - 1);
        let m_in = rng.gen_range(0..30);
        let boxed = semidefinite || rng.gen_bool(0.5);
        let qp = random_qp(&mut rng, n, rank, m_eq, m_in, boxed);
        let sol = pcc_lmpc::qp::solve_qp(&qp, 1e-10).expect("valid problem");
        // Scored on the returned point itself; the status only reflects the
        // library's own tolerance. An infeasibility verdict is a failure.
        let r = if sol.status == pcc_lmpc::qp::QpStatus::Infeasible {
            f64::INFINITY
        } else {
            independent_kkt(&qp, &sol)
        };
        worst = worst.max(r);
    }
    worst
}

/// Largest objective mismatch against active-set enumeration, relative to
/// `1 + |f*|`, over `count` instances with 20 variables.
pub fn enumeration_sweep(seed: u64, count: usize) -> f64 {
    use rand::SeedableRng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for _ in 0..count {
        let qp = random_qp(&mut rng, 20, 20, 2, 8, false);
        let sol = pcc_lmpc::qp::solve_qp(&qp, 1e-10).expect("valid problem");
        let oracle = enumerate_active_sets(&qp).expect("feasible by construction");
        worst = worst.max((sol.objective - oracle).abs() / (1.0 + oracle.abs()));
    }
    worst
}
