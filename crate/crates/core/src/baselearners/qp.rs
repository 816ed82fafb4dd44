//! Dense primal-dual interior point method for small convex QPs:
//!
//! ```text
//! min 1/2 x'Qx + p'x   s.t.  A x = b,  l <= x <= u
//! ```
//!
//! Mehrotra predictor-corrector on the reduced KKT system, followed by an
//! active-set polish once the barrier parameter is small. The polish solves
//! the equality-constrained problem on the identified free set exactly, so
//! converged solutions carry complementarity of zero and bound multipliers
//! consistent with implicit differentiation.

use crate::numcore::linalg::{dot, Lu};

use super::SolverError;

#[derive(Clone, Debug, PartialEq)]
pub struct QProblem {
    pub n: usize,
    /// `n x n`, symmetric positive semidefinite, row-major.
    pub q: Vec<f64>,
    pub p: Vec<f64>,
    /// `m x n`, row-major.
    pub a_eq: Vec<f64>,
    pub b_eq: Vec<f64>,
    /// `-inf` marks a missing bound.
    pub lower: Vec<f64>,
    /// `+inf` marks a missing bound.
    pub upper: Vec<f64>,
}

impl QProblem {
    pub fn unconstrained(q: Vec<f64>, p: Vec<f64>) -> Self {
        let n = p.len();
        Self {
            n,
            q,
            p,
            a_eq: vec![],
            b_eq: vec![],
            lower: vec![f64::NEG_INFINITY; n],
            upper: vec![f64::INFINITY; n],
        }
    }

    pub fn n_eq(&self) -> usize {
        self.b_eq.len()
    }

    pub fn validate(&self) -> Result<(), SolverError> {
        let n = self.n;
        let m = self.n_eq();
        if self.q.len() != n * n
            || self.p.len() != n
            || self.a_eq.len() != m * n
            || self.lower.len() != n
            || self.upper.len() != n
        {
            return Err(SolverError::InvalidProblem(
                "inconsistent QP dimensions".into(),
            ));
        }
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (self.q[i * n + j], self.q[j * n + i]);
                if (a - b).abs() > 1e-12 * (1.0 + a.abs().max(b.abs())) {
                    return Err(SolverError::InvalidProblem(format!(
                        "Q is not symmetric at ({i},{j})"
                    )));
                }
            }
        }
        for i in 0..n {
            if self.lower[i] > self.upper[i] {
                return Err(SolverError::Infeasible(format!(
                    "bound {i}: lower {} exceeds upper {}",
                    self.lower[i], self.upper[i]
                )));
            }
        }
        Ok(())
    }

    pub fn objective(&self, x: &[f64]) -> f64 {
        let qx = self.q_times(x);
        0.5 * dot(x, &qx) + dot(&self.p, x)
    }

    fn q_times(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n)
            .map(|i| dot(&self.q[i * self.n..(i + 1) * self.n], x))
            .collect()
    }

    fn at_times(&self, y: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.n];
        for (r, yr) in y.iter().enumerate() {
            for (o, a) in out.iter_mut().zip(&self.a_eq[r * self.n..(r + 1) * self.n]) {
                *o += a * yr;
            }
        }
        out
    }

    fn a_times(&self, x: &[f64]) -> Vec<f64> {
        (0..self.n_eq())
            .map(|r| dot(&self.a_eq[r * self.n..(r + 1) * self.n], x))
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundState {
    Free,
    AtLower,
    AtUpper,
}

#[derive(Clone, Debug, PartialEq)]
pub struct QpSolution {
    pub x: Vec<f64>,
    /// Equality multipliers: `Qx + p + A'y - z_lower + z_upper = 0`.
    pub y: Vec<f64>,
    pub z_lower: Vec<f64>,
    pub z_upper: Vec<f64>,
    pub state: Vec<BoundState>,
    pub iterations: usize,
    pub residual: f64,
    pub polished: bool,
}

impl QpSolution {
    pub fn free_indices(&self) -> Vec<usize> {
        (0..self.x.len())
            .filter(|&i| self.state[i] == BoundState::Free)
            .collect()
    }
}

/// Max of stationarity, primal feasibility, bound violation, negative
/// multipliers and complementarity, all in the infinity norm.
pub fn kkt_residual(prob: &QProblem, x: &[f64], y: &[f64], zl: &[f64], zu: &[f64]) -> f64 {
    let qx = prob.q_times(x);
    let aty = prob.at_times(y);
    let mut r = 0.0f64;
    for i in 0..prob.n {
        r = r.max((qx[i] + prob.p[i] + aty[i] - zl[i] + zu[i]).abs());
        r = r.max(-zl[i]).max(-zu[i]);
        if prob.lower[i].is_finite() {
            let s = x[i] - prob.lower[i];
            r = r.max(-s).max((s * zl[i]).abs());
        }
        if prob.upper[i].is_finite() {
            let s = prob.upper[i] - x[i];
            r = r.max(-s).max((s * zu[i]).abs());
        }
    }
    for (ax, b) in prob.a_times(x).iter().zip(&prob.b_eq) {
        r = r.max((ax - b).abs());
    }
    r
}

const STEP_FRACTION: f64 = 0.99;
const POLISH_MU: f64 = 1e-5;

pub fn qp_solve(prob: &QProblem, tol: f64, max_iters: usize) -> Result<QpSolution, SolverError> {
    prob.validate()?;
    if tol <= 0.0 {
        return Err(SolverError::InvalidConfig("tol must be positive".into()));
    }
    let n = prob.n;
    let m = prob.n_eq();
    let has_l: Vec<bool> = prob.lower.iter().map(|v| v.is_finite()).collect();
    let has_u: Vec<bool> = prob.upper.iter().map(|v| v.is_finite()).collect();
    let n_bounds = has_l.iter().chain(&has_u).filter(|&&b| b).count();

    let mut x: Vec<f64> = (0..n)
        .map(|i| match (has_l[i], has_u[i]) {
            (true, true) if prob.upper[i] - prob.lower[i] > 0.0 => {
                0.5 * (prob.lower[i] + prob.upper[i])
            }
            (true, true) => prob.lower[i],
            (true, false) => prob.lower[i] + 1.0,
            (false, true) => prob.upper[i] - 1.0,
            (false, false) => 0.0,
        })
        .collect();
    let mut y = vec![0.0; m];
    let mut zl: Vec<f64> = has_l.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let mut zu: Vec<f64> = has_u.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    for i in 0..n {
        if has_l[i] && has_u[i] && prob.upper[i] == prob.lower[i] {
            return Err(SolverError::InvalidProblem(format!(
                "variable {i} has equal bounds; eliminate it before solving"
            )));
        }
    }

    let mut last_residual = f64::INFINITY;
    let mut rp_start = None;
    for iter in 0..max_iters {
        let qx = prob.q_times(&x);
        let aty = prob.at_times(&y);
        let rd: Vec<f64> = (0..n)
            .map(|i| qx[i] + prob.p[i] + aty[i] - zl[i] + zu[i])
            .collect();
        let rp: Vec<f64> = prob
            .a_times(&x)
            .iter()
            .zip(&prob.b_eq)
            .map(|(a, b)| a - b)
            .collect();
        rp_start.get_or_insert_with(|| rp.iter().fold(0.0f64, |m, v| m.max(v.abs())));
        // rounding can land an iterate exactly on its bound
        let floor = |b: f64| f64::EPSILON * b.abs().max(1.0);
        let sl: Vec<f64> = (0..n)
            .map(|i| {
                if has_l[i] {
                    (x[i] - prob.lower[i]).max(floor(prob.lower[i]))
                } else {
                    1.0
                }
            })
            .collect();
        let su: Vec<f64> = (0..n)
            .map(|i| {
                if has_u[i] {
                    (prob.upper[i] - x[i]).max(floor(prob.upper[i]))
                } else {
                    1.0
                }
            })
            .collect();
        let mu = if n_bounds > 0 {
            (0..n)
                .map(|i| {
                    (if has_l[i] { sl[i] * zl[i] } else { 0.0 })
                        + (if has_u[i] { su[i] * zu[i] } else { 0.0 })
                })
                .sum::<f64>()
                / n_bounds as f64
        } else {
            0.0
        };
        last_residual = kkt_residual(prob, &x, &y, &zl, &zu);
        if last_residual <= tol {
            return Ok(finish(
                prob,
                x,
                y,
                zl,
                zu,
                iter,
                last_residual,
                false,
                &has_l,
                &has_u,
            ));
        }
        if x.iter().any(|v| v.abs() > 1e12) {
            return Err(SolverError::Unbounded);
        }
        if mu < POLISH_MU && n_bounds > 0 {
            if let Some(sol) = polish(prob, &x, &sl, &su, &zl, &zu, &has_l, &has_u, iter, tol) {
                return Ok(sol);
            }
        }

        let d: Vec<f64> = (0..n)
            .map(|i| {
                (if has_l[i] { zl[i] / sl[i] } else { 0.0 })
                    + (if has_u[i] { zu[i] / su[i] } else { 0.0 })
            })
            .collect();
        let dim = n + m;
        let mut kkt = vec![0.0; dim * dim];
        for i in 0..n {
            for j in 0..n {
                kkt[i * dim + j] = prob.q[i * n + j];
            }
            kkt[i * dim + i] += d[i];
        }
        for r in 0..m {
            for j in 0..n {
                let a = prob.a_eq[r * n + j];
                kkt[(n + r) * dim + j] = a;
                kkt[j * dim + n + r] = a;
            }
        }
        let lu = match Lu::factor(&kkt, dim, 1e-14) {
            Ok(lu) => lu,
            Err(_) if n_bounds > 0 => {
                // barrier terms spanning many decades; retry with a small
                // quasi-definite shift, which only perturbs the search direction
                let big = (0..n).fold(1.0f64, |a, i| a.max(kkt[i * dim + i].abs()));
                let reg = 1e-12 * big;
                for i in 0..n {
                    kkt[i * dim + i] += reg;
                }
                for r in 0..m {
                    kkt[(n + r) * dim + n + r] -= reg;
                }
                Lu::factor(&kkt, dim, 1e-16).map_err(|_| {
                    SolverError::Degenerate(format!(
                        "interior-point KKT system at iteration {iter}"
                    ))
                })?
            }
            Err(_) => return Err(SolverError::Unbounded),
        };

        // Newton direction for complementarity targets rc_l, rc_u
        let direction = |rcl: &[f64], rcu: &[f64]| {
            let mut rhs = vec![0.0; dim];
            for i in 0..n {
                let mut v = -rd[i];
                if has_l[i] {
                    v += rcl[i] / sl[i];
                }
                if has_u[i] {
                    v -= rcu[i] / su[i];
                }
                rhs[i] = v;
            }
            for r in 0..m {
                rhs[n + r] = -rp[r];
            }
            let sol = lu.solve(&rhs);
            let dx = sol[..n].to_vec();
            let dy = sol[n..].to_vec();
            let dzl: Vec<f64> = (0..n)
                .map(|i| {
                    if has_l[i] {
                        (rcl[i] - zl[i] * dx[i]) / sl[i]
                    } else {
                        0.0
                    }
                })
                .collect();
            let dzu: Vec<f64> = (0..n)
                .map(|i| {
                    if has_u[i] {
                        (rcu[i] + zu[i] * dx[i]) / su[i]
                    } else {
                        0.0
                    }
                })
                .collect();
            (dx, dy, dzl, dzu)
        };
        let max_step = |dx: &[f64], dzl: &[f64], dzu: &[f64]| {
            let mut a = 1.0f64;
            for i in 0..n {
                if has_l[i] {
                    if dx[i] < 0.0 {
                        a = a.min(-sl[i] / dx[i]);
                    }
                    if dzl[i] < 0.0 {
                        a = a.min(-zl[i] / dzl[i]);
                    }
                }
                if has_u[i] {
                    if dx[i] > 0.0 {
                        a = a.min(su[i] / dx[i]);
                    }
                    if dzu[i] < 0.0 {
                        a = a.min(-zu[i] / dzu[i]);
                    }
                }
            }
            a
        };

        let (dx, dy, dzl, dzu) = if n_bounds == 0 {
            direction(&vec![0.0; n], &vec![0.0; n])
        } else {
            let rcl: Vec<f64> = (0..n)
                .map(|i| if has_l[i] { -sl[i] * zl[i] } else { 0.0 })
                .collect();
            let rcu: Vec<f64> = (0..n)
                .map(|i| if has_u[i] { -su[i] * zu[i] } else { 0.0 })
                .collect();
            let (ax, _, azl, azu) = direction(&rcl, &rcu);
            let a_aff = max_step(&ax, &azl, &azu);
            let mut mu_aff = 0.0;
            for i in 0..n {
                if has_l[i] {
                    mu_aff += (sl[i] + a_aff * ax[i]) * (zl[i] + a_aff * azl[i]);
                }
                if has_u[i] {
                    mu_aff += (su[i] - a_aff * ax[i]) * (zu[i] + a_aff * azu[i]);
                }
            }
            mu_aff /= n_bounds as f64;
            let sigma = (mu_aff / mu).powi(3).clamp(0.0, 1.0);
            let rcl: Vec<f64> = (0..n)
                .map(|i| {
                    if has_l[i] {
                        sigma * mu - sl[i] * zl[i] - ax[i] * azl[i]
                    } else {
                        0.0
                    }
                })
                .collect();
            let rcu: Vec<f64> = (0..n)
                .map(|i| {
                    if has_u[i] {
                        sigma * mu - su[i] * zu[i] + ax[i] * azu[i]
                    } else {
                        0.0
                    }
                })
                .collect();
            direction(&rcl, &rcu)
        };
        let alpha = if n_bounds == 0 {
            1.0
        } else {
            (STEP_FRACTION * max_step(&dx, &dzl, &dzu)).min(1.0)
        };
        for i in 0..n {
            x[i] += alpha * dx[i];
            zl[i] += alpha * dzl[i];
            zu[i] += alpha * dzu[i];
        }
        for r in 0..m {
            y[r] += alpha * dy[r];
        }
    }
    if n_bounds > 0 {
        let sl: Vec<f64> = (0..n)
            .map(|i| if has_l[i] { x[i] - prob.lower[i] } else { 1.0 })
            .collect();
        let su: Vec<f64> = (0..n)
            .map(|i| if has_u[i] { prob.upper[i] - x[i] } else { 1.0 })
            .collect();
        if let Some(sol) = polish(prob, &x, &sl, &su, &zl, &zu, &has_l, &has_u, max_iters, tol) {
            return Ok(sol);
        }
    }
    let rp_norm = prob
        .a_times(&x)
        .iter()
        .zip(&prob.b_eq)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    // equality residual that never shrank means no feasible point exists
    let stalled = rp_start.is_some_and(|r0| rp_norm > 1e-6 && rp_norm > 0.1 * r0);
    if max_iters >= 10 && stalled {
        return Err(SolverError::Infeasible(format!(
            "equality residual {rp_norm:e} after {max_iters} iterations"
        )));
    }
    Err(SolverError::NotConverged {
        residual: last_residual,
        iterations: max_iters,
    })
}

#[allow(clippy::too_many_arguments)]
fn finish(
    prob: &QProblem,
    x: Vec<f64>,
    y: Vec<f64>,
    zl: Vec<f64>,
    zu: Vec<f64>,
    iterations: usize,
    residual: f64,
    polished: bool,
    has_l: &[bool],
    has_u: &[bool],
) -> QpSolution {
    let state = (0..prob.n)
        .map(|i| {
            if has_u[i] && prob.upper[i] - x[i] <= zu[i] {
                BoundState::AtUpper
            } else if has_l[i] && x[i] - prob.lower[i] <= zl[i] {
                BoundState::AtLower
            } else {
                BoundState::Free
            }
        })
        .collect();
    QpSolution {
        x,
        y,
        z_lower: zl,
        z_upper: zu,
        state,
        iterations,
        residual,
        polished,
    }
}

const POLISH_ROUNDS: usize = 6;

/// Fixes the coordinates whose slack is smaller than their multiplier and
/// solves the remaining equality-constrained QP directly. A bound violated
/// by the solve, or a fixed coordinate with a wrong-signed multiplier,
/// updates the guess for another round.
#[allow(clippy::too_many_arguments)]
fn polish(
    prob: &QProblem,
    x: &[f64],
    sl: &[f64],
    su: &[f64],
    zl: &[f64],
    zu: &[f64],
    has_l: &[bool],
    has_u: &[bool],
    iter: usize,
    tol: f64,
) -> Option<QpSolution> {
    let n = prob.n;
    let mut state = vec![BoundState::Free; n];
    for i in 0..n {
        if has_u[i] && su[i] < zu[i] {
            state[i] = BoundState::AtUpper;
        } else if has_l[i] && sl[i] < zl[i] {
            state[i] = BoundState::AtLower;
        }
    }
    let mut xp = x.to_vec();
    for _ in 0..POLISH_ROUNDS {
        let (sol, z_lower, z_upper, y) = solve_active_set(prob, &state, &xp)?;
        xp = sol;
        let residual = kkt_residual(prob, &xp, &y, &z_lower, &z_upper);
        if residual <= tol {
            return Some(QpSolution {
                x: xp,
                y,
                z_lower,
                z_upper,
                state,
                iterations: iter,
                residual,
                polished: true,
            });
        }
        let mut changed = false;
        for i in 0..n {
            let next = match state[i] {
                BoundState::Free if has_u[i] && xp[i] > prob.upper[i] => BoundState::AtUpper,
                BoundState::Free if has_l[i] && xp[i] < prob.lower[i] => BoundState::AtLower,
                BoundState::AtUpper if z_upper[i] < 0.0 => BoundState::Free,
                BoundState::AtLower if z_lower[i] < 0.0 => BoundState::Free,
                s => s,
            };
            changed |= next != state[i];
            state[i] = next;
        }
        if !changed {
            return None;
        }
    }
    None
}

/// Equality-constrained solve with the non-free coordinates pinned to their
/// bounds; returns `(x, z_lower, z_upper, y)`.
fn solve_active_set(
    prob: &QProblem,
    state: &[BoundState],
    x: &[f64],
) -> Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)> {
    let n = prob.n;
    let m = prob.n_eq();
    let mut xp = x.to_vec();
    for i in 0..n {
        match state[i] {
            BoundState::AtUpper => xp[i] = prob.upper[i],
            BoundState::AtLower => xp[i] = prob.lower[i],
            BoundState::Free => {}
        }
    }
    let free: Vec<usize> = (0..n).filter(|&i| state[i] == BoundState::Free).collect();
    let nf = free.len();
    let dim = nf + m;
    let mut kkt = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim];
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            kkt[a * dim + b] = prob.q[i * n + j];
        }
        let mut r = -prob.p[i];
        for j in 0..n {
            if state[j] != BoundState::Free {
                r -= prob.q[i * n + j] * xp[j];
            }
        }
        rhs[a] = r;
    }
    for r in 0..m {
        for (a, &j) in free.iter().enumerate() {
            let v = prob.a_eq[r * n + j];
            kkt[(nf + r) * dim + a] = v;
            kkt[a * dim + nf + r] = v;
        }
        let mut b = prob.b_eq[r];
        for j in 0..n {
            if state[j] != BoundState::Free {
                b -= prob.a_eq[r * n + j] * xp[j];
            }
        }
        rhs[nf + r] = b;
    }
    let lu = Lu::factor(&kkt, dim, 1e-13).ok()?;
    let mut sol = lu.solve(&rhs);
    // one step of iterative refinement against the unfactored system
    let mut res = rhs.clone();
    for i in 0..dim {
        res[i] -= dot(&kkt[i * dim..(i + 1) * dim], &sol);
    }
    for (s, c) in sol.iter_mut().zip(lu.solve(&res)) {
        *s += c;
    }
    for (a, &i) in free.iter().enumerate() {
        xp[i] = sol[a];
    }
    let y = sol[nf..].to_vec();
    let qx = prob.q_times(&xp);
    let aty = prob.at_times(&y);
    let mut zl = vec![0.0; n];
    let mut zu = vec![0.0; n];
    for i in 0..n {
        let g = qx[i] + prob.p[i] + aty[i];
        match state[i] {
            BoundState::AtUpper => zu[i] = -g,
            BoundState::AtLower => zl[i] = g,
            BoundState::Free => {}
        }
    }
    Some((xp, zl, zu, y))
}
