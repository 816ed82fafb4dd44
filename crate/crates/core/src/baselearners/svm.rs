use crate::numcore::linalg::{dot, matmul, matmul_acc, matmul_nt_acc, Lu};
use crate::numcore::Tensor;

use super::qp::{qp_solve, BoundState, QProblem};
use super::{
    check_support, BaseLearnerKind, BaseLearnerSolution, Certificate, SolverConfig, SolverError,
};

const DEGENERACY_EPS: f64 = 1e-6;

/// Multi-class SVM with one slack per example, solved in the dual:
///
/// ```text
/// min_a  1/2 sum_k a_k' G a_k + sum_{n,k} a_{n,k} (1 - [k = y_n])
/// s.t.   sum_k a_{n,k} = 0,   a_{n,k} <= C [k = y_n]
/// ```
///
/// with `G = F F'` and `w_k = sum_n a_{n,k} f_n`.
pub fn svm_cs_solve(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    cfg: &SolverConfig,
) -> Result<BaseLearnerSolution, SolverError> {
    cfg.validate()?;
    let (m, d) = check_support(features, labels, num_classes)?;
    let k = num_classes;
    let f = features.data();
    let mut gram = vec![0.0; m * m];
    matmul_nt_acc(f, f, &mut gram, m, d, m);

    let n = m * k;
    let mut q = vec![0.0; n * n];
    for a in 0..m {
        for b in 0..m {
            let gab = gram[a * m + b];
            for c in 0..k {
                q[(a * k + c) * n + b * k + c] = gab;
            }
        }
    }
    let mut p = vec![1.0; n];
    let mut upper = vec![0.0; n];
    for (a, &y) in labels.iter().enumerate() {
        p[a * k + y] = 0.0;
        upper[a * k + y] = cfg.c;
    }
    let mut a_eq = vec![0.0; m * n];
    for a in 0..m {
        for c in 0..k {
            a_eq[a * n + a * k + c] = 1.0;
        }
    }
    let prob = QProblem {
        n,
        q,
        p,
        a_eq,
        b_eq: vec![0.0; m],
        lower: vec![f64::NEG_INFINITY; n],
        upper,
    };
    let qp = qp_solve(&prob, cfg.tol, cfg.max_iters)?;

    let degenerate = (0..n)
        .filter(|&i| {
            let slack = prob.upper[i] - qp.x[i];
            slack.abs() <= DEGENERACY_EPS * cfg.c.max(1.0) && qp.z_upper[i].abs() <= DEGENERACY_EPS
        })
        .count();
    if degenerate > 0 {
        log::debug!("svm dual: {degenerate} coordinate(s) with vanishing slack and multiplier");
    }

    let alpha = qp.x.clone();
    let mut w = vec![0.0; k * d];
    // w = alpha' F
    for a in 0..m {
        for c in 0..k {
            let v = alpha[a * k + c];
            if v != 0.0 {
                for (wi, fi) in w[c * d..(c + 1) * d].iter_mut().zip(&f[a * d..(a + 1) * d]) {
                    *wi += v * fi;
                }
            }
        }
    }
    let weights = Tensor::new(&[k, d], w)?;
    let slacks = slacks(f, labels, weights.data(), m, d, k);
    let free = (0..n)
        .filter(|&i| qp.state[i] == BoundState::Free)
        .collect();
    Ok(BaseLearnerSolution {
        kind: BaseLearnerKind::Svm,
        weights,
        duals: Some(Tensor::new(&[m, k], alpha.clone())?),
        slacks: Some(slacks),
        iterations: qp.iterations,
        kkt_residual: qp.residual,
        degenerate_coords: degenerate,
        cert: Certificate::Svm {
            features: features.clone(),
            alpha,
            free,
            k,
        },
    })
}

fn slacks(f: &[f64], labels: &[usize], w: &[f64], m: usize, d: usize, k: usize) -> Vec<f64> {
    (0..m)
        .map(|a| {
            let row = &f[a * d..(a + 1) * d];
            let sy = dot(&w[labels[a] * d..(labels[a] + 1) * d], row);
            (0..k)
                .map(|c| {
                    let margin = if c == labels[a] { 0.0 } else { 1.0 };
                    margin + dot(&w[c * d..(c + 1) * d], row) - sy
                })
                .fold(0.0, f64::max)
        })
        .collect()
}

/// Primal objective `1/2 ||W||^2 + C sum_n xi_n` for weights `[K, D]`.
pub fn svm_cs_objective(features: &Tensor, labels: &[usize], weights: &Tensor, c: f64) -> f64 {
    let (m, d) = (features.shape()[0], features.shape()[1]);
    let k = weights.shape()[0];
    let w = weights.data();
    0.5 * dot(w, w)
        + c * slacks(features.data(), labels, w, m, d, k)
            .iter()
            .sum::<f64>()
}

/// Differentiates the stationarity and equality conditions on the free
/// coordinates; coordinates at their bound do not move with `F`.
pub(super) fn backward(
    features: &Tensor,
    alpha: &[f64],
    free: &[usize],
    k: usize,
    upstream_kd: &[f64],
) -> Result<Vec<f64>, SolverError> {
    let (m, d) = (features.shape()[0], features.shape()[1]);
    let f = features.data();

    // direct path through w = alpha' F
    let mut fbar = matmul(alpha, upstream_kd, m, k, d);
    let mut abar = vec![0.0; m * k];
    matmul_nt_acc(f, upstream_kd, &mut abar, m, d, k);

    let mut gram = vec![0.0; m * m];
    matmul_nt_acc(f, f, &mut gram, m, d, m);

    let rows: Vec<usize> = (0..m)
        .filter(|&a| free.iter().any(|&i| i / k == a))
        .collect();
    let nf = free.len();
    let dim = nf + rows.len();
    let mut kkt = vec![0.0; dim * dim];
    let mut rhs = vec![0.0; dim];
    for (i, &fi) in free.iter().enumerate() {
        let (a, c) = (fi / k, fi % k);
        for (j, &fj) in free.iter().enumerate() {
            if fj % k == c {
                kkt[i * dim + j] = gram[a * m + fj / k];
            }
        }
        if let Some(r) = rows.iter().position(|&row| row == a) {
            kkt[i * dim + nf + r] = 1.0;
            kkt[(nf + r) * dim + i] = 1.0;
        }
        rhs[i] = abar[fi];
    }
    if dim > 0 {
        let lu = Lu::factor(&kkt, dim, 1e-12).map_err(|_| {
            SolverError::Degenerate(format!(
                "svm implicit-gradient KKT block ({nf} free duals, {} equality rows)",
                rows.len()
            ))
        })?;
        let sol = lu.solve(&rhs);
        let mut v = vec![0.0; m * k];
        for (i, &fi) in free.iter().enumerate() {
            v[fi] = sol[i];
        }
        // Gbar = -V A'; F gets (Gbar + Gbar') F
        let mut gbar = vec![0.0; m * m];
        matmul_nt_acc(&v, alpha, &mut gbar, m, k, m);
        let mut sym = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                sym[a * m + b] = -(gbar[a * m + b] + gbar[b * m + a]);
            }
        }
        matmul_acc(&sym, f, &mut fbar, m, m, d);
    }
    Ok(fbar)
}
