use crate::numcore::linalg::{
    cholesky, cholesky_solve, matmul, matmul_acc, matmul_nt_acc, matmul_tn_acc, transpose,
};
use crate::numcore::{NumError, Tensor};

use super::{
    check_support, BaseLearnerKind, BaseLearnerSolution, Certificate, SolverConfig, SolverError,
};

/// Solves `A v = rhs` for `A = X'X + reg I` (`rhs` is `[D, K]`), factoring
/// whichever of the `D x D` or `M x M` Gram systems is smaller.
struct RegularizedGram {
    l: Vec<f64>,
    x: Vec<f64>,
    m: usize,
    d: usize,
    reg: f64,
    dual: bool,
}

impl RegularizedGram {
    fn new(x: &[f64], m: usize, d: usize, reg: f64) -> Result<Self, NumError> {
        let dual = m < d;
        let mut a = if dual {
            let mut a = vec![0.0; m * m];
            matmul_nt_acc(x, x, &mut a, m, d, m);
            a
        } else {
            let mut a = vec![0.0; d * d];
            matmul_tn_acc(x, x, &mut a, m, d, d);
            a
        };
        let n = if dual { m } else { d };
        for i in 0..n {
            a[i * n + i] += reg;
        }
        let l = cholesky(&a, n).map_err(|_| NumError::Singular {
            block: format!("ridge Gram system ({n}x{n}, reg {reg})"),
        })?;
        Ok(Self {
            l,
            x: x.to_vec(),
            m,
            d,
            reg,
            dual,
        })
    }

    fn solve(&self, rhs: &[f64], k: usize) -> Vec<f64> {
        let (m, d) = (self.m, self.d);
        if !self.dual {
            return cholesky_solve(&self.l, d, rhs, k);
        }
        // (X'X + rI)^-1 = (I - X'(XX' + rI)^-1 X) / r
        let xr = matmul(&self.x, rhs, m, d, k);
        let t = cholesky_solve(&self.l, m, &xr, k);
        let mut out = rhs.to_vec();
        let mut corr = vec![0.0; d * k];
        matmul_tn_acc(&self.x, &t, &mut corr, m, d, k);
        for (o, c) in out.iter_mut().zip(&corr) {
            *o = (*o - c) / self.reg;
        }
        out
    }
}

fn one_hot_targets(labels: &[usize], k: usize) -> Vec<f64> {
    let mut y = vec![0.0; labels.len() * k];
    for (n, &c) in labels.iter().enumerate() {
        y[n * k + c] = 1.0;
    }
    y
}

/// `W = (X'X + reg I)^-1 X'Y` with one-hot `Y`; returned transposed as `[K, D]`.
pub fn ridge_solve(
    features: &Tensor,
    labels: &[usize],
    num_classes: usize,
    cfg: &SolverConfig,
) -> Result<BaseLearnerSolution, SolverError> {
    cfg.validate()?;
    let (m, d) = check_support(features, labels, num_classes)?;
    let k = num_classes;
    let x = features.data();
    let y = one_hot_targets(labels, k);
    let gram = RegularizedGram::new(x, m, d, cfg.ridge_reg)?;
    let mut xty = vec![0.0; d * k];
    matmul_tn_acc(x, &y, &mut xty, m, d, k);
    let w_dk = gram.solve(&xty, k);
    let weights = Tensor::new(&[k, d], transpose(&w_dk, d, k))?;
    Ok(BaseLearnerSolution {
        kind: BaseLearnerKind::Ridge,
        weights,
        duals: None,
        slacks: None,
        iterations: 1,
        kkt_residual: 0.0,
        degenerate_coords: 0,
        cert: Certificate::Ridge {
            features: features.clone(),
            targets: y,
            reg: cfg.ridge_reg,
            k,
        },
    })
}

/// With `P = A^-1 dW`: `dX = Y P' - X W P' - X P W'`.
pub(super) fn backward(
    features: &Tensor,
    y: &[f64],
    reg: f64,
    k: usize,
    weights_kd: &Tensor,
    upstream_kd: &[f64],
) -> Result<Vec<f64>, SolverError> {
    let (m, d) = (features.shape()[0], features.shape()[1]);
    let x = features.data();
    let gram = RegularizedGram::new(x, m, d, reg)?;
    let gbar = transpose(upstream_kd, k, d);
    let p = gram.solve(&gbar, k);
    let w = transpose(weights_kd.data(), k, d);

    let mut out = vec![0.0; m * d];
    // Y P'
    matmul_nt_acc(y, &p, &mut out, m, k, d);
    let xw = matmul(x, &w, m, d, k);
    let xp = matmul(x, &p, m, d, k);
    let mut neg = vec![0.0; m * d];
    matmul_nt_acc(&xw, &p, &mut neg, m, k, d);
    matmul_acc(&xp, weights_kd.data(), &mut neg, m, k, d);
    for (o, n) in out.iter_mut().zip(&neg) {
        *o -= n;
    }
    Ok(out)
}
