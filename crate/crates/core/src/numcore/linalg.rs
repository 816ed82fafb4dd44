//! Dense row-major kernels shared by the graph ops and the convex solvers.

use super::NumError;

/// `c[m,n] = a[m,k] * b[k,n]`
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    matmul_acc(a, b, &mut c, m, k, n);
    c
}

/// `c[m,n] += a[m,k] * b[k,n]`
pub fn matmul_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(a, (k, 1), b, (n, 1), c, m, k, n);
}

/// `c[k,n] += a[m,k]^T * b[m,n]`
pub fn matmul_tn_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, k: usize, n: usize) {
    gemm_acc(a, (1, k), b, (n, 1), c, k, m, n);
}

/// `c[m,k] += a[m,n] * b[k,n]^T`
pub fn matmul_nt_acc(a: &[f64], b: &[f64], c: &mut [f64], m: usize, n: usize, k: usize) {
    gemm_acc(a, (n, 1), b, (1, n), c, m, n, k);
}

/// `c[m,n] += op(a)[m,k] * op(b)[k,n]` with `(row, col)` strides for each operand.
#[allow(clippy::too_many_arguments)]
fn gemm_acc(
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    c: &mut [f64],
    m: usize,
    k: usize,
    n: usize,
) {
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let span =
        |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs + 1;
    assert!(a.len() >= span(m, k, rsa, csa), "gemm: lhs too short");
    assert!(b.len() >= span(k, n, rsb, csb), "gemm: rhs too short");
    assert!(c.len() >= m * n, "gemm: output too short");
    // SAFETY: the asserts above bound every index the kernel touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            1.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    // four partial sums so the loop vectorizes
    let mut acc = [0.0; 4];
    let mut ca = a.chunks_exact(4);
    let mut cb = b.chunks_exact(4);
    for (x, y) in ca.by_ref().zip(cb.by_ref()) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let tail: f64 = ca
        .remainder()
        .iter()
        .zip(cb.remainder())
        .map(|(x, y)| x * y)
        .sum();
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
pub fn cholesky(a: &[f64], n: usize) -> Result<Vec<f64>, NumError> {
    let mut l = vec![0.0; n * n];
    for j in 0..n {
        let mut d = a[j * n + j];
        for p in 0..j {
            d -= l[j * n + p] * l[j * n + p];
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(NumError::Singular {
                block: format!("cholesky pivot {j}"),
            });
        }
        let d = d.sqrt();
        l[j * n + j] = d;
        for i in j + 1..n {
            let mut s = a[i * n + j];
            for p in 0..j {
                s -= l[i * n + p] * l[j * n + p];
            }
            l[i * n + j] = s / d;
        }
    }
    Ok(l)
}

/// Solves `L L^T X = B` for `nrhs` right-hand sides stored row-major in `b[n, nrhs]`.
pub fn cholesky_solve(l: &[f64], n: usize, b: &[f64], nrhs: usize) -> Vec<f64> {
    let mut x = b.to_vec();
    for r in 0..nrhs {
        for i in 0..n {
            let mut s = x[i * nrhs + r];
            for p in 0..i {
                s -= l[i * n + p] * x[p * nrhs + r];
            }
            x[i * nrhs + r] = s / l[i * n + i];
        }
        for i in (0..n).rev() {
            let mut s = x[i * nrhs + r];
            for p in i + 1..n {
                s -= l[p * n + i] * x[p * nrhs + r];
            }
            x[i * nrhs + r] = s / l[i * n + i];
        }
    }
    x
}

/// LU factorization with partial pivoting, for symmetric indefinite KKT systems.
#[derive(Clone, Debug)]
pub struct Lu {
    n: usize,
    lu: Vec<f64>,
    perm: Vec<usize>,
}

impl Lu {
    /// Factors `a[n,n]`; pivots below `pivot_tol * max|a|` are treated as singular.
    pub fn factor(a: &[f64], n: usize, pivot_tol: f64) -> Result<Self, NumError> {
        let mut lu = a.to_vec();
        let mut perm: Vec<usize> = (0..n).collect();
        let scale = a
            .iter()
            .fold(0.0f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        for col in 0..n {
            let (piv, pmax) =
                (col..n)
                    .map(|r| (r, lu[r * n + col].abs()))
                    .fold(
                        (col, -1.0),
                        |best, cur| if cur.1 > best.1 { cur } else { best },
                    );
            if pmax <= pivot_tol * scale || !pmax.is_finite() {
                return Err(NumError::Singular {
                    block: format!("pivot column {col}"),
                });
            }
            if piv != col {
                for j in 0..n {
                    lu.swap(col * n + j, piv * n + j);
                }
                perm.swap(col, piv);
            }
            let d = lu[col * n + col];
            for r in col + 1..n {
                let f = lu[r * n + col] / d;
                lu[r * n + col] = f;
                if f != 0.0 {
                    for j in col + 1..n {
                        lu[r * n + j] -= f * lu[col * n + j];
                    }
                }
            }
        }
        Ok(Self { n, lu, perm })
    }

    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut x: Vec<f64> = self.perm.iter().map(|&p| b[p]).collect();
        for i in 0..n {
            let mut s = x[i];
            for j in 0..i {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s;
        }
        for i in (0..n).rev() {
            let mut s = x[i];
            for j in i + 1..n {
                s -= self.lu[i * n + j] * x[j];
            }
            x[i] = s / self.lu[i * n + i];
        }
        x
    }
}

pub fn solve_dense(a: &[f64], n: usize, b: &[f64]) -> Result<Vec<f64>, NumError> {
    Ok(Lu::factor(a, n, 1e-14)?.solve(b))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    #[test]
    fn transposed_products_match_explicit_transpose() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..15).map(|i| (i as f64 * 0.71).cos()).collect();
        // a: [4,3], b: [3,5]
        for (x, y) in matmul(&a, &b, 4, 3, 5).iter().zip(&naive(&a, &b, 4, 3, 5)) {
            assert!((x - y).abs() < 1e-12);
        }

        // a^T b with a: [4,3], c: [4,5]
        let c: Vec<f64> = (0..20).map(|i| i as f64 - 7.0).collect();
        let mut out = vec![0.0; 15];
        matmul_tn_acc(&a, &c, &mut out, 4, 3, 5);
        let want = naive(&transpose(&a, 4, 3), &c, 3, 4, 5);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        // c b^T with c: [4,5], b': [3,5]
        let mut out = vec![0.0; 12];
        matmul_nt_acc(&c, &b, &mut out, 4, 5, 3);
        let want = naive(&c, &transpose(&b, 3, 5), 4, 5, 3);
        for (x, y) in out.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn cholesky_and_lu_agree() {
        let n = 4;
        let r: Vec<f64> = (0..16).map(|i| ((i * 7 % 11) as f64 - 5.0) / 3.0).collect();
        let mut a = naive(&transpose(&r, n, n), &r, n, n, n);
        for i in 0..n {
            a[i * n + i] += 0.5;
        }
        let b = vec![1.0, -2.0, 0.5, 3.0];
        let l = cholesky(&a, n).unwrap();
        let x1 = cholesky_solve(&l, n, &b, 1);
        let x2 = solve_dense(&a, n, &b).unwrap();
        for (p, q) in x1.iter().zip(&x2) {
            assert!((p - q).abs() < 1e-10);
        }
        let back = naive(&a, &x1, n, n, 1);
        for (p, q) in back.iter().zip(&b) {
            assert!((p - q).abs() < 1e-10);
        }
    }

    #[test]
    fn singular_matrix_is_reported() {
        let a = vec![1.0, 2.0, 2.0, 4.0];
        assert!(matches!(
            solve_dense(&a, 2, &[1.0, 1.0]),
            Err(NumError::Singular { .. })
        ));
        assert!(cholesky(&a, 2).is_err());
    }
}
