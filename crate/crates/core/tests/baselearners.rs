use metalatent::baselearners::{
    episode_ce_loss, fit_on_graph, kkt_residual, qp_solve, ridge_solve, solve_backward,
    svm_cs_objective, svm_cs_solve, BaseLearnerKind, QProblem, SolverConfig, SolverError,
};
use metalatent::numcore::{Graph, Precision, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Plain Gaussian elimination with partial pivoting; `None` when singular.
fn gauss_solve(mut a: Vec<f64>, mut b: Vec<f64>, n: usize) -> Option<Vec<f64>> {
    for col in 0..n {
        let piv =
            (col..n).max_by(|&i, &j| a[i * n + col].abs().total_cmp(&a[j * n + col].abs()))?;
        if a[piv * n + col].abs() < 1e-10 {
            return None;
        }
        for j in 0..n {
            a.swap(col * n + j, piv * n + j);
        }
        b.swap(col, piv);
        for r in 0..n {
            if r != col {
                let f = a[r * n + col] / a[col * n + col];
                if f != 0.0 {
                    for j in 0..n {
                        a[r * n + j] -= f * a[col * n + j];
                    }
                    b[r] -= f * b[col];
                }
            }
        }
    }
    Some((0..n).map(|i| b[i] / a[i * n + i]).collect())
}

fn invert(a: &[f64], n: usize) -> Vec<f64> {
    let mut inv = vec![0.0; n * n];
    for c in 0..n {
        let mut e = vec![0.0; n];
        e[c] = 1.0;
        let col = gauss_solve(a.to_vec(), e, n).unwrap();
        for r in 0..n {
            inv[r * n + c] = col[r];
        }
    }
    inv
}

/// Exact minimum of the multi-class SVM primal found by enumerating, for
/// every example, the set of classes tying for the largest hinge term and
/// the convex weights on those ties. Each pattern fixes a square linear
/// system; the optimum is the pattern whose solution satisfies every sign
/// and ordering condition.
fn svm_support_pattern_oracle(
    f: &[f64],
    labels: &[usize],
    m: usize,
    d: usize,
    k: usize,
    c: f64,
) -> f64 {
    let subsets: Vec<Vec<usize>> = (1u32..(1 << k))
        .map(|mask| (0..k).filter(|j| mask & (1 << j) != 0).collect())
        .collect();
    let loss = |w: &[f64], n: usize, j: usize| {
        let y = labels[n];
        let mut v = if j == y { 0.0 } else { 1.0 };
        for t in 0..d {
            v += (w[j * d + t] - w[y * d + t]) * f[n * d + t];
        }
        v
    };
    let mut best = f64::INFINITY;
    let mut choice = vec![0usize; m];
    'outer: loop {
        let sets: Vec<&Vec<usize>> = choice.iter().map(|&i| &subsets[i]).collect();
        let nl: usize = sets.iter().map(|s| s.len()).sum();
        let nw = k * d;
        let dim = nw + nl + m;
        let mut a = vec![0.0; dim * dim];
        let mut b = vec![0.0; dim];
        let mut lam_index = vec![];
        let mut off = nw;
        for (n, s) in sets.iter().enumerate() {
            for &j in s.iter() {
                lam_index.push((n, j, off));
                off += 1;
            }
        }
        // stationarity in W
        for i in 0..nw {
            a[i * dim + i] = 1.0;
        }
        for &(n, j, col) in &lam_index {
            let y = labels[n];
            for t in 0..d {
                a[(j * d + t) * dim + col] += c * f[n * d + t];
                a[(y * d + t) * dim + col] -= c * f[n * d + t];
            }
        }
        let t_col = nw + nl;
        let mut row = nw;
        for n in 0..m {
            for &(nn, _, col) in &lam_index {
                if nn == n {
                    a[row * dim + col] = 1.0;
                }
            }
            b[row] = 1.0;
            row += 1;
        }
        for &(n, j, _) in &lam_index {
            let y = labels[n];
            for t in 0..d {
                a[row * dim + j * d + t] += f[n * d + t];
                a[row * dim + y * d + t] -= f[n * d + t];
            }
            a[row * dim + t_col + n] = -1.0;
            b[row] = if j == y { 0.0 } else { -1.0 };
            row += 1;
        }
        if let Some(x) = gauss_solve(a, b, dim) {
            let w = &x[..nw];
            let ok_lam = lam_index.iter().all(|&(_, _, col)| x[col] >= -1e-9);
            let ok_max = (0..m).all(|n| (0..k).all(|j| loss(w, n, j) <= x[t_col + n] + 1e-9));
            if ok_lam && ok_max {
                let obj =
                    0.5 * w.iter().map(|v| v * v).sum::<f64>() + c * x[t_col..].iter().sum::<f64>();
                best = best.min(obj);
            }
        }
        for slot in choice.iter_mut() {
            *slot += 1;
            if *slot < subsets.len() {
                continue 'outer;
            }
            *slot = 0;
        }
        break;
    }
    best
}

fn three_class_instance(seed: u64) -> (Tensor, Vec<usize>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = [(1.0, 0.0), (-0.5, 0.85), (-0.5, -0.85)];
    let labels = vec![0, 0, 1, 1, 2, 2];
    let data: Vec<f64> = labels
        .iter()
        .flat_map(|&y| {
            let (cx, cy) = centers[y];
            [
                cx + rng.random_range(-0.6..0.6),
                cy + rng.random_range(-0.6..0.6),
            ]
        })
        .collect();
    (Tensor::new(&[6, 2], data).unwrap(), labels)
}

#[test]
fn svm_matches_support_pattern_enumeration() {
    for (seed, c) in [(1, 0.1), (2, 1.0), (3, 10.0), (4, 0.5), (5, 3.0)] {
        let (f, labels) = three_class_instance(seed);
        let cfg = SolverConfig {
            c,
            ..Default::default()
        };
        let sol = svm_cs_solve(&f, &labels, 3, &cfg).unwrap();
        let ours = svm_cs_objective(&f, &labels, &sol.weights, c);
        let oracle = svm_support_pattern_oracle(f.data(), &labels, 6, 2, 3, c);
        assert!(
            (ours - oracle).abs() <= 1e-4,
            "seed {seed} C {c}: solver {ours} vs enumeration {oracle}"
        );
        assert!(sol.kkt_residual <= 1e-8, "residual {}", sol.kkt_residual);
    }
}

#[test]
fn svm_primal_and_dual_objectives_coincide() {
    let (f, labels) = three_class_instance(9);
    let cfg = SolverConfig {
        c: 1.0,
        ..Default::default()
    };
    let sol = svm_cs_solve(&f, &labels, 3, &cfg).unwrap();
    let alpha = sol.duals.as_ref().unwrap().data();
    let w = sol.weights.data();
    let mut dual = 0.5 * w.iter().map(|v| v * v).sum::<f64>();
    for (n, &y) in labels.iter().enumerate() {
        for j in 0..3 {
            if j != y {
                dual += alpha[n * 3 + j];
            }
        }
    }
    let primal = svm_cs_objective(&f, &labels, &sol.weights, 1.0);
    assert!(
        (primal + dual).abs() < 1e-7,
        "primal {primal} dual-min {dual}"
    );
}

#[test]
fn equality_qp_matches_direct_kkt_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 8;
    let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let mut q = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            q[i * n + j] = (0..n).map(|t| b[i * n + t] * b[j * n + t]).sum::<f64>();
        }
        q[i * n + i] += 0.5;
    }
    let p: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let a: Vec<f64> = (0..n).map(|_| rng.random_range(0.5..1.5)).collect();
    let rhs = 0.7;

    let dim = n + 1;
    let mut kkt = vec![0.0; dim * dim];
    let mut r = vec![0.0; dim];
    for i in 0..n {
        for j in 0..n {
            kkt[i * dim + j] = q[i * n + j];
        }
        kkt[i * dim + n] = a[i];
        kkt[n * dim + i] = a[i];
        r[i] = -p[i];
    }
    r[n] = rhs;
    let direct = gauss_solve(kkt, r, dim).unwrap();

    // wide bounds that stay inactive
    let prob = QProblem {
        n,
        q,
        p,
        a_eq: a,
        b_eq: vec![rhs],
        lower: vec![-1e3; n],
        upper: vec![1e3; n],
    };
    let sol = qp_solve(&prob, 1e-8, 50).unwrap();
    for i in 0..n {
        assert!(
            (sol.x[i] - direct[i]).abs() < 1e-6,
            "x[{i}]: {} vs {}",
            sol.x[i],
            direct[i]
        );
    }
    assert!((sol.y[0] - direct[n]).abs() < 1e-6);
    assert!(kkt_residual(&prob, &sol.x, &sol.y, &sol.z_lower, &sol.z_upper) <= 1e-8);
}

/// Every box-constrained QP of size 5 is checked against enumeration of all
/// 3^5 lower/free/upper patterns.
#[test]
fn box_qp_matches_active_set_enumeration() {
    let n = 5;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let b: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let mut q = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                q[i * n + j] = (0..n).map(|t| b[i * n + t] * b[j * n + t]).sum::<f64>();
            }
            q[i * n + i] += 0.1;
        }
        let p: Vec<f64> = (0..n).map(|_| rng.random_range(-3.0..3.0)).collect();
        let prob = QProblem {
            n,
            q: q.clone(),
            p: p.clone(),
            a_eq: vec![],
            b_eq: vec![],
            lower: vec![-1.0; n],
            upper: vec![1.0; n],
        };
        let sol = qp_solve(&prob, 1e-8, 50).unwrap();

        let mut best = f64::INFINITY;
        for code in 0..3usize.pow(n as u32) {
            let pattern: Vec<usize> = (0..n).map(|i| (code / 3usize.pow(i as u32)) % 3).collect();
            let mut x = vec![0.0; n];
            let free: Vec<usize> = (0..n).filter(|&i| pattern[i] == 1).collect();
            for i in 0..n {
                x[i] = match pattern[i] {
                    0 => -1.0,
                    2 => 1.0,
                    _ => 0.0,
                };
            }
            let nf = free.len();
            let mut a = vec![0.0; nf * nf];
            let mut r = vec![0.0; nf];
            for (ai, &i) in free.iter().enumerate() {
                for (bj, &j) in free.iter().enumerate() {
                    a[ai * nf + bj] = q[i * n + j];
                }
                r[ai] = -p[i]
                    - (0..n)
                        .filter(|j| pattern[*j] != 1)
                        .map(|j| q[i * n + j] * x[j])
                        .sum::<f64>();
            }
            if nf > 0 {
                let Some(xf) = gauss_solve(a, r, nf) else {
                    continue;
                };
                for (ai, &i) in free.iter().enumerate() {
                    x[i] = xf[ai];
                }
            }
            if x.iter().all(|v| (-1.0 - 1e-12..=1.0 + 1e-12).contains(v)) {
                best = best.min(prob.objective(&x));
            }
        }
        let ours = prob.objective(&sol.x);
        assert!((ours - best).abs() < 1e-8, "seed {seed}: {ours} vs {best}");
    }
}

#[test]
fn ridge_matches_explicit_inverse() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for (m, d, k) in [(10, 4, 3), (4, 10, 2), (25, 16, 5)] {
        let x: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..m).map(|i| i % k).collect();
        let reg = 0.7;
        let cfg = SolverConfig {
            ridge_reg: reg,
            ..Default::default()
        };
        let sol = ridge_solve(&Tensor::new(&[m, d], x.clone()).unwrap(), &labels, k, &cfg).unwrap();

        let mut a = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                a[i * d + j] = (0..m).map(|r| x[r * d + i] * x[r * d + j]).sum::<f64>();
            }
            a[i * d + i] += reg;
        }
        let inv = invert(&a, d);
        for c in 0..k {
            for i in 0..d {
                let xty_j = |j: usize| {
                    (0..m)
                        .filter(|&r| labels[r] == c)
                        .map(|r| x[r * d + j])
                        .sum::<f64>()
                };
                let w: f64 = (0..d).map(|j| inv[i * d + j] * xty_j(j)).sum();
                let got = sol.weights.data()[c * d + i];
                assert!(
                    (got - w).abs() < 1e-10,
                    "({m},{d},{k}) w[{c},{i}] {got} vs {w}"
                );
            }
        }
    }
}

fn fd_check(
    kind: BaseLearnerKind,
    m: usize,
    d: usize,
    k: usize,
    seed: u64,
    cfg: &SolverConfig,
) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..m).map(|i| i % k).collect();
    let r: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let solve = |data: &[f64]| {
        let f = Tensor::new(&[m, d], data.to_vec()).unwrap();
        match kind {
            BaseLearnerKind::Ridge => ridge_solve(&f, &labels, k, cfg).unwrap(),
            BaseLearnerKind::Svm => svm_cs_solve(&f, &labels, k, cfg).unwrap(),
        }
    };
    let objective = |data: &[f64]| {
        solve(data)
            .weights
            .data()
            .iter()
            .zip(&r)
            .map(|(a, b)| a * b)
            .sum::<f64>()
    };
    let sol = solve(&x);
    let analytic = solve_backward(&sol, &Tensor::new(&[k, d], r.clone()).unwrap()).unwrap();
    let h = 1e-6;
    let mut worst = 0.0f64;
    for i in 0..m * d {
        let mut xp = x.clone();
        xp[i] += h;
        let mut xm = x.clone();
        xm[i] -= h;
        let fd = (objective(&xp) - objective(&xm)) / (2.0 * h);
        let a = analytic.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-3));
    }
    worst
}

#[test]
fn ridge_implicit_gradient_matches_finite_differences() {
    for (seed, (m, d, k)) in [(1, (6, 4, 3)), (2, (5, 9, 5)), (3, (10, 10, 2))] {
        let err = fd_check(
            BaseLearnerKind::Ridge,
            m,
            d,
            k,
            seed,
            &SolverConfig::default(),
        );
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn svm_implicit_gradient_matches_finite_differences() {
    for (seed, (m, d, k), c) in [
        (1, (6, 8, 3), 0.1),
        (2, (5, 12, 5), 1.0),
        (3, (4, 6, 2), 10.0),
        (4, (10, 16, 5), 0.5),
    ] {
        let cfg = SolverConfig {
            c,
            ..Default::default()
        };
        let err = fd_check(BaseLearnerKind::Svm, m, d, k, seed, &cfg);
        assert!(err < 1e-4, "seed {seed}: relative error {err}");
    }
}

#[test]
fn graph_path_uses_implicit_backward() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (m, d, k) = (6, 8, 3);
    let x: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let labels: Vec<usize> = (0..m).map(|i| i % k).collect();
    for kind in [BaseLearnerKind::Ridge, BaseLearnerKind::Svm] {
        let mut g = Graph::new(Precision::F64);
        let f = g
            .variable(Tensor::new(&[m, d], x.clone()).unwrap())
            .unwrap();
        let (w, sol) = fit_on_graph(&mut g, kind, f, &labels, k, &SolverConfig::default()).unwrap();
        let s = g.sum(w).unwrap();
        let adj = g.backward(s).unwrap();
        let direct = solve_backward(&sol, &Tensor::full(&[k, d], 1.0)).unwrap();
        assert_eq!(adj.wrt(f).data(), direct.data());
    }
}

#[test]
fn solver_errors_are_typed() {
    let f = Tensor::new(&[2, 1], vec![1.0, -1.0]).unwrap();
    let bad = SolverConfig {
        c: -1.0,
        ..Default::default()
    };
    assert!(matches!(
        svm_cs_solve(&f, &[0, 1], 2, &bad),
        Err(SolverError::InvalidConfig(_))
    ));
    let short = SolverConfig {
        max_iters: 1,
        ..Default::default()
    };
    assert!(matches!(
        svm_cs_solve(&f, &[0, 1], 2, &short),
        Err(SolverError::NotConverged { .. })
    ));
}

fn ce_value(logits: &[f64], labels: &[usize], k: usize) -> f64 {
    let mut g = Graph::new(Precision::F64);
    let l = g
        .input(Tensor::new(&[labels.len(), k], logits.to_vec()).unwrap())
        .unwrap();
    let ce = episode_ce_loss(&mut g, l, labels).unwrap();
    g.value(ce).item().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn cross_entropy_is_convex_in_logits(
        a in prop::collection::vec(-5.0f64..5.0, 12),
        b in prop::collection::vec(-5.0f64..5.0, 12),
        t in 0.0f64..1.0,
    ) {
        let labels = [0, 3, 1];
        let mix: Vec<f64> = a.iter().zip(&b).map(|(x, y)| t * x + (1.0 - t) * y).collect();
        let lhs = ce_value(&mix, &labels, 4);
        let rhs = t * ce_value(&a, &labels, 4) + (1.0 - t) * ce_value(&b, &labels, 4);
        prop_assert!(lhs <= rhs + 1e-12);
    }

    #[test]
    fn svm_solutions_satisfy_kkt(seed in 0u64..1000, c in 0.01f64..10.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d, k) = (10, 12, 5);
        let x: Vec<f64> = (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let labels: Vec<usize> = (0..m).map(|i| i % k).collect();
        let cfg = SolverConfig { c, ..Default::default() };
        let sol = svm_cs_solve(&Tensor::new(&[m, d], x).unwrap(), &labels, k, &cfg).unwrap();
        prop_assert!(sol.kkt_residual <= 1e-8);
        let a = sol.duals.unwrap();
        for n in 0..m {
            let row = &a.data()[n * k..(n + 1) * k];
            prop_assert!(row.iter().sum::<f64>().abs() <= 1e-8);
            for (j, v) in row.iter().enumerate() {
                let ub = if j == labels[n] { c } else { 0.0 };
                prop_assert!(*v <= ub + 1e-8);
            }
        }
    }

    #[test]
    fn ridge_weights_shrink_with_regularization(seed in 0u64..1000) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (m, d, k) = (8, 5, 4);
        let x = Tensor::new(&[m, d], (0..m * d).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let labels: Vec<usize> = (0..m).map(|i| i % k).collect();
        let norm = |reg: f64| {
            let cfg = SolverConfig { ridge_reg: reg, ..Default::default() };
            ridge_solve(&x, &labels, k, &cfg).unwrap().weights.data().iter().map(|v| v * v).sum::<f64>()
        };
        prop_assert!(norm(2.0) <= norm(1.0) + 1e-12);
    }
}
