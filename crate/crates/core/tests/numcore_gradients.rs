//! Reverse-mode gradients of every primitive against central differences,
//! plus naive-loop forward oracles.

use metalatent::numcore::gradcheck::{finite_difference_gradient, max_relative_error};
use metalatent::numcore::{Graph, NodeId, NumError, ParamSet, Precision, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;
const FLOOR: f64 = 1e-3;

#[derive(Clone, Copy)]
enum Init {
    Signed,
    /// magnitudes in [0.1, 1] with random sign, keeps relu/clamp away from kinks
    AwayFromZero,
    Positive,
    /// pairwise gaps of at least 1e-2, so pooling never sees a near-tie
    Distinct,
}

fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Tensor {
    if let Init::Distinct = init {
        let n: usize = shape.iter().product();
        let mut vals: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
        vals.shuffle(rng);
        return Tensor::new(shape, vals).unwrap();
    }
    Tensor::from_fn(shape, |_| match init {
        Init::Signed => rng.random_range(-1.0..1.0),
        Init::AwayFromZero => {
            let m: f64 = rng.random_range(0.1..1.0);
            if rng.random_bool(0.5) {
                m
            } else {
                -m
            }
        }
        Init::Positive => rng.random_range(0.5..2.0),
        Init::Distinct => unreachable!(),
    })
}

type Build = dyn Fn(&mut Graph, &[NodeId]) -> Result<NodeId, NumError>;

/// Builds `sum(op(params) * R)` with a fixed random weighting `R`, so every
/// output coordinate carries a distinct upstream gradient.
fn weighted_loss(
    params: &ParamSet,
    weights: &Tensor,
    build: &Build,
) -> Result<(Graph, NodeId), NumError> {
    let mut g = Graph::new(Precision::F64);
    let leaves: Vec<NodeId> = params
        .iter()
        .map(|(id, _, t)| g.param(id, t))
        .collect::<Result<_, _>>()?;
    let out = build(&mut g, &leaves)?;
    let w = g.input(weights.reshape(g.shape(out))?)?;
    let prod = g.mul(out, w)?;
    let loss = g.sum(prod)?;
    Ok((g, loss))
}

fn check_op(name: &str, shapes: &[&[usize]], init: Init, seeds: u64, build: &Build) -> f64 {
    let mut worst = 0.0f64;
    let mut worst_seed = 0;
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed * 7919 + name.len() as u64);
        let mut params = ParamSet::new();
        for (i, s) in shapes.iter().enumerate() {
            params.add(format!("x{i}"), random_tensor(&mut rng, s, init));
        }
        let mut g0 = Graph::new(Precision::F64);
        let leaves: Vec<NodeId> = params
            .iter()
            .map(|(id, _, t)| g0.param(id, t).unwrap())
            .collect();
        let o = build(&mut g0, &leaves).unwrap();
        let out_shape = g0.shape(o).to_vec();
        let weights = random_tensor(&mut rng, &out_shape, Init::Signed);

        let (g, loss) = weighted_loss(&params, &weights, build).unwrap();
        let analytic = g.grad(loss).unwrap();
        let numeric = finite_difference_gradient(
            |p| {
                let (g, loss) = weighted_loss(p, &weights, build)?;
                g.value(loss).item()
            },
            &params,
            H,
        )
        .unwrap();
        for id in params.ids() {
            let a = analytic
                .get(&id)
                .map(|t| t.data().to_vec())
                .unwrap_or_default();
            let err = max_relative_error(&a, numeric[&id].data(), FLOOR);
            if err > worst {
                worst = err;
                worst_seed = seed;
            }
        }
    }
    assert!(
        worst < TOL,
        "{name}: max relative error {worst:e} exceeds {TOL:e} (seed {worst_seed})"
    );
    worst
}

const SEEDS: u64 = 100;

#[test]
fn elementwise_primitives_match_finite_differences() {
    check_op("add", &[&[3, 4], &[3, 4]], Init::Signed, SEEDS, &|g, l| {
        g.add(l[0], l[1])
    });
    check_op("sub", &[&[3, 4], &[3, 4]], Init::Signed, SEEDS, &|g, l| {
        g.sub(l[0], l[1])
    });
    check_op("mul", &[&[5], &[5]], Init::Signed, SEEDS, &|g, l| {
        g.mul(l[0], l[1])
    });
    check_op("scale", &[&[2, 3]], Init::Signed, SEEDS, &|g, l| {
        g.scale(l[0], -2.5)
    });
    check_op("add_const", &[&[4]], Init::Signed, SEEDS, &|g, l| {
        g.add_const(l[0], 0.3)
    });
    check_op("exp", &[&[2, 3]], Init::Signed, SEEDS, &|g, l| g.exp(l[0]));
    check_op("log", &[&[2, 3]], Init::Positive, SEEDS, &|g, l| {
        g.log(l[0])
    });
    check_op("softplus", &[&[6]], Init::Signed, SEEDS, &|g, l| {
        g.softplus(l[0])
    });
    check_op("relu", &[&[3, 3]], Init::AwayFromZero, SEEDS, &|g, l| {
        g.relu(l[0])
    });
    check_op("clamp", &[&[8]], Init::AwayFromZero, SEEDS, &|g, l| {
        let x = g.scale(l[0], 20.0)?;
        g.clamp(x, -10.0, 10.0)
    });
    check_op(
        "scale_by",
        &[&[3, 2], &[1]],
        Init::Signed,
        SEEDS,
        &|g, l| g.scale_by(l[0], l[1]),
    );
}

#[test]
fn linear_algebra_primitives_match_finite_differences() {
    check_op(
        "matmul",
        &[&[3, 4], &[4, 2]],
        Init::Signed,
        SEEDS,
        &|g, l| g.matmul(l[0], l[1]),
    );
    check_op("transpose", &[&[3, 5]], Init::Signed, SEEDS, &|g, l| {
        g.transpose(l[0])
    });
    check_op(
        "bias_add_rows",
        &[&[4, 3], &[3]],
        Init::Signed,
        SEEDS,
        &|g, l| g.bias_add(l[0], l[1]),
    );
    check_op(
        "bias_add_channels",
        &[&[2, 3, 2, 2], &[3]],
        Init::Signed,
        SEEDS,
        &|g, l| g.bias_add(l[0], l[1]),
    );
    check_op("slice_rows", &[&[5, 3]], Init::Signed, SEEDS, &|g, l| {
        g.slice_rows(l[0], 1, 4)
    });
    check_op("reshape", &[&[2, 6]], Init::Signed, SEEDS, &|g, l| {
        g.reshape(l[0], &[3, 4])
    });
}

#[test]
fn conv_and_pool_primitives_match_finite_differences() {
    check_op(
        "conv2d_same",
        &[&[2, 2, 5, 5], &[3, 2, 3, 3]],
        Init::Signed,
        SEEDS,
        &|g, l| g.conv2d(l[0], l[1], 1, 1),
    );
    check_op(
        "conv2d_strided",
        &[&[2, 6, 7], &[2, 2, 3, 2]],
        Init::Signed,
        SEEDS,
        &|g, l| g.conv2d(l[0], l[1], 2, 0),
    );
    check_op(
        "max_pool2",
        &[&[2, 2, 4, 5]],
        Init::Distinct,
        SEEDS,
        &|g, l| g.max_pool2(l[0]),
    );
    check_op(
        "global_avg_pool",
        &[&[2, 3, 3, 2]],
        Init::Signed,
        SEEDS,
        &|g, l| g.global_avg_pool(l[0]),
    );
}

#[test]
fn reduction_primitives_match_finite_differences() {
    check_op("sum", &[&[3, 4]], Init::Signed, SEEDS, &|g, l| g.sum(l[0]));
    check_op("mean", &[&[3, 4]], Init::Signed, SEEDS, &|g, l| {
        g.mean(l[0])
    });
    check_op("sum_last", &[&[3, 4]], Init::Signed, SEEDS, &|g, l| {
        g.sum_last(l[0])
    });
    check_op("log_softmax", &[&[4, 5]], Init::Signed, SEEDS, &|g, l| {
        let x = g.scale(l[0], 3.0)?;
        g.log_softmax_rows(x)
    });
    check_op("logsumexp", &[&[4, 5]], Init::Signed, SEEDS, &|g, l| {
        let x = g.scale(l[0], 3.0)?;
        g.logsumexp_rows(x)
    });
}

#[test]
fn three_layer_composition_matches_finite_differences() {
    check_op(
        "mlp",
        &[&[4, 6], &[6, 5], &[5, 3], &[3]],
        Init::Signed,
        20,
        &|g, l| {
            let h = g.matmul(l[0], l[1])?;
            let h = g.relu(h)?;
            let h = g.matmul(h, l[2])?;
            let h = g.bias_add(h, l[3])?;
            let h = g.relu(h)?;
            g.sum(h)
        },
    );
}

fn naive_conv(x: &Tensor, k: &Tensor, stride: usize, pad: usize) -> Vec<f64> {
    let (c_in, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (c_out, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; c_out * ho * wo];
    for o in 0..c_out {
        for i in 0..ho {
            for j in 0..wo {
                let mut s = 0.0;
                for c in 0..c_in {
                    for a in 0..kh {
                        for b in 0..kw {
                            let ii = (i * stride + a) as isize - pad as isize;
                            let jj = (j * stride + b) as isize - pad as isize;
                            if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                s += x.at(&[c, ii as usize, jj as usize]) * k.at(&[o, c, a, b]);
                            }
                        }
                    }
                }
                out[(o * ho + i) * wo + j] = s;
            }
        }
    }
    out
}

#[test]
fn conv2d_matches_nested_loop_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (stride, pad) in [(1, 1), (2, 0), (1, 0), (2, 2)] {
        let x = random_tensor(&mut rng, &[3, 9, 8], Init::Signed);
        let k = random_tensor(&mut rng, &[4, 3, 3, 3], Init::Signed);
        let mut g = Graph::new(Precision::F64);
        let xi = g.input(x.clone()).unwrap();
        let ki = g.input(k.clone()).unwrap();
        let y = g.conv2d(xi, ki, stride, pad).unwrap();
        let want = naive_conv(&x, &k, stride, pad);
        let got = g.value(y).data();
        assert_eq!(got.len(), want.len());
        for (a, b) in got.iter().zip(&want) {
            assert!((a - b).abs() < 1e-12, "stride {stride} pad {pad}");
        }
    }
}

#[test]
fn matmul_and_reductions_match_naive_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let a = random_tensor(&mut rng, &[4, 7], Init::Signed);
    let b = random_tensor(&mut rng, &[7, 3], Init::Signed);
    let mut g = Graph::new(Precision::F64);
    let (ai, bi) = (g.input(a.clone()).unwrap(), g.input(b.clone()).unwrap());
    let c = g.matmul(ai, bi).unwrap();
    for i in 0..4 {
        for j in 0..3 {
            let want: f64 = (0..7).map(|p| a.at(&[i, p]) * b.at(&[p, j])).sum();
            assert!((g.value(c).at(&[i, j]) - want).abs() < 1e-12);
        }
    }
    let s = g.sum(ai).unwrap();
    let m = g.mean(ai).unwrap();
    let mut total = 0.0;
    for v in a.data() {
        total += v;
    }
    assert!((g.value(s).item().unwrap() - total).abs() < 1e-12);
    assert!((g.value(m).item().unwrap() - total / 28.0).abs() < 1e-12);
    let lse = g.logsumexp_rows(ai).unwrap();
    for i in 0..4 {
        let want = (0..7).map(|p| a.at(&[i, p]).exp()).sum::<f64>().ln();
        assert!((g.value(lse).data()[i] - want).abs() < 1e-12);
    }
}

#[test]
fn backward_is_linear_in_the_sink() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut params = ParamSet::new();
    let w = params.add("w", random_tensor(&mut rng, &[3, 3], Init::Signed));
    let mut g = Graph::new(Precision::F64);
    let wl = g.param(w, params.get(w)).unwrap();
    let e = g.exp(wl).unwrap();
    let l1 = g.sum(e).unwrap();
    let sq = g.mul(wl, wl).unwrap();
    let l2 = g.mean(sq).unwrap();
    let both = g.add(l1, l2).unwrap();
    let g1 = g.grad(l1).unwrap();
    let g2 = g.grad(l2).unwrap();
    let g12 = g.grad(both).unwrap();
    for i in 0..9 {
        let sum = g1[&w].data()[i] + g2[&w].data()[i];
        assert!((g12[&w].data()[i] - sum).abs() < 1e-14);
    }
}

#[test]
fn random_dense_network_cross_oracle() {
    // independent params with gradients taken through ParamId lookup
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let mut params = ParamSet::new();
    let x = random_tensor(&mut rng, &[5, 4], Init::Signed);
    let w1 = params.add("w1", random_tensor(&mut rng, &[4, 8], Init::Signed));
    let w2 = params.add("w2", random_tensor(&mut rng, &[8, 1], Init::Signed));
    let forward = |p: &ParamSet| -> Result<(Graph, NodeId), NumError> {
        let mut g = Graph::new(Precision::F64);
        let xi = g.input(x.clone())?;
        let a = g.param(w1, p.get(w1))?;
        let b = g.param(w2, p.get(w2))?;
        let h = g.matmul(xi, a)?;
        let h = g.relu(h)?;
        let h = g.matmul(h, b)?;
        let s = g.sum(h)?;
        Ok((g, s))
    };
    let (g, s) = forward(&params).unwrap();
    let analytic = g.grad(s).unwrap();
    let numeric = finite_difference_gradient(
        |p| {
            let (g, s) = forward(p)?;
            g.value(s).item()
        },
        &params,
        H,
    )
    .unwrap();
    for id in [w1, w2] {
        let err = max_relative_error(analytic[&id].data(), numeric[&id].data(), FLOOR);
        assert!(err < TOL);
    }
}
