//! Finite-difference self-checks for every differentiated path, runnable
//! outside the test harness (the `gradcheck` command).

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::baselearners::{fit_on_graph, BaseLearnerKind, SolverConfig};
use crate::episodes::{sample_episode, ClassSet, Dataset, EpisodeSpec, Sample};
use crate::latentspace::{sample_code, standard_normal, variational_loss, LatentHead, ReconHead};
use crate::metaloop::{episode_graph, EpisodeConfig, MetaParams, ModelConfig, ScalarInit};
use crate::numcore::gradcheck::{finite_difference_gradient, max_relative_error};
use crate::numcore::{CustomOp, Graph, NodeId, NumError, ParamSet, Precision, Tensor};

pub const DEFAULT_TOLERANCE: f64 = 1e-3;

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    pub seed: u64,
    /// Op whose backward rule is corrupted before the analytic sweep.
    pub fault: Option<String>,
    pub tolerance: f64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            fault: None,
            tolerance: DEFAULT_TOLERANCE,
        }
    }
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct CheckResult {
    pub suite: &'static str,
    pub case: String,
    pub max_rel_err: f64,
    pub passed: bool,
}

#[derive(Clone, Debug, PartialEq, serde::Serialize)]
pub struct SuiteSummary {
    pub suite: &'static str,
    pub cases: usize,
    pub max_rel_err: f64,
    pub failed: Vec<String>,
}

pub const SUITES: [&str; 4] = ["numcore", "latentspace", "baselearners", "metaloop"];

type Build<'a> = dyn Fn(&ParamSet) -> Result<(Graph, NodeId), NumError> + 'a;

fn check(
    suite: &'static str,
    case: &str,
    params: &ParamSet,
    h: f64,
    floor: f64,
    cfg: &GradcheckConfig,
    build: &Build,
) -> Result<CheckResult, NumError> {
    let (mut g, sink) = build(params)?;
    if let Some(f) = &cfg.fault {
        g.inject_fault(f);
    }
    let analytic = g.grad(sink)?;
    let numeric = finite_difference_gradient(
        |p| {
            let (g, s) = build(p)?;
            g.value(s).item()
        },
        params,
        h,
    )?;
    let mut worst = 0.0f64;
    for (id, _, t) in params.iter() {
        let a = analytic
            .get(&id)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(t.shape()));
        worst = worst.max(max_relative_error(a.data(), numeric[&id].data(), floor));
    }
    Ok(CheckResult {
        suite,
        case: case.to_string(),
        max_rel_err: worst,
        passed: worst < cfg.tolerance,
    })
}

/// `sum(x * r)` for a fixed `r`, kept off the primitive set so a corrupted
/// primitive never leaks into the cases of other ops.
struct Probe {
    weights: Vec<f64>,
}

impl CustomOp for Probe {
    fn name(&self) -> &'static str {
        "selfcheck_probe"
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        upstream: &[f64],
    ) -> Result<Vec<Vec<f64>>, NumError> {
        Ok(vec![self.weights.iter().map(|w| w * upstream[0]).collect()])
    }
}

fn probe(g: &mut Graph, x: NodeId, weights: &[f64]) -> Result<NodeId, NumError> {
    let v: f64 = g
        .value(x)
        .data()
        .iter()
        .zip(weights)
        .map(|(a, b)| a * b)
        .sum();
    let out = g.custom(
        Box::new(Probe {
            weights: weights.to_vec(),
        }),
        &[x],
        Tensor::scalar(v),
    )?;
    Ok(out)
}

#[derive(Clone, Copy)]
enum Init {
    Signed,
    AwayFromZero,
    Positive,
    Distinct,
}

fn draw(rng: &mut ChaCha8Rng, shape: &[usize], init: Init) -> Tensor {
    let n: usize = shape.iter().product();
    let data = match init {
        Init::Signed => (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
        Init::AwayFromZero => (0..n)
            .map(|_| {
                let m: f64 = rng.random_range(0.1..1.0);
                if rng.random_bool(0.5) {
                    m
                } else {
                    -m
                }
            })
            .collect(),
        Init::Positive => (0..n).map(|_| rng.random_range(0.5..2.0)).collect(),
        Init::Distinct => {
            use rand::seq::SliceRandom;
            let mut v: Vec<f64> = (0..n).map(|i| -1.0 + 2.0 * i as f64 / n as f64).collect();
            v.shuffle(rng);
            v
        }
    };
    Tensor::new(shape, data).expect("shape matches data")
}

type OpBuild = fn(&mut Graph, &[NodeId]) -> Result<NodeId, NumError>;

fn primitive_cases() -> Vec<(&'static str, Vec<Vec<usize>>, Init, OpBuild)> {
    vec![
        ("add", vec![vec![3, 4], vec![3, 4]], Init::Signed, |g, l| {
            g.add(l[0], l[1])
        }),
        ("sub", vec![vec![3, 4], vec![3, 4]], Init::Signed, |g, l| {
            g.sub(l[0], l[1])
        }),
        ("mul", vec![vec![5], vec![5]], Init::Signed, |g, l| {
            g.mul(l[0], l[1])
        }),
        ("scale", vec![vec![2, 3]], Init::Signed, |g, l| {
            g.scale(l[0], -2.5)
        }),
        ("add_const", vec![vec![4]], Init::Signed, |g, l| {
            g.add_const(l[0], 0.3)
        }),
        (
            "scale_by",
            vec![vec![3, 2], vec![1]],
            Init::Signed,
            |g, l| g.scale_by(l[0], l[1]),
        ),
        ("exp", vec![vec![2, 3]], Init::Signed, |g, l| g.exp(l[0])),
        ("log", vec![vec![2, 3]], Init::Positive, |g, l| g.log(l[0])),
        ("softplus", vec![vec![6]], Init::Signed, |g, l| {
            g.softplus(l[0])
        }),
        ("relu", vec![vec![3, 3]], Init::AwayFromZero, |g, l| {
            g.relu(l[0])
        }),
        ("clamp", vec![vec![8]], Init::AwayFromZero, |g, l| {
            // stretched so some entries saturate, none sit on a kink
            let x = g.scale(l[0], 20.0)?;
            g.clamp(x, -10.0, 10.0)
        }),
        (
            "matmul",
            vec![vec![3, 4], vec![4, 2]],
            Init::Signed,
            |g, l| g.matmul(l[0], l[1]),
        ),
        ("transpose", vec![vec![3, 5]], Init::Signed, |g, l| {
            g.transpose(l[0])
        }),
        (
            "bias_add",
            vec![vec![2, 3, 2, 2], vec![3]],
            Init::Signed,
            |g, l| g.bias_add(l[0], l[1]),
        ),
        ("slice_rows", vec![vec![5, 3]], Init::Signed, |g, l| {
            g.slice_rows(l[0], 1, 4)
        }),
        ("reshape", vec![vec![2, 6]], Init::Signed, |g, l| {
            g.reshape(l[0], &[3, 4])
        }),
        (
            "conv2d",
            vec![vec![2, 2, 5, 5], vec![3, 2, 3, 3]],
            Init::Signed,
            |g, l| g.conv2d(l[0], l[1], 1, 1),
        ),
        (
            "max_pool2",
            vec![vec![2, 2, 4, 5]],
            Init::Distinct,
            |g, l| g.max_pool2(l[0]),
        ),
        (
            "global_avg_pool",
            vec![vec![2, 3, 3, 2]],
            Init::Signed,
            |g, l| g.global_avg_pool(l[0]),
        ),
        ("sum", vec![vec![3, 4]], Init::Signed, |g, l| g.sum(l[0])),
        ("mean", vec![vec![3, 4]], Init::Signed, |g, l| g.mean(l[0])),
        ("sum_last", vec![vec![3, 4]], Init::Signed, |g, l| {
            g.sum_last(l[0])
        }),
        ("log_softmax", vec![vec![4, 5]], Init::Signed, |g, l| {
            g.log_softmax_rows(l[0])
        }),
        ("logsumexp", vec![vec![4, 5]], Init::Signed, |g, l| {
            g.logsumexp_rows(l[0])
        }),
    ]
}

fn numcore_suite(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>, NumError> {
    let mut out = vec![];
    for (i, (name, shapes, init, op)) in primitive_cases().into_iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1_000_003).wrapping_add(i as u64));
        let mut params = ParamSet::new();
        for (j, s) in shapes.iter().enumerate() {
            params.add(format!("x{j}"), draw(&mut rng, s, init));
        }
        let mut g0 = Graph::new(Precision::F64);
        let leaves = params.bind(&mut g0)?;
        let o = op(&mut g0, &leaves)?;
        let weights: Vec<f64> = (0..g0.value(o).numel())
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let build = |p: &ParamSet| {
            let mut g = Graph::new(Precision::F64);
            let leaves = p.bind(&mut g)?;
            let o = op(&mut g, &leaves)?;
            let s = probe(&mut g, o, &weights)?;
            Ok((g, s))
        };
        out.push(check("numcore", name, &params, 1e-5, 1e-3, cfg, &build)?);
    }
    Ok(out)
}

fn latentspace_suite(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>, NumError> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x1a7e);
    let mut params = ParamSet::new();
    let head = LatentHead::init(&mut params, "enc", 6, 4, &mut rng);
    let recon = ReconHead::init(&mut params, "rec", 4, 5, 6, &mut rng);
    let x = draw(&mut rng, &[3, 6], Init::Signed);
    let eps: Vec<Tensor> = (0..2).map(|_| standard_normal(&[3, 4], &mut rng)).collect();
    let build = |p: &ParamSet| {
        let mut g = Graph::new(Precision::F64);
        let nodes = p.bind(&mut g)?;
        let xi = g.input(x.clone())?;
        let code = sample_code(&mut g, &nodes, &head, xi, eps.clone())?;
        let v = variational_loss(&mut g, &nodes, &code, &recon, xi)?;
        let s = g.sum(v)?;
        Ok((g, s))
    };
    Ok(vec![check(
        "latentspace",
        "variational_loss",
        &params,
        1e-5,
        1e-3,
        cfg,
        &build,
    )?])
}

fn solver_err(e: impl std::fmt::Display) -> NumError {
    NumError::InvalidArgument(e.to_string())
}

fn baselearners_suite(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>, NumError> {
    let mut out = vec![];
    let cases = [
        (BaseLearnerKind::Ridge, (6, 4, 3), 1.0),
        (BaseLearnerKind::Svm, (6, 8, 3), 0.1),
        (BaseLearnerKind::Svm, (5, 12, 5), 1.0),
    ];
    for (i, (kind, (m, d, k), c)) in cases.into_iter().enumerate() {
        let mut rng =
            ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(31).wrapping_add(i as u64 + 1));
        let mut params = ParamSet::new();
        params.add("features", draw(&mut rng, &[m, d], Init::Signed));
        let labels: Vec<usize> = (0..m).map(|j| j % k).collect();
        let weights: Vec<f64> = (0..k * d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let solver = SolverConfig {
            c,
            ..Default::default()
        };
        let build = |p: &ParamSet| {
            let mut g = Graph::new(Precision::F64);
            let f = p.bind(&mut g)?[0];
            let (w, _) = fit_on_graph(&mut g, kind, f, &labels, k, &solver).map_err(solver_err)?;
            let s = probe(&mut g, w, &weights)?;
            Ok((g, s))
        };
        let case = format!("{kind} {m}x{d} k={k} c={c}");
        out.push(check(
            "baselearners",
            &case,
            &params,
            1e-6,
            1e-3,
            cfg,
            &build,
        )?);
    }
    Ok(out)
}

fn vector_dataset(
    classes: usize,
    per: usize,
    dim: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Dataset, NumError> {
    let sets = (0..classes)
        .map(|c| {
            let center: Vec<f64> = (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect();
            ClassSet {
                id: c,
                name: format!("c{c}"),
                examples: (0..per)
                    .map(|i| Sample {
                        uid: (c * per + i) as u64,
                        data: center
                            .iter()
                            .map(|m| m + 0.3 * rng.random_range(-1.0..1.0))
                            .collect(),
                    })
                    .collect(),
            }
        })
        .collect();
    Dataset::new(vec![dim], sets).map_err(solver_err)
}

/// Whole meta-loss on a 2-way 1-shot episode with 4-dimensional inputs and
/// the latent noise frozen.
fn metaloop_suite(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>, NumError> {
    let mut out = vec![];
    for (kind, steps) in [
        (BaseLearnerKind::Svm, 0),
        (BaseLearnerKind::Ridge, 0),
        (BaseLearnerKind::Svm, 1),
    ] {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x3e7a);
        let ds = vector_dataset(2, 4, 4, &mut rng)?;
        let spec = EpisodeSpec::new(2, 1, 3).map_err(solver_err)?;
        let ep = sample_episode(&ds, &spec, &mut rng).map_err(solver_err)?;
        let config = ModelConfig::mlp(4, 4, 3);
        let scalars = ScalarInit {
            beta: 0.3,
            ..Default::default()
        };
        let mp = MetaParams::init(&config, &scalars, &mut rng).map_err(solver_err)?;
        let ecfg = EpisodeConfig {
            base_learner: kind,
            inner_steps: steps,
            precision: Precision::F64,
            ..Default::default()
        };
        let noise_seed = rng.random::<u64>();
        let build = |p: &ParamSet| {
            let m = MetaParams::from_params(&config, p.clone()).map_err(solver_err)?;
            let mut nrng = ChaCha8Rng::seed_from_u64(noise_seed);
            let eg = episode_graph(&m, &ep, &ecfg, Some(&mut nrng)).map_err(solver_err)?;
            Ok((eg.graph, eg.loss.total))
        };
        let case = format!("meta_loss {kind} T={steps}");
        out.push(check(
            "metaloop", &case, &mp.params, 1e-6, 1e-4, cfg, &build,
        )?);
    }
    Ok(out)
}

/// Runs one named suite.
pub fn run_suite(suite: &str, cfg: &GradcheckConfig) -> Result<Vec<CheckResult>, NumError> {
    match suite {
        "numcore" => numcore_suite(cfg),
        "latentspace" => latentspace_suite(cfg),
        "baselearners" => baselearners_suite(cfg),
        "metaloop" => metaloop_suite(cfg),
        other => Err(NumError::InvalidArgument(format!(
            "unknown suite {other:?}"
        ))),
    }
}

pub fn run_all(cfg: &GradcheckConfig) -> Result<Vec<CheckResult>, NumError> {
    let mut out = vec![];
    for s in SUITES {
        out.extend(run_suite(s, cfg)?);
    }
    Ok(out)
}

pub fn summarize_suites(results: &[CheckResult]) -> Vec<SuiteSummary> {
    SUITES
        .iter()
        .filter_map(|&suite| {
            let rows: Vec<&CheckResult> = results.iter().filter(|r| r.suite == suite).collect();
            if rows.is_empty() {
                return None;
            }
            Some(SuiteSummary {
                suite,
                cases: rows.len(),
                max_rel_err: rows.iter().map(|r| r.max_rel_err).fold(0.0, f64::max),
                failed: rows
                    .iter()
                    .filter(|r| !r.passed)
                    .map(|r| r.case.clone())
                    .collect(),
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clean_build_passes_every_suite() {
        let results = run_all(&GradcheckConfig::default()).unwrap();
        for r in &results {
            assert!(r.passed, "{} {}: {:e}", r.suite, r.case, r.max_rel_err);
        }
        assert_eq!(summarize_suites(&results).len(), SUITES.len());
    }

    #[test]
    fn corrupted_rule_is_reported_by_name() {
        let cfg = GradcheckConfig {
            fault: Some("log_softmax".into()),
            ..Default::default()
        };
        let results = run_suite("numcore", &cfg).unwrap();
        let failed: Vec<&str> = results
            .iter()
            .filter(|r| !r.passed)
            .map(|r| r.case.as_str())
            .collect();
        assert_eq!(failed, vec!["log_softmax"]);
    }

    #[test]
    fn corrupted_solver_rule_fails_the_solver_cases() {
        let cfg = GradcheckConfig {
            fault: Some("svm_cs_solve".into()),
            ..Default::default()
        };
        let results = run_suite("baselearners", &cfg).unwrap();
        for r in &results {
            assert_eq!(r.passed, !r.case.starts_with("svm"), "{}", r.case);
        }
    }

    #[test]
    fn same_seed_same_errors() {
        let cfg = GradcheckConfig {
            seed: 5,
            ..Default::default()
        };
        let a = run_suite("baselearners", &cfg).unwrap();
        let b = run_suite("baselearners", &cfg).unwrap();
        assert_eq!(a, b);
    }
}
