//! Differentiable convex base-learners: closed-form ridge regression and the
//! multi-class (Crammer-Singer) SVM solved in the dual, both with
//! vector-Jacobian products obtained by implicit differentiation of their
//! optimality conditions.

mod qp;
mod ridge;
mod svm;

pub use qp::{kkt_residual, qp_solve, BoundState, QProblem, QpSolution};
pub use ridge::ridge_solve;
pub use svm::{svm_cs_objective, svm_cs_solve};

use crate::numcore::{Graph, NodeId, NumError, Tensor};

#[derive(Debug, thiserror::Error)]
pub enum SolverError {
    #[error("solver did not converge: KKT residual {residual:e} after {iterations} iterations")]
    NotConverged { residual: f64, iterations: usize },
    #[error("problem is infeasible: {0}")]
    Infeasible(String),
    #[error("problem is unbounded below")]
    Unbounded,
    #[error("degenerate KKT system in {0}")]
    Degenerate(String),
    #[error("invalid problem: {0}")]
    InvalidProblem(String),
    #[error("invalid solver config: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Num(#[from] NumError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BaseLearnerKind {
    Ridge,
    Svm,
}

impl std::str::FromStr for BaseLearnerKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s.to_ascii_lowercase().as_str() {
            "ridge" | "rr" => Ok(Self::Ridge),
            "svm" | "svm_cs" | "svm-cs" => Ok(Self::Svm),
            other => Err(format!(
                "unknown base learner {other:?} (expected ridge or svm)"
            )),
        }
    }
}

impl std::fmt::Display for BaseLearnerKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Ridge => "ridge",
            Self::Svm => "svm",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    /// SVM box constant `C`.
    pub c: f64,
    pub ridge_reg: f64,
    pub tol: f64,
    pub max_iters: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            c: 0.1,
            ridge_reg: 1.0,
            tol: 1e-8,
            max_iters: 50,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<(), SolverError> {
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(SolverError::InvalidConfig(format!(
                "C must be positive, got {}",
                self.c
            )));
        }
        if !(self.ridge_reg > 0.0 && self.ridge_reg.is_finite()) {
            return Err(SolverError::InvalidConfig(format!(
                "ridge regularizer must be positive, got {}",
                self.ridge_reg
            )));
        }
        if !(self.tol > 0.0) {
            return Err(SolverError::InvalidConfig("tol must be positive".into()));
        }
        if self.max_iters == 0 {
            return Err(SolverError::InvalidConfig(
                "max_iters must be at least 1".into(),
            ));
        }
        Ok(())
    }
}

/// Output of a base-learner fit. `weights` is `[K, D]`.
#[derive(Clone, Debug)]
pub struct BaseLearnerSolution {
    pub kind: BaseLearnerKind,
    pub weights: Tensor,
    /// SVM dual variables `[M, K]`; `None` for ridge.
    pub duals: Option<Tensor>,
    /// SVM slacks per support example.
    pub slacks: Option<Vec<f64>>,
    pub iterations: usize,
    pub kkt_residual: f64,
    /// Coordinates where both the bound slack and its multiplier vanish.
    pub degenerate_coords: usize,
    pub(crate) cert: Certificate,
}

#[derive(Clone, Debug)]
pub(crate) enum Certificate {
    Ridge {
        features: Tensor,
        targets: Vec<f64>,
        reg: f64,
        k: usize,
    },
    Svm {
        features: Tensor,
        alpha: Vec<f64>,
        free: Vec<usize>,
        k: usize,
    },
}

/// Gradient with respect to the support features given the upstream
/// gradient of `weights`.
pub fn solve_backward(sol: &BaseLearnerSolution, upstream: &Tensor) -> Result<Tensor, SolverError> {
    if upstream.shape() != sol.weights.shape() {
        return Err(NumError::ShapeMismatch {
            op: "solve_backward",
            expected: sol.weights.shape().to_vec(),
            got: upstream.shape().to_vec(),
        }
        .into());
    }
    let (grad, shape) = match &sol.cert {
        Certificate::Ridge {
            features,
            targets,
            reg,
            k,
        } => (
            ridge::backward(features, targets, *reg, *k, &sol.weights, upstream.data())?,
            features.shape().to_vec(),
        ),
        Certificate::Svm {
            features,
            alpha,
            free,
            k,
        } => (
            svm::backward(features, alpha, free, *k, upstream.data())?,
            features.shape().to_vec(),
        ),
    };
    Ok(Tensor::new(&shape, grad)?)
}

struct SolveOp {
    sol: BaseLearnerSolution,
}

impl crate::numcore::CustomOp for SolveOp {
    fn name(&self) -> &'static str {
        match self.sol.kind {
            BaseLearnerKind::Ridge => "ridge_solve",
            BaseLearnerKind::Svm => "svm_cs_solve",
        }
    }

    fn backward(
        &self,
        _inputs: &[&Tensor],
        _output: &Tensor,
        upstream: &[f64],
    ) -> Result<Vec<Vec<f64>>, NumError> {
        let up = Tensor::new(self.sol.weights.shape(), upstream.to_vec())?;
        match solve_backward(&self.sol, &up) {
            Ok(t) => Ok(vec![t.into_data()]),
            Err(SolverError::Num(e)) => Err(e),
            Err(e) => Err(NumError::Singular {
                block: e.to_string(),
            }),
        }
    }
}

/// Fits the base learner on the support features held by `features` and
/// records the solve on the tape. Returns the weight node `[K, D]`.
pub fn fit_on_graph(
    g: &mut Graph,
    kind: BaseLearnerKind,
    features: NodeId,
    labels: &[usize],
    num_classes: usize,
    cfg: &SolverConfig,
) -> Result<(NodeId, BaseLearnerSolution), SolverError> {
    let f = g.value(features).clone();
    let sol = match kind {
        BaseLearnerKind::Ridge => ridge_solve(&f, labels, num_classes, cfg)?,
        BaseLearnerKind::Svm => svm_cs_solve(&f, labels, num_classes, cfg)?,
    };
    let out = sol.weights.clone();
    let node = g.custom(Box::new(SolveOp { sol: sol.clone() }), &[features], out)?;
    Ok((node, sol))
}

/// `varphi * F W^T`, shape `[N, K]`.
pub fn scaled_logits(
    g: &mut Graph,
    weights: NodeId,
    features: NodeId,
    varphi: NodeId,
) -> Result<NodeId, NumError> {
    let wt = g.transpose(weights)?;
    let s = g.matmul(features, wt)?;
    g.scale_by(s, varphi)
}

/// Cross-entropy summed over rows.
pub fn episode_ce_loss(
    g: &mut Graph,
    logits: NodeId,
    labels: &[usize],
) -> Result<NodeId, NumError> {
    let onehot = one_hot(labels, g.shape(logits))?;
    let ls = g.log_softmax_rows(logits)?;
    let oh = g.input(onehot)?;
    let picked = g.mul(ls, oh)?;
    let total = g.sum(picked)?;
    g.scale(total, -1.0)
}

pub(crate) fn one_hot(labels: &[usize], shape: &[usize]) -> Result<Tensor, NumError> {
    if shape.len() != 2 || shape[0] != labels.len() {
        return Err(NumError::ShapeMismatch {
            op: "one_hot",
            expected: vec![labels.len(), shape.get(1).copied().unwrap_or(0)],
            got: shape.to_vec(),
        });
    }
    let k = shape[1];
    let mut data = vec![0.0; labels.len() * k];
    for (n, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(NumError::InvalidArgument(format!(
                "label {y} out of range for {k} classes"
            )));
        }
        data[n * k + y] = 1.0;
    }
    Tensor::new(&[labels.len(), k], data)
}

/// Row-wise argmax; ties go to the lowest class index.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (j, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}

pub(crate) fn check_support(
    features: &Tensor,
    labels: &[usize],
    k: usize,
) -> Result<(usize, usize), SolverError> {
    if features.ndim() != 2 {
        return Err(SolverError::InvalidProblem(format!(
            "support features must be [M, D], got {:?}",
            features.shape()
        )));
    }
    let (m, d) = (features.shape()[0], features.shape()[1]);
    if labels.len() != m {
        return Err(SolverError::InvalidProblem(format!(
            "{} labels for {m} support rows",
            labels.len()
        )));
    }
    if k < 2 {
        return Err(SolverError::InvalidProblem(
            "need at least two classes".into(),
        ));
    }
    if let Some(bad) = labels.iter().find(|&&y| y >= k) {
        return Err(SolverError::InvalidProblem(format!(
            "label {bad} out of range for {k} classes"
        )));
    }
    if !features.is_finite() {
        return Err(
            NumError::InvalidArgument("support features contain non-finite values".into()).into(),
        );
    }
    Ok((m, d))
}
