//! Inner/outer meta-learning loop, evaluation protocol and checkpoints.

mod model;
mod train;

pub use model::{
    embed, scalar_nodes, softplus_inv, Arch, Embedding, MetaParams, ModelConfig, Noise, ScalarInit,
    ScalarNodes,
};
pub use train::{
    clip_global_norm, episode_graph, eval_config_for, init_params, inner_adapt, lr_at, lr_schedule,
    meta_evaluate, meta_evaluate_tagged, meta_loss, meta_train, meta_train_from, run_episode,
    EpisodeConfig, EpisodeGraph, EpisodeOutcome, EvalConfig, MetaLoss, Reduction, TrainConfig,
    TrainOutcome, VarSet, DEFAULT_GRAD_CLIP, DEFAULT_LR_ANCHORS,
};

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;

use crate::baselearners::SolverError;
use crate::episodes::EpisodeError;
use crate::numcore::checkpoint::{self, Checkpoint, DType};
use crate::numcore::{NumError, OptimizerState};

#[derive(Debug, thiserror::Error)]
pub enum MetaError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("evaluation split is empty")]
    EmptySplit,
    #[error("non-finite meta loss at epoch {epoch}, episode {index} (ce {ce}, var {var})")]
    NonFiniteLoss {
        epoch: usize,
        index: u64,
        ce: f64,
        var: f64,
    },
    #[error("epoch {epoch}, episode {index}: {source}")]
    Episode {
        epoch: usize,
        index: u64,
        source: Box<MetaError>,
    },
    #[error(transparent)]
    Num(#[from] NumError),
    #[error(transparent)]
    Solver(#[from] SolverError),
    #[error(transparent)]
    Data(#[from] EpisodeError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl std::fmt::Display for SplitName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        })
    }
}

/// One line of the per-epoch metrics table.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpochRow {
    pub epoch: usize,
    pub split: SplitName,
    pub mean_acc: f64,
    pub ci95: Option<f64>,
    pub ce_loss: f64,
    pub var_loss: f64,
    pub beta: f64,
    pub varphi: f64,
    pub lambda: f64,
}

#[derive(Clone, Debug, Default, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct MetricsReport {
    pub accuracies: Vec<f64>,
    pub mean_acc: f64,
    /// `None` when fewer than two episodes make the deviation undefined.
    pub ci95: Option<f64>,
    pub ce_losses: Vec<f64>,
    pub var_losses: Vec<f64>,
    pub curves: Vec<EpochRow>,
    pub wall_clock_secs: f64,
    pub max_kkt_residual: f64,
    pub degenerate_coords: usize,
}

/// Mean and 95% half-width `1.96 s / sqrt(n)` with the sample deviation.
pub fn summarize(values: &[f64]) -> (f64, Option<f64>) {
    let n = values.len();
    if n == 0 {
        return (0.0, None);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    if n < 2 {
        return (mean, None);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    (mean, Some(1.96 * var.sqrt() / (n as f64).sqrt()))
}

impl MetricsReport {
    pub fn from_accuracies(accuracies: Vec<f64>) -> Self {
        let (mean_acc, ci95) = summarize(&accuracies);
        Self {
            accuracies,
            mean_acc,
            ci95,
            ..Default::default()
        }
    }

    pub fn from_outcomes(outcomes: &[EpisodeOutcome]) -> Self {
        let mut r = Self::from_accuracies(outcomes.iter().map(|o| o.accuracy).collect());
        r.ce_losses = outcomes.iter().map(|o| o.ce).collect();
        r.var_losses = outcomes.iter().map(|o| o.var).collect();
        r.max_kkt_residual = outcomes.iter().map(|o| o.kkt_residual).fold(0.0, f64::max);
        r.degenerate_coords = outcomes.iter().map(|o| o.degenerate_coords).sum();
        r
    }

    /// `mean ± ci95` with three decimals; `N/A` for an undefined interval.
    pub fn display_interval(&self) -> String {
        match self.ci95 {
            Some(c) => format!("{:.3} ± {:.3}", self.mean_acc, c),
            None => format!("{:.3} ± N/A", self.mean_acc),
        }
    }
}

const PARAM_PREFIX: &str = "param/";
const VELOCITY_PREFIX: &str = "velocity/";

/// Writes parameters, optimizer velocity and `extra` metadata in f64.
pub fn save_checkpoint(
    path: &Path,
    mp: &MetaParams,
    opt: &OptimizerState,
    extra: &BTreeMap<String, String>,
) -> Result<(), MetaError> {
    let mut ckpt = Checkpoint::default();
    ckpt.meta.extend(extra.clone());
    mp.config.to_meta(&mut ckpt.meta);
    ckpt.meta
        .insert("momentum".into(), format!("{:?}", opt.momentum));
    ckpt.meta
        .insert("weight_decay".into(), format!("{:?}", opt.weight_decay));
    ckpt.meta.insert(
        "param_checksum".into(),
        format!("{:016x}", mp.params.checksum()),
    );
    for (id, name, t) in mp.params.iter() {
        ckpt.tensors
            .push((format!("{PARAM_PREFIX}{name}"), t.clone()));
        if let Some(v) = opt.velocity.get(id.0) {
            ckpt.tensors
                .push((format!("{VELOCITY_PREFIX}{name}"), v.clone()));
        }
    }
    checkpoint::save(path, &ckpt, DType::F64)?;
    Ok(())
}

pub struct LoadedCheckpoint {
    pub params: MetaParams,
    pub optimizer: OptimizerState,
    pub meta: BTreeMap<String, String>,
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint, MetaError> {
    let ckpt = checkpoint::load(path)?;
    let config = ModelConfig::from_meta(&ckpt.meta)?;
    let parse = |key: &str| -> Result<f64, MetaError> {
        ckpt.meta(key)?
            .parse::<f64>()
            .map_err(|e| MetaError::Num(NumError::Checkpoint(format!("meta {key}: {e}"))))
    };
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let mut fresh = MetaParams::init(&config, &ScalarInit::default(), &mut rng)?;
    let mut velocity = vec![];
    for id in fresh.params.ids().collect::<Vec<_>>() {
        let name = fresh.params.name(id).to_string();
        let t = ckpt
            .tensor(&format!("{PARAM_PREFIX}{name}"))
            .ok_or_else(|| NumError::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
        let dst = fresh.params.get_mut(id);
        if dst.shape() != t.shape() {
            return Err(NumError::Checkpoint(format!(
                "parameter {name}: shape {:?} in checkpoint, {:?} expected",
                t.shape(),
                dst.shape()
            ))
            .into());
        }
        dst.data_mut().copy_from_slice(t.data());
        if let Some(v) = ckpt.tensor(&format!("{VELOCITY_PREFIX}{name}")) {
            velocity.push(v.clone());
        }
    }
    if !velocity.is_empty() && velocity.len() != fresh.params.len() {
        return Err(NumError::Checkpoint("optimizer velocity is incomplete".into()).into());
    }
    let expect = ckpt.meta("param_checksum")?;
    let got = format!("{:016x}", fresh.params.checksum());
    if expect != got {
        return Err(NumError::Checkpoint(format!(
            "parameter checksum {got} does not match manifest {expect}"
        ))
        .into());
    }
    let optimizer = OptimizerState {
        velocity,
        momentum: parse("momentum")?,
        weight_decay: parse("weight_decay")?,
    };
    Ok(LoadedCheckpoint {
        params: fresh,
        optimizer,
        meta: ckpt.meta,
    })
}
