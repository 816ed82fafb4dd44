use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rayon::prelude::*;

use super::model::{embed, scalar_nodes, Embedding, MetaParams, Noise, ScalarInit, ScalarNodes};
use super::{summarize, EpochRow, MetaError, MetricsReport, ModelConfig, SplitName};
use crate::baselearners::{
    episode_ce_loss, fit_on_graph, one_hot, predict, scaled_logits, BaseLearnerKind,
    BaseLearnerSolution, SolverConfig,
};
use crate::episodes::{episode_rng, sample_episode, Dataset, Episode, EpisodeSpec, SplitTag};
use crate::latentspace::variational_loss;
use crate::numcore::{
    sgd_nesterov_step, Graph, NodeId, NumError, OptimizerState, ParamId, Precision, Tensor,
};

/// Which episode examples enter the variational term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VarSet {
    Support,
    Query,
    Both,
}

impl std::str::FromStr for VarSet {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "support" => Ok(Self::Support),
            "query" => Ok(Self::Query),
            "both" => Ok(Self::Both),
            other => Err(format!("expected support, query or both, got {other:?}")),
        }
    }
}

impl std::fmt::Display for VarSet {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Support => "support",
            Self::Query => "query",
            Self::Both => "both",
        })
    }
}

/// How the query cross-entropy is reduced over query examples.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    Sum,
    Mean,
}

impl std::str::FromStr for Reduction {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "sum" => Ok(Self::Sum),
            "mean" => Ok(Self::Mean),
            other => Err(format!("expected sum or mean, got {other:?}")),
        }
    }
}

impl std::fmt::Display for Reduction {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Sum => "sum",
            Self::Mean => "mean",
        })
    }
}

/// Per-episode loss settings shared by training and evaluation.
#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EpisodeConfig {
    pub base_learner: BaseLearnerKind,
    pub solver: SolverConfig,
    pub inner_steps: usize,
    pub latent_samples: usize,
    pub var_on: VarSet,
    pub query_reduction: Reduction,
    #[serde(with = "precision_serde")]
    pub precision: Precision,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            base_learner: BaseLearnerKind::Svm,
            solver: SolverConfig::default(),
            inner_steps: 1,
            latent_samples: 1,
            var_on: VarSet::Both,
            query_reduction: Reduction::Sum,
            precision: Precision::F32,
        }
    }
}

mod precision_serde {
    use crate::numcore::Precision;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(p: &Precision, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(p.as_str())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Precision, D::Error> {
        match String::deserialize(d)?.as_str() {
            "f32" => Ok(Precision::F32),
            "f64" => Ok(Precision::F64),
            other => Err(serde::de::Error::custom(format!(
                "unknown precision {other}"
            ))),
        }
    }
}

pub const DEFAULT_GRAD_CLIP: f64 = 1.0;

pub const DEFAULT_LR_ANCHORS: [(usize, f64); 4] =
    [(1, 0.1), (20, 0.006), (40, 0.0012), (50, 0.00024)];

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub meta_batch_size: usize,
    pub spec: EpisodeSpec,
    /// `(first epoch, learning rate)` pairs, ascending.
    pub lr_anchors: Vec<(usize, f64)>,
    pub model: ModelConfig,
    pub scalars: ScalarInit,
    pub episode: EpisodeConfig,
    pub val_episodes: usize,
    pub master_seed: u64,
    pub threads: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Rescales the averaged meta-gradient to at most this global L2 norm.
    pub grad_clip: Option<f64>,
}

impl TrainConfig {
    pub fn new(model: ModelConfig, spec: EpisodeSpec) -> Self {
        Self {
            epochs: 60,
            episodes_per_epoch: 1000,
            meta_batch_size: 4,
            spec,
            lr_anchors: DEFAULT_LR_ANCHORS.to_vec(),
            model,
            scalars: ScalarInit::default(),
            episode: EpisodeConfig::default(),
            val_episodes: 100,
            master_seed: 0,
            threads: 1,
            momentum: crate::numcore::DEFAULT_MOMENTUM,
            weight_decay: crate::numcore::DEFAULT_WEIGHT_DECAY,
            grad_clip: Some(DEFAULT_GRAD_CLIP),
        }
    }

    pub fn validate(&self) -> Result<(), MetaError> {
        let bad = |m: String| Err(MetaError::InvalidConfig(m));
        if self.episodes_per_epoch == 0 || self.meta_batch_size == 0 || self.threads == 0 {
            return bad("episodes_per_epoch, meta_batch_size and threads must be positive".into());
        }
        if self.episode.latent_samples == 0 {
            return bad("latent_samples must be positive".into());
        }
        if self.lr_anchors.is_empty() || self.lr_anchors[0].0 != 1 {
            return bad("lr_anchors must start at epoch 1".into());
        }
        if self.lr_anchors.windows(2).any(|w| w[1].0 <= w[0].0) {
            return bad("lr_anchors epochs must be strictly ascending".into());
        }
        if self.grad_clip.is_some_and(|c| !(c > 0.0 && c.is_finite())) {
            return bad("grad_clip must be positive".into());
        }
        if self
            .lr_anchors
            .iter()
            .any(|(_, lr)| !(*lr > 0.0 && lr.is_finite()))
        {
            return bad("learning rates must be positive".into());
        }
        self.spec
            .validate()
            .map_err(|e| MetaError::InvalidConfig(e.to_string()))?;
        self.model.validate()?;
        self.episode
            .solver
            .validate()
            .map_err(|e| MetaError::InvalidConfig(e.to_string()))?;
        Ok(())
    }
}

/// Piecewise-constant learning rate from `(first epoch, rate)` anchors.
pub fn lr_at(anchors: &[(usize, f64)], epoch: usize) -> Result<f64, MetaError> {
    if epoch < 1 {
        return Err(MetaError::InvalidConfig("epochs are 1-based".into()));
    }
    anchors
        .iter()
        .rev()
        .find(|(start, _)| *start <= epoch)
        .map(|(_, lr)| *lr)
        .ok_or_else(|| {
            MetaError::InvalidConfig(format!("no learning rate anchor covers epoch {epoch}"))
        })
}

/// Default outer schedule: 0.1 from epoch 1, 0.006 from 20, 0.0012 from 40, 0.00024 from 50.
pub fn lr_schedule(epoch: usize) -> Result<f64, MetaError> {
    lr_at(&DEFAULT_LR_ANCHORS, epoch)
}

/// Convex solve on the support features, then `steps` unrolled gradient
/// steps `W <- W - lambda * dL/dW` on the summed support cross-entropy.
#[allow(clippy::too_many_arguments)]
pub fn inner_adapt(
    g: &mut Graph,
    support_features: NodeId,
    labels: &[usize],
    way: usize,
    scalars: &ScalarNodes,
    kind: BaseLearnerKind,
    solver: &SolverConfig,
    steps: usize,
) -> Result<(NodeId, BaseLearnerSolution), MetaError> {
    if labels.is_empty() {
        return Err(MetaError::InvalidConfig("empty support set".into()));
    }
    let (mut w, sol) = fit_on_graph(g, kind, support_features, labels, way, solver)?;
    if steps > 0 {
        let y = g.input(one_hot(labels, &[labels.len(), way])?)?;
        for _ in 0..steps {
            // dL/dW = varphi (softmax(S) - Y)' F
            let s = scaled_logits(g, w, support_features, scalars.varphi)?;
            let ls = g.log_softmax_rows(s)?;
            let p = g.exp(ls)?;
            let r = g.sub(p, y)?;
            let rt = g.transpose(r)?;
            let dw = g.matmul(rt, support_features)?;
            let dw = g.scale_by(dw, scalars.varphi)?;
            let step = g.scale_by(dw, scalars.lambda)?;
            w = g.sub(w, step)?;
        }
    }
    Ok((w, sol))
}

pub struct MetaLoss {
    pub total: NodeId,
    pub ce: NodeId,
    pub var: NodeId,
    pub logits: NodeId,
}

/// Query cross-entropy plus `beta` times the mean of `var_rows`.
pub fn meta_loss(
    g: &mut Graph,
    weights: NodeId,
    query_features: NodeId,
    query_labels: &[usize],
    var_rows: NodeId,
    scalars: &ScalarNodes,
    reduction: Reduction,
) -> Result<MetaLoss, NumError> {
    let logits = scaled_logits(g, weights, query_features, scalars.varphi)?;
    let ce = episode_ce_loss(g, logits, query_labels)?;
    let ce = match reduction {
        Reduction::Sum => ce,
        Reduction::Mean => g.scale(ce, 1.0 / query_labels.len() as f64)?,
    };
    let var = g.mean(var_rows)?;
    let weighted = g.scale_by(var, scalars.beta)?;
    let total = g.add(ce, weighted)?;
    Ok(MetaLoss {
        total,
        ce,
        var,
        logits,
    })
}

/// Everything produced by one episode's forward (and optional backward) pass.
#[derive(Clone, Debug)]
pub struct EpisodeOutcome {
    pub loss: f64,
    pub ce: f64,
    pub var: f64,
    pub accuracy: f64,
    pub kkt_residual: f64,
    pub degenerate_coords: usize,
    pub grads: Option<BTreeMap<ParamId, Tensor>>,
}

pub(crate) fn stack_inputs(ep: &Episode) -> Result<Tensor, NumError> {
    let mut shape = ep.support_x.shape().to_vec();
    shape[0] += ep.query_x.shape()[0];
    let mut data = ep.support_x.data().to_vec();
    data.extend_from_slice(ep.query_x.data());
    Tensor::new(&shape, data)
}

pub struct EpisodeGraph {
    pub graph: Graph,
    pub loss: MetaLoss,
    pub embedding: Embedding,
    pub solution: BaseLearnerSolution,
}

/// Builds the full episode graph. `noise = None` selects the deterministic
/// `eps = 0` path.
pub fn episode_graph<R: Rng + ?Sized>(
    mp: &MetaParams,
    ep: &Episode,
    cfg: &EpisodeConfig,
    noise: Option<&mut R>,
) -> Result<EpisodeGraph, MetaError> {
    let mut g = Graph::new(cfg.precision);
    let nodes = mp.params.bind(&mut g)?;
    let sc = scalar_nodes(&mut g, &nodes, mp)?;
    let x = stack_inputs(ep)?;
    let noise = match noise {
        Some(rng) => Noise::Sample {
            rng,
            count: cfg.latent_samples,
        },
        None => Noise::Zero,
    };
    let emb = embed(&mut g, &nodes, mp, &x, noise)?;
    let ns = ep.support_y.len();
    let total = ns + ep.query_y.len();
    let fs = g.slice_rows(emb.features, 0, ns)?;
    let fq = g.slice_rows(emb.features, ns, total)?;
    let (w, solution) = inner_adapt(
        &mut g,
        fs,
        &ep.support_y,
        ep.way(),
        &sc,
        cfg.base_learner,
        &cfg.solver,
        cfg.inner_steps,
    )?;
    let rows = variational_loss(&mut g, &nodes, &emb.code, &mp.recon, emb.encoded)?;
    let rows = match cfg.var_on {
        VarSet::Both => rows,
        VarSet::Support | VarSet::Query => {
            let col = g.reshape(rows, &[total, 1])?;
            let (a, b) = if cfg.var_on == VarSet::Support {
                (0, ns)
            } else {
                (ns, total)
            };
            g.slice_rows(col, a, b)?
        }
    };
    let loss = meta_loss(&mut g, w, fq, &ep.query_y, rows, &sc, cfg.query_reduction)?;
    Ok(EpisodeGraph {
        graph: g,
        loss,
        embedding: emb,
        solution,
    })
}

pub fn run_episode<R: Rng + ?Sized>(
    mp: &MetaParams,
    ep: &Episode,
    cfg: &EpisodeConfig,
    noise: Option<&mut R>,
    with_grads: bool,
) -> Result<EpisodeOutcome, MetaError> {
    let eg = episode_graph(mp, ep, cfg, noise)?;
    let g = &eg.graph;
    let pred = predict(g.value(eg.loss.logits));
    let correct = pred.iter().zip(&ep.query_y).filter(|(a, b)| a == b).count();
    let grads = if with_grads {
        Some(g.grad(eg.loss.total)?)
    } else {
        None
    };
    Ok(EpisodeOutcome {
        loss: g.value(eg.loss.total).item()?,
        ce: g.value(eg.loss.ce).item()?,
        var: g.value(eg.loss.var).item()?,
        accuracy: correct as f64 / ep.query_y.len() as f64,
        kkt_residual: eg.solution.kkt_residual,
        degenerate_coords: eg.solution.degenerate_coords,
        grads,
    })
}

fn pool(threads: usize) -> Result<rayon::ThreadPool, MetaError> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(threads)
        .build()
        .map_err(|e| MetaError::InvalidConfig(format!("thread pool: {e}")))
}

#[derive(Clone, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct EvalConfig {
    pub spec: EpisodeSpec,
    pub episode: EpisodeConfig,
    pub episodes: usize,
    pub seed: u64,
    pub threads: usize,
    /// Samples the latent code instead of taking its mean.
    #[serde(default)]
    pub stochastic: bool,
}

/// Evaluates on `episodes` seeded episodes, with `eps = 0` unless
/// `cfg.stochastic`. Parameters are only read.
pub fn meta_evaluate(
    split: &Dataset,
    mp: &MetaParams,
    cfg: &EvalConfig,
) -> Result<MetricsReport, MetaError> {
    meta_evaluate_tagged(split, mp, cfg, SplitTag::Test)
}

pub fn meta_evaluate_tagged(
    split: &Dataset,
    mp: &MetaParams,
    cfg: &EvalConfig,
    tag: SplitTag,
) -> Result<MetricsReport, MetaError> {
    if split.num_classes() == 0 {
        return Err(MetaError::EmptySplit);
    }
    if cfg.episodes == 0 {
        return Err(MetaError::InvalidConfig(
            "evaluation needs at least one episode".into(),
        ));
    }
    let start = Instant::now();
    let outcomes: Vec<Result<EpisodeOutcome, MetaError>> = pool(cfg.threads)?.install(|| {
        (0..cfg.episodes)
            .into_par_iter()
            .map(|i| {
                let mut rng = episode_rng(cfg.seed, tag, i as u64);
                let ep = sample_episode(split, &cfg.spec, &mut rng)?;
                if cfg.stochastic {
                    run_episode(mp, &ep, &cfg.episode, Some(&mut rng), false)
                } else {
                    run_episode::<rand_chacha::ChaCha8Rng>(mp, &ep, &cfg.episode, None, false)
                }
            })
            .collect()
    });
    let outcomes: Vec<EpisodeOutcome> = outcomes.into_iter().collect::<Result<_, _>>()?;
    let mut report = MetricsReport::from_outcomes(&outcomes);
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(report)
}

/// Result of [`meta_train`]: the best-on-validation parameters with the
/// optimizer state captured at that epoch, plus the final ones.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub best: MetaParams,
    pub best_optimizer: OptimizerState,
    pub best_epoch: usize,
    pub last: MetaParams,
    pub last_optimizer: OptimizerState,
    pub report: MetricsReport,
}

pub fn init_params(cfg: &TrainConfig) -> Result<MetaParams, MetaError> {
    let mut rng = episode_rng(cfg.master_seed, SplitTag::Init, 0);
    Ok(MetaParams::init(&cfg.model, &cfg.scalars, &mut rng)?)
}

pub fn eval_config_for(cfg: &TrainConfig, episodes: usize) -> EvalConfig {
    EvalConfig {
        spec: cfg.spec,
        episode: cfg.episode.clone(),
        episodes,
        seed: cfg.master_seed,
        threads: cfg.threads,
        stochastic: false,
    }
}

fn row(epoch: usize, split: SplitName, rep: &MetricsReport, mp: &MetaParams) -> EpochRow {
    EpochRow {
        epoch,
        split,
        mean_acc: rep.mean_acc,
        ci95: rep.ci95,
        ce_loss: mean(&rep.ce_losses),
        var_loss: mean(&rep.var_losses),
        beta: mp.beta(),
        varphi: mp.varphi(),
        lambda: mp.lambda(),
    }
}

/// Scales all gradients by `min(1, limit / ||g||)`; returns the norm before scaling.
pub fn clip_global_norm(grads: &mut BTreeMap<ParamId, Tensor>, limit: f64) -> f64 {
    let norm = grads
        .values()
        .map(|g| g.data().iter().map(|v| v * v).sum::<f64>())
        .sum::<f64>()
        .sqrt();
    if norm > limit {
        let s = limit / norm;
        for g in grads.values_mut() {
            for v in g.data_mut() {
                *v *= s;
            }
        }
    }
    norm
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

/// Outer loop: meta-batches of episodes, gradients averaged over the batch
/// in episode-index order, one Nesterov step per batch. Validation accuracy
/// is measured after every epoch and the best parameters are retained.
pub fn meta_train(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, MetaError> {
    meta_train_from(train, val, cfg, init_params(cfg)?)
}

pub fn meta_train_from(
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    init: MetaParams,
) -> Result<TrainOutcome, MetaError> {
    cfg.validate()?;
    if init.config != cfg.model {
        return Err(MetaError::InvalidConfig(
            "initial parameters do not match the model config".into(),
        ));
    }
    let start = Instant::now();
    let train_ids: std::collections::BTreeSet<usize> = train.class_ids().into_iter().collect();
    if val.class_ids().iter().any(|c| train_ids.contains(c)) {
        return Err(MetaError::InvalidConfig(
            "train and validation splits share classes".into(),
        ));
    }
    let mut mp = init;
    let mut opt = OptimizerState::new(cfg.momentum, cfg.weight_decay);
    let mut report = MetricsReport::default();
    let validate = cfg.val_episodes > 0 && val.num_classes() >= cfg.spec.way;
    let mut best = (f64::NEG_INFINITY, mp.clone(), opt.clone(), 0usize);
    let workers = pool(cfg.threads)?;

    for epoch in 1..=cfg.epochs {
        let lr = lr_at(&cfg.lr_anchors, epoch)?;
        let mut epoch_outcomes = Vec::with_capacity(cfg.episodes_per_epoch);
        let first = (epoch - 1) * cfg.episodes_per_epoch;
        let mut done = 0;
        while done < cfg.episodes_per_epoch {
            let batch = cfg.meta_batch_size.min(cfg.episodes_per_epoch - done);
            let current = &mp;
            let results: Vec<Result<EpisodeOutcome, MetaError>> = workers.install(|| {
                (0..batch)
                    .into_par_iter()
                    .map(|b| {
                        let index = (first + done + b) as u64;
                        let mut rng = episode_rng(cfg.master_seed, SplitTag::Train, index);
                        let ep = sample_episode(train, &cfg.spec, &mut rng)?;
                        run_episode(current, &ep, &cfg.episode, Some(&mut rng), true).map_err(|e| {
                            MetaError::Episode {
                                epoch,
                                index,
                                source: Box::new(e),
                            }
                        })
                    })
                    .collect()
            });
            let mut sum: BTreeMap<ParamId, Tensor> = BTreeMap::new();
            for (b, res) in results.into_iter().enumerate() {
                let mut out = res?;
                if !out.loss.is_finite() {
                    return Err(MetaError::NonFiniteLoss {
                        epoch,
                        index: (first + done + b) as u64,
                        ce: out.ce,
                        var: out.var,
                    });
                }
                for (id, g) in out.grads.take().expect("training episodes carry gradients") {
                    match sum.get_mut(&id) {
                        Some(acc) => {
                            for (a, v) in acc.data_mut().iter_mut().zip(g.data()) {
                                *a += v;
                            }
                        }
                        None => {
                            sum.insert(id, g);
                        }
                    }
                }
                epoch_outcomes.push(out);
            }
            let scale = 1.0 / batch as f64;
            for g in sum.values_mut() {
                for v in g.data_mut() {
                    *v *= scale;
                }
                if !g.is_finite() {
                    return Err(MetaError::NonFiniteLoss {
                        epoch,
                        index: (first + done) as u64,
                        ce: f64::NAN,
                        var: f64::NAN,
                    });
                }
            }
            if let Some(limit) = cfg.grad_clip {
                clip_global_norm(&mut sum, limit);
            }
            sgd_nesterov_step(&mut mp.params, &sum, lr, &mut opt)?;
            done += batch;
        }
        let train_rep = MetricsReport::from_outcomes(&epoch_outcomes);
        let degenerate: usize = epoch_outcomes.iter().map(|o| o.degenerate_coords).sum();
        if degenerate > 0 {
            log::warn!(
                "epoch {epoch}: {degenerate} degenerate dual coordinate(s) across training solves"
            );
        }
        report.accuracies.extend(&train_rep.accuracies);
        report.ce_losses.extend(&train_rep.ce_losses);
        report.var_losses.extend(&train_rep.var_losses);
        report.max_kkt_residual = report.max_kkt_residual.max(train_rep.max_kkt_residual);
        report.degenerate_coords += degenerate;
        report
            .curves
            .push(row(epoch, SplitName::Train, &train_rep, &mp));
        log::info!(
            "epoch {epoch} lr {lr} train acc {:.4} ce {:.4} var {:.4} beta {:.4} varphi {:.4} lambda {:.4}",
            train_rep.mean_acc,
            mean(&train_rep.ce_losses),
            mean(&train_rep.var_losses),
            mp.beta(),
            mp.varphi(),
            mp.lambda()
        );
        if validate {
            let vrep = meta_evaluate_tagged(
                val,
                &mp,
                &eval_config_for(cfg, cfg.val_episodes),
                SplitTag::Val,
            )?;
            log::info!("epoch {epoch} val acc {:.4}", vrep.mean_acc);
            report.curves.push(row(epoch, SplitName::Val, &vrep, &mp));
            if vrep.mean_acc > best.0 {
                best = (vrep.mean_acc, mp.clone(), opt.clone(), epoch);
            }
        }
    }
    if !validate || cfg.epochs == 0 {
        best = (f64::NAN, mp.clone(), opt.clone(), cfg.epochs);
    }
    report.mean_acc = mean(&report.accuracies);
    report.ci95 = summarize(&report.accuracies).1;
    report.wall_clock_secs = start.elapsed().as_secs_f64();
    Ok(TrainOutcome {
        best: best.1,
        best_optimizer: best.2,
        best_epoch: best.3,
        last: mp,
        last_optimizer: opt,
        report,
    })
}
