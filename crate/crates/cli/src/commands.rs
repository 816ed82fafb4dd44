//! Command implementations. Every command writes only deterministic content
//! (no timestamps, no absolute paths) so repeated runs compare byte-for-byte.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use serde::Serialize;

use metalatent::baselearners::BaseLearnerKind;
use metalatent::episodes::{
    export_image_dir, load_image_dir, make_splits_by_name, read_manifest, split_sequential,
    synth_generate, write_manifest, Normalizer, SplitTag, Splits,
};
use metalatent::metaloop::{
    init_params, load_checkpoint, meta_evaluate, meta_evaluate_tagged, meta_train, save_checkpoint,
    summarize, EpochRow, MetaParams, MetricsReport, SplitName,
};
use metalatent::selfcheck::{self, GradcheckConfig};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.mlat";
pub const METRICS_FILE: &str = "metrics.csv";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const EVAL_EPISODES_FILE: &str = "eval_episodes.csv";
pub const EVAL_SUMMARY_FILE: &str = "eval_summary.json";
pub const ABLATE_FILE: &str = "ablate.csv";
pub const ABLATE_RUNS_FILE: &str = "ablate_runs.csv";
pub const ABLATE_SUMMARY_FILE: &str = "ablate_summary.json";
pub const MANIFEST_NAMES: [&str; 3] = ["train.txt", "val.txt", "test.txt"];

/// Builds the three class-disjoint splits the config points at.
pub fn load_splits(cfg: &RunConfig) -> Result<Splits> {
    match (&cfg.data_root, cfg.synth_spec()) {
        (Some(_), Some(_)) => bail!("data: data_root and synthetic are mutually exclusive"),
        (None, None) => bail!("data: set either data_root or synthetic"),
        (None, Some(spec)) => {
            let ds = synth_generate(&spec).context("synthetic dataset")?;
            Ok(split_sequential(
                &ds,
                cfg.split_train,
                cfg.split_val,
                cfg.split_test,
            )?)
        }
        (Some(root), None) => {
            let ds =
                load_image_dir(root).with_context(|| format!("data_root {}", root.display()))?;
            let mut splits = match &cfg.split_manifests {
                Some(dir) => {
                    let lists = MANIFEST_NAMES
                        .iter()
                        .map(|n| {
                            read_manifest(&dir.join(n))
                                .with_context(|| format!("split manifest {n}"))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    make_splits_by_name(&ds, &lists[0], &lists[1], &lists[2])?
                }
                None => split_sequential(&ds, cfg.split_train, cfg.split_val, cfg.split_test)?,
            };
            Normalizer::fit_splits(&mut splits)?;
            Ok(splits)
        }
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn write_metrics_csv(path: &Path, rows: &[EpochRow]) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

#[derive(Serialize)]
struct EpisodeLine {
    episode: usize,
    accuracy: f64,
    ce_loss: f64,
    var_loss: f64,
}

pub fn write_episode_csv(path: &Path, rep: &MetricsReport) -> Result<()> {
    let mut w =
        csv::Writer::from_path(path).with_context(|| format!("writing {}", path.display()))?;
    for (i, acc) in rep.accuracies.iter().enumerate() {
        w.serialize(EpisodeLine {
            episode: i,
            accuracy: *acc,
            ce_loss: rep.ce_losses.get(i).copied().unwrap_or(f64::NAN),
            var_loss: rep.var_losses.get(i).copied().unwrap_or(f64::NAN),
        })?;
    }
    w.flush()?;
    Ok(())
}

fn config_map(cfg: &RunConfig) -> BTreeMap<&'static str, String> {
    cfg.entries().into_iter().collect()
}

#[derive(Serialize)]
pub struct TrainSummary {
    pub command: &'static str,
    pub config: BTreeMap<&'static str, String>,
    pub checkpoint: String,
    pub best_epoch: usize,
    pub best_val_acc: Option<f64>,
    pub untrained_val_acc: Option<f64>,
    pub final_train_acc: Option<f64>,
    pub param_checksum: String,
    pub max_kkt_residual: f64,
    pub degenerate_coords: usize,
}

pub struct TrainResult {
    pub summary: TrainSummary,
    pub best: MetaParams,
}

/// Trains, then writes the best-validation checkpoint, the per-epoch CSV
/// (with an epoch-0 validation row for the untrained model), the JSON
/// summary and the resolved config into `out`.
pub fn run_train(cfg: &RunConfig, out: &Path) -> Result<TrainResult> {
    let splits = load_splits(cfg)?;
    let tcfg = cfg.train_config(&splits.train.input_shape)?;
    create_dir(out)?;
    fs::write(out.join(CONFIG_FILE), cfg.to_text())?;

    let init = init_params(&tcfg)?;
    let mut rows = vec![];
    let mut untrained = None;
    if tcfg.val_episodes > 0 && splits.val.num_classes() >= tcfg.spec.way {
        let mut ev = cfg.eval_config()?;
        ev.episodes = tcfg.val_episodes;
        ev.stochastic = false;
        let rep = meta_evaluate_tagged(&splits.val, &init, &ev, SplitTag::Val)?;
        untrained = Some(rep.mean_acc);
        rows.push(EpochRow {
            epoch: 0,
            split: SplitName::Val,
            mean_acc: rep.mean_acc,
            ci95: rep.ci95,
            ce_loss: mean(&rep.ce_losses),
            var_loss: mean(&rep.var_losses),
            beta: init.beta(),
            varphi: init.varphi(),
            lambda: init.lambda(),
        });
    }

    let outcome = meta_train(&splits.train, &splits.val, &tcfg)?;
    rows.extend(outcome.report.curves.iter().cloned());
    write_metrics_csv(&out.join(METRICS_FILE), &rows)?;

    let mut extra = BTreeMap::new();
    // JSON-quoted so the multi-line text fits one manifest line
    extra.insert(
        "run_config".to_string(),
        serde_json::to_string(&cfg.to_text())?,
    );
    extra.insert("best_epoch".to_string(), outcome.best_epoch.to_string());
    save_checkpoint(
        &out.join(CHECKPOINT_FILE),
        &outcome.best,
        &outcome.best_optimizer,
        &extra,
    )?;

    let best_val_acc = outcome
        .report
        .curves
        .iter()
        .find(|r| r.split == SplitName::Val && r.epoch == outcome.best_epoch)
        .map(|r| r.mean_acc);
    let final_train_acc = outcome
        .report
        .curves
        .iter()
        .rev()
        .find(|r| r.split == SplitName::Train)
        .map(|r| r.mean_acc);
    let summary = TrainSummary {
        command: "train",
        config: config_map(cfg),
        checkpoint: CHECKPOINT_FILE.to_string(),
        best_epoch: outcome.best_epoch,
        best_val_acc,
        untrained_val_acc: untrained,
        final_train_acc,
        param_checksum: format!("{:016x}", outcome.best.params.checksum()),
        max_kkt_residual: outcome.report.max_kkt_residual,
        degenerate_coords: outcome.report.degenerate_coords,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    Ok(TrainResult {
        summary,
        best: outcome.best,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

#[derive(Serialize)]
pub struct EvalSummary {
    pub command: &'static str,
    pub config: BTreeMap<&'static str, String>,
    pub episodes: usize,
    pub mean_acc: f64,
    pub ci95: Option<f64>,
    pub display: String,
    pub stochastic: bool,
    pub param_checksum: String,
    pub params_unchanged: bool,
    pub max_kkt_residual: f64,
}

/// Run config stored in a checkpoint by `train`, if any.
pub fn checkpoint_config(path: &Path) -> Result<Option<String>> {
    let loaded = load_checkpoint(path).with_context(|| format!("checkpoint {}", path.display()))?;
    loaded
        .meta
        .get("run_config")
        .map(|v| serde_json::from_str::<String>(v).context("checkpoint run_config"))
        .transpose()
}

/// Evaluates a checkpoint on the test split.
pub fn run_eval(
    cfg: &RunConfig,
    checkpoint: &Path,
    out: Option<&Path>,
) -> Result<(EvalSummary, MetricsReport)> {
    let loaded = load_checkpoint(checkpoint)
        .with_context(|| format!("checkpoint {}", checkpoint.display()))?;
    let splits = load_splits(cfg)?;
    let want = loaded.params.config.arch.input_shape();
    ensure!(
        splits.test.input_shape == want,
        "checkpoint/manifest mismatch: model expects inputs {want:?}, test split has {:?}",
        splits.test.input_shape
    );
    ensure!(
        loaded.params.config.latent_dim == cfg.latent_dim,
        "checkpoint/manifest mismatch: checkpoint has latent_dim {}, config asks for {}",
        loaded.params.config.latent_dim,
        cfg.latent_dim
    );
    let ev = cfg.eval_config()?;
    let before = loaded.params.params.checksum();
    let rep = meta_evaluate(&splits.test, &loaded.params, &ev)?;
    let after = loaded.params.params.checksum();
    let summary = EvalSummary {
        command: "eval",
        config: config_map(cfg),
        episodes: rep.accuracies.len(),
        mean_acc: rep.mean_acc,
        ci95: rep.ci95,
        display: rep.display_interval(),
        stochastic: ev.stochastic,
        param_checksum: format!("{after:016x}"),
        params_unchanged: before == after,
        max_kkt_residual: rep.max_kkt_residual,
    };
    ensure!(
        summary.params_unchanged,
        "evaluation modified the parameters"
    );
    if let Some(dir) = out {
        create_dir(dir)?;
        write_episode_csv(&dir.join(EVAL_EPISODES_FILE), &rep)?;
        write_json(&dir.join(EVAL_SUMMARY_FILE), &summary)?;
    }
    Ok((summary, rep))
}

#[derive(Clone, Debug, Serialize)]
pub struct AblateRun {
    pub base_learner: String,
    pub latent_dim: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub mean_acc: f64,
    pub ci95: Option<f64>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblateRow {
    pub base_learner: String,
    pub latent_dim: usize,
    pub seeds: usize,
    /// mean over seeds of each run's test accuracy
    pub mean_acc: f64,
    /// half-width over the pooled test episodes of all seeds
    pub ci95: Option<f64>,
}

#[derive(Serialize)]
pub struct AblateSummary {
    pub command: &'static str,
    pub config: BTreeMap<&'static str, String>,
    pub rows: Vec<AblateRow>,
    pub runs: Vec<AblateRun>,
    /// per base-learner: accuracy never decreases as the latent dimension grows
    pub trend_non_decreasing: BTreeMap<String, bool>,
}

/// Trains and evaluates every `(base learner, dim, seed)` combination on the
/// same data and seeds.
pub fn run_ablate(
    cfg: &RunConfig,
    dims: &[usize],
    learners: &[BaseLearnerKind],
    seeds: &[u64],
    out: &Path,
) -> Result<AblateSummary> {
    ensure!(
        !dims.is_empty(),
        "dims: at least one latent dimension is required"
    );
    ensure!(
        dims.iter().all(|&d| d > 0),
        "dims: latent dimensions must be positive"
    );
    ensure!(
        !learners.is_empty(),
        "base_learners: at least one is required"
    );
    ensure!(!seeds.is_empty(), "seeds: at least one is required");
    create_dir(out)?;
    let mut rows = vec![];
    let mut runs = vec![];
    for &kind in learners {
        for &dim in dims {
            let mut pooled = vec![];
            let mut means = vec![];
            for &seed in seeds {
                let mut c = cfg.clone();
                c.base_learner = kind;
                c.latent_dim = dim;
                c.seed = seed;
                let run_dir = out.join(format!("{kind}_dim{dim}_seed{seed}"));
                let trained = run_train(&c, &run_dir)?;
                let splits = load_splits(&c)?;
                let rep = meta_evaluate(&splits.test, &trained.best, &c.eval_config()?)?;
                log::info!(
                    "ablate {kind} dim {dim} seed {seed}: {}",
                    rep.display_interval()
                );
                runs.push(AblateRun {
                    base_learner: kind.to_string(),
                    latent_dim: dim,
                    seed,
                    best_epoch: trained.summary.best_epoch,
                    mean_acc: rep.mean_acc,
                    ci95: rep.ci95,
                });
                means.push(rep.mean_acc);
                pooled.extend(rep.accuracies);
            }
            rows.push(AblateRow {
                base_learner: kind.to_string(),
                latent_dim: dim,
                seeds: seeds.len(),
                mean_acc: mean(&means),
                ci95: summarize(&pooled).1,
            });
        }
    }
    let mut trend = BTreeMap::new();
    for &kind in learners {
        let mut mine: Vec<&AblateRow> = rows
            .iter()
            .filter(|r| r.base_learner == kind.to_string())
            .collect();
        mine.sort_by_key(|r| r.latent_dim);
        trend.insert(
            kind.to_string(),
            mine.windows(2).all(|w| w[1].mean_acc >= w[0].mean_acc),
        );
    }
    let mut w = csv::Writer::from_path(out.join(ABLATE_FILE))?;
    for r in &rows {
        w.serialize(r)?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out.join(ABLATE_RUNS_FILE))?;
    for r in &runs {
        w.serialize(r)?;
    }
    w.flush()?;
    let summary = AblateSummary {
        command: "ablate",
        config: config_map(cfg),
        rows,
        runs,
        trend_non_decreasing: trend,
    };
    write_json(&out.join(ABLATE_SUMMARY_FILE), &summary)?;
    Ok(summary)
}

/// Runs the finite-difference suites; the report lists every case.
pub fn run_gradcheck(
    cfg: &GradcheckConfig,
    suites: &[String],
) -> Result<Vec<selfcheck::CheckResult>> {
    let mut results = vec![];
    if suites.is_empty() {
        results = selfcheck::run_all(cfg)?;
    } else {
        for s in suites {
            results.extend(selfcheck::run_suite(s, cfg)?);
        }
    }
    Ok(results)
}

/// Renders the synthetic dataset as `out/images/<class>/<uid>.png` plus
/// class manifests `out/{train,val,test}.txt`.
pub fn run_synth_export(cfg: &RunConfig, out: &Path) -> Result<PathBuf> {
    let spec = cfg
        .synth_spec()
        .context("synthetic: synth-export needs a synthetic kind")?;
    let ds = synth_generate(&spec)?;
    let splits = split_sequential(&ds, cfg.split_train, cfg.split_val, cfg.split_test)?;
    let images = out.join("images");
    create_dir(&images)?;
    export_image_dir(&ds, &images)?;
    for (name, split) in MANIFEST_NAMES
        .iter()
        .zip([&splits.train, &splits.val, &splits.test])
    {
        write_manifest(&out.join(name), &split.class_names())?;
    }
    Ok(images)
}
