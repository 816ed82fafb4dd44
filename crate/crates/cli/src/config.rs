//! Flat `key = value` run configuration.

use std::collections::BTreeSet;
use std::fmt::Display;
use std::path::PathBuf;
use std::str::FromStr;

use metalatent::baselearners::{BaseLearnerKind, SolverConfig};
use metalatent::episodes::{Difficulty, EpisodeSpec, SynthKind, SynthSpec};
use metalatent::metaloop::{
    EpisodeConfig, EvalConfig, ModelConfig, Reduction, ScalarInit, TrainConfig, VarSet,
    DEFAULT_GRAD_CLIP, DEFAULT_LR_ANCHORS,
};
use metalatent::numcore::{Precision, DEFAULT_MOMENTUM, DEFAULT_WEIGHT_DECAY};

pub const SEED_ENV: &str = "METALATENT_SEED";

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: expected `key = value`, got {text:?}")]
    Syntax { line: usize, text: String },
    #[error("unknown config key {0:?}")]
    UnknownKey(String),
    #[error("{field}: {msg}")]
    Field { field: String, msg: String },
}

fn field_err(field: &str, msg: impl Display) -> ConfigError {
    ConfigError::Field {
        field: field.to_string(),
        msg: msg.to_string(),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    /// Directory holding `train.txt`, `val.txt`, `test.txt` class manifests.
    pub split_manifests: Option<PathBuf>,
    pub synthetic: Option<SynthKind>,
    pub synth_classes: usize,
    pub synth_per_class: usize,
    pub synth_side: usize,
    pub synth_channels: usize,
    pub difficulty: Difficulty,
    pub synth_seed: u64,
    pub split_train: usize,
    pub split_val: usize,
    pub split_test: usize,

    pub way: usize,
    pub shot: usize,
    pub query: usize,

    pub base_learner: BaseLearnerKind,
    pub latent_dim: usize,
    pub recon_hidden: usize,
    pub svm_c: f64,
    pub ridge_reg: f64,
    pub solver_tol: f64,
    pub solver_max_iters: usize,
    pub inner_steps: usize,
    pub latent_samples: usize,
    pub var_on: VarSet,
    pub query_reduction: Reduction,
    pub precision: Precision,
    pub lambda_init: f64,
    pub varphi_init: f64,
    pub beta_init: f64,

    pub epochs: usize,
    pub episodes_per_epoch: usize,
    pub meta_batch: usize,
    pub val_episodes: usize,
    pub lr_anchors: Vec<(usize, f64)>,
    pub momentum: f64,
    pub weight_decay: f64,
    pub grad_clip: Option<f64>,

    pub eval_episodes: usize,
    pub stochastic_eval: bool,
    pub seed: u64,
    pub threads: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        let synth = SynthSpec::default();
        let solver = SolverConfig::default();
        let ep = EpisodeConfig::default();
        let sc = ScalarInit::default();
        Self {
            data_root: None,
            split_manifests: None,
            synthetic: None,
            synth_classes: synth.n_classes,
            synth_per_class: synth.per_class,
            synth_side: synth.side,
            synth_channels: synth.channels,
            difficulty: synth.difficulty,
            synth_seed: synth.seed,
            split_train: 20,
            split_val: 5,
            split_test: 5,
            way: 5,
            shot: 1,
            query: 15,
            base_learner: ep.base_learner,
            latent_dim: 64,
            recon_hidden: 64,
            svm_c: solver.c,
            ridge_reg: solver.ridge_reg,
            solver_tol: solver.tol,
            solver_max_iters: solver.max_iters,
            inner_steps: ep.inner_steps,
            latent_samples: ep.latent_samples,
            var_on: ep.var_on,
            query_reduction: ep.query_reduction,
            precision: ep.precision,
            lambda_init: sc.lambda,
            varphi_init: sc.varphi,
            beta_init: sc.beta,
            epochs: 60,
            episodes_per_epoch: 1000,
            meta_batch: 4,
            val_episodes: 100,
            lr_anchors: DEFAULT_LR_ANCHORS.to_vec(),
            momentum: DEFAULT_MOMENTUM,
            weight_decay: DEFAULT_WEIGHT_DECAY,
            grad_clip: Some(DEFAULT_GRAD_CLIP),
            eval_episodes: 1000,
            stochastic_eval: false,
            seed: 0,
            threads: 1,
        }
    }
}

fn parse<T: FromStr>(field: &str, v: &str) -> Result<T, ConfigError>
where
    T::Err: Display,
{
    v.parse::<T>()
        .map_err(|e| field_err(field, format!("{e} (got {v:?})")))
}

fn parse_bool(field: &str, v: &str) -> Result<bool, ConfigError> {
    match v {
        "true" | "yes" | "on" | "1" => Ok(true),
        "false" | "no" | "off" | "0" => Ok(false),
        _ => Err(field_err(
            field,
            format!("expected true or false, got {v:?}"),
        )),
    }
}

fn parse_optional<T: FromStr>(field: &str, v: &str) -> Result<Option<T>, ConfigError>
where
    T::Err: Display,
{
    if v == "none" || v.is_empty() {
        Ok(None)
    } else {
        parse(field, v).map(Some)
    }
}

fn parse_anchors(field: &str, v: &str) -> Result<Vec<(usize, f64)>, ConfigError> {
    v.split(',')
        .map(|pair| {
            let (e, lr) = pair.trim().split_once(':').ok_or_else(|| {
                field_err(field, format!("expected epoch:rate pairs, got {pair:?}"))
            })?;
            Ok((parse(field, e.trim())?, parse(field, lr.trim())?))
        })
        .collect()
}

fn parse_precision(field: &str, v: &str) -> Result<Precision, ConfigError> {
    match v {
        "f32" => Ok(Precision::F32),
        "f64" => Ok(Precision::F64),
        _ => Err(field_err(field, format!("expected f32 or f64, got {v:?}"))),
    }
}

fn opt_str<T: Display>(v: &Option<T>) -> String {
    v.as_ref()
        .map_or_else(|| "none".to_string(), |x| x.to_string())
}

/// Floats print in shortest round-trip form.
fn f(v: f64) -> String {
    format!("{v:?}")
}

impl RunConfig {
    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, v: &str) -> Result<(), ConfigError> {
        let v = v.trim();
        match key {
            "data_root" => self.data_root = parse_optional(key, v)?,
            "split_manifests" => self.split_manifests = parse_optional(key, v)?,
            "synthetic" => self.synthetic = parse_optional(key, v)?,
            "synth_classes" => self.synth_classes = parse(key, v)?,
            "synth_per_class" => self.synth_per_class = parse(key, v)?,
            "synth_side" => self.synth_side = parse(key, v)?,
            "synth_channels" => self.synth_channels = parse(key, v)?,
            "difficulty" => self.difficulty = parse(key, v)?,
            "synth_seed" => self.synth_seed = parse(key, v)?,
            "split_train" => self.split_train = parse(key, v)?,
            "split_val" => self.split_val = parse(key, v)?,
            "split_test" => self.split_test = parse(key, v)?,
            "way" => self.way = parse(key, v)?,
            "shot" => self.shot = parse(key, v)?,
            "query" => self.query = parse(key, v)?,
            "base_learner" => self.base_learner = parse(key, v)?,
            "latent_dim" => self.latent_dim = parse(key, v)?,
            "recon_hidden" => self.recon_hidden = parse(key, v)?,
            "svm_c" => self.svm_c = parse(key, v)?,
            "ridge_reg" => self.ridge_reg = parse(key, v)?,
            "solver_tol" => self.solver_tol = parse(key, v)?,
            "solver_max_iters" => self.solver_max_iters = parse(key, v)?,
            "inner_steps" => self.inner_steps = parse(key, v)?,
            "latent_samples" => self.latent_samples = parse(key, v)?,
            "var_on" => self.var_on = parse(key, v)?,
            "query_reduction" => self.query_reduction = parse(key, v)?,
            "precision" => self.precision = parse_precision(key, v)?,
            "lambda_init" => self.lambda_init = parse(key, v)?,
            "varphi_init" => self.varphi_init = parse(key, v)?,
            "beta_init" => self.beta_init = parse(key, v)?,
            "epochs" => self.epochs = parse(key, v)?,
            "episodes_per_epoch" => self.episodes_per_epoch = parse(key, v)?,
            "meta_batch" => self.meta_batch = parse(key, v)?,
            "val_episodes" => self.val_episodes = parse(key, v)?,
            "lr_anchors" => self.lr_anchors = parse_anchors(key, v)?,
            "momentum" => self.momentum = parse(key, v)?,
            "weight_decay" => self.weight_decay = parse(key, v)?,
            "grad_clip" => self.grad_clip = parse_optional(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "stochastic_eval" => self.stochastic_eval = parse_bool(key, v)?,
            "seed" => self.seed = parse(key, v)?,
            "threads" => self.threads = parse(key, v)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    /// Every key with its value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let anchors = self
            .lr_anchors
            .iter()
            .map(|(e, lr)| format!("{e}:{}", f(*lr)))
            .collect::<Vec<_>>()
            .join(",");
        vec![
            (
                "data_root",
                opt_str(&self.data_root.as_ref().map(|p| p.display())),
            ),
            (
                "split_manifests",
                opt_str(&self.split_manifests.as_ref().map(|p| p.display())),
            ),
            ("synthetic", opt_str(&self.synthetic)),
            ("synth_classes", self.synth_classes.to_string()),
            ("synth_per_class", self.synth_per_class.to_string()),
            ("synth_side", self.synth_side.to_string()),
            ("synth_channels", self.synth_channels.to_string()),
            ("difficulty", self.difficulty.to_string()),
            ("synth_seed", self.synth_seed.to_string()),
            ("split_train", self.split_train.to_string()),
            ("split_val", self.split_val.to_string()),
            ("split_test", self.split_test.to_string()),
            ("way", self.way.to_string()),
            ("shot", self.shot.to_string()),
            ("query", self.query.to_string()),
            ("base_learner", self.base_learner.to_string()),
            ("latent_dim", self.latent_dim.to_string()),
            ("recon_hidden", self.recon_hidden.to_string()),
            ("svm_c", f(self.svm_c)),
            ("ridge_reg", f(self.ridge_reg)),
            ("solver_tol", f(self.solver_tol)),
            ("solver_max_iters", self.solver_max_iters.to_string()),
            ("inner_steps", self.inner_steps.to_string()),
            ("latent_samples", self.latent_samples.to_string()),
            ("var_on", self.var_on.to_string()),
            ("query_reduction", self.query_reduction.to_string()),
            ("precision", self.precision.as_str().to_string()),
            ("lambda_init", f(self.lambda_init)),
            ("varphi_init", f(self.varphi_init)),
            ("beta_init", f(self.beta_init)),
            ("epochs", self.epochs.to_string()),
            ("episodes_per_epoch", self.episodes_per_epoch.to_string()),
            ("meta_batch", self.meta_batch.to_string()),
            ("val_episodes", self.val_episodes.to_string()),
            ("lr_anchors", anchors),
            ("momentum", f(self.momentum)),
            ("weight_decay", f(self.weight_decay)),
            ("grad_clip", opt_str(&self.grad_clip.map(f))),
            ("eval_episodes", self.eval_episodes.to_string()),
            ("stochastic_eval", self.stochastic_eval.to_string()),
            ("seed", self.seed.to_string()),
            ("threads", self.threads.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Parses `key = value` lines; blank lines and `#` comments are skipped.
    /// Returns the pairs in file order.
    pub fn parse_pairs(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
        let mut out = vec![];
        for (i, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
                line: i + 1,
                text: raw.to_string(),
            })?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    pub fn apply_pairs(
        &mut self,
        pairs: &[(String, String)],
    ) -> Result<BTreeSet<String>, ConfigError> {
        let mut keys = BTreeSet::new();
        for (k, v) in pairs {
            self.set(k, v)?;
            keys.insert(k.clone());
        }
        Ok(keys)
    }

    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        c.apply_pairs(&Self::parse_pairs(text)?)?;
        Ok(c)
    }

    pub fn has_data_source(&self) -> bool {
        self.data_root.is_some() || self.synthetic.is_some()
    }

    pub fn synth_spec(&self) -> Option<SynthSpec> {
        Some(SynthSpec {
            kind: self.synthetic?,
            n_classes: self.synth_classes,
            per_class: self.synth_per_class,
            side: self.synth_side,
            channels: self.synth_channels,
            difficulty: self.difficulty,
            seed: self.synth_seed,
        })
    }

    pub fn episode_spec(&self) -> Result<EpisodeSpec, ConfigError> {
        EpisodeSpec::new(self.way, self.shot, self.query)
            .map_err(|e| field_err("way/shot/query", e))
    }

    pub fn episode_config(&self) -> EpisodeConfig {
        EpisodeConfig {
            base_learner: self.base_learner,
            solver: SolverConfig {
                c: self.svm_c,
                ridge_reg: self.ridge_reg,
                tol: self.solver_tol,
                max_iters: self.solver_max_iters,
            },
            inner_steps: self.inner_steps,
            latent_samples: self.latent_samples,
            var_on: self.var_on,
            query_reduction: self.query_reduction,
            precision: self.precision,
        }
    }

    /// Training settings for images of shape `[channels, side, side]`.
    pub fn train_config(&self, input_shape: &[usize]) -> Result<TrainConfig, ConfigError> {
        let model = match input_shape {
            [c, h, w] if h == w => {
                let mut m = ModelConfig::conv(*c, *h, self.latent_dim);
                m.recon_hidden = self.recon_hidden;
                m
            }
            other => {
                return Err(field_err(
                    "data",
                    format!("expected square [C, H, W] images, got {other:?}"),
                ))
            }
        };
        let mut t = TrainConfig::new(model, self.episode_spec()?);
        t.epochs = self.epochs;
        t.episodes_per_epoch = self.episodes_per_epoch;
        t.meta_batch_size = self.meta_batch;
        t.val_episodes = self.val_episodes;
        t.lr_anchors = self.lr_anchors.clone();
        t.momentum = self.momentum;
        t.weight_decay = self.weight_decay;
        t.grad_clip = self.grad_clip;
        t.scalars = ScalarInit {
            lambda: self.lambda_init,
            varphi: self.varphi_init,
            beta: self.beta_init,
        };
        t.episode = self.episode_config();
        t.master_seed = self.seed;
        t.threads = self.threads;
        t.validate().map_err(|e| field_err("train", e))?;
        Ok(t)
    }

    pub fn eval_config(&self) -> Result<EvalConfig, ConfigError> {
        if self.eval_episodes == 0 {
            return Err(field_err("eval_episodes", "must be at least 1"));
        }
        if self.threads == 0 {
            return Err(field_err("threads", "must be at least 1"));
        }
        Ok(EvalConfig {
            spec: self.episode_spec()?,
            episode: self.episode_config(),
            episodes: self.eval_episodes,
            seed: self.seed,
            threads: self.threads,
            stochastic: self.stochastic_eval,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_text(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn comments_and_blank_lines_are_skipped() {
        let c = RunConfig::from_text("# run\n\nway = 3\n  shot=2  \n").unwrap();
        assert_eq!((c.way, c.shot), (3, 2));
    }

    #[test]
    fn errors_name_the_field() {
        let e = RunConfig::from_text("latent_dim = many").unwrap_err();
        assert!(
            matches!(&e, ConfigError::Field { field, .. } if field == "latent_dim"),
            "{e}"
        );
        assert_eq!(
            RunConfig::from_text("latent = 3").unwrap_err(),
            ConfigError::UnknownKey("latent".into())
        );
        assert!(matches!(
            RunConfig::from_text("way 3").unwrap_err(),
            ConfigError::Syntax { line: 1, .. }
        ));
    }

    #[test]
    fn schedule_and_clip_parse() {
        let c = RunConfig::from_text("lr_anchors = 1:0.5, 3:0.05\ngrad_clip = none").unwrap();
        assert_eq!(c.lr_anchors, vec![(1, 0.5), (3, 0.05)]);
        assert_eq!(c.grad_clip, None);
    }

    fn arb_config() -> impl Strategy<Value = RunConfig> {
        (
            (
                1usize..10,
                1usize..5,
                1usize..20,
                1usize..128,
                prop::bool::ANY,
                0u64..u64::MAX,
            ),
            (
                1e-4f64..10.0,
                1e-6f64..1.0,
                prop::option::of(1e-3f64..5.0),
                0.0f64..=1.0,
                1usize..8,
            ),
            (
                prop::collection::vec((1usize..100, 1e-5f64..1.0), 1..4),
                prop::bool::ANY,
                prop::bool::ANY,
            ),
        )
            .prop_map(
                |(
                    (way, shot, query, dim, svm, seed),
                    (c, lr0, clip, diff, threads),
                    (mut anchors, f64p, synth),
                )| {
                    anchors.sort_by_key(|a| a.0);
                    anchors.dedup_by_key(|a| a.0);
                    anchors[0].0 = 1;
                    RunConfig {
                        way,
                        shot,
                        query,
                        latent_dim: dim,
                        base_learner: if svm {
                            BaseLearnerKind::Svm
                        } else {
                            BaseLearnerKind::Ridge
                        },
                        seed,
                        svm_c: c,
                        lambda_init: lr0,
                        grad_clip: clip,
                        difficulty: Difficulty(diff),
                        threads,
                        lr_anchors: anchors,
                        precision: if f64p { Precision::F64 } else { Precision::F32 },
                        synthetic: synth.then_some(SynthKind::RingShapes),
                        data_root: (!synth).then(|| PathBuf::from("/data/some dir")),
                        ..Default::default()
                    }
                },
            )
    }

    proptest! {
        #[test]
        fn parse_serialize_parse_is_identity(c in arb_config()) {
            let text = c.to_text();
            let back = RunConfig::from_text(&text).unwrap();
            prop_assert_eq!(&back, &c);
            prop_assert_eq!(back.to_text(), text);
        }
    }
}
