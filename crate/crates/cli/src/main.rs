use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};

use metalatent::baselearners::BaseLearnerKind;
use metalatent::selfcheck::{summarize_suites, GradcheckConfig, DEFAULT_TOLERANCE};
use metalatent_cli::commands;
use metalatent_cli::config::{RunConfig, SEED_ENV};

#[derive(Parser)]
#[command(
    name = "metalatent",
    version,
    about = "Few-shot meta-learning with variational latent codes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Meta-train and write the best-validation checkpoint plus metrics.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "run")]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on the test split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate across latent dimensions with shared seeds.
    Ablate {
        #[command(flatten)]
        common: Common,
        /// Comma-separated latent dimensions.
        #[arg(long, value_delimiter = ',', num_args = 0..)]
        dims: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_value = "svm")]
        base_learners: Vec<BaseLearnerKind>,
        /// Comma-separated master seeds; defaults to the configured seed.
        #[arg(long, value_delimiter = ',')]
        seeds: Vec<u64>,
        #[arg(long, default_value = "ablate")]
        out: PathBuf,
    },
    /// Finite-difference checks of every differentiated path.
    Gradcheck {
        #[arg(long)]
        seed: Option<u64>,
        /// Corrupt the backward rule of this op (self-test of the checker).
        #[arg(long)]
        inject_fault: Option<String>,
        /// Restrict to these suites (numcore, latentspace, baselearners, metaloop).
        #[arg(long, value_delimiter = ',')]
        suite: Vec<String>,
        #[arg(long, default_value_t = DEFAULT_TOLERANCE)]
        tolerance: f64,
    },
    /// Write a synthetic dataset in the image-folder layout with split manifests.
    SynthExport {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        out: PathBuf,
    },
}

/// Settings shared by data-consuming commands. Flags override the config file.
#[derive(Args, Default)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set svm_c=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    synthetic: Option<String>,
    #[arg(long)]
    data_root: Option<String>,
    #[arg(long)]
    split_manifests: Option<String>,
    #[arg(long)]
    way: Option<String>,
    #[arg(long)]
    shot: Option<String>,
    #[arg(long)]
    query: Option<String>,
    #[arg(long)]
    base_learner: Option<String>,
    #[arg(long)]
    latent_dim: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    epochs: Option<String>,
    #[arg(long)]
    episodes_per_epoch: Option<String>,
    #[arg(long)]
    threads: Option<String>,
    #[arg(long)]
    eval_episodes: Option<String>,
    /// Sample latent codes during evaluation instead of using their means.
    #[arg(long)]
    stochastic_eval: bool,
}

impl Common {
    fn flag_pairs(&self) -> Result<Vec<(String, String)>> {
        let mut out = vec![];
        let named = [
            ("synthetic", &self.synthetic),
            ("data_root", &self.data_root),
            ("split_manifests", &self.split_manifests),
            ("way", &self.way),
            ("shot", &self.shot),
            ("query", &self.query),
            ("base_learner", &self.base_learner),
            ("latent_dim", &self.latent_dim),
            ("seed", &self.seed),
            ("epochs", &self.epochs),
            ("episodes_per_epoch", &self.episodes_per_epoch),
            ("threads", &self.threads),
            ("eval_episodes", &self.eval_episodes),
        ];
        // a data source given on the command line replaces the other one
        if self.synthetic.is_some() {
            out.push(("data_root".into(), "none".into()));
        }
        if self.data_root.is_some() {
            out.push(("synthetic".into(), "none".into()));
        }
        for (k, v) in named {
            if let Some(v) = v {
                out.push((k.to_string(), v.clone()));
            }
        }
        if self.stochastic_eval {
            out.push(("stochastic_eval".into(), "true".into()));
        }
        for s in &self.set {
            let (k, v) = s
                .split_once('=')
                .with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
            out.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(out)
    }

    /// defaults < `base` < config file < METALATENT_SEED (seed only, when unset) < flags
    fn resolve(&self, base: Option<&str>) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        let mut seeded = false;
        if let Some(text) = base {
            seeded |= cfg
                .apply_pairs(&RunConfig::parse_pairs(text)?)?
                .contains("seed");
        }
        if let Some(path) = &self.config {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("config {}", path.display()))?;
            let pairs = RunConfig::parse_pairs(&text)
                .with_context(|| format!("config {}", path.display()))?;
            seeded |= cfg.apply_pairs(&pairs)?.contains("seed");
        }
        let flags = self.flag_pairs()?;
        if !seeded && !flags.iter().any(|(k, _)| k == "seed") {
            if let Ok(v) = std::env::var(SEED_ENV) {
                cfg.set("seed", &v).with_context(|| SEED_ENV.to_string())?;
            }
        }
        cfg.apply_pairs(&flags)?;
        Ok(cfg)
    }
}

fn env_seed() -> Result<Option<u64>> {
    match std::env::var(SEED_ENV) {
        Ok(v) => Ok(Some(
            v.trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={v:?}"))?,
        )),
        Err(_) => Ok(None),
    }
}

/// `Ok(true)` when the command completed and every check passed.
fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Train { common, out } => {
            let cfg = common.resolve(None)?;
            let res = commands::run_train(&cfg, &out)?;
            let s = &res.summary;
            match s.best_val_acc {
                Some(v) => println!("best epoch {} val acc {v:.4}", s.best_epoch),
                None => println!("trained {} epochs (no validation split)", s.best_epoch),
            }
            println!("wrote {}", out.join(commands::CHECKPOINT_FILE).display());
            Ok(true)
        }
        Command::Eval {
            common,
            checkpoint,
            out,
        } => {
            let stored = commands::checkpoint_config(&checkpoint)?;
            let cfg = common.resolve(stored.as_deref())?;
            let (summary, _) = commands::run_eval(&cfg, &checkpoint, out.as_deref())?;
            println!("{}", summary.display);
            Ok(summary.params_unchanged)
        }
        Command::Ablate {
            common,
            dims,
            base_learners,
            seeds,
            out,
        } => {
            let cfg = common.resolve(None)?;
            let seeds = if seeds.is_empty() {
                vec![cfg.seed]
            } else {
                seeds
            };
            let summary = commands::run_ablate(&cfg, &dims, &base_learners, &seeds, &out)?;
            println!("base_learner,latent_dim,mean_acc,ci95");
            for r in &summary.rows {
                let ci = r
                    .ci95
                    .map_or_else(|| "N/A".to_string(), |c| format!("{c:.4}"));
                println!("{},{},{:.4},{ci}", r.base_learner, r.latent_dim, r.mean_acc);
            }
            Ok(true)
        }
        Command::Gradcheck {
            seed,
            inject_fault,
            suite,
            tolerance,
        } => {
            let cfg = GradcheckConfig {
                seed: match seed {
                    Some(s) => s,
                    None => env_seed()?.unwrap_or(0),
                },
                fault: inject_fault,
                tolerance,
            };
            let results = commands::run_gradcheck(&cfg, &suite)?;
            for r in &results {
                let status = if r.passed { "ok" } else { "FAIL" };
                println!(
                    "{:<13} {:<32} {:.3e} {status}",
                    r.suite, r.case, r.max_rel_err
                );
            }
            let mut all = true;
            for s in summarize_suites(&results) {
                if s.failed.is_empty() {
                    println!(
                        "suite {}: {} cases, max relative error {:.3e}: pass",
                        s.suite, s.cases, s.max_rel_err
                    );
                } else {
                    all = false;
                    println!("suite {}: FAIL in {}", s.suite, s.failed.join(", "));
                }
            }
            Ok(all)
        }
        Command::SynthExport { common, out } => {
            let cfg = common.resolve(None)?;
            let images = commands::run_synth_export(&cfg, &out)?;
            println!(
                "wrote {} and split manifests in {}",
                images.display(),
                out.display()
            );
            Ok(true)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
