//! Command-line surface tying the modules into reproducible experiments.
//!
//! Every subcommand accepts `--config <file>` (falling back to the
//! `BDCL_CONFIG` environment variable, then to built-in defaults) and
//! `--seed` (overriding the config seed). Exit codes: 0 success, 1 validation
//! failure, 2 internal error.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::{
    fingerprint, load_config, ConfigError, ExperimentConfig, LoadedConfig, PriorsConfig,
    CONFIG_ENV_VAR,
};
use crate::datagen::{
    imbalance_profile, load_features, save_features, synth_dataset, synth_priors_with_tables,
};
use crate::eval::{evaluate, ReportMeta};
use crate::experiments::compare_profile;
use crate::gradcheck::run_suite;
use crate::model::{load_checkpoint, save_checkpoint, ModelDims, ModelParams};
use crate::priors::{
    ingest, save_priors, AuSupportTable, PriorTables, ProsodyLexicon, TextLexicon,
};
use crate::trainer::{stage1_train, stage2_tune, TrainHistory};

#[derive(Debug, Parser)]
#[command(
    name = "bdcl",
    about = "balanced dual-contrastive multimodal fusion experiments",
    version
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Experiment config (JSON). Falls back to $BDCL_CONFIG, then defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic feature dataset.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Generate synthetic reasoning-prior records for a dataset.
    GenPriors {
        #[command(flatten)]
        common: Common,
        /// Feature file produced by gen-data.
        #[arg(long)]
        data: PathBuf,
    },
    /// Stage-1 semi-supervised training.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Stage-2 prior-guided tuning from a stage-1 checkpoint.
    Tune {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        priors: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        /// Evaluate through the prior-fusion path with these records.
        #[arg(long)]
        priors: Option<PathBuf>,
    },
    /// Run the full finite-difference gradient suite.
    Gradcheck {
        #[command(flatten)]
        common: Common,
    },
    /// Dual objective vs standard InfoNCE across imbalance profiles.
    CompareLosses {
        #[command(flatten)]
        common: Common,
    },
    /// Imbalance-profile sampling mechanics.
    ProfileSample {
        #[command(flatten)]
        common: Common,
    },
}

enum CliFailure {
    Validation(String),
    Internal(String),
}

impl CliFailure {
    fn code(&self) -> i32 {
        match self {
            CliFailure::Validation(_) => 1,
            CliFailure::Internal(_) => 2,
        }
    }

    fn message(&self) -> &str {
        match self {
            CliFailure::Validation(m) | CliFailure::Internal(m) => m,
        }
    }
}

fn validation(e: impl std::fmt::Display) -> CliFailure {
    CliFailure::Validation(e.to_string())
}

fn internal(e: impl std::fmt::Display) -> CliFailure {
    CliFailure::Internal(e.to_string())
}

/// Resolves the experiment config: explicit flag, then environment variable,
/// then built-in defaults, applying the seed override everywhere relevant.
fn resolve_config(common: &Common) -> Result<LoadedConfig, CliFailure> {
    let path = common
        .config
        .clone()
        .or_else(|| std::env::var(CONFIG_ENV_VAR).ok().map(PathBuf::from));
    let mut loaded = match path {
        Some(p) => load_config(&p).map_err(|e| match e {
            ConfigError::Io { .. } => validation(e),
            other => validation(other),
        })?,
        None => {
            let config = ExperimentConfig::default();
            let bytes = serde_json::to_vec(&config).map_err(internal)?;
            LoadedConfig {
                config,
                fingerprint: fingerprint(&bytes),
            }
        }
    };
    if let Some(seed) = common.seed {
        loaded.config.seed = seed;
    }
    loaded.config.data.seed = loaded.config.seed;
    loaded.config.train.seed = loaded.config.seed;
    Ok(loaded)
}

fn ensure_out_dir(dir: &Path) -> Result<(), CliFailure> {
    std::fs::create_dir_all(dir).map_err(internal)
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<(), CliFailure> {
    let mut text = serde_json::to_string_pretty(value).map_err(internal)?;
    text.push('\n');
    std::fs::write(path, text).map_err(internal)
}

fn write_history(path: &Path, history: &TrainHistory) -> Result<(), CliFailure> {
    let mut text = String::new();
    for record in &history.epochs {
        text.push_str(&serde_json::to_string(record).map_err(internal)?);
        text.push('\n');
    }
    std::fs::write(path, text).map_err(internal)
}

fn load_dataset(path: &Path) -> Result<crate::core::FeatureDataset, CliFailure> {
    load_features(path).map_err(validation)
}

/// Tables for the stub provider: defaults for the class count, with any file
/// named in the config swapped in.
fn resolve_tables(cfg: &PriorsConfig, class_count: usize) -> Result<PriorTables, CliFailure> {
    let mut tables = PriorTables::for_class_count(class_count).map_err(validation)?;
    if let Some(path) = &cfg.au_table {
        tables.au = AuSupportTable::from_path(path).map_err(validation)?;
    }
    if let Some(path) = &cfg.prosody_lexicon {
        tables.prosody = ProsodyLexicon::from_path(path).map_err(validation)?;
    }
    if let Some(path) = &cfg.text_lexicon {
        tables.text = TextLexicon::from_path(path).map_err(validation)?;
    }
    Ok(tables)
}

pub fn cli_main<I, S>(argv: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            // clap handles --help/--version as "errors" with success status
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(failure) => {
            eprintln!("error: {}", failure.message());
            failure.code()
        }
    }
}

fn run(cli: Cli) -> Result<(), CliFailure> {
    match cli.command {
        Command::GenData { common } => {
            let loaded = resolve_config(&common)?;
            ensure_out_dir(&common.out)?;
            let dataset = synth_dataset(&loaded.config.data).map_err(validation)?;
            let path = common.out.join("features.jsonl");
            save_features(&dataset, &path).map_err(internal)?;
            println!(
                "wrote {} samples ({} classes) to {}",
                dataset.len(),
                dataset.class_count,
                path.display()
            );
            Ok(())
        }
        Command::GenPriors { common, data } => {
            let loaded = resolve_config(&common)?;
            ensure_out_dir(&common.out)?;
            let dataset = load_dataset(&data)?;
            let tables = resolve_tables(&loaded.config.priors, dataset.class_count)?;
            let records = synth_priors_with_tables(
                &dataset,
                &tables,
                loaded.config.priors.fidelity,
                loaded.config.priors.r_policy,
                loaded.config.seed,
            )
            .map_err(validation)?;
            let path = common.out.join("priors.jsonl");
            save_priors(&records, &path).map_err(internal)?;
            println!(
                "wrote {} prior records to {}",
                records.len(),
                path.display()
            );
            Ok(())
        }
        Command::Train { common, data } => {
            let loaded = resolve_config(&common)?;
            ensure_out_dir(&common.out)?;
            let dataset = load_dataset(&data)?;
            let dims = ModelDims::new(
                loaded.config.model.latent_dim,
                dataset.dims,
                dataset.class_count,
            );
            let params = ModelParams::init(dims, loaded.config.seed);
            let ckpt_dir = common.out.join("checkpoints");
            ensure_out_dir(&ckpt_dir)?;
            let mut train_cfg = loaded.config.train.clone();
            train_cfg.checkpoint_dir = Some(ckpt_dir);
            let (params, history) =
                stage1_train(&dataset, params, &train_cfg).map_err(validation)?;
            save_checkpoint(&params, &common.out.join("stage1.ckpt")).map_err(internal)?;
            write_history(&common.out.join("stage1_history.jsonl"), &history)?;
            let meta = ReportMeta {
                config_fingerprint: loaded.fingerprint.clone(),
                seed: loaded.config.seed,
            };
            let report = evaluate(&params, &dataset, None, &meta).map_err(validation)?;
            write_json(&common.out.join("stage1_report.json"), &report)?;
            println!(
                "stage 1 done: overall accuracy {:.4}, weighted F1 {:.4}",
                report.overall_accuracy, report.weighted_f1
            );
            Ok(())
        }
        Command::Tune {
            common,
            data,
            priors,
            ckpt,
        } => {
            let loaded = resolve_config(&common)?;
            ensure_out_dir(&common.out)?;
            let dataset = load_dataset(&data)?;
            let params = load_checkpoint(&ckpt).map_err(validation)?;
            let outcome = ingest(
                &priors,
                dataset.class_count,
                loaded.config.priors.strict_ingest,
            )
            .map_err(validation)?;
            for (line, reason) in &outcome.skipped {
                log::warn!("priors line {line} skipped: {reason}");
            }
            let ckpt_dir = common.out.join("checkpoints");
            ensure_out_dir(&ckpt_dir)?;
            let mut train_cfg = loaded.config.train.clone();
            train_cfg.checkpoint_dir = Some(ckpt_dir);
            let (params, history) =
                stage2_tune(params, &dataset, &outcome.records, &train_cfg).map_err(validation)?;
            save_checkpoint(&params, &common.out.join("stage2.ckpt")).map_err(internal)?;
            write_history(&common.out.join("stage2_history.jsonl"), &history)?;
            // evaluation runs through the prior path, restricted to covered samples
            let covered: std::collections::BTreeSet<&str> = outcome
                .records
                .iter()
                .map(|r| r.sample_id.as_str())
                .collect();
            let subset = crate::core::FeatureDataset::new(
                dataset
                    .samples
                    .iter()
                    .filter(|s| covered.contains(s.id.as_str()))
                    .cloned()
                    .collect(),
                dataset.class_count,
                dataset.dims,
            )
            .map_err(validation)?;
            let meta = ReportMeta {
                config_fingerprint: loaded.fingerprint.clone(),
                seed: loaded.config.seed,
            };
            let report =
                evaluate(&params, &subset, Some(&outcome.records), &meta).map_err(validation)?;
            write_json(&common.out.join("stage2_report.json"), &report)?;
            println!(
                "stage 2 done: overall accuracy {:.4}, weighted F1 {:.4}",
                report.overall_accuracy, report.weighted_f1
            );
            Ok(())
        }
        Command::Eval {
            common,
            data,
            ckpt,
            priors,
        } => {
            let loaded = resolve_config(&common)?;
            ensure_out_dir(&common.out)?;
            let dataset = load_dataset(&data)?;
            let params = load_checkpoint(&ckpt).map_err(validation)?;
            let records = match &priors {
                Some(p) => Some(
                    ingest(p, dataset.class_count, loaded.config.priors.strict_ingest)
                        .map_err(validation)?
                        .records,
                ),
                None => None,
            };
            let meta = ReportMeta {
                config_fingerprint: loaded.fingerprint.clone(),
                seed: loaded.config.seed,
            };
            let report =
                evaluate(&params, &dataset, records.as_deref(), &meta).map_err(validation)?;
            write_json(&common.out.join("report.json"), &report)?;
            println!(
                "overall accuracy {:.4}, weighted F1 {:.4}, silhouette {}",
                report.overall_accuracy,
                report.weighted_f1,
                report
                    .silhouette
                    .map(|s| format!("{s:.4}"))
                    .unwrap_or_else(|| "n/a".into())
            );
            Ok(())
        }
        Command::Gradcheck { common } => {
            let loaded = resolve_config(&common)?;
            let report = run_suite(loaded.config.seed, 4);
            for case in &report.cases {
                println!(
                    "{:<24} instances {:>2}  max rel err {:.3e}",
                    case.name, case.instances, case.max_rel_err
                );
            }
            println!(
                "gradcheck: {} instances, max rel err {:.3e} (tolerance {:.0e}): {}",
                report.total_instances,
                report.max_rel_err,
                report.tolerance,
                if report.passed { "PASS" } else { "FAIL" }
            );
            ensure_out_dir(&common.out)?;
            write_json(&common.out.join("gradcheck.json"), &report)?;
            if report.passed {
                Ok(())
            } else {
                Err(CliFailure::Validation("gradient check failed".into()))
            }
        }
        Command::CompareLosses { common } => {
            let loaded = resolve_config(&common)?;
            ensure_out_dir(&common.out)?;
            let mut rows = Vec::new();
            for profile in &loaded.config.compare.profiles {
                for &seed in &loaded.config.compare.seeds {
                    let row = compare_profile(
                        profile,
                        &loaded.config.data,
                        loaded.config.model.latent_dim,
                        &loaded.config.train,
                        seed,
                    )
                    .map_err(validation)?;
                    println!(
                        "counts {:?} seed {}: silhouette {:.4} vs {:.4}, tail recall {:.4} vs {:.4}",
                        row.counts,
                        row.seed,
                        row.silhouette_bdcl,
                        row.silhouette_infonce,
                        row.tail_recall_bdcl,
                        row.tail_recall_infonce
                    );
                    rows.push(row);
                }
            }
            let mut text = String::new();
            for row in &rows {
                text.push_str(&serde_json::to_string(row).map_err(internal)?);
                text.push('\n');
            }
            std::fs::write(common.out.join("compare_losses.jsonl"), text).map_err(internal)?;
            Ok(())
        }
        Command::ProfileSample { common } => {
            let loaded = resolve_config(&common)?;
            ensure_out_dir(&common.out)?;
            let s = &loaded.config.sampling;
            let added = imbalance_profile(
                s.kind,
                &s.base_counts,
                s.extra,
                &s.pool_counts,
                loaded.config.seed,
            )
            .map_err(validation)?;
            let totals: Vec<usize> = s
                .base_counts
                .iter()
                .zip(&added)
                .map(|(b, a)| b + a)
                .collect();
            let summary = serde_json::json!({
                "kind": s.kind,
                "base_counts": s.base_counts,
                "added": added,
                "totals": totals,
                "total": totals.iter().sum::<usize>(),
            });
            println!("{summary}");
            write_json(&common.out.join("profile_sample.json"), &summary)?;
            Ok(())
        }
    }
}
