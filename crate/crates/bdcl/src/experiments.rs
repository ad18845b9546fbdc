//! Head-to-head comparison harness: the dual contrastive objective versus the
//! standard InfoNCE baseline on synthetic imbalance profiles, reporting the
//! separability proxy (silhouette) and tail-class recall for each run.

use serde::Serialize;

use crate::core::FeatureDataset;
use crate::datagen::{synth_dataset, DataError, SynthConfig};
use crate::eval::{evaluate, EvalError, ReportMeta};
use crate::losses::ContrastiveKind;
use crate::model::{ModelDims, ModelParams};
use crate::trainer::{stage1_train, TrainConfig, TrainError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

use thiserror::Error;

/// One profile/seed comparison row.
#[derive(Debug, Clone, Serialize)]
pub struct ComparisonRun {
    pub counts: Vec<usize>,
    pub seed: u64,
    pub tail_class: usize,
    pub silhouette_bdcl: f64,
    pub silhouette_infonce: f64,
    pub tail_recall_bdcl: f64,
    pub tail_recall_infonce: f64,
}

fn train_variant(
    dataset: &FeatureDataset,
    latent_dim: usize,
    cfg: &TrainConfig,
    kind: ContrastiveKind,
) -> Result<(f64, f64, usize), ExperimentError> {
    let dims = ModelDims::new(latent_dim, dataset.dims, dataset.class_count);
    let params = ModelParams::init(dims, cfg.seed);
    let mut cfg = cfg.clone();
    cfg.contrastive = kind;
    let (params, _history) = stage1_train(dataset, params, &cfg)?;
    let report = evaluate(&params, dataset, None, &ReportMeta::default())?;
    let tail = tail_class(dataset);
    let recall = report.per_class_accuracy[tail].unwrap_or(0.0);
    Ok((report.silhouette.unwrap_or(-1.0), recall, tail))
}

fn tail_class(dataset: &FeatureDataset) -> usize {
    let mut counts = vec![0usize; dataset.class_count];
    for s in &dataset.samples {
        if let Some(c) = s.eval_truth() {
            counts[c] += 1;
        }
    }
    (0..dataset.class_count)
        .min_by_key(|&c| (counts[c], c))
        .unwrap_or(0)
}

/// Trains two identical models (same data, same seeds, same epochs) that
/// differ only in the contrastive objective, and reports the separability
/// proxy plus tail-class recall for both.
pub fn compare_profile(
    counts: &[usize],
    data_template: &SynthConfig,
    latent_dim: usize,
    train_cfg: &TrainConfig,
    seed: u64,
) -> Result<ComparisonRun, ExperimentError> {
    let data_cfg = SynthConfig {
        class_count: counts.len(),
        counts: counts.to_vec(),
        seed,
        ..data_template.clone()
    };
    let dataset = synth_dataset(&data_cfg)?;
    let mut cfg = train_cfg.clone();
    cfg.seed = seed;
    let (sil_bdcl, recall_bdcl, tail) =
        train_variant(&dataset, latent_dim, &cfg, ContrastiveKind::Bdcl)?;
    let (sil_std, recall_std, _) =
        train_variant(&dataset, latent_dim, &cfg, ContrastiveKind::StandardInfonce)?;
    Ok(ComparisonRun {
        counts: counts.to_vec(),
        seed,
        tail_class: tail,
        silhouette_bdcl: sil_bdcl,
        silhouette_infonce: sil_std,
        tail_recall_bdcl: recall_bdcl,
        tail_recall_infonce: recall_std,
    })
}
