//! Two-stage training: semi-supervised pre-training with the dual contrastive
//! objective plus cross-entropy and per-epoch pseudo-labeling, then
//! prior-guided tuning under the freeze policy. Runs are deterministic given
//! (dataset, config, seed).

use std::collections::BTreeMap;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::rng::SeededRng;
use crate::core::{EmbeddingBatch, FeatureDataset, LabelState};
use crate::losses::{contrastive_loss, ContrastiveKind, LossConfig, LossError};
use crate::model::forward::{
    classify, classify_backward_ce, cross_entropy, fuse, fuse_backward, mask_frozen, prior_embed,
    prior_embed_backward, prior_fuse, prior_fuse_backward, prior_fuse_contrast_tokens, project,
    project_backward,
};
use crate::model::{
    freeze_for_stage2, save_checkpoint, ModelError, ModelGrads, ModelParams, ParamGroup,
};
use crate::priors::PriorRecord;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("need at least 2 labeled samples spanning 2 classes, got {labeled} across {classes}")]
    InsufficientLabels { labeled: usize, classes: usize },
    #[error("prior record references unknown sample id {0}")]
    MissingPrior(String),
    #[error("invalid train config: {0}")]
    InvalidConfig(String),
    #[error("gradient shape does not match trainable group")]
    ShapeMismatch,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
}

/// Loss selection for the tuning stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage2Loss {
    #[default]
    CrossEntropy,
    CrossEntropyPlusBdcl,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossConfig,
    #[serde(default)]
    pub contrastive: ContrastiveKind,
    pub learning_rate: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub batch_size: usize,
    /// Pseudo-label acceptance threshold theta.
    pub confidence_threshold: f64,
    /// Pseudo-labeling starts after this many completed epochs (cold start).
    pub pseudo_start_epoch: usize,
    #[serde(default = "default_true")]
    pub pseudo_labeling: bool,
    pub lambda_ce: f64,
    #[serde(default)]
    pub stage2_loss: Stage2Loss,
    pub seed: u64,
    #[serde(skip)]
    pub checkpoint_dir: Option<PathBuf>,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossConfig::default(),
            contrastive: ContrastiveKind::Bdcl,
            learning_rate: 5e-3,
            epochs_stage1: 30,
            epochs_stage2: 20,
            batch_size: 32,
            confidence_threshold: 0.8,
            pseudo_start_epoch: 5,
            pseudo_labeling: true,
            lambda_ce: 1.0,
            stage2_loss: Stage2Loss::CrossEntropy,
            seed: 0,
            checkpoint_dir: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(TrainError::InvalidConfig(
                "confidence threshold must lie in (0, 1]".into(),
            ));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TrainError::InvalidConfig(
                "learning rate must be positive".into(),
            ));
        }
        if self.batch_size < 2 {
            return Err(TrainError::InvalidConfig("batch size must be >= 2".into()));
        }
        if self.lambda_ce < 0.0 {
            return Err(TrainError::InvalidConfig(
                "lambda_ce must be non-negative".into(),
            ));
        }
        self.loss.validate()?;
        Ok(())
    }
}

/// Per-epoch training record.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct EpochRecord {
    pub stage: u8,
    pub epoch: usize,
    pub total_loss: f64,
    pub ce_loss: f64,
    pub contrastive_loss: f64,
    pub labeled: usize,
    pub pseudo_labeled: usize,
    pub train_accuracy: f64,
    pub skipped_single_class_batches: usize,
}

#[derive(Debug, Clone, Default, Serialize, Deserialize, PartialEq)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
}

/// Adaptive-moment optimizer state, one moment pair per parameter group.
#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: u64,
    moments: BTreeMap<ParamGroup, (Vec<f64>, Vec<f64>)>,
}

impl AdamState {
    pub fn new() -> Self {
        AdamState::default()
    }
}

/// One adaptive-moment update (beta1=0.9, beta2=0.999, eps=1e-8) applied to
/// trainable groups only. Frozen groups are left bit-identical; supplying a
/// nonzero gradient for one logs a warning.
pub fn optimize_step(
    params: &mut ModelParams,
    grads: &ModelGrads,
    state: &mut AdamState,
    lr: f64,
) -> Result<(), TrainError> {
    if params.trainable.trainable_groups().is_empty() {
        return Err(TrainError::InvalidConfig(
            "optimization step with every parameter group frozen".into(),
        ));
    }
    state.step += 1;
    let t = state.step as i32;
    for group in ParamGroup::ALL {
        let g = grads.flatten_group(group);
        if !params.trainable.get(group) {
            if g.iter().any(|&v| v != 0.0) {
                log::warn!(
                    "nonzero gradient supplied for frozen group {}",
                    group.name()
                );
            }
            continue;
        }
        let mut p = params.flatten_group(group);
        if g.len() != p.len() {
            return Err(TrainError::ShapeMismatch);
        }
        let (m, v) = state
            .moments
            .entry(group)
            .or_insert_with(|| (vec![0.0; g.len()], vec![0.0; g.len()]));
        if m.len() != g.len() {
            return Err(TrainError::ShapeMismatch);
        }
        let bc1 = 1.0 - ADAM_BETA1.powi(t);
        let bc2 = 1.0 - ADAM_BETA2.powi(t);
        for i in 0..g.len() {
            m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
            v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
            let m_hat = m[i] / bc1;
            let v_hat = v[i] / bc2;
            p[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
        params.set_group(group, &p)?;
    }
    Ok(())
}

/// A pseudo-label proposal for one unlabeled sample.
#[derive(Debug, Clone, PartialEq)]
pub struct PseudoAssignment {
    pub index: usize,
    pub sample_id: String,
    pub class: usize,
    pub confidence: f64,
}

/// Runs project -> fuse -> classify on each candidate sample and emits
/// (argmax class, max probability) whenever the max probability reaches the
/// threshold. Ties go to the lowest class id. Never touches labeled samples.
pub fn pseudo_label(
    params: &ModelParams,
    dataset: &FeatureDataset,
    candidates: &[usize],
    threshold: f64,
) -> Result<Vec<PseudoAssignment>, TrainError> {
    let mut out = Vec::new();
    for &i in candidates {
        let sample = &dataset.samples[i];
        if sample.label.is_supervised() {
            continue;
        }
        let mut z: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for m in 0..3 {
            z[m] = project(params, m, &sample.features[m])?.0;
        }
        let (fused, _) = fuse(params, [&z[0], &z[1], &z[2]], None)?;
        let (probs, _) = classify(params, &fused)?;
        let mut best = 0usize;
        for (c, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = c;
            }
        }
        if probs[best] >= threshold {
            out.push(PseudoAssignment {
                index: i,
                sample_id: sample.id.clone(),
                class: best,
                confidence: probs[best],
            });
        }
    }
    Ok(out)
}

// --- batch construction -------------------------------------------------------

/// Class-stratified minibatches: each class's (shuffled) samples are dealt
/// across all batches with a random per-class rotation, so every batch sees
/// roughly the class mix of the pool.
fn stratified_batches(
    labels: &[LabelState],
    indices: &[usize],
    batch_size: usize,
    rng: &mut SeededRng,
) -> Vec<Vec<usize>> {
    let mut by_class: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &i in indices {
        if let Some(c) = labels[i].class_id() {
            by_class.entry(c).or_default().push(i);
        }
    }
    let total: usize = by_class.values().map(|v| v.len()).sum();
    if total == 0 {
        return Vec::new();
    }
    let num_batches = total.div_ceil(batch_size);
    let mut batches: Vec<Vec<usize>> = vec![Vec::new(); num_batches];
    for list in by_class.values_mut() {
        rng.shuffle(list);
        let rotation = rng.usize_below(num_batches);
        for (j, &idx) in list.iter().enumerate() {
            batches[(j + rotation) % num_batches].push(idx);
        }
    }
    batches.retain(|b| !b.is_empty());
    batches
}

fn distinct_classes(labels: &[LabelState], indices: &[usize]) -> usize {
    let mut seen: Vec<usize> = indices
        .iter()
        .filter_map(|&i| labels[i].class_id())
        .collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

// --- stage 1 -------------------------------------------------------------------

#[derive(Debug, Clone, Copy, Default)]
pub struct BatchStats {
    pub ce: f64,
    pub contrastive: f64,
    pub skipped_contrastive: bool,
}

/// Loss and (freeze-masked) gradients of one stage-1 minibatch:
/// `lambda_ce * CE(classify(fuse(z))) + L_contrastive(z)` over the given
/// sample indices, with `labels` overriding the dataset's label states.
pub fn stage1_batch_loss(
    params: &ModelParams,
    dataset: &FeatureDataset,
    labels: &[LabelState],
    indices: &[usize],
    cfg: &TrainConfig,
) -> Result<(f64, ModelGrads, BatchStats), TrainError> {
    let d = params.dims.latent;
    let b = indices.len();
    let mut grads = params.zeros_like();
    let mut stats = BatchStats::default();

    // forward
    let mut proj_caches = Vec::with_capacity(b);
    let mut fuse_caches = Vec::with_capacity(b);
    let mut cls_caches = Vec::with_capacity(b);
    let mut targets = Vec::with_capacity(b);
    let mut z_batch: [Vec<Vec<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut batch_labels = Vec::with_capacity(b);
    for &i in indices {
        let sample = &dataset.samples[i];
        let target = labels[i]
            .class_id()
            .ok_or_else(|| TrainError::InvalidConfig("unsupervised sample in batch".into()))?;
        let mut zs: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut pcs = Vec::with_capacity(3);
        for m in 0..3 {
            let (z, pc) = project(params, m, &sample.features[m])?;
            zs[m] = z;
            pcs.push(pc);
        }
        let (fused, fc) = fuse(params, [&zs[0], &zs[1], &zs[2]], None)?;
        let (probs, cc) = classify(params, &fused)?;
        stats.ce += cross_entropy(&probs, target) / b as f64;
        for m in 0..3 {
            z_batch[m].push(zs[m].clone());
        }
        batch_labels.push(labels[i]);
        targets.push(target);
        proj_caches.push(pcs);
        fuse_caches.push(fc);
        cls_caches.push(cc);
    }

    // contrastive component over the batch embeddings
    let embeddings = EmbeddingBatch::new_unchecked(z_batch, batch_labels, d);
    let contrast = if distinct_classes(labels, indices) >= 2 {
        Some(contrastive_loss(cfg.contrastive, &embeddings, &cfg.loss)?)
    } else {
        log::warn!("minibatch holds a single class; contrastive terms skipped");
        stats.skipped_contrastive = true;
        None
    };
    if let Some(c) = &contrast {
        stats.contrastive = c.value;
    }

    // backward
    for (pos, &i) in indices.iter().enumerate() {
        let _ = i;
        let dfused = classify_backward_ce(
            params,
            &cls_caches[pos],
            targets[pos],
            cfg.lambda_ce / b as f64,
            &mut grads,
        )?;
        let dz_ce = fuse_backward(params, &fuse_caches[pos], &dfused, &mut grads)?;
        for m in 0..3 {
            let mut dz = dz_ce[m].clone();
            if let Some(c) = &contrast {
                for (g, extra) in dz.iter_mut().zip(&c.grad[m][pos]) {
                    *g += extra;
                }
            }
            project_backward(params, m, &proj_caches[pos][m], &dz, &mut grads)?;
        }
    }

    mask_frozen(params, &mut grads);
    let total = cfg.lambda_ce * stats.ce + stats.contrastive;
    Ok((total, grads, stats))
}

fn train_accuracy(
    params: &ModelParams,
    dataset: &FeatureDataset,
    labels: &[LabelState],
    indices: &[usize],
) -> Result<f64, TrainError> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for &i in indices {
        let sample = &dataset.samples[i];
        let mut z: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        for m in 0..3 {
            z[m] = project(params, m, &sample.features[m])?.0;
        }
        let (fused, _) = fuse(params, [&z[0], &z[1], &z[2]], None)?;
        let (probs, _) = classify(params, &fused)?;
        let mut best = 0usize;
        for (c, &p) in probs.iter().enumerate() {
            if p > probs[best] {
                best = c;
            }
        }
        if Some(best) == labels[i].class_id() {
            correct += 1;
        }
    }
    Ok(correct as f64 / indices.len() as f64)
}

fn count_states(labels: &[LabelState]) -> (usize, usize) {
    let mut labeled = 0;
    let mut pseudo = 0;
    for l in labels {
        match l {
            LabelState::Labeled(_) => labeled += 1,
            LabelState::PseudoLabeled { .. } => pseudo += 1,
            LabelState::Unlabeled => {}
        }
    }
    (labeled, pseudo)
}

/// Large-scale semi-supervised pre-training: epochs of minibatch optimization
/// on `lambda_ce * CE + L_contrastive` over the supervised subset; after each
/// epoch past the cold-start boundary the unlabeled samples are re-labeled
/// from scratch by [`pseudo_label`] and join the next epoch's supervision.
pub fn stage1_train(
    dataset: &FeatureDataset,
    params: ModelParams,
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    cfg.validate()?;
    let mut labels = dataset.labels();
    let labeled: Vec<usize> = (0..labels.len())
        .filter(|&i| matches!(labels[i], LabelState::Labeled(_)))
        .collect();
    let classes = distinct_classes(&labels, &labeled);
    if labeled.len() < 2 || classes < 2 {
        return Err(TrainError::InsufficientLabels {
            labeled: labeled.len(),
            classes,
        });
    }
    let originally_unlabeled = dataset.unlabeled_indices();

    let mut params = params;
    let mut adam = AdamState::new();
    let mut rng = SeededRng::derive(cfg.seed, "stage1");
    let mut history = TrainHistory::default();

    for epoch in 0..cfg.epochs_stage1 {
        let supervised: Vec<usize> = (0..labels.len())
            .filter(|&i| labels[i].is_supervised())
            .collect();
        let batches = stratified_batches(&labels, &supervised, cfg.batch_size, &mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_ce = 0.0;
        let mut epoch_con = 0.0;
        let mut skipped = 0usize;
        for batch in &batches {
            let (total, grads, stats) = stage1_batch_loss(&params, dataset, &labels, batch, cfg)?;
            optimize_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;
            epoch_total += total;
            epoch_ce += stats.ce;
            epoch_con += stats.contrastive;
            if stats.skipped_contrastive {
                skipped += 1;
            }
        }
        let nb = batches.len().max(1) as f64;

        // pseudo-labels are recomputed from scratch after the cold start
        if cfg.pseudo_labeling
            && !originally_unlabeled.is_empty()
            && epoch + 1 >= cfg.pseudo_start_epoch
        {
            for &i in &originally_unlabeled {
                labels[i] = LabelState::Unlabeled;
            }
            let assignments = pseudo_label(
                &params,
                dataset,
                &originally_unlabeled,
                cfg.confidence_threshold,
            )?;
            for a in assignments {
                labels[a.index] = LabelState::PseudoLabeled {
                    class: a.class,
                    confidence: a.confidence,
                };
            }
        }

        let (labeled_count, pseudo_count) = count_states(&labels);
        let acc = train_accuracy(&params, dataset, &labels, &supervised)?;
        history.epochs.push(EpochRecord {
            stage: 1,
            epoch: epoch + 1,
            total_loss: epoch_total / nb,
            ce_loss: epoch_ce / nb,
            contrastive_loss: epoch_con / nb,
            labeled: labeled_count,
            pseudo_labeled: pseudo_count,
            train_accuracy: acc,
            skipped_single_class_batches: skipped,
        });
        if let Some(dir) = &cfg.checkpoint_dir {
            save_checkpoint(
                &params,
                &dir.join(format!("stage1_epoch{:03}.ckpt", epoch + 1)),
            )?;
        }
    }
    Ok((params, history))
}

// --- stage 2 --------------------------------------------------------------------

/// Loss and masked gradients of one stage-2 minibatch: cross-entropy of
/// classify(prior_fuse(prior_embed(record), z)) against the record's decided
/// label, optionally plus the dual contrastive loss on the normalized
/// prior-fusion tokens.
pub fn stage2_batch_loss(
    params: &ModelParams,
    dataset: &FeatureDataset,
    items: &[(usize, &PriorRecord)],
    cfg: &TrainConfig,
) -> Result<(f64, ModelGrads, BatchStats), TrainError> {
    let d = params.dims.latent;
    let b = items.len();
    let mut grads = params.zeros_like();
    let mut stats = BatchStats::default();

    let mut proj_caches = Vec::with_capacity(b);
    let mut embed_caches = Vec::with_capacity(b);
    let mut pf_caches = Vec::with_capacity(b);
    let mut cls_caches = Vec::with_capacity(b);
    let mut z_tokens: [Vec<Vec<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut token_labels = Vec::with_capacity(b);
    for &(i, record) in items {
        let sample = &dataset.samples[i];
        let mut zs: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
        let mut pcs = Vec::with_capacity(3);
        for m in 0..3 {
            let (z, pc) = project(params, m, &sample.features[m])?;
            zs[m] = z;
            pcs.push(pc);
        }
        let (embedding, ec) = prior_embed(params, record)?;
        let (fused, pfc) = prior_fuse(params, &embedding, [&zs[0], &zs[1], &zs[2]])?;
        let (probs, cc) = classify(params, &fused)?;
        stats.ce += cross_entropy(&probs, record.label) / b as f64;
        if cfg.stage2_loss == Stage2Loss::CrossEntropyPlusBdcl {
            let tokens = prior_fuse_contrast_tokens(&pfc)?;
            for m in 0..3 {
                z_tokens[m].push(tokens[m].clone());
            }
            token_labels.push(LabelState::Labeled(record.label));
        }
        proj_caches.push(pcs);
        embed_caches.push(ec);
        pf_caches.push(pfc);
        cls_caches.push(cc);
    }

    let contrast = if cfg.stage2_loss == Stage2Loss::CrossEntropyPlusBdcl {
        let classes = {
            let mut c: Vec<usize> = items.iter().map(|(_, r)| r.label).collect();
            c.sort_unstable();
            c.dedup();
            c.len()
        };
        if classes >= 2 {
            let batch = EmbeddingBatch::new_unchecked(z_tokens, token_labels, d);
            Some(contrastive_loss(cfg.contrastive, &batch, &cfg.loss)?)
        } else {
            log::warn!("stage-2 minibatch holds a single class; contrastive terms skipped");
            stats.skipped_contrastive = true;
            None
        }
    } else {
        None
    };
    if let Some(c) = &contrast {
        stats.contrastive = c.value;
    }

    for (pos, &(_, record)) in items.iter().enumerate() {
        let dfused = classify_backward_ce(
            params,
            &cls_caches[pos],
            record.label,
            1.0 / b as f64,
            &mut grads,
        )?;
        let dcontrast_vecs = contrast
            .as_ref()
            .map(|c| [&c.grad[0][pos], &c.grad[1][pos], &c.grad[2][pos]]);
        let dcontrast = dcontrast_vecs
            .as_ref()
            .map(|v| [v[0].as_slice(), v[1].as_slice(), v[2].as_slice()]);
        let (de, dz) =
            prior_fuse_backward(params, &pf_caches[pos], &dfused, dcontrast, &mut grads)?;
        prior_embed_backward(params, &embed_caches[pos], &de, &mut grads)?;
        for m in 0..3 {
            project_backward(params, m, &proj_caches[pos][m], &dz[m], &mut grads)?;
        }
    }

    mask_frozen(params, &mut grads);
    let total = stats.ce + stats.contrastive;
    Ok((total, grads, stats))
}

/// Reliable-prior-guided tuning: applies the stage-2 freeze policy, then
/// optimizes the prior projectors and prior-fusion block on the prior-covered
/// samples. Frozen groups come out bit-identical.
pub fn stage2_tune(
    params: ModelParams,
    dataset: &FeatureDataset,
    priors: &[PriorRecord],
    cfg: &TrainConfig,
) -> Result<(ModelParams, TrainHistory), TrainError> {
    cfg.validate()?;
    let id_to_index: BTreeMap<&str, usize> = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| (s.id.as_str(), i))
        .collect();
    let mut items: Vec<(usize, &PriorRecord)> = Vec::with_capacity(priors.len());
    for record in priors {
        let &idx = id_to_index
            .get(record.sample_id.as_str())
            .ok_or_else(|| TrainError::MissingPrior(record.sample_id.clone()))?;
        items.push((idx, record));
    }

    let mut params = freeze_for_stage2(params);
    let mut adam = AdamState::new();
    let mut rng = SeededRng::derive(cfg.seed, "stage2");
    let mut history = TrainHistory::default();

    // stratify by the record's decided label
    let record_labels: Vec<LabelState> = items
        .iter()
        .map(|(_, r)| LabelState::Labeled(r.label))
        .collect();
    let item_indices: Vec<usize> = (0..items.len()).collect();

    for epoch in 0..cfg.epochs_stage2 {
        let batches = stratified_batches(&record_labels, &item_indices, cfg.batch_size, &mut rng);
        let mut epoch_total = 0.0;
        let mut epoch_ce = 0.0;
        let mut epoch_con = 0.0;
        let mut skipped = 0usize;
        for batch in &batches {
            let batch_items: Vec<(usize, &PriorRecord)> = batch.iter().map(|&j| items[j]).collect();
            let (total, grads, stats) = stage2_batch_loss(&params, dataset, &batch_items, cfg)?;
            optimize_step(&mut params, &grads, &mut adam, cfg.learning_rate)?;
            epoch_total += total;
            epoch_ce += stats.ce;
            epoch_con += stats.contrastive;
            if stats.skipped_contrastive {
                skipped += 1;
            }
        }
        let nb = batches.len().max(1) as f64;

        // accuracy of the prior path against the record labels
        let mut correct = 0usize;
        for &(i, record) in &items {
            let sample = &dataset.samples[i];
            let mut z: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
            for m in 0..3 {
                z[m] = project(&params, m, &sample.features[m])?.0;
            }
            let (embedding, _) = prior_embed(&params, record)?;
            let (fused, _) = prior_fuse(&params, &embedding, [&z[0], &z[1], &z[2]])?;
            let (probs, _) = classify(&params, &fused)?;
            let mut best = 0usize;
            for (c, &p) in probs.iter().enumerate() {
                if p > probs[best] {
                    best = c;
                }
            }
            if best == record.label {
                correct += 1;
            }
        }
        let (labeled_count, pseudo_count) = count_states(&dataset.labels());
        history.epochs.push(EpochRecord {
            stage: 2,
            epoch: epoch + 1,
            total_loss: epoch_total / nb,
            ce_loss: epoch_ce / nb,
            contrastive_loss: epoch_con / nb,
            labeled: labeled_count,
            pseudo_labeled: pseudo_count,
            train_accuracy: if items.is_empty() {
                0.0
            } else {
                correct as f64 / items.len() as f64
            },
            skipped_single_class_batches: skipped,
        });
        if let Some(dir) = &cfg.checkpoint_dir {
            save_checkpoint(
                &params,
                &dir.join(format!("stage2_epoch{:03}.ckpt", epoch + 1)),
            )?;
        }
    }
    Ok((params, history))
}
