//! Balanced dual-contrastive losses with exact analytic gradients.
//!
//! Two components share one structure: an anchor embedding, a set of positive
//! partners, and a denominator computed over a pool of (embedding, class)
//! pairs. The balanced denominator averages per class first and over classes
//! second, so every class contributes equal probability mass to the negative
//! distribution no matter how rare it is in the batch. The standard variant
//! uses a plain mean over the pool and serves as the comparison baseline.
//!
//! Gradients are accumulated term by term in sorted index order so that
//! results are bit-reproducible.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::core::{class_partition, dot, stable_log_mean_exp, CoreError, EmbeddingBatch, Modality};

#[derive(Debug, Error, PartialEq)]
pub enum LossError {
    #[error("denominator pool is empty")]
    EmptyPool,
    #[error("every anchor has an empty positive set")]
    NoPositivePairs,
    #[error("batch contains no labeled or pseudo-labeled samples")]
    NoLabels,
    #[error("invalid loss config: {0}")]
    InvalidConfig(&'static str),
    #[error(transparent)]
    Core(#[from] CoreError),
}

/// Whether the anchor embedding itself belongs to its own denominator pool.
/// Excluding it avoids the uninformative self-similarity term exp(1/tau);
/// including it makes the balanced and plain denominators coincide exactly on
/// class-balanced batches.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AnchorMode {
    #[default]
    Exclude,
    Include,
}

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct LossConfig {
    pub lambda_inter: f64,
    pub lambda_intra: f64,
    pub tau: f64,
    #[serde(default)]
    pub anchor_mode: AnchorMode,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            lambda_inter: 0.2,
            lambda_intra: 0.2,
            tau: 0.1,
            anchor_mode: AnchorMode::Exclude,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.tau > 0.0) {
            return Err(LossError::InvalidConfig("tau must be positive"));
        }
        if self.lambda_inter < 0.0 || self.lambda_intra < 0.0 {
            return Err(LossError::InvalidConfig("lambdas must be non-negative"));
        }
        Ok(())
    }
}

/// Loss value together with its gradient w.r.t. every embedding, shaped
/// `[modality][sample][dim]` like the input batch.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: f64,
    pub grad: [Vec<Vec<f64>>; 3],
}

impl LossOutput {
    fn zeros(batch: &EmbeddingBatch) -> Self {
        let zero = vec![vec![0.0; batch.dim]; batch.len()];
        LossOutput {
            value: 0.0,
            grad: [zero.clone(), zero.clone(), zero],
        }
    }

    fn scaled_add(&mut self, other: &LossOutput, factor: f64) {
        self.value += factor * other.value;
        for m in 0..3 {
            for (gi, oi) in self.grad[m].iter_mut().zip(&other.grad[m]) {
                for (g, o) in gi.iter_mut().zip(oi) {
                    *g += factor * o;
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum DenomKind {
    Balanced,
    Plain,
}

/// One member of a denominator pool: modality slot, sample index, class.
#[derive(Debug, Clone, Copy)]
struct PoolEntry {
    modality: usize,
    sample: usize,
    class: usize,
}

/// The class-balanced denominator of the dual-contrastive losses:
/// `D = (1/C') * sum_c (1/|B_c|) * sum_{k in B_c} exp(anchor . z_k / tau)`
/// where `C'` counts the classes actually present in the pool. Computed via
/// the stable log-mean-exp primitive class by class.
pub fn balanced_denominator(
    anchor: &[f64],
    pool: &[(&[f64], usize)],
    class_count: usize,
    tau: f64,
) -> Result<f64, LossError> {
    if pool.is_empty() {
        return Err(LossError::EmptyPool);
    }
    let mut per_class: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for (z, c) in pool {
        if *c >= class_count {
            return Err(LossError::Core(CoreError::ClassOutOfRange {
                class: *c,
                class_count,
            }));
        }
        per_class.entry(*c).or_default().push(dot(anchor, z) / tau);
    }
    let present = per_class.len() as f64;
    let mut total = 0.0;
    for sims in per_class.values() {
        total += stable_log_mean_exp(sims)?.exp();
    }
    Ok(total / present)
}

/// Denominator value plus the per-entry weights `w_k` with `D = sum_k w_k`,
/// which are exactly the coefficients needed by the gradient:
/// `d log D / d anchor = (1/D) sum_k w_k z_k / tau`.
fn denominator_terms(
    anchor: &[f64],
    entries: &[PoolEntry],
    z: &[Vec<Vec<f64>>; 3],
    tau: f64,
    kind: DenomKind,
) -> Result<(f64, Vec<f64>), LossError> {
    if entries.is_empty() {
        return Err(LossError::EmptyPool);
    }
    let sims: Vec<f64> = entries
        .iter()
        .map(|e| dot(anchor, &z[e.modality][e.sample]) / tau)
        .collect();
    let weights: Vec<f64> = match kind {
        DenomKind::Balanced => {
            let mut class_sizes: BTreeMap<usize, usize> = BTreeMap::new();
            for e in entries {
                *class_sizes.entry(e.class).or_insert(0) += 1;
            }
            let present = class_sizes.len() as f64;
            entries
                .iter()
                .zip(&sims)
                .map(|(e, s)| s.exp() / (present * class_sizes[&e.class] as f64))
                .collect()
        }
        DenomKind::Plain => {
            let n = entries.len() as f64;
            sims.iter().map(|s| s.exp() / n).collect()
        }
    };
    let value = weights.iter().sum();
    Ok((value, weights))
}

/// Shared accumulation for one anchor/positive pair:
/// term = -anchor.pos/tau + log D, with gradient contributions
/// distributed to the anchor, the positive, and every pool member.
#[allow(clippy::too_many_arguments)]
fn accumulate_term(
    out: &mut LossOutput,
    z: &[Vec<Vec<f64>>; 3],
    anchor: (usize, usize),
    positive: (usize, usize),
    entries: &[PoolEntry],
    denom: f64,
    weights: &[f64],
    tau: f64,
    coeff: f64,
) -> f64 {
    let (am, ai) = anchor;
    let (pm, pi) = positive;
    let sim = dot(&z[am][ai], &z[pm][pi]) / tau;
    let term = -sim + denom.ln();

    // numerator: d(-a.p/tau)
    for d in 0..z[am][ai].len() {
        out.grad[am][ai][d] -= coeff * z[pm][pi][d] / tau;
        out.grad[pm][pi][d] -= coeff * z[am][ai][d] / tau;
    }
    // denominator: d log D = (1/D) sum_k w_k * d(a.z_k)/tau
    let inv = coeff / (denom * tau);
    for (e, w) in entries.iter().zip(weights) {
        for d in 0..z[am][ai].len() {
            out.grad[am][ai][d] += inv * w * z[e.modality][e.sample][d];
            out.grad[e.modality][e.sample][d] += inv * w * z[am][ai][d];
        }
    }
    term
}

fn intra_loss_impl(
    batch: &EmbeddingBatch,
    cfg: &LossConfig,
    kind: DenomKind,
) -> Result<LossOutput, LossError> {
    cfg.validate()?;
    let labeled = batch.supervised_indices();
    if labeled.is_empty() {
        return Err(LossError::NoLabels);
    }
    let partition = class_partition(&batch.labels)?;
    let class_of: BTreeMap<usize, usize> = partition
        .iter()
        .flat_map(|(&c, idxs)| idxs.iter().map(move |&i| (i, c)))
        .collect();

    let mut out = LossOutput::zeros(batch);
    let mut anchor_count = 0usize;
    let mut total = 0.0;

    for m in 0..Modality::COUNT {
        for &i in &labeled {
            let class = class_of[&i];
            let positives: Vec<usize> = partition[&class]
                .iter()
                .cloned()
                .filter(|&j| j != i)
                .collect();
            if positives.is_empty() {
                continue; // anchors without a same-label partner are skipped
            }
            anchor_count += 1;
            let entries: Vec<PoolEntry> = labeled
                .iter()
                .filter(|&&k| cfg.anchor_mode == AnchorMode::Include || k != i)
                .map(|&k| PoolEntry {
                    modality: m,
                    sample: k,
                    class: class_of[&k],
                })
                .collect();
            let (denom, weights) =
                denominator_terms(&batch.z[m][i], &entries, &batch.z, cfg.tau, kind)?;
            let pair_coeff = 1.0 / positives.len() as f64;
            for &j in &positives {
                total += pair_coeff
                    * accumulate_term(
                        &mut out,
                        &batch.z,
                        (m, i),
                        (m, j),
                        &entries,
                        denom,
                        &weights,
                        cfg.tau,
                        pair_coeff, // rescaled by 1/anchor_count below
                    );
            }
        }
    }

    if anchor_count == 0 {
        return Err(LossError::NoPositivePairs);
    }
    let scale = 1.0 / anchor_count as f64;
    out.value = total * scale;
    for gm in &mut out.grad {
        for gi in gm {
            for g in gi {
                *g *= scale;
            }
        }
    }
    Ok(out)
}

fn inter_loss_impl(
    batch: &EmbeddingBatch,
    cfg: &LossConfig,
    kind: DenomKind,
) -> Result<LossOutput, LossError> {
    cfg.validate()?;
    let labeled = batch.supervised_indices();
    if labeled.is_empty() {
        return Err(LossError::NoLabels);
    }
    let partition = class_partition(&batch.labels)?;
    let class_of: BTreeMap<usize, usize> = partition
        .iter()
        .flat_map(|(&c, idxs)| idxs.iter().map(move |&i| (i, c)))
        .collect();

    let mut out = LossOutput::zeros(batch);
    let mut total = 0.0;
    // all 6 ordered modality pairs: the anchor sits on each side once
    let pairs: Vec<(usize, usize)> = (0..3)
        .flat_map(|m| (0..3).filter(move |&n| n != m).map(move |n| (m, n)))
        .collect();
    let term_count = (pairs.len() * labeled.len()) as f64;

    for &i in &labeled {
        for &(m, n) in &pairs {
            let entries: Vec<PoolEntry> = labeled
                .iter()
                .flat_map(|&k| (0..Modality::COUNT).map(move |mm| (mm, k)))
                .filter(|&(mm, k)| cfg.anchor_mode == AnchorMode::Include || !(mm == m && k == i))
                .map(|(mm, k)| PoolEntry {
                    modality: mm,
                    sample: k,
                    class: class_of[&k],
                })
                .collect();
            let (denom, weights) =
                denominator_terms(&batch.z[m][i], &entries, &batch.z, cfg.tau, kind)?;
            total += accumulate_term(
                &mut out,
                &batch.z,
                (m, i),
                (n, i),
                &entries,
                denom,
                &weights,
                cfg.tau,
                1.0,
            );
        }
    }

    let scale = 1.0 / term_count;
    out.value = total * scale;
    for gm in &mut out.grad {
        for gi in gm {
            for g in gi {
                *g *= scale;
            }
        }
    }
    Ok(out)
}

/// Emotion-aware InfoNCE within each modality with the class-balanced
/// denominator restricted to that modality's embeddings.
pub fn intra_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    intra_loss_impl(batch, cfg, DenomKind::Balanced)
}

/// Symmetric cross-modality InfoNCE: positives are the same sample's other
/// modalities; the balanced denominator pools embeddings of all modalities.
pub fn inter_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    inter_loss_impl(batch, cfg, DenomKind::Balanced)
}

/// `lambda_inter * L_inter + lambda_intra * L_intra`, with the gradient as
/// the same linear combination of the component gradients.
pub fn bdcl_loss(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    let inter = inter_loss(batch, cfg)?;
    let intra = intra_loss(batch, cfg)?;
    let mut out = LossOutput::zeros(batch);
    out.scaled_add(&inter, cfg.lambda_inter);
    out.scaled_add(&intra, cfg.lambda_intra);
    Ok(out)
}

/// Intra-modality loss with the conventional unbalanced denominator
/// (plain mean over the pool, no per-class reweighting).
pub fn standard_intra_loss(
    batch: &EmbeddingBatch,
    cfg: &LossConfig,
) -> Result<LossOutput, LossError> {
    intra_loss_impl(batch, cfg, DenomKind::Plain)
}

/// Inter-modality loss with the conventional unbalanced denominator.
pub fn standard_inter_loss(
    batch: &EmbeddingBatch,
    cfg: &LossConfig,
) -> Result<LossOutput, LossError> {
    inter_loss_impl(batch, cfg, DenomKind::Plain)
}

/// Baseline objective: the same dual structure with plain-mean denominators.
pub fn standard_infonce(batch: &EmbeddingBatch, cfg: &LossConfig) -> Result<LossOutput, LossError> {
    let inter = standard_inter_loss(batch, cfg)?;
    let intra = standard_intra_loss(batch, cfg)?;
    let mut out = LossOutput::zeros(batch);
    out.scaled_add(&inter, cfg.lambda_inter);
    out.scaled_add(&intra, cfg.lambda_intra);
    Ok(out)
}

/// Contrastive objective selector used by the trainer and the comparison
/// harness.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContrastiveKind {
    #[default]
    Bdcl,
    StandardInfonce,
}

pub fn contrastive_loss(
    kind: ContrastiveKind,
    batch: &EmbeddingBatch,
    cfg: &LossConfig,
) -> Result<LossOutput, LossError> {
    match kind {
        ContrastiveKind::Bdcl => bdcl_loss(batch, cfg),
        ContrastiveKind::StandardInfonce => standard_infonce(batch, cfg),
    }
}
