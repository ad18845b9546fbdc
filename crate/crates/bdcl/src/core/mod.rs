//! Shared domain types and numerically stable primitives.
//!
//! Everything downstream (losses, model, trainer, evaluation) operates on the
//! types defined here: per-modality feature vectors, label states, and batches
//! of unit-norm latent embeddings.

pub mod rng;

use std::collections::BTreeMap;

use thiserror::Error;

/// Tolerance for the unit-norm invariant on latent embeddings.
pub const UNIT_NORM_TOL: f64 = 1e-9;

/// Vectors with L2 norm at or below this threshold cannot be normalized.
pub const ZERO_NORM_THRESHOLD: f64 = 1e-12;

#[derive(Debug, Error, PartialEq)]
pub enum CoreError {
    #[error("cannot normalize a vector with norm <= {ZERO_NORM_THRESHOLD}")]
    ZeroVector,
    #[error("empty input list")]
    EmptyList,
    #[error("no labeled or pseudo-labeled samples")]
    NoLabels,
    #[error("non-finite value encountered in {0}")]
    NonFinite(&'static str),
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("class id {class} out of range for {class_count} classes")]
    ClassOutOfRange { class: usize, class_count: usize },
}

/// One of the three input channels. The canonical order (Visual, Audio, Text)
/// is used for all indexing throughout the crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Modality {
    Visual,
    Audio,
    Text,
}

impl Modality {
    pub const ALL: [Modality; 3] = [Modality::Visual, Modality::Audio, Modality::Text];
    pub const COUNT: usize = 3;

    /// Position in the canonical (Visual, Audio, Text) order.
    pub fn index(self) -> usize {
        match self {
            Modality::Visual => 0,
            Modality::Audio => 1,
            Modality::Text => 2,
        }
    }

    pub fn from_index(i: usize) -> Option<Modality> {
        Modality::ALL.get(i).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Modality::Visual => "visual",
            Modality::Audio => "audio",
            Modality::Text => "text",
        }
    }
}

/// Supervision state of one sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LabelState {
    Labeled(usize),
    PseudoLabeled { class: usize, confidence: f64 },
    Unlabeled,
}

impl LabelState {
    /// Class id if the sample is labeled or pseudo-labeled.
    ///
    /// Pseudo-labels count as labels everywhere inside loss computations;
    /// the confidence is consulted only at assignment time.
    pub fn class_id(&self) -> Option<usize> {
        match *self {
            LabelState::Labeled(c) => Some(c),
            LabelState::PseudoLabeled { class, .. } => Some(class),
            LabelState::Unlabeled => None,
        }
    }

    pub fn is_supervised(&self) -> bool {
        self.class_id().is_some()
    }

    fn validate(&self, class_count: usize) -> Result<(), CoreError> {
        match *self {
            LabelState::Labeled(c) => {
                if c >= class_count {
                    return Err(CoreError::ClassOutOfRange {
                        class: c,
                        class_count,
                    });
                }
            }
            LabelState::PseudoLabeled { class, confidence } => {
                if class >= class_count {
                    return Err(CoreError::ClassOutOfRange { class, class_count });
                }
                if !(0.0..=1.0).contains(&confidence) {
                    return Err(CoreError::NonFinite("pseudo-label confidence"));
                }
            }
            LabelState::Unlabeled => {}
        }
        Ok(())
    }
}

/// Ground truth retained for evaluation only. Training code never reads this;
/// the value is reachable solely through [`HiddenLabel::for_evaluation`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct HiddenLabel(Option<usize>);

impl HiddenLabel {
    pub fn new(class: Option<usize>) -> Self {
        HiddenLabel(class)
    }

    pub fn for_evaluation(&self) -> Option<usize> {
        self.0
    }
}

/// One sample: an id, the three per-modality raw feature vectors, the label
/// state seen by training, and an evaluation-only hidden truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub id: String,
    pub features: [Vec<f64>; 3],
    pub label: LabelState,
    pub truth: HiddenLabel,
}

impl Sample {
    /// Ground-truth class for evaluation: the training label if present,
    /// otherwise the hidden truth carried by synthetic data.
    pub fn eval_truth(&self) -> Option<usize> {
        match self.label {
            LabelState::Labeled(c) => Some(c),
            _ => self.truth.for_evaluation(),
        }
    }
}

/// Per-sample, per-modality raw feature vectors plus label state.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureDataset {
    pub samples: Vec<Sample>,
    pub class_count: usize,
    pub dims: [usize; 3],
}

impl FeatureDataset {
    /// Validates that every sample carries all three modality vectors with
    /// consistent dimensions, finite entries, and in-range labels.
    pub fn new(
        samples: Vec<Sample>,
        class_count: usize,
        dims: [usize; 3],
    ) -> Result<Self, CoreError> {
        for sample in &samples {
            for m in 0..3 {
                if sample.features[m].len() != dims[m] {
                    return Err(CoreError::DimMismatch {
                        expected: dims[m],
                        got: sample.features[m].len(),
                    });
                }
                if sample.features[m].iter().any(|v| !v.is_finite()) {
                    return Err(CoreError::NonFinite("feature vector"));
                }
            }
            sample.label.validate(class_count)?;
            if let Some(t) = sample.truth.for_evaluation() {
                if t >= class_count {
                    return Err(CoreError::ClassOutOfRange {
                        class: t,
                        class_count,
                    });
                }
            }
        }
        Ok(FeatureDataset {
            samples,
            class_count,
            dims,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn labels(&self) -> Vec<LabelState> {
        self.samples.iter().map(|s| s.label).collect()
    }

    /// Indices of samples visible to supervised training (labeled or pseudo).
    pub fn supervised_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| self.samples[i].label.is_supervised())
            .collect()
    }

    pub fn unlabeled_indices(&self) -> Vec<usize> {
        (0..self.samples.len())
            .filter(|&i| matches!(self.samples[i].label, LabelState::Unlabeled))
            .collect()
    }

    /// Copy of the dataset with unlabeled samples dropped entirely.
    pub fn without_unlabeled(&self) -> FeatureDataset {
        FeatureDataset {
            samples: self
                .samples
                .iter()
                .filter(|s| s.label.is_supervised())
                .cloned()
                .collect(),
            class_count: self.class_count,
            dims: self.dims,
        }
    }
}

/// Projected unit-norm latent vectors indexed `[modality][sample]`, the
/// operand of every contrastive loss.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingBatch {
    pub z: [Vec<Vec<f64>>; 3],
    pub labels: Vec<LabelState>,
    pub dim: usize,
}

impl EmbeddingBatch {
    /// Validates the unit-norm and finiteness invariants for all (m, i).
    pub fn new(
        z: [Vec<Vec<f64>>; 3],
        labels: Vec<LabelState>,
        dim: usize,
    ) -> Result<Self, CoreError> {
        let n = labels.len();
        for zm in &z {
            if zm.len() != n {
                return Err(CoreError::DimMismatch {
                    expected: n,
                    got: zm.len(),
                });
            }
            for v in zm {
                if v.len() != dim {
                    return Err(CoreError::DimMismatch {
                        expected: dim,
                        got: v.len(),
                    });
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(CoreError::NonFinite("embedding"));
                }
                let norm = l2_norm(v);
                if (norm - 1.0).abs() > UNIT_NORM_TOL {
                    return Err(CoreError::NonFinite("embedding norm deviates from 1"));
                }
            }
        }
        Ok(EmbeddingBatch { z, labels, dim })
    }

    /// Skips the unit-norm check. Used by verification paths (finite-difference
    /// probes evaluate the losses at off-sphere points); the caller still
    /// guarantees finiteness and consistent shapes.
    pub fn new_unchecked(z: [Vec<Vec<f64>>; 3], labels: Vec<LabelState>, dim: usize) -> Self {
        EmbeddingBatch { z, labels, dim }
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn supervised_indices(&self) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&i| self.labels[i].is_supervised())
            .collect()
    }
}

pub fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `v / ||v||`. Errors on effectively-zero vectors.
pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>, CoreError> {
    if v.iter().any(|x| !x.is_finite()) {
        return Err(CoreError::NonFinite("l2_normalize input"));
    }
    let norm = l2_norm(v);
    if norm <= ZERO_NORM_THRESHOLD {
        return Err(CoreError::ZeroVector);
    }
    Ok(v.iter().map(|x| x / norm).collect())
}

/// Partition of the labeled/pseudo-labeled indices by class. Unlabeled
/// indices appear in no class set.
pub fn class_partition(labels: &[LabelState]) -> Result<BTreeMap<usize, Vec<usize>>, CoreError> {
    let mut partition: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, label) in labels.iter().enumerate() {
        if let Some(c) = label.class_id() {
            partition.entry(c).or_default().push(i);
        }
    }
    if partition.is_empty() {
        return Err(CoreError::NoLabels);
    }
    Ok(partition)
}

/// `log((1/n) * sum(exp(t_k)))` computed with a max shift so that the result
/// stays finite whenever the inputs are finite.
pub fn stable_log_mean_exp(terms: &[f64]) -> Result<f64, CoreError> {
    if terms.is_empty() {
        return Err(CoreError::EmptyList);
    }
    if terms.iter().any(|t| !t.is_finite()) {
        return Err(CoreError::NonFinite("stable_log_mean_exp input"));
    }
    let max = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let sum: f64 = terms.iter().map(|t| (t - max).exp()).sum();
    Ok(max + (sum / terms.len() as f64).ln())
}
