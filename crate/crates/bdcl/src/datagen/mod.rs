//! Synthetic multimodal datasets with controllable class imbalance and
//! cross-modal structure, the imbalance-profile sampling mechanics, synthetic
//! prior generation, and the feature file format.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::rng::SeededRng;
use crate::core::{FeatureDataset, HiddenLabel, LabelState, Sample};
use crate::priors::provider::{PromptTemplate, RPolicy, SampleMeta, StubProvider, TraceProvider};
use crate::priors::{PriorError, PriorRecord, PriorTables};

pub const FEATURE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("invalid config: {0}")]
    InvalidConfig(String),
    #[error("sampling pool exhausted for class {0}")]
    PoolExhausted(usize),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },
    #[error("dimension mismatch at line {line}: expected {expected}, got {got}")]
    DimMismatch {
        line: usize,
        expected: usize,
        got: usize,
    },
    #[error(transparent)]
    Prior(#[from] PriorError),
    #[error(transparent)]
    Core(#[from] crate::core::CoreError),
}

/// Configuration for the synthetic generator. `consistency[m]` is the
/// probability that modality m's cluster matches the sample's true class;
/// with probability `1 - consistency[m]` the vector is drawn from a uniformly
/// chosen other class's cluster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SynthConfig {
    pub class_count: usize,
    pub counts: Vec<usize>,
    pub dims: [usize; 3],
    pub sigma: f64,
    pub consistency: [f64; 3],
    pub unlabeled_fraction: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            class_count: 3,
            counts: vec![40, 40, 40],
            dims: [16, 16, 16],
            sigma: 1.0,
            consistency: [0.85, 0.85, 0.85],
            unlabeled_fraction: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.class_count == 0 {
            return Err(DataError::InvalidConfig(
                "class_count must be positive".into(),
            ));
        }
        if self.counts.len() != self.class_count {
            return Err(DataError::InvalidConfig(format!(
                "counts has {} entries for {} classes",
                self.counts.len(),
                self.class_count
            )));
        }
        let total: usize = self.counts.iter().sum();
        if total < 2 {
            return Err(DataError::InvalidConfig("need at least 2 samples".into()));
        }
        if !(self.sigma > 0.0) {
            return Err(DataError::InvalidConfig("sigma must be positive".into()));
        }
        if self.dims.iter().any(|&d| d < 2) {
            return Err(DataError::InvalidConfig(
                "modality dims must be >= 2".into(),
            ));
        }
        if self.consistency.iter().any(|&r| !(0.0..=1.0).contains(&r)) {
            return Err(DataError::InvalidConfig(
                "consistency must lie in [0, 1]".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.unlabeled_fraction) {
            return Err(DataError::InvalidConfig(
                "unlabeled_fraction must lie in [0, 1)".into(),
            ));
        }
        Ok(())
    }
}

/// Draws one Gaussian cluster center per (class, modality), then samples each
/// feature vector from its class center — or, with probability
/// `1 - consistency[m]`, from another class's center — plus `sigma` noise.
/// `round(unlabeled_fraction * N)` samples lose their label; the true class
/// is retained in the evaluation-only hidden slot.
pub fn synth_dataset(cfg: &SynthConfig) -> Result<FeatureDataset, DataError> {
    cfg.validate()?;
    let mut rng = SeededRng::derive(cfg.seed, "synth-dataset");
    let c = cfg.class_count;

    // centers[m][class] in R^{dims[m]}
    let centers: Vec<Vec<Vec<f64>>> = (0..3)
        .map(|m| {
            (0..c)
                .map(|_| (0..cfg.dims[m]).map(|_| rng.normal()).collect())
                .collect()
        })
        .collect();

    let total: usize = cfg.counts.iter().sum();
    let mut samples = Vec::with_capacity(total);
    let mut idx = 0usize;
    for (class, &count) in cfg.counts.iter().enumerate() {
        for _ in 0..count {
            let mut features: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
            for m in 0..3 {
                let effective_class = if rng.bernoulli(cfg.consistency[m]) || c == 1 {
                    class
                } else {
                    let offset = 1 + rng.usize_below(c - 1);
                    (class + offset) % c
                };
                features[m] = centers[m][effective_class]
                    .iter()
                    .map(|&mu| mu + cfg.sigma * rng.normal())
                    .collect();
            }
            samples.push(Sample {
                id: format!("s{idx:05}"),
                features,
                label: LabelState::Labeled(class),
                truth: HiddenLabel::new(Some(class)),
            });
            idx += 1;
        }
    }

    // strip labels from a seeded random subset
    let n_unlabeled = (cfg.unlabeled_fraction * total as f64 + 0.5).floor() as usize;
    let mut order: Vec<usize> = (0..total).collect();
    rng.shuffle(&mut order);
    for &i in order.iter().take(n_unlabeled) {
        samples[i].label = LabelState::Unlabeled;
    }

    Ok(FeatureDataset::new(samples, c, cfg.dims)?)
}

/// Deterministic per-class split for train/test experiments: the first
/// `test_fraction` share of each class (after a seeded shuffle) becomes the
/// test set.
pub fn split_dataset(
    dataset: &FeatureDataset,
    test_fraction: f64,
    seed: u64,
) -> Result<(FeatureDataset, FeatureDataset), DataError> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(DataError::InvalidConfig(
            "test_fraction must lie in [0, 1)".into(),
        ));
    }
    let mut rng = SeededRng::derive(seed, "split");
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); dataset.class_count];
    let mut rest = Vec::new();
    for (i, s) in dataset.samples.iter().enumerate() {
        match s.eval_truth() {
            Some(c) => by_class[c].push(i),
            None => rest.push(i),
        }
    }
    let mut test_idx = Vec::new();
    let mut train_idx = rest;
    for group in &mut by_class {
        rng.shuffle(group);
        let n_test = (test_fraction * group.len() as f64 + 0.5).floor() as usize;
        test_idx.extend(group.iter().take(n_test));
        train_idx.extend(group.iter().skip(n_test));
    }
    train_idx.sort_unstable();
    test_idx.sort_unstable();
    let pick = |idx: &[usize]| -> Result<FeatureDataset, DataError> {
        Ok(FeatureDataset::new(
            idx.iter().map(|&i| dataset.samples[i].clone()).collect(),
            dataset.class_count,
            dataset.dims,
        )?)
    };
    Ok((pick(&train_idx)?, pick(&test_idx)?))
}

/// Imbalance handling mode for sampling expansions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProfileKind {
    Random,
    Matched,
    Balanced,
}

/// Per-class counts to add when expanding a base label distribution with
/// `extra` samples drawn from a per-class pool.
///
/// random: uniform draws without replacement from the pool. matched:
/// proportional to the base counts with largest-remainder rounding. balanced:
/// greedy fill of the currently smallest class (never increases the max/min
/// class-count ratio).
pub fn imbalance_profile(
    kind: ProfileKind,
    base_counts: &[usize],
    extra: usize,
    pool_counts: &[usize],
    seed: u64,
) -> Result<Vec<usize>, DataError> {
    if base_counts.len() != pool_counts.len() || base_counts.is_empty() {
        return Err(DataError::InvalidConfig(
            "base and pool counts must have the same nonzero length".into(),
        ));
    }
    let c = base_counts.len();
    let mut added = vec![0usize; c];
    match kind {
        ProfileKind::Random => {
            let pool_total: usize = pool_counts.iter().sum();
            if extra > pool_total {
                let exhausted = (0..c).max_by_key(|&i| pool_counts[i]).unwrap_or(0);
                return Err(DataError::PoolExhausted(exhausted));
            }
            let mut rng = SeededRng::derive(seed, "profile-random");
            let mut remaining = pool_counts.to_vec();
            let mut remaining_total = pool_total;
            for _ in 0..extra {
                let mut draw = rng.usize_below(remaining_total);
                for class in 0..c {
                    if draw < remaining[class] {
                        added[class] += 1;
                        remaining[class] -= 1;
                        remaining_total -= 1;
                        break;
                    }
                    draw -= remaining[class];
                }
            }
        }
        ProfileKind::Matched => {
            let base_total: usize = base_counts.iter().sum();
            if base_total == 0 {
                return Err(DataError::InvalidConfig(
                    "matched needs nonzero base counts".into(),
                ));
            }
            // largest-remainder apportionment of `extra`
            let quotas: Vec<f64> = base_counts
                .iter()
                .map(|&b| extra as f64 * b as f64 / base_total as f64)
                .collect();
            let mut remainders: Vec<(usize, f64)> = Vec::with_capacity(c);
            let mut assigned = 0usize;
            for (class, &q) in quotas.iter().enumerate() {
                let floor = q.floor() as usize;
                added[class] = floor;
                assigned += floor;
                remainders.push((class, q - floor as f64));
            }
            remainders.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then_with(|| a.0.cmp(&b.0)));
            for &(class, _) in remainders.iter().take(extra - assigned) {
                added[class] += 1;
            }
            for class in 0..c {
                if added[class] > pool_counts[class] {
                    return Err(DataError::PoolExhausted(class));
                }
            }
        }
        ProfileKind::Balanced => {
            let mut totals: Vec<usize> = base_counts.to_vec();
            let mut pool = pool_counts.to_vec();
            for _ in 0..extra {
                // smallest class with pool remaining, ties to the lowest id
                let target = (0..c)
                    .filter(|&i| pool[i] > 0)
                    .min_by_key(|&i| (totals[i], i));
                match target {
                    Some(class) => {
                        added[class] += 1;
                        totals[class] += 1;
                        pool[class] -= 1;
                    }
                    None => {
                        let exhausted = (0..c).min_by_key(|&i| (totals[i], i)).unwrap_or(0);
                        return Err(DataError::PoolExhausted(exhausted));
                    }
                }
            }
        }
    }
    Ok(added)
}

/// Synthetic reasoning traces for every labeled sample of a dataset: with
/// probability `fidelity` the record's evidence decides the true label,
/// otherwise the evidence of a uniformly drawn wrong label.
pub fn synth_priors(
    dataset: &FeatureDataset,
    fidelity: f64,
    r_policy: RPolicy,
    seed: u64,
) -> Result<Vec<PriorRecord>, DataError> {
    let tables = PriorTables::for_class_count(dataset.class_count)?;
    synth_priors_with_tables(dataset, &tables, fidelity, r_policy, seed)
}

/// [`synth_priors`] against caller-supplied tables (swapped-in AU table or
/// lexicon files).
pub fn synth_priors_with_tables(
    dataset: &FeatureDataset,
    tables: &PriorTables,
    fidelity: f64,
    r_policy: RPolicy,
    seed: u64,
) -> Result<Vec<PriorRecord>, DataError> {
    if !(0.0..=1.0).contains(&fidelity) {
        return Err(DataError::InvalidConfig(format!(
            "fidelity {fidelity} outside [0, 1]"
        )));
    }
    if tables.class_count() != dataset.class_count {
        return Err(DataError::InvalidConfig(format!(
            "tables cover {} classes but the dataset has {}",
            tables.class_count(),
            dataset.class_count
        )));
    }
    let mut provider = StubProvider::new(tables.clone(), fidelity, r_policy, seed)?;
    let prompt = PromptTemplate::default();
    let mut records = Vec::new();
    for sample in &dataset.samples {
        if let Some(class) = sample.label.class_id() {
            let meta = SampleMeta {
                sample_id: sample.id.clone(),
                true_label: class,
                class_count: dataset.class_count,
            };
            records.push(provider.request(&meta, &prompt)?);
        }
    }
    Ok(records)
}

// --- feature file format -----------------------------------------------------
//
// Line 1 is a self-describing header; every following line is one sample.
// Floats round-trip exactly through serde_json's shortest representation.

#[derive(Debug, Serialize, Deserialize)]
struct FeatureHeader {
    schema_version: u32,
    sample_count: usize,
    class_count: usize,
    dims: [usize; 3],
}

#[derive(Debug, Serialize, Deserialize)]
struct FeatureRow {
    id: String,
    label: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pseudo: Option<(usize, f64)>,
    truth: Option<usize>,
    xv: Vec<f64>,
    xa: Vec<f64>,
    xt: Vec<f64>,
}

pub fn save_features(dataset: &FeatureDataset, path: &Path) -> Result<(), DataError> {
    let header = FeatureHeader {
        schema_version: FEATURE_SCHEMA_VERSION,
        sample_count: dataset.samples.len(),
        class_count: dataset.class_count,
        dims: dataset.dims,
    };
    let mut text = serde_json::to_string(&header).map_err(|e| DataError::Schema {
        line: 1,
        message: e.to_string(),
    })?;
    text.push('\n');
    for (i, sample) in dataset.samples.iter().enumerate() {
        let (label, pseudo) = match sample.label {
            LabelState::Labeled(c) => (Some(c), None),
            LabelState::PseudoLabeled { class, confidence } => (None, Some((class, confidence))),
            LabelState::Unlabeled => (None, None),
        };
        let row = FeatureRow {
            id: sample.id.clone(),
            label,
            pseudo,
            truth: sample.truth.for_evaluation(),
            xv: sample.features[0].clone(),
            xa: sample.features[1].clone(),
            xt: sample.features[2].clone(),
        };
        text.push_str(&serde_json::to_string(&row).map_err(|e| DataError::Schema {
            line: i + 2,
            message: e.to_string(),
        })?);
        text.push('\n');
    }
    std::fs::write(path, text)?;
    Ok(())
}

pub fn load_features(path: &Path) -> Result<FeatureDataset, DataError> {
    let text = std::fs::read_to_string(path)?;
    load_features_str(&text)
}

pub fn load_features_str(text: &str) -> Result<FeatureDataset, DataError> {
    let mut lines = text.lines().enumerate();
    let (_, header_line) = lines.next().ok_or(DataError::Schema {
        line: 1,
        message: "empty file".into(),
    })?;
    let header: FeatureHeader =
        serde_json::from_str(header_line).map_err(|e| DataError::Schema {
            line: 1,
            message: e.to_string(),
        })?;
    if header.schema_version != FEATURE_SCHEMA_VERSION {
        return Err(DataError::Schema {
            line: 1,
            message: format!("unsupported schema version {}", header.schema_version),
        });
    }
    let mut samples = Vec::with_capacity(header.sample_count);
    for (idx, line) in lines {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let row: FeatureRow = serde_json::from_str(line).map_err(|e| DataError::Schema {
            line: line_no,
            message: e.to_string(),
        })?;
        let dims = [row.xv.len(), row.xa.len(), row.xt.len()];
        for m in 0..3 {
            if dims[m] != header.dims[m] {
                return Err(DataError::DimMismatch {
                    line: line_no,
                    expected: header.dims[m],
                    got: dims[m],
                });
            }
        }
        let label = match (row.label, row.pseudo) {
            (Some(c), _) => LabelState::Labeled(c),
            (None, Some((class, confidence))) => LabelState::PseudoLabeled { class, confidence },
            (None, None) => LabelState::Unlabeled,
        };
        samples.push(Sample {
            id: row.id,
            features: [row.xv, row.xa, row.xt],
            label,
            truth: HiddenLabel::new(row.truth),
        });
    }
    if samples.len() != header.sample_count {
        return Err(DataError::Schema {
            line: 1,
            message: format!(
                "header declares {} samples, file has {}",
                header.sample_count,
                samples.len()
            ),
        });
    }
    Ok(FeatureDataset::new(
        samples,
        header.class_count,
        header.dims,
    )?)
}
