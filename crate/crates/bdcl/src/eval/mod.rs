//! Metrics and separability analysis: per-class accuracy, overall accuracy,
//! weighted and macro F1, the confusion matrix, and a quantitative
//! latent-space separability proxy (mean silhouette plus 2-D PCA coordinates
//! for external plotting).

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::{EmbeddingBatch, FeatureDataset, LabelState};
use crate::model::forward::{classify, fuse, prior_embed, prior_fuse, project};
use crate::model::{ModelError, ModelParams};
use crate::priors::PriorRecord;
use crate::trainer::TrainError;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("confusion matrix is empty")]
    EmptyMatrix,
    #[error("separability needs >= 2 classes with >= 2 samples each")]
    DegenerateClasses,
    #[error("sample {0} has no prior record but priors were requested")]
    MissingPrior(String),
    #[error("no samples with ground truth to evaluate")]
    NoGroundTruth,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Evaluation outcome. Per-class accuracy is `None` for classes absent from
/// the ground truth. Serialized field order is fixed by declaration order.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct MetricsReport {
    pub per_class_accuracy: Vec<Option<f64>>,
    pub overall_accuracy: f64,
    /// Unweighted mean of the per-class accuracies over classes with support.
    pub macro_accuracy: f64,
    pub weighted_f1: f64,
    pub macro_f1: f64,
    pub confusion: Vec<Vec<u64>>,
    pub silhouette: Option<f64>,
    pub evaluated_samples: usize,
    pub config_fingerprint: String,
    pub seed: u64,
}

/// Provenance stamped into every report.
#[derive(Debug, Clone, Default)]
pub struct ReportMeta {
    pub config_fingerprint: String,
    pub seed: u64,
}

/// Support-weighted mean of per-class F1 scores; classes with zero support
/// are excluded from the weighting.
pub fn weighted_f1(confusion: &[Vec<u64>]) -> Result<f64, EvalError> {
    f1_scores(confusion).map(|s| s.weighted)
}

struct F1Summary {
    weighted: f64,
    macro_mean: f64,
}

fn f1_scores(confusion: &[Vec<u64>]) -> Result<F1Summary, EvalError> {
    let c = confusion.len();
    if c == 0 || confusion.iter().any(|row| row.len() != c) {
        return Err(EvalError::EmptyMatrix);
    }
    let mut weighted = 0.0;
    let mut macro_sum = 0.0;
    let mut present = 0usize;
    let mut total_support = 0u64;
    for class in 0..c {
        let support: u64 = confusion[class].iter().sum();
        if support == 0 {
            continue;
        }
        total_support += support;
        present += 1;
        let tp = confusion[class][class] as f64;
        let col: u64 = (0..c).map(|r| confusion[r][class]).sum();
        let precision = if col > 0 { tp / col as f64 } else { 0.0 };
        let recall = tp / support as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        weighted += support as f64 * f1;
        macro_sum += f1;
    }
    if total_support == 0 {
        return Err(EvalError::EmptyMatrix);
    }
    Ok(F1Summary {
        weighted: weighted / total_support as f64,
        macro_mean: macro_sum / present as f64,
    })
}

/// Forward path selection for evaluation.
fn predict(
    params: &ModelParams,
    sample: &crate::core::Sample,
    prior: Option<&PriorRecord>,
) -> Result<(usize, [Vec<f64>; 3]), EvalError> {
    let mut z: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for m in 0..3 {
        z[m] = project(params, m, &sample.features[m])?.0;
    }
    let fused = match prior {
        Some(record) => {
            let (embedding, _) = prior_embed(params, record)?;
            prior_fuse(params, &embedding, [&z[0], &z[1], &z[2]])?.0
        }
        None => fuse(params, [&z[0], &z[1], &z[2]], None)?.0,
    };
    let (probs, _) = classify(params, &fused)?;
    let mut best = 0usize;
    for (c, &p) in probs.iter().enumerate() {
        if p > probs[best] {
            best = c;
        }
    }
    Ok((best, z))
}

/// Evaluates the model over every sample with ground truth (training labels,
/// or the hidden truth of synthetic unlabeled samples). When `use_priors` is
/// given, the prior-fusion path is used and every evaluated sample must have
/// a record.
pub fn evaluate(
    params: &ModelParams,
    dataset: &FeatureDataset,
    use_priors: Option<&[PriorRecord]>,
    meta: &ReportMeta,
) -> Result<MetricsReport, EvalError> {
    let c = dataset.class_count;
    let prior_by_id: std::collections::BTreeMap<&str, &PriorRecord> = use_priors
        .unwrap_or(&[])
        .iter()
        .map(|r| (r.sample_id.as_str(), r))
        .collect();

    let mut confusion = vec![vec![0u64; c]; c];
    let mut z_all: [Vec<Vec<f64>>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut truth_labels = Vec::new();
    for sample in &dataset.samples {
        let Some(truth) = sample.eval_truth() else {
            continue;
        };
        let prior = if use_priors.is_some() {
            Some(
                *prior_by_id
                    .get(sample.id.as_str())
                    .ok_or_else(|| EvalError::MissingPrior(sample.id.clone()))?,
            )
        } else {
            None
        };
        let (pred, z) = predict(params, sample, prior)?;
        confusion[truth][pred] += 1;
        for m in 0..3 {
            z_all[m].push(z[m].clone());
        }
        truth_labels.push(LabelState::Labeled(truth));
    }
    let evaluated: u64 = confusion.iter().flatten().sum();
    if evaluated == 0 {
        return Err(EvalError::NoGroundTruth);
    }

    let per_class_accuracy: Vec<Option<f64>> = (0..c)
        .map(|class| {
            let support: u64 = confusion[class].iter().sum();
            if support == 0 {
                None
            } else {
                Some(confusion[class][class] as f64 / support as f64)
            }
        })
        .collect();
    let overall = (0..c).map(|k| confusion[k][k]).sum::<u64>() as f64 / evaluated as f64;
    let present: Vec<f64> = per_class_accuracy.iter().filter_map(|a| *a).collect();
    let macro_accuracy = present.iter().sum::<f64>() / present.len() as f64;
    let f1 = f1_scores(&confusion)?;

    let latent_dim = params.dims.latent;
    let batch = EmbeddingBatch::new_unchecked(z_all, truth_labels, latent_dim);
    let silhouette = separability(&batch).ok().map(|(s, _)| s);

    Ok(MetricsReport {
        per_class_accuracy,
        overall_accuracy: overall,
        macro_accuracy,
        weighted_f1: f1.weighted,
        macro_f1: f1.macro_mean,
        confusion,
        silhouette,
        evaluated_samples: evaluated as usize,
        config_fingerprint: meta.config_fingerprint.clone(),
        seed: meta.seed,
    })
}

// --- separability -----------------------------------------------------------------

/// Mean silhouette coefficient plus 2-D PCA coordinates of the per-sample
/// latent vectors (the three modality embeddings concatenated). The
/// silhouette uses Euclidean distance; PCA coordinates are exported for
/// external plotting.
pub fn separability(batch: &EmbeddingBatch) -> Result<(f64, Vec<[f64; 2]>), EvalError> {
    let n = batch.len();
    let supervised = batch.supervised_indices();
    if supervised.len() != n || n < 4 {
        return Err(EvalError::DegenerateClasses);
    }
    let labels: Vec<usize> = batch.labels.iter().map(|l| l.class_id().unwrap()).collect();
    let mut classes: Vec<usize> = labels.clone();
    classes.sort_unstable();
    classes.dedup();
    if classes.len() < 2 {
        return Err(EvalError::DegenerateClasses);
    }
    for &c in &classes {
        if labels.iter().filter(|&&l| l == c).count() < 2 {
            return Err(EvalError::DegenerateClasses);
        }
    }

    // concatenated per-sample points
    let dim = 3 * batch.dim;
    let points: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut p = Vec::with_capacity(dim);
            for m in 0..3 {
                p.extend_from_slice(&batch.z[m][i]);
            }
            p
        })
        .collect();

    let silhouette = mean_silhouette(&points, &labels, &classes);
    let coords = pca_2d(&points);
    Ok((silhouette, coords))
}

fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn mean_silhouette(points: &[Vec<f64>], labels: &[usize], classes: &[usize]) -> f64 {
    let n = points.len();
    let mut total = 0.0;
    for i in 0..n {
        let own = labels[i];
        let mut intra_sum = 0.0;
        let mut intra_count = 0usize;
        let mut nearest_other = f64::INFINITY;
        for &c in classes {
            if c == own {
                for j in 0..n {
                    if j != i && labels[j] == own {
                        intra_sum += euclidean(&points[i], &points[j]);
                        intra_count += 1;
                    }
                }
            } else {
                let mut sum = 0.0;
                let mut count = 0usize;
                for j in 0..n {
                    if labels[j] == c {
                        sum += euclidean(&points[i], &points[j]);
                        count += 1;
                    }
                }
                if count > 0 {
                    nearest_other = nearest_other.min(sum / count as f64);
                }
            }
        }
        let a = intra_sum / intra_count as f64;
        let b = nearest_other;
        let denom = a.max(b);
        if denom > 0.0 {
            total += (b - a) / denom;
        }
    }
    total / n as f64
}

/// Projection onto the top-2 principal components. The covariance matrix is
/// diagonalized with cyclic Jacobi rotations; eigenvector signs are fixed so
/// results are deterministic.
fn pca_2d(points: &[Vec<f64>]) -> Vec<[f64; 2]> {
    let n = points.len();
    let d = points[0].len();
    let mut mean = vec![0.0; d];
    for p in points {
        for (m, &v) in mean.iter_mut().zip(p) {
            *m += v / n as f64;
        }
    }
    let centered: Vec<Vec<f64>> = points
        .iter()
        .map(|p| p.iter().zip(&mean).map(|(v, m)| v - m).collect())
        .collect();
    let denom = (n.max(2) - 1) as f64;
    let mut cov = vec![vec![0.0; d]; d];
    for p in &centered {
        for i in 0..d {
            for j in i..d {
                cov[i][j] += p[i] * p[j] / denom;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            cov[i][j] = cov[j][i];
        }
    }
    let (eigvals, eigvecs) = jacobi_eigen(&mut cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eigvals[b].partial_cmp(&eigvals[a]).unwrap().then(a.cmp(&b)));
    let mut axes: Vec<Vec<f64>> = Vec::with_capacity(2);
    for &k in order.iter().take(2) {
        let mut axis: Vec<f64> = (0..d).map(|r| eigvecs[r][k]).collect();
        // deterministic sign: largest-magnitude component positive
        let lead = (0..d)
            .max_by(|&a, &b| axis[a].abs().partial_cmp(&axis[b].abs()).unwrap())
            .unwrap_or(0);
        if axis[lead] < 0.0 {
            for v in &mut axis {
                *v = -*v;
            }
        }
        axes.push(axis);
    }
    centered
        .iter()
        .map(|p| {
            [
                p.iter().zip(&axes[0]).map(|(x, a)| x * a).sum(),
                p.iter().zip(&axes[1]).map(|(x, a)| x * a).sum(),
            ]
        })
        .collect()
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix (in place).
/// Returns (eigenvalues, eigenvectors as columns).
fn jacobi_eigen(a: &mut [Vec<f64>]) -> (Vec<f64>, Vec<Vec<f64>>) {
    let d = a.len();
    let mut v = vec![vec![0.0; d]; d];
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let mut off = 0.0;
        for i in 0..d {
            for j in (i + 1)..d {
                off += a[i][j] * a[i][j];
            }
        }
        if off.sqrt() < 1e-13 {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..d {
                    let akp = a[k][p];
                    let akq = a[k][q];
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p][k];
                    let aqk = a[q][k];
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k][p];
                    let vkq = v[k][q];
                    v[k][p] = c * vkp - s * vkq;
                    v[k][q] = s * vkp + c * vkq;
                }
            }
        }
    }
    let eig: Vec<f64> = (0..d).map(|i| a[i][i]).collect();
    (eig, v)
}
