//! Independent oracles for the integration and acceptance suites: naive
//! double-loop implementations of the loss formulas, plain counting and
//! argmax oracles, and small statistical helpers. Everything here is written
//! straight from the definitions, without the stable primitives or shared
//! helpers of the library under test.

#![allow(dead_code)]

use bdcl::core::{EmbeddingBatch, LabelState};
use bdcl::losses::AnchorMode;

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Class ids of the supervised samples, in index order.
fn supervised(labels: &[LabelState]) -> Vec<(usize, usize)> {
    labels
        .iter()
        .enumerate()
        .filter_map(|(i, l)| l.class_id().map(|c| (i, c)))
        .collect()
}

/// Naive class-balanced denominator: direct double loop over classes and
/// members, plain exp.
pub fn naive_balanced_denominator(anchor: &[f64], pool: &[(Vec<f64>, usize)], tau: f64) -> f64 {
    let mut classes: Vec<usize> = pool.iter().map(|(_, c)| *c).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut total = 0.0;
    for &c in &classes {
        let members: Vec<&Vec<f64>> = pool
            .iter()
            .filter(|(_, cc)| *cc == c)
            .map(|(z, _)| z)
            .collect();
        let mut class_sum = 0.0;
        for z in &members {
            class_sum += (dot(anchor, z) / tau).exp();
        }
        total += class_sum / members.len() as f64;
    }
    total / classes.len() as f64
}

/// Naive plain-mean denominator.
pub fn naive_plain_denominator(anchor: &[f64], pool: &[(Vec<f64>, usize)], tau: f64) -> f64 {
    let sum: f64 = pool.iter().map(|(z, _)| (dot(anchor, z) / tau).exp()).sum();
    sum / pool.len() as f64
}

fn intra_pool(
    batch: &EmbeddingBatch,
    m: usize,
    anchor: usize,
    mode: AnchorMode,
) -> Vec<(Vec<f64>, usize)> {
    supervised(&batch.labels)
        .into_iter()
        .filter(|&(k, _)| mode == AnchorMode::Include || k != anchor)
        .map(|(k, c)| (batch.z[m][k].clone(), c))
        .collect()
}

fn inter_pool(
    batch: &EmbeddingBatch,
    anchor_m: usize,
    anchor_i: usize,
    mode: AnchorMode,
) -> Vec<(Vec<f64>, usize)> {
    let mut pool = Vec::new();
    for mm in 0..3 {
        for (k, c) in supervised(&batch.labels) {
            if mode == AnchorMode::Exclude && mm == anchor_m && k == anchor_i {
                continue;
            }
            pool.push((batch.z[mm][k].clone(), c));
        }
    }
    pool
}

/// Term-by-term enumeration of the intra-modality loss. `balanced` selects
/// the class-balanced or plain-mean denominator.
pub fn naive_intra(batch: &EmbeddingBatch, tau: f64, mode: AnchorMode, balanced: bool) -> f64 {
    let sup = supervised(&batch.labels);
    let mut total = 0.0;
    let mut anchors = 0usize;
    for m in 0..3 {
        for &(i, ci) in &sup {
            let positives: Vec<usize> = sup
                .iter()
                .filter(|&&(j, cj)| j != i && cj == ci)
                .map(|&(j, _)| j)
                .collect();
            if positives.is_empty() {
                continue;
            }
            anchors += 1;
            let pool = intra_pool(batch, m, i, mode);
            let denom = if balanced {
                naive_balanced_denominator(&batch.z[m][i], &pool, tau)
            } else {
                naive_plain_denominator(&batch.z[m][i], &pool, tau)
            };
            let mut anchor_sum = 0.0;
            for &j in &positives {
                let num = (dot(&batch.z[m][i], &batch.z[m][j]) / tau).exp();
                anchor_sum += -(num / denom).ln();
            }
            total += anchor_sum / positives.len() as f64;
        }
    }
    total / anchors as f64
}

/// Term-by-term enumeration of the inter-modality loss over all six ordered
/// modality pairs.
pub fn naive_inter(batch: &EmbeddingBatch, tau: f64, mode: AnchorMode, balanced: bool) -> f64 {
    let sup = supervised(&batch.labels);
    let mut total = 0.0;
    let mut terms = 0usize;
    for &(i, _) in &sup {
        for m in 0..3 {
            for n in 0..3 {
                if m == n {
                    continue;
                }
                let pool = inter_pool(batch, m, i, mode);
                let denom = if balanced {
                    naive_balanced_denominator(&batch.z[m][i], &pool, tau)
                } else {
                    naive_plain_denominator(&batch.z[m][i], &pool, tau)
                };
                let num = (dot(&batch.z[m][i], &batch.z[n][i]) / tau).exp();
                total += -(num / denom).ln();
                terms += 1;
            }
        }
    }
    total / terms as f64
}

/// Monte-Carlo estimate of E[exp(anchor . z / tau)] under two-step sampling:
/// class uniform, then member uniform within the class. Returns (mean,
/// standard error).
pub fn two_step_monte_carlo(
    anchor: &[f64],
    pool: &[(Vec<f64>, usize)],
    tau: f64,
    draws: usize,
    rng: &mut bdcl::core::rng::SeededRng,
) -> (f64, f64) {
    let mut classes: Vec<usize> = pool.iter().map(|(_, c)| *c).collect();
    classes.sort_unstable();
    classes.dedup();
    let members: Vec<Vec<&Vec<f64>>> = classes
        .iter()
        .map(|&c| {
            pool.iter()
                .filter(|(_, cc)| *cc == c)
                .map(|(z, _)| z)
                .collect()
        })
        .collect();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..draws {
        let class_pos = rng.usize_below(classes.len());
        let member = members[class_pos][rng.usize_below(members[class_pos].len())];
        let value = (dot(anchor, member) / tau).exp();
        sum += value;
        sum_sq += value * value;
    }
    let mean = sum / draws as f64;
    let var = (sum_sq / draws as f64 - mean * mean).max(0.0);
    (mean, (var / draws as f64).sqrt())
}

/// Random unit-norm batch with labels drawn round-robin so every class has a
/// partner.
pub fn random_unit_batch(seed: u64, n: usize, d: usize, c: usize) -> EmbeddingBatch {
    assert!(n >= 2 * c);
    let mut rng = bdcl::core::rng::SeededRng::derive(seed, "oracle-batch");
    let labels: Vec<LabelState> = (0..n).map(|i| LabelState::Labeled(i % c)).collect();
    let z: [Vec<Vec<f64>>; 3] = std::array::from_fn(|_| {
        (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                bdcl::core::l2_normalize(&raw).unwrap()
            })
            .collect()
    });
    EmbeddingBatch::new(z, labels, d).unwrap()
}

/// Weighted F1 computed from prediction pairs rather than a confusion matrix.
pub fn naive_weighted_f1(truths: &[usize], preds: &[usize], class_count: usize) -> f64 {
    let mut weighted = 0.0;
    let mut total_support = 0usize;
    for c in 0..class_count {
        let support = truths.iter().filter(|&&t| t == c).count();
        if support == 0 {
            continue;
        }
        total_support += support;
        let tp = truths
            .iter()
            .zip(preds)
            .filter(|&(&t, &p)| t == c && p == c)
            .count() as f64;
        let predicted = preds.iter().filter(|&&p| p == c).count() as f64;
        let precision = if predicted > 0.0 { tp / predicted } else { 0.0 };
        let recall = tp / support as f64;
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        weighted += support as f64 * f1;
    }
    weighted / total_support as f64
}

/// Flattened parameter bits for bitwise freeze comparisons.
pub fn group_bits(params: &bdcl::model::ModelParams, group: bdcl::model::ParamGroup) -> Vec<u64> {
    params
        .flatten_group(group)
        .iter()
        .map(|v| v.to_bits())
        .collect()
}

/// Independent re-computation of the weighted-argmax decision: scores every
/// class from the raw record content (set intersection, L1 prosody distance,
/// keyword hits), combines with the record weights, and scans for the first
/// maximum.
pub fn naive_decide(
    record: &bdcl::priors::PriorRecord,
    tables: &bdcl::priors::PriorTables,
) -> usize {
    let c = tables.au.supports.len();
    let mut best = 0usize;
    let mut best_score = f64::NEG_INFINITY;
    for class in 0..c {
        let support = &tables.au.supports[class];
        let visual = support.iter().filter(|a| record.au_ids.contains(a)).count() as f64
            / support.len().max(1) as f64;
        let profile = tables.prosody.profiles[class];
        let dist = (record.prosody.pitch as f64 - profile[0] as f64).abs()
            + (record.prosody.energy as f64 - profile[1] as f64).abs()
            + (record.prosody.tempo as f64 - profile[2] as f64).abs();
        let audio = 1.0 - dist / 6.0;
        let hits = record
            .tokens
            .iter()
            .filter(|t| tables.text.keywords[class].contains(t))
            .count() as f64;
        let text = hits / record.tokens.len().max(1) as f64;
        let combined =
            record.weights[0] * visual + record.weights[1] * audio + record.weights[2] * text;
        if combined > best_score {
            best_score = combined;
            best = class;
        }
    }
    best
}
