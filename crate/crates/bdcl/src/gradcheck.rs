//! Finite-difference verification of every analytic gradient in the crate:
//! the contrastive losses w.r.t. their input embeddings, and the full stage-1
//! and stage-2 forward paths w.r.t. the trainable parameters.
//!
//! Central differences use eps = 1e-5 in double precision. The per-case error
//! is the largest elementwise deviation measured in units of the gradient's
//! own infinity norm:
//! `max_i |a_i - n_i| / max(1e-8, max_i max(|a_i|, |n_i|))`.

use serde::Serialize;

use crate::core::rng::SeededRng;
use crate::core::{l2_normalize, EmbeddingBatch, LabelState};
use crate::datagen::{synth_dataset, synth_priors, SynthConfig};
use crate::losses::{bdcl_loss, inter_loss, intra_loss, standard_infonce, LossConfig, LossOutput};
use crate::model::{freeze_for_stage2, ModelDims, ModelParams, ParamGroup};
use crate::priors::provider::RPolicy;
use crate::trainer::{stage1_batch_loss, stage2_batch_loss, Stage2Loss, TrainConfig};

pub const FD_EPSILON: f64 = 1e-5;
pub const GRAD_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckCase {
    pub name: String,
    pub instances: usize,
    pub max_rel_err: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub cases: Vec<GradCheckCase>,
    pub total_instances: usize,
    pub max_rel_err: f64,
    pub tolerance: f64,
    pub passed: bool,
}

/// Central finite differences of `eval` at `flat`.
pub fn finite_difference(flat: &[f64], mut eval: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut work = flat.to_vec();
    let mut grad = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let orig = work[i];
        work[i] = orig + FD_EPSILON;
        let plus = eval(&work);
        work[i] = orig - FD_EPSILON;
        let minus = eval(&work);
        work[i] = orig;
        grad[i] = (plus - minus) / (2.0 * FD_EPSILON);
    }
    grad
}

/// Largest elementwise deviation scaled by the gradient infinity norm.
pub fn max_scaled_deviation(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    let scale = analytic
        .iter()
        .chain(numeric)
        .fold(0.0f64, |acc, &v| acc.max(v.abs()))
        .max(1e-8);
    analytic
        .iter()
        .zip(numeric)
        .fold(0.0f64, |acc, (&a, &n)| acc.max((a - n).abs()))
        / scale
}

/// Random unit-norm embedding batch with >= 2 classes, every class holding a
/// same-label partner, one pseudo-label, and (when room allows) one unlabeled
/// straggler to exercise the exclusion rule.
pub fn random_batch(seed: u64, n: usize, d: usize, c: usize) -> EmbeddingBatch {
    assert!(n >= 4 && c >= 2 && n >= 2 * c);
    let mut rng = SeededRng::derive(seed, "gradcheck-batch");
    let mut labels: Vec<LabelState> = (0..n).map(|i| LabelState::Labeled(i % c)).collect();
    labels[1] = LabelState::PseudoLabeled {
        class: 1 % c,
        confidence: 0.9,
    };
    if n > 2 * c {
        labels[n - 1] = LabelState::Unlabeled;
    }
    let z: [Vec<Vec<f64>>; 3] = std::array::from_fn(|_| {
        (0..n)
            .map(|_| {
                let raw: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                l2_normalize(&raw).unwrap()
            })
            .collect()
    });
    EmbeddingBatch::new(z, labels, d).unwrap()
}

fn flatten_embeddings(batch: &EmbeddingBatch) -> Vec<f64> {
    let mut flat = Vec::with_capacity(3 * batch.len() * batch.dim);
    for m in 0..3 {
        for zi in &batch.z[m] {
            flat.extend_from_slice(zi);
        }
    }
    flat
}

fn batch_with_embeddings(template: &EmbeddingBatch, flat: &[f64]) -> EmbeddingBatch {
    let (n, d) = (template.len(), template.dim);
    let mut it = flat.chunks_exact(d);
    let z: [Vec<Vec<f64>>; 3] =
        std::array::from_fn(|_| (0..n).map(|_| it.next().unwrap().to_vec()).collect());
    EmbeddingBatch::new_unchecked(z, template.labels.clone(), d)
}

fn check_loss_grad(
    batch: &EmbeddingBatch,
    cfg: &LossConfig,
    loss: impl Fn(&EmbeddingBatch, &LossConfig) -> LossOutput,
) -> f64 {
    let out = loss(batch, cfg);
    let analytic = {
        let mut flat = Vec::new();
        for m in 0..3 {
            for gi in &out.grad[m] {
                flat.extend_from_slice(gi);
            }
        }
        flat
    };
    let flat0 = flatten_embeddings(batch);
    let numeric = finite_difference(&flat0, |flat| {
        loss(&batch_with_embeddings(batch, flat), cfg).value
    });
    max_scaled_deviation(&analytic, &numeric)
}

fn path_dataset(seed: u64) -> (crate::core::FeatureDataset, ModelParams, TrainConfig) {
    let synth = SynthConfig {
        class_count: 3,
        counts: vec![3, 3, 2],
        dims: [5, 4, 6],
        sigma: 1.0,
        consistency: [0.9, 0.9, 0.9],
        unlabeled_fraction: 0.0,
        seed,
    };
    let dataset = synth_dataset(&synth).expect("gradcheck dataset");
    let dims = ModelDims::new(6, synth.dims, synth.class_count);
    let params = ModelParams::init(dims, seed.wrapping_add(17));
    let cfg = TrainConfig {
        seed,
        ..TrainConfig::default()
    };
    (dataset, params, cfg)
}

fn check_param_groups(
    params: &ModelParams,
    groups: &[ParamGroup],
    analytic_of: impl Fn(&ModelParams) -> crate::model::ModelGrads,
    value_of: impl Fn(&ModelParams) -> f64,
) -> f64 {
    let grads = analytic_of(params);
    let mut worst = 0.0f64;
    for &group in groups {
        let analytic = grads.flatten_group(group);
        let flat0 = params.flatten_group(group);
        let numeric = finite_difference(&flat0, |flat| {
            let mut p = params.clone();
            p.set_group(group, flat).unwrap();
            value_of(&p)
        });
        worst = worst.max(max_scaled_deviation(&analytic, &numeric));
    }
    worst
}

/// Runs the whole verification suite: loss gradients and both end-to-end
/// training paths, `instances_per_case` seeded instances each.
pub fn run_suite(base_seed: u64, instances_per_case: usize) -> GradCheckReport {
    let mut cases: Vec<GradCheckCase> = Vec::new();
    let cfg = LossConfig::default();

    let loss_cases: [(&str, fn(&EmbeddingBatch, &LossConfig) -> LossOutput); 4] = [
        ("intra_loss", |b, c| intra_loss(b, c).unwrap()),
        ("inter_loss", |b, c| inter_loss(b, c).unwrap()),
        ("bdcl_loss", |b, c| bdcl_loss(b, c).unwrap()),
        ("standard_infonce", |b, c| standard_infonce(b, c).unwrap()),
    ];
    for (name, loss) in loss_cases {
        let mut worst = 0.0f64;
        for k in 0..instances_per_case {
            let seed = base_seed.wrapping_add(1000 + k as u64);
            let mut rng = SeededRng::derive(seed, "gradcheck-shape");
            let c = 2 + rng.usize_below(3); // 2..=4
            let n = (2 * c).max(4 + rng.usize_below(5)).min(8);
            let d = 2 + rng.usize_below(7); // 2..=8
            let batch = random_batch(seed, n, d, c);
            worst = worst.max(check_loss_grad(&batch, &cfg, loss));
        }
        cases.push(GradCheckCase {
            name: name.into(),
            instances: instances_per_case,
            max_rel_err: worst,
        });
    }

    // stage 1: project -> fuse -> classify -> CE, plus contrastive into z
    {
        let mut worst = 0.0f64;
        for k in 0..instances_per_case {
            let seed = base_seed.wrapping_add(2000 + k as u64);
            let (dataset, params, cfg) = path_dataset(seed);
            let labels = dataset.labels();
            let indices: Vec<usize> = (0..dataset.len()).collect();
            worst = worst.max(check_param_groups(
                &params,
                &[
                    ParamGroup::Projectors,
                    ParamGroup::Fusion,
                    ParamGroup::Classifier,
                ],
                |p| {
                    stage1_batch_loss(p, &dataset, &labels, &indices, &cfg)
                        .unwrap()
                        .1
                },
                |p| {
                    stage1_batch_loss(p, &dataset, &labels, &indices, &cfg)
                        .unwrap()
                        .0
                },
            ));
        }
        cases.push(GradCheckCase {
            name: "stage1_path".into(),
            instances: instances_per_case,
            max_rel_err: worst,
        });
    }

    // stage 2 under the freeze policy: prior embed -> prior fuse -> classify
    for (name, stage2_loss) in [
        ("stage2_path", Stage2Loss::CrossEntropy),
        ("stage2_path_with_bdcl", Stage2Loss::CrossEntropyPlusBdcl),
    ] {
        let mut worst = 0.0f64;
        for k in 0..instances_per_case {
            let seed = base_seed.wrapping_add(3000 + k as u64);
            let (dataset, params, mut cfg) = path_dataset(seed);
            cfg.stage2_loss = stage2_loss;
            let params = freeze_for_stage2(params);
            let priors = synth_priors(&dataset, 1.0, RPolicy::Dirichlet, seed).expect("priors");
            let id_to_idx: std::collections::BTreeMap<&str, usize> = dataset
                .samples
                .iter()
                .enumerate()
                .map(|(i, s)| (s.id.as_str(), i))
                .collect();
            let items: Vec<(usize, &crate::priors::PriorRecord)> = priors
                .iter()
                .map(|r| (id_to_idx[r.sample_id.as_str()], r))
                .collect();
            worst = worst.max(check_param_groups(
                &params,
                &[ParamGroup::PriorProjectors, ParamGroup::PriorFusion],
                |p| stage2_batch_loss(p, &dataset, &items, &cfg).unwrap().1,
                |p| stage2_batch_loss(p, &dataset, &items, &cfg).unwrap().0,
            ));
        }
        cases.push(GradCheckCase {
            name: name.into(),
            instances: instances_per_case,
            max_rel_err: worst,
        });
    }

    let max_rel_err = cases.iter().fold(0.0f64, |acc, c| acc.max(c.max_rel_err));
    let total_instances = cases.iter().map(|c| c.instances).sum();
    GradCheckReport {
        cases,
        total_instances,
        max_rel_err,
        tolerance: GRAD_TOLERANCE,
        passed: max_rel_err < GRAD_TOLERANCE,
    }
}
