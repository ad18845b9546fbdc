//! Forward evaluation and hand-derived reverse-mode gradients for the two
//! training paths:
//!
//! stage 1: project -> fuse (attention over the three latent tokens) ->
//! classify, plus the contrastive gradients flowing straight into the
//! projected embeddings;
//!
//! stage 2: project (frozen) -> prior embed -> prior fuse (MLP + attention
//! over prior-augmented tokens, contribution-weighted sum) -> classify.
//!
//! Every forward returns a cache consumed by the matching backward; backward
//! calls verify shapes against the cache and fail with `StaleCache` on
//! mismatch. Gradients are accumulated without regard to the freeze flags;
//! [`mask_frozen`] zeroes the frozen groups afterwards.

use crate::core::{dot, l2_norm, ZERO_NORM_THRESHOLD};
use crate::priors::{featurize, PriorError, PriorFeatures, PriorRecord};

use super::attention::{silu, silu_derivative, AttentionCache};
use super::{Linear, ModelError, ModelGrads, ModelParams, ParamGroup};

pub const UNIFORM_WEIGHTS: [f64; 3] = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0];

/// Simplex check for fusion weights.
pub fn validate_weights(weights: &[f64; 3]) -> Result<(), ModelError> {
    if weights.iter().any(|&w| !w.is_finite() || w < 0.0) {
        return Err(ModelError::InvalidWeights(format!(
            "negative or non-finite: {weights:?}"
        )));
    }
    let sum: f64 = weights.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(ModelError::InvalidWeights(format!("weights sum {sum}")));
    }
    Ok(())
}

// --- projection ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ProjectCache {
    pub x: Vec<f64>,
    pub norm: f64,
    pub z: Vec<f64>,
}

/// `z_m = l2_normalize(W_m x + b_m)`.
pub fn project(
    params: &ModelParams,
    modality: usize,
    x: &[f64],
) -> Result<(Vec<f64>, ProjectCache), ModelError> {
    let layer = &params.projectors[modality];
    if x.len() != layer.in_dim {
        return Err(ModelError::DimMismatch {
            expected: layer.in_dim,
            got: x.len(),
        });
    }
    let y = layer.forward(x);
    let norm = l2_norm(&y);
    if norm <= ZERO_NORM_THRESHOLD {
        return Err(ModelError::ZeroVector);
    }
    let z: Vec<f64> = y.iter().map(|v| v / norm).collect();
    Ok((
        z.clone(),
        ProjectCache {
            x: x.to_vec(),
            norm,
            z,
        },
    ))
}

/// Chains d(loss)/dz through the normalization into the projector layer.
pub fn project_backward(
    params: &ModelParams,
    modality: usize,
    cache: &ProjectCache,
    dz: &[f64],
    grads: &mut ModelGrads,
) -> Result<(), ModelError> {
    if dz.len() != cache.z.len() {
        return Err(ModelError::StaleCache);
    }
    // z = y / ||y||  =>  dy = (dz - z (z . dz)) / ||y||
    let zdz = dot(&cache.z, dz);
    let dy: Vec<f64> = dz
        .iter()
        .zip(&cache.z)
        .map(|(&g, &zi)| (g - zi * zdz) / cache.norm)
        .collect();
    params.projectors[modality].backward(&cache.x, &dy, &mut grads.projectors[modality]);
    Ok(())
}

// --- fusion --------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct FuseCache {
    pub attn: AttentionCache,
    pub weights: [f64; 3],
    pub fused: Vec<f64>,
}

/// Attention over the three modality tokens followed by the weighted mean of
/// the per-token outputs. Without explicit weights the mean is uniform.
pub fn fuse(
    params: &ModelParams,
    z: [&[f64]; 3],
    weights: Option<[f64; 3]>,
) -> Result<(Vec<f64>, FuseCache), ModelError> {
    let d = params.dims.latent;
    for zm in z {
        if zm.len() != d {
            return Err(ModelError::DimMismatch {
                expected: d,
                got: zm.len(),
            });
        }
    }
    let weights = weights.unwrap_or(UNIFORM_WEIGHTS);
    validate_weights(&weights)?;
    let tokens: Vec<Vec<f64>> = z.iter().map(|zm| zm.to_vec()).collect();
    let attn = params.fusion.forward(&tokens);
    let mut fused = vec![0.0; d];
    for m in 0..3 {
        for i in 0..d {
            fused[i] += weights[m] * attn.out[m][i];
        }
    }
    Ok((
        fused.clone(),
        FuseCache {
            attn,
            weights,
            fused,
        },
    ))
}

/// Returns d(loss)/dz per modality token.
pub fn fuse_backward(
    params: &ModelParams,
    cache: &FuseCache,
    dfused: &[f64],
    grads: &mut ModelGrads,
) -> Result<[Vec<f64>; 3], ModelError> {
    let d = params.dims.latent;
    if dfused.len() != d || cache.attn.tokens.len() != 3 {
        return Err(ModelError::StaleCache);
    }
    let dout: Vec<Vec<f64>> = (0..3)
        .map(|m| dfused.iter().map(|&g| cache.weights[m] * g).collect())
        .collect();
    let dtokens = params
        .fusion
        .backward(&cache.attn, &dout, &mut grads.fusion);
    Ok([dtokens[0].clone(), dtokens[1].clone(), dtokens[2].clone()])
}

// --- classification ---------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct ClassifyCache {
    pub input: Vec<f64>,
    pub probs: Vec<f64>,
}

/// `softmax(W_c f + b_c)` with a max shift; always sums to one.
pub fn classify(
    params: &ModelParams,
    fused: &[f64],
) -> Result<(Vec<f64>, ClassifyCache), ModelError> {
    if fused.len() != params.classifier.in_dim {
        return Err(ModelError::DimMismatch {
            expected: params.classifier.in_dim,
            got: fused.len(),
        });
    }
    let logits = params.classifier.forward(fused);
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let probs: Vec<f64> = exps.iter().map(|&e| e / sum).collect();
    Ok((
        probs.clone(),
        ClassifyCache {
            input: fused.to_vec(),
            probs,
        },
    ))
}

pub fn cross_entropy(probs: &[f64], target: usize) -> f64 {
    -probs[target].max(1e-300).ln()
}

/// Backward of `coeff * cross_entropy(classify(f), target)`: accumulates the
/// classifier gradients and returns d(loss)/df.
pub fn classify_backward_ce(
    params: &ModelParams,
    cache: &ClassifyCache,
    target: usize,
    coeff: f64,
    grads: &mut ModelGrads,
) -> Result<Vec<f64>, ModelError> {
    let classes = params.dims.classes;
    if cache.probs.len() != classes || target >= classes {
        return Err(ModelError::StaleCache);
    }
    let dlogits: Vec<f64> = cache
        .probs
        .iter()
        .enumerate()
        .map(|(c, &p)| coeff * (p - if c == target { 1.0 } else { 0.0 }))
        .collect();
    Ok(params
        .classifier
        .backward(&cache.input, &dlogits, &mut grads.classifier))
}

// --- prior embedding ------------------------------------------------------------

/// Projected prior evidence per modality plus the contribution weights copied
/// from the record.
#[derive(Debug, Clone)]
pub struct PriorEmbedding {
    pub e: [Vec<f64>; 3],
    pub weights: [f64; 3],
}

#[derive(Debug, Clone)]
pub struct PriorEmbedCache {
    pub features: PriorFeatures,
}

/// `e_m = P_m features_m(record)`, weights passed through unchanged.
pub fn prior_embed(
    params: &ModelParams,
    record: &PriorRecord,
) -> Result<(PriorEmbedding, PriorEmbedCache), ModelError> {
    let features = featurize(record).map_err(ModelError::from)?;
    let mut e: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for m in 0..3 {
        let layer = &params.prior_projectors[m];
        let f = features.by_modality(m);
        if f.len() != layer.in_dim {
            return Err(ModelError::DimMismatch {
                expected: layer.in_dim,
                got: f.len(),
            });
        }
        e[m] = layer.forward(f);
    }
    Ok((
        PriorEmbedding {
            e,
            weights: record.weights,
        },
        PriorEmbedCache { features },
    ))
}

impl From<PriorError> for ModelError {
    fn from(e: PriorError) -> Self {
        ModelError::Prior(e.to_string())
    }
}

// --- prior fusion ------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct PriorFuseCache {
    /// t_m = e_m + z_m
    pub tokens_in: Vec<Vec<f64>>,
    pub pre1: Vec<Vec<f64>>,
    pub act: Vec<Vec<f64>>,
    /// MLP outputs, the attention inputs
    pub u: Vec<Vec<f64>>,
    pub attn: AttentionCache,
    pub weights: [f64; 3],
    /// per-token norms of the attention outputs (contrastive side path)
    pub out_norms: [f64; 3],
}

/// Per modality `F_m = attention(mlp2(silu(mlp1(e_m + z_m))))`, then the
/// contribution-weighted sum `F = sum_m r_m F_m`.
pub fn prior_fuse(
    params: &ModelParams,
    embedding: &PriorEmbedding,
    z: [&[f64]; 3],
) -> Result<(Vec<f64>, PriorFuseCache), ModelError> {
    let d = params.dims.latent;
    validate_weights(&embedding.weights)?;
    for m in 0..3 {
        if z[m].len() != d || embedding.e[m].len() != d {
            return Err(ModelError::DimMismatch {
                expected: d,
                got: z[m].len(),
            });
        }
    }
    let block = &params.prior_fusion;
    let tokens_in: Vec<Vec<f64>> = (0..3)
        .map(|m| {
            embedding.e[m]
                .iter()
                .zip(z[m])
                .map(|(a, b)| a + b)
                .collect()
        })
        .collect();
    let pre1: Vec<Vec<f64>> = tokens_in.iter().map(|t| block.mlp1.forward(t)).collect();
    let act: Vec<Vec<f64>> = pre1
        .iter()
        .map(|p| p.iter().map(|&x| silu(x)).collect())
        .collect();
    let u: Vec<Vec<f64>> = act.iter().map(|a| block.mlp2.forward(a)).collect();
    let attn = block.attn.forward(&u);
    let mut fused = vec![0.0; d];
    for m in 0..3 {
        for i in 0..d {
            fused[i] += embedding.weights[m] * attn.out[m][i];
        }
    }
    let out_norms = [
        l2_norm(&attn.out[0]),
        l2_norm(&attn.out[1]),
        l2_norm(&attn.out[2]),
    ];
    Ok((
        fused,
        PriorFuseCache {
            tokens_in,
            pre1,
            act,
            u,
            attn,
            weights: embedding.weights,
            out_norms,
        },
    ))
}

/// Unit-normalized per-token attention outputs, usable as a per-modality
/// embedding batch for a contrastive objective on the prior-fused features.
pub fn prior_fuse_contrast_tokens(cache: &PriorFuseCache) -> Result<[Vec<f64>; 3], ModelError> {
    let mut out: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for m in 0..3 {
        if cache.out_norms[m] <= ZERO_NORM_THRESHOLD {
            return Err(ModelError::ZeroVector);
        }
        out[m] = cache.attn.out[m]
            .iter()
            .map(|v| v / cache.out_norms[m])
            .collect();
    }
    Ok(out)
}

/// Backward through the prior-fusion path. `dfused` is d(loss)/dF;
/// `dcontrast` optionally carries gradients w.r.t. the normalized per-token
/// outputs from a contrastive side loss. Returns (de, dz) per modality.
pub fn prior_fuse_backward(
    params: &ModelParams,
    cache: &PriorFuseCache,
    dfused: &[f64],
    dcontrast: Option<[&[f64]; 3]>,
    grads: &mut ModelGrads,
) -> Result<([Vec<f64>; 3], [Vec<f64>; 3]), ModelError> {
    let d = params.dims.latent;
    if dfused.len() != d || cache.attn.tokens.len() != 3 {
        return Err(ModelError::StaleCache);
    }
    let block = &params.prior_fusion;
    let mut dout: Vec<Vec<f64>> = (0..3)
        .map(|m| dfused.iter().map(|&g| cache.weights[m] * g).collect())
        .collect();
    if let Some(dc) = dcontrast {
        for m in 0..3 {
            if dc[m].len() != d {
                return Err(ModelError::StaleCache);
            }
            // chain through out_hat = out / ||out||
            let norm = cache.out_norms[m];
            let hat: Vec<f64> = cache.attn.out[m].iter().map(|v| v / norm).collect();
            let hdg = dot(&hat, dc[m]);
            for i in 0..d {
                dout[m][i] += (dc[m][i] - hat[i] * hdg) / norm;
            }
        }
    }
    let du = block
        .attn
        .backward(&cache.attn, &dout, &mut grads.prior_fusion.attn);
    let mut de: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    let mut dz: [Vec<f64>; 3] = [Vec::new(), Vec::new(), Vec::new()];
    for m in 0..3 {
        let dact = block
            .mlp2
            .backward(&cache.act[m], &du[m], &mut grads.prior_fusion.mlp2);
        let dpre1: Vec<f64> = dact
            .iter()
            .zip(&cache.pre1[m])
            .map(|(g, &x)| g * silu_derivative(x))
            .collect();
        let dt = block
            .mlp1
            .backward(&cache.tokens_in[m], &dpre1, &mut grads.prior_fusion.mlp1);
        // t = e + z: gradient splits identically
        de[m] = dt.clone();
        dz[m] = dt;
    }
    Ok((de, dz))
}

/// Accumulates prior-projector gradients from d(loss)/de.
pub fn prior_embed_backward(
    params: &ModelParams,
    cache: &PriorEmbedCache,
    de: &[Vec<f64>; 3],
    grads: &mut ModelGrads,
) -> Result<(), ModelError> {
    for m in 0..3 {
        let layer = &params.prior_projectors[m];
        if de[m].len() != layer.out_dim {
            return Err(ModelError::StaleCache);
        }
        layer.backward(
            cache.features.by_modality(m),
            &de[m],
            &mut grads.prior_projectors[m],
        );
    }
    Ok(())
}

/// Zeroes gradient buffers of frozen parameter groups.
pub fn mask_frozen(params: &ModelParams, grads: &mut ModelGrads) {
    fn zero_linear(l: &mut Linear) {
        l.w.iter_mut().for_each(|v| *v = 0.0);
        l.b.iter_mut().for_each(|v| *v = 0.0);
    }
    for group in ParamGroup::ALL {
        if params.trainable.get(group) {
            continue;
        }
        match group {
            ParamGroup::Projectors => grads.projectors.iter_mut().for_each(zero_linear),
            ParamGroup::Fusion => {
                for l in [
                    &mut grads.fusion.wq,
                    &mut grads.fusion.wk,
                    &mut grads.fusion.wv,
                    &mut grads.fusion.wo,
                    &mut grads.fusion.ff1,
                    &mut grads.fusion.ff2,
                ] {
                    zero_linear(l);
                }
            }
            ParamGroup::Classifier => zero_linear(&mut grads.classifier),
            ParamGroup::PriorProjectors => grads.prior_projectors.iter_mut().for_each(zero_linear),
            ParamGroup::PriorFusion => {
                zero_linear(&mut grads.prior_fusion.mlp1);
                zero_linear(&mut grads.prior_fusion.mlp2);
                for l in [
                    &mut grads.prior_fusion.attn.wq,
                    &mut grads.prior_fusion.attn.wk,
                    &mut grads.prior_fusion.attn.wv,
                    &mut grads.prior_fusion.attn.wo,
                    &mut grads.prior_fusion.attn.ff1,
                    &mut grads.prior_fusion.attn.ff2,
                ] {
                    zero_linear(l);
                }
            }
        }
    }
}
