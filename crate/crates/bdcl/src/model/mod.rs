//! Trainable components: per-modality projectors, the attention fusion block,
//! the classifier head, and the prior embedding/fusion path, together with
//! parameter-group bookkeeping (flatten, freeze, checkpoint).
//!
//! All parameters are plain `f64` buffers; forward passes cache their
//! intermediates and the backward passes are hand-derived reverse mode.

pub mod attention;
pub mod forward;

use std::io::{Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::core::rng::SeededRng;
use attention::AttentionBlock;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"BDCL";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Feature dims produced by the prior featurizer: AU indicator, prosody
/// ordinals, hashed token counts.
pub const PRIOR_FEATURE_DIMS: [usize; 3] = [44, 3, 64];

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("projection collapsed to a zero vector")]
    ZeroVector,
    #[error("invalid fusion weights: {0}")]
    InvalidWeights(String),
    #[error("prior content: {0}")]
    Prior(String),
    #[error("cached forward state does not match backward inputs")]
    StaleCache,
    #[error("gradient shape does not match parameter group")]
    ShapeMismatch,
    #[error("checkpoint io: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// A dense affine map `y = W x + b` stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Linear {
    pub w: Vec<f64>,
    pub b: Vec<f64>,
    pub out_dim: usize,
    pub in_dim: usize,
}

impl Linear {
    pub fn zeros(out_dim: usize, in_dim: usize) -> Self {
        Linear {
            w: vec![0.0; out_dim * in_dim],
            b: vec![0.0; out_dim],
            out_dim,
            in_dim,
        }
    }

    /// Uniform(-1/sqrt(in_dim), 1/sqrt(in_dim)) for weights and bias.
    pub fn init(out_dim: usize, in_dim: usize, rng: &mut SeededRng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut layer = Linear::zeros(out_dim, in_dim);
        for w in &mut layer.w {
            *w = rng.uniform_range(-bound, bound);
        }
        for b in &mut layer.b {
            *b = rng.uniform_range(-bound, bound);
        }
        layer
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.in_dim);
        let mut y = self.b.clone();
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            y[o] += crate::core::dot(row, x);
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns d(loss)/dx.
    pub fn backward(&self, x: &[f64], dy: &[f64], grad: &mut Linear) -> Vec<f64> {
        debug_assert_eq!(dy.len(), self.out_dim);
        let mut dx = vec![0.0; self.in_dim];
        for o in 0..self.out_dim {
            let row = &self.w[o * self.in_dim..(o + 1) * self.in_dim];
            let g = dy[o];
            grad.b[o] += g;
            let grow = &mut grad.w[o * self.in_dim..(o + 1) * self.in_dim];
            for i in 0..self.in_dim {
                grow[i] += g * x[i];
                dx[i] += row[i] * g;
            }
        }
        dx
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        out.extend_from_slice(&self.w);
        out.extend_from_slice(&self.b);
    }

    fn unflatten_from(&mut self, data: &[f64], cursor: &mut usize) {
        let nw = self.w.len();
        self.w.copy_from_slice(&data[*cursor..*cursor + nw]);
        *cursor += nw;
        let nb = self.b.len();
        self.b.copy_from_slice(&data[*cursor..*cursor + nb]);
        *cursor += nb;
    }

    pub fn param_count(&self) -> usize {
        self.w.len() + self.b.len()
    }
}

/// The two-layer map `mlp2(silu(mlp1(x)))` plus the attention block applied
/// to the three prior-augmented tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFusionBlock {
    pub mlp1: Linear,
    pub mlp2: Linear,
    pub attn: AttentionBlock,
}

impl PriorFusionBlock {
    pub fn zeros(d: usize) -> Self {
        PriorFusionBlock {
            mlp1: Linear::zeros(d, d),
            mlp2: Linear::zeros(d, d),
            attn: AttentionBlock::zeros(d),
        }
    }

    pub fn init(d: usize, rng: &mut SeededRng) -> Self {
        PriorFusionBlock {
            mlp1: Linear::init(d, d, rng),
            mlp2: Linear::init(d, d, rng),
            attn: AttentionBlock::init(d, rng),
        }
    }

    fn flatten_into(&self, out: &mut Vec<f64>) {
        self.mlp1.flatten_into(out);
        self.mlp2.flatten_into(out);
        self.attn.flatten_into(out);
    }

    fn unflatten_from(&mut self, data: &[f64], cursor: &mut usize) {
        self.mlp1.unflatten_from(data, cursor);
        self.mlp2.unflatten_from(data, cursor);
        self.attn.unflatten_from(data, cursor);
    }

    pub fn param_count(&self) -> usize {
        self.mlp1.param_count() + self.mlp2.param_count() + self.attn.param_count()
    }
}

/// The five independently freezable parameter groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum ParamGroup {
    Projectors,
    Fusion,
    Classifier,
    PriorProjectors,
    PriorFusion,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 5] = [
        ParamGroup::Projectors,
        ParamGroup::Fusion,
        ParamGroup::Classifier,
        ParamGroup::PriorProjectors,
        ParamGroup::PriorFusion,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Projectors => "projectors",
            ParamGroup::Fusion => "fusion",
            ParamGroup::Classifier => "classifier",
            ParamGroup::PriorProjectors => "prior_projectors",
            ParamGroup::PriorFusion => "prior_fusion",
        }
    }

    pub fn from_name(name: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.iter().copied().find(|g| g.name() == name)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrainableFlags {
    pub projectors: bool,
    pub fusion: bool,
    pub classifier: bool,
    pub prior_projectors: bool,
    pub prior_fusion: bool,
}

impl TrainableFlags {
    pub fn all_trainable() -> Self {
        TrainableFlags {
            projectors: true,
            fusion: true,
            classifier: true,
            prior_projectors: true,
            prior_fusion: true,
        }
    }

    pub fn get(&self, group: ParamGroup) -> bool {
        match group {
            ParamGroup::Projectors => self.projectors,
            ParamGroup::Fusion => self.fusion,
            ParamGroup::Classifier => self.classifier,
            ParamGroup::PriorProjectors => self.prior_projectors,
            ParamGroup::PriorFusion => self.prior_fusion,
        }
    }

    pub fn set(&mut self, group: ParamGroup, trainable: bool) {
        match group {
            ParamGroup::Projectors => self.projectors = trainable,
            ParamGroup::Fusion => self.fusion = trainable,
            ParamGroup::Classifier => self.classifier = trainable,
            ParamGroup::PriorProjectors => self.prior_projectors = trainable,
            ParamGroup::PriorFusion => self.prior_fusion = trainable,
        }
    }

    pub fn trainable_groups(&self) -> Vec<ParamGroup> {
        ParamGroup::ALL
            .iter()
            .copied()
            .filter(|&g| self.get(g))
            .collect()
    }
}

/// Static shape information for a model instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelDims {
    pub latent: usize,
    pub inputs: [usize; 3],
    pub classes: usize,
    pub prior_features: [usize; 3],
}

impl ModelDims {
    pub fn new(latent: usize, inputs: [usize; 3], classes: usize) -> Self {
        ModelDims {
            latent,
            inputs,
            classes,
            prior_features: PRIOR_FEATURE_DIMS,
        }
    }
}

/// Every trainable tensor in the system, grouped for the freeze policy.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    pub projectors: [Linear; 3],
    pub fusion: AttentionBlock,
    pub classifier: Linear,
    pub prior_projectors: [Linear; 3],
    pub prior_fusion: PriorFusionBlock,
    pub trainable: TrainableFlags,
}

impl ModelParams {
    /// Seeded initialization. Tensors are filled in a fixed documented order
    /// (projectors V/A/T, fusion, classifier, prior projectors V/A/T, prior
    /// fusion), each Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)); the attention
    /// output maps additionally get the identity added so the blocks start
    /// near pass-through.
    pub fn init(dims: ModelDims, seed: u64) -> Self {
        let mut rng = SeededRng::derive(seed, "model-init");
        let d = dims.latent;
        let projectors = [
            Linear::init(d, dims.inputs[0], &mut rng),
            Linear::init(d, dims.inputs[1], &mut rng),
            Linear::init(d, dims.inputs[2], &mut rng),
        ];
        let mut fusion = AttentionBlock::init(d, &mut rng);
        fusion.add_identity_to_output();
        let classifier = Linear::init(dims.classes, d, &mut rng);
        let prior_projectors = [
            Linear::init(d, dims.prior_features[0], &mut rng),
            Linear::init(d, dims.prior_features[1], &mut rng),
            Linear::init(d, dims.prior_features[2], &mut rng),
        ];
        let mut prior_fusion = PriorFusionBlock::init(d, &mut rng);
        prior_fusion.attn.add_identity_to_output();
        ModelParams {
            dims,
            projectors,
            fusion,
            classifier,
            prior_projectors,
            prior_fusion,
            trainable: TrainableFlags::all_trainable(),
        }
    }

    /// Zero-valued buffers with the same shapes, used as gradient storage.
    pub fn zeros_like(&self) -> ModelGrads {
        let d = self.dims.latent;
        ModelGrads {
            projectors: [
                Linear::zeros(d, self.dims.inputs[0]),
                Linear::zeros(d, self.dims.inputs[1]),
                Linear::zeros(d, self.dims.inputs[2]),
            ],
            fusion: AttentionBlock::zeros(d),
            classifier: Linear::zeros(self.dims.classes, d),
            prior_projectors: [
                Linear::zeros(d, self.dims.prior_features[0]),
                Linear::zeros(d, self.dims.prior_features[1]),
                Linear::zeros(d, self.dims.prior_features[2]),
            ],
            prior_fusion: PriorFusionBlock::zeros(d),
        }
    }

    pub fn flatten_group(&self, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::new();
        match group {
            ParamGroup::Projectors => {
                for p in &self.projectors {
                    p.flatten_into(&mut out);
                }
            }
            ParamGroup::Fusion => self.fusion.flatten_into(&mut out),
            ParamGroup::Classifier => self.classifier.flatten_into(&mut out),
            ParamGroup::PriorProjectors => {
                for p in &self.prior_projectors {
                    p.flatten_into(&mut out);
                }
            }
            ParamGroup::PriorFusion => self.prior_fusion.flatten_into(&mut out),
        }
        out
    }

    pub fn set_group(&mut self, group: ParamGroup, data: &[f64]) -> Result<(), ModelError> {
        if data.len() != self.group_param_count(group) {
            return Err(ModelError::ShapeMismatch);
        }
        let mut cursor = 0usize;
        match group {
            ParamGroup::Projectors => {
                for p in &mut self.projectors {
                    p.unflatten_from(data, &mut cursor);
                }
            }
            ParamGroup::Fusion => self.fusion.unflatten_from(data, &mut cursor),
            ParamGroup::Classifier => self.classifier.unflatten_from(data, &mut cursor),
            ParamGroup::PriorProjectors => {
                for p in &mut self.prior_projectors {
                    p.unflatten_from(data, &mut cursor);
                }
            }
            ParamGroup::PriorFusion => self.prior_fusion.unflatten_from(data, &mut cursor),
        }
        Ok(())
    }

    pub fn group_param_count(&self, group: ParamGroup) -> usize {
        match group {
            ParamGroup::Projectors => self.projectors.iter().map(Linear::param_count).sum(),
            ParamGroup::Fusion => self.fusion.param_count(),
            ParamGroup::Classifier => self.classifier.param_count(),
            ParamGroup::PriorProjectors => {
                self.prior_projectors.iter().map(Linear::param_count).sum()
            }
            ParamGroup::PriorFusion => self.prior_fusion.param_count(),
        }
    }
}

/// Gradient buffers shaped exactly like the parameter payload.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGrads {
    pub projectors: [Linear; 3],
    pub fusion: AttentionBlock,
    pub classifier: Linear,
    pub prior_projectors: [Linear; 3],
    pub prior_fusion: PriorFusionBlock,
}

impl ModelGrads {
    pub fn flatten_group(&self, group: ParamGroup) -> Vec<f64> {
        let mut out = Vec::new();
        match group {
            ParamGroup::Projectors => {
                for p in &self.projectors {
                    p.flatten_into(&mut out);
                }
            }
            ParamGroup::Fusion => self.fusion.flatten_into(&mut out),
            ParamGroup::Classifier => self.classifier.flatten_into(&mut out),
            ParamGroup::PriorProjectors => {
                for p in &self.prior_projectors {
                    p.flatten_into(&mut out);
                }
            }
            ParamGroup::PriorFusion => self.prior_fusion.flatten_into(&mut out),
        }
        out
    }
}

/// Stage-2 freeze policy: everything trained in stage 1 is frozen, only the
/// prior projectors and the prior-fusion block remain trainable. Idempotent.
pub fn freeze_for_stage2(mut params: ModelParams) -> ModelParams {
    params.trainable = TrainableFlags {
        projectors: false,
        fusion: false,
        classifier: false,
        prior_projectors: true,
        prior_fusion: true,
    };
    params
}

// --- checkpoint format -----------------------------------------------------
//
// magic "BDCL" | u32 version | dims (latent, 3 inputs, classes, 3 prior dims,
// each u32) | u32 group count | per group: u8 name len, name bytes,
// u8 trainable, u64 value count, f64 LE values in flatten order.

fn write_u32(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_u64(w: &mut impl Write, v: u64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

pub fn save_checkpoint(params: &ModelParams, path: &Path) -> Result<(), ModelError> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    w.write_all(CHECKPOINT_MAGIC)?;
    write_u32(&mut w, CHECKPOINT_VERSION)?;
    write_u32(&mut w, params.dims.latent as u32)?;
    for d in params.dims.inputs {
        write_u32(&mut w, d as u32)?;
    }
    write_u32(&mut w, params.dims.classes as u32)?;
    for d in params.dims.prior_features {
        write_u32(&mut w, d as u32)?;
    }
    write_u32(&mut w, ParamGroup::ALL.len() as u32)?;
    for group in ParamGroup::ALL {
        let name = group.name().as_bytes();
        w.write_all(&[name.len() as u8])?;
        w.write_all(name)?;
        w.write_all(&[params.trainable.get(group) as u8])?;
        let values = params.flatten_group(group);
        write_u64(&mut w, values.len() as u64)?;
        for v in values {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelParams, ModelError> {
    let file = std::fs::File::open(path)?;
    let mut r = std::io::BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(ModelError::BadCheckpoint("wrong magic bytes".into()));
    }
    let version = read_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(ModelError::BadCheckpoint(format!(
            "unsupported format version {version}"
        )));
    }
    let latent = read_u32(&mut r)? as usize;
    let mut inputs = [0usize; 3];
    for d in &mut inputs {
        *d = read_u32(&mut r)? as usize;
    }
    let classes = read_u32(&mut r)? as usize;
    let mut prior_features = [0usize; 3];
    for d in &mut prior_features {
        *d = read_u32(&mut r)? as usize;
    }
    if prior_features != PRIOR_FEATURE_DIMS {
        return Err(ModelError::BadCheckpoint(
            "unexpected prior feature dims".into(),
        ));
    }
    let dims = ModelDims {
        latent,
        inputs,
        classes,
        prior_features,
    };
    let mut params = ModelParams::init(dims, 0);
    let group_count = read_u32(&mut r)? as usize;
    if group_count != ParamGroup::ALL.len() {
        return Err(ModelError::BadCheckpoint("unexpected group count".into()));
    }
    for _ in 0..group_count {
        let mut len_buf = [0u8; 1];
        r.read_exact(&mut len_buf)?;
        let mut name = vec![0u8; len_buf[0] as usize];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name)
            .map_err(|_| ModelError::BadCheckpoint("non-utf8 group name".into()))?;
        let group = ParamGroup::from_name(&name)
            .ok_or_else(|| ModelError::BadCheckpoint(format!("unknown group {name}")))?;
        let mut flag = [0u8; 1];
        r.read_exact(&mut flag)?;
        params.trainable.set(group, flag[0] != 0);
        let count = read_u64(&mut r)? as usize;
        if count != params.group_param_count(group) {
            return Err(ModelError::BadCheckpoint(format!(
                "group {name}: expected {} values, file has {count}",
                params.group_param_count(group)
            )));
        }
        let mut values = vec![0.0f64; count];
        for v in &mut values {
            let mut buf = [0u8; 8];
            r.read_exact(&mut buf)?;
            *v = f64::from_le_bytes(buf);
        }
        params.set_group(group, &values)?;
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::attention::{silu, AttentionBlock};
    use super::forward::*;
    use super::*;
    use crate::core::rng::SeededRng;
    use crate::core::{dot, l2_normalize};
    use crate::priors::{PriorRecord, Prosody, PRIOR_SCHEMA_VERSION};

    fn unit(rng: &mut SeededRng, d: usize) -> Vec<f64> {
        l2_normalize(&(0..d).map(|_| rng.normal()).collect::<Vec<_>>()).unwrap()
    }

    fn small_params(seed: u64) -> ModelParams {
        ModelParams::init(ModelDims::new(4, [4, 3, 5], 3), seed)
    }

    fn stub_record(weights: [f64; 3]) -> PriorRecord {
        PriorRecord {
            schema_version: PRIOR_SCHEMA_VERSION,
            sample_id: "s0".into(),
            au_ids: [6u8, 12].into_iter().collect(),
            au_text: "smile".into(),
            prosody: Prosody {
                pitch: 2,
                energy: 1,
                tempo: 1,
            },
            prosody_text: "raised pitch".into(),
            tokens: vec!["happy".into(), "glad".into()],
            text_note: "happy glad".into(),
            weights,
            label: 2,
            provider: "test".into(),
        }
    }

    #[test]
    fn identity_projector_passes_unit_input_through() {
        let mut params = small_params(1);
        let d = params.dims.latent;
        params.projectors[0] = Linear::zeros(d, d);
        for i in 0..d {
            params.projectors[0].w[i * d + i] = 1.0;
        }
        params.dims.inputs[0] = d;
        let x = l2_normalize(&[1.0, 2.0, -1.0, 0.5]).unwrap();
        let (z, _) = project(&params, 0, &x).unwrap();
        for (a, b) in z.iter().zip(&x) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn projection_matches_matrix_multiply_oracle() {
        let params = small_params(2);
        let mut rng = SeededRng::new(3);
        let x: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let (z, _) = project(&params, 0, &x).unwrap();
        // independent oracle: explicit matrix multiply, then normalize
        let layer = &params.projectors[0];
        let mut y = vec![0.0; layer.out_dim];
        for (o, yo) in y.iter_mut().enumerate() {
            *yo = layer.b[o];
            for (i, xi) in x.iter().enumerate() {
                *yo += layer.w[o * layer.in_dim + i] * xi;
            }
        }
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        for (got, want) in z.iter().zip(y.iter().map(|v| v / norm)) {
            assert!((got - want).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_input_dim_is_rejected() {
        let params = small_params(4);
        let err = project(&params, 0, &[1.0, 2.0]).unwrap_err();
        assert!(matches!(
            err,
            ModelError::DimMismatch {
                expected: 4,
                got: 2
            }
        ));
    }

    #[test]
    fn passthrough_fusion_of_identical_tokens_is_permutation_invariant() {
        let mut params = small_params(5);
        params.fusion.make_passthrough();
        let mut rng = SeededRng::new(6);
        let z = unit(&mut rng, 4);
        let r = [0.5, 0.3, 0.2];
        let (f, _) = fuse(&params, [&z, &z, &z], Some(r)).unwrap();
        for perm in [[0usize, 1, 2], [2, 0, 1], [1, 2, 0]] {
            let rp = [r[perm[0]], r[perm[1]], r[perm[2]]];
            let (fp, _) = fuse(&params, [&z, &z, &z], Some(rp)).unwrap();
            for (a, b) in f.iter().zip(&fp) {
                assert!((a - b).abs() < 1e-12);
            }
        }
        // pass-through block on identical tokens returns the token itself
        for (a, b) in f.iter().zip(&z) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_weights_select_the_visual_token_under_passthrough() {
        let mut params = small_params(7);
        params.fusion.make_passthrough();
        let mut rng = SeededRng::new(8);
        let zv = unit(&mut rng, 4);
        let za = unit(&mut rng, 4);
        let zt = unit(&mut rng, 4);
        let (f, _) = fuse(&params, [&zv, &za, &zt], Some([1.0, 0.0, 0.0])).unwrap();
        for (a, b) in f.iter().zip(&zv) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fusion_matches_step_by_step_attention_oracle() {
        let params = small_params(9);
        let d = 4usize;
        let mut rng = SeededRng::new(10);
        let tokens: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, d)).collect();
        let r = [0.2, 0.5, 0.3];
        let (f, _) = fuse(&params, [&tokens[0], &tokens[1], &tokens[2]], Some(r)).unwrap();

        // hand-rolled oracle: q/k/v maps, softmax(QK^T/sqrt(d))V, output map,
        // residual, feed-forward, residual, weighted sum
        let apply = |layer: &Linear, x: &[f64]| -> Vec<f64> {
            (0..layer.out_dim)
                .map(|o| {
                    layer.b[o]
                        + x.iter()
                            .enumerate()
                            .map(|(i, xi)| layer.w[o * layer.in_dim + i] * xi)
                            .sum::<f64>()
                })
                .collect()
        };
        let block = &params.fusion;
        let q: Vec<Vec<f64>> = tokens.iter().map(|t| apply(&block.wq, t)).collect();
        let k: Vec<Vec<f64>> = tokens.iter().map(|t| apply(&block.wk, t)).collect();
        let v: Vec<Vec<f64>> = tokens.iter().map(|t| apply(&block.wv, t)).collect();
        let mut expected = vec![0.0; d];
        for s in 0..3 {
            let scores: Vec<f64> = (0..3)
                .map(|t| dot(&q[s], &k[t]) / (d as f64).sqrt())
                .collect();
            let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = scores.iter().map(|x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let mut ctx = vec![0.0; d];
            for t in 0..3 {
                for i in 0..d {
                    ctx[i] += exps[t] / sum * v[t][i];
                }
            }
            let o = apply(&block.wo, &ctx);
            let h1: Vec<f64> = tokens[s].iter().zip(&o).map(|(a, b)| a + b).collect();
            let hidden: Vec<f64> = apply(&block.ff1, &h1).iter().map(|&x| silu(x)).collect();
            let ff: Vec<f64> = apply(&block.ff2, &hidden);
            for i in 0..d {
                expected[i] += r[s] * (h1[i] + ff[i]);
            }
        }
        for (a, b) in f.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "fusion differs from oracle");
        }
    }

    #[test]
    fn invalid_weights_are_rejected() {
        let params = small_params(11);
        let mut rng = SeededRng::new(12);
        let z = unit(&mut rng, 4);
        let err = fuse(&params, [&z, &z, &z], Some([0.5, 0.6, 0.2])).unwrap_err();
        assert!(matches!(err, ModelError::InvalidWeights(_)));
    }

    #[test]
    fn zero_classifier_gives_uniform_probabilities() {
        let mut params = small_params(13);
        params.classifier = Linear::zeros(3, 4);
        let (probs, _) = classify(&params, &[0.3, -0.2, 0.9, 0.1]).unwrap();
        for p in probs {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn extreme_logits_do_not_overflow() {
        let mut params = small_params(14);
        params.dims.classes = 2;
        params.classifier = Linear::zeros(2, 4);
        params.classifier.b = vec![1000.0, 0.0];
        let (probs, _) = classify(&params, &[0.0; 4]).unwrap();
        assert!(probs[0] > 1.0 - 1e-12 && probs[1] < 1e-12);
        assert!(probs.iter().all(|p| p.is_finite()));
    }

    #[test]
    fn classifier_matches_linear_softmax_oracle() {
        let params = small_params(15);
        let mut rng = SeededRng::new(16);
        let f: Vec<f64> = (0..4).map(|_| rng.normal()).collect();
        let (probs, _) = classify(&params, &f).unwrap();
        let layer = &params.classifier;
        let logits: Vec<f64> = (0..layer.out_dim)
            .map(|o| {
                layer.b[o]
                    + f.iter()
                        .enumerate()
                        .map(|(i, x)| layer.w[o * layer.in_dim + i] * x)
                        .sum::<f64>()
            })
            .collect();
        let denom: f64 = logits.iter().map(|l| l.exp()).sum();
        for (p, l) in probs.iter().zip(&logits) {
            assert!((p - l.exp() / denom).abs() < 1e-12);
        }
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn empty_record_embeds_to_bias_only() {
        let params = small_params(17);
        let record = PriorRecord {
            au_ids: Default::default(),
            prosody: Prosody {
                pitch: 0,
                energy: 0,
                tempo: 0,
            },
            tokens: vec![],
            ..stub_record([0.5, 0.3, 0.2])
        };
        let (embedding, _) = prior_embed(&params, &record).unwrap();
        for m in 0..3 {
            for (e, b) in embedding.e[m].iter().zip(&params.prior_projectors[m].b) {
                assert!((e - b).abs() < 1e-12);
            }
        }
        assert_eq!(embedding.weights, [0.5, 0.3, 0.2]);
    }

    #[test]
    fn prior_embedding_matches_linear_oracle() {
        let params = small_params(18);
        let record = stub_record([0.4, 0.4, 0.2]);
        let (embedding, _) = prior_embed(&params, &record).unwrap();
        let features = crate::priors::featurize(&record).unwrap();
        for m in 0..3 {
            let layer = &params.prior_projectors[m];
            let f = features.by_modality(m);
            for o in 0..layer.out_dim {
                let want = layer.b[o]
                    + f.iter()
                        .enumerate()
                        .map(|(i, x)| layer.w[o * layer.in_dim + i] * x)
                        .sum::<f64>();
                assert!((embedding.e[m][o] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn free_text_changes_leave_the_embedding_bit_identical() {
        let params = small_params(19);
        let a = stub_record([0.4, 0.4, 0.2]);
        let b = PriorRecord {
            au_text: "entirely different rationale".into(),
            prosody_text: "another description".into(),
            text_note: "other note".into(),
            ..a.clone()
        };
        let (ea, _) = prior_embed(&params, &a).unwrap();
        let (eb, _) = prior_embed(&params, &b).unwrap();
        for m in 0..3 {
            assert_eq!(ea.e[m], eb.e[m]);
        }
    }

    #[test]
    fn null_prior_with_passthrough_block_reduces_to_weighted_mlp() {
        let mut params = small_params(20);
        params.prior_fusion.attn.make_passthrough();
        let d = 4;
        let mut rng = SeededRng::new(21);
        let z: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, d)).collect();
        let weights = [0.6, 0.1, 0.3];
        let embedding = PriorEmbedding {
            e: [vec![0.0; d], vec![0.0; d], vec![0.0; d]],
            weights,
        };
        let (f, _) = prior_fuse(&params, &embedding, [&z[0], &z[1], &z[2]]).unwrap();
        let block = &params.prior_fusion;
        let mut expected = vec![0.0; d];
        for m in 0..3 {
            let hidden: Vec<f64> = block.mlp1.forward(&z[m]).iter().map(|&x| silu(x)).collect();
            let u = block.mlp2.forward(&hidden);
            for i in 0..d {
                expected[i] += weights[m] * u[i];
            }
        }
        for (a, b) in f.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_audio_weights_ignore_other_branches_under_passthrough() {
        let mut params = small_params(22);
        params.prior_fusion.attn.make_passthrough();
        let d = 4;
        let mut rng = SeededRng::new(23);
        let za = unit(&mut rng, d);
        let zv1 = unit(&mut rng, d);
        let zt1 = unit(&mut rng, d);
        let zv2 = unit(&mut rng, d);
        let zt2 = unit(&mut rng, d);
        let embedding = PriorEmbedding {
            e: [vec![0.0; d], vec![0.0; d], vec![0.0; d]],
            weights: [0.0, 1.0, 0.0],
        };
        let (f1, _) = prior_fuse(&params, &embedding, [&zv1, &za, &zt1]).unwrap();
        let (f2, _) = prior_fuse(&params, &embedding, [&zv2, &za, &zt2]).unwrap();
        assert_eq!(f1, f2);
    }

    #[test]
    fn prior_fusion_matches_composed_oracle() {
        let params = small_params(24);
        let d = 4;
        let mut rng = SeededRng::new(25);
        let record = stub_record([0.3, 0.3, 0.4]);
        let (embedding, _) = prior_embed(&params, &record).unwrap();
        let z: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, d)).collect();
        let (f, _) = prior_fuse(&params, &embedding, [&z[0], &z[1], &z[2]]).unwrap();
        // oracle: add, MLP, attention block, weighted sum
        let block = &params.prior_fusion;
        let tokens: Vec<Vec<f64>> = (0..3)
            .map(|m| {
                let t: Vec<f64> = embedding.e[m]
                    .iter()
                    .zip(&z[m])
                    .map(|(a, b)| a + b)
                    .collect();
                let hidden: Vec<f64> = block.mlp1.forward(&t).iter().map(|&x| silu(x)).collect();
                block.mlp2.forward(&hidden)
            })
            .collect();
        let cache = block.attn.forward(&tokens);
        let mut expected = vec![0.0; d];
        for m in 0..3 {
            for i in 0..d {
                expected[i] += embedding.weights[m] * cache.out[m][i];
            }
        }
        for (a, b) in f.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn fully_frozen_model_yields_zero_gradients() {
        let mut params = small_params(26);
        for group in ParamGroup::ALL {
            params.trainable.set(group, false);
        }
        let mut grads = params.zeros_like();
        // scribble into the buffers, then mask
        grads.classifier.w.iter_mut().for_each(|g| *g = 1.0);
        grads.fusion.wq.w.iter_mut().for_each(|g| *g = -2.0);
        grads.prior_fusion.mlp1.b.iter_mut().for_each(|g| *g = 0.5);
        mask_frozen(&params, &mut grads);
        for group in ParamGroup::ALL {
            assert!(grads.flatten_group(group).iter().all(|&g| g == 0.0));
        }
    }

    #[test]
    fn freeze_leaves_exactly_the_prior_groups_trainable() {
        let params = freeze_for_stage2(small_params(27));
        let trainable = params.trainable.trainable_groups();
        assert_eq!(
            trainable,
            vec![ParamGroup::PriorProjectors, ParamGroup::PriorFusion]
        );
        // idempotent
        let again = freeze_for_stage2(params.clone());
        assert_eq!(again.trainable, params.trainable);
    }

    #[test]
    fn fuse_is_equivariant_under_joint_token_weight_permutation() {
        let params = small_params(28);
        let mut rng = SeededRng::new(29);
        let z: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, 4)).collect();
        let r = [0.5, 0.2, 0.3];
        let (f, cache) = fuse(&params, [&z[0], &z[1], &z[2]], Some(r)).unwrap();
        let perm = [2usize, 0, 1];
        let rp = [r[perm[0]], r[perm[1]], r[perm[2]]];
        let (fp, cache_p) =
            fuse(&params, [&z[perm[0]], &z[perm[1]], &z[perm[2]]], Some(rp)).unwrap();
        // per-token outputs permute together with the inputs
        for m in 0..3 {
            for i in 0..4 {
                assert!((cache_p.attn.out[m][i] - cache.attn.out[perm[m]][i]).abs() < 1e-12);
            }
        }
        for (a, b) in f.iter().zip(&fp) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("bdcl-ckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("roundtrip.ckpt");
        let mut params = small_params(30);
        params.trainable = freeze_for_stage2(params.clone()).trainable;
        save_checkpoint(&params, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.dims, params.dims);
        assert_eq!(loaded.trainable, params.trainable);
        for group in ParamGroup::ALL {
            let a: Vec<u64> = params
                .flatten_group(group)
                .iter()
                .map(|v| v.to_bits())
                .collect();
            let b: Vec<u64> = loaded
                .flatten_group(group)
                .iter()
                .map(|v| v.to_bits())
                .collect();
            assert_eq!(a, b);
        }
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn checkpoint_rejects_wrong_magic_and_version() {
        let dir = std::env::temp_dir().join(format!("bdcl-badckpt-{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let bad_magic = dir.join("bad_magic.ckpt");
        std::fs::write(&bad_magic, b"NOPE0000").unwrap();
        assert!(matches!(
            load_checkpoint(&bad_magic),
            Err(ModelError::BadCheckpoint(_))
        ));
        let bad_version = dir.join("bad_version.ckpt");
        let mut bytes = Vec::new();
        bytes.extend_from_slice(CHECKPOINT_MAGIC);
        bytes.extend_from_slice(&99u32.to_le_bytes());
        std::fs::write(&bad_version, bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&bad_version),
            Err(ModelError::BadCheckpoint(_))
        ));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn attention_block_backward_matches_finite_differences() {
        let d = 3;
        let mut rng = SeededRng::new(31);
        let block = AttentionBlock::init(d, &mut rng);
        let tokens: Vec<Vec<f64>> = (0..3).map(|_| unit(&mut rng, d)).collect();
        // scalar objective: sum of all outputs weighted by fixed coefficients
        let coeffs: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..d).map(|_| rng.normal()).collect())
            .collect();
        let value = |toks: &[Vec<f64>]| -> f64 {
            let cache = block.forward(toks);
            (0..3).map(|s| dot(&cache.out[s], &coeffs[s])).sum()
        };
        let cache = block.forward(&tokens);
        let mut grad_block = AttentionBlock::zeros(d);
        let dtokens = block.backward(&cache, &coeffs, &mut grad_block);
        let mut flat = Vec::new();
        for t in &tokens {
            flat.extend_from_slice(t);
        }
        let numeric = crate::gradcheck::finite_difference(&flat, |f| {
            let toks: Vec<Vec<f64>> = f.chunks_exact(d).map(|c| c.to_vec()).collect();
            value(&toks)
        });
        let mut analytic = Vec::new();
        for t in &dtokens {
            analytic.extend_from_slice(t);
        }
        let err = crate::gradcheck::max_scaled_deviation(&analytic, &numeric);
        assert!(err < 1e-6, "token gradient mismatch {err:.3e}");
    }
}
