//! Balanced dual-contrastive learning and prior-guided multimodal fusion on
//! per-modality feature vectors.
//!
//! The crate provides:
//!
//! - the dual contrastive objective with class-balanced denominators and
//!   exact analytic gradients, plus a standard InfoNCE baseline ([`losses`]);
//! - a compact trainable model — per-modality projectors, an attention fusion
//!   block, a classifier head, and a prior embedding/fusion path — with
//!   hand-derived reverse-mode gradients and a bit-exact checkpoint format
//!   ([`model`]);
//! - the reasoning-prior formalism: action-unit support sets, prosody and
//!   keyword lexicons, per-modality scoring, the argmax decision, record
//!   validation/ingestion, and a deterministic stub trace provider
//!   ([`priors`]);
//! - synthetic multimodal data generation with controllable class imbalance
//!   and sampling-profile mechanics ([`datagen`]);
//! - the two-stage training regimen with per-epoch pseudo-labeling and the
//!   stage-2 freeze policy ([`trainer`]);
//! - metrics, latent-space separability analysis, and the experiment CLI
//!   ([`eval`], [`cli`]).

pub mod cli;
pub mod config;
pub mod core;
pub mod datagen;
pub mod eval;
pub mod experiments;
pub mod gradcheck;
pub mod losses;
pub mod model;
pub mod priors;
pub mod trainer;
