//! Pluggable reasoning-trace providers.
//!
//! The shipped implementation is a deterministic stub that synthesizes a
//! record from a seeded stream at a target fidelity: with probability
//! `fidelity` the record's evidence points at the sample's true label,
//! otherwise at a uniformly drawn wrong label. A network-backed provider can
//! implement the same trait out of tree.

use serde::{Deserialize, Serialize};

use crate::core::rng::SeededRng;

use super::{au_support, PriorError, PriorRecord, PriorTables, Prosody, PRIOR_SCHEMA_VERSION};

/// What a provider gets to see about a sample.
#[derive(Debug, Clone)]
pub struct SampleMeta {
    pub sample_id: String,
    pub true_label: usize,
    pub class_count: usize,
}

/// Free-text instruction template forwarded to the provider. The stub ignores
/// the content; it exists so that real providers share the interface.
#[derive(Debug, Clone, Default)]
pub struct PromptTemplate(pub String);

pub trait TraceProvider {
    fn request(
        &mut self,
        meta: &SampleMeta,
        prompt: &PromptTemplate,
    ) -> Result<PriorRecord, PriorError>;
}

/// How the stub draws contribution weights.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RPolicy {
    #[default]
    Uniform,
    Dirichlet,
    OneHot,
}

#[derive(Debug)]
pub struct StubProvider {
    pub tables: PriorTables,
    pub fidelity: f64,
    pub r_policy: RPolicy,
    rng: SeededRng,
}

impl StubProvider {
    pub fn new(
        tables: PriorTables,
        fidelity: f64,
        r_policy: RPolicy,
        seed: u64,
    ) -> Result<Self, PriorError> {
        if !(0.0..=1.0).contains(&fidelity) {
            return Err(PriorError::InvalidContent(vec![format!(
                "fidelity {fidelity} outside [0, 1]"
            )]));
        }
        Ok(StubProvider {
            tables,
            fidelity,
            r_policy,
            rng: SeededRng::derive(seed, "trace-stub"),
        })
    }

    fn draw_weights(&mut self) -> [f64; 3] {
        match self.r_policy {
            RPolicy::Uniform => [1.0 / 3.0; 3],
            RPolicy::Dirichlet => {
                let w = self.rng.simplex(3);
                [w[0], w[1], w[2]]
            }
            RPolicy::OneHot => {
                let m = self.rng.usize_below(3);
                let mut w = [0.0; 3];
                w[m] = 1.0;
                w
            }
        }
    }

    /// Evidence bundle whose decision is exactly `target`: the target's AU
    /// support set, its canonical prosody profile, and its keyword list.
    fn content_for(&self, target: usize) -> Result<(Prosody, Vec<String>), PriorError> {
        let profile = self
            .tables
            .prosody
            .profiles
            .get(target)
            .ok_or(PriorError::UnknownClass {
                class: target,
                class_count: self.tables.class_count(),
            })?;
        let prosody = Prosody {
            pitch: profile[0],
            energy: profile[1],
            tempo: profile[2],
        };
        let tokens = self.tables.text.keywords[target].clone();
        Ok((prosody, tokens))
    }
}

impl TraceProvider for StubProvider {
    fn request(
        &mut self,
        meta: &SampleMeta,
        _prompt: &PromptTemplate,
    ) -> Result<PriorRecord, PriorError> {
        let class_count = self.tables.class_count();
        if meta.class_count != class_count {
            return Err(PriorError::UnknownClass {
                class: meta.true_label,
                class_count,
            });
        }
        if meta.true_label >= class_count {
            return Err(PriorError::UnknownClass {
                class: meta.true_label,
                class_count,
            });
        }
        let faithful = self.rng.bernoulli(self.fidelity);
        let target = if faithful || class_count == 1 {
            meta.true_label
        } else {
            // uniform over the wrong labels
            let offset = 1 + self.rng.usize_below(class_count - 1);
            (meta.true_label + offset) % class_count
        };
        let weights = self.draw_weights();
        let name = &self.tables.au.names[target];
        let aus = au_support(target, &self.tables.au)?.clone();
        let (prosody, tokens) = self.content_for(target)?;
        Ok(PriorRecord {
            schema_version: PRIOR_SCHEMA_VERSION,
            sample_id: meta.sample_id.clone(),
            au_text: format!("action units consistent with {name}"),
            au_ids: aus,
            prosody,
            prosody_text: format!("prosody profile of {name}"),
            text_note: tokens.join(" "),
            tokens,
            weights,
            label: target,
            provider: format!("stub(fidelity={})", self.fidelity),
        })
    }
}
