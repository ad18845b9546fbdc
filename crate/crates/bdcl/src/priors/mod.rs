//! Reasoning-prior formalism: action-unit support sets, per-modality scoring,
//! the argmax label decision, the prior-record schema with validation and
//! ingestion, and deterministic featurizers that turn a record into the fixed
//! vectors consumed by the prior projectors.

pub mod provider;

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::core::rng::fnv1a64;

/// FACS defines 44 anatomically grounded action units.
pub const AU_COUNT: u8 = 44;

/// Hash buckets for transcript token counts.
pub const TOKEN_BUCKETS: usize = 64;

/// Supported prior-record schema version.
pub const PRIOR_SCHEMA_VERSION: u32 = 1;

/// Largest class count the synthetic tables can serve (disjoint AU triples).
pub const MAX_SYNTHETIC_CLASSES: usize = 14;

#[derive(Debug, Error)]
pub enum PriorError {
    #[error("unknown class {class} (table has {class_count} classes)")]
    UnknownClass { class: usize, class_count: usize },
    #[error("invalid prior content: {}", .0.join("; "))]
    InvalidContent(Vec<String>),
    #[error("record at line {line} invalid: {message}")]
    Record { line: usize, message: String },
    #[error("schema error: {0}")]
    Schema(String),
    #[error("bad table: {0}")]
    BadTable(String),
    #[error("provider unavailable: {0}")]
    ProviderUnavailable(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
}

// --- tables and lexicons ----------------------------------------------------

#[derive(Debug, Deserialize)]
struct AuTableFile {
    schema_version: u32,
    #[allow(dead_code)]
    notes: Option<String>,
    classes: Vec<AuTableEntry>,
}

#[derive(Debug, Deserialize)]
struct AuTableEntry {
    name: String,
    au_ids: Vec<u8>,
}

/// Map from emotion class id to its AU-support set.
#[derive(Debug, Clone, PartialEq)]
pub struct AuSupportTable {
    pub supports: Vec<BTreeSet<u8>>,
    pub names: Vec<String>,
}

impl AuSupportTable {
    /// The table shipped with the crate: prototype AU combinations for the
    /// six-class emotion label set, neutral empty.
    pub fn canonical() -> Self {
        Self::from_json(include_str!("../../assets/au_table.json"))
            .expect("bundled AU table is valid")
    }

    /// Synthetic table for arbitrary class counts: class c gets the disjoint
    /// triple {3c+1, 3c+2, 3c+3}.
    pub fn synthetic(class_count: usize) -> Result<Self, PriorError> {
        if class_count == 0 || class_count > MAX_SYNTHETIC_CLASSES {
            return Err(PriorError::BadTable(format!(
                "synthetic AU table supports 1..={MAX_SYNTHETIC_CLASSES} classes, got {class_count}"
            )));
        }
        let supports = (0..class_count)
            .map(|c| {
                [3 * c + 1, 3 * c + 2, 3 * c + 3]
                    .into_iter()
                    .map(|a| a as u8)
                    .collect()
            })
            .collect();
        let names = (0..class_count).map(|c| format!("class{c}")).collect();
        Ok(AuSupportTable { supports, names })
    }

    pub fn from_json(text: &str) -> Result<Self, PriorError> {
        let file: AuTableFile =
            serde_json::from_str(text).map_err(|e| PriorError::Schema(e.to_string()))?;
        if file.schema_version != 1 {
            return Err(PriorError::Schema(format!(
                "unsupported AU table schema version {}",
                file.schema_version
            )));
        }
        let mut supports = Vec::new();
        let mut names = Vec::new();
        for entry in file.classes {
            let set: BTreeSet<u8> = entry.au_ids.iter().cloned().collect();
            if let Some(&bad) = set.iter().find(|&&a| a == 0 || a > AU_COUNT) {
                return Err(PriorError::BadTable(format!(
                    "class {}: AU id {bad} out of range 1..={AU_COUNT}",
                    entry.name
                )));
            }
            supports.push(set);
            names.push(entry.name);
        }
        if supports.is_empty() {
            return Err(PriorError::BadTable("table has no classes".into()));
        }
        Ok(AuSupportTable { supports, names })
    }

    pub fn from_path(path: &Path) -> Result<Self, PriorError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn class_count(&self) -> usize {
        self.supports.len()
    }
}

/// The AU-support set of one class.
pub fn au_support(class: usize, table: &AuSupportTable) -> Result<&BTreeSet<u8>, PriorError> {
    table.supports.get(class).ok_or(PriorError::UnknownClass {
        class,
        class_count: table.class_count(),
    })
}

#[derive(Debug, Deserialize)]
struct ProsodyLexiconFile {
    schema_version: u32,
    #[allow(dead_code)]
    notes: Option<String>,
    classes: Vec<ProsodyEntry>,
}

#[derive(Debug, Deserialize)]
struct ProsodyEntry {
    name: String,
    pitch: u8,
    energy: u8,
    tempo: u8,
}

/// Canonical (pitch, energy, tempo) profile per class, each on a 0-2 scale.
#[derive(Debug, Clone, PartialEq)]
pub struct ProsodyLexicon {
    pub profiles: Vec<[u8; 3]>,
    pub names: Vec<String>,
}

impl ProsodyLexicon {
    pub fn canonical() -> Self {
        Self::from_json(include_str!("../../assets/prosody_lexicon.json"))
            .expect("bundled prosody lexicon is valid")
    }

    /// Distinct synthetic profiles: class c maps to the c-th (pitch, energy,
    /// tempo) triple in lexicographic order.
    pub fn synthetic(class_count: usize) -> Result<Self, PriorError> {
        if class_count == 0 || class_count > 27 {
            return Err(PriorError::BadTable(format!(
                "synthetic prosody lexicon supports 1..=27 classes, got {class_count}"
            )));
        }
        let profiles = (0..class_count)
            .map(|c| [(c / 9) as u8, ((c / 3) % 3) as u8, (c % 3) as u8])
            .collect();
        let names = (0..class_count).map(|c| format!("class{c}")).collect();
        Ok(ProsodyLexicon { profiles, names })
    }

    pub fn from_json(text: &str) -> Result<Self, PriorError> {
        let file: ProsodyLexiconFile =
            serde_json::from_str(text).map_err(|e| PriorError::Schema(e.to_string()))?;
        if file.schema_version != 1 {
            return Err(PriorError::Schema(format!(
                "unsupported prosody lexicon schema version {}",
                file.schema_version
            )));
        }
        let mut profiles = Vec::new();
        let mut names = Vec::new();
        for entry in file.classes {
            for v in [entry.pitch, entry.energy, entry.tempo] {
                if v > 2 {
                    return Err(PriorError::BadTable(format!(
                        "class {}: ordinal {v} out of range 0..=2",
                        entry.name
                    )));
                }
            }
            profiles.push([entry.pitch, entry.energy, entry.tempo]);
            names.push(entry.name);
        }
        Ok(ProsodyLexicon { profiles, names })
    }

    pub fn from_path(path: &Path) -> Result<Self, PriorError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Deserialize)]
struct TextLexiconFile {
    schema_version: u32,
    #[allow(dead_code)]
    notes: Option<String>,
    classes: Vec<TextEntry>,
}

#[derive(Debug, Deserialize)]
struct TextEntry {
    name: String,
    keywords: Vec<String>,
}

/// Keyword list per class for transcript scoring.
#[derive(Debug, Clone, PartialEq)]
pub struct TextLexicon {
    pub keywords: Vec<Vec<String>>,
    pub names: Vec<String>,
}

impl TextLexicon {
    pub fn canonical() -> Self {
        Self::from_json(include_str!("../../assets/text_lexicon.json"))
            .expect("bundled text lexicon is valid")
    }

    pub fn synthetic(class_count: usize) -> Result<Self, PriorError> {
        if class_count == 0 {
            return Err(PriorError::BadTable("class count must be positive".into()));
        }
        let keywords = (0..class_count)
            .map(|c| (0..3).map(|j| format!("cue{c}x{j}")).collect())
            .collect();
        let names = (0..class_count).map(|c| format!("class{c}")).collect();
        Ok(TextLexicon { keywords, names })
    }

    pub fn from_json(text: &str) -> Result<Self, PriorError> {
        let file: TextLexiconFile =
            serde_json::from_str(text).map_err(|e| PriorError::Schema(e.to_string()))?;
        if file.schema_version != 1 {
            return Err(PriorError::Schema(format!(
                "unsupported text lexicon schema version {}",
                file.schema_version
            )));
        }
        let keywords = file.classes.iter().map(|e| e.keywords.clone()).collect();
        let names = file.classes.into_iter().map(|e| e.name).collect();
        Ok(TextLexicon { keywords, names })
    }

    pub fn from_path(path: &Path) -> Result<Self, PriorError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// The AU table plus both lexicons, all sharing one class indexing.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorTables {
    pub au: AuSupportTable,
    pub prosody: ProsodyLexicon,
    pub text: TextLexicon,
}

impl PriorTables {
    pub fn canonical() -> Self {
        PriorTables {
            au: AuSupportTable::canonical(),
            prosody: ProsodyLexicon::canonical(),
            text: TextLexicon::canonical(),
        }
    }

    /// Canonical tables when the class count matches the shipped six-class
    /// set, synthetic tables otherwise.
    pub fn for_class_count(class_count: usize) -> Result<Self, PriorError> {
        let canonical = Self::canonical();
        if class_count == canonical.class_count() {
            return Ok(canonical);
        }
        Ok(PriorTables {
            au: AuSupportTable::synthetic(class_count)?,
            prosody: ProsodyLexicon::synthetic(class_count)?,
            text: TextLexicon::synthetic(class_count)?,
        })
    }

    pub fn class_count(&self) -> usize {
        self.au.class_count()
    }

    fn validate_consistent(&self) -> Result<(), PriorError> {
        let c = self.au.class_count();
        if self.prosody.profiles.len() != c || self.text.keywords.len() != c {
            return Err(PriorError::BadTable(
                "AU table and lexicons disagree on class count".into(),
            ));
        }
        Ok(())
    }
}

// --- prior records -----------------------------------------------------------

/// Prosody descriptor: pitch, energy, and tempo levels on a 0-2 ordinal scale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Prosody {
    pub pitch: u8,
    pub energy: u8,
    pub tempo: u8,
}

/// One reasoning trace: per-modality evidence, contribution weights, and the
/// decided label.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorRecord {
    pub schema_version: u32,
    pub sample_id: String,
    pub au_ids: BTreeSet<u8>,
    pub au_text: String,
    pub prosody: Prosody,
    pub prosody_text: String,
    pub tokens: Vec<String>,
    pub text_note: String,
    pub weights: [f64; 3],
    pub label: usize,
    pub provider: String,
}

/// Checks every record invariant without mutating. Returns the full list of
/// violations (empty means valid).
pub fn validate(record: &PriorRecord, class_count: usize) -> Vec<String> {
    let mut violations = Vec::new();
    if record.schema_version != PRIOR_SCHEMA_VERSION {
        violations.push(format!(
            "unsupported schema version {}",
            record.schema_version
        ));
    }
    for &au in &record.au_ids {
        if au == 0 || au > AU_COUNT {
            violations.push(format!("AU out of range: {au}"));
        }
    }
    for v in [
        record.prosody.pitch,
        record.prosody.energy,
        record.prosody.tempo,
    ] {
        if v > 2 {
            violations.push(format!("prosody ordinal {v} out of range 0..=2"));
        }
    }
    let sum: f64 = record.weights.iter().sum();
    if record.weights.iter().any(|&w| w < 0.0) {
        violations.push("negative contribution weight".into());
    }
    if (sum - 1.0).abs() > 1e-9 {
        violations.push(format!("weights sum {sum}"));
    }
    if record.label >= class_count {
        violations.push(format!(
            "label {} out of range for {class_count} classes",
            record.label
        ));
    }
    if record.sample_id.is_empty() {
        violations.push("empty sample id".into());
    }
    violations
}

fn validated(record: &PriorRecord, class_count: usize) -> Result<(), PriorError> {
    let violations = validate(record, class_count);
    if violations.is_empty() {
        Ok(())
    } else {
        Err(PriorError::InvalidContent(violations))
    }
}

// --- scoring and decision ----------------------------------------------------

/// Evidence carried by a single modality of a record.
#[derive(Debug, Clone, Copy)]
pub enum ModalityContent<'a> {
    Visual(&'a BTreeSet<u8>),
    Audio(&'a Prosody),
    Text(&'a [String]),
}

/// Per-class evidence score for one modality. Outputs are non-negative and
/// not necessarily normalized.
///
/// Visual: |I_V intersect S_c| / max(1, |S_c|). Audio: 1 - L1 distance to the
/// class profile / 6. Text: keyword hits normalized by token count.
pub fn score_modality(
    content: ModalityContent<'_>,
    tables: &PriorTables,
) -> Result<Vec<f64>, PriorError> {
    tables.validate_consistent()?;
    let c = tables.class_count();
    match content {
        ModalityContent::Visual(aus) => {
            if let Some(&bad) = aus.iter().find(|&&a| a == 0 || a > AU_COUNT) {
                return Err(PriorError::InvalidContent(vec![format!(
                    "AU out of range: {bad}"
                )]));
            }
            Ok((0..c)
                .map(|class| {
                    let support = &tables.au.supports[class];
                    let overlap = aus.intersection(support).count() as f64;
                    overlap / support.len().max(1) as f64
                })
                .collect())
        }
        ModalityContent::Audio(p) => {
            if p.pitch > 2 || p.energy > 2 || p.tempo > 2 {
                return Err(PriorError::InvalidContent(vec![
                    "prosody ordinal out of range".into(),
                ]));
            }
            Ok((0..c)
                .map(|class| {
                    let profile = tables.prosody.profiles[class];
                    let dist = (p.pitch as f64 - profile[0] as f64).abs()
                        + (p.energy as f64 - profile[1] as f64).abs()
                        + (p.tempo as f64 - profile[2] as f64).abs();
                    1.0 - dist / 6.0
                })
                .collect())
        }
        ModalityContent::Text(tokens) => {
            let total = tokens.len().max(1) as f64;
            Ok((0..c)
                .map(|class| {
                    let list = &tables.text.keywords[class];
                    let hits = tokens.iter().filter(|t| list.contains(t)).count() as f64;
                    hits / total
                })
                .collect())
        }
    }
}

/// All three modality score vectors of a record, in canonical order.
pub fn modality_scores(
    record: &PriorRecord,
    tables: &PriorTables,
) -> Result<[Vec<f64>; 3], PriorError> {
    Ok([
        score_modality(ModalityContent::Visual(&record.au_ids), tables)?,
        score_modality(ModalityContent::Audio(&record.prosody), tables)?,
        score_modality(ModalityContent::Text(&record.tokens), tables)?,
    ])
}

/// How per-modality scores combine before the argmax.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    #[default]
    WeightedSum,
    MaxOverModalities,
}

/// The label decision: argmax over aggregated modality scores, ties broken by
/// the lowest class id.
pub fn decide(
    record: &PriorRecord,
    tables: &PriorTables,
    aggregation: Aggregation,
) -> Result<usize, PriorError> {
    validated(record, tables.class_count())?;
    let scores = modality_scores(record, tables)?;
    let combined: Vec<f64> = (0..tables.class_count())
        .map(|c| match aggregation {
            Aggregation::WeightedSum => (0..3).map(|m| record.weights[m] * scores[m][c]).sum(),
            Aggregation::MaxOverModalities => (0..3)
                .map(|m| scores[m][c])
                .fold(f64::NEG_INFINITY, f64::max),
        })
        .collect();
    let mut best = 0usize;
    for (c, &s) in combined.iter().enumerate() {
        if s > combined[best] {
            best = c;
        }
    }
    Ok(best)
}

// --- featurization -------------------------------------------------------------

/// Deterministic fixed-length features of a record: a 44-dim AU indicator, a
/// 3-dim scaled prosody vector, and hashed token counts over
/// [`TOKEN_BUCKETS`] buckets (FNV-1a 64 of the token bytes, modulo bucket
/// count). Order-independent in the token list.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorFeatures {
    pub visual: Vec<f64>,
    pub audio: Vec<f64>,
    pub text: Vec<f64>,
}

impl PriorFeatures {
    pub fn by_modality(&self, m: usize) -> &[f64] {
        match m {
            0 => &self.visual,
            1 => &self.audio,
            _ => &self.text,
        }
    }
}

pub fn featurize(record: &PriorRecord) -> Result<PriorFeatures, PriorError> {
    for &au in &record.au_ids {
        if au == 0 || au > AU_COUNT {
            return Err(PriorError::InvalidContent(vec![format!(
                "AU out of range: {au}"
            )]));
        }
    }
    if record.prosody.pitch > 2 || record.prosody.energy > 2 || record.prosody.tempo > 2 {
        return Err(PriorError::InvalidContent(vec![
            "prosody ordinal out of range".into(),
        ]));
    }
    let mut visual = vec![0.0; AU_COUNT as usize];
    for &au in &record.au_ids {
        visual[au as usize - 1] = 1.0;
    }
    let audio = vec![
        record.prosody.pitch as f64 / 2.0,
        record.prosody.energy as f64 / 2.0,
        record.prosody.tempo as f64 / 2.0,
    ];
    let mut text = vec![0.0; TOKEN_BUCKETS];
    for token in &record.tokens {
        text[(fnv1a64(token.as_bytes()) % TOKEN_BUCKETS as u64) as usize] += 1.0;
    }
    Ok(PriorFeatures {
        visual,
        audio,
        text,
    })
}

// --- ingestion -------------------------------------------------------------------

/// Result of reading a prior dataset file: validated records plus one report
/// per skipped line (lenient mode only).
#[derive(Debug, Clone)]
pub struct IngestOutcome {
    pub records: Vec<PriorRecord>,
    pub skipped: Vec<(usize, String)>,
}

/// Reads line-delimited prior records. Invalid records are fatal when
/// `strict` is set, otherwise reported with their 1-based line number and
/// skipped. An unsupported schema version is always fatal.
pub fn ingest(path: &Path, class_count: usize, strict: bool) -> Result<IngestOutcome, PriorError> {
    let text = std::fs::read_to_string(path)?;
    ingest_str(&text, class_count, strict)
}

pub fn ingest_str(
    text: &str,
    class_count: usize,
    strict: bool,
) -> Result<IngestOutcome, PriorError> {
    let mut records = Vec::new();
    let mut skipped = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line_no = idx + 1;
        if line.trim().is_empty() {
            continue;
        }
        let parsed: Result<PriorRecord, _> = serde_json::from_str(line);
        match parsed {
            Ok(record) => {
                if record.schema_version != PRIOR_SCHEMA_VERSION {
                    return Err(PriorError::Schema(format!(
                        "line {line_no}: unsupported schema version {}",
                        record.schema_version
                    )));
                }
                let violations = validate(&record, class_count);
                if violations.is_empty() {
                    records.push(record);
                } else if strict {
                    return Err(PriorError::Record {
                        line: line_no,
                        message: violations.join("; "),
                    });
                } else {
                    skipped.push((line_no, violations.join("; ")));
                }
            }
            Err(e) => {
                if strict {
                    return Err(PriorError::Record {
                        line: line_no,
                        message: e.to_string(),
                    });
                }
                skipped.push((line_no, e.to_string()));
            }
        }
    }
    Ok(IngestOutcome { records, skipped })
}

/// Writes records as line-delimited JSON in input order.
pub fn save_priors(records: &[PriorRecord], path: &Path) -> Result<(), PriorError> {
    let mut out = String::new();
    for record in records {
        out.push_str(
            &serde_json::to_string(record).map_err(|e| PriorError::Schema(e.to_string()))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out)?;
    Ok(())
}
