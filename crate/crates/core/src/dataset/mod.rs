//! Instruction-tuning dataset construction.
//!
//! Selected synthesis outputs become [`TrainingExample`]s: a generated
//! instruction, the secure code as the response and, for vulnerable/secure
//! pairs, the vulnerable counterpart plus byte-span masks derived from their
//! line diff. A packaged dataset is a directory holding `dataset.jsonl`, a
//! tag-wrapped rendering and a manifest.

pub mod instruction;
pub mod masks;
pub mod similarity;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fs;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use instruction::{generate_instruction, InstructionError};
pub use masks::{compute_masks, compute_masks_with, MaskGranularity, Span};
pub use similarity::{
    dedup, diversity, leakage_report, tfidf_cosine, CorpusItem, DedupReport, DiversityReport, LeakageReport, Tfidf,
};

use crate::gateway::cache::sha256_hex;
use crate::gateway::{Gateway, GenParams};
use crate::seeds::{CweId, CwePair, Language};
use crate::synth::derive_seed;
use crate::synth::{Scheme, Selected, SynthRecord};

pub const SCHEMA_VERSION: u32 = 1;
pub const DATASET_FILE: &str = "dataset.jsonl";
pub const TAGGED_FILE: &str = "dataset.tagged.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, thiserror::Error)]
pub enum DatasetError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {message}")]
    Parse { path: PathBuf, line: usize, message: String },
    #[error("no instruction for record(s): {}", .0.join(", "))]
    MissingInstructions(Vec<String>),
    #[error("example {example_id}: {message}")]
    InvalidExample { example_id: String, message: String },
    #[error("duplicate example id {0}")]
    DuplicateId(String),
    #[error("manifest does not match dataset: {0}")]
    ManifestMismatch(String),
    #[error("target size {target} is below the number of CWE-language pairs ({pairs})")]
    TargetTooSmall { target: usize, pairs: usize },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DatasetError + '_ {
    move |source| DatasetError::Io { path: path.to_path_buf(), source }
}

/// One line of `dataset.jsonl`. Field order is the serialized order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainingExample {
    pub example_id: String,
    pub cwe_id: CweId,
    pub language: Language,
    pub instruction: String,
    /// Secure code.
    pub response: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vulnerable_response: Option<String>,
    /// Byte spans of `response` absent from `vulnerable_response`.
    pub sec_mask_spans: Vec<Span>,
    /// Byte spans of `vulnerable_response` absent from `response`.
    pub vul_mask_spans: Vec<Span>,
    pub source_scheme: Scheme,
}

impl TrainingExample {
    pub fn pair(&self) -> CwePair {
        CwePair::new(self.cwe_id.clone(), self.language)
    }

    /// `<instruction>…</instruction><response>…</response>`
    pub fn tagged_text(&self) -> String {
        format!("<instruction>{}</instruction><response>{}</response>", self.instruction, self.response)
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |message: &str| DatasetError::InvalidExample {
            example_id: self.example_id.clone(),
            message: message.to_string(),
        };
        if self.response.is_empty() {
            return Err(bad("empty response"));
        }
        if !masks::spans_well_formed(&self.sec_mask_spans, self.response.len()) {
            return Err(bad("sec_mask_spans out of order or out of bounds"));
        }
        match &self.vulnerable_response {
            None if !self.sec_mask_spans.is_empty() || !self.vul_mask_spans.is_empty() => {
                Err(bad("mask spans without a vulnerable response"))
            }
            Some(v) if !masks::spans_well_formed(&self.vul_mask_spans, v.len()) => {
                Err(bad("vul_mask_spans out of order or out of bounds"))
            }
            _ => Ok(()),
        }
    }
}

/// Turns selected outputs into examples, keyed by the secure record's id.
/// Every secure record needs an instruction.
pub fn build_examples(
    selected: &Selected,
    instructions: &BTreeMap<String, String>,
    granularity: MaskGranularity,
) -> Result<Vec<TrainingExample>, DatasetError> {
    let missing: Vec<String> = secure_records(selected)
        .filter(|(r, _)| !instructions.contains_key(&r.record_id))
        .map(|(r, _)| r.record_id.clone())
        .collect();
    if !missing.is_empty() {
        return Err(DatasetError::MissingInstructions(missing));
    }
    Ok(secure_records(selected)
        .map(|(secure, vulnerable)| {
            let (vulnerable_response, sec_mask_spans, vul_mask_spans) = match vulnerable {
                Some(v) => {
                    let (s, m) = compute_masks_with(&v.code.code, &secure.code.code, granularity);
                    (Some(v.code.code.clone()), s, m)
                }
                None => (None, vec![], vec![]),
            };
            TrainingExample {
                example_id: secure.record_id.clone(),
                cwe_id: secure.pair.cwe_id.clone(),
                language: secure.pair.language,
                instruction: instructions[&secure.record_id].clone(),
                response: secure.code.code.clone(),
                vulnerable_response,
                sec_mask_spans,
                vul_mask_spans,
                source_scheme: secure.scheme,
            }
        })
        .collect())
}

/// `(secure record, vulnerable parent)` in selection order.
fn secure_records(selected: &Selected) -> impl Iterator<Item = (&SynthRecord, Option<&SynthRecord>)> {
    selected.pairs.iter().map(|(v, s)| (s, Some(v))).chain(selected.secure.iter().map(|s| (s, None)))
}

/// Instructions for every selected secure record. Records whose instruction
/// could not be generated are returned separately and left out.
pub fn generate_instructions(
    selected: &Selected,
    gateway: &Gateway,
    params: &GenParams,
) -> (BTreeMap<String, String>, Vec<(String, InstructionError)>) {
    let results: Vec<(String, Result<String, InstructionError>)> = secure_records(selected)
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|(s, v)| {
            let tag = format!("{}/instruction", s.pair);
            let out = generate_instruction(gateway, params, &s.code, v.map(|v| &v.code), &tag);
            (s.record_id.clone(), out)
        })
        .collect();
    let mut ok = BTreeMap::new();
    let mut failed = Vec::new();
    for (id, r) in results {
        match r {
            Ok(text) => {
                ok.insert(id, text);
            }
            Err(e) => {
                log::warn!("record {id}: {e}; excluded");
                failed.push((id, e));
            }
        }
    }
    (ok, failed)
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub total: usize,
    /// Examples carrying a vulnerable counterpart and masks.
    pub with_vulnerable: usize,
    pub by_cwe: BTreeMap<String, usize>,
    pub by_language: BTreeMap<String, usize>,
    pub by_pair: BTreeMap<String, usize>,
}

impl Counts {
    pub fn of(examples: &[TrainingExample]) -> Self {
        let mut c = Counts { total: examples.len(), ..Default::default() };
        for e in examples {
            c.with_vulnerable += usize::from(e.vulnerable_response.is_some());
            *c.by_cwe.entry(e.cwe_id.to_string()).or_default() += 1;
            *c.by_language.entry(e.language.id().to_string()).or_default() += 1;
            *c.by_pair.entry(e.pair().to_string()).or_default() += 1;
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub format_id: String,
    pub counts: Counts,
    /// sha256 of `dataset.jsonl`.
    pub dataset_sha256: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rng_seed: Option<u64>,
    /// Digest of the dataset this one was derived from (downsample, dedup).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub derived_from: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PackagedDataset {
    pub examples: Vec<TrainingExample>,
    pub manifest: Manifest,
}

/// JSONL bytes of `examples`, one compact object per line.
pub fn to_jsonl(examples: &[TrainingExample]) -> String {
    examples.iter().map(|e| serde_json::to_string(e).expect("example serializes") + "\n").collect()
}

fn tagged_jsonl(examples: &[TrainingExample]) -> String {
    #[derive(Serialize)]
    struct Tagged<'a> {
        example_id: &'a str,
        text: String,
    }
    examples
        .iter()
        .map(|e| {
            let t = Tagged { example_id: &e.example_id, text: e.tagged_text() };
            serde_json::to_string(&t).expect("tagged serializes") + "\n"
        })
        .collect()
}

/// Validates examples and computes the manifest.
pub fn package_dataset(
    examples: Vec<TrainingExample>,
    format_id: &str,
    rng_seed: Option<u64>,
) -> Result<PackagedDataset, DatasetError> {
    let mut seen = HashSet::new();
    for e in &examples {
        e.validate()?;
        if !seen.insert(e.example_id.as_str()) {
            return Err(DatasetError::DuplicateId(e.example_id.clone()));
        }
    }
    let manifest = Manifest {
        schema_version: SCHEMA_VERSION,
        format_id: format_id.to_string(),
        counts: Counts::of(&examples),
        dataset_sha256: sha256_hex(to_jsonl(&examples).as_bytes()),
        rng_seed,
        derived_from: None,
    };
    Ok(PackagedDataset { examples, manifest })
}

impl PackagedDataset {
    pub fn derived(mut self, parent: &PackagedDataset) -> Self {
        self.manifest.derived_from = Some(parent.manifest.dataset_sha256.clone());
        self
    }

    /// Writes `dataset.jsonl`, `dataset.tagged.jsonl` and `manifest.json`.
    pub fn write(&self, dir: &Path) -> Result<(), DatasetError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        let write = |name: &str, body: String| {
            let p = dir.join(name);
            fs::write(&p, body).map_err(io_err(&p))
        };
        write(DATASET_FILE, to_jsonl(&self.examples))?;
        write(TAGGED_FILE, tagged_jsonl(&self.examples))?;
        let manifest = serde_json::to_string_pretty(&self.manifest).expect("manifest serializes") + "\n";
        write(MANIFEST_FILE, manifest)
    }
}

/// Reads a JSONL dataset file without a manifest.
pub fn read_examples(path: &Path) -> Result<Vec<TrainingExample>, DatasetError> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    parse_jsonl(path, &text)
}

/// Parses JSONL, skipping blank lines.
pub fn parse_jsonl<T: serde::de::DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>, DatasetError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| DatasetError::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                message: e.to_string(),
            })
        })
        .collect()
}

/// Loads a packaged dataset directory and checks it against its manifest.
pub fn load_dataset(dir: &Path) -> Result<PackagedDataset, DatasetError> {
    let data_path = dir.join(DATASET_FILE);
    let bytes = fs::read_to_string(&data_path).map_err(io_err(&data_path))?;
    let examples: Vec<TrainingExample> = parse_jsonl(&data_path, &bytes)?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let manifest_text = fs::read_to_string(&manifest_path).map_err(io_err(&manifest_path))?;
    let manifest: Manifest = serde_json::from_str(&manifest_text).map_err(|e| DatasetError::Parse {
        path: manifest_path.clone(),
        line: e.line(),
        message: e.to_string(),
    })?;
    let digest = sha256_hex(bytes.as_bytes());
    if digest != manifest.dataset_sha256 {
        return Err(DatasetError::ManifestMismatch(format!("digest {digest} != {}", manifest.dataset_sha256)));
    }
    let repacked = package_dataset(examples, &manifest.format_id, manifest.rng_seed)?;
    if repacked.manifest.counts != manifest.counts {
        return Err(DatasetError::ManifestMismatch("counts differ".into()));
    }
    Ok(PackagedDataset { examples: repacked.examples, manifest })
}

/// Per-pair quotas summing to `target`: one each, then the remainder split in
/// proportion to each pair's remaining capacity by largest remainder (ties to
/// the earlier pair).
pub fn allocate(sizes: &BTreeMap<CwePair, usize>, target: usize) -> Result<BTreeMap<CwePair, usize>, DatasetError> {
    let total: usize = sizes.values().sum();
    let groups = sizes.len();
    if target < groups {
        return Err(DatasetError::TargetTooSmall { target, pairs: groups });
    }
    if target >= total {
        return Ok(sizes.clone());
    }
    let rest = (target - groups) as u128;
    let capacity = (total - groups) as u128;
    let mut quotas: BTreeMap<CwePair, usize> = BTreeMap::new();
    let mut fractions = Vec::new();
    for (i, (pair, &size)) in sizes.iter().enumerate() {
        let share = rest * (size as u128 - 1);
        quotas.insert(pair.clone(), 1 + (share / capacity) as usize);
        fractions.push((share % capacity, i, pair));
    }
    let assigned: usize = quotas.values().sum();
    fractions.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for (_, _, pair) in fractions.into_iter().take(target - assigned) {
        *quotas.get_mut(pair).expect("pair present") += 1;
    }
    Ok(quotas)
}

/// Reduces `examples` to `target` while keeping every CWE-language pair.
/// Within a pair the kept examples are a seeded uniform sample; output keeps
/// the input order.
pub fn downsample(
    examples: &[TrainingExample],
    target: usize,
    rng_seed: u64,
) -> Result<Vec<TrainingExample>, DatasetError> {
    let mut by_pair: BTreeMap<CwePair, Vec<usize>> = BTreeMap::new();
    for (i, e) in examples.iter().enumerate() {
        by_pair.entry(e.pair()).or_default().push(i);
    }
    let sizes = by_pair.iter().map(|(p, v)| (p.clone(), v.len())).collect();
    let quotas = allocate(&sizes, target)?;
    let mut keep = BTreeSet::new();
    for (pair, idx) in &by_pair {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(rng_seed, &pair.to_string()));
        for k in rand::seq::index::sample(&mut rng, idx.len(), quotas[pair]) {
            keep.insert(idx[k]);
        }
    }
    Ok(keep.into_iter().map(|i| examples[i].clone()).collect())
}
