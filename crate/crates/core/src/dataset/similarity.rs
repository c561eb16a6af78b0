//! TF-IDF cosine similarity and the analyses built on it: leakage against a
//! reference corpus, within-CWE diversity and benchmark dedup.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::TrainingExample;
use crate::seeds::CweId;

pub const DEFAULT_DEDUP_THRESHOLD: f64 = 0.9;

/// Lowercased maximal runs of alphanumeric characters.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric()).filter(|t| !t.is_empty()).map(str::to_lowercase).collect()
}

/// Sparse weighted vector: `(term id, weight)` sorted by term id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TfidfVector {
    weights: Vec<(u32, f64)>,
    norm: f64,
}

impl TfidfVector {
    pub fn is_zero(&self) -> bool {
        self.norm == 0.0
    }

    pub fn cosine(&self, other: &TfidfVector) -> f64 {
        if self.is_zero() || other.is_zero() {
            return 0.0;
        }
        let (a, b) = (&self.weights, &other.weights);
        let (mut i, mut j, mut dot) = (0, 0, 0.0);
        while i < a.len() && j < b.len() {
            match a[i].0.cmp(&b[j].0) {
                std::cmp::Ordering::Less => i += 1,
                std::cmp::Ordering::Greater => j += 1,
                std::cmp::Ordering::Equal => {
                    dot += a[i].1 * b[j].1;
                    i += 1;
                    j += 1;
                }
            }
        }
        (dot / (self.norm * other.norm)).clamp(0.0, 1.0)
    }
}

/// IDF table fit on a corpus: `ln((1 + N) / (1 + df)) + 1`. Terms outside the
/// corpus vocabulary get no weight.
#[derive(Debug, Clone, PartialEq)]
pub struct Tfidf {
    /// term -> (id, idf)
    vocab: HashMap<String, (u32, f64)>,
    n_docs: usize,
}

impl Tfidf {
    pub fn fit<S: AsRef<str>>(corpus: &[S]) -> Self {
        let mut df: BTreeMap<String, usize> = BTreeMap::new();
        for doc in corpus {
            let mut terms = tokenize(doc.as_ref());
            terms.sort_unstable();
            terms.dedup();
            for t in terms {
                *df.entry(t).or_default() += 1;
            }
        }
        let n = corpus.len() as f64;
        let vocab = df
            .into_iter()
            .enumerate()
            .map(|(id, (t, d))| (t, (id as u32, ((1.0 + n) / (1.0 + d as f64)).ln() + 1.0)))
            .collect();
        Self { vocab, n_docs: corpus.len() }
    }

    pub fn n_docs(&self) -> usize {
        self.n_docs
    }

    pub fn idf(&self, term: &str) -> Option<f64> {
        self.vocab.get(term).map(|v| v.1)
    }

    pub fn vector(&self, doc: &str) -> TfidfVector {
        let mut tf: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
        for t in tokenize(doc) {
            if let Some(&(id, idf)) = self.vocab.get(&t) {
                tf.entry(id).or_insert((0.0, idf)).0 += 1.0;
            }
        }
        let weights: Vec<(u32, f64)> = tf.into_iter().map(|(id, (c, idf))| (id, c * idf)).collect();
        let norm = weights.iter().map(|(_, w)| w * w).sum::<f64>().sqrt();
        TfidfVector { weights, norm }
    }

    pub fn cosine(&self, a: &str, b: &str) -> f64 {
        self.vector(a).cosine(&self.vector(b))
    }
}

/// Cosine similarity of `a` and `b` under IDF weights fit on `corpus`.
pub fn tfidf_cosine<S: AsRef<str>>(a: &str, b: &str, corpus: &[S]) -> f64 {
    Tfidf::fit(corpus).cosine(a, b)
}

/// One item of a reference or benchmark corpus (JSONL).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusItem {
    pub id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cwe_id: Option<CweId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub language: Option<crate::seeds::Language>,
    pub code: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageEntry {
    pub example_id: String,
    pub cwe_id: CweId,
    /// `None` when the reference corpus has nothing for this CWE.
    pub max_similarity: Option<f64>,
    pub best_reference: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub entries: Vec<LeakageEntry>,
    /// Mean over examples with at least one same-CWE reference.
    pub mean: Option<f64>,
    pub no_reference: usize,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Highest same-CWE similarity of each example's response to the reference
/// corpus. IDF is fit on the responses and the references together.
pub fn leakage_report(examples: &[TrainingExample], references: &[CorpusItem]) -> LeakageReport {
    let corpus: Vec<&str> =
        examples.iter().map(|e| e.response.as_str()).chain(references.iter().map(|r| r.code.as_str())).collect();
    let model = Tfidf::fit(&corpus);
    let mut groups: BTreeMap<&CweId, Vec<(&str, TfidfVector)>> = BTreeMap::new();
    for r in references {
        if let Some(cwe) = &r.cwe_id {
            groups.entry(cwe).or_default().push((r.id.as_str(), model.vector(&r.code)));
        }
    }
    let entries: Vec<LeakageEntry> = examples
        .par_iter()
        .map(|e| {
            let v = model.vector(&e.response);
            let best = groups.get(&e.cwe_id).and_then(|refs| {
                refs.iter().map(|(id, rv)| (*id, v.cosine(rv))).fold(
                    None,
                    |acc: Option<(&str, f64)>, (id, s)| match acc {
                        Some((_, b)) if b >= s => acc,
                        _ => Some((id, s)),
                    },
                )
            });
            LeakageEntry {
                example_id: e.example_id.clone(),
                cwe_id: e.cwe_id.clone(),
                max_similarity: best.map(|b| b.1),
                best_reference: best.map(|b| b.0.to_string()),
            }
        })
        .collect();
    let no_reference = entries.iter().filter(|e| e.max_similarity.is_none()).count();
    LeakageReport { mean: mean(entries.iter().filter_map(|e| e.max_similarity)), entries, no_reference }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiversityReport {
    /// Mean pairwise similarity within each CWE (CWEs with one example omitted).
    pub per_cwe: BTreeMap<CweId, f64>,
    /// Mean over all within-CWE pairs.
    pub mean: Option<f64>,
    pub pairs_compared: usize,
}

/// Mean pairwise response similarity within each CWE; lower is more diverse.
pub fn diversity(examples: &[TrainingExample]) -> DiversityReport {
    let corpus: Vec<&str> = examples.iter().map(|e| e.response.as_str()).collect();
    let model = Tfidf::fit(&corpus);
    let mut groups: BTreeMap<&CweId, Vec<TfidfVector>> = BTreeMap::new();
    for e in examples {
        groups.entry(&e.cwe_id).or_default().push(model.vector(&e.response));
    }
    let sums: Vec<(CweId, f64, usize)> = groups
        .par_iter()
        .filter(|(_, vs)| vs.len() > 1)
        .map(|(cwe, vs)| {
            let mut sum = 0.0;
            let mut n = 0;
            for i in 0..vs.len() {
                for j in i + 1..vs.len() {
                    sum += vs[i].cosine(&vs[j]);
                    n += 1;
                }
            }
            ((*cwe).clone(), sum, n)
        })
        .collect();
    let pairs_compared = sums.iter().map(|s| s.2).sum();
    let total: f64 = sums.iter().map(|s| s.1).sum();
    DiversityReport {
        per_cwe: sums.into_iter().map(|(c, s, n)| (c, s / n as f64)).collect(),
        mean: (pairs_compared > 0).then(|| total / pairs_compared as f64),
        pairs_compared,
    }
}

/// Collapses whitespace runs to one space and trims.
pub fn normalize_whitespace(text: &str) -> String {
    text.split_whitespace().collect::<Vec<_>>().join(" ")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchKind {
    Exact,
    Similar,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Removal {
    pub example_id: String,
    pub benchmark_id: String,
    pub kind: MatchKind,
    pub similarity: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DedupReport {
    pub threshold: f64,
    pub examined: usize,
    pub removed: Vec<Removal>,
}

#[derive(Debug, thiserror::Error, PartialEq)]
#[error("dedup threshold {0} outside (0, 1]")]
pub struct ThresholdError(pub f64);

/// Drops examples whose response matches a benchmark item exactly after
/// whitespace normalization, or whose similarity to one reaches `threshold`.
pub fn dedup(
    examples: &[TrainingExample],
    benchmark: &[CorpusItem],
    threshold: f64,
) -> Result<(Vec<TrainingExample>, DedupReport), ThresholdError> {
    if !(threshold > 0.0 && threshold <= 1.0) {
        return Err(ThresholdError(threshold));
    }
    let exact: HashMap<String, &str> =
        benchmark.iter().rev().map(|b| (normalize_whitespace(&b.code), b.id.as_str())).collect();
    let corpus: Vec<&str> =
        examples.iter().map(|e| e.response.as_str()).chain(benchmark.iter().map(|b| b.code.as_str())).collect();
    let model = Tfidf::fit(&corpus);
    let bench: Vec<(&str, TfidfVector)> = benchmark.iter().map(|b| (b.id.as_str(), model.vector(&b.code))).collect();
    let verdicts: Vec<Option<Removal>> = examples
        .par_iter()
        .map(|e| {
            if let Some(id) = exact.get(&normalize_whitespace(&e.response)) {
                return Some(Removal {
                    example_id: e.example_id.clone(),
                    benchmark_id: id.to_string(),
                    kind: MatchKind::Exact,
                    similarity: 1.0,
                });
            }
            let v = model.vector(&e.response);
            bench
                .iter()
                .map(|(id, bv)| (*id, v.cosine(bv)))
                .filter(|(_, s)| *s >= threshold)
                .fold(None, |acc: Option<(&str, f64)>, (id, s)| match acc {
                    Some((_, b)) if b >= s => acc,
                    _ => Some((id, s)),
                })
                .map(|(id, s)| Removal {
                    example_id: e.example_id.clone(),
                    benchmark_id: id.to_string(),
                    kind: MatchKind::Similar,
                    similarity: s,
                })
        })
        .collect();
    let mut kept = Vec::new();
    let mut removed = Vec::new();
    for (e, v) in examples.iter().zip(verdicts) {
        match v {
            Some(r) => removed.push(r),
            None => kept.push(e.clone()),
        }
    }
    Ok((kept, DedupReport { threshold, examined: examples.len(), removed }))
}
