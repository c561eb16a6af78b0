//! Which analyzer covers which CWE-language pair.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use super::{Tool, VerifierError};
use crate::seeds::{CwePair, Language};

const SONARQUBE_SUPPORT: &str = include_str!("../../data/sonarqube_support.json");

#[derive(Debug, Deserialize)]
struct SupportFile {
    schema_version: u32,
    tool: Tool,
    #[serde(default)]
    #[allow(dead_code)]
    note: Option<String>,
    pairs: Vec<CwePair>,
}

/// `(tool, pair) → supported`. Anything not listed is unsupported.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SupportMatrix {
    supported: BTreeMap<Tool, BTreeSet<CwePair>>,
}

impl SupportMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// CodeQL on every corpus pair plus the bundled SonarQube subset,
    /// restricted to pairs present in the corpus.
    pub fn for_corpus(pairs: &BTreeSet<CwePair>) -> Self {
        let sonar = parse_support(SONARQUBE_SUPPORT, "<bundled>").expect("bundled support table is valid");
        Self::from_parts(pairs, &sonar)
    }

    /// CodeQL on every corpus pair plus `sonar_pairs ∩ corpus`. Listed pairs
    /// outside the corpus are logged and dropped.
    pub fn from_parts(pairs: &BTreeSet<CwePair>, sonar_pairs: &BTreeSet<CwePair>) -> Self {
        let mut m = Self::new();
        for p in pairs {
            m.set(Tool::CodeQl, p.clone(), true);
        }
        for p in sonar_pairs {
            if pairs.contains(p) {
                m.set(Tool::SonarQube, p.clone(), true);
            } else {
                log::warn!("SonarQube support lists {p}, which is not a corpus pair");
            }
        }
        m
    }

    /// Like [`for_corpus`](Self::for_corpus) with the SonarQube subset read
    /// from a support file.
    pub fn with_sonar_file(pairs: &BTreeSet<CwePair>, path: &Path) -> Result<Self, VerifierError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| VerifierError::Data(format!("{}: {e}", path.display())))?;
        let sonar = parse_support(&text, &path.display().to_string())?;
        Ok(Self::from_parts(pairs, &sonar))
    }

    pub fn set(&mut self, tool: Tool, pair: CwePair, supported: bool) {
        let set = self.supported.entry(tool).or_default();
        if supported {
            set.insert(pair);
        } else {
            set.remove(&pair);
        }
    }

    pub fn supports(&self, tool: Tool, pair: &CwePair) -> bool {
        self.supported.get(&tool).is_some_and(|s| s.contains(pair))
    }

    /// Tools covering `pair`, in [`Tool::ALL`] order.
    pub fn tools_for(&self, pair: &CwePair) -> Vec<Tool> {
        Tool::ALL.into_iter().filter(|t| self.supports(*t, pair)).collect()
    }

    pub fn count(&self, tool: Tool) -> usize {
        self.supported.get(&tool).map_or(0, |s| s.len())
    }

    pub fn count_by_language(&self, tool: Tool) -> BTreeMap<Language, usize> {
        let mut out: BTreeMap<Language, usize> = Language::ALL.iter().map(|l| (*l, 0)).collect();
        for p in self.supported.get(&tool).into_iter().flatten() {
            *out.entry(p.language).or_default() += 1;
        }
        out
    }
}

fn parse_support(text: &str, origin: &str) -> Result<BTreeSet<CwePair>, VerifierError> {
    let file: SupportFile = serde_json::from_str(text).map_err(|e| VerifierError::Data(format!("{origin}: {e}")))?;
    if file.schema_version != 1 {
        return Err(VerifierError::Data(format!("{origin}: unsupported schema_version {}", file.schema_version)));
    }
    if file.tool != Tool::SonarQube {
        return Err(VerifierError::Data(format!("{origin}: support file is for {}", file.tool)));
    }
    Ok(file.pairs.into_iter().collect())
}

/// The bundled SonarQube subset, before intersecting with any corpus.
pub fn bundled_sonar_pairs() -> BTreeSet<CwePair> {
    parse_support(SONARQUBE_SUPPORT, "<bundled>").expect("bundled support table is valid")
}
