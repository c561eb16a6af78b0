//! Rule-id → CWE mapping tables.
//!
//! Tables are versioned JSON data files. Rules absent from a table map to the
//! empty set; a finding from such a rule never counts toward a CWE.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::Deserialize;

use super::{Tool, VerifierError};
use crate::seeds::CweId;

const CODEQL_RULES: &str = include_str!("../../data/rules/codeql.json");
const SONARQUBE_RULES: &str = include_str!("../../data/rules/sonarqube.json");

pub const RULE_TABLE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleTableFile {
    schema_version: u32,
    tool: Tool,
    rules: BTreeMap<String, Vec<CweId>>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct RuleMap {
    tables: BTreeMap<Tool, BTreeMap<String, BTreeSet<CweId>>>,
}

impl RuleMap {
    /// The tables bundled with this crate.
    pub fn bundled() -> Self {
        let mut map = Self::default();
        for text in [CODEQL_RULES, SONARQUBE_RULES] {
            map.load_str(text, "<bundled>").expect("bundled rule table is valid");
        }
        map
    }

    pub fn empty() -> Self {
        Self::default()
    }

    /// Adds (or replaces) the table for the tool named inside `text`.
    pub fn load_str(&mut self, text: &str, origin: &str) -> Result<Tool, VerifierError> {
        let file: RuleTableFile =
            serde_json::from_str(text).map_err(|e| VerifierError::Data(format!("{origin}: {e}")))?;
        if file.schema_version != RULE_TABLE_SCHEMA_VERSION {
            return Err(VerifierError::Data(format!(
                "{origin}: unsupported rule table schema_version {}",
                file.schema_version
            )));
        }
        let table = file.rules.into_iter().map(|(rule, cwes)| (rule, cwes.into_iter().collect())).collect();
        self.tables.insert(file.tool, table);
        Ok(file.tool)
    }

    pub fn load_file(&mut self, path: &Path) -> Result<Tool, VerifierError> {
        let text =
            std::fs::read_to_string(path).map_err(|e| VerifierError::Data(format!("{}: {e}", path.display())))?;
        self.load_str(&text, &path.display().to_string())
    }

    pub fn insert(&mut self, tool: Tool, rule_id: &str, cwes: impl IntoIterator<Item = CweId>) {
        self.tables.entry(tool).or_default().insert(rule_id.to_string(), cwes.into_iter().collect());
    }

    pub fn map_rule_to_cwes(&self, tool: Tool, rule_id: &str) -> BTreeSet<CweId> {
        self.tables.get(&tool).and_then(|t| t.get(rule_id)).cloned().unwrap_or_default()
    }

    pub fn rule_count(&self, tool: Tool) -> usize {
        self.tables.get(&tool).map_or(0, |t| t.len())
    }

    /// Rules of `tool` that map to `cwe`.
    pub fn rules_for(&self, tool: Tool, cwe: &CweId) -> Vec<&str> {
        self.tables
            .get(&tool)
            .map(|t| t.iter().filter(|(_, cwes)| cwes.contains(cwe)).map(|(r, _)| r.as_str()).collect())
            .unwrap_or_default()
    }
}
