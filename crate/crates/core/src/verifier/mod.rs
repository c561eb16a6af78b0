//! Static-analyzer verification of single snippets.
//!
//! Each snippet is analyzed by every tool the [`SupportMatrix`] lists for its
//! CWE-language pair; [`consensus`] turns the per-tool verdicts into one
//! [`Decision`]. A snippet is labelled only when all supported tools agree
//! on the target CWE.

mod archive;
mod codeql;
mod harness;
mod matrix;
mod reports;
mod rules;
mod sonarqube;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use archive::{archive_path, write_archive, ArchivedAnalyzer, ArchivedOutcome};
pub use codeql::{CodeQlAnalyzer, DEFAULT_CODEQL_QUERIES};
pub use harness::{write_harness, HarnessProject};
pub use matrix::{bundled_sonar_pairs, SupportMatrix};
pub use reports::{parse_sarif, parse_sonar_export, sarif_rule_cwe_tags};
pub use rules::RuleMap;
pub use sonarqube::SonarQubeAnalyzer;

use crate::gateway::{CodeSnippet, InFlightLimit};
use crate::seeds::{CweId, CwePair};

/// Default per-snippet analysis timeout.
pub const DEFAULT_TIMEOUT_SECS: u64 = 300;

#[derive(Debug, thiserror::Error)]
pub enum VerifierError {
    #[error("{tool}: {message}")]
    Environment { tool: Tool, message: String },
    #[error("workspace {path}: {source}")]
    Workspace {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("contract violation: {0}")]
    Contract(String),
    #[error("invalid data: {0}")]
    Data(String),
}

impl VerifierError {
    pub(crate) fn workspace(path: &Path, source: std::io::Error) -> Self {
        Self::Workspace { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Tool {
    #[serde(rename = "codeql")]
    CodeQl,
    #[serde(rename = "sonarqube")]
    SonarQube,
}

impl Tool {
    pub const ALL: [Tool; 2] = [Tool::CodeQl, Tool::SonarQube];

    pub fn id(self) -> &'static str {
        match self {
            Tool::CodeQl => "codeql",
            Tool::SonarQube => "sonarqube",
        }
    }
}

impl fmt::Display for Tool {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl FromStr for Tool {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "codeql" => Ok(Tool::CodeQl),
            "sonarqube" | "sonar" => Ok(Tool::SonarQube),
            _ => Err(format!("unknown analyzer `{s}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Location {
    pub line_start: u32,
    pub line_end: u32,
}

impl Location {
    /// Clamps to `1 ≤ line_start ≤ line_end`.
    pub fn new(line_start: u32, line_end: u32) -> Self {
        let start = line_start.max(1);
        Self { line_start: start, line_end: line_end.max(start) }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub tool: Tool,
    pub rule_id: String,
    pub mapped_cwes: BTreeSet<CweId>,
    pub location: Location,
    pub message: String,
}

impl Finding {
    /// Builds a finding whose CWEs come from `rules`.
    pub fn mapped(tool: Tool, rule_id: &str, location: Location, message: &str, rules: &RuleMap) -> Self {
        Self {
            tool,
            rule_id: rule_id.to_string(),
            mapped_cwes: rules.map_rule_to_cwes(tool, rule_id),
            location,
            message: message.to_string(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub tool: Tool,
    pub supported: bool,
    pub findings: Vec<Finding>,
    pub analysis_ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rationale: Option<String>,
    /// Raw tool output archived in the workspace.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_output: Option<PathBuf>,
}

impl Verdict {
    pub fn unsupported(tool: Tool) -> Self {
        Self {
            tool,
            supported: false,
            findings: Vec::new(),
            analysis_ok: true,
            rationale: Some("pair not covered by this analyzer".into()),
            raw_output: None,
        }
    }

    pub fn failed(tool: Tool, rationale: impl Into<String>) -> Self {
        Self {
            tool,
            supported: true,
            findings: Vec::new(),
            analysis_ok: false,
            rationale: Some(rationale.into()),
            raw_output: None,
        }
    }

    pub fn completed(tool: Tool, findings: Vec<Finding>) -> Self {
        Self { tool, supported: true, findings, analysis_ok: true, rationale: None, raw_output: None }
    }

    pub fn with_raw_output(mut self, path: PathBuf) -> Self {
        self.raw_output = Some(path);
        self
    }

    /// Whether at least one finding maps to `cwe`.
    pub fn flags(&self, cwe: &CweId) -> bool {
        self.findings.iter().any(|f| f.mapped_cwes.contains(cwe))
    }

    fn check_invariants(&self) -> Result<(), VerifierError> {
        if !self.findings.is_empty() && (!self.supported || !self.analysis_ok) {
            return Err(VerifierError::Contract(format!(
                "{} verdict carries findings although {}",
                self.tool,
                if self.supported { "analysis failed" } else { "unsupported" }
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecisionValue {
    Vulnerable,
    Secure,
    Inconclusive,
}

impl fmt::Display for DecisionValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecisionValue::Vulnerable => "vulnerable",
            DecisionValue::Secure => "secure",
            DecisionValue::Inconclusive => "inconclusive",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Decision {
    pub value: DecisionValue,
    pub rationale: String,
}

impl Decision {
    fn new(value: DecisionValue, rationale: impl Into<String>) -> Self {
        Self { value, rationale: rationale.into() }
    }
}

/// Combines per-tool verdicts for one snippet.
///
/// `verdicts` must hold exactly one verdict per tool the matrix lists for
/// `pair`; verdicts from other tools are accepted only when marked
/// unsupported. CodeQL must cover the pair for a label to be issued; when
/// both tools cover it they must agree on the target CWE.
pub fn consensus(verdicts: &[Verdict], pair: &CwePair, matrix: &SupportMatrix) -> Result<Decision, VerifierError> {
    let mut by_tool: BTreeMap<Tool, &Verdict> = BTreeMap::new();
    for v in verdicts {
        v.check_invariants()?;
        if by_tool.insert(v.tool, v).is_some() {
            return Err(VerifierError::Contract(format!("two {} verdicts for {pair}", v.tool)));
        }
        let listed = matrix.supports(v.tool, pair);
        if v.supported && !listed {
            return Err(VerifierError::Contract(format!(
                "{} verdict for {pair}, which the support matrix does not list",
                v.tool
            )));
        }
        if !v.supported && listed {
            return Err(VerifierError::Contract(format!(
                "{} verdict marked unsupported but the matrix lists {pair}",
                v.tool
            )));
        }
    }
    let tools = matrix.tools_for(pair);
    for t in &tools {
        if !by_tool.contains_key(t) {
            return Err(VerifierError::Contract(format!("missing {t} verdict for {pair}")));
        }
    }
    if !tools.contains(&Tool::CodeQl) {
        return Ok(Decision::new(DecisionValue::Inconclusive, format!("codeql does not cover {pair}")));
    }
    let supported: Vec<&Verdict> = tools.iter().map(|t| by_tool[t]).collect();
    if let Some(failed) = supported.iter().find(|v| !v.analysis_ok) {
        return Ok(Decision::new(
            DecisionValue::Inconclusive,
            format!("{} analysis failed: {}", failed.tool, failed.rationale.as_deref().unwrap_or("no detail")),
        ));
    }
    let cwe = &pair.cwe_id;
    let flagged: Vec<Tool> = supported.iter().filter(|v| v.flags(cwe)).map(|v| v.tool).collect();
    let names = |ts: &[Tool]| ts.iter().map(|t| t.id()).collect::<Vec<_>>().join(", ");
    Ok(if flagged.len() == supported.len() {
        Decision::new(DecisionValue::Vulnerable, format!("{cwe} flagged by {}", names(&tools)))
    } else if flagged.is_empty() {
        Decision::new(DecisionValue::Secure, format!("{cwe} not flagged by {}", names(&tools)))
    } else {
        Decision::new(DecisionValue::Inconclusive, format!("{cwe} flagged by {} only", names(&flagged)))
    })
}

/// One analyzer back end.
pub trait Analyzer: Send + Sync {
    fn tool(&self) -> Tool;

    /// Analyzes `snippet` for `cwe` inside the empty directory `workspace`.
    fn analyze(&self, snippet: &CodeSnippet, cwe: &CweId, workspace: &Path) -> Result<Verdict, VerifierError>;
}

type AnalyzeFn = dyn Fn(&CodeSnippet, &CweId) -> Verdict + Send + Sync;

/// Analyzer backed by a closure; for tests and scripted runs.
pub struct FnAnalyzer {
    tool: Tool,
    f: Box<AnalyzeFn>,
}

impl FnAnalyzer {
    pub fn new(tool: Tool, f: impl Fn(&CodeSnippet, &CweId) -> Verdict + Send + Sync + 'static) -> Self {
        Self { tool, f: Box::new(f) }
    }
}

impl Analyzer for FnAnalyzer {
    fn tool(&self) -> Tool {
        self.tool
    }

    fn analyze(&self, snippet: &CodeSnippet, cwe: &CweId, _workspace: &Path) -> Result<Verdict, VerifierError> {
        Ok((self.f)(snippet, cwe))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verification {
    pub verdicts: Vec<Verdict>,
    pub decision: Decision,
}

/// Runs the matrix-selected analyzers on a snippet and applies [`consensus`].
pub struct Verifier {
    analyzers: BTreeMap<Tool, Arc<dyn Analyzer>>,
    matrix: SupportMatrix,
    slots: InFlightLimit,
}

impl Verifier {
    /// `max_parallel` bounds concurrent analyzer invocations across threads.
    pub fn new(matrix: SupportMatrix, max_parallel: usize) -> Self {
        Self { analyzers: BTreeMap::new(), matrix, slots: InFlightLimit::new(max_parallel.max(1)) }
    }

    pub fn with_analyzer(mut self, analyzer: Arc<dyn Analyzer>) -> Self {
        self.analyzers.insert(analyzer.tool(), analyzer);
        self
    }

    pub fn matrix(&self) -> &SupportMatrix {
        &self.matrix
    }

    /// Analyzes `snippet` for `pair`. Each tool gets `workspace/<tool>`,
    /// cleared first; the verdict is written there as `verdict.json`.
    pub fn verify(
        &self,
        snippet: &CodeSnippet,
        pair: &CwePair,
        workspace: &Path,
    ) -> Result<Verification, VerifierError> {
        if snippet.language != pair.language {
            return Err(VerifierError::Contract(format!("{} snippet submitted for {pair}", snippet.language)));
        }
        let mut verdicts = Vec::new();
        for tool in Tool::ALL {
            if !self.matrix.supports(tool, pair) {
                verdicts.push(Verdict::unsupported(tool));
                continue;
            }
            let analyzer = self.analyzers.get(&tool).ok_or_else(|| VerifierError::Environment {
                tool,
                message: format!("no analyzer configured but the matrix lists {pair}"),
            })?;
            let dir = workspace.join(tool.id());
            if dir.exists() {
                std::fs::remove_dir_all(&dir).map_err(|e| VerifierError::workspace(&dir, e))?;
            }
            std::fs::create_dir_all(&dir).map_err(|e| VerifierError::workspace(&dir, e))?;
            let verdict = {
                let _slot = self.slots.enter();
                analyzer.analyze(snippet, &pair.cwe_id, &dir)?
            };
            if verdict.tool != tool {
                return Err(VerifierError::Contract(format!("{tool} analyzer returned a {} verdict", verdict.tool)));
            }
            let json = serde_json::to_string_pretty(&verdict).expect("verdict serializes");
            let path = dir.join("verdict.json");
            std::fs::write(&path, json + "\n").map_err(|e| VerifierError::workspace(&path, e))?;
            verdicts.push(verdict);
        }
        let decision = consensus(&verdicts, pair, &self.matrix)?;
        Ok(Verification { verdicts, decision })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::Language;

    fn pair(s: &str) -> CwePair {
        s.parse().unwrap()
    }

    fn finding(tool: Tool, cwe: &str) -> Finding {
        Finding {
            tool,
            rule_id: "r".into(),
            mapped_cwes: BTreeSet::from([CweId::parse(cwe).unwrap()]),
            location: Location::new(1, 1),
            message: String::new(),
        }
    }

    fn flagging(tool: Tool, cwe: &str) -> Verdict {
        Verdict::completed(tool, vec![finding(tool, cwe)])
    }

    fn dual_matrix(p: &CwePair) -> SupportMatrix {
        let set = BTreeSet::from([p.clone()]);
        SupportMatrix::from_parts(&set, &set)
    }

    #[test]
    fn both_flag_is_vulnerable() {
        let p = pair("CWE-089:python");
        let d =
            consensus(&[flagging(Tool::CodeQl, "CWE-089"), flagging(Tool::SonarQube, "CWE-089")], &p, &dual_matrix(&p))
                .unwrap();
        assert_eq!(d.value, DecisionValue::Vulnerable);
    }

    #[test]
    fn codeql_alone_decides_when_sonar_unsupported() {
        let p = pair("CWE-077:ruby");
        let m = SupportMatrix::for_corpus(&BTreeSet::from([p.clone()]));
        let d = consensus(&[Verdict::completed(Tool::CodeQl, vec![]), Verdict::unsupported(Tool::SonarQube)], &p, &m)
            .unwrap();
        assert_eq!(d.value, DecisionValue::Secure);
        // the unsupported verdict may also be omitted
        let d = consensus(&[flagging(Tool::CodeQl, "CWE-077")], &p, &m).unwrap();
        assert_eq!(d.value, DecisionValue::Vulnerable);
    }

    #[test]
    fn mixed_is_inconclusive() {
        let p = pair("CWE-089:python");
        let d = consensus(
            &[flagging(Tool::CodeQl, "CWE-089"), Verdict::completed(Tool::SonarQube, vec![])],
            &p,
            &dual_matrix(&p),
        )
        .unwrap();
        assert_eq!(d.value, DecisionValue::Inconclusive);
    }

    #[test]
    fn findings_on_other_cwes_do_not_count() {
        let p = pair("CWE-089:python");
        let d =
            consensus(&[flagging(Tool::CodeQl, "CWE-079"), flagging(Tool::SonarQube, "CWE-078")], &p, &dual_matrix(&p))
                .unwrap();
        assert_eq!(d.value, DecisionValue::Secure);
    }

    #[test]
    fn failed_analysis_is_inconclusive() {
        let p = pair("CWE-089:python");
        let d = consensus(
            &[Verdict::failed(Tool::CodeQl, "timed out"), flagging(Tool::SonarQube, "CWE-089")],
            &p,
            &dual_matrix(&p),
        )
        .unwrap();
        assert_eq!(d.value, DecisionValue::Inconclusive);
        assert!(d.rationale.contains("timed out"));
    }

    #[test]
    fn contract_violations() {
        let p = pair("CWE-077:ruby");
        let m = SupportMatrix::for_corpus(&BTreeSet::from([p.clone()]));
        // SonarQube verdict for a pair it does not cover
        assert!(matches!(
            consensus(&[Verdict::completed(Tool::CodeQl, vec![]), Verdict::completed(Tool::SonarQube, vec![])], &p, &m),
            Err(VerifierError::Contract(_))
        ));
        // missing CodeQL verdict
        assert!(consensus(&[], &p, &m).is_err());
        // duplicate
        assert!(consensus(&[flagging(Tool::CodeQl, "CWE-077"), flagging(Tool::CodeQl, "CWE-077")], &p, &m).is_err());
        // findings on a failed verdict
        let mut bad = Verdict::failed(Tool::CodeQl, "x");
        bad.findings.push(finding(Tool::CodeQl, "CWE-077"));
        assert!(consensus(&[bad], &p, &m).is_err());
    }

    #[test]
    fn order_insensitive() {
        let p = pair("CWE-089:python");
        let m = dual_matrix(&p);
        let a = flagging(Tool::CodeQl, "CWE-089");
        let b = Verdict::completed(Tool::SonarQube, vec![]);
        assert_eq!(consensus(&[a.clone(), b.clone()], &p, &m).unwrap(), consensus(&[b, a], &p, &m).unwrap());
    }

    #[test]
    fn verifier_runs_supported_tools_and_archives_verdicts() {
        let p = pair("CWE-089:python");
        let calls = Arc::new(std::sync::atomic::AtomicUsize::new(0));
        let c = calls.clone();
        let v = Verifier::new(dual_matrix(&p), 2)
            .with_analyzer(Arc::new(FnAnalyzer::new(Tool::CodeQl, move |s, cwe| {
                c.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                if s.code.contains("+ user") {
                    flagging(Tool::CodeQl, cwe.as_str())
                } else {
                    Verdict::completed(Tool::CodeQl, vec![])
                }
            })))
            .with_analyzer(Arc::new(FnAnalyzer::new(Tool::SonarQube, |s, cwe| {
                if s.code.contains("+ user") {
                    flagging(Tool::SonarQube, cwe.as_str())
                } else {
                    Verdict::completed(Tool::SonarQube, vec![])
                }
            })));
        let ws = tempfile::tempdir().unwrap();
        let snip = CodeSnippet::new(Language::Python, "q = 'SELECT ' + user");
        let out = v.verify(&snip, &p, ws.path()).unwrap();
        assert_eq!(out.decision.value, DecisionValue::Vulnerable);
        assert!(ws.path().join("codeql/verdict.json").is_file());
        assert!(ws.path().join("sonarqube/verdict.json").is_file());
        let out = v.verify(&CodeSnippet::new(Language::Python, "cur.execute(q, (user,))"), &p, ws.path()).unwrap();
        assert_eq!(out.decision.value, DecisionValue::Secure);
        assert_eq!(calls.load(std::sync::atomic::Ordering::SeqCst), 2);
    }

    #[test]
    fn verifier_requires_configured_analyzer() {
        let p = pair("CWE-089:python");
        let v = Verifier::new(dual_matrix(&p), 1);
        let ws = tempfile::tempdir().unwrap();
        let err = v.verify(&CodeSnippet::new(Language::Python, "x"), &p, ws.path()).unwrap_err();
        assert!(matches!(err, VerifierError::Environment { .. }));
    }

    #[test]
    fn location_is_clamped() {
        assert_eq!(Location::new(0, 0), Location { line_start: 1, line_end: 1 });
        assert_eq!(Location::new(5, 2), Location { line_start: 5, line_end: 5 });
    }
}
