//! Replays archived analyzer output instead of running the tool.
//!
//! Layout: `<root>/<tool>/<key>.sarif` (CodeQL), `<root>/<tool>/<key>.json`
//! (SonarQube export) or `<root>/<tool>/<key>.failed` holding the failure
//! rationale, where `<key>` is the SHA-256 of `"<language>\n<code>"`.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde_json::json;

use super::{parse_sarif, parse_sonar_export, Analyzer, RuleMap, Tool, Verdict, VerifierError};
use crate::gateway::cache::sha256_hex;
use crate::gateway::CodeSnippet;
use crate::seeds::CweId;

fn key(snippet: &CodeSnippet) -> String {
    sha256_hex(format!("{}\n{}", snippet.language.id(), snippet.code).as_bytes())
}

fn extension(tool: Tool) -> &'static str {
    match tool {
        Tool::CodeQl => "sarif",
        Tool::SonarQube => "json",
    }
}

/// Where a successful run's output for `snippet` is archived.
pub fn archive_path(root: &Path, tool: Tool, snippet: &CodeSnippet) -> PathBuf {
    root.join(tool.id()).join(format!("{}.{}", key(snippet), extension(tool)))
}

fn failure_path(root: &Path, tool: Tool, snippet: &CodeSnippet) -> PathBuf {
    root.join(tool.id()).join(format!("{}.failed", key(snippet)))
}

/// What an archived run produced.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ArchivedOutcome {
    /// `(rule id, line)` per finding.
    Findings(Vec<(String, u32)>),
    Failed(String),
}

/// Renders `outcome` in the tool's native format and stores it under `root`.
pub fn write_archive(
    root: &Path,
    tool: Tool,
    snippet: &CodeSnippet,
    outcome: &ArchivedOutcome,
) -> std::io::Result<PathBuf> {
    std::fs::create_dir_all(root.join(tool.id()))?;
    let (path, text) = match outcome {
        ArchivedOutcome::Failed(reason) => (failure_path(root, tool, snippet), format!("{reason}\n")),
        ArchivedOutcome::Findings(findings) => {
            let doc = match tool {
                Tool::CodeQl => json!({
                    "version": "2.1.0",
                    "runs": [{
                        "tool": {"driver": {"name": "CodeQL"}},
                        "results": findings.iter().map(|(rule, line)| json!({
                            "ruleId": rule,
                            "message": {"text": rule},
                            "locations": [{"physicalLocation": {"region": {"startLine": line}}}],
                        })).collect::<Vec<_>>(),
                    }],
                }),
                Tool::SonarQube => json!({
                    "issues": findings.iter().map(|(rule, line)| json!({
                        "rule": rule,
                        "line": line,
                        "textRange": {"startLine": line, "endLine": line},
                        "message": rule,
                    })).collect::<Vec<_>>(),
                    "hotspots": [],
                }),
            };
            (archive_path(root, tool, snippet), serde_json::to_string_pretty(&doc).expect("json serializes") + "\n")
        }
    };
    std::fs::write(&path, text)?;
    Ok(path)
}

#[derive(Debug, Clone)]
pub struct ArchivedAnalyzer {
    tool: Tool,
    root: PathBuf,
    rules: Arc<RuleMap>,
}

impl ArchivedAnalyzer {
    pub fn new(tool: Tool, root: impl Into<PathBuf>, rules: Arc<RuleMap>) -> Self {
        Self { tool, root: root.into(), rules }
    }
}

impl Analyzer for ArchivedAnalyzer {
    fn tool(&self) -> Tool {
        self.tool
    }

    /// Copies the archived output into `workspace`. A snippet with no
    /// archived output is an environment error, not a silent failure.
    fn analyze(&self, snippet: &CodeSnippet, _cwe: &CweId, workspace: &Path) -> Result<Verdict, VerifierError> {
        let failed = failure_path(&self.root, self.tool, snippet);
        if failed.is_file() {
            let reason = std::fs::read_to_string(&failed).map_err(|e| VerifierError::workspace(&failed, e))?;
            return Ok(Verdict::failed(self.tool, reason.trim().to_string()));
        }
        if snippet.code.trim().is_empty() {
            return Ok(Verdict::failed(self.tool, "analysis failed: empty snippet"));
        }
        let src = archive_path(&self.root, self.tool, snippet);
        let text = std::fs::read_to_string(&src).map_err(|e| VerifierError::Environment {
            tool: self.tool,
            message: format!("no archived output at {}: {e}", src.display()),
        })?;
        let dest = workspace.join(src.file_name().expect("archive path has a file name"));
        std::fs::write(&dest, &text).map_err(|e| VerifierError::workspace(&dest, e))?;
        let findings = match self.tool {
            Tool::CodeQl => parse_sarif(&text, &self.rules)?,
            Tool::SonarQube => parse_sonar_export(&text, &self.rules)?,
        };
        Ok(Verdict::completed(self.tool, findings).with_raw_output(dest))
    }
}
