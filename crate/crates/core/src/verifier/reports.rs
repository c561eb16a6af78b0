//! Parsers for raw analyzer output: SARIF 2.1 from CodeQL and the issue
//! export written by the SonarQube driver.

use std::collections::{BTreeMap, BTreeSet};

use serde::Deserialize;

use super::{Finding, Location, RuleMap, Tool, VerifierError};
use crate::seeds::CweId;

#[derive(Debug, Deserialize)]
struct Sarif {
    #[serde(default)]
    runs: Vec<SarifRun>,
}

#[derive(Debug, Deserialize)]
struct SarifRun {
    #[serde(default)]
    tool: Option<SarifTool>,
    #[serde(default)]
    results: Vec<SarifResult>,
}

#[derive(Debug, Deserialize)]
struct SarifTool {
    driver: SarifComponent,
    #[serde(default)]
    extensions: Vec<SarifComponent>,
}

#[derive(Debug, Deserialize)]
struct SarifComponent {
    #[serde(default)]
    rules: Vec<SarifRule>,
}

#[derive(Debug, Deserialize)]
struct SarifRule {
    id: String,
    #[serde(default)]
    properties: Option<SarifProperties>,
}

#[derive(Debug, Deserialize)]
struct SarifProperties {
    #[serde(default)]
    tags: Vec<String>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SarifResult {
    #[serde(default)]
    rule_id: Option<String>,
    #[serde(default)]
    rule_index: Option<usize>,
    #[serde(default)]
    rule: Option<SarifRuleRef>,
    #[serde(default)]
    message: Option<SarifMessage>,
    #[serde(default)]
    locations: Vec<SarifLocation>,
}

#[derive(Debug, Deserialize)]
struct SarifRuleRef {
    #[serde(default)]
    id: Option<String>,
    #[serde(default)]
    index: Option<usize>,
}

#[derive(Debug, Deserialize)]
struct SarifMessage {
    #[serde(default)]
    text: String,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SarifLocation {
    #[serde(default)]
    physical_location: Option<SarifPhysical>,
}

#[derive(Debug, Deserialize)]
struct SarifPhysical {
    #[serde(default)]
    region: Option<SarifRegion>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SarifRegion {
    #[serde(default)]
    start_line: Option<u32>,
    #[serde(default)]
    end_line: Option<u32>,
}

fn parse_sarif_doc(text: &str) -> Result<Sarif, VerifierError> {
    serde_json::from_str(text).map_err(|e| VerifierError::Data(format!("SARIF: {e}")))
}

/// Findings from a CodeQL SARIF log. CWEs come from `rules`, never from the
/// log's own tags.
pub fn parse_sarif(text: &str, rules: &RuleMap) -> Result<Vec<Finding>, VerifierError> {
    let doc = parse_sarif_doc(text)?;
    let mut findings = Vec::new();
    for run in &doc.runs {
        let driver_rules: Vec<&str> =
            run.tool.as_ref().map(|t| t.driver.rules.iter().map(|r| r.id.as_str()).collect()).unwrap_or_default();
        for res in &run.results {
            let index = res.rule_index.or(res.rule.as_ref().and_then(|r| r.index));
            let rule_id = res
                .rule_id
                .clone()
                .or_else(|| res.rule.as_ref().and_then(|r| r.id.clone()))
                .or_else(|| index.and_then(|i| driver_rules.get(i)).map(|s| s.to_string()))
                .ok_or_else(|| VerifierError::Data("SARIF result without a rule id".into()))?;
            let region =
                res.locations.first().and_then(|l| l.physical_location.as_ref()).and_then(|p| p.region.as_ref());
            let start = region.and_then(|r| r.start_line).unwrap_or(1);
            let end = region.and_then(|r| r.end_line).unwrap_or(start);
            let message = res.message.as_ref().map(|m| m.text.as_str()).unwrap_or("");
            findings.push(Finding::mapped(Tool::CodeQl, &rule_id, Location::new(start, end), message, rules));
        }
    }
    Ok(findings)
}

/// `external/cwe/cwe-NNN` tags declared in a SARIF log's rule metadata.
pub fn sarif_rule_cwe_tags(text: &str) -> Result<BTreeMap<String, BTreeSet<CweId>>, VerifierError> {
    let doc = parse_sarif_doc(text)?;
    let mut out: BTreeMap<String, BTreeSet<CweId>> = BTreeMap::new();
    for tool in doc.runs.iter().filter_map(|r| r.tool.as_ref()) {
        for rule in tool.driver.rules.iter().chain(tool.extensions.iter().flat_map(|e| &e.rules)) {
            let cwes = rule
                .properties
                .iter()
                .flat_map(|p| &p.tags)
                .filter_map(|t| t.strip_prefix("external/cwe/"))
                .filter_map(|t| CweId::parse(t).ok());
            out.entry(rule.id.clone()).or_default().extend(cwes);
        }
    }
    Ok(out)
}

#[derive(Debug, Deserialize)]
struct SonarExport {
    #[serde(default)]
    issues: Vec<SonarIssue>,
    #[serde(default)]
    hotspots: Vec<SonarIssue>,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SonarIssue {
    #[serde(default)]
    rule: Option<String>,
    #[serde(default)]
    rule_key: Option<String>,
    #[serde(default)]
    line: Option<u32>,
    #[serde(default)]
    text_range: Option<SonarRange>,
    #[serde(default)]
    message: String,
}

#[derive(Debug, Deserialize)]
#[serde(rename_all = "camelCase")]
struct SonarRange {
    start_line: u32,
    end_line: u32,
}

/// Findings from the SonarQube export `{"issues": [...], "hotspots": [...]}`
/// (the `/api/issues/search` and `/api/hotspots/search` payloads combined).
pub fn parse_sonar_export(text: &str, rules: &RuleMap) -> Result<Vec<Finding>, VerifierError> {
    let export: SonarExport =
        serde_json::from_str(text).map_err(|e| VerifierError::Data(format!("SonarQube export: {e}")))?;
    export
        .issues
        .iter()
        .chain(&export.hotspots)
        .map(|issue| {
            let rule_id = issue
                .rule
                .as_deref()
                .or(issue.rule_key.as_deref())
                .ok_or_else(|| VerifierError::Data("SonarQube issue without a rule".into()))?;
            let location = match (&issue.text_range, issue.line) {
                (Some(r), _) => Location::new(r.start_line, r.end_line),
                (None, Some(l)) => Location::new(l, l),
                (None, None) => Location::new(1, 1),
            };
            Ok(Finding::mapped(Tool::SonarQube, rule_id, location, &issue.message, rules))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    const SARIF: &str = r#"{
      "version": "2.1.0",
      "runs": [{
        "tool": {"driver": {"name": "CodeQL", "rules": [
          {"id": "cpp/command-line-injection",
           "properties": {"tags": ["security", "external/cwe/cwe-078", "external/cwe/cwe-088"]}},
          {"id": "cpp/unused-local-variable", "properties": {"tags": ["maintainability"]}}
        ]}},
        "results": [
          {"ruleId": "cpp/command-line-injection", "ruleIndex": 0,
           "message": {"text": "This argument to an OS command is derived from user input."},
           "locations": [{"physicalLocation": {"artifactLocation": {"uri": "main.c"},
                          "region": {"startLine": 9, "startColumn": 12, "endColumn": 15}}}]},
          {"rule": {"index": 1}, "message": {"text": "unused"}, "locations": []}
        ]
      }]
    }"#;

    #[test]
    fn sarif_findings_use_the_rule_table() {
        let rules = RuleMap::bundled();
        let f = parse_sarif(SARIF, &rules).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].rule_id, "cpp/command-line-injection");
        assert_eq!(f[0].location, Location::new(9, 9));
        assert!(f[0].mapped_cwes.contains(&CweId::parse("CWE-078").unwrap()));
        // rule resolved via index, not in the table
        assert_eq!(f[1].rule_id, "cpp/unused-local-variable");
        assert!(f[1].mapped_cwes.is_empty());
        // an empty table maps nothing even though the log carries tags
        assert!(parse_sarif(SARIF, &RuleMap::empty()).unwrap()[0].mapped_cwes.is_empty());
    }

    #[test]
    fn sarif_tags_agree_with_table() {
        let tags = sarif_rule_cwe_tags(SARIF).unwrap();
        let rules = RuleMap::bundled();
        for (rule, cwes) in tags {
            assert_eq!(rules.map_rule_to_cwes(Tool::CodeQl, &rule), cwes, "{rule}");
        }
    }

    #[test]
    fn empty_sarif_has_no_findings() {
        let f = parse_sarif(r#"{"version":"2.1.0","runs":[{"results":[]}]}"#, &RuleMap::bundled()).unwrap();
        assert!(f.is_empty());
        assert!(parse_sarif("not json", &RuleMap::bundled()).is_err());
    }

    #[test]
    fn sonar_export() {
        let text = r#"{
          "issues": [{"rule": "pythonsecurity:S3649", "line": 7,
                      "textRange": {"startLine": 7, "endLine": 8, "startOffset": 0, "endOffset": 3},
                      "message": "Change this code to not construct SQL queries directly from user-controlled data."}],
          "hotspots": [{"ruleKey": "python:S4790", "line": 3, "message": "weak hash"}]
        }"#;
        let f = parse_sonar_export(text, &RuleMap::bundled()).unwrap();
        assert_eq!(f.len(), 2);
        assert_eq!(f[0].location, Location::new(7, 8));
        assert!(f[0].mapped_cwes.contains(&CweId::parse("CWE-089").unwrap()));
        assert_eq!(f[1].location, Location::new(3, 3));
        assert!(f[1].mapped_cwes.contains(&CweId::parse("CWE-328").unwrap()));
        assert!(parse_sonar_export(r#"{"issues": [{"message": "x"}]}"#, &RuleMap::bundled()).is_err());
    }
}
