//! CodeQL command-line driver.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use super::{parse_sarif, write_harness, Analyzer, RuleMap, Tool, Verdict, VerifierError};
use crate::gateway::CodeSnippet;
use crate::process::{self, Limits};
use crate::seeds::CweId;

/// Query selection; `{lang}` is replaced by the extractor name. The whole
/// security suite runs and only findings whose rule maps to the target CWE
/// count toward the decision.
pub const DEFAULT_CODEQL_QUERIES: &str = "codeql/{lang}-queries:codeql-suites/{lang}-security-extended.qls";

#[derive(Debug, Clone)]
pub struct CodeQlAnalyzer {
    binary: String,
    queries: String,
    timeout: Duration,
    threads: u32,
    rules: Arc<RuleMap>,
}

impl CodeQlAnalyzer {
    pub fn new(binary: impl Into<String>, rules: Arc<RuleMap>) -> Self {
        Self {
            binary: binary.into(),
            queries: DEFAULT_CODEQL_QUERIES.to_string(),
            timeout: Duration::from_secs(super::DEFAULT_TIMEOUT_SECS),
            threads: 1,
            rules,
        }
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_queries(mut self, queries: impl Into<String>) -> Self {
        self.queries = queries.into();
        self
    }

    pub fn with_threads(mut self, threads: u32) -> Self {
        self.threads = threads.max(1);
        self
    }

    fn resolve(&self) -> Result<PathBuf, VerifierError> {
        process::resolve_program(&self.binary).ok_or_else(|| VerifierError::Environment {
            tool: Tool::CodeQl,
            message: format!("`{}` not found", self.binary),
        })
    }
}

fn tail(text: &str, lines: usize) -> String {
    let all: Vec<&str> = text.lines().collect();
    all[all.len().saturating_sub(lines)..].join("\n")
}

impl Analyzer for CodeQlAnalyzer {
    fn tool(&self) -> Tool {
        Tool::CodeQl
    }

    fn analyze(&self, snippet: &CodeSnippet, _cwe: &CweId, workspace: &Path) -> Result<Verdict, VerifierError> {
        let binary = self.resolve()?;
        if snippet.code.trim().is_empty() {
            return Ok(Verdict::failed(Tool::CodeQl, "database build failed: empty snippet"));
        }
        let project = write_harness(snippet, &workspace.join("src"))?;
        let db = workspace.join("db");
        let sarif = workspace.join("results.sarif");
        let started = Instant::now();
        let remaining = |t: Duration| t.saturating_sub(started.elapsed());

        let mut create = Command::new(&binary);
        create
            .arg("database")
            .arg("create")
            .arg(&db)
            .arg(format!("--language={}", project.codeql_language()))
            .arg("--source-root")
            .arg(&project.root)
            .arg("--overwrite")
            .args(project.codeql_build_args())
            .current_dir(&project.root);
        let out = process::run(create, self.timeout, Limits::default())
            .map_err(|e| VerifierError::workspace(workspace, e))?;
        std::fs::write(workspace.join("database-create.log"), format!("{}{}", out.stdout, out.stderr))
            .map_err(|e| VerifierError::workspace(workspace, e))?;
        if out.timed_out {
            return Ok(Verdict::failed(
                Tool::CodeQl,
                format!("timeout: database create exceeded {}s", self.timeout.as_secs()),
            ));
        }
        if !out.success() {
            return Ok(Verdict::failed(
                Tool::CodeQl,
                format!("database build failed ({}): {}", out.describe(), tail(&out.stderr, 5)),
            ));
        }

        let queries = self.queries.replace("{lang}", project.codeql_language());
        let mut analyze = Command::new(&binary);
        analyze
            .arg("database")
            .arg("analyze")
            .arg(&db)
            .arg(&queries)
            .arg("--format=sarif-latest")
            .arg(format!("--output={}", sarif.display()))
            .arg(format!("--threads={}", self.threads));
        let out = process::run(analyze, remaining(self.timeout), Limits::default())
            .map_err(|e| VerifierError::workspace(workspace, e))?;
        std::fs::write(workspace.join("database-analyze.log"), format!("{}{}", out.stdout, out.stderr))
            .map_err(|e| VerifierError::workspace(workspace, e))?;
        if out.timed_out {
            return Ok(Verdict::failed(
                Tool::CodeQl,
                format!("timeout: analysis exceeded {}s", self.timeout.as_secs()),
            ));
        }
        if !out.success() {
            return Ok(Verdict::failed(
                Tool::CodeQl,
                format!("analysis failed ({}): {}", out.describe(), tail(&out.stderr, 5)),
            ));
        }
        let text = std::fs::read_to_string(&sarif).map_err(|e| VerifierError::workspace(&sarif, e))?;
        match parse_sarif(&text, &self.rules) {
            Ok(findings) => Ok(Verdict::completed(Tool::CodeQl, findings).with_raw_output(sarif)),
            Err(e) => Ok(Verdict::failed(Tool::CodeQl, format!("unreadable SARIF: {e}")).with_raw_output(sarif)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seeds::Language;
    use std::os::unix::fs::PermissionsExt;

    /// Stand-in `codeql` that fails `database create` on an empty source
    /// file and otherwise writes a SARIF log flagging `system(` calls.
    const FAKE_CODEQL: &str = r#"#!/bin/sh
cmd="$1 $2"
if [ "$cmd" = "database create" ]; then
  src=""
  while [ $# -gt 0 ]; do
    if [ "$1" = "--source-root" ]; then src="$2"; fi
    shift
  done
  if [ -n "$SLOW" ]; then sleep 30; fi
  grep -q . "$src"/main.c || { echo "no source" >&2; exit 32; }
  cp "$src"/main.c "$src"/../snapshot.c
  exit 0
fi
if [ "$cmd" = "database analyze" ]; then
  out=""
  for a in "$@"; do
    case "$a" in --output=*) out="${a#--output=}";; esac
  done
  dir=$(dirname "$out")
  line=$(grep -n 'system(' "$dir/snapshot.c" | head -1 | cut -d: -f1)
  if [ -n "$line" ]; then
    printf '{"version":"2.1.0","runs":[{"results":[{"ruleId":"cpp/command-line-injection","message":{"text":"cmd"},"locations":[{"physicalLocation":{"region":{"startLine":%s}}}]}]}]}' "$line" > "$out"
  else
    printf '{"version":"2.1.0","runs":[{"results":[]}]}' > "$out"
  fi
  exit 0
fi
exit 2
"#;

    fn fake_binary(dir: &Path) -> PathBuf {
        let path = dir.join("codeql");
        std::fs::write(&path, FAKE_CODEQL).unwrap();
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
        path
    }

    fn cwe78() -> CweId {
        CweId::parse("CWE-078").unwrap()
    }

    #[test]
    fn subprocess_flow_yields_mapped_finding() {
        let bin = tempfile::tempdir().unwrap();
        let ws = tempfile::tempdir().unwrap();
        let a = CodeQlAnalyzer::new(fake_binary(bin.path()).to_str().unwrap(), Arc::new(RuleMap::bundled()));
        let snip = CodeSnippet::new(
            Language::C,
            "#include <stdlib.h>\nint main(int c, char **v) {\n  return system(v[1]);\n}",
        );
        let v = a.analyze(&snip, &cwe78(), ws.path()).unwrap();
        assert!(v.analysis_ok, "{:?}", v.rationale);
        assert!(v.flags(&cwe78()));
        assert_eq!(v.findings[0].location.line_start, 3);
        assert!(v.raw_output.as_ref().unwrap().is_file());
    }

    #[test]
    fn empty_snippet_is_analysis_failure() {
        let bin = tempfile::tempdir().unwrap();
        let ws = tempfile::tempdir().unwrap();
        let a = CodeQlAnalyzer::new(fake_binary(bin.path()).to_str().unwrap(), Arc::new(RuleMap::bundled()));
        let v = a.analyze(&CodeSnippet::new(Language::C, "   \n"), &cwe78(), ws.path()).unwrap();
        assert!(!v.analysis_ok);
        assert!(v.findings.is_empty());
    }

    #[test]
    fn missing_binary_is_environment_error() {
        let ws = tempfile::tempdir().unwrap();
        let a = CodeQlAnalyzer::new("/nonexistent/codeql", Arc::new(RuleMap::bundled()));
        let err = a.analyze(&CodeSnippet::new(Language::C, "int x;"), &cwe78(), ws.path()).unwrap_err();
        assert!(matches!(err, VerifierError::Environment { tool: Tool::CodeQl, .. }));
    }

    #[test]
    fn timeout_is_analysis_failure() {
        let bin = tempfile::tempdir().unwrap();
        let ws = tempfile::tempdir().unwrap();
        let path = fake_binary(bin.path());
        let wrapper = bin.path().join("slow-codeql");
        std::fs::write(&wrapper, format!("#!/bin/sh\nSLOW=1 exec {} \"$@\"\n", path.display())).unwrap();
        std::fs::set_permissions(&wrapper, std::fs::Permissions::from_mode(0o755)).unwrap();
        let a = CodeQlAnalyzer::new(wrapper.to_str().unwrap(), Arc::new(RuleMap::bundled()))
            .with_timeout(Duration::from_millis(300));
        let v = a.analyze(&CodeSnippet::new(Language::C, "int x;"), &cwe78(), ws.path()).unwrap();
        assert!(!v.analysis_ok);
        assert!(v.rationale.unwrap().starts_with("timeout"));
    }

    /// Runs the real CLI when one is installed.
    #[test]
    fn live_codeql_flags_command_injection() {
        if process::resolve_program("codeql").is_none() {
            eprintln!("codeql not installed; skipping");
            return;
        }
        let ws = tempfile::tempdir().unwrap();
        let a = CodeQlAnalyzer::new("codeql", Arc::new(RuleMap::bundled()));
        let snip = CodeSnippet::new(
            Language::C,
            "#include <stdio.h>\n#include <stdlib.h>\n#include <string.h>\nint main(int argc, char **argv) {\n  char cmd[256] = \"ls \";\n  strncat(cmd, argv[1], 200);\n  return system(cmd);\n}",
        );
        let v = a.analyze(&snip, &cwe78(), ws.path()).unwrap();
        assert!(v.analysis_ok, "{:?}", v.rationale);
        assert!(v.flags(&cwe78()));
    }
}
