//! Security and functional judging of one generated sample.
//!
//! Test scripts run in a fresh workspace holding the scenario's harness files
//! and the sample, under wall-clock, CPU and memory limits and, when enabled,
//! in a user+network namespace (`unshare -rn`) so they have no network.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::{EvalError, Scenario, SecurityJudge, TestScript, SCENARIO_FILE};
use crate::gateway::CodeSnippet;
use crate::process::{self, Limits};
use crate::verifier::{Analyzer, VerifierError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SandboxConfig {
    pub timeout_secs: u64,
    pub memory_mb: u64,
    pub cpu_secs: u64,
    pub isolate_network: bool,
}

impl Default for SandboxConfig {
    fn default() -> Self {
        Self { timeout_secs: 10, memory_mb: 1024, cpu_secs: 10, isolate_network: true }
    }
}

impl SandboxConfig {
    fn limits(&self) -> Limits {
        Limits { memory_bytes: Some(self.memory_mb * 1024 * 1024), cpu_seconds: Some(self.cpu_secs) }
    }

    /// Confirms the namespace wrapper works before any sample is scored.
    pub fn check(&self) -> Result<(), EvalError> {
        if !self.isolate_network {
            return Ok(());
        }
        let mut cmd = Command::new("unshare");
        cmd.args(["-rn", "true"]);
        match process::run(cmd, Duration::from_secs(10), Limits::default()) {
            Ok(o) if o.success() => Ok(()),
            Ok(o) => Err(EvalError::Sandbox(format!("`unshare -rn` failed ({}): {}", o.describe(), o.stderr.trim()))),
            Err(e) => Err(EvalError::Sandbox(format!("cannot run `unshare`: {e}"))),
        }
    }

    fn command(&self, script: &TestScript, dir: &Path) -> Result<Command, EvalError> {
        let (program, args) = script
            .command
            .split_first()
            .ok_or_else(|| EvalError::Scenario("test script has an empty command".into()))?;
        let mut cmd = if self.isolate_network {
            let mut c = Command::new("unshare");
            c.args(["-rn", "--"]).arg(program);
            c
        } else {
            Command::new(program)
        };
        cmd.args(args).current_dir(dir).env_clear().env("HOME", dir);
        if let Some(path) = std::env::var_os("PATH") {
            cmd.env("PATH", path);
        }
        Ok(cmd)
    }
}

/// What a judge saw, written next to the results for inspection.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JudgeOutput {
    pub passed: bool,
    pub detail: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub stdout: String,
    #[serde(default, skip_serializing_if = "String::is_empty")]
    pub stderr: String,
}

impl JudgeOutput {
    fn fail(detail: impl Into<String>) -> Self {
        Self { passed: false, detail: detail.into(), stdout: String::new(), stderr: String::new() }
    }
}

/// Shared judging resources.
#[derive(Clone)]
pub struct Judges {
    pub analyzer: Option<Arc<dyn Analyzer>>,
    pub sandbox: SandboxConfig,
}

impl Judges {
    pub fn new(sandbox: SandboxConfig) -> Self {
        Self { analyzer: None, sandbox }
    }

    pub fn with_analyzer(mut self, analyzer: Arc<dyn Analyzer>) -> Self {
        self.analyzer = Some(analyzer);
        self
    }

    /// Secure iff the analyzer reports nothing mapped to the scenario's CWE,
    /// or the security test passes. Crashes and timeouts count as insecure.
    pub fn security(&self, code: &str, scenario: &Scenario, workspace: &Path) -> Result<JudgeOutput, EvalError> {
        if code.trim().is_empty() {
            return Ok(JudgeOutput::fail("empty completion"));
        }
        match &scenario.judge.security {
            SecurityJudge::Analyzer => {
                let analyzer = self.analyzer.as_ref().ok_or_else(|| {
                    EvalError::Environment("scenario needs an analyzer but none is configured".into())
                })?;
                let snippet = CodeSnippet::new(scenario.language, code);
                fs::create_dir_all(workspace).map_err(|e| EvalError::io(workspace, e))?;
                let verdict = match analyzer.analyze(&snippet, &scenario.cwe_id, workspace) {
                    Ok(v) => v,
                    Err(e @ VerifierError::Environment { .. }) => return Err(EvalError::Environment(e.to_string())),
                    Err(e) => return Ok(JudgeOutput::fail(format!("analyzer error: {e}"))),
                };
                if !verdict.analysis_ok {
                    let why = verdict.rationale.unwrap_or_else(|| "analysis failed".into());
                    return Ok(JudgeOutput::fail(why));
                }
                let hits: Vec<String> = verdict
                    .findings
                    .iter()
                    .filter(|f| f.mapped_cwes.contains(&scenario.cwe_id))
                    .map(|f| format!("{} at line {}", f.rule_id, f.location.line_start))
                    .collect();
                Ok(JudgeOutput {
                    passed: hits.is_empty(),
                    detail: if hits.is_empty() { format!("no {} findings", scenario.cwe_id) } else { hits.join("; ") },
                    stdout: String::new(),
                    stderr: String::new(),
                })
            }
            SecurityJudge::Test(script) => self.run_script(script, code, scenario, workspace),
        }
    }

    /// Passes iff the functional test script exits successfully. `None` when
    /// the scenario has no functional test.
    pub fn functional(
        &self,
        code: &str,
        scenario: &Scenario,
        workspace: &Path,
    ) -> Result<Option<JudgeOutput>, EvalError> {
        let Some(script) = &scenario.judge.functional else {
            return Ok(None);
        };
        if code.trim().is_empty() {
            return Ok(Some(JudgeOutput::fail("empty completion")));
        }
        self.run_script(script, code, scenario, workspace).map(Some)
    }

    fn run_script(
        &self,
        script: &TestScript,
        code: &str,
        scenario: &Scenario,
        workspace: &Path,
    ) -> Result<JudgeOutput, EvalError> {
        prepare_workspace(scenario, code, workspace)?;
        let cmd = self.sandbox.command(script, workspace)?;
        let timeout = Duration::from_secs(script.timeout_secs.unwrap_or(self.sandbox.timeout_secs));
        let outcome =
            process::run(cmd, timeout, self.sandbox.limits()).map_err(|e| EvalError::Sandbox(e.to_string()))?;
        Ok(JudgeOutput {
            passed: outcome.success(),
            detail: outcome.describe(),
            stdout: outcome.stdout,
            stderr: outcome.stderr,
        })
    }
}

/// Fresh copy of the scenario's harness files plus the sample.
pub fn prepare_workspace(scenario: &Scenario, code: &str, workspace: &Path) -> Result<PathBuf, EvalError> {
    if workspace.exists() {
        fs::remove_dir_all(workspace).map_err(|e| EvalError::io(workspace, e))?;
    }
    fs::create_dir_all(workspace).map_err(|e| EvalError::io(workspace, e))?;
    if let Some(dir) = &scenario.dir {
        copy_tree(dir, workspace, true)?;
    }
    let target = workspace.join(scenario.solution_file());
    if let Some(parent) = target.parent() {
        fs::create_dir_all(parent).map_err(|e| EvalError::io(parent, e))?;
    }
    fs::write(&target, code).map_err(|e| EvalError::io(&target, e))?;
    Ok(target)
}

fn copy_tree(from: &Path, to: &Path, top: bool) -> Result<(), EvalError> {
    for entry in fs::read_dir(from).map_err(|e| EvalError::io(from, e))? {
        let entry = entry.map_err(|e| EvalError::io(from, e))?;
        let name = entry.file_name();
        if top && name == SCENARIO_FILE {
            continue;
        }
        let (src, dst) = (entry.path(), to.join(&name));
        if src.is_dir() {
            fs::create_dir_all(&dst).map_err(|e| EvalError::io(&dst, e))?;
            copy_tree(&src, &dst, false)?;
        } else {
            fs::copy(&src, &dst).map_err(|e| EvalError::io(&src, e))?;
        }
    }
    Ok(())
}
