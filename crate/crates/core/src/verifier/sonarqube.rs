//! SonarQube driver: `sonar-scanner` uploads the harness project, then the
//! issue and hotspot lists are pulled from the server's web API.

use std::path::{Path, PathBuf};
use std::process::Command;
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::Deserialize;
use serde_json::Value;

use super::{parse_sonar_export, write_harness, Analyzer, RuleMap, Tool, Verdict, VerifierError};
use crate::gateway::cache::sha256_hex;
use crate::gateway::CodeSnippet;
use crate::process::{self, Limits};
use crate::seeds::{CweId, Language};

#[derive(Debug, Clone)]
pub struct SonarQubeAnalyzer {
    scanner: String,
    host_url: String,
    token: Option<String>,
    timeout: Duration,
    poll_interval: Duration,
    rules: Arc<RuleMap>,
}

impl SonarQubeAnalyzer {
    pub fn new(scanner: impl Into<String>, host_url: impl Into<String>, rules: Arc<RuleMap>) -> Self {
        Self {
            scanner: scanner.into(),
            host_url: host_url.into().trim_end_matches('/').to_string(),
            token: None,
            timeout: Duration::from_secs(super::DEFAULT_TIMEOUT_SECS),
            poll_interval: Duration::from_secs(1),
            rules,
        }
    }

    pub fn with_token(mut self, token: Option<String>) -> Self {
        self.token = token;
        self
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Self {
        self.timeout = timeout;
        self
    }

    pub fn with_poll_interval(mut self, interval: Duration) -> Self {
        self.poll_interval = interval;
        self
    }

    fn agent(&self) -> ureq::Agent {
        ureq::Agent::config_builder()
            .http_status_as_error(false)
            .timeout_global(Some(Duration::from_secs(30)))
            .build()
            .into()
    }

    fn get_json(&self, agent: &ureq::Agent, path: &str) -> Result<Value, String> {
        let mut req = agent.get(&format!("{}{}", self.host_url, path));
        if let Some(token) = &self.token {
            req = req.header("Authorization", &format!("Bearer {token}"));
        }
        let mut resp = req.call().map_err(|e| e.to_string())?;
        let status = resp.status().as_u16();
        let body = resp.body_mut().read_to_string().map_err(|e| e.to_string())?;
        if !(200..300).contains(&status) {
            return Err(format!("GET {path}: HTTP {status}"));
        }
        serde_json::from_str(&body).map_err(|e| format!("GET {path}: {e}"))
    }

    /// Waits for the background task, then returns the combined export.
    fn fetch_export(&self, task_id: &str, project_key: &str, deadline: Instant) -> Result<Value, String> {
        #[derive(Deserialize)]
        struct Task {
            status: String,
        }
        #[derive(Deserialize)]
        struct TaskEnvelope {
            task: Task,
        }
        let agent = self.agent();
        loop {
            let v = self.get_json(&agent, &format!("/api/ce/task?id={task_id}"))?;
            let env: TaskEnvelope = serde_json::from_value(v).map_err(|e| format!("ce/task: {e}"))?;
            match env.task.status.as_str() {
                "SUCCESS" => break,
                "FAILED" | "CANCELED" => return Err(format!("server-side analysis {}", env.task.status)),
                _ => {}
            }
            if Instant::now() >= deadline {
                return Err("timeout: waiting for server-side analysis".into());
            }
            std::thread::sleep(self.poll_interval);
        }
        let issues = self
            .get_json(&agent, &format!("/api/issues/search?componentKeys={project_key}&types=VULNERABILITY&ps=500"))?;
        let hotspots = self.get_json(&agent, &format!("/api/hotspots/search?projectKey={project_key}&ps=500"))?;
        Ok(serde_json::json!({
            "issues": issues.get("issues").cloned().unwrap_or(Value::Array(vec![])),
            "hotspots": hotspots.get("hotspots").cloned().unwrap_or(Value::Array(vec![])),
        }))
    }
}

fn properties(project_key: &str, host_url: &str, language: Language) -> String {
    let mut p = format!(
        "sonar.projectKey={project_key}\nsonar.projectName={project_key}\nsonar.sources=.\nsonar.host.url={host_url}\nsonar.scm.disabled=true\n"
    );
    match language {
        Language::C => p.push_str("sonar.cfamily.compile-commands=compile_commands.json\n"),
        Language::Java => p.push_str("sonar.java.binaries=.\n"),
        _ => {}
    }
    p
}

fn read_task_id(report: &Path) -> Option<String> {
    std::fs::read_to_string(report)
        .ok()?
        .lines()
        .find_map(|l| l.strip_prefix("ceTaskId=").map(|v| v.trim().to_string()))
}

impl Analyzer for SonarQubeAnalyzer {
    fn tool(&self) -> Tool {
        Tool::SonarQube
    }

    fn analyze(&self, snippet: &CodeSnippet, _cwe: &CweId, workspace: &Path) -> Result<Verdict, VerifierError> {
        let scanner = process::resolve_program(&self.scanner).ok_or_else(|| VerifierError::Environment {
            tool: Tool::SonarQube,
            message: format!("`{}` not found", self.scanner),
        })?;
        if snippet.code.trim().is_empty() {
            return Ok(Verdict::failed(Tool::SonarQube, "analysis failed: empty snippet"));
        }
        let started = Instant::now();
        let project = write_harness(snippet, &workspace.join("src"))?;
        let ws_id = workspace.canonicalize().unwrap_or_else(|_| workspace.to_path_buf());
        let project_key = format!("snippet-{}", &sha256_hex(ws_id.to_string_lossy().as_bytes())[..16]);
        let props = project.root.join("sonar-project.properties");
        std::fs::write(&props, properties(&project_key, &self.host_url, project.language))
            .map_err(|e| VerifierError::workspace(&props, e))?;

        let mut cmd = Command::new(scanner);
        cmd.current_dir(&project.root);
        if let Some(token) = &self.token {
            cmd.env("SONAR_TOKEN", token);
        }
        let out =
            process::run(cmd, self.timeout, Limits::default()).map_err(|e| VerifierError::workspace(workspace, e))?;
        std::fs::write(workspace.join("scanner.log"), format!("{}{}", out.stdout, out.stderr))
            .map_err(|e| VerifierError::workspace(workspace, e))?;
        if out.timed_out {
            return Ok(Verdict::failed(
                Tool::SonarQube,
                format!("timeout: scanner exceeded {}s", self.timeout.as_secs()),
            ));
        }
        if !out.success() {
            return Ok(Verdict::failed(Tool::SonarQube, format!("scanner failed ({})", out.describe())));
        }
        let report: PathBuf = project.root.join(".scannerwork/report-task.txt");
        let Some(task_id) = read_task_id(&report) else {
            return Ok(Verdict::failed(Tool::SonarQube, "scanner produced no report-task.txt"));
        };
        let export = match self.fetch_export(&task_id, &project_key, started + self.timeout) {
            Ok(v) => v,
            Err(e) => return Ok(Verdict::failed(Tool::SonarQube, e)),
        };
        let path = workspace.join("sonar-issues.json");
        let text = serde_json::to_string_pretty(&export).expect("json value serializes") + "\n";
        std::fs::write(&path, &text).map_err(|e| VerifierError::workspace(&path, e))?;
        match parse_sonar_export(&text, &self.rules) {
            Ok(findings) => Ok(Verdict::completed(Tool::SonarQube, findings).with_raw_output(path)),
            Err(e) => Ok(Verdict::failed(Tool::SonarQube, e.to_string()).with_raw_output(path)),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::io::{BufRead, BufReader, Write};
    use std::net::TcpListener;
    use std::os::unix::fs::PermissionsExt;

    /// Serves canned SonarQube API responses; returns the base URL.
    fn fake_server(polls_before_success: usize) -> String {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        std::thread::spawn(move || {
            let mut polls = 0;
            for stream in listener.incoming() {
                let Ok(mut stream) = stream else { break };
                let mut reader = BufReader::new(stream.try_clone().unwrap());
                let mut request_line = String::new();
                reader.read_line(&mut request_line).unwrap();
                loop {
                    let mut h = String::new();
                    if reader.read_line(&mut h).unwrap() == 0 || h == "\r\n" {
                        break;
                    }
                }
                let path = request_line.split_whitespace().nth(1).unwrap_or("").to_string();
                let body = if path.starts_with("/api/ce/task") {
                    polls += 1;
                    let status = if polls > polls_before_success { "SUCCESS" } else { "IN_PROGRESS" };
                    format!(r#"{{"task":{{"id":"T1","status":"{status}"}}}}"#)
                } else if path.starts_with("/api/issues/search") {
                    r#"{"total":1,"issues":[{"rule":"pythonsecurity:S3649","line":2,"textRange":{"startLine":2,"endLine":2},"message":"sql"}]}"#.to_string()
                } else if path.starts_with("/api/hotspots/search") {
                    r#"{"hotspots":[]}"#.to_string()
                } else {
                    String::from("{}")
                };
                let _ = write!(
                    stream,
                    "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{}",
                    body.len(),
                    body
                );
            }
        });
        format!("http://{addr}")
    }

    fn fake_scanner(dir: &Path) -> PathBuf {
        let path = dir.join("sonar-scanner");
        std::fs::write(
            &path,
            "#!/bin/sh\ngrep -q sonar.projectKey sonar-project.properties || exit 1\nmkdir -p .scannerwork\nprintf 'projectKey=x\\nceTaskId=T1\\n' > .scannerwork/report-task.txt\n",
        )
        .unwrap();
        std::fs::set_permissions(&path, std::fs::Permissions::from_mode(0o755)).unwrap();
        path
    }

    #[test]
    fn scanner_and_api_flow() {
        let bin = tempfile::tempdir().unwrap();
        let ws = tempfile::tempdir().unwrap();
        let a = SonarQubeAnalyzer::new(
            fake_scanner(bin.path()).to_str().unwrap(),
            fake_server(2),
            Arc::new(RuleMap::bundled()),
        )
        .with_token(Some("t".into()))
        .with_poll_interval(Duration::from_millis(10));
        let snip = CodeSnippet::new(Language::Python, "import sqlite3\ncur.execute('SELECT ' + name)");
        let cwe = CweId::parse("CWE-089").unwrap();
        let v = a.analyze(&snip, &cwe, ws.path()).unwrap();
        assert!(v.analysis_ok, "{:?}", v.rationale);
        assert!(v.flags(&cwe));
        assert!(ws.path().join("sonar-issues.json").is_file());
        assert!(ws.path().join("src/sonar-project.properties").is_file());
    }

    #[test]
    fn missing_scanner_is_environment_error() {
        let ws = tempfile::tempdir().unwrap();
        let a = SonarQubeAnalyzer::new("/nope/sonar-scanner", "http://127.0.0.1:9", Arc::new(RuleMap::bundled()));
        let err = a
            .analyze(&CodeSnippet::new(Language::Python, "x = 1"), &CweId::parse("CWE-089").unwrap(), ws.path())
            .unwrap_err();
        assert!(matches!(err, VerifierError::Environment { tool: Tool::SonarQube, .. }));
    }

    #[test]
    fn properties_per_language() {
        assert!(properties("k", "http://h", Language::C).contains("compile-commands"));
        assert!(properties("k", "http://h", Language::Java).contains("sonar.java.binaries"));
        assert!(!properties("k", "http://h", Language::Python).contains("binaries"));
    }
}
