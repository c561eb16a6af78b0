//! Evaluation harness: sample a model on security scenarios, judge every
//! sample for security (and functionality where a test exists) and compute
//! secure ratios, `Metric@k` and significance against another model.

pub mod judge;
pub mod metrics;
pub mod report;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use judge::{JudgeOutput, Judges, SandboxConfig};
pub use metrics::{fisher_exact, metric_at_k, secure_ratio, MetricError, Ratio};
pub use report::{compare, Comparison, MetricReport};

use crate::gateway::{extract_code, Gateway, GatewayError, GenParams};
use crate::seeds::{CweId, Language};

pub const SCENARIO_FILE: &str = "scenario.json";

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("scenario: {0}")]
    Scenario(String),
    #[error("sandbox setup failed: {0}")]
    Sandbox(String),
    #[error("environment: {0}")]
    Environment(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

impl EvalError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        EvalError::Io { path: path.to_path_buf(), source }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PromptKind {
    /// Code prefix to be continued; an unfenced reply is appended to it.
    Prefix,
    /// Natural-language task; the reply's code block is the sample.
    #[default]
    Instruction,
}

/// A command run in the sample workspace; exit status 0 means pass.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TestScript {
    pub command: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_secs: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SecurityJudge {
    /// Static analysis; secure iff nothing maps to the scenario's CWE.
    Analyzer,
    /// Security test script.
    Test(TestScript),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct JudgeConfig {
    pub security: SecurityJudge,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional: Option<TestScript>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KParams {
    pub n_samples: u32,
    pub temperature: f64,
}

impl Default for KParams {
    fn default() -> Self {
        Self { n_samples: 100, temperature: 0.8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub scenario_id: String,
    pub cwe_id: CweId,
    pub language: Language,
    pub prompt: String,
    #[serde(default)]
    pub prompt_kind: PromptKind,
    pub judge: JudgeConfig,
    #[serde(default)]
    pub k_params: KParams,
    /// Where the sample is written in the workspace; `solution.<ext>` by default.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub solution_file: Option<String>,
    /// Directory holding the scenario's harness files.
    #[serde(skip)]
    pub dir: Option<PathBuf>,
}

impl Scenario {
    pub fn solution_file(&self) -> String {
        self.solution_file.clone().unwrap_or_else(|| format!("solution.{}", self.language.file_extension()))
    }

    /// The code to judge for a model reply.
    pub fn assemble(&self, reply: &str) -> String {
        if let Ok(snippet) = extract_code(reply, self.language) {
            return snippet.code;
        }
        match self.prompt_kind {
            PromptKind::Prefix => format!("{}{}", self.prompt, reply),
            PromptKind::Instruction => reply.to_string(),
        }
    }
}

/// Loads `<dir>/<name>/scenario.json` for every subdirectory, sorted by id.
pub fn load_scenarios(dir: &Path) -> Result<Vec<Scenario>, EvalError> {
    let mut out: Vec<Scenario> = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| EvalError::io(dir, e))? {
        let path = entry.map_err(|e| EvalError::io(dir, e))?.path();
        let file = path.join(SCENARIO_FILE);
        if !file.is_file() {
            continue;
        }
        let text = fs::read_to_string(&file).map_err(|e| EvalError::io(&file, e))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        let mut s: Scenario = serde_path_to_error::deserialize(&mut de)
            .map_err(|e| EvalError::Scenario(format!("{}: {e}", file.display())))?;
        if s.scenario_id.trim().is_empty() || s.k_params.n_samples == 0 {
            return Err(EvalError::Scenario(format!("{}: empty scenario_id or zero samples", file.display())));
        }
        s.dir = Some(path);
        out.push(s);
    }
    out.sort_by(|a, b| a.scenario_id.cmp(&b.scenario_id));
    let mut seen = BTreeSet::new();
    for s in &out {
        if !seen.insert(&s.scenario_id) {
            return Err(EvalError::Scenario(format!("duplicate scenario id {}", s.scenario_id)));
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub index: u32,
    pub code: String,
    pub secure: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional: Option<bool>,
    /// Set when no completion was obtained; the sample counts as failing.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub generation_error: Option<String>,
    /// Judge outputs, relative to the run's output directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub raw_judge_output_ref: Option<String>,
}

impl Sample {
    pub fn func_secure(&self) -> Option<bool> {
        self.functional.map(|f| f && self.secure)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub scenario_id: String,
    pub cwe_id: CweId,
    pub language: Language,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AbortedScenario {
    pub scenario_id: String,
    pub reason: String,
}

/// Everything a run produced; the input to reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub model: String,
    pub results: Vec<EvalResult>,
    #[serde(default)]
    pub aborted: Vec<AbortedScenario>,
}

impl EvalRun {
    pub fn load(path: &Path) -> Result<Self, EvalError> {
        let text = fs::read_to_string(path).map_err(|e| EvalError::io(path, e))?;
        let mut de = serde_json::Deserializer::from_str(&text);
        serde_path_to_error::deserialize(&mut de).map_err(|e| EvalError::Scenario(format!("{}: {e}", path.display())))
    }
}

/// Overrides applied to every scenario's `k_params`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalOverrides {
    pub n_samples: Option<u32>,
    pub temperature: Option<f64>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawJudgeRecord {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    generation_error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    security: Option<JudgeOutput>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    functional: Option<JudgeOutput>,
}

fn fatal(e: &GatewayError) -> bool {
    !e.is_exhaustion()
}

/// Samples and judges every scenario. Judge outputs go to
/// `<out_dir>/raw/<scenario>/<index>.json`; per-sample workspaces under
/// `<out_dir>/work` are removed afterwards. A scenario whose judges cannot be
/// set up is reported as aborted rather than scored.
pub fn run_eval(
    gateway: &Gateway,
    base: &GenParams,
    scenarios: &[Scenario],
    judges: &Judges,
    overrides: EvalOverrides,
    out_dir: &Path,
) -> Result<EvalRun, EvalError> {
    let needs_sandbox =
        scenarios.iter().any(|s| s.judge.functional.is_some() || matches!(s.judge.security, SecurityJudge::Test(_)));
    let sandbox_ok = if needs_sandbox { judges.sandbox.check() } else { Ok(()) };
    let outcomes: Vec<Result<EvalResult, EvalError>> = scenarios
        .par_iter()
        .map(|s| match &sandbox_ok {
            Err(e) if s.judge.functional.is_some() || matches!(s.judge.security, SecurityJudge::Test(_)) => {
                Err(EvalError::Sandbox(e.to_string()))
            }
            _ => run_scenario(gateway, base, s, judges, overrides, out_dir),
        })
        .collect();
    let mut run = EvalRun { model: base.model_id.clone(), results: Vec::new(), aborted: Vec::new() };
    for (s, o) in scenarios.iter().zip(outcomes) {
        match o {
            Ok(r) => run.results.push(r),
            Err(EvalError::Gateway(e)) if fatal(&e) => return Err(EvalError::Gateway(e)),
            Err(e) => {
                log::error!("scenario {} aborted: {e}", s.scenario_id);
                run.aborted.push(AbortedScenario { scenario_id: s.scenario_id.clone(), reason: e.to_string() });
            }
        }
    }
    let _ = fs::remove_dir_all(out_dir.join("work"));
    Ok(run)
}

fn run_scenario(
    gateway: &Gateway,
    base: &GenParams,
    s: &Scenario,
    judges: &Judges,
    overrides: EvalOverrides,
    out_dir: &Path,
) -> Result<EvalResult, EvalError> {
    let n = overrides.n_samples.unwrap_or(s.k_params.n_samples);
    let params = GenParams {
        temperature: overrides.temperature.unwrap_or(s.k_params.temperature),
        n_samples: n,
        ..base.clone()
    };
    let raw_dir = out_dir.join("raw").join(&s.scenario_id);
    fs::create_dir_all(&raw_dir).map_err(|e| EvalError::io(&raw_dir, e))?;
    let tag = format!("{}/eval", s.scenario_id);
    let samples: Vec<Result<Sample, EvalError>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let reply = match gateway.complete(&s.prompt, &params, i, &tag) {
                Ok(r) => match r.error {
                    None => Ok(r.text),
                    Some(e) => Err(e),
                },
                Err(e) if fatal(&e) => return Err(EvalError::Gateway(e)),
                Err(e) => Err(e.to_string()),
            };
            let mut raw = RawJudgeRecord { generation_error: None, security: None, functional: None };
            let sample = match reply {
                Err(e) => {
                    raw.generation_error = Some(e.clone());
                    Sample {
                        index: i,
                        code: String::new(),
                        secure: false,
                        functional: s.judge.functional.as_ref().map(|_| false),
                        generation_error: Some(e),
                        raw_judge_output_ref: None,
                    }
                }
                Ok(text) => {
                    let code = s.assemble(&text);
                    let work = out_dir.join("work").join(&s.scenario_id).join(i.to_string());
                    let sec = judges.security(&code, s, &work.join("security"))?;
                    let func = judges.functional(&code, s, &work.join("functional"))?;
                    let _ = fs::remove_dir_all(&work);
                    let sample = Sample {
                        index: i,
                        code,
                        secure: sec.passed,
                        functional: func.as_ref().map(|f| f.passed),
                        generation_error: None,
                        raw_judge_output_ref: None,
                    };
                    raw.security = Some(sec);
                    raw.functional = func;
                    sample
                }
            };
            let rel = format!("raw/{}/{i}.json", s.scenario_id);
            let path = out_dir.join(&rel);
            let body = serde_json::to_string_pretty(&raw).expect("raw record serializes");
            fs::write(&path, body).map_err(|e| EvalError::io(&path, e))?;
            Ok(Sample { raw_judge_output_ref: Some(rel), ..sample })
        })
        .collect();
    Ok(EvalResult {
        scenario_id: s.scenario_id.clone(),
        cwe_id: s.cwe_id.clone(),
        language: s.language,
        samples: samples.into_iter().collect::<Result<_, _>>()?,
    })
}
