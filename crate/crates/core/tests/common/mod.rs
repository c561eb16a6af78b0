//! Fixture plumbing shared by the integration tests: paths, the scripted
//! provider behind the recorded transcripts, and the analyzer that records
//! golden tool output.
#![allow(dead_code)]

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use cwesynth::config::RunConfig;
use cwesynth::dataset::{build_examples, generate_instructions, package_dataset, PackagedDataset};
use cwesynth::gateway::cache::sha256_hex;
use cwesynth::gateway::{CodeSnippet, CompletionRequest, Gateway, GenParams};
use cwesynth::seeds::{load_seed_corpus, CweId, CwePair, CweSeedSet};
use cwesynth::synth::{select_outputs, Pipeline, PipelineState, Scheme, Selected, StateStore, SynthError};
use cwesynth::verifier::{
    write_archive, Analyzer, ArchivedAnalyzer, ArchivedOutcome, RuleMap, Tool, Verdict, VerifierError,
};

pub fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../fixtures")
}

pub fn pipeline_dir() -> PathBuf {
    fixtures().join("pipeline")
}

pub const FIXTURE_PAIRS: [&str; 3] = ["CWE-089:python", "CWE-079:javascript", "CWE-078:c"];

pub fn fixture_pairs() -> Vec<CwePair> {
    FIXTURE_PAIRS.iter().map(|p| p.parse().unwrap()).collect()
}

pub fn seeds() -> CweSeedSet {
    load_seed_corpus(&fixtures().join("seeds")).unwrap()
}

/// The pipeline fixture config with its state redirected to `state_dir`.
pub fn pipeline_config(state_dir: &Path) -> RunConfig {
    let path = pipeline_dir().join("config.toml");
    let text = std::fs::read_to_string(&path).unwrap();
    let vars = [("CWESYNTH_STATE_DIR".to_string(), state_dir.display().to_string())];
    RunConfig::from_toml(&text, &path, &pipeline_dir(), vars).unwrap()
}

pub fn bench_dir() -> PathBuf {
    fixtures().join("bench")
}

/// Provider name of the model whose answers the bench transcripts hold.
pub const BENCH_MODEL: &str = "codellama";

pub fn bench_config() -> RunConfig {
    let path = bench_dir().join("config.toml");
    let text = std::fs::read_to_string(&path).unwrap();
    RunConfig::from_toml(&text, &path, &bench_dir(), Vec::<(String, String)>::new()).unwrap()
}

/// Runs both schemes over the fixture pairs from the recorded transcripts
/// and analyzer archive, persisting into `store`.
pub fn run_replay(cfg: &RunConfig, store: Arc<StateStore>) -> Result<(), SynthError> {
    let seeds = seeds();
    let ledger = cfg.usage_ledger().unwrap();
    let providers = cfg.synth_providers(&ledger).unwrap();
    let verifier = Arc::new(cfg.verifier(seeds.pairs()).unwrap());
    let pipeline = Pipeline::new(providers, verifier, store, cfg.synth.clone())?;
    for scheme in [Scheme::VulSecure, Scheme::SecureOnly] {
        let report = pipeline.run(scheme, &seeds, &fixture_pairs())?;
        assert!(report.aborted.is_empty(), "aborted pairs: {:?}", report.aborted);
    }
    Ok(())
}

/// Outputs of both schemes as one selection.
pub fn selection(state: &PipelineState, cfg: &RunConfig) -> Selected {
    Selected {
        pairs: select_outputs(state, Scheme::VulSecure, &cfg.synth).pairs,
        secure: select_outputs(state, Scheme::SecureOnly, &cfg.synth).secure,
    }
}

/// Instructions through the configured gateway, then packaging.
pub fn build_dataset(state: &PipelineState, cfg: &RunConfig) -> PackagedDataset {
    let ledger = Arc::new(cwesynth::gateway::UsageLedger::in_memory());
    let (gw, params) = cfg.instruction_gateway(ledger).unwrap();
    build_dataset_with(state, cfg, &gw, &params)
}

pub fn build_dataset_with(state: &PipelineState, cfg: &RunConfig, gw: &Gateway, params: &GenParams) -> PackagedDataset {
    let mut selected = selection(state, cfg);
    let (instructions, failed) = generate_instructions(&selected, gw, params);
    if !failed.is_empty() {
        selected.pairs.retain(|(_, s)| instructions.contains_key(&s.record_id));
        selected.secure.retain(|s| instructions.contains_key(&s.record_id));
    }
    let examples = build_examples(&selected, &instructions, cfg.dataset.mask_granularity).unwrap();
    package_dataset(examples, &cfg.dataset.format_id, Some(cfg.rng_seed)).unwrap()
}

/// How each tool judges a scripted snippet.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Form {
    /// Flagged by both tools.
    VulnBoth,
    /// Flagged by CodeQL only.
    VulnCodeQl,
    /// Flagged by SonarQube only.
    VulnSonar,
    /// Clean for both.
    Safe,
    /// Clean code that SonarQube still flags.
    SafeSonarFlag,
}

impl Form {
    pub fn flagged(self, tool: Tool) -> bool {
        matches!(
            (self, tool),
            (Form::VulnBoth, _)
                | (Form::VulnCodeQl, Tool::CodeQl)
                | (Form::VulnSonar | Form::SafeSonarFlag, Tool::SonarQube)
        )
    }
}

fn roll(parts: &[&str]) -> u32 {
    let h = sha256_hex(parts.join("|").as_bytes());
    u32::from_str_radix(&h[..8], 16).unwrap() % 100
}

/// Snippet text for `form` in the fixture pair `cwe`. `base` names the
/// function, `i` makes it unique, `style` varies it per provider.
pub fn snippet(cwe: &str, form: Form, base: &str, i: u32, style: usize) -> String {
    match cwe {
        "CWE-089" => {
            let c = ["cur", "cursor"][style];
            let body = match form {
                Form::VulnBoth => {
                    format!("    {c}.execute(\"SELECT id, email FROM users WHERE name = '\" + name + \"'\")\n")
                }
                Form::VulnCodeQl => format!(
                    "    query = f\"SELECT id, email FROM users WHERE name = '{{name}}'\"\n    {c}.execute(query)\n"
                ),
                Form::VulnSonar => {
                    format!("    {c}.execute(\"SELECT id, email FROM users WHERE name = '%s'\" % name)\n")
                }
                Form::Safe => format!("    {c}.execute(\"SELECT id, email FROM users WHERE name = ?\", (name,))\n"),
                Form::SafeSonarFlag => format!(
                    "    query = \"SELECT id, email FROM users WHERE name = ?\"\n    {c}.execute(query, [name])\n"
                ),
            };
            format!("def {base}_{i}({c}, name):\n{body}    return {c}.fetchone()\n")
        }
        "CWE-079" => {
            let r = ["res", "response"][style];
            let (head, body) = match form {
                Form::VulnBoth => ("", format!("  {r}.send(\"<p>Hello \" + req.query.name + \"</p>\");\n")),
                Form::VulnCodeQl => ("", format!("  {r}.send(`<p>Hello ${{req.query.name}}</p>`);\n")),
                Form::VulnSonar => ("", format!("  {r}.write(\"<p>\" + req.query.name + \"</p>\");\n  {r}.end();\n")),
                Form::Safe => (
                    "const escapeHtml = require(\"escape-html\");\n\n",
                    format!("  {r}.send(\"<p>Hello \" + escapeHtml(String(req.query.name)) + \"</p>\");\n"),
                ),
                Form::SafeSonarFlag => {
                    ("", format!("  {r}.type(\"text/plain\").send(\"Hello \" + String(req.query.name));\n"))
                }
            };
            format!("{head}function {base}_{i}(req, {r}) {{\n{body}}}\n\napp.get(\"/{base}\", {base}_{i});\n")
        }
        "CWE-078" => {
            let v = ["dir", "path"][style];
            let body = match form {
                Form::VulnBoth => format!(
                    "    char cmd[256];\n    snprintf(cmd, sizeof cmd, \"ls -l %s\", {v});\n    return system(cmd);\n"
                ),
                Form::VulnCodeQl => format!(
                    "    char cmd[256] = \"ls -l \";\n    strncat(cmd, {v}, sizeof cmd - strlen(cmd) - 1);\n    FILE *p = popen(cmd, \"r\");\n    return p ? pclose(p) : -1;\n"
                ),
                Form::VulnSonar => format!(
                    "    char cmd[256];\n    sprintf(cmd, \"ls -l '%s'\", {v});\n    return system(cmd);\n"
                ),
                Form::Safe => format!(
                    "    pid_t pid = fork();\n    if (pid == 0) {{\n        execlp(\"ls\", \"ls\", \"-l\", \"--\", {v}, (char *)NULL);\n        _exit(127);\n    }}\n    int status;\n    waitpid(pid, &status, 0);\n    return status;\n"
                ),
                Form::SafeSonarFlag => format!(
                    "    char *const argv[] = {{\"ls\", \"-l\", \"--\", (char *){v}, NULL}};\n    pid_t pid = fork();\n    if (pid == 0) {{\n        execvp(\"ls\", argv);\n        _exit(127);\n    }}\n    int status;\n    waitpid(pid, &status, 0);\n    return status;\n"
                ),
            };
            format!(
                "#include <stdio.h>\n#include <stdlib.h>\n#include <string.h>\n#include <sys/wait.h>\n#include <unistd.h>\n\nint {base}_{i}(const char *{v}) {{\n{body}}}\n"
            )
        }
        other => panic!("no scripted snippets for {other}"),
    }
}

fn fence(cwe: &str) -> &'static str {
    match cwe {
        "CWE-089" => "python",
        "CWE-079" => "javascript",
        "CWE-078" => "c",
        other => panic!("no scripted snippets for {other}"),
    }
}

fn base_names(cwe: &str) -> (&'static str, &'static str) {
    match cwe {
        "CWE-089" => ("find_user", "lookup_account"),
        "CWE-079" => ("greet", "welcome"),
        "CWE-078" => ("list_dir", "show_dir"),
        other => panic!("no scripted snippets for {other}"),
    }
}

fn first_cwe(prompt: &str) -> String {
    let at = prompt.find("CWE-").expect("prompt names a CWE");
    let digits: String = prompt[at + 4..].chars().take_while(char::is_ascii_digit).collect();
    CweId::parse(&format!("CWE-{digits}")).unwrap().to_string()
}

/// Index in the first `_<digits>(` of `code`.
fn function_index(code: &str) -> u32 {
    let b = code.as_bytes();
    for (p, _) in code.match_indices('(') {
        let mut s = p;
        while s > 0 && b[s - 1].is_ascii_digit() {
            s -= 1;
        }
        if s < p && s > 0 && b[s - 1] == b'_' {
            return code[s..p].parse().unwrap();
        }
    }
    panic!("no indexed function in {code}")
}

/// Scripted provider behaviour; every snippet it emits is registered with
/// its form so the recording analyzer knows the intended verdicts.
#[derive(Clone, Default)]
pub struct Script {
    forms: Arc<Mutex<HashMap<String, Form>>>,
}

impl Script {
    fn emit(&self, code: String, form: Form) -> String {
        let mut forms = self.forms.lock().unwrap();
        if let Some(prev) = forms.insert(code.trim_end().to_string(), form) {
            assert_eq!(prev, form, "one snippet scripted with two forms");
        }
        code
    }

    pub fn form_of(&self, code: &str) -> Option<Form> {
        self.forms.lock().unwrap().get(code.trim_end()).copied()
    }

    pub fn lookup(&self) -> FormLookup {
        let script = self.clone();
        Arc::new(move |code| script.form_of(code))
    }

    pub fn reply(&self, provider: &str, req: &CompletionRequest) -> String {
        let style = usize::from(provider != "gpt");
        let i = req.sample_index;
        let p = &req.prompt;
        let fenced = |cwe: &str, code: String| format!("Here is the code:\n\n```{}\n{code}```\n", fence(cwe));
        if p.starts_with("Create a single, very short") {
            return instruction_reply(p, i);
        }
        let cwe = first_cwe(p);
        let (vul_base, sec_base) = base_names(&cwe);
        let idx = i.to_string();
        if p.contains("Can you FIX the code") {
            let parent = function_index(p.split("The Vulnerable Code:").nth(1).unwrap());
            let r = roll(&[provider, &cwe, "fix", &parent.to_string(), &idx]);
            let form = match r {
                0..=29 => Form::Safe,
                30..=64 => Form::VulnCodeQl,
                _ => Form::SafeSonarFlag,
            };
            return fenced(&cwe, self.emit(snippet(&cwe, form, vul_base, parent, style), form));
        }
        if p.contains("generate a vulnerable code example") {
            if provider == "claude" && cwe == "CWE-078" && i == 9 {
                return "I can't help with writing deliberately vulnerable code.".into();
            }
            let form = match roll(&[provider, &cwe, "vul", &idx]) {
                0..=39 => Form::VulnBoth,
                40..=59 => Form::VulnCodeQl,
                60..=69 => Form::VulnSonar,
                _ => Form::Safe,
            };
            return fenced(&cwe, self.emit(snippet(&cwe, form, vul_base, i, style), form));
        }
        if p.contains("generate a secure and runnable code example") {
            let form = match roll(&[provider, &cwe, "secure", &idx]) {
                0..=59 => Form::Safe,
                60..=69 => Form::SafeSonarFlag,
                _ => Form::VulnBoth,
            };
            return fenced(&cwe, self.emit(snippet(&cwe, form, sec_base, i, style), form));
        }
        panic!("unscripted prompt: {p}")
    }
}

fn instruction_reply(prompt: &str, attempt: u32) -> String {
    let (lang, text) = if prompt.contains("```python") {
        ("python", "Write a Python function that returns a user's id and email given their name.")
    } else if prompt.contains("```javascript") {
        ("javascript", "Write a JavaScript Express handler that greets the visitor by the name in the query string.")
    } else if prompt.contains("```c") {
        ("c", "Write a C function that prints a detailed listing of a directory.")
    } else {
        panic!("instruction prompt without a known fence")
    };
    // every fourth record first answers too verbosely and without the language
    if attempt == 0 && roll(&[lang, prompt]).is_multiple_of(4) {
        return "Implement a small helper. It takes one argument. It returns the result.".into();
    }
    text.into()
}

pub type FormLookup = Arc<dyn Fn(&str) -> Option<Form> + Send + Sync>;

/// Archives scripted verdicts under `root`, then answers from the archive so
/// recording and replay parse the same bytes.
pub struct RecordingAnalyzer {
    pub tool: Tool,
    pub root: PathBuf,
    pub forms: FormLookup,
    pub rules: Arc<RuleMap>,
}

impl RecordingAnalyzer {
    fn rule_for(&self, cwe: &CweId, language: &str) -> String {
        let prefix = match (self.tool, language) {
            (Tool::CodeQl, "python") => "py/",
            (Tool::CodeQl, "javascript") => "js/",
            (Tool::CodeQl, "c") => "cpp/",
            (Tool::SonarQube, "python") => "pythonsecurity:",
            (Tool::SonarQube, "javascript") => "jssecurity:",
            (t, l) => panic!("no {t} rule for {l}"),
        };
        let rules = self.rules.rules_for(self.tool, cwe);
        rules
            .iter()
            .find(|r| r.starts_with(prefix))
            .or(rules.first())
            .unwrap_or_else(|| panic!("no {} rule maps to {cwe}", self.tool))
            .to_string()
    }
}

impl Analyzer for RecordingAnalyzer {
    fn tool(&self) -> Tool {
        self.tool
    }

    fn analyze(&self, snippet: &CodeSnippet, cwe: &CweId, workspace: &Path) -> Result<Verdict, VerifierError> {
        let form = (self.forms)(&snippet.code).unwrap_or_else(|| panic!("unscripted snippet:\n{}", snippet.code));
        let findings =
            if form.flagged(self.tool) { vec![(self.rule_for(cwe, snippet.language.id()), 2)] } else { vec![] };
        write_archive(&self.root, self.tool, snippet, &ArchivedOutcome::Findings(findings)).unwrap();
        ArchivedAnalyzer::new(self.tool, &self.root, self.rules.clone()).analyze(snippet, cwe, workspace)
    }
}

/// Stage counts per pair as plain numbers for golden files.
pub fn stage_counts(state: &PipelineState, scheme: Scheme) -> BTreeMap<String, BTreeMap<String, usize>> {
    let mut out: BTreeMap<String, BTreeMap<String, usize>> = BTreeMap::new();
    for r in state.records.values().filter(|r| r.scheme == scheme) {
        *out.entry(r.pair.to_string()).or_default().entry(r.stage.to_string()).or_default() += 1;
    }
    out
}

pub fn pair_set(pairs: &[CwePair]) -> BTreeSet<CwePair> {
    pairs.iter().cloned().collect()
}
