//! Run configuration shared by every subcommand.
//!
//! A TOML file whose relative paths resolve against the file's directory.
//! Environment variables `CWESYNTH_<KEY>` and `CWESYNTH_<SECTION>__<KEY>`
//! override file values; command-line flags override both.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::dataset::masks::MaskGranularity;
use crate::dataset::similarity::DEFAULT_DEDUP_THRESHOLD;
use crate::eval::judge::SandboxConfig;
use crate::gateway::{CacheMode, Gateway, GatewayError, GenParams, Pricing, ProviderConfig, UsageLedger};
use crate::seeds::CwePair;
use crate::synth::{SchemeConfig, StateStore, StoreError, SynthProvider, USAGE_FILE};
use crate::verifier::{
    Analyzer, ArchivedAnalyzer, CodeQlAnalyzer, RuleMap, SonarQubeAnalyzer, SupportMatrix, Tool, Verifier,
    VerifierError,
};

pub const ENV_PREFIX: &str = "CWESYNTH_";
/// `CWESYNTH_CONFIG` selects the config file.
pub const CONFIG_ENV_KEY: &str = "CONFIG";

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error("environment variable {var}: {message}")]
    Env { var: String, message: String },
    #[error("{0}")]
    Invalid(String),
    #[error(transparent)]
    Gateway(#[from] GatewayError),
    #[error(transparent)]
    Verifier(#[from] VerifierError),
    #[error(transparent)]
    Store(#[from] StoreError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AnalyzerMode {
    /// Run the installed tools.
    #[default]
    Live,
    /// Replay archived tool output from `archive_dir`.
    Archive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalyzerConfig {
    pub mode: AnalyzerMode,
    pub codeql: String,
    /// Overrides the default security-extended suite; `{lang}` is expanded.
    pub codeql_queries: Option<String>,
    pub codeql_threads: u32,
    pub enable_sonarqube: bool,
    pub sonar_scanner: String,
    pub sonar_host: String,
    pub sonar_token_env: Option<String>,
    /// SonarQube support table; the bundled one when unset.
    pub sonarqube_pairs: Option<PathBuf>,
    /// Extra rule-to-CWE mapping files layered over the bundled tables.
    pub rule_files: Vec<PathBuf>,
    pub archive_dir: Option<PathBuf>,
    pub timeout_s: u64,
    pub max_parallel: usize,
}

impl Default for AnalyzerConfig {
    fn default() -> Self {
        Self {
            mode: AnalyzerMode::Live,
            codeql: "codeql".into(),
            codeql_queries: None,
            codeql_threads: 1,
            enable_sonarqube: true,
            sonar_scanner: "sonar-scanner".into(),
            sonar_host: "http://localhost:9000".into(),
            sonar_token_env: Some("SONAR_TOKEN".into()),
            sonarqube_pairs: None,
            rule_files: Vec::new(),
            archive_dir: None,
            timeout_s: crate::verifier::DEFAULT_TIMEOUT_SECS,
            max_parallel: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InstructionConfig {
    /// Provider name; the first configured provider when unset.
    pub provider: Option<String>,
    pub temperature: f64,
    pub max_tokens: u32,
}

impl Default for InstructionConfig {
    fn default() -> Self {
        Self { provider: None, temperature: 1.0, max_tokens: 256 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetConfig {
    pub format_id: String,
    pub mask_granularity: MaskGranularity,
    pub dedup_threshold: f64,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            format_id: "cwesynth-v1".into(),
            mask_granularity: MaskGranularity::Line,
            dedup_threshold: DEFAULT_DEDUP_THRESHOLD,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Replaces every scenario's `k_params.n_samples` when set.
    pub n_samples: Option<u32>,
    /// Replaces every scenario's `k_params.temperature` when set.
    pub temperature: Option<f64>,
    pub max_tokens: u32,
    pub sandbox: SandboxConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: None,
            temperature: None,
            max_tokens: GenParams::evaluation("").max_tokens,
            sandbox: SandboxConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub rng_seed: u64,
    pub seeds_dir: PathBuf,
    pub state_dir: PathBuf,
    pub datasets_dir: PathBuf,
    pub benchmarks_dir: PathBuf,
    pub reports_dir: PathBuf,
    /// Transcript cache directory; caching is off when unset.
    pub transcripts_dir: Option<PathBuf>,
    pub cache_mode: CacheMode,
    pub synth: SchemeConfig,
    pub instruction: InstructionConfig,
    pub analyzers: AnalyzerConfig,
    pub dataset: DatasetConfig,
    pub eval: EvalConfig,
    pub providers: Vec<ProviderConfig>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            rng_seed: 0,
            seeds_dir: "seeds".into(),
            state_dir: "state".into(),
            datasets_dir: "datasets".into(),
            benchmarks_dir: "bench".into(),
            reports_dir: "reports".into(),
            transcripts_dir: None,
            cache_mode: CacheMode::ReadWrite,
            synth: SchemeConfig::default(),
            instruction: InstructionConfig::default(),
            analyzers: AnalyzerConfig::default(),
            dataset: DatasetConfig::default(),
            eval: EvalConfig::default(),
            providers: Vec::new(),
        }
    }
}

/// Parses an override value as a TOML literal, falling back to a string so
/// paths and names need no quoting.
fn env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

/// Applies `CWESYNTH_*` overrides to a parsed document.
pub fn apply_env_overrides(
    table: &mut toml::Table,
    vars: impl IntoIterator<Item = (String, String)>,
) -> Result<(), ConfigError> {
    for (var, raw) in vars {
        let Some(key) = var.strip_prefix(ENV_PREFIX) else { continue };
        // names the file itself, not a key in it
        if key.is_empty() || key == CONFIG_ENV_KEY {
            continue;
        }
        let path: Vec<String> = key.split("__").map(str::to_ascii_lowercase).collect();
        let (leaf, sections) = path.split_last().expect("non-empty");
        let mut node = &mut *table;
        for s in sections {
            let entry = node.entry(s.clone()).or_insert_with(|| toml::Value::Table(toml::Table::new()));
            node = entry
                .as_table_mut()
                .ok_or_else(|| ConfigError::Env { var: var.clone(), message: format!("`{s}` is not a section") })?;
        }
        node.insert(leaf.clone(), env_value(&raw));
    }
    Ok(())
}

impl RunConfig {
    /// Reads `path`, applies environment overrides and resolves relative
    /// paths against the file's directory.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text =
            std::fs::read_to_string(path).map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, path, base, std::env::vars())
    }

    /// Defaults plus environment overrides, relative to the working directory.
    pub fn from_env() -> Result<Self, ConfigError> {
        Self::from_toml("", Path::new("<defaults>"), Path::new("."), std::env::vars())
    }

    pub fn from_toml(
        text: &str,
        origin: &Path,
        base: &Path,
        vars: impl IntoIterator<Item = (String, String)>,
    ) -> Result<Self, ConfigError> {
        let parse_err = |message: String| ConfigError::Parse { path: origin.to_path_buf(), message };
        let mut table: toml::Table = text.parse().map_err(|e: toml::de::Error| parse_err(e.to_string()))?;
        apply_env_overrides(&mut table, vars)?;
        let mut cfg: RunConfig =
            serde_path_to_error::deserialize(toml::Value::Table(table)).map_err(|e| parse_err(e.to_string()))?;
        cfg.resolve_paths(base);
        cfg.validate()?;
        Ok(cfg)
    }

    fn resolve_paths(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        for p in [
            &mut self.seeds_dir,
            &mut self.state_dir,
            &mut self.datasets_dir,
            &mut self.benchmarks_dir,
            &mut self.reports_dir,
        ] {
            fix(p);
        }
        let a = &mut self.analyzers;
        for p in [&mut self.transcripts_dir, &mut a.sonarqube_pairs, &mut a.archive_dir].into_iter().flatten() {
            fix(p);
        }
        a.rule_files.iter_mut().for_each(fix);
    }

    fn validate(&mut self) -> Result<(), ConfigError> {
        // one seed drives every stage
        self.synth.rng_seed = self.rng_seed;
        if self.synth.providers.is_empty() {
            self.synth.providers = self.providers.iter().map(|p| p.name.clone()).collect();
        }
        let mut names = std::collections::BTreeSet::new();
        for p in &self.providers {
            if !names.insert(p.name.as_str()) {
                return Err(ConfigError::Invalid(format!("provider `{}` is defined twice", p.name)));
            }
        }
        for n in &self.synth.providers {
            if !names.contains(n.as_str()) {
                return Err(ConfigError::Invalid(format!("synth uses unknown provider `{n}`")));
            }
        }
        if let Some(n) = &self.instruction.provider {
            if !names.contains(n.as_str()) {
                return Err(ConfigError::Invalid(format!("instruction uses unknown provider `{n}`")));
            }
        }
        if self.analyzers.mode == AnalyzerMode::Archive && self.analyzers.archive_dir.is_none() {
            return Err(ConfigError::Invalid("analyzer mode `archive` needs `archive_dir`".into()));
        }
        if self.analyzers.max_parallel == 0 {
            return Err(ConfigError::Invalid("analyzers.max_parallel must be at least 1".into()));
        }
        if !(self.dataset.dedup_threshold > 0.0 && self.dataset.dedup_threshold <= 1.0) {
            return Err(ConfigError::Invalid(format!(
                "dataset.dedup_threshold {} outside (0, 1]",
                self.dataset.dedup_threshold
            )));
        }
        Ok(())
    }

    /// Fails unless `dir` is an existing directory.
    pub fn require_dir(&self, what: &str, dir: &Path) -> Result<(), ConfigError> {
        if dir.is_dir() {
            Ok(())
        } else {
            Err(ConfigError::Invalid(format!("{what} `{}` is not a directory", dir.display())))
        }
    }

    pub fn provider(&self, name: &str) -> Result<&ProviderConfig, ConfigError> {
        self.providers
            .iter()
            .find(|p| p.name == name)
            .ok_or_else(|| ConfigError::Invalid(format!("unknown provider `{name}`")))
    }

    pub fn pricing(&self) -> BTreeMap<String, Pricing> {
        self.providers
            .iter()
            .map(|p| {
                (
                    p.name.clone(),
                    Pricing {
                        prompt_per_mtok: p.price_prompt_per_mtok,
                        completion_per_mtok: p.price_completion_per_mtok,
                    },
                )
            })
            .collect()
    }

    /// Usage ledger appending to the state directory.
    pub fn usage_ledger(&self) -> Result<Arc<UsageLedger>, ConfigError> {
        std::fs::create_dir_all(&self.state_dir)
            .map_err(|source| ConfigError::Io { path: self.state_dir.clone(), source })?;
        Ok(Arc::new(UsageLedger::with_file(&self.state_dir.join(USAGE_FILE))))
    }

    pub fn gateway(&self, provider: &ProviderConfig, ledger: Arc<UsageLedger>) -> Result<Gateway, ConfigError> {
        Ok(Gateway::from_config(provider, self.transcripts_dir.as_deref(), self.cache_mode, ledger)?)
    }

    /// One synthesis provider per entry of `synth.providers`.
    pub fn synth_providers(&self, ledger: &Arc<UsageLedger>) -> Result<Vec<SynthProvider>, ConfigError> {
        self.synth
            .providers
            .iter()
            .map(|name| {
                let pc = self.provider(name)?;
                let gw = self.gateway(pc, ledger.clone())?;
                Ok(SynthProvider::new(Arc::new(gw), GenParams::synthesis(&pc.model_id)))
            })
            .collect()
    }

    /// Gateway and parameters used to write instructions.
    pub fn instruction_gateway(&self, ledger: Arc<UsageLedger>) -> Result<(Gateway, GenParams), ConfigError> {
        let pc = match &self.instruction.provider {
            Some(n) => self.provider(n)?,
            None => self.providers.first().ok_or_else(|| ConfigError::Invalid("no providers configured".into()))?,
        };
        let params = GenParams {
            temperature: self.instruction.temperature,
            max_tokens: self.instruction.max_tokens,
            n_samples: 1,
            model_id: pc.model_id.clone(),
        };
        params.validate().map_err(ConfigError::Invalid)?;
        Ok((self.gateway(pc, ledger)?, params))
    }

    pub fn state_store(&self) -> Result<StateStore, ConfigError> {
        Ok(StateStore::open(&self.state_dir)?)
    }

    fn rules(&self) -> Result<Arc<RuleMap>, ConfigError> {
        let mut rules = RuleMap::bundled();
        for f in &self.analyzers.rule_files {
            rules.load_file(f)?;
        }
        Ok(Arc::new(rules))
    }

    fn analyzer(&self, tool: Tool, rules: &Arc<RuleMap>) -> Arc<dyn Analyzer> {
        let a = &self.analyzers;
        let timeout = Duration::from_secs(a.timeout_s);
        match (a.mode, tool) {
            (AnalyzerMode::Archive, _) => {
                Arc::new(ArchivedAnalyzer::new(tool, a.archive_dir.clone().expect("validated"), rules.clone()))
            }
            (AnalyzerMode::Live, Tool::CodeQl) => {
                let mut c =
                    CodeQlAnalyzer::new(&a.codeql, rules.clone()).with_timeout(timeout).with_threads(a.codeql_threads);
                if let Some(q) = &a.codeql_queries {
                    c = c.with_queries(q);
                }
                Arc::new(c)
            }
            (AnalyzerMode::Live, Tool::SonarQube) => {
                let token = a.sonar_token_env.as_ref().and_then(|v| std::env::var(v).ok());
                Arc::new(
                    SonarQubeAnalyzer::new(&a.sonar_scanner, &a.sonar_host, rules.clone())
                        .with_token(token)
                        .with_timeout(timeout),
                )
            }
        }
    }

    pub fn support_matrix(&self, pairs: &std::collections::BTreeSet<CwePair>) -> Result<SupportMatrix, ConfigError> {
        if !self.analyzers.enable_sonarqube {
            return Ok(SupportMatrix::from_parts(pairs, &Default::default()));
        }
        Ok(match &self.analyzers.sonarqube_pairs {
            Some(p) => SupportMatrix::with_sonar_file(pairs, p)?,
            None => SupportMatrix::for_corpus(pairs),
        })
    }

    /// Dual-analyzer verifier for the corpus `pairs`.
    pub fn verifier(&self, pairs: &std::collections::BTreeSet<CwePair>) -> Result<Verifier, ConfigError> {
        let rules = self.rules()?;
        let matrix = self.support_matrix(pairs)?;
        let mut v =
            Verifier::new(matrix, self.analyzers.max_parallel).with_analyzer(self.analyzer(Tool::CodeQl, &rules));
        if self.analyzers.enable_sonarqube {
            v = v.with_analyzer(self.analyzer(Tool::SonarQube, &rules));
        }
        Ok(v)
    }

    /// Analyzer used by analyzer-judged benchmark scenarios.
    pub fn eval_analyzer(&self) -> Result<Arc<dyn Analyzer>, ConfigError> {
        Ok(self.analyzer(Tool::CodeQl, &self.rules()?))
    }
}
