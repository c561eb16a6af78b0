//! CWE seed documents: loading, validation and the CWE-language pair index.
//!
//! One JSON document per CWE lives in a seed directory. Each document carries
//! the CWE id, its title, the overall description and one or more code
//! examples with explanations. The set of generation targets (CWE-language
//! pairs) is derived from the example languages plus an optional explicit
//! `target_languages` list for CWEs whose exemplars are in another language.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

pub const SEED_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum SeedError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: field `{field}`: {message}")]
    Parse { path: PathBuf, field: String, message: String },
    #[error("duplicate {cwe_id}: defined in {first} and {second}")]
    Conflict { cwe_id: CweId, first: PathBuf, second: PathBuf },
    #[error("{0} has no code examples")]
    EmptySeed(CweId),
}

/// Programming languages the pipeline generates and verifies code for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Language {
    C,
    Go,
    Java,
    JavaScript,
    Python,
    Ruby,
}

impl Language {
    pub const ALL: [Language; 6] =
        [Language::C, Language::Go, Language::Java, Language::JavaScript, Language::Python, Language::Ruby];

    /// Human-facing name, as used in prompts and instructions.
    pub fn display_name(self) -> &'static str {
        match self {
            Language::C => "C",
            Language::Go => "Go",
            Language::Java => "Java",
            Language::JavaScript => "JavaScript",
            Language::Python => "Python",
            Language::Ruby => "Ruby",
        }
    }

    /// Lowercase identifier used in file formats and on the command line.
    pub fn id(self) -> &'static str {
        match self {
            Language::C => "c",
            Language::Go => "go",
            Language::Java => "java",
            Language::JavaScript => "javascript",
            Language::Python => "python",
            Language::Ruby => "ruby",
        }
    }

    /// Fenced-code info strings that denote this language.
    pub fn fence_tags(self) -> &'static [&'static str] {
        match self {
            Language::C => &["c", "h"],
            Language::Go => &["go", "golang"],
            Language::Java => &["java"],
            Language::JavaScript => &["javascript", "js", "node", "nodejs", "jsx", "mjs"],
            Language::Python => &["python", "py", "python3"],
            Language::Ruby => &["ruby", "rb"],
        }
    }

    pub fn file_extension(self) -> &'static str {
        match self {
            Language::C => "c",
            Language::Go => "go",
            Language::Java => "java",
            Language::JavaScript => "js",
            Language::Python => "py",
            Language::Ruby => "rb",
        }
    }
}

impl fmt::Display for Language {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.display_name())
    }
}

impl FromStr for Language {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let lower = s.trim().to_ascii_lowercase();
        Language::ALL
            .into_iter()
            .find(|l| l.id() == lower || l.fence_tags().contains(&lower.as_str()))
            .ok_or_else(|| format!("unsupported language `{s}`"))
    }
}

/// Canonical CWE identifier, e.g. `CWE-078`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CweId(String);

impl CweId {
    /// Parses `CWE-<digits>` (case-insensitive) and zero-pads to three digits.
    pub fn parse(s: &str) -> Result<Self, String> {
        let s = s.trim();
        let digits = s
            .get(..4)
            .filter(|p| p.eq_ignore_ascii_case("cwe-"))
            .map(|_| &s[4..])
            .ok_or_else(|| format!("`{s}` is not of the form CWE-<digits>"))?;
        if digits.is_empty() || !digits.bytes().all(|b| b.is_ascii_digit()) {
            return Err(format!("`{s}` is not of the form CWE-<digits>"));
        }
        let number: u32 = digits.parse().map_err(|_| format!("`{s}` has an out-of-range number"))?;
        Ok(CweId(format!("CWE-{number:03}")))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn number(&self) -> u32 {
        self.0[4..].parse().unwrap_or(0)
    }
}

impl fmt::Display for CweId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl FromStr for CweId {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        CweId::parse(s)
    }
}

impl Serialize for CweId {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(&self.0)
    }
}

impl<'de> Deserialize<'de> for CweId {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        CweId::parse(&raw).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CodeExample {
    pub language: Language,
    pub code: String,
    pub explanation: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CweSeed {
    pub cwe_id: CweId,
    pub title: String,
    pub description: String,
    pub examples: Vec<CodeExample>,
    /// Languages to generate for beyond those of the examples.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub target_languages: Vec<Language>,
}

impl CweSeed {
    /// Languages this CWE is paired with, sorted and deduplicated.
    pub fn languages(&self) -> BTreeSet<Language> {
        self.examples.iter().map(|e| e.language).chain(self.target_languages.iter().copied()).collect()
    }

    /// The text bound to the description placeholder of the prompt templates.
    pub fn overall_description(&self) -> String {
        format!("{} ({}): {}", self.cwe_id, self.title, self.description)
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SeedFile {
    schema_version: u32,
    cwe_id: CweId,
    title: String,
    description: String,
    examples: Vec<CodeExample>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    target_languages: Vec<Language>,
}

impl From<SeedFile> for CweSeed {
    fn from(f: SeedFile) -> Self {
        CweSeed {
            cwe_id: f.cwe_id,
            title: f.title,
            description: f.description,
            examples: f.examples,
            target_languages: f.target_languages,
        }
    }
}

/// A generation target: one CWE in one language. Serialized as
/// `"CWE-089:python"`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CwePair {
    pub cwe_id: CweId,
    pub language: Language,
}

impl CwePair {
    pub fn new(cwe_id: CweId, language: Language) -> Self {
        Self { cwe_id, language }
    }
}

impl fmt::Display for CwePair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.cwe_id, self.language.id())
    }
}

impl FromStr for CwePair {
    type Err = String;

    /// Parses `CWE-089:python`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (cwe, lang) = s.split_once(':').ok_or_else(|| format!("`{s}` is not of the form CWE-<n>:<language>"))?;
        Ok(CwePair::new(cwe.parse()?, lang.parse()?))
    }
}

impl Serialize for CwePair {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CwePair {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = String::deserialize(deserializer)?;
        raw.parse().map_err(serde::de::Error::custom)
    }
}

/// Seeds indexed by CWE id, with the derived pair index.
#[derive(Debug, Clone, Default)]
pub struct CweSeedSet {
    seeds: BTreeMap<CweId, CweSeed>,
    sources: BTreeMap<CweId, PathBuf>,
    pairs: BTreeSet<CwePair>,
}

impl CweSeedSet {
    pub fn from_seeds(seeds: impl IntoIterator<Item = CweSeed>) -> Result<Self, SeedError> {
        let mut set = CweSeedSet::default();
        for seed in seeds {
            let path = PathBuf::from(format!("<memory:{}>", seed.cwe_id));
            set.insert(seed, path)?;
        }
        Ok(set)
    }

    fn insert(&mut self, seed: CweSeed, path: PathBuf) -> Result<(), SeedError> {
        if let Some(first) = self.sources.get(&seed.cwe_id) {
            return Err(SeedError::Conflict { cwe_id: seed.cwe_id.clone(), first: first.clone(), second: path });
        }
        for language in seed.languages() {
            self.pairs.insert(CwePair::new(seed.cwe_id.clone(), language));
        }
        self.sources.insert(seed.cwe_id.clone(), path);
        self.seeds.insert(seed.cwe_id.clone(), seed);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.seeds.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seeds.is_empty()
    }

    pub fn get(&self, cwe_id: &CweId) -> Option<&CweSeed> {
        self.seeds.get(cwe_id)
    }

    pub fn seeds(&self) -> impl Iterator<Item = &CweSeed> {
        self.seeds.values()
    }

    pub fn pairs(&self) -> &BTreeSet<CwePair> {
        &self.pairs
    }

    pub fn contains_pair(&self, pair: &CwePair) -> bool {
        self.pairs.contains(pair)
    }

    pub fn pairs_per_language(&self) -> BTreeMap<Language, usize> {
        let mut counts = BTreeMap::new();
        for pair in &self.pairs {
            *counts.entry(pair.language).or_insert(0) += 1;
        }
        counts
    }
}

fn parse_seed_file(path: &Path, text: &str) -> Result<CweSeed, SeedError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let file: SeedFile = serde_path_to_error::deserialize(de).map_err(|e| SeedError::Parse {
        path: path.to_path_buf(),
        field: match e.path().to_string().as_str() {
            "." => "<root>".to_string(),
            p => p.to_string(),
        },
        message: e.inner().to_string(),
    })?;
    let invalid = |field: &str, message: &str| SeedError::Parse {
        path: path.to_path_buf(),
        field: field.to_string(),
        message: message.to_string(),
    };
    if file.schema_version != SEED_SCHEMA_VERSION {
        return Err(invalid(
            "schema_version",
            &format!("unsupported version {} (expected {SEED_SCHEMA_VERSION})", file.schema_version),
        ));
    }
    let seed = CweSeed::from(file);
    if seed.title.trim().is_empty() {
        return Err(invalid("title", "must not be empty"));
    }
    if seed.description.trim().is_empty() {
        return Err(invalid("description", "must not be empty"));
    }
    if seed.examples.is_empty() {
        return Err(invalid("examples", "at least one example is required"));
    }
    for (i, example) in seed.examples.iter().enumerate() {
        if example.code.trim().is_empty() {
            return Err(invalid(&format!("examples[{i}].code"), "must not be empty"));
        }
    }
    Ok(seed)
}

fn seed_files(dir: &Path) -> Result<Vec<PathBuf>, SeedError> {
    let io = |source| SeedError::Io { path: dir.to_path_buf(), source };
    let mut files = Vec::new();
    for entry in fs::read_dir(dir).map_err(io)? {
        let path = entry.map_err(io)?.path();
        if path.is_file() && path.extension().is_some_and(|e| e == "json") {
            files.push(path);
        }
    }
    files.sort();
    Ok(files)
}

fn read_seed(path: &Path) -> Result<CweSeed, SeedError> {
    let text = fs::read_to_string(path).map_err(|source| SeedError::Io { path: path.to_path_buf(), source })?;
    parse_seed_file(path, &text)
}

/// Loads every `*.json` seed file in `dir`.
pub fn load_seed_corpus(dir: &Path) -> Result<CweSeedSet, SeedError> {
    let mut set = CweSeedSet::default();
    for path in seed_files(dir)? {
        let seed = read_seed(&path)?;
        set.insert(seed, path)?;
    }
    Ok(set)
}

/// Canonical on-disk form of a seed (pretty JSON, trailing newline).
pub fn to_canonical_json(seed: &CweSeed) -> String {
    let seed = seed.clone();
    let file = SeedFile {
        schema_version: SEED_SCHEMA_VERSION,
        cwe_id: seed.cwe_id,
        title: seed.title,
        description: seed.description,
        examples: seed.examples,
        target_languages: seed.target_languages,
    };
    let mut out = serde_json::to_string_pretty(&file).expect("seed serializes");
    out.push('\n');
    out
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct ValidationReport {
    pub files: usize,
    pub cwe_count: usize,
    pub pair_count: usize,
    pub pairs_per_language: BTreeMap<Language, usize>,
    pub errors: Vec<String>,
}

impl ValidationReport {
    pub fn is_ok(&self) -> bool {
        self.errors.is_empty()
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed files:  {}", self.files)?;
        writeln!(f, "CWEs:        {}", self.cwe_count)?;
        writeln!(f, "pairs:       {}", self.pair_count)?;
        for (lang, n) in &self.pairs_per_language {
            writeln!(f, "  {:<11} {n}", lang.display_name())?;
        }
        if self.errors.is_empty() {
            writeln!(f, "status:      ok")
        } else {
            writeln!(f, "errors:      {}", self.errors.len())?;
            for e in &self.errors {
                writeln!(f, "  {e}")?;
            }
            Ok(())
        }
    }
}

/// Validates every seed file, collecting all problems instead of stopping at
/// the first one.
pub fn validate_seed_corpus(dir: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    let files = match seed_files(dir) {
        Ok(f) => f,
        Err(e) => {
            report.errors.push(e.to_string());
            return report;
        }
    };
    report.files = files.len();
    let mut set = CweSeedSet::default();
    for path in files {
        match read_seed(&path).and_then(|seed| set.insert(seed, path)) {
            Ok(()) => {}
            Err(e) => report.errors.push(e.to_string()),
        }
    }
    report.cwe_count = set.len();
    report.pair_count = set.pairs().len();
    report.pairs_per_language = set.pairs_per_language();
    report
}

/// Picks the exemplar shown to the model for `language`.
///
/// Examples written in `language` are preferred; when the seed has none, any
/// example is eligible (the prompt states the exemplar's own language). The
/// choice is uniform over the eligible examples and fixed by `rng_seed`.
pub fn select_example(seed: &CweSeed, language: Language, rng_seed: u64) -> Result<&CodeExample, SeedError> {
    let same: Vec<&CodeExample> = seed.examples.iter().filter(|e| e.language == language).collect();
    let candidates: Vec<&CodeExample> = if same.is_empty() { seed.examples.iter().collect() } else { same };
    if candidates.is_empty() {
        return Err(SeedError::EmptySeed(seed.cwe_id.clone()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    Ok(candidates[rng.random_range(0..candidates.len())])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn example(language: Language, code: &str) -> CodeExample {
        CodeExample { language, code: code.to_string(), explanation: "because".to_string() }
    }

    fn seed(id: &str, examples: Vec<CodeExample>) -> CweSeed {
        CweSeed {
            cwe_id: CweId::parse(id).unwrap(),
            title: "Title".into(),
            description: "Desc".into(),
            examples,
            target_languages: vec![],
        }
    }

    #[test]
    fn cwe_id_is_zero_padded() {
        assert_eq!(CweId::parse("CWE-78").unwrap().as_str(), "CWE-078");
        assert_eq!(CweId::parse("cwe-089").unwrap().as_str(), "CWE-089");
        assert_eq!(CweId::parse("CWE-1333").unwrap().as_str(), "CWE-1333");
        assert!(CweId::parse("CWE-").is_err());
        assert!(CweId::parse("CWE-7a").is_err());
        assert!(CweId::parse("78").is_err());
    }

    #[test]
    fn language_aliases() {
        assert_eq!("py".parse::<Language>().unwrap(), Language::Python);
        assert_eq!("JavaScript".parse::<Language>().unwrap(), Language::JavaScript);
        assert!("rust".parse::<Language>().is_err());
    }

    #[test]
    fn pair_parses() {
        let p: CwePair = "CWE-89:python".parse().unwrap();
        assert_eq!(p.to_string(), "CWE-089:python");
    }

    #[test]
    fn singleton_selection() {
        let s = seed("CWE-078", vec![example(Language::C, "x")]);
        for rng_seed in 0..20 {
            assert_eq!(select_example(&s, Language::C, rng_seed).unwrap().code, "x");
            // cross-language fallback
            assert_eq!(select_example(&s, Language::Go, rng_seed).unwrap().code, "x");
        }
    }

    #[test]
    fn selection_is_deterministic() {
        let s = seed("CWE-078", vec![example(Language::C, "a"), example(Language::C, "b"), example(Language::C, "c")]);
        let a = select_example(&s, Language::C, 0).unwrap();
        let b = select_example(&s, Language::C, 0).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn selection_prefers_same_language() {
        let s = seed("CWE-078", vec![example(Language::C, "c"), example(Language::Python, "py")]);
        for rng_seed in 0..50 {
            assert_eq!(select_example(&s, Language::Python, rng_seed).unwrap().code, "py");
        }
    }

    #[test]
    fn empty_seed_errors() {
        let s = seed("CWE-078", vec![]);
        assert!(matches!(select_example(&s, Language::C, 1), Err(SeedError::EmptySeed(_))));
    }

    #[test]
    fn selection_is_uniform() {
        // Uniform over 3 candidates: 3,000 draws give 1,000 ± 25.8 (1 sd) per
        // example; the accepted band 840..=1170 is over 6 sd wide each side.
        let s = seed("CWE-078", vec![example(Language::C, "a"), example(Language::C, "b"), example(Language::C, "c")]);
        let mut counts = BTreeMap::new();
        for rng_seed in 0..3000u64 {
            *counts.entry(select_example(&s, Language::C, rng_seed).unwrap().code.clone()).or_insert(0usize) += 1;
        }
        assert_eq!(counts.len(), 3);
        for n in counts.values() {
            assert!((840..=1170).contains(n), "{counts:?}");
        }
    }

    #[test]
    fn parse_error_names_field() {
        let text = r#"{"schema_version":1,"cwe_id":"CWE-078","title":"t","description":"d",
            "examples":[{"language":"cobol","code":"x","explanation":"e"}]}"#;
        let err = parse_seed_file(Path::new("bad.json"), text).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("bad.json"), "{msg}");
        assert!(msg.contains("examples[0].language"), "{msg}");
    }

    #[test]
    fn empty_description_rejected() {
        let text = r#"{"schema_version":1,"cwe_id":"CWE-078","title":"t","description":" ",
            "examples":[{"language":"c","code":"x","explanation":"e"}]}"#;
        let msg = parse_seed_file(Path::new("s.json"), text).unwrap_err().to_string();
        assert!(msg.contains("description"), "{msg}");
    }

    #[test]
    fn duplicate_cwe_conflicts() {
        let a = seed("CWE-078", vec![example(Language::C, "a")]);
        let err = CweSeedSet::from_seeds([a.clone(), a]).unwrap_err();
        assert!(matches!(err, SeedError::Conflict { .. }));
    }

    #[test]
    fn pairs_include_target_languages() {
        let mut s = seed("CWE-078", vec![example(Language::C, "a")]);
        s.target_languages = vec![Language::Python, Language::C];
        let set = CweSeedSet::from_seeds([s]).unwrap();
        assert_eq!(set.pairs().len(), 2);
    }
}
