//! Token usage ledger and cost arithmetic.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::provider::Usage;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct UsageEntry {
    pub provider: String,
    pub model_id: String,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    /// Whether the answer came from the transcript cache.
    pub cached: bool,
    /// Caller-supplied label, `CWE-089:python/gen-secure` style; the part
    /// before `/` is used as the pair for per-pair costs.
    pub tag: String,
}

impl UsageEntry {
    pub fn pair(&self) -> &str {
        self.tag.split('/').next().unwrap_or("")
    }
}

#[derive(Debug, Default)]
pub struct UsageLedger {
    entries: Mutex<Vec<UsageEntry>>,
    file: Mutex<Option<(PathBuf, Option<File>)>>,
}

impl UsageLedger {
    pub fn in_memory() -> Self {
        Self::default()
    }

    /// Appends every recorded entry to `path` as JSONL.
    pub fn with_file(path: &Path) -> Self {
        Self { entries: Mutex::new(Vec::new()), file: Mutex::new(Some((path.to_path_buf(), None))) }
    }

    pub fn record(&self, provider: &str, model_id: &str, usage: Usage, cached: bool, tag: &str) {
        let entry = UsageEntry {
            provider: provider.to_string(),
            model_id: model_id.to_string(),
            prompt_tokens: usage.prompt_tokens,
            completion_tokens: usage.completion_tokens,
            cached,
            tag: tag.to_string(),
        };
        let mut guard = self.file.lock().unwrap_or_else(|e| e.into_inner());
        if let Some((path, handle)) = guard.as_mut() {
            if handle.is_none() {
                if let Some(parent) = path.parent() {
                    let _ = fs::create_dir_all(parent);
                }
                *handle = OpenOptions::new().create(true).append(true).open(&*path).ok();
            }
            if let Some(f) = handle.as_mut() {
                if let Ok(line) = serde_json::to_string(&entry) {
                    if let Err(e) = writeln!(f, "{line}") {
                        log::warn!("usage ledger {}: {e}", path.display());
                    }
                }
            }
        }
        drop(guard);
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).push(entry);
    }

    pub fn entries(&self) -> Vec<UsageEntry> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).clone()
    }

    pub fn totals(&self) -> Usage {
        self.entries().iter().fold(Usage::default(), |acc, e| Usage {
            prompt_tokens: acc.prompt_tokens + e.prompt_tokens,
            completion_tokens: acc.completion_tokens + e.completion_tokens,
        })
    }
}

/// Reads a usage JSONL file, skipping corrupt lines.
pub fn read_usage_file(path: &Path) -> std::io::Result<Vec<UsageEntry>> {
    let mut out = Vec::new();
    if !path.exists() {
        return Ok(out);
    }
    for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str(&line) {
            Ok(e) => out.push(e),
            Err(err) => log::warn!("{}:{}: skipping usage line: {err}", path.display(), n + 1),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Pricing {
    pub prompt_per_mtok: f64,
    pub completion_per_mtok: f64,
}

impl Pricing {
    pub fn cost(&self, prompt_tokens: u64, completion_tokens: u64) -> f64 {
        (prompt_tokens as f64 * self.prompt_per_mtok + completion_tokens as f64 * self.completion_per_mtok)
            / 1_000_000.0
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ProviderCost {
    pub calls: u64,
    pub cached_calls: u64,
    pub prompt_tokens: u64,
    pub completion_tokens: u64,
    pub cost_usd: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct CostReport {
    pub by_provider: BTreeMap<String, ProviderCost>,
    pub by_pair: BTreeMap<String, f64>,
    pub total: ProviderCost,
    pub pairs: usize,
    pub cost_per_pair_usd: f64,
}

/// Aggregates usage entries into per-provider and per-pair costs. Providers
/// missing from `pricing` are costed at zero.
pub fn cost_report(entries: &[UsageEntry], pricing: &BTreeMap<String, Pricing>) -> CostReport {
    let mut report = CostReport::default();
    let mut pairs = BTreeSet::new();
    for e in entries {
        let price = pricing.get(&e.provider).copied().unwrap_or_default();
        let cost = price.cost(e.prompt_tokens, e.completion_tokens);
        for agg in [report.by_provider.entry(e.provider.clone()).or_default(), &mut report.total] {
            agg.calls += 1;
            agg.cached_calls += e.cached as u64;
            agg.prompt_tokens += e.prompt_tokens;
            agg.completion_tokens += e.completion_tokens;
            agg.cost_usd += cost;
        }
        if !e.pair().is_empty() {
            pairs.insert(e.pair().to_string());
            *report.by_pair.entry(e.pair().to_string()).or_default() += cost;
        }
    }
    report.pairs = pairs.len();
    if report.pairs > 0 {
        report.cost_per_pair_usd = report.total.cost_usd / report.pairs as f64;
    }
    report
}

impl fmt::Display for CostReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<16} {:>8} {:>8} {:>14} {:>14} {:>12}",
            "provider", "calls", "cached", "prompt_tok", "completion_tok", "cost_usd"
        )?;
        for (name, c) in self.by_provider.iter().chain([(&"TOTAL".to_string(), &self.total)]) {
            writeln!(
                f,
                "{:<16} {:>8} {:>8} {:>14} {:>14} {:>12.2}",
                name, c.calls, c.cached_calls, c.prompt_tokens, c.completion_tokens, c.cost_usd
            )?;
        }
        writeln!(f, "pairs: {}  cost per pair: ${:.2}", self.pairs, self.cost_per_pair_usd)
    }
}
