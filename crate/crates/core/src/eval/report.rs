//! Aggregated metrics and their text rendering: secure ratio by language and
//! by CWE, functional and security `@1` metrics, and two-model comparisons
//! with Fisher significance per CWE.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::{self, Write as _};

use serde::{Deserialize, Serialize};

use super::metrics::{fisher_exact, format_percent, metric_at_k, Ratio};
use super::{AbortedScenario, EvalRun};
use crate::seeds::{CweId, Language};

pub const SIGNIFICANCE: f64 = 0.05;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMetrics {
    pub scenario_id: String,
    pub cwe_id: CweId,
    pub language: Language,
    pub n: u64,
    pub secure: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub functional: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub func_secure: Option<u64>,
    pub generation_failures: u64,
    pub sec_at_1: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub func_at_1: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub func_sec_at_1: Option<f64>,
}

/// Means of per-scenario `@1` estimates over scenarios with functional tests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AtOneSummary {
    pub scenarios: usize,
    pub func_at_1: f64,
    pub sec_at_1: f64,
    pub func_sec_at_1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub model: String,
    pub scenarios: Vec<ScenarioMetrics>,
    pub by_language: BTreeMap<Language, Ratio>,
    pub by_cwe: BTreeMap<CweId, Ratio>,
    /// Sample-weighted secure ratio over all scenarios.
    pub total: Ratio,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub at_one: Option<AtOneSummary>,
    #[serde(default)]
    pub aborted: Vec<AbortedScenario>,
}

impl MetricReport {
    pub fn from_run(run: &EvalRun) -> Self {
        let mut scenarios = Vec::new();
        let mut by_language: BTreeMap<Language, Ratio> = BTreeMap::new();
        let mut by_cwe: BTreeMap<CweId, Ratio> = BTreeMap::new();
        let mut total = Ratio::default();
        for r in &run.results {
            let n = r.samples.len() as u64;
            let secure = r.samples.iter().filter(|s| s.secure).count() as u64;
            let has_func = !r.samples.is_empty() && r.samples.iter().all(|s| s.functional.is_some());
            let functional = has_func.then(|| r.samples.iter().filter(|s| s.functional == Some(true)).count() as u64);
            let func_secure =
                has_func.then(|| r.samples.iter().filter(|s| s.func_secure() == Some(true)).count() as u64);
            let at1 = |c: u64| if n == 0 { 0.0 } else { metric_at_k(n, c, 1).expect("c <= n") };
            scenarios.push(ScenarioMetrics {
                scenario_id: r.scenario_id.clone(),
                cwe_id: r.cwe_id.clone(),
                language: r.language,
                n,
                secure,
                functional,
                func_secure,
                generation_failures: r.samples.iter().filter(|s| s.generation_error.is_some()).count() as u64,
                sec_at_1: at1(secure),
                func_at_1: functional.map(at1),
                func_sec_at_1: func_secure.map(at1),
            });
            let ratio = Ratio::new(secure, n);
            by_language.entry(r.language).or_default().add(ratio);
            by_cwe.entry(r.cwe_id.clone()).or_default().add(ratio);
            total.add(ratio);
        }
        let with_func: Vec<&ScenarioMetrics> = scenarios.iter().filter(|s| s.functional.is_some()).collect();
        let at_one = (!with_func.is_empty()).then(|| {
            let k = with_func.len() as f64;
            AtOneSummary {
                scenarios: with_func.len(),
                func_at_1: with_func.iter().filter_map(|s| s.func_at_1).sum::<f64>() / k,
                sec_at_1: with_func.iter().map(|s| s.sec_at_1).sum::<f64>() / k,
                func_sec_at_1: with_func.iter().filter_map(|s| s.func_sec_at_1).sum::<f64>() / k,
            }
        });
        Self { model: run.model.clone(), scenarios, by_language, by_cwe, total, at_one, aborted: run.aborted.clone() }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

impl fmt::Display for MetricReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Model: {}", self.model)?;
        writeln!(f, "Scenarios: {} scored, {} aborted", self.scenarios.len(), self.aborted.len())?;
        writeln!(f)?;
        writeln!(f, "Secure ratio by language")?;
        writeln!(f, "{:<10} Secure ratio", "Language")?;
        for (lang, r) in &self.by_language {
            writeln!(f, "{:<10} {r}", lang.display_name())?;
        }
        writeln!(f, "{:<10} {}", "Total", self.total)?;
        writeln!(f)?;
        writeln!(f, "Secure ratio by CWE (%)")?;
        for (cwe, r) in &self.by_cwe {
            writeln!(f, "{:<10} {:>5}", cwe.as_str(), r.percent())?;
        }
        writeln!(f, "{:<10} {:>5}", "Total", self.total.percent())?;
        if let Some(a) = &self.at_one {
            writeln!(f)?;
            writeln!(f, "Functional and security @1 over {} scenario(s)", a.scenarios)?;
            writeln!(f, "{:<11} {:>6}%", "Func@1", format_percent(a.func_at_1))?;
            writeln!(f, "{:<11} {:>6}%", "Sec@1", format_percent(a.sec_at_1))?;
            writeln!(f, "{:<11} {:>6}%", "Func-Sec@1", format_percent(a.func_sec_at_1))?;
        }
        for a in &self.aborted {
            writeln!(f, "aborted {}: {}", a.scenario_id, a.reason)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub key: String,
    pub a: Ratio,
    pub b: Ratio,
    /// Two-sided Fisher p on secure/insecure counts; `None` if a side is empty.
    pub p_value: Option<f64>,
    pub significant: bool,
}

impl CompareRow {
    fn new(key: String, a: Ratio, b: Ratio) -> Self {
        let p_value = (a.total > 0 && b.total > 0).then(|| {
            fisher_exact([[a.passed, a.total - a.passed], [b.passed, b.total - b.passed]]).expect("non-empty table")
        });
        Self { key, a, b, significant: p_value.is_some_and(|p| p < SIGNIFICANCE), p_value }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Comparison {
    pub model_a: String,
    pub model_b: String,
    pub by_cwe: Vec<CompareRow>,
    pub by_language: Vec<CompareRow>,
    pub total: CompareRow,
    /// CWEs whose secure counts differ at p < 0.05.
    pub significant_cwes: Vec<String>,
}

/// Per-CWE and per-language secure counts of two reports side by side.
pub fn compare(a: &MetricReport, b: &MetricReport) -> Comparison {
    let cwes: BTreeSet<&CweId> = a.by_cwe.keys().chain(b.by_cwe.keys()).collect();
    let by_cwe: Vec<CompareRow> = cwes
        .into_iter()
        .map(|c| {
            CompareRow::new(
                c.to_string(),
                a.by_cwe.get(c).copied().unwrap_or_default(),
                b.by_cwe.get(c).copied().unwrap_or_default(),
            )
        })
        .collect();
    let langs: BTreeSet<&Language> = a.by_language.keys().chain(b.by_language.keys()).collect();
    let by_language = langs
        .into_iter()
        .map(|l| {
            CompareRow::new(
                l.display_name().to_string(),
                a.by_language.get(l).copied().unwrap_or_default(),
                b.by_language.get(l).copied().unwrap_or_default(),
            )
        })
        .collect();
    Comparison {
        model_a: a.model.clone(),
        model_b: b.model.clone(),
        significant_cwes: by_cwe.iter().filter(|r| r.significant).map(|r| r.key.clone()).collect(),
        by_cwe,
        by_language,
        total: CompareRow::new("Total".into(), a.total, b.total),
    }
}

impl fmt::Display for Comparison {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let row = |r: &CompareRow| {
            let mut s = String::new();
            let p = r.p_value.map_or("-".to_string(), |p| format!("{p:.4}"));
            let mark = if r.significant { " *" } else { "" };
            let _ = write!(s, "{:<10} {:>22} {:>22} {:>8}{mark}", r.key, r.a.to_string(), r.b.to_string(), p);
            s
        };
        writeln!(f, "A: {}", self.model_a)?;
        writeln!(f, "B: {}", self.model_b)?;
        writeln!(f, "{:<10} {:>22} {:>22} {:>8}", "CWE", "A", "B", "p")?;
        for r in &self.by_cwe {
            writeln!(f, "{}", row(r))?;
        }
        writeln!(f, "{}", row(&self.total))?;
        writeln!(f)?;
        writeln!(f, "{:<10} {:>22} {:>22} {:>8}", "Language", "A", "B", "p")?;
        for r in &self.by_language {
            writeln!(f, "{}", row(r))?;
        }
        writeln!(f, "* p < {SIGNIFICANCE} (two-sided Fisher exact test)")
    }
}
