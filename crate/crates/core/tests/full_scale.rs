//! Full-corpus runs with scripted providers and analyzers at production
//! scale: 1,560 candidates narrowing to 475 verified-vulnerable snippets and
//! 856 fixed pairs over 39 pairs, 15,600 secure-only records, and a
//! 865-example downsample covering all 78 pairs.

mod common;

use std::collections::BTreeSet;
use std::sync::Arc;

use common::seeds;
use cwesynth::dataset::{build_examples, downsample, generate_instructions, MaskGranularity};
use cwesynth::gateway::{CompletionRequest, Gateway, GenParams, MockProvider};
use cwesynth::seeds::{CwePair, Language};
use cwesynth::synth::{
    funnel, select_outputs, FixPolicy, Pipeline, Scheme, SchemeConfig, Selected, StateStore, SynthProvider,
};
use cwesynth::verifier::{Finding, FnAnalyzer, Location, SupportMatrix, Tool, Verdict, Verifier};

const PROVIDERS: [&str; 2] = ["gpt", "claude"];
const CANDIDATES: u64 = 1560;
const YIELDING_PAIRS: usize = 39;
const VULNERABLE: u64 = 475;
const FIXES_PER_PARENT: u64 = 5;
const FIXED: u64 = 856;

/// True for exactly `hits` of the indices `0..total`, spread evenly.
fn spread(index: u64, hits: u64, total: u64) -> bool {
    (index + 1) * hits / total > index * hits / total
}

/// The CWE-language pair a generation prompt asks for.
fn target_pair(prompt: &str) -> CwePair {
    let at = prompt.find("CWE-").unwrap();
    let cwe: String = prompt[at..].chars().take_while(|c| *c == '-' || c.is_ascii_alphanumeric()).collect();
    let tail = &prompt[prompt.rfind("example for ").unwrap() + "example for ".len()..];
    let lang = &tail[..tail.find(" language").unwrap()];
    format!("{cwe}:{}", lang.parse::<Language>().unwrap().id()).parse().unwrap()
}

fn field<'a>(text: &'a str, key: &str) -> &'a str {
    let at = text.find(&format!("{key}=")).unwrap_or_else(|| panic!("no {key} in {text}")) + key.len() + 1;
    text[at..].split_whitespace().next().unwrap()
}

struct Scripted {
    pairs: Vec<CwePair>,
}

impl Scripted {
    fn reply(&self, provider: &str, req: &CompletionRequest) -> String {
        let p = &req.prompt;
        let i = u64::from(req.sample_index);
        let q = PROVIDERS.iter().position(|n| *n == provider).unwrap() as u64;
        if p.starts_with("Create a single") {
            let lang: Language = field(p, "lang").parse().unwrap();
            return format!("Write a {} routine that processes one request.", lang.display_name());
        }
        if p.contains("Can you FIX the code") {
            let (lang, v) = (field(p, "lang"), field(p, "v").parse::<u64>().unwrap());
            let h = v * FIXES_PER_PARENT + i;
            let kind = if spread(h, FIXED, VULNERABLE * FIXES_PER_PARENT) { "SAFE" } else { "VULN" };
            return format!("```\nmark lang={lang} fix={h} {kind}\nhandle(sanitize(input))\n```\n");
        }
        let pair = target_pair(p);
        let lang = pair.language.id();
        if p.contains("generate a vulnerable code example") {
            let rank = self.pairs.iter().position(|x| *x == pair).unwrap();
            if rank >= YIELDING_PAIRS {
                return format!("```\nmark lang={lang} pair={pair} q={q} i={i} SAFE\nhandle(input)\n```\n");
            }
            let g = (rank as u64 * 2 + q) * 10 + i;
            let per_yielding = CANDIDATES / 2;
            return if spread(g, VULNERABLE, per_yielding) {
                let v = g * VULNERABLE / per_yielding;
                format!("```\nmark lang={lang} v={v} VULN\nhandle(input)\n```\n")
            } else {
                format!("```\nmark lang={lang} g={g} SAFE\nhandle(input)\n```\n")
            };
        }
        format!("```\nmark lang={lang} pair={pair} q={q} i={i} SAFE\nhandle(escape(input))\n```\n")
    }
}

fn analyzer(tool: Tool) -> FnAnalyzer {
    FnAnalyzer::new(tool, move |snippet, cwe| {
        let findings = if snippet.code.contains("VULN") {
            vec![Finding {
                tool,
                rule_id: "scripted".into(),
                mapped_cwes: BTreeSet::from([cwe.clone()]),
                location: Location::new(1, 1),
                message: "scripted finding".into(),
            }]
        } else {
            vec![]
        };
        Verdict::completed(tool, findings)
    })
}

struct Run {
    store: Arc<StateStore>,
    cfg: SchemeConfig,
    instructions: Gateway,
    _dir: tempfile::TempDir,
}

fn run(scheme: Scheme, cfg: SchemeConfig) -> Run {
    let seeds = seeds();
    let pairs: Vec<CwePair> = seeds.pairs().iter().cloned().collect();
    assert_eq!(pairs.len(), 78);
    let script = Arc::new(Scripted { pairs: pairs.clone() });
    let gateway = |name: &'static str| {
        let s = script.clone();
        Gateway::new(Arc::new(MockProvider::new(name, move |req| Ok(s.reply(name, req)))))
    };
    let providers =
        PROVIDERS.iter().map(|n| SynthProvider::new(Arc::new(gateway(n)), GenParams::synthesis(*n))).collect();
    let verifier = Verifier::new(SupportMatrix::for_corpus(seeds.pairs()), 8)
        .with_analyzer(Arc::new(analyzer(Tool::CodeQl)))
        .with_analyzer(Arc::new(analyzer(Tool::SonarQube)));
    let dir = tempfile::tempdir().unwrap();
    let store = Arc::new(StateStore::open(dir.path()).unwrap());
    let cfg = SchemeConfig { providers: PROVIDERS.iter().map(|s| s.to_string()).collect(), pair_concurrency: 8, ..cfg };
    let pipeline = Pipeline::new(providers, Arc::new(verifier), store.clone(), cfg.clone()).unwrap();
    let report = pipeline.run(scheme, &seeds, &pairs).unwrap();
    assert!(report.aborted.is_empty(), "{:?}", report.aborted);
    Run { store, cfg, instructions: gateway("gpt"), _dir: dir }
}

fn instruction_params() -> GenParams {
    GenParams { temperature: 1.0, max_tokens: 256, n_samples: 1, model_id: "gpt".into() }
}

#[test]
fn vul_secure_funnel_at_full_scale() {
    let r = run(
        Scheme::VulSecure,
        SchemeConfig {
            n_vulnerable_per_pair: 10,
            n_fixes_per_vulnerable: 5,
            fix_policy: FixPolicy::KeepAll,
            ..SchemeConfig::default()
        },
    );
    let state = r.store.snapshot();
    let f = funnel(&state, Scheme::VulSecure, &r.cfg);
    assert_eq!(f.totals.candidates, 1560);
    assert_eq!(f.totals.verified_vulnerable, 475);
    assert_eq!(f.totals.fixes, 475 * 5);
    assert_eq!(f.totals.verified_secure, 856);
    assert_eq!(f.totals.selected, 856);
    assert_eq!(f.yielding_pairs, 39);

    let selected = select_outputs(&state, Scheme::VulSecure, &r.cfg);
    let (instructions, failed) = generate_instructions(&selected, &r.instructions, &instruction_params());
    assert!(failed.is_empty());
    let examples = build_examples(&selected, &instructions, MaskGranularity::Line).unwrap();
    assert_eq!(examples.len(), 856);
    for e in &examples {
        e.validate().unwrap();
        assert!(e.vulnerable_response.is_some());
        assert!(!e.sec_mask_spans.is_empty() && !e.vul_mask_spans.is_empty());
    }
}

#[test]
fn first_success_keeps_one_fix_per_parent() {
    let r = run(Scheme::VulSecure, SchemeConfig::default());
    let f = funnel(&r.store.snapshot(), Scheme::VulSecure, &r.cfg);
    assert_eq!(f.totals.candidates, 1560);
    assert_eq!(f.totals.verified_vulnerable, 475);
    assert!(f.totals.selected <= 475);
    assert_eq!(f.totals.selected, f.totals.verified_secure);
}

#[test]
fn secure_only_fills_every_pair_and_downsamples() {
    let r = run(Scheme::SecureOnly, SchemeConfig::default());
    let state = r.store.snapshot();
    let f = funnel(&state, Scheme::SecureOnly, &r.cfg);
    assert_eq!(f.totals.selected, 15_600);
    assert_eq!(f.yielding_pairs, 78);

    let selected = Selected { pairs: vec![], secure: select_outputs(&state, Scheme::SecureOnly, &r.cfg).secure };
    let (instructions, failed) = generate_instructions(&selected, &r.instructions, &instruction_params());
    assert!(failed.is_empty());
    let examples = build_examples(&selected, &instructions, MaskGranularity::Line).unwrap();
    assert_eq!(examples.len(), 15_600);

    let small = downsample(&examples, 865, 7).unwrap();
    assert_eq!(small.len(), 865);
    let covered: BTreeSet<CwePair> = small.iter().map(|e| e.pair()).collect();
    assert_eq!(covered.len(), 78);
    assert_eq!(downsample(&examples, 865, 7).unwrap(), small);
}
