//! Regenerates the recorded fixtures under `fixtures/`. Ignored by default;
//! run with `cargo test -p cwesynth-core --test fixtures -- --ignored` after
//! changing prompts, scripts or record formats, then review the diff.

mod common;

use std::fs;
use std::path::Path;
use std::sync::Arc;

use common::*;
use cwesynth::eval::{load_scenarios, run_eval, EvalOverrides, Judges, MetricReport};
use cwesynth::gateway::{CacheMode, CompletionRequest, Gateway, GenParams, MockProvider, TranscriptCache};
use cwesynth::synth::{funnel, Pipeline, Scheme, SynthProvider};
use cwesynth::verifier::{RuleMap, Tool, Verifier};

fn recording_gateway(
    name: &str,
    transcripts: &Path,
    reply: impl Fn(&CompletionRequest) -> String + Send + Sync + 'static,
) -> Gateway {
    let cache = TranscriptCache::open(&transcripts.join(format!("{name}.jsonl")), CacheMode::ReadWrite).unwrap();
    Gateway::new(Arc::new(MockProvider::new(name, move |req| Ok(reply(req))))).with_cache(Arc::new(cache))
}

fn clear(dirs: &[&Path]) {
    for d in dirs {
        let _ = fs::remove_dir_all(d);
        fs::create_dir_all(d).unwrap();
    }
}

/// Requests complete concurrently; sorting keeps regenerated files diffable.
fn sort_transcripts(dir: &Path) {
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        let text = fs::read_to_string(&path).unwrap();
        let mut lines: Vec<&str> = text.lines().collect();
        lines.sort_unstable();
        fs::write(&path, lines.join("\n") + "\n").unwrap();
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) {
    fs::write(path, serde_json::to_string_pretty(value).unwrap() + "\n").unwrap();
}

#[test]
#[ignore = "rewrites fixtures/pipeline"]
fn regenerate_pipeline_fixture() {
    let dir = pipeline_dir();
    let (transcripts, analyzers, expected) = (dir.join("transcripts"), dir.join("analyzers"), dir.join("expected"));
    clear(&[&transcripts, &analyzers, &expected]);
    let state_dir = tempfile::tempdir().unwrap();
    let cfg = pipeline_config(state_dir.path());
    let seeds = seeds();
    let script = Script::default();

    let providers: Vec<SynthProvider> = cfg
        .synth
        .providers
        .iter()
        .map(|name| {
            let pc = cfg.provider(name).unwrap();
            let (s, n) = (script.clone(), name.clone());
            let gw = recording_gateway(name, &transcripts, move |req| s.reply(&n, req));
            SynthProvider::new(Arc::new(gw), GenParams::synthesis(&pc.model_id))
        })
        .collect();
    let rules = Arc::new(RuleMap::bundled());
    let mut verifier = Verifier::new(cfg.support_matrix(seeds.pairs()).unwrap(), cfg.analyzers.max_parallel);
    for tool in [Tool::CodeQl, Tool::SonarQube] {
        verifier = verifier.with_analyzer(Arc::new(RecordingAnalyzer {
            tool,
            root: analyzers.clone(),
            forms: script.lookup(),
            rules: rules.clone(),
        }));
    }
    let store = Arc::new(cfg.state_store().unwrap());
    let pipeline = Pipeline::new(providers, Arc::new(verifier), store.clone(), cfg.synth.clone()).unwrap();
    for scheme in [Scheme::VulSecure, Scheme::SecureOnly] {
        let report = pipeline.run(scheme, &seeds, &fixture_pairs()).unwrap();
        assert!(report.aborted.is_empty(), "{:?}", report.aborted);
    }

    let state = store.snapshot();
    let vs = funnel(&state, Scheme::VulSecure, &cfg.synth);
    let t = vs.totals;
    assert!(
        t.candidates > t.verified_vulnerable && t.verified_vulnerable > t.verified_secure && t.verified_secure > 0,
        "funnel does not narrow:\n{vs}"
    );
    print!("{vs}");
    let so = funnel(&state, Scheme::SecureOnly, &cfg.synth);
    print!("{so}");
    write_json(&expected.join("funnel-vul_secure.json"), &vs);
    write_json(&expected.join("funnel-secure_only.json"), &so);
    write_json(
        &expected.join("stages.json"),
        &serde_json::json!({
            "vul-secure": stage_counts(&state, Scheme::VulSecure),
            "secure": stage_counts(&state, Scheme::SecureOnly),
        }),
    );

    let ipc = cfg.provider(cfg.instruction.provider.as_deref().unwrap()).unwrap();
    let (s, n) = (script.clone(), ipc.name.clone());
    let igw = recording_gateway(&ipc.name, &transcripts, move |req| s.reply(&n, req));
    let iparams = GenParams {
        temperature: cfg.instruction.temperature,
        max_tokens: cfg.instruction.max_tokens,
        n_samples: 1,
        model_id: ipc.model_id.clone(),
    };
    let data = build_dataset_with(&state, &cfg, &igw, &iparams);
    data.write(&expected.join("dataset")).unwrap();
    drop((pipeline, igw));
    sort_transcripts(&transcripts);
    println!("{} examples", data.examples.len());
}

const USER_LOOKUP: [&str; 4] = [
    "Here is a parameterised query:\n\n```python\ndef find_user(conn, name):\n    cur = conn.execute(\"SELECT id, email FROM users WHERE name = ?\", (name,))\n    return cur.fetchone()\n```\n",
    "```python\ndef find_user(conn, name):\n    query = \"SELECT id, email FROM users WHERE name = '\" + name + \"'\"\n    return conn.execute(query).fetchone()\n```\n",
    "```python\ndef find_user(conn, name):\n    return conn.execute(\"SELECT id, email FROM users WHERE name = ?\", (name,)).fetchall()\n```\n",
    "",
];

const READ_FILE: [&str; 5] = [
    "    root = os.path.realpath(base_dir)\n    path = os.path.realpath(os.path.join(root, name))\n    if os.path.commonpath([root, path]) != root:\n        raise ValueError(\"outside base directory\")\n    with open(path) as f:\n        return f.read()\n",
    "    with open(os.path.join(base_dir, name)) as f:\n        return f.read()\n",
    "    if name.startswith(\"..\"):\n        raise ValueError(\"outside base directory\")\n    with open(os.path.join(base_dir, name)) as f:\n        return f.read()\n",
    "```python\nimport os\n\n\ndef read_file(base_dir, name):\n    base = os.path.abspath(base_dir)\n    target = os.path.abspath(os.path.join(base, name))\n    if not target.startswith(base + os.sep):\n        raise ValueError(name)\n    with open(target) as f:\n        return f.read()\n```\n",
    "    while True:\n        pass\n",
];

const COPY_NAME: [&str; 3] = [
    "```c\n#include <stdio.h>\n\nvoid copy_name(char *dst, size_t dst_len, const char *src) {\n    if (dst_len > 0)\n        snprintf(dst, dst_len, \"%s\", src);\n}\n```\n",
    "```c\n#include <string.h>\n\nvoid copy_name(char *dst, size_t dst_len, const char *src) {\n    (void)dst_len;\n    strcpy(dst, src);\n}\n```\n",
    "```c\n#include <string.h>\n\nvoid copy_name(char *dst, size_t dst_len, const char *src) {\n    memcpy(dst, src, strlen(src) + 1);\n}\n```\n",
];

/// Scripted replies of the benchmark model; the sample index picks the variant.
fn bench_reply(req: &CompletionRequest) -> String {
    let i = req.sample_index as usize;
    let p = &req.prompt;
    let pick = |ranges: &[usize]| ranges.iter().position(|&end| i < end).unwrap();
    if p.contains("find_user(conn, name)") {
        USER_LOOKUP[pick(&[5, 7, 9, 10])].into()
    } else if p.contains("def read_file(base_dir, name)") {
        READ_FILE[pick(&[4, 6, 7, 9, 10])].into()
    } else if p.contains("copy_name") {
        COPY_NAME[pick(&[6, 9, 10])].into()
    } else {
        panic!("unscripted benchmark prompt: {p}")
    }
}

fn unbounded_copy(code: &str) -> Option<Form> {
    Some(if code.contains("strcpy(") || code.contains("memcpy(") { Form::VulnBoth } else { Form::Safe })
}

#[test]
#[ignore = "rewrites fixtures/bench"]
fn regenerate_bench_fixture() {
    let dir = bench_dir();
    let (transcripts, analyzers, expected) = (dir.join("transcripts"), dir.join("analyzers"), dir.join("expected"));
    clear(&[&transcripts, &analyzers, &expected]);
    let cfg = bench_config();
    let pc = cfg.provider(BENCH_MODEL).unwrap();
    let gw = recording_gateway(&pc.name, &transcripts, bench_reply);
    let base = GenParams { max_tokens: cfg.eval.max_tokens, ..GenParams::evaluation(&pc.model_id) };
    let judges = Judges::new(cfg.eval.sandbox).with_analyzer(Arc::new(RecordingAnalyzer {
        tool: Tool::CodeQl,
        root: analyzers,
        forms: Arc::new(unbounded_copy),
        rules: Arc::new(RuleMap::bundled()),
    }));
    let scenarios = load_scenarios(&cfg.benchmarks_dir).unwrap();
    let out = tempfile::tempdir().unwrap();
    let run = run_eval(&gw, &base, &scenarios, &judges, EvalOverrides::default(), out.path()).unwrap();
    assert!(run.aborted.is_empty(), "{:?}", run.aborted);
    let report = MetricReport::from_run(&run);
    print!("{report}");
    fs::write(expected.join("report.json"), report.to_json()).unwrap();
    write_json(&expected.join("results.json"), &run);
    drop(gw);
    sort_transcripts(&transcripts);
}
