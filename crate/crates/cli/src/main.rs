//! `cwesynth` command line.
//!
//! Exit codes: 0 success, 1 domain error, 2 usage error. Diagnostics go to
//! stderr; machine-readable outputs are files, human summaries stdout.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cwesynth::config::RunConfig;
use cwesynth::dataset::{
    build_examples, dedup, diversity, downsample, generate_instructions, leakage_report, load_dataset, package_dataset,
    parse_jsonl, CorpusItem,
};
use cwesynth::eval::{load_scenarios, run_eval, EvalOverrides, EvalRun, Judges, MetricReport, SecurityJudge};
use cwesynth::gateway::{cost_report, read_usage_file, GenParams, ProviderConfig, UsageLedger};
use cwesynth::seeds::{load_seed_corpus, validate_seed_corpus, CweId, CwePair, Language};
use cwesynth::synth::{funnel, resume, select_outputs, Pipeline, Scheme, Selected, RECORDS_FILE, USAGE_FILE};

#[derive(Parser)]
#[command(name = "cwesynth", version, about = "Synthesize verified secure-code datasets and evaluate code models")]
struct Cli {
    /// Run configuration (TOML). Defaults plus CWESYNTH_* variables when omitted.
    #[arg(long, global = true, env = "CWESYNTH_CONFIG")]
    config: Option<PathBuf>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// CWE seed corpus tools.
    #[command(subcommand)]
    Seeds(SeedsCmd),
    /// Synthesis pipeline.
    #[command(subcommand)]
    Synth(SynthCmd),
    /// Dataset packaging and analysis.
    #[command(subcommand)]
    Dataset(DatasetCmd),
    /// Security benchmark evaluation.
    #[command(subcommand)]
    Eval(EvalCmd),
}

#[derive(Subcommand)]
enum SeedsCmd {
    /// Check every seed file and print corpus counts.
    Validate { dir: PathBuf },
}

#[derive(Subcommand)]
enum SynthCmd {
    /// Generate and verify snippets; resumes from the state directory.
    Run {
        #[arg(long, value_parser = parse_scheme)]
        scheme: Scheme,
        /// Comma-separated `CWE-089:python`, `CWE-089` or `python`; all pairs when omitted.
        #[arg(long, value_parser = parse_pair_filter)]
        pairs: Option<PairFilter>,
    },
    /// Token usage and cost from the recorded usage ledger.
    Cost,
    /// Funnel counts from recorded state.
    Funnel {
        #[arg(long, value_parser = parse_scheme)]
        scheme: Scheme,
    },
}

#[derive(Subcommand)]
enum DatasetCmd {
    /// Write instructions for selected outputs and package the dataset.
    Build {
        /// Restrict to one scheme; both when omitted.
        #[arg(long, value_parser = parse_scheme)]
        scheme: Option<Scheme>,
        /// Output directory; `<datasets_dir>/full` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Reduce a dataset to `--size` examples, keeping every pair.
    Downsample {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
        /// Defaults to the config's rng_seed.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Drop examples duplicating benchmark code.
    Dedup {
        #[arg(long)]
        input: PathBuf,
        /// Benchmark corpus, JSONL of {id, cwe_id?, language?, code}.
        #[arg(long)]
        bench: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        threshold: Option<f64>,
    },
    /// Within-CWE diversity and, with references, leakage.
    Similarity {
        #[arg(long)]
        input: PathBuf,
        /// Reference corpus, JSONL of {id, cwe_id, language?, code}.
        #[arg(long)]
        references: Option<PathBuf>,
        /// JSON report path; `<reports_dir>/similarity.json` by default.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EvalRunArgs {
    /// Configured provider name, or an endpoint URL.
    #[arg(long)]
    model: String,
    /// Model id sent to a URL endpoint; the provider's model otherwise.
    #[arg(long)]
    model_id: Option<String>,
    /// Scenario directory; the config's benchmarks_dir by default.
    #[arg(long)]
    bench: Option<PathBuf>,
    #[arg(long)]
    n: Option<u32>,
    #[arg(long)]
    temp: Option<f64>,
    /// Output directory; `<reports_dir>/<model>` by default.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum EvalCmd {
    /// Sample every scenario and judge the samples.
    Run(EvalRunArgs),
    /// Render a results or report file, or compare two.
    Report {
        #[arg(required_unless_present = "compare")]
        input: Option<PathBuf>,
        #[arg(long, num_args = 2, value_names = ["A", "B"], conflicts_with = "input")]
        compare: Option<Vec<PathBuf>>,
        /// Also write the JSON report or comparison here.
        #[arg(long)]
        json: Option<PathBuf>,
    },
}

fn parse_scheme(s: &str) -> Result<Scheme, String> {
    s.parse()
}

#[derive(Debug, Clone, Default)]
struct PairFilter {
    pairs: BTreeSet<CwePair>,
    cwes: BTreeSet<CweId>,
    languages: BTreeSet<Language>,
}

impl PairFilter {
    fn select(&self, all: &BTreeSet<CwePair>) -> Result<Vec<CwePair>> {
        for p in &self.pairs {
            if !all.contains(p) {
                bail!("pair {p} is not in the seed corpus");
            }
        }
        Ok(all
            .iter()
            .filter(|p| self.pairs.contains(p) || self.cwes.contains(&p.cwe_id) || self.languages.contains(&p.language))
            .cloned()
            .collect())
    }
}

fn parse_pair_filter(s: &str) -> Result<PairFilter, String> {
    let mut f = PairFilter::default();
    for item in s.split(',').map(str::trim).filter(|i| !i.is_empty()) {
        if item.contains(':') {
            f.pairs.insert(item.parse()?);
        } else if let Ok(c) = CweId::parse(item) {
            f.cwes.insert(c);
        } else {
            f.languages.insert(item.parse()?);
        }
    }
    Ok(f)
}

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::from_env()?,
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let body = serde_json::to_string_pretty(value)? + "\n";
    fs::write(path, body).with_context(|| format!("writing {}", path.display()))
}

fn seeds_validate(dir: &Path) -> Result<()> {
    let report = validate_seed_corpus(dir);
    print!("{report}");
    if !report.is_ok() {
        bail!("{} seed error(s)", report.errors.len());
    }
    Ok(())
}

fn synth_run(cfg: &RunConfig, scheme: Scheme, filter: Option<&PairFilter>) -> Result<()> {
    cfg.require_dir("seeds_dir", &cfg.seeds_dir)?;
    let seeds = load_seed_corpus(&cfg.seeds_dir)?;
    let pairs: Vec<CwePair> = match filter {
        Some(f) => f.select(seeds.pairs())?,
        None => seeds.pairs().iter().cloned().collect(),
    };
    if pairs.is_empty() {
        bail!("no CWE-language pairs selected");
    }
    let ledger = cfg.usage_ledger()?;
    let providers = cfg.synth_providers(&ledger)?;
    let verifier = Arc::new(cfg.verifier(seeds.pairs())?);
    let store = Arc::new(cfg.state_store()?);
    let pipeline = Pipeline::new(providers, verifier, store.clone(), cfg.synth.clone())?;
    log::info!("{scheme}: {} pair(s)", pairs.len());
    let report = pipeline.run(scheme, &seeds, &pairs)?;
    for o in &report.outcomes {
        for s in &o.shortfalls {
            eprintln!("warning: {} via {}: {}/{} ({})", o.pair, s.provider, s.achieved, s.target, s.reason);
        }
    }
    let state = store.snapshot();
    let f = funnel(&state, scheme, &cfg.synth);
    print!("{f}");
    let path = cfg.reports_dir.join(format!("funnel-{}.json", scheme.id()));
    write_json(&path, &json!({"rng_seed": cfg.rng_seed, "scheme": scheme, "funnel": f}))?;
    if !report.aborted.is_empty() {
        for (p, why) in &report.aborted {
            eprintln!("error: {p} aborted: {why}");
        }
        bail!("{} pair(s) aborted; rerun to resume", report.aborted.len());
    }
    Ok(())
}

fn synth_cost(cfg: &RunConfig) -> Result<()> {
    let path = cfg.state_dir.join(USAGE_FILE);
    let entries = read_usage_file(&path).with_context(|| format!("reading {}", path.display()))?;
    let report = cost_report(&entries, &cfg.pricing());
    print!("{report}");
    write_json(&cfg.reports_dir.join("cost.json"), &report)
}

fn synth_funnel(cfg: &RunConfig, scheme: Scheme) -> Result<()> {
    let state = resume(&cfg.state_dir.join(RECORDS_FILE))?;
    print!("{}", funnel(&state, scheme, &cfg.synth));
    Ok(())
}

fn dataset_build(cfg: &RunConfig, scheme: Option<Scheme>, out: Option<PathBuf>) -> Result<()> {
    let state = resume(&cfg.state_dir.join(RECORDS_FILE))?;
    let pick = |s: Scheme| scheme.is_none_or(|x| x == s);
    let mut selected = Selected::default();
    if pick(Scheme::VulSecure) {
        selected.pairs = select_outputs(&state, Scheme::VulSecure, &cfg.synth).pairs;
    }
    if pick(Scheme::SecureOnly) {
        selected.secure = select_outputs(&state, Scheme::SecureOnly, &cfg.synth).secure;
    }
    let ledger = cfg.usage_ledger()?;
    let (gateway, params) = cfg.instruction_gateway(ledger)?;
    let (instructions, failed) = generate_instructions(&selected, &gateway, &params);
    if !failed.is_empty() {
        eprintln!("warning: {} record(s) without an instruction were left out", failed.len());
        selected.pairs.retain(|(_, s)| instructions.contains_key(&s.record_id));
        selected.secure.retain(|s| instructions.contains_key(&s.record_id));
    }
    let examples = build_examples(&selected, &instructions, cfg.dataset.mask_granularity)?;
    let pkg = package_dataset(examples, &cfg.dataset.format_id, Some(cfg.rng_seed))?;
    let out = out.unwrap_or_else(|| cfg.datasets_dir.join("full"));
    pkg.write(&out)?;
    let c = &pkg.manifest.counts;
    println!(
        "{} examples ({} with vulnerable counterpart) over {} pairs -> {}",
        c.total,
        c.with_vulnerable,
        c.by_pair.len(),
        out.display()
    );
    Ok(())
}

fn dataset_downsample(cfg: &RunConfig, input: &Path, size: usize, out: &Path, seed: Option<u64>) -> Result<()> {
    let parent = load_dataset(input)?;
    let seed = seed.unwrap_or(cfg.rng_seed);
    let kept = downsample(&parent.examples, size, seed)?;
    let pkg = package_dataset(kept, &parent.manifest.format_id, Some(seed))?.derived(&parent);
    pkg.write(out)?;
    println!(
        "{} -> {} examples over {} pairs -> {}",
        parent.examples.len(),
        pkg.examples.len(),
        pkg.manifest.counts.by_pair.len(),
        out.display()
    );
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<CorpusItem>> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(parse_jsonl(path, &text)?)
}

fn dataset_dedup(cfg: &RunConfig, input: &Path, bench: &Path, out: &Path, threshold: Option<f64>) -> Result<()> {
    let parent = load_dataset(input)?;
    let benchmark = read_corpus(bench)?;
    let (kept, report) = dedup(&parent.examples, &benchmark, threshold.unwrap_or(cfg.dataset.dedup_threshold))?;
    let seed = parent.manifest.rng_seed;
    let pkg = package_dataset(kept, &parent.manifest.format_id, seed)?.derived(&parent);
    pkg.write(out)?;
    write_json(&out.join("dedup_report.json"), &report)?;
    println!(
        "{} examined, {} removed at threshold {} -> {}",
        report.examined,
        report.removed.len(),
        report.threshold,
        out.display()
    );
    Ok(())
}

fn dataset_similarity(cfg: &RunConfig, input: &Path, references: Option<&Path>, out: Option<PathBuf>) -> Result<()> {
    let ds = load_dataset(input)?;
    let div = diversity(&ds.examples);
    let fmt = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{v:.4}"));
    println!("diversity: mean within-CWE similarity {} over {} pair(s)", fmt(div.mean), div.pairs_compared);
    let leakage = match references {
        Some(r) => {
            let refs = read_corpus(r)?;
            let l = leakage_report(&ds.examples, &refs);
            println!(
                "leakage: mean max similarity {} ({} example(s) without a same-CWE reference)",
                fmt(l.mean),
                l.no_reference
            );
            Some(l)
        }
        None => None,
    };
    let out = out.unwrap_or_else(|| cfg.reports_dir.join("similarity.json"));
    write_json(&out, &json!({"dataset_sha256": ds.manifest.dataset_sha256, "diversity": div, "leakage": leakage}))
}

fn sanitize(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || "-_.".contains(c) { c } else { '_' }).collect()
}

fn eval_run(cfg: &RunConfig, args: &EvalRunArgs) -> Result<()> {
    let bench = args.bench.clone().unwrap_or_else(|| cfg.benchmarks_dir.clone());
    cfg.require_dir("benchmark directory", &bench)?;
    let scenarios = load_scenarios(&bench)?;
    let provider = match cfg.provider(&args.model) {
        Ok(p) => {
            let mut p = p.clone();
            if let Some(id) = &args.model_id {
                p.model_id = id.clone();
            }
            p
        }
        Err(_) if args.model.starts_with("http://") || args.model.starts_with("https://") => {
            let id = args.model_id.clone().context("--model-id is required with an endpoint URL")?;
            ProviderConfig::new("endpoint", &args.model, id)
        }
        Err(e) => return Err(e.into()),
    };
    let gateway = cfg.gateway(&provider, Arc::new(UsageLedger::in_memory()))?;
    let base = GenParams { max_tokens: cfg.eval.max_tokens, ..GenParams::evaluation(&provider.model_id) };
    let overrides =
        EvalOverrides { n_samples: args.n.or(cfg.eval.n_samples), temperature: args.temp.or(cfg.eval.temperature) };
    let mut judges = Judges::new(cfg.eval.sandbox);
    if scenarios.iter().any(|s| matches!(s.judge.security, SecurityJudge::Analyzer)) {
        judges = judges.with_analyzer(cfg.eval_analyzer()?);
    }
    let out = args.out.clone().unwrap_or_else(|| cfg.reports_dir.join(sanitize(&provider.model_id)));
    fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    let run = run_eval(&gateway, &base, &scenarios, &judges, overrides, &out)?;
    write_json(&out.join("results.json"), &run)?;
    let report = MetricReport::from_run(&run);
    fs::write(out.join("report.json"), report.to_json())?;
    write_json(
        &out.join("run.json"),
        &json!({
            "model": run.model,
            "rng_seed": cfg.rng_seed,
            "bench": bench,
            "scenarios": scenarios.len(),
            "n_samples": overrides.n_samples,
            "temperature": overrides.temperature,
        }),
    )?;
    print!("{report}");
    if !run.aborted.is_empty() {
        bail!("{} scenario(s) aborted", run.aborted.len());
    }
    Ok(())
}

/// Accepts either a saved report or raw results.
fn load_report(path: &Path) -> Result<MetricReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if let Ok(r) = serde_json::from_str::<MetricReport>(&text) {
        return Ok(r);
    }
    Ok(MetricReport::from_run(&EvalRun::load(path)?))
}

fn eval_report(input: Option<&Path>, compare: Option<&[PathBuf]>, json_out: Option<&Path>) -> Result<()> {
    match (input, compare) {
        (_, Some([a, b])) => {
            let c = cwesynth::eval::compare(&load_report(a)?, &load_report(b)?);
            print!("{c}");
            if let Some(p) = json_out {
                write_json(p, &c)?;
            }
        }
        (Some(input), _) => {
            let r = load_report(input)?;
            print!("{r}");
            if let Some(p) = json_out {
                fs::write(p, r.to_json()).with_context(|| format!("writing {}", p.display()))?;
            }
        }
        _ => bail!("nothing to report"),
    }
    Ok(())
}

fn dispatch(cli: Cli) -> Result<()> {
    let cfg = || load_config(cli.config.as_deref());
    match cli.command {
        Command::Seeds(SeedsCmd::Validate { dir }) => seeds_validate(&dir),
        Command::Synth(SynthCmd::Run { scheme, pairs }) => synth_run(&cfg()?, scheme, pairs.as_ref()),
        Command::Synth(SynthCmd::Cost) => synth_cost(&cfg()?),
        Command::Synth(SynthCmd::Funnel { scheme }) => synth_funnel(&cfg()?, scheme),
        Command::Dataset(DatasetCmd::Build { scheme, out }) => dataset_build(&cfg()?, scheme, out),
        Command::Dataset(DatasetCmd::Downsample { input, size, out, seed }) => {
            dataset_downsample(&cfg()?, &input, size, &out, seed)
        }
        Command::Dataset(DatasetCmd::Dedup { input, bench, out, threshold }) => {
            dataset_dedup(&cfg()?, &input, &bench, &out, threshold)
        }
        Command::Dataset(DatasetCmd::Similarity { input, references, out }) => {
            dataset_similarity(&cfg()?, &input, references.as_deref(), out)
        }
        Command::Eval(EvalCmd::Run(args)) => eval_run(&cfg()?, &args),
        Command::Eval(EvalCmd::Report { input, compare, json }) => {
            eval_report(input.as_deref(), compare.as_deref(), json.as_deref())
        }
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
