//! The two data-generation schemes.
//!
//! *Vul-secure*: per provider, generate vulnerable candidates, keep those the
//! verifier confirms as vulnerable to the target CWE, then request fixes for
//! each and keep verified-secure fixes. *Secure-only*: per provider, generate
//! secure code until a quota of verified-secure snippets is reached or the
//! attempt budget runs out.
//!
//! Every record goes through the [`StateStore`]; work already recorded is
//! never repeated, so a run can be resumed after a crash.

mod record;
mod report;
mod store;

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub use record::{record_id, Provenance, Scheme, Slot, Stage, SynthRecord};
pub use report::{funnel, select_outputs, FunnelReport, FunnelRow, Selected};
pub use store::{resume, PipelineState, StateStore, StoreError, RECORDS_FILE, USAGE_FILE};

use crate::gateway::cache::sha256_hex;
use crate::gateway::template::{
    CODE, CWE_OVERALL_DESCRIPTION, EXPLANATION, GENERATED_VULNERABLE_CODE, LANGUAGE, TARGET_LANGUAGE,
};
use crate::gateway::{extract_code, render_prompt, CodeSnippet, Gateway, GatewayError, GenParams, TemplateId};
use crate::seeds::{select_example, CwePair, CweSeed, CweSeedSet};
use crate::verifier::{DecisionValue, Verifier, VerifierError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FixPolicy {
    /// Stop requesting fixes for a parent once one verifies secure.
    #[default]
    FirstSuccess,
    /// Request every fix and keep all that verify secure.
    KeepAll,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SchemeConfig {
    /// Vulnerable candidates per pair, per provider.
    pub n_vulnerable_per_pair: u32,
    pub n_fixes_per_vulnerable: u32,
    /// Verified-secure target per pair, per provider.
    pub n_secure_per_pair: u32,
    /// Secure-only attempt budget as a multiple of the target.
    pub budget_factor: u32,
    pub fix_policy: FixPolicy,
    pub providers: Vec<String>,
    pub rng_seed: u64,
    /// Pairs processed concurrently.
    pub pair_concurrency: usize,
}

impl Default for SchemeConfig {
    fn default() -> Self {
        Self {
            n_vulnerable_per_pair: 10,
            n_fixes_per_vulnerable: 5,
            n_secure_per_pair: 100,
            budget_factor: 5,
            fix_policy: FixPolicy::FirstSuccess,
            providers: Vec::new(),
            rng_seed: 0,
            pair_concurrency: 4,
        }
    }
}

impl SchemeConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        for (name, v) in [
            ("n_vulnerable_per_pair", self.n_vulnerable_per_pair),
            ("n_fixes_per_vulnerable", self.n_fixes_per_vulnerable),
            ("n_secure_per_pair", self.n_secure_per_pair),
            ("budget_factor", self.budget_factor),
        ] {
            if v == 0 {
                return Err(SynthError::Config(format!("{name} must be at least 1")));
            }
        }
        if self.pair_concurrency == 0 {
            return Err(SynthError::Config("pair_concurrency must be at least 1".into()));
        }
        Ok(())
    }

    pub fn secure_budget(&self) -> u32 {
        self.n_secure_per_pair.saturating_mul(self.budget_factor)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("invalid scheme config: {0}")]
    Config(String),
    #[error("{pair}: {message}")]
    PairAborted { pair: CwePair, message: String },
    #[error("no seed document for {0}")]
    MissingSeed(CwePair),
}

/// A gateway plus the generation parameters used with it.
#[derive(Clone)]
pub struct SynthProvider {
    pub gateway: Arc<Gateway>,
    pub params: GenParams,
}

impl SynthProvider {
    pub fn new(gateway: Arc<Gateway>, params: GenParams) -> Self {
        Self { gateway, params }
    }

    pub fn name(&self) -> &str {
        self.gateway.name()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Shortfall {
    pub provider: String,
    pub target: u32,
    pub achieved: u32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PairOutcome {
    pub pair: CwePair,
    pub scheme: Scheme,
    /// `(VerifiedVulnerable, VerifiedSecure)` under vul-secure.
    pub pairs: Vec<(SynthRecord, SynthRecord)>,
    /// Selected verified-secure records under secure-only.
    pub secure: Vec<SynthRecord>,
    pub shortfalls: Vec<Shortfall>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub outcomes: Vec<PairOutcome>,
    pub aborted: Vec<(CwePair, String)>,
}

enum SlotError {
    Exhausted(String),
    Abort(String),
    Store(StoreError),
}

impl From<StoreError> for SlotError {
    fn from(e: StoreError) -> Self {
        SlotError::Store(e)
    }
}

impl From<VerifierError> for SlotError {
    fn from(e: VerifierError) -> Self {
        SlotError::Abort(format!("verifier: {e}"))
    }
}

impl From<GatewayError> for SlotError {
    fn from(e: GatewayError) -> Self {
        if e.is_exhaustion() {
            SlotError::Exhausted(e.to_string())
        } else {
            SlotError::Abort(e.to_string())
        }
    }
}

/// Derives a per-slot RNG seed from the run seed.
pub fn derive_seed(base: u64, label: &str) -> u64 {
    let digest = Sha256::digest(format!("{base}|{label}").as_bytes());
    u64::from_be_bytes(digest[..8].try_into().expect("8 bytes"))
}

struct SlotJob<'a> {
    scheme: Scheme,
    pair: &'a CwePair,
    slot: Slot,
    parent_id: Option<String>,
    prompt: String,
    tag: String,
    provider: &'a SynthProvider,
    sample_index: u32,
    first_stage: Stage,
    want: DecisionValue,
    exhausted: &'a AtomicBool,
}

pub struct Pipeline {
    providers: Vec<SynthProvider>,
    verifier: Arc<Verifier>,
    store: Arc<StateStore>,
    cfg: SchemeConfig,
}

impl Pipeline {
    pub fn new(
        providers: Vec<SynthProvider>,
        verifier: Arc<Verifier>,
        store: Arc<StateStore>,
        cfg: SchemeConfig,
    ) -> Result<Self, SynthError> {
        cfg.validate()?;
        if providers.is_empty() {
            return Err(SynthError::Config("at least one provider is required".into()));
        }
        Ok(Self { providers, verifier, store, cfg })
    }

    pub fn store(&self) -> &Arc<StateStore> {
        &self.store
    }

    pub fn config(&self) -> &SchemeConfig {
        &self.cfg
    }

    fn generation_prompt(
        &self,
        template: TemplateId,
        seed: &CweSeed,
        pair: &CwePair,
        label: &str,
    ) -> Result<String, SlotError> {
        let example = select_example(seed, pair.language, derive_seed(self.cfg.rng_seed, label))
            .map_err(|e| SlotError::Abort(e.to_string()))?;
        let bindings = BTreeMap::from([
            (CWE_OVERALL_DESCRIPTION.to_string(), seed.overall_description()),
            (LANGUAGE.to_string(), example.language.display_name().to_string()),
            (CODE.to_string(), example.code.clone()),
            (EXPLANATION.to_string(), example.explanation.clone()),
            (TARGET_LANGUAGE.to_string(), pair.language.display_name().to_string()),
        ]);
        render_prompt(template, &bindings).map_err(|e| SlotError::Abort(e.to_string()))
    }

    fn fix_prompt(&self, seed: &CweSeed, pair: &CwePair, vulnerable: &CodeSnippet) -> Result<String, SlotError> {
        let bindings = BTreeMap::from([
            (CWE_OVERALL_DESCRIPTION.to_string(), seed.overall_description()),
            (GENERATED_VULNERABLE_CODE.to_string(), vulnerable.code.clone()),
            (LANGUAGE.to_string(), pair.language.display_name().to_string()),
        ]);
        render_prompt(TemplateId::FixVulnerable, &bindings).map_err(|e| SlotError::Abort(e.to_string()))
    }

    /// Generates (unless already recorded) and verifies one slot.
    fn run_slot(&self, job: SlotJob<'_>) -> Result<SynthRecord, SlotError> {
        let id = record_id(job.scheme, job.pair, &job.slot);
        let existing = self.store.get(&id);
        let record = match existing {
            Some(r) if r.stage.is_terminal() => return Ok(r),
            Some(r) => r,
            None => {
                if job.exhausted.load(Ordering::SeqCst) {
                    return Err(SlotError::Exhausted("provider exhausted earlier in this pair".into()));
                }
                let resp = match job.provider.gateway.complete(
                    &job.prompt,
                    &job.provider.params,
                    job.sample_index,
                    &job.tag,
                ) {
                    Ok(r) => r,
                    Err(e) => {
                        if e.is_exhaustion() {
                            job.exhausted.store(true, Ordering::SeqCst);
                        }
                        return Err(e.into());
                    }
                };
                let mut record = SynthRecord {
                    record_id: id.clone(),
                    pair: job.pair.clone(),
                    scheme: job.scheme,
                    stage: job.first_stage,
                    slot: job.slot.clone(),
                    code: CodeSnippet::new(job.pair.language, ""),
                    parent_id: job.parent_id.clone(),
                    provenance: Provenance {
                        model_id: resp.model_id.clone(),
                        prompt_hash: sha256_hex(job.prompt.as_bytes()),
                        gen_params: job.provider.params.clone(),
                    },
                    decisions: Vec::new(),
                    rejection: None,
                };
                match extract_code(&resp.text, job.pair.language) {
                    Ok(snippet) => {
                        record.code = snippet;
                        self.store.append(&record)?;
                        record
                    }
                    Err(e) => {
                        record.stage = Stage::Rejected;
                        record.rejection = Some(e.to_string());
                        self.store.append(&record)?;
                        return Ok(record);
                    }
                }
            }
        };
        let workspace = self.store.workspace(&id);
        let verification = self.verifier.verify(&record.code, job.pair, &workspace)?;
        if self.store.dir().is_none() {
            let _ = std::fs::remove_dir_all(&workspace);
        }
        let mut settled = record;
        settled.stage = match (verification.decision.value == job.want, job.want) {
            (true, DecisionValue::Vulnerable) => Stage::VerifiedVulnerable,
            (true, _) => Stage::VerifiedSecure,
            (false, _) => Stage::Rejected,
        };
        settled.decisions.push(verification.decision);
        self.store.append(&settled)?;
        Ok(settled)
    }

    /// Splits slot results into records and the first fatal or exhaustion
    /// error.
    fn partition(
        results: Vec<Result<SynthRecord, SlotError>>,
    ) -> Result<(Vec<SynthRecord>, Option<String>), SlotOutcomeError> {
        let mut records = Vec::new();
        let mut exhausted = None;
        let mut abort = None;
        for r in results {
            match r {
                Ok(rec) => records.push(rec),
                Err(SlotError::Store(e)) => return Err(SlotOutcomeError::Store(e)),
                Err(SlotError::Abort(m)) => abort = abort.or(Some(m)),
                Err(SlotError::Exhausted(m)) => exhausted = exhausted.or(Some(m)),
            }
        }
        if let Some(m) = abort {
            return Err(SlotOutcomeError::Abort(m));
        }
        Ok((records, exhausted))
    }

    /// Vul-secure scheme for one pair.
    pub fn run_vul_secure_scheme(&self, pair: &CwePair, seed: &CweSeed) -> Result<PairOutcome, SynthError> {
        let mut outcome = PairOutcome {
            pair: pair.clone(),
            scheme: Scheme::VulSecure,
            pairs: Vec::new(),
            secure: Vec::new(),
            shortfalls: Vec::new(),
        };
        for provider in &self.providers {
            let exhausted = AtomicBool::new(false);
            let results: Vec<_> = (0..self.cfg.n_vulnerable_per_pair)
                .into_par_iter()
                .map(|i| {
                    let label = format!("{pair}|{}|{i}", provider.name());
                    let prompt = self.generation_prompt(TemplateId::GenVulnerable, seed, pair, &label)?;
                    self.run_slot(SlotJob {
                        scheme: Scheme::VulSecure,
                        pair,
                        slot: Slot { provider: provider.name().to_string(), candidate: i, fix: None },
                        parent_id: None,
                        prompt,
                        tag: format!("{pair}/gen-vulnerable"),
                        provider,
                        sample_index: i,
                        first_stage: Stage::Generated,
                        want: DecisionValue::Vulnerable,
                        exhausted: &exhausted,
                    })
                })
                .collect();
            let (mut candidates, mut short) = Self::partition(results).map_err(|e| e.into_synth(pair))?;
            candidates.sort_by_key(|r| r.slot.candidate);
            let parents: Vec<SynthRecord> =
                candidates.into_iter().filter(|r| r.stage == Stage::VerifiedVulnerable).collect();
            let chains: Vec<Result<Vec<SynthRecord>, SlotOutcomeError>> =
                parents.par_iter().map(|parent| self.fix_chain(pair, seed, provider, parent, &exhausted)).collect();
            for (parent, chain) in parents.iter().zip(chains) {
                let chain = match chain {
                    Ok(c) => c,
                    Err(SlotOutcomeError::Exhausted(m)) => {
                        short = short.or(Some(m));
                        continue;
                    }
                    Err(e) => return Err(e.into_synth(pair)),
                };
                for fix in chain.into_iter().filter(|f| f.stage == Stage::VerifiedSecure) {
                    outcome.pairs.push((parent.clone(), fix));
                }
            }
            if let Some(reason) = short {
                let generated = (0..self.cfg.n_vulnerable_per_pair)
                    .filter(|i| {
                        let slot = Slot { provider: provider.name().to_string(), candidate: *i, fix: None };
                        self.store.get(&record_id(Scheme::VulSecure, pair, &slot)).is_some()
                    })
                    .count() as u32;
                outcome.shortfalls.push(Shortfall {
                    provider: provider.name().to_string(),
                    target: self.cfg.n_vulnerable_per_pair,
                    achieved: generated,
                    reason,
                });
            }
        }
        Ok(outcome)
    }

    fn fix_chain(
        &self,
        pair: &CwePair,
        seed: &CweSeed,
        provider: &SynthProvider,
        parent: &SynthRecord,
        exhausted: &AtomicBool,
    ) -> Result<Vec<SynthRecord>, SlotOutcomeError> {
        let prompt = self.fix_prompt(seed, pair, &parent.code).map_err(|e| match e {
            SlotError::Abort(m) | SlotError::Exhausted(m) => SlotOutcomeError::Abort(m),
            SlotError::Store(s) => SlotOutcomeError::Store(s),
        })?;
        let job = |j: u32| SlotJob {
            scheme: Scheme::VulSecure,
            pair,
            slot: Slot { provider: provider.name().to_string(), candidate: parent.slot.candidate, fix: Some(j) },
            parent_id: Some(parent.record_id.clone()),
            prompt: prompt.clone(),
            tag: format!("{pair}/fix"),
            provider,
            sample_index: j,
            first_stage: Stage::Fixed,
            want: DecisionValue::Secure,
            exhausted,
        };
        let n = self.cfg.n_fixes_per_vulnerable;
        match self.cfg.fix_policy {
            FixPolicy::FirstSuccess => {
                let mut out = Vec::new();
                for j in 0..n {
                    let rec = match self.run_slot(job(j)) {
                        Ok(r) => r,
                        Err(SlotError::Exhausted(m)) => return Err(SlotOutcomeError::Exhausted(m)),
                        Err(SlotError::Abort(m)) => return Err(SlotOutcomeError::Abort(m)),
                        Err(SlotError::Store(e)) => return Err(SlotOutcomeError::Store(e)),
                    };
                    let done = rec.stage == Stage::VerifiedSecure;
                    out.push(rec);
                    if done {
                        break;
                    }
                }
                Ok(out)
            }
            FixPolicy::KeepAll => {
                let results: Vec<_> = (0..n).into_par_iter().map(|j| self.run_slot(job(j))).collect();
                let (mut recs, exhausted) = Self::partition(results)?;
                if let Some(m) = exhausted {
                    return Err(SlotOutcomeError::Exhausted(m));
                }
                recs.sort_by_key(|r| r.slot.fix);
                Ok(recs)
            }
        }
    }

    /// Secure-only scheme for one pair.
    pub fn run_secure_scheme(&self, pair: &CwePair, seed: &CweSeed) -> Result<PairOutcome, SynthError> {
        let quota = self.cfg.n_secure_per_pair;
        let budget = self.cfg.secure_budget();
        let mut outcome = PairOutcome {
            pair: pair.clone(),
            scheme: Scheme::SecureOnly,
            pairs: Vec::new(),
            secure: Vec::new(),
            shortfalls: Vec::new(),
        };
        for provider in &self.providers {
            let slot = |i: u32| Slot { provider: provider.name().to_string(), candidate: i, fix: None };
            let mut stages: Vec<Option<Stage>> = (0..budget)
                .map(|i| {
                    self.store
                        .get(&record_id(Scheme::SecureOnly, pair, &slot(i)))
                        .map(|r| r.stage)
                        .filter(|s| s.is_terminal())
                })
                .collect();
            let exhausted = AtomicBool::new(false);
            let mut short_reason = None;
            loop {
                let verified = stages.iter().filter(|s| **s == Some(Stage::VerifiedSecure)).count() as u32;
                if verified >= quota {
                    break;
                }
                let need = (quota - verified) as usize;
                let batch: Vec<u32> = (0..budget).filter(|i| stages[*i as usize].is_none()).take(need).collect();
                if batch.is_empty() {
                    short_reason = Some(format!("attempt budget of {budget} exhausted"));
                    break;
                }
                let results: Vec<_> = batch
                    .par_iter()
                    .map(|&i| {
                        let label = format!("{pair}|{}|{i}", provider.name());
                        let prompt = self.generation_prompt(TemplateId::GenSecure, seed, pair, &label)?;
                        self.run_slot(SlotJob {
                            scheme: Scheme::SecureOnly,
                            pair,
                            slot: slot(i),
                            parent_id: None,
                            prompt,
                            tag: format!("{pair}/gen-secure"),
                            provider,
                            sample_index: i,
                            first_stage: Stage::Generated,
                            want: DecisionValue::Secure,
                            exhausted: &exhausted,
                        })
                    })
                    .collect();
                let (records, exhausted_msg) = Self::partition(results).map_err(|e| e.into_synth(pair))?;
                for r in records {
                    stages[r.slot.candidate as usize] = Some(r.stage);
                }
                if let Some(m) = exhausted_msg {
                    short_reason = Some(m);
                    break;
                }
            }
            let mut chosen: Vec<SynthRecord> = (0..budget)
                .filter(|i| stages[*i as usize] == Some(Stage::VerifiedSecure))
                .filter_map(|i| self.store.get(&record_id(Scheme::SecureOnly, pair, &slot(i))))
                .take(quota as usize)
                .collect();
            let achieved = chosen.len() as u32;
            if achieved < quota {
                outcome.shortfalls.push(Shortfall {
                    provider: provider.name().to_string(),
                    target: quota,
                    achieved,
                    reason: short_reason.unwrap_or_else(|| "incomplete".into()),
                });
            }
            outcome.secure.append(&mut chosen);
        }
        Ok(outcome)
    }

    /// Runs `scheme` over `pairs` with bounded pair concurrency. Pairs that
    /// abort are reported; a store failure stops the whole run.
    pub fn run(&self, scheme: Scheme, seeds: &CweSeedSet, pairs: &[CwePair]) -> Result<RunReport, SynthError> {
        for p in pairs {
            if seeds.get(&p.cwe_id).is_none() {
                return Err(SynthError::MissingSeed(p.clone()));
            }
        }
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(self.cfg.pair_concurrency)
            .build()
            .map_err(|e| SynthError::Config(e.to_string()))?;
        let results: Vec<Result<PairOutcome, SynthError>> = pool.install(|| {
            pairs
                .par_iter()
                .map(|pair| {
                    let seed = seeds.get(&pair.cwe_id).expect("checked above");
                    match scheme {
                        Scheme::VulSecure => self.run_vul_secure_scheme(pair, seed),
                        Scheme::SecureOnly => self.run_secure_scheme(pair, seed),
                    }
                })
                .collect()
        });
        let mut report = RunReport { outcomes: Vec::new(), aborted: Vec::new() };
        for r in results {
            match r {
                Ok(o) => report.outcomes.push(o),
                Err(SynthError::PairAborted { pair, message }) => {
                    log::error!("{pair}: aborted: {message}");
                    report.aborted.push((pair, message));
                }
                Err(e) => return Err(e),
            }
        }
        Ok(report)
    }
}

enum SlotOutcomeError {
    Exhausted(String),
    Abort(String),
    Store(StoreError),
}

impl SlotOutcomeError {
    fn into_synth(self, pair: &CwePair) -> SynthError {
        match self {
            SlotOutcomeError::Store(e) => SynthError::Store(e),
            SlotOutcomeError::Abort(m) | SlotOutcomeError::Exhausted(m) => {
                SynthError::PairAborted { pair: pair.clone(), message: m }
            }
        }
    }
}
