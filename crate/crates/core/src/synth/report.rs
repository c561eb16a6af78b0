//! Funnel counts and output selection, both computed from recorded state so
//! they are identical whether or not a run was interrupted.

use std::collections::BTreeMap;
use std::fmt;

use serde::Serialize;

use super::record::{Scheme, Stage, SynthRecord};
use super::store::PipelineState;
use super::{FixPolicy, SchemeConfig};
use crate::seeds::CwePair;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FunnelRow {
    /// First-stage generations (vulnerable candidates or secure attempts).
    pub candidates: usize,
    pub verified_vulnerable: usize,
    pub fixes: usize,
    pub verified_secure: usize,
    /// Outputs kept for the dataset.
    pub selected: usize,
}

impl FunnelRow {
    fn add(&mut self, o: &FunnelRow) {
        self.candidates += o.candidates;
        self.verified_vulnerable += o.verified_vulnerable;
        self.fixes += o.fixes;
        self.verified_secure += o.verified_secure;
        self.selected += o.selected;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FunnelReport {
    pub scheme: Scheme,
    pub rows: BTreeMap<CwePair, FunnelRow>,
    pub totals: FunnelRow,
    /// Pairs with at least one selected output.
    pub yielding_pairs: usize,
}

impl fmt::Display for FunnelReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "{:<22} {:>10} {:>10} {:>8} {:>10} {:>9}",
            "pair", "candidates", "verif_vul", "fixes", "verif_sec", "selected"
        )?;
        let total = ("TOTAL".to_string(), &self.totals);
        for (name, r) in self.rows.iter().map(|(p, r)| (p.to_string(), r)).chain([total]) {
            writeln!(
                f,
                "{:<22} {:>10} {:>10} {:>8} {:>10} {:>9}",
                name, r.candidates, r.verified_vulnerable, r.fixes, r.verified_secure, r.selected
            )?;
        }
        writeln!(f, "yielding pairs: {}/{}", self.yielding_pairs, self.rows.len())
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Selected {
    pub pairs: Vec<(SynthRecord, SynthRecord)>,
    pub secure: Vec<SynthRecord>,
}

/// Dataset outputs for `scheme`: verified (vulnerable, fix) pairs under the
/// configured fix policy, or the first `n_secure_per_pair` verified-secure
/// records per pair and provider by attempt index.
pub fn select_outputs(state: &PipelineState, scheme: Scheme, cfg: &SchemeConfig) -> Selected {
    let mut out = Selected::default();
    let mut recs: Vec<&SynthRecord> = state.records.values().filter(|r| r.scheme == scheme).collect();
    recs.sort_by(|a, b| (&a.pair, &a.slot).cmp(&(&b.pair, &b.slot)));
    match scheme {
        Scheme::VulSecure => {
            let mut taken: BTreeMap<&str, usize> = BTreeMap::new();
            for fix in recs.iter().filter(|r| r.is_fix() && r.stage == Stage::VerifiedSecure) {
                let Some(parent) = fix.parent_id.as_deref().and_then(|id| state.get(id)) else {
                    continue;
                };
                if parent.stage != Stage::VerifiedVulnerable || parent.pair != fix.pair {
                    continue;
                }
                let n = taken.entry(parent.record_id.as_str()).or_default();
                if cfg.fix_policy == FixPolicy::FirstSuccess && *n > 0 {
                    continue;
                }
                *n += 1;
                out.pairs.push((parent.clone(), (*fix).clone()));
            }
        }
        Scheme::SecureOnly => {
            let mut per_group: BTreeMap<(&CwePair, &str), u32> = BTreeMap::new();
            for r in recs.iter().filter(|r| r.stage == Stage::VerifiedSecure) {
                let n = per_group.entry((&r.pair, r.slot.provider.as_str())).or_default();
                if *n < cfg.n_secure_per_pair {
                    *n += 1;
                    out.secure.push((*r).clone());
                }
            }
        }
    }
    out
}

pub fn funnel(state: &PipelineState, scheme: Scheme, cfg: &SchemeConfig) -> FunnelReport {
    let mut rows: BTreeMap<CwePair, FunnelRow> = BTreeMap::new();
    for r in state.records.values().filter(|r| r.scheme == scheme) {
        let row = rows.entry(r.pair.clone()).or_default();
        if r.is_fix() {
            row.fixes += 1;
        } else {
            row.candidates += 1;
        }
        match r.stage {
            Stage::VerifiedVulnerable => row.verified_vulnerable += 1,
            Stage::VerifiedSecure => row.verified_secure += 1,
            _ => {}
        }
    }
    let selected = select_outputs(state, scheme, cfg);
    let picked = selected.pairs.iter().map(|(_, fix)| &fix.pair).chain(selected.secure.iter().map(|r| &r.pair));
    for pair in picked {
        rows.entry(pair.clone()).or_default().selected += 1;
    }
    let mut totals = FunnelRow::default();
    for r in rows.values() {
        totals.add(r);
    }
    let yielding_pairs = rows.values().filter(|r| r.selected > 0).count();
    FunnelReport { scheme, rows, totals, yielding_pairs }
}
