//! Pipeline records and their stage machine.

use std::fmt;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::gateway::{CodeSnippet, GenParams};
use crate::seeds::CwePair;
use crate::verifier::Decision;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    VulSecure,
    SecureOnly,
}

impl Scheme {
    pub fn id(self) -> &'static str {
        match self {
            Scheme::VulSecure => "vul_secure",
            Scheme::SecureOnly => "secure_only",
        }
    }
}

impl fmt::Display for Scheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

impl std::str::FromStr for Scheme {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.replace('-', "_").as_str() {
            "vul_secure" => Ok(Scheme::VulSecure),
            "secure" | "secure_only" => Ok(Scheme::SecureOnly),
            _ => Err(format!("unknown scheme `{s}` (expected vul-secure or secure)")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    Generated,
    VerifiedVulnerable,
    Fixed,
    VerifiedSecure,
    Rejected,
}

impl Stage {
    pub fn is_terminal(self) -> bool {
        matches!(self, Stage::VerifiedVulnerable | Stage::VerifiedSecure | Stage::Rejected)
    }

    /// Whether a record may move from `from` (None: first write) to `self`.
    /// A fix is written as `Fixed` then settles; a parent settles at
    /// `VerifiedVulnerable`.
    pub fn may_follow(self, from: Option<Stage>, scheme: Scheme, is_fix: bool) -> bool {
        use Stage::*;
        match (scheme, is_fix, from, self) {
            (_, _, Some(a), b) if a == b => true,
            (Scheme::VulSecure, false, None, Generated | Rejected) => true,
            (Scheme::VulSecure, false, Some(Generated), VerifiedVulnerable | Rejected) => true,
            (Scheme::VulSecure, true, None, Fixed | Rejected) => true,
            (Scheme::VulSecure, true, Some(Fixed), VerifiedSecure | Rejected) => true,
            (Scheme::SecureOnly, false, None, Generated | Rejected) => true,
            (Scheme::SecureOnly, false, Some(Generated), VerifiedSecure | Rejected) => true,
            _ => false,
        }
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = serde_json::to_value(self).expect("stage serializes");
        f.write_str(s.as_str().unwrap_or("?"))
    }
}

/// Where a record sits in the generation plan: provider, candidate index and,
/// for fixes, fix index.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct Slot {
    pub provider: String,
    pub candidate: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fix: Option<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub model_id: String,
    pub prompt_hash: String,
    pub gen_params: GenParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthRecord {
    pub record_id: String,
    pub pair: CwePair,
    pub scheme: Scheme,
    pub stage: Stage,
    pub slot: Slot,
    pub code: CodeSnippet,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent_id: Option<String>,
    pub provenance: Provenance,
    #[serde(default)]
    pub decisions: Vec<Decision>,
    /// Why the record was rejected without a verifier decision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub rejection: Option<String>,
}

impl SynthRecord {
    pub fn is_fix(&self) -> bool {
        self.slot.fix.is_some()
    }
}

const CROCKFORD: &[u8; 32] = b"0123456789ABCDEFGHJKMNPQRSTVWXYZ";

/// Deterministic 26-character Crockford base32 id for a plan slot.
pub fn record_id(scheme: Scheme, pair: &CwePair, slot: &Slot) -> String {
    let fix = slot.fix.map_or_else(|| "-".to_string(), |f| f.to_string());
    let digest = Sha256::digest(format!("{scheme}|{pair}|{}|{}|{fix}", slot.provider, slot.candidate).as_bytes());
    let value = u128::from_be_bytes(digest[..16].try_into().expect("16 bytes"));
    // 26 digits × 5 bits = 130 bits; the top digit carries 3 bits
    (0..26).rev().map(|i| CROCKFORD[((value >> (i * 5)) & 0x1f) as usize] as char).collect()
}
