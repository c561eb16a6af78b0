//! On-disk transcript cache: recorded request/response pairs keyed by a hash
//! of the request, so runs can be replayed offline and bit-for-bit.

use std::collections::HashMap;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use serde_json::json;
use sha2::{Digest, Sha256};

use super::provider::{CompletionRequest, RawResponse};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CacheMode {
    /// Serve hits, call the provider on a miss and record the answer.
    ReadWrite,
    /// Serve hits only; a miss is an error and the network is never touched.
    ReplayOnly,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TranscriptEntry {
    pub key: String,
    pub provider: String,
    pub sample_index: u32,
    pub temperature: f64,
    pub max_tokens: u32,
    pub prompt: String,
    pub response: RawResponse,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Cache key for `request` sent to `provider`.
pub fn transcript_key(provider: &str, request: &CompletionRequest) -> String {
    let canonical = json!({
        "provider": provider,
        "model_id": request.params.model_id,
        "prompt": request.prompt,
        "temperature": request.params.temperature,
        "max_tokens": request.params.max_tokens,
        "sample_index": request.sample_index,
    });
    sha256_hex(canonical.to_string().as_bytes())
}

#[derive(Debug)]
pub struct TranscriptCache {
    path: PathBuf,
    mode: CacheMode,
    entries: Mutex<HashMap<String, TranscriptEntry>>,
    writer: Mutex<Option<File>>,
}

impl TranscriptCache {
    /// Opens (or creates, in read-write mode) the JSONL transcript at `path`.
    /// Unparseable lines are skipped with a warning.
    pub fn open(path: &Path, mode: CacheMode) -> std::io::Result<Self> {
        let mut entries = HashMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (n, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<TranscriptEntry>(&line) {
                    Ok(e) => {
                        entries.insert(e.key.clone(), e);
                    }
                    Err(err) => log::warn!("{}:{}: skipping transcript line: {err}", path.display(), n + 1),
                }
            }
        } else if mode == CacheMode::ReplayOnly {
            log::warn!("transcript {} does not exist; every request will miss", path.display());
        }
        Ok(Self { path: path.to_path_buf(), mode, entries: Mutex::new(entries), writer: Mutex::new(None) })
    }

    pub fn mode(&self) -> CacheMode {
        self.mode
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn len(&self) -> usize {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, key: &str) -> Option<RawResponse> {
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).get(key).map(|e| e.response.clone())
    }

    pub fn insert(&self, entry: TranscriptEntry) -> std::io::Result<()> {
        let mut line = serde_json::to_string(&entry).map_err(std::io::Error::other)?;
        line.push('\n');
        {
            let mut writer = self.writer.lock().unwrap_or_else(|e| e.into_inner());
            if writer.is_none() {
                if let Some(parent) = self.path.parent() {
                    fs::create_dir_all(parent)?;
                }
                let mut file = OpenOptions::new().create(true).append(true).open(&self.path)?;
                // a torn final line from an earlier crash must not swallow ours
                if file.metadata()?.len() > 0 && !ends_with_newline(&self.path)? {
                    file.write_all(b"\n")?;
                }
                *writer = Some(file);
            }
            let file = writer.as_mut().expect("writer opened");
            file.write_all(line.as_bytes())?;
            file.flush()?;
        }
        self.entries.lock().unwrap_or_else(|e| e.into_inner()).insert(entry.key.clone(), entry);
        Ok(())
    }
}

pub(crate) fn ends_with_newline(path: &Path) -> std::io::Result<bool> {
    use std::io::{Read, Seek, SeekFrom};
    let mut f = File::open(path)?;
    if f.metadata()?.len() == 0 {
        return Ok(true);
    }
    f.seek(SeekFrom::End(-1))?;
    let mut b = [0u8; 1];
    f.read_exact(&mut b)?;
    Ok(b[0] == b'\n')
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::provider::{GenParams, Usage};

    fn req(prompt: &str, idx: u32) -> CompletionRequest {
        CompletionRequest { prompt: prompt.into(), params: GenParams::synthesis("m"), sample_index: idx }
    }

    fn resp(text: &str) -> RawResponse {
        RawResponse {
            text: text.into(),
            provider: "p".into(),
            model_id: "m".into(),
            usage: Usage::default(),
            latency_ms: 0,
            retries: 0,
            error: None,
        }
    }

    #[test]
    fn key_separates_samples_and_params() {
        let a = transcript_key("p", &req("x", 0));
        assert_eq!(a, transcript_key("p", &req("x", 0)));
        assert_ne!(a, transcript_key("p", &req("x", 1)));
        assert_ne!(a, transcript_key("q", &req("x", 0)));
        let mut r = req("x", 0);
        r.params.temperature = 0.5;
        assert_ne!(a, transcript_key("p", &r));
    }

    #[test]
    fn persists_and_skips_torn_lines() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.jsonl");
        let cache = TranscriptCache::open(&path, CacheMode::ReadWrite).unwrap();
        let key = transcript_key("p", &req("x", 0));
        cache
            .insert(TranscriptEntry {
                key: key.clone(),
                provider: "p".into(),
                sample_index: 0,
                temperature: 1.0,
                max_tokens: 10,
                prompt: "x".into(),
                response: resp("hello"),
            })
            .unwrap();
        drop(cache);
        let mut f = OpenOptions::new().append(true).open(&path).unwrap();
        f.write_all(b"{\"key\":\"trunc").unwrap();
        drop(f);
        let cache = TranscriptCache::open(&path, CacheMode::ReplayOnly).unwrap();
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.get(&key).unwrap().text, "hello");
    }
}
