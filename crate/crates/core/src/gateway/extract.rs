//! Pulling a single code block out of a model reply.

use serde::{Deserialize, Serialize};

use crate::seeds::Language;

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum ExtractError {
    #[error("response text is empty")]
    EmptyResponse,
    #[error("response contains no fenced code block")]
    NoCodeBlock,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CodeSnippet {
    pub language: Language,
    pub code: String,
}

impl CodeSnippet {
    pub fn new(language: Language, code: impl Into<String>) -> Self {
        Self { language, code: code.into() }
    }

    /// Markdown rendering that `extract_code` maps back to `self`.
    pub fn to_fenced(&self) -> String {
        format!("```{}\n{}\n```", self.language.id(), self.code)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FencedBlock<'a> {
    pub info: &'a str,
    pub body: &'a str,
}

struct Line<'a> {
    start: usize,
    text: &'a str,
}

fn lines(text: &str) -> Vec<Line<'_>> {
    let mut out = Vec::new();
    let mut start = 0;
    for piece in text.split_inclusive('\n') {
        out.push(Line { start, text: piece });
        start += piece.len();
    }
    out
}

/// `(fence char, fence length, info string)` when `line` opens a fence.
fn opening(line: &str) -> Option<(u8, usize, &str)> {
    let line = line.trim_end_matches(['\n', '\r']);
    let indent = line.len() - line.trim_start_matches(' ').len();
    if indent > 3 {
        return None;
    }
    let rest = &line[indent..];
    let ch = *rest.as_bytes().first()?;
    if ch != b'`' && ch != b'~' {
        return None;
    }
    let len = rest.bytes().take_while(|&b| b == ch).count();
    if len < 3 {
        return None;
    }
    let info = rest[len..].trim();
    if ch == b'`' && info.contains('`') {
        return None;
    }
    Some((ch, len, info))
}

fn closes(line: &str, ch: u8, len: usize) -> bool {
    let t = line.trim_end_matches(['\n', '\r']);
    let indent = t.len() - t.trim_start_matches(' ').len();
    if indent > 3 {
        return false;
    }
    let t = t.trim();
    t.len() >= len && t.bytes().all(|b| b == ch)
}

/// All closed fenced blocks in document order. Unterminated fences are ignored.
pub fn fenced_blocks(text: &str) -> Vec<FencedBlock<'_>> {
    let lines = lines(text);
    let mut blocks = Vec::new();
    let mut i = 0;
    while i < lines.len() {
        let Some((ch, len, info)) = opening(lines[i].text) else {
            i += 1;
            continue;
        };
        let body_start = lines[i].start + lines[i].text.len();
        let close = (i + 1..lines.len()).find(|&j| closes(lines[j].text, ch, len));
        let Some(j) = close else {
            break;
        };
        let mut body_end = lines[j].start;
        if body_end > body_start {
            // drop the newline that precedes the closing fence
            if text[..body_end].ends_with("\r\n") {
                body_end -= 2;
            } else if text[..body_end].ends_with('\n') {
                body_end -= 1;
            }
        }
        blocks.push(FencedBlock { info, body: &text[body_start..body_end.max(body_start)] });
        i = j + 1;
    }
    blocks
}

fn info_matches(info: &str, language: Language) -> bool {
    let tag = info.split(|c: char| c.is_whitespace() || c == ',' || c == '{').next().unwrap_or("").to_ascii_lowercase();
    language.fence_tags().contains(&tag.as_str())
}

/// Longest block; the earliest one wins ties.
fn longest<'a>(blocks: &[&FencedBlock<'a>]) -> Option<FencedBlock<'a>> {
    blocks.iter().rev().max_by_key(|b| b.body.len()).map(|b| (*b).clone())
}

/// Picks one code block: the longest block tagged with `expected`, else the
/// longest block of any kind.
pub fn extract_code(text: &str, expected: Language) -> Result<CodeSnippet, ExtractError> {
    if text.trim().is_empty() {
        return Err(ExtractError::EmptyResponse);
    }
    let blocks = fenced_blocks(text);
    let tagged: Vec<&FencedBlock<'_>> = blocks.iter().filter(|b| info_matches(b.info, expected)).collect();
    let chosen =
        longest(&tagged).or_else(|| longest(&blocks.iter().collect::<Vec<_>>())).ok_or(ExtractError::NoCodeBlock)?;
    Ok(CodeSnippet::new(expected, chosen.body))
}
