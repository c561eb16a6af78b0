//! Diff-derived security masks.
//!
//! The vulnerable and secure texts are aligned by a longest common
//! subsequence over lines (or words). Units of the secure text outside the
//! common subsequence form the secure mask; units of the vulnerable text
//! outside it form the vulnerable mask. Spans are half-open byte ranges into
//! each text, merged when adjacent.

use serde::{Deserialize, Serialize};

/// Half-open byte range `[start, end)`, serialized as a two-element array.
pub type Span = (usize, usize);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskGranularity {
    #[default]
    Line,
    Word,
}

/// A diff unit: its comparison key and the byte range it occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Unit<'a> {
    key: &'a str,
    start: usize,
    end: usize,
}

/// Lines including their terminator; compared without it so a missing final
/// newline does not register as a change.
fn line_units(text: &str) -> Vec<Unit<'_>> {
    let mut out = Vec::new();
    let mut start = 0;
    for piece in text.split_inclusive('\n') {
        let key = piece.strip_suffix('\n').unwrap_or(piece);
        let key = key.strip_suffix('\r').unwrap_or(key);
        out.push(Unit { key, start, end: start + piece.len() });
        start += piece.len();
    }
    out
}

/// Alternating runs of whitespace and non-whitespace.
fn word_units(text: &str) -> Vec<Unit<'_>> {
    let mut out = Vec::new();
    let mut start = 0;
    let mut prev_ws = None;
    for (i, c) in text.char_indices() {
        let ws = c.is_whitespace();
        if prev_ws.is_some_and(|p| p != ws) {
            out.push(Unit { key: &text[start..i], start, end: i });
            start = i;
        }
        prev_ws = Some(ws);
    }
    if start < text.len() {
        out.push(Unit { key: &text[start..], start, end: text.len() });
    }
    out
}

/// `keep_a[i]` / `keep_b[j]` mark units in the common subsequence.
///
/// Matches are taken greedily against a suffix-LCS table. When skipping
/// either unit is equally good, the unit with the lexicographically smaller
/// key is skipped; this makes the alignment independent of argument order.
fn align(a: &[Unit<'_>], b: &[Unit<'_>]) -> (Vec<bool>, Vec<bool>) {
    let mut keep_a = vec![false; a.len()];
    let mut keep_b = vec![false; b.len()];
    let mut pre = 0;
    while pre < a.len() && pre < b.len() && a[pre].key == b[pre].key {
        keep_a[pre] = true;
        keep_b[pre] = true;
        pre += 1;
    }
    let mut suf = 0;
    while suf < a.len() - pre && suf < b.len() - pre && a[a.len() - 1 - suf].key == b[b.len() - 1 - suf].key {
        keep_a[a.len() - 1 - suf] = true;
        keep_b[b.len() - 1 - suf] = true;
        suf += 1;
    }
    let (ma, mb) = (&a[pre..a.len() - suf], &b[pre..b.len() - suf]);
    let (n, m) = (ma.len(), mb.len());
    if n == 0 || m == 0 {
        return (keep_a, keep_b);
    }
    // table[i][j] = LCS length of ma[i..] and mb[j..]
    let w = m + 1;
    let mut table = vec![0u32; (n + 1) * w];
    for i in (0..n).rev() {
        for j in (0..m).rev() {
            table[i * w + j] = if ma[i].key == mb[j].key {
                table[(i + 1) * w + j + 1] + 1
            } else {
                table[(i + 1) * w + j].max(table[i * w + j + 1])
            };
        }
    }
    let (mut i, mut j) = (0, 0);
    while i < n && j < m {
        if ma[i].key == mb[j].key {
            keep_a[pre + i] = true;
            keep_b[pre + j] = true;
            i += 1;
            j += 1;
            continue;
        }
        let down = table[(i + 1) * w + j];
        let right = table[i * w + j + 1];
        if down > right || (down == right && ma[i].key < mb[j].key) {
            i += 1;
        } else {
            j += 1;
        }
    }
    (keep_a, keep_b)
}

fn spans(units: &[Unit<'_>], keep: &[bool]) -> Vec<Span> {
    let mut out: Vec<Span> = Vec::new();
    for (u, k) in units.iter().zip(keep) {
        if *k {
            continue;
        }
        match out.last_mut() {
            Some(last) if last.1 == u.start => last.1 = u.end,
            _ => out.push((u.start, u.end)),
        }
    }
    out
}

/// `(sec_mask_spans, vul_mask_spans)` for a vulnerable/secure pair.
pub fn compute_masks(vulnerable: &str, secure: &str) -> (Vec<Span>, Vec<Span>) {
    compute_masks_with(vulnerable, secure, MaskGranularity::Line)
}

pub fn compute_masks_with(vulnerable: &str, secure: &str, granularity: MaskGranularity) -> (Vec<Span>, Vec<Span>) {
    let units = match granularity {
        MaskGranularity::Line => line_units,
        MaskGranularity::Word => word_units,
    };
    let (v, s) = (units(vulnerable), units(secure));
    let (keep_v, keep_s) = align(&v, &s);
    (spans(&s, &keep_s), spans(&v, &keep_v))
}

/// Spans sorted, non-overlapping, non-empty and within `len`.
pub fn spans_well_formed(spans: &[Span], len: usize) -> bool {
    spans.iter().all(|&(s, e)| s < e && e <= len) && spans.windows(2).all(|w| w[0].1 <= w[1].0)
}
