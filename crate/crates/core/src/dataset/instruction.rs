//! Instruction generation for packaged examples.

use std::collections::BTreeMap;

use crate::gateway::{render_prompt, template, CodeSnippet, Gateway, GatewayError, GenParams, TemplateId};
use crate::seeds::Language;

/// Attempts after the first.
pub const MAX_RETRIES: u32 = 3;
pub const MAX_SENTENCES: usize = 2;

#[derive(Debug, thiserror::Error)]
pub enum InstructionError {
    #[error("secure code is empty")]
    EmptyCode,
    #[error("no acceptable instruction after {attempts} attempts; last reply rejected: {reason}")]
    Exhausted { attempts: u32, reason: String },
    #[error(transparent)]
    Gateway(#[from] GatewayError),
}

/// Why a candidate instruction was rejected, or `None` if it is acceptable.
pub fn check_instruction(text: &str, language: Language) -> Option<String> {
    if text.trim().is_empty() {
        return Some("empty reply".into());
    }
    let n = sentence_count(text);
    if n > MAX_SENTENCES {
        return Some(format!("{n} sentences"));
    }
    if !mentions_language(text, language) {
        return Some(format!("does not name {}", language.display_name()));
    }
    None
}

/// Sentences counted by terminal punctuation (`.`, `!`, `?`, runs counted
/// once) followed by whitespace or end of text. Text without a terminator is
/// one sentence.
pub fn sentence_count(text: &str) -> usize {
    let chars: Vec<char> = text.trim().chars().collect();
    let mut n = 0;
    for (i, c) in chars.iter().enumerate() {
        if !matches!(c, '.' | '!' | '?') {
            continue;
        }
        match chars.get(i + 1) {
            None => n += 1,
            Some(next) if next.is_whitespace() => n += 1,
            _ => {}
        }
    }
    n.max(1)
}

fn names(language: Language) -> (&'static [&'static str], bool) {
    // (accepted names, case-sensitive)
    match language {
        Language::C => (&["C"], true),
        Language::Go => (&["Go", "Golang", "golang", "GoLang"], true),
        Language::Java => (&["java"], false),
        Language::JavaScript => (&["javascript", "node.js"], false),
        Language::Python => (&["python"], false),
        Language::Ruby => (&["ruby"], false),
    }
}

fn is_word_char(c: char) -> bool {
    c.is_alphanumeric() || matches!(c, '_' | '+' | '#')
}

/// Whole-word mention of the language: `Java` does not match `JavaScript`
/// and `C` does not match `C++` or `C#`.
pub fn mentions_language(text: &str, language: Language) -> bool {
    let (accepted, case_sensitive) = names(language);
    let hay = if case_sensitive { text.to_string() } else { text.to_lowercase() };
    accepted.iter().any(|name| {
        let mut from = 0;
        while let Some(pos) = hay[from..].find(name) {
            let start = from + pos;
            let end = start + name.len();
            let before = hay[..start].chars().next_back();
            let after = hay[end..].chars().next();
            if !before.is_some_and(is_word_char) && !after.is_some_and(is_word_char) {
                return true;
            }
            from = start + hay[start..].chars().next().map_or(1, char::len_utf8);
        }
        false
    })
}

/// Strips whitespace, a leading `Instruction:` label and matching quotes.
fn clean(reply: &str) -> String {
    let mut t = reply.trim();
    for label in ["Instruction:", "instruction:"] {
        if let Some(rest) = t.strip_prefix(label) {
            t = rest.trim_start();
        }
    }
    for (open, close) in [('"', '"'), ('\'', '\''), ('“', '”')] {
        if t.len() >= 2 && t.starts_with(open) && t.ends_with(close) {
            t = t[open.len_utf8()..t.len() - close.len_utf8()].trim();
        }
    }
    t.to_string()
}

/// Asks the model for a short functionality description of `secure` (and its
/// vulnerable counterpart, when there is one), retrying on replies that are
/// too long or do not name the language.
pub fn generate_instruction(
    gateway: &Gateway,
    params: &GenParams,
    secure: &CodeSnippet,
    vulnerable: Option<&CodeSnippet>,
    tag: &str,
) -> Result<String, InstructionError> {
    if secure.code.trim().is_empty() {
        return Err(InstructionError::EmptyCode);
    }
    let code = match vulnerable {
        Some(v) => format!("{}\n\n{}", v.to_fenced(), secure.to_fenced()),
        None => secure.to_fenced(),
    };
    let bindings = BTreeMap::from([(template::CODE.to_string(), code)]);
    let prompt = render_prompt(TemplateId::GenInstruction, &bindings).expect("CODE is bound and non-empty");
    let mut reason = String::new();
    for attempt in 0..=MAX_RETRIES {
        let reply = gateway.complete(&prompt, params, attempt, tag)?;
        let text = clean(&reply.text);
        match check_instruction(&text, secure.language) {
            None => return Ok(text),
            Some(r) => {
                log::debug!("{tag}: instruction attempt {attempt} rejected: {r}");
                reason = r;
            }
        }
    }
    Err(InstructionError::Exhausted { attempts: MAX_RETRIES + 1, reason })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gateway::MockProvider;
    use std::sync::Arc;

    fn gw(replies: &'static [&'static str]) -> Gateway {
        Gateway::new(Arc::new(MockProvider::new("m", move |r| {
            Ok(replies[(r.sample_index as usize).min(replies.len() - 1)].to_string())
        })))
    }

    fn snippet() -> CodeSnippet {
        CodeSnippet::new(Language::Python, "import shutil\nshutil.copy(a, b)\n")
    }

    #[test]
    fn sentence_counts() {
        assert_eq!(sentence_count("Write a Python function that copies a file."), 1);
        assert_eq!(sentence_count("One. Two! Three?"), 3);
        assert_eq!(sentence_count("Call os.path.join in Python"), 1);
        assert_eq!(sentence_count("Wait... then go."), 2);
    }

    #[test]
    fn language_word_boundaries() {
        assert!(mentions_language("Write a Java class.", Language::Java));
        assert!(!mentions_language("Write a JavaScript function.", Language::Java));
        assert!(mentions_language("Write a JavaScript function.", Language::JavaScript));
        assert!(mentions_language("Write a C program.", Language::C));
        assert!(!mentions_language("Write a C++ program.", Language::C));
        assert!(!mentions_language("Create a parser.", Language::C));
        assert!(mentions_language("Write a PYTHON script", Language::Python));
        assert!(!mentions_language("Let's go home", Language::Go));
    }

    #[test]
    fn accepts_first_good_reply() {
        let g = gw(&["Write a Python function that copies a file."]);
        let out = generate_instruction(&g, &GenParams::synthesis("m"), &snippet(), None, "t").unwrap();
        assert_eq!(out, "Write a Python function that copies a file.");
        assert_eq!(g.ledger().entries().len(), 1);
    }

    #[test]
    fn retries_past_long_and_nameless_replies() {
        let g = gw(&[
            "Write a function. It copies files. It is safe.",
            "Write a function that copies a file.",
            "\"Write a Python function that copies a file.\"",
        ]);
        let out = generate_instruction(&g, &GenParams::synthesis("m"), &snippet(), None, "t").unwrap();
        assert_eq!(out, "Write a Python function that copies a file.");
        assert_eq!(g.ledger().entries().len(), 3);
    }

    #[test]
    fn exhausts_after_four_attempts() {
        let g = gw(&["Copy a file."]);
        let err = generate_instruction(&g, &GenParams::synthesis("m"), &snippet(), None, "t").unwrap_err();
        assert!(matches!(err, InstructionError::Exhausted { attempts: 4, .. }));
        assert_eq!(g.ledger().entries().len(), 4);
    }

    #[test]
    fn empty_code_rejected() {
        let g = gw(&["x"]);
        let s = CodeSnippet::new(Language::C, "  ");
        assert!(matches!(
            generate_instruction(&g, &GenParams::synthesis("m"), &s, None, "t"),
            Err(InstructionError::EmptyCode)
        ));
    }
}
