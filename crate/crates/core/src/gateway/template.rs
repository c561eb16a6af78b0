//! The four prompt templates and their placeholder rendering.
//!
//! Placeholders are written `{<NAME>}`. Rendering is a single left-to-right
//! pass over the template body, so bound values are inserted verbatim and
//! never re-scanned.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum TemplateError {
    #[error("template {template:?} is missing a binding for placeholder `{placeholder}`")]
    MissingBinding { template: TemplateId, placeholder: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TemplateId {
    GenVulnerable,
    FixVulnerable,
    GenSecure,
    GenInstruction,
}

pub const CWE_OVERALL_DESCRIPTION: &str = "CWE_OVERALL_DESCRIPTION";
pub const LANGUAGE: &str = "LANGUAGE";
pub const CODE: &str = "CODE";
pub const EXPLANATION: &str = "EXPLANATION";
pub const TARGET_LANGUAGE: &str = "TARGET_LANGUAGE";
pub const GENERATED_VULNERABLE_CODE: &str = "GENERATED_VULNERABLE_CODE";

const GEN_VULNERABLE: &str = "\
Task: Please generate an easily understandable vulnerable code snippet based on the following description of CWE. (Please consider the diversity of the vulnerable code examples for each generation.)

CWE:
{<CWE_OVERALL_DESCRIPTION>}

A Vulnerable Code Example:
This is {<LANGUAGE>} language example.
```
{<CODE>}
```

Explanation of the Example:
{<EXPLANATION>}

Can you generate a vulnerable code example for {<TARGET_LANGUAGE>} language?";

const FIX_VULNERABLE: &str = "\
Task: Please fix the vulnerable code based on the following description of CWE :

CWE:
{<CWE_OVERALL_DESCRIPTION>}

The Vulnerable Code:
```
{<GENERATED_VULNERABLE_CODE>}
```

Can you FIX the code for {<LANGUAGE>}? Please make sure the code is secure to the CWE mentioned above and runnable.";

const GEN_SECURE: &str = "\
Task: Please generate an easily understandable secure code snippet that is free of the weakness in the following description of CWE. (Please consider the diversity of the secure code examples for each generation.)

CWE:
{<CWE_OVERALL_DESCRIPTION>}

A Code Example Related to the CWE:
This is {<LANGUAGE>} language example.
```
{<CODE>}
```

Explanation of the Example:
{<EXPLANATION>}

Can you generate a secure and runnable code example for {<TARGET_LANGUAGE>} language that is not vulnerable to the CWE mentioned above?";

const GEN_INSTRUCTION: &str = "\
Create a single, very short (maximum two sentences) not detailed functionality description that could be used as a prompt to generate either of the code snippets below. Always include the name of the programming language in the instruction. My life depends on the instruction being short and undetailed, excluding any security-specific features.

{<CODE>}";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptTemplate {
    pub template_id: TemplateId,
    pub body: &'static str,
}

impl PromptTemplate {
    pub fn get(template_id: TemplateId) -> Self {
        let body = match template_id {
            TemplateId::GenVulnerable => GEN_VULNERABLE,
            TemplateId::FixVulnerable => FIX_VULNERABLE,
            TemplateId::GenSecure => GEN_SECURE,
            TemplateId::GenInstruction => GEN_INSTRUCTION,
        };
        Self { template_id, body }
    }

    /// Placeholder names in order of first appearance.
    pub fn placeholders(&self) -> Vec<&'static str> {
        let mut seen = BTreeSet::new();
        let mut out = Vec::new();
        for piece in parse(self.body) {
            if let Piece::Placeholder(name) = piece {
                if seen.insert(name) {
                    out.push(name);
                }
            }
        }
        out
    }
}

enum Piece<'a> {
    Text(&'a str),
    Placeholder(&'a str),
}

fn parse(body: &str) -> Vec<Piece<'_>> {
    let mut pieces = Vec::new();
    let mut rest = body;
    while let Some(start) = rest.find("{<") {
        let Some(len) = rest[start + 2..].find(">}") else {
            break;
        };
        let name = &rest[start + 2..start + 2 + len];
        if !name.is_empty() && name.bytes().all(|b| b.is_ascii_uppercase() || b == b'_') {
            pieces.push(Piece::Text(&rest[..start]));
            pieces.push(Piece::Placeholder(name));
        } else {
            pieces.push(Piece::Text(&rest[..start + 2]));
            rest = &rest[start + 2..];
            continue;
        }
        rest = &rest[start + 2 + len + 2..];
    }
    pieces.push(Piece::Text(rest));
    pieces
}

/// Renders a template. Every placeholder must be bound to a non-empty value;
/// bindings the template does not use are ignored with a warning.
pub fn render_prompt(template_id: TemplateId, bindings: &BTreeMap<String, String>) -> Result<String, TemplateError> {
    let template = PromptTemplate::get(template_id);
    let placeholders = template.placeholders();
    for name in &placeholders {
        if bindings.get(*name).is_none_or(|v| v.is_empty()) {
            return Err(TemplateError::MissingBinding { template: template_id, placeholder: (*name).to_string() });
        }
    }
    for extra in bindings.keys().filter(|k| !placeholders.contains(&k.as_str())) {
        log::warn!("binding `{extra}` is not used by template {template_id:?}; ignored");
    }
    let mut out = String::with_capacity(template.body.len() + 256);
    for piece in parse(template.body) {
        match piece {
            Piece::Text(t) => out.push_str(t),
            Piece::Placeholder(name) => out.push_str(&bindings[name]),
        }
    }
    Ok(out)
}
