//! Minimal per-language projects that let a lone snippet be built and
//! analyzed.

use std::path::{Path, PathBuf};

use super::VerifierError;
use crate::gateway::CodeSnippet;
use crate::seeds::Language;

const GO_MOD: &str = include_str!("../../data/harness/go/go.mod");
const PACKAGE_JSON: &str = include_str!("../../data/harness/javascript/package.json");

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HarnessProject {
    pub root: PathBuf,
    /// Snippet file, relative to `root`.
    pub source: PathBuf,
    pub language: Language,
}

impl HarnessProject {
    /// CodeQL extractor name.
    pub fn codeql_language(&self) -> &'static str {
        match self.language {
            Language::C => "cpp",
            Language::Go => "go",
            Language::Java => "java",
            Language::JavaScript => "javascript",
            Language::Python => "python",
            Language::Ruby => "ruby",
        }
    }

    /// Extra `codeql database create` arguments selecting how the project is
    /// built.
    pub fn codeql_build_args(&self) -> Vec<String> {
        match self.language {
            Language::C => vec![format!("--command=cc -c -w {} -o snippet.o", self.source.display())],
            Language::Java => vec!["--build-mode=none".into()],
            Language::Go => vec!["--build-mode=autobuild".into()],
            Language::JavaScript | Language::Python | Language::Ruby => Vec::new(),
        }
    }
}

/// Name of the top-level public type, which javac requires as file name.
fn java_public_type(code: &str) -> Option<&str> {
    let words: Vec<&str> = code.split_whitespace().collect();
    for (i, w) in words.iter().enumerate() {
        if *w != "public" {
            continue;
        }
        let mut j = i + 1;
        while j < words.len() && matches!(words[j], "final" | "abstract" | "static" | "sealed" | "strictfp") {
            j += 1;
        }
        if j + 1 < words.len() && matches!(words[j], "class" | "interface" | "enum" | "record") {
            let name = words[j + 1];
            let end = name.find(|c: char| !(c.is_ascii_alphanumeric() || c == '_' || c == '$')).unwrap_or(name.len());
            if end > 0 {
                return Some(&name[..end]);
            }
        }
    }
    None
}

fn source_name(snippet: &CodeSnippet) -> String {
    match snippet.language {
        Language::Java => format!("{}.java", java_public_type(&snippet.code).unwrap_or("Main")),
        other => format!("main.{}", other.file_extension()),
    }
}

fn write(path: &Path, text: &str) -> Result<(), VerifierError> {
    std::fs::write(path, text).map_err(|e| VerifierError::workspace(path, e))
}

/// Writes `snippet` and its build scaffolding into `dir` (created if absent).
pub fn write_harness(snippet: &CodeSnippet, dir: &Path) -> Result<HarnessProject, VerifierError> {
    std::fs::create_dir_all(dir).map_err(|e| VerifierError::workspace(dir, e))?;
    let source = PathBuf::from(source_name(snippet));
    let mut code = snippet.code.clone();
    if !code.ends_with('\n') {
        code.push('\n');
    }
    write(&dir.join(&source), &code)?;
    match snippet.language {
        Language::Go => write(&dir.join("go.mod"), GO_MOD)?,
        Language::JavaScript => write(&dir.join("package.json"), PACKAGE_JSON)?,
        Language::C => {
            let root = dir.canonicalize().map_err(|e| VerifierError::workspace(dir, e))?;
            let db = serde_json::json!([{
                "directory": root,
                "command": format!("cc -c -w {}", source.display()),
                "file": source,
            }]);
            write(&dir.join("compile_commands.json"), &(serde_json::to_string_pretty(&db).unwrap() + "\n"))?;
        }
        Language::Java | Language::Python | Language::Ruby => {}
    }
    Ok(HarnessProject { root: dir.to_path_buf(), source, language: snippet.language })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn java_file_named_after_public_class() {
        assert_eq!(java_public_type("import x;\npublic final class Login {\n}"), Some("Login"));
        assert_eq!(java_public_type("public class Foo<T>{}"), Some("Foo"));
        assert_eq!(java_public_type("class Hidden {}"), None);
    }

    #[test]
    fn writes_language_scaffolding() {
        let dir = tempfile::tempdir().unwrap();
        let go = write_harness(&CodeSnippet::new(Language::Go, "package main"), &dir.path().join("go")).unwrap();
        assert_eq!(go.source, PathBuf::from("main.go"));
        assert!(dir.path().join("go/go.mod").is_file());

        let c =
            write_harness(&CodeSnippet::new(Language::C, "int main(void){return 0;}"), &dir.path().join("c")).unwrap();
        let cc = std::fs::read_to_string(dir.path().join("c/compile_commands.json")).unwrap();
        assert!(cc.contains("main.c"));
        assert_eq!(c.codeql_language(), "cpp");

        let java =
            write_harness(&CodeSnippet::new(Language::Java, "public class App { }"), &dir.path().join("java")).unwrap();
        assert_eq!(java.source, PathBuf::from("App.java"));
        let text = std::fs::read_to_string(dir.path().join("java/App.java")).unwrap();
        assert_eq!(text, "public class App { }\n");
    }

    #[test]
    fn c_harness_compiles_with_system_compiler() {
        if crate::process::resolve_program("cc").is_none() {
            return;
        }
        let dir = tempfile::tempdir().unwrap();
        let snip = CodeSnippet::new(
            Language::C,
            "#include <stdlib.h>\nint main(int argc, char **argv) { return system(argv[1]); }",
        );
        let h = write_harness(&snip, dir.path()).unwrap();
        let args = h.codeql_build_args();
        let command = args[0].strip_prefix("--command=").unwrap();
        let status = std::process::Command::new("sh").arg("-c").arg(command).current_dir(dir.path()).status().unwrap();
        assert!(status.success());
    }
}
