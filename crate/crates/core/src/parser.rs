//! Extraction of candidate code and generated tests from model responses.
//!
//! Rules, in order:
//! 1. Collect fenced blocks (a line starting with three backticks, optional
//!    language tag, up to the closing fence or end of text). With no fences at
//!    all, fall back to runs of bare Python lines (`def`, `class`, `import`,
//!    decorators, `assert`, and their indented bodies).
//! 2. Split each block into top-level statements, honoring brackets,
//!    triple-quoted strings and backslash continuations.
//! 3. A statement is a test when it is an `assert` naming the entry point, or a
//!    function (other than the entry point) whose body asserts on the entry
//!    point. Test functions become `def ...` followed by a call to them.
//!    `if __name__ == "__main__":` guards contribute their entry-point asserts
//!    and are otherwise dropped.
//! 4. Everything else is code. The last block whose code defines the entry
//!    point supplies the implementation; tests from all blocks are kept in
//!    order with exact duplicates removed.
//!
//! Nothing extracted here is ever executed.

use std::collections::HashSet;
use std::sync::LazyLock;

use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{defines_function, mentions_identifier};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ParseError {
    #[error("your response contained no code block")]
    NoCodeBlock,
    #[error("your response did not define a function named `{0}`")]
    EntryPointMissing(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GenerationArtifact {
    /// Candidate implementation; defines the entry point. Ends with one newline.
    pub code: String,
    /// Self-contained test statements, in response order.
    pub tests: Vec<String>,
    pub raw_response: String,
}

pub fn parse_generation(response: &str, entry_point: &str) -> Result<GenerationArtifact, ParseError> {
    let mut blocks = fenced_blocks(response);
    if blocks.is_empty() {
        blocks = bare_blocks(response);
    }
    if blocks.is_empty() {
        return Err(ParseError::NoCodeBlock);
    }

    let mut implementation = None;
    let mut tests = Vec::new();
    let mut seen = HashSet::new();
    for block in &blocks {
        let split = split_block(block, entry_point);
        if defines_function(&split.code, entry_point) {
            implementation = Some(split.code);
        }
        for t in split.tests {
            if seen.insert(t.clone()) {
                tests.push(t);
            }
        }
    }
    let code = implementation.ok_or_else(|| ParseError::EntryPointMissing(entry_point.to_string()))?;
    Ok(GenerationArtifact {
        code,
        tests,
        raw_response: response.to_string(),
    })
}

/// Parses a repair response. Tests are carried over from `prior` unless
/// `refine_tests` is set and the response supplies new ones.
pub fn parse_repair(
    response: &str,
    entry_point: &str,
    prior: &GenerationArtifact,
    refine_tests: bool,
) -> Result<GenerationArtifact, ParseError> {
    let mut artifact = parse_generation(response, entry_point)?;
    if !(refine_tests && !artifact.tests.is_empty()) {
        artifact.tests = prior.tests.clone();
    }
    Ok(artifact)
}

fn is_fence(line: &str) -> bool {
    line.trim_start().starts_with("```")
}

fn fenced_blocks(text: &str) -> Vec<Vec<String>> {
    let mut blocks = Vec::new();
    let mut lines = text.lines();
    while let Some(line) = lines.next() {
        if !is_fence(line) {
            continue;
        }
        let indent = &line[..line.len() - line.trim_start().len()];
        let mut body = Vec::new();
        for inner in lines.by_ref() {
            if is_fence(inner) {
                break;
            }
            body.push(inner);
        }
        // fences nested in list items indent their contents as well
        let dedent = !indent.is_empty()
            && body.iter().all(|l| l.trim().is_empty() || l.starts_with(indent));
        blocks.push(
            body.into_iter()
                .map(|l| {
                    if dedent {
                        l.get(indent.len()..).unwrap_or("").to_string()
                    } else {
                        l.to_string()
                    }
                })
                .collect(),
        );
    }
    blocks
}

static CODE_START: LazyLock<Regex> = LazyLock::new(|| {
    Regex::new(
        r"^(?:(?:async\s+)?def\s+\w+\s*\(|class\s+\w+|import\s+[\w.]+|from\s+[\w.]+\s+import\s|@\w|assert[\s(]|if\s+__name__\s*==)",
    )
    .expect("static regex")
});
static DEF_NAME: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^(?:@.*\n)*(?:async\s+)?def\s+(\w+)\s*\(").expect("static regex"));
static MAIN_GUARD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r#"^if\s+__name__\s*==\s*['"]__main__['"]\s*:"#).expect("static regex"));
static BARE_CALL: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"^(\w+)\(\s*\)\s*$").expect("static regex"));

fn is_code_start(line: &str) -> bool {
    CODE_START.is_match(line)
}

fn bare_blocks(text: &str) -> Vec<Vec<String>> {
    let mut blocks = Vec::new();
    let mut current: Option<Vec<String>> = None;
    for line in text.lines() {
        let indented = line.starts_with([' ', '\t']);
        let continues = line.trim().is_empty() || indented || is_code_start(line);
        match current.as_mut() {
            Some(block) if continues => block.push(line.to_string()),
            Some(_) => blocks.extend(current.take()),
            None if is_code_start(line) => current = Some(vec![line.to_string()]),
            None => {}
        }
    }
    blocks.extend(current);
    blocks
}

/// Tracks open brackets, triple-quoted strings and backslash continuations
/// across lines so that statement boundaries can be found.
#[derive(Default)]
struct LineScanner {
    depth: i32,
    triple: Option<&'static str>,
    backslash: bool,
}

impl LineScanner {
    /// True if the line continues a statement begun on an earlier line.
    fn inside_statement(&self) -> bool {
        self.depth > 0 || self.triple.is_some() || self.backslash
    }

    fn feed(&mut self, line: &str) {
        let bytes = line.as_bytes();
        let mut i = 0;
        while i < bytes.len() {
            if let Some(delim) = self.triple {
                if line[i..].starts_with(delim) {
                    self.triple = None;
                    i += 3;
                } else {
                    i += if bytes[i] == b'\\' { 2 } else { 1 };
                }
                continue;
            }
            match bytes[i] {
                b'#' => break,
                b'"' | b'\'' => {
                    let quote = bytes[i];
                    if line[i..].starts_with("\"\"\"") || line[i..].starts_with("'''") {
                        self.triple = Some(if quote == b'"' { "\"\"\"" } else { "'''" });
                        i += 3;
                        continue;
                    }
                    i += 1;
                    while i < bytes.len() && bytes[i] != quote {
                        i += if bytes[i] == b'\\' { 2 } else { 1 };
                    }
                    i += 1;
                }
                b'(' | b'[' | b'{' => {
                    self.depth += 1;
                    i += 1;
                }
                b')' | b']' | b'}' => {
                    self.depth = (self.depth - 1).max(0);
                    i += 1;
                }
                _ => i += 1,
            }
        }
        self.backslash = self.triple.is_none() && line.trim_end().ends_with('\\');
    }
}

/// Groups block lines into top-level statements. Blank lines stay with the
/// preceding statement; decorators stay with what they decorate.
fn statements(lines: &[String]) -> Vec<Vec<&str>> {
    let mut out: Vec<Vec<&str>> = Vec::new();
    let mut scanner = LineScanner::default();
    for line in lines {
        let starts_new = !scanner.inside_statement()
            && !line.trim().is_empty()
            && !line.starts_with([' ', '\t'])
            && !out.last().is_some_and(|s| is_decorator_only(s));
        if starts_new || out.is_empty() {
            if line.trim().is_empty() {
                scanner.feed(line);
                continue;
            }
            out.push(Vec::new());
        }
        out.last_mut().expect("non-empty").push(line);
        scanner.feed(line);
    }
    out
}

fn is_decorator_only(stmt: &[&str]) -> bool {
    stmt.iter()
        .filter(|l| !l.trim().is_empty())
        .all(|l| l.starts_with('@'))
}

fn join_trimmed(lines: &[&str]) -> String {
    lines.join("\n").trim_end().to_string()
}

fn is_assert(line: &str) -> bool {
    let t = line.trim_start();
    t.strip_prefix("assert")
        .is_some_and(|rest| rest.starts_with([' ', '\t', '(']))
}

struct SplitBlock {
    code: String,
    tests: Vec<String>,
}

fn split_block(lines: &[String], entry_point: &str) -> SplitBlock {
    let stmts = statements(lines);
    let mut code: Vec<&str> = Vec::new();
    let mut tests = Vec::new();
    let mut test_fns: Vec<String> = Vec::new();

    for stmt in &stmts {
        let text = join_trimmed(stmt);
        let first = stmt[0];
        if is_assert(first) && mentions_identifier(&text, entry_point) {
            tests.push(text);
            continue;
        }
        if let Some(caps) = DEF_NAME.captures(&text) {
            let name = &caps[1];
            let asserts_on_entry = stmt[1..]
                .iter()
                .any(|l| is_assert(l) && mentions_identifier(l, entry_point));
            if name != entry_point && asserts_on_entry {
                tests.push(format!("{text}\n{name}()"));
                test_fns.push(name.to_string());
                continue;
            }
        }
        if MAIN_GUARD.is_match(first) {
            let body: Vec<&str> = stmt[1..].to_vec();
            let indent = body
                .iter()
                .find(|l| !l.trim().is_empty())
                .map(|l| l.len() - l.trim_start().len())
                .unwrap_or(0);
            let dedented: Vec<String> = body
                .iter()
                .map(|l| l.get(indent..).unwrap_or("").to_string())
                .collect();
            for inner in statements(&dedented) {
                let inner_text = join_trimmed(&inner);
                if is_assert(inner[0]) && mentions_identifier(&inner_text, entry_point) {
                    tests.push(inner_text);
                }
            }
            continue;
        }
        if stmt.len() == 1 || stmt[1..].iter().all(|l| l.trim().is_empty()) {
            if let Some(c) = BARE_CALL.captures(first.trim_end()) {
                if test_fns.iter().any(|n| n == &c[1]) {
                    continue;
                }
            }
        }
        code.extend(stmt.iter().copied());
    }

    let body = code.join("\n");
    let trimmed = body.trim_end();
    let start = trimmed
        .lines()
        .take_while(|l| l.trim().is_empty())
        .map(|l| l.len() + 1)
        .sum::<usize>();
    let code = if trimmed.trim().is_empty() {
        String::new()
    } else {
        format!("{}\n", &trimmed[start.min(trimmed.len())..])
    };
    SplitBlock { code, tests }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn separate_code_and_test_fences() {
        let r = "Here is the code:\n```python\ndef f(x):\n    return x+1\n```\nTests:\n```python\nassert f(1)==2\nassert f(0)==1\n```";
        let a = parse_generation(r, "f").unwrap();
        assert_eq!(a.code, "def f(x):\n    return x+1\n");
        assert_eq!(a.tests, vec!["assert f(1)==2", "assert f(0)==1"]);
        assert_eq!(a.raw_response, r);
    }

    #[test]
    fn trailing_asserts_split_out_of_single_block() {
        let r = "```python\ndef f(x):\n    return x+1\n\nassert f(1)==2\nassert f(0)==1\n```";
        let a = parse_generation(r, "f").unwrap();
        assert_eq!(a.code, "def f(x):\n    return x+1\n");
        assert_eq!(a.tests, vec!["assert f(1)==2", "assert f(0)==1"]);
    }

    #[test]
    fn refusal_has_no_code() {
        assert_eq!(parse_generation("I cannot solve this.", "f"), Err(ParseError::NoCodeBlock));
    }

    #[test]
    fn renamed_function_is_missing_entry_point() {
        let r = "```python\ndef g(x):\n    return x\n```";
        assert_eq!(parse_generation(r, "f"), Err(ParseError::EntryPointMissing("f".into())));
    }

    #[test]
    fn repair_carries_tests_forward() {
        let prior = parse_generation("```\ndef f(x):\n    return x\nassert f(1)==2\n```", "f").unwrap();
        let fixed = "```python\ndef f(x):\n    return x+1\n```";
        let a = parse_repair(fixed, "f", &prior, false).unwrap();
        assert_eq!(a.code, "def f(x):\n    return x+1\n");
        assert_eq!(a.tests, prior.tests);
        let a = parse_repair(fixed, "f", &prior, true).unwrap();
        assert_eq!(a.tests, prior.tests, "no new tests: keep prior ones");
    }

    #[test]
    fn repair_with_new_tests_replaces_them() {
        let prior = parse_generation("```\ndef f(x):\n    return x\nassert f(1)==9\n```", "f").unwrap();
        let r = "```python\ndef f(x):\n    return x+1\n```\n```python\nassert f(1)==2\nassert f(2)==3\nassert f(3)==4\nassert f(4)==5\nassert f(5)==6\n```";
        let a = parse_repair(r, "f", &prior, true).unwrap();
        assert_eq!(a.tests.len(), 5);
        assert_eq!(a.tests[0], "assert f(1)==2");
        let a = parse_repair(r, "f", &prior, false).unwrap();
        assert_eq!(a.tests, vec!["assert f(1)==9"]);
    }

    #[test]
    fn repair_rename_rejected() {
        let prior = parse_generation("```\ndef f(x):\n    return x\n```", "f").unwrap();
        assert_eq!(
            parse_repair("```python\ndef g(x):\n    return x\n```", "f", &prior, false),
            Err(ParseError::EntryPointMissing("f".into()))
        );
    }

    #[test]
    fn last_implementation_wins() {
        let r = "```python\ndef f(x):\n    return 0\n```\nOops, corrected:\n```python\ndef f(x):\n    return 1\n```";
        assert_eq!(parse_generation(r, "f").unwrap().code, "def f(x):\n    return 1\n");
    }

    #[test]
    fn multiline_constructs_stay_whole() {
        let r = "```python\ndef f(xs):\n    \"\"\"Doc\n\nassert f([]) == 0 inside a docstring\n\"\"\"\n    return sum(\n        xs\n)\n\nassert f([\n    1, 2\n]) == 3\n```";
        let a = parse_generation(r, "f").unwrap();
        assert!(a.code.contains("inside a docstring"));
        assert!(a.code.ends_with(")\n"));
        assert_eq!(a.tests, vec!["assert f([\n    1, 2\n]) == 3"]);
    }

    #[test]
    fn test_functions_and_main_guard() {
        let r = "```python\nimport math\n\n@decorate\ndef f(x):\n    return x\n\ndef test_f():\n    assert f(1) == 1\n    assert f(2) == 2\n\ntest_f()\n\nif __name__ == \"__main__\":\n    assert f(3) == 3\n    print('ok')\n```";
        let a = parse_generation(r, "f").unwrap();
        assert_eq!(a.code, "import math\n\n@decorate\ndef f(x):\n    return x\n");
        assert_eq!(
            a.tests,
            vec![
                "def test_f():\n    assert f(1) == 1\n    assert f(2) == 2\ntest_f()".to_string(),
                "assert f(3) == 3".to_string(),
            ]
        );
    }

    #[test]
    fn bare_definition_fallback() {
        let r = "Sure.\ndef f(x):\n    return x * 2\n\nassert f(2) == 4\nThat should work.";
        let a = parse_generation(r, "f").unwrap();
        assert_eq!(a.code, "def f(x):\n    return x * 2\n");
        assert_eq!(a.tests, vec!["assert f(2) == 4"]);
    }

    #[test]
    fn asserts_not_naming_entry_point_stay_in_code() {
        let r = "```python\nassert True\ndef f(x):\n    return x\n```";
        let a = parse_generation(r, "f").unwrap();
        assert_eq!(a.code, "assert True\ndef f(x):\n    return x\n");
        assert!(a.tests.is_empty());
    }

    #[test]
    fn duplicate_tests_collapse() {
        let r = "```python\ndef f(x):\n    return x\nassert f(1) == 1\n```\n```python\nassert f(1) == 1\nassert f(2) == 2\n```";
        assert_eq!(parse_generation(r, "f").unwrap().tests, vec!["assert f(1) == 1", "assert f(2) == 2"]);
    }
}
