//! Pulls one Python function out of a raw model completion.
//!
//! Completions arrive with markdown fences, prose before and after, or
//! several functions. Extraction keeps the first `def NAME(` block and
//! everything that belongs to it, then verifies the result parses.

use std::ops::Range;

use thiserror::Error;

use crate::guest_syntax::{check_function, Lexer, SyntaxIssue};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtractError {
    #[error("no `def {0}(` found in completion")]
    NotFound(String),
    #[error("extracted function does not parse: {issue}")]
    Syntax { function: String, issue: SyntaxIssue },
}

/// A function cut out of a completion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExtractedFunction {
    pub name: String,
    /// Dedented source, starting with `def name(`.
    pub source: String,
    /// 0-based half-open range of completion lines the source came from.
    pub span: Range<usize>,
}

fn leading_ws(line: &str) -> &str {
    &line[..line.len() - line.trim_start().len()]
}

fn width(prefix: &str) -> usize {
    prefix.chars().map(|c| if c == '\t' { 8 } else { 1 }).sum()
}

/// Returns the first function named `name` in `text`, dedented to column 0.
///
/// The output is a fixed point: extracting from it again returns it as is.
pub fn extract_function(text: &str, name: &str) -> Result<ExtractedFunction, ExtractError> {
    let lines: Vec<&str> = text.lines().collect();
    let header = format!("def {name}(");
    let start = lines
        .iter()
        .position(|l| l.trim_start().starts_with(&header))
        .ok_or_else(|| ExtractError::NotFound(name.to_string()))?;
    let prefix = leading_ws(lines[start]);
    let def_indent = width(prefix);

    let mut lexer = Lexer::new();
    lexer.feed_line(1, lines[start]);
    let mut body = vec![lines[start]];
    for (offset, line) in lines[start + 1..].iter().enumerate() {
        let trimmed = line.trim_start();
        // A closing fence ends the block even inside an unclosed bracket.
        if !lexer.in_string() && trimmed.starts_with("```") {
            break;
        }
        if !lexer.in_continuation() && !trimmed.is_empty() && width(leading_ws(line)) <= def_indent {
            break;
        }
        lexer.feed_line(offset + 2, line);
        body.push(line);
    }
    while body.last().is_some_and(|l| l.trim().is_empty()) {
        body.pop();
    }
    let source = body
        .iter()
        .map(|l| l.strip_prefix(prefix).unwrap_or(l).trim_end())
        .collect::<Vec<_>>()
        .join("\n");
    let span = start..start + body.len();
    match check_function(&source, name) {
        Ok(()) => Ok(ExtractedFunction {
            name: name.to_string(),
            source,
            span,
        }),
        Err(issue) => Err(ExtractError::Syntax {
            function: source,
            issue,
        }),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn strips_fences_and_prose() {
        let raw = "Sure, here it is:\n```python\ndef execute_command(image):\n    image_patch = ImagePatch(image)\n    return image_patch.simple_query(\"What is it?\")\n```\nThis function asks the model.";
        let f = extract_function(raw, "execute_command").unwrap();
        assert_eq!(f.span, 2..5);
        assert_eq!(
            f.source,
            "def execute_command(image):\n    image_patch = ImagePatch(image)\n    return image_patch.simple_query(\"What is it?\")"
        );
    }

    #[test]
    fn stops_at_next_top_level_statement() {
        let raw = "def execute_test(image):\n    result = solve_query(image)\n\n    assert result\n\nexecute_test(image)\ndef other():\n    pass";
        let f = extract_function(raw, "execute_test").unwrap().source;
        assert!(f.ends_with("    assert result"));
    }

    #[test]
    fn keeps_continuation_lines_and_dedents() {
        let raw = "    def execute_test(image):\n        result = solve_query(\n    image)\n        assert result in [\n\"a\",\n        ]\n    print('x')";
        let f = extract_function(raw, "execute_test").unwrap().source;
        assert!(f.starts_with("def execute_test(image):\n    result = solve_query(\nimage)"));
        assert!(!f.contains("print"));
    }

    #[test]
    fn missing_and_broken_functions() {
        assert_eq!(
            extract_function("I cannot help with that.", "execute_command"),
            Err(ExtractError::NotFound("execute_command".into()))
        );
        let broken = "def execute_command(image)\n    return 1";
        assert!(matches!(
            extract_function(broken, "execute_command"),
            Err(ExtractError::Syntax { .. })
        ));
    }

    #[test]
    fn fence_closes_an_unbalanced_call() {
        let raw = "```python\ndef execute_command(image):\n    return f(\"x\"\n```\nDone.";
        match extract_function(raw, "execute_command") {
            Err(ExtractError::Syntax { function, issue }) => {
                assert!(!function.contains("```"));
                assert!(!function.contains("Done"));
                assert_eq!(issue.exception, "SyntaxError");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn extraction_is_idempotent() {
        let raw = "```\ndef execute_command(image):\n    x = '''\nbody\n'''\n    return x\n\n\n```";
        let once = extract_function(raw, "execute_command").unwrap().source;
        let twice = extract_function(&once, "execute_command").unwrap();
        assert_eq!(twice.source, once);
        assert_eq!(twice.span, 0..once.lines().count());
    }

    #[test]
    fn bare_function_is_returned_unchanged() {
        let bare = "def execute_test(image):\n    result = solve_query(image)\n    assert result in [\"bench\", \"sofa\"]";
        assert_eq!(extract_function(bare, "execute_test").unwrap().source, bare);
    }

    #[test]
    fn picks_the_function_with_the_expected_name() {
        let raw = "def helper(x):\n    return x\n\ndef execute_command(image):\n    return helper('a')\n";
        let f = extract_function(raw, "execute_command").unwrap();
        assert_eq!(f.source, "def execute_command(image):\n    return helper('a')");
        assert_eq!(f.span, 3..5);
    }
}
