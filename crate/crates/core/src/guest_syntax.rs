//! Structural syntax check for guest (Python) source.
//!
//! This is not a Python parser. It tokenizes strings, comments and brackets,
//! joins physical lines into logical lines, and then checks indentation and
//! block structure. That catches the failure shapes generated code actually
//! shows: unclosed brackets or strings, missing colons, bad indentation,
//! empty blocks, stray markdown characters.

use std::fmt;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SyntaxIssue {
    /// 1-based physical line.
    pub line: usize,
    /// Guest exception type, `SyntaxError` or `IndentationError`.
    pub exception: String,
    pub message: String,
}

impl SyntaxIssue {
    fn syntax(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            exception: "SyntaxError".into(),
            message: message.into(),
        }
    }

    fn indentation(line: usize, message: impl Into<String>) -> Self {
        Self {
            line,
            exception: "IndentationError".into(),
            message: message.into(),
        }
    }
}

impl fmt::Display for SyntaxIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {} (line {})", self.exception, self.message, self.line)
    }
}

impl std::error::Error for SyntaxIssue {}

/// One logical line with string bodies blanked out and comments removed.
#[derive(Debug, Clone)]
pub struct LogicalLine {
    pub line: usize,
    pub indent: usize,
    pub code: String,
}

#[derive(Debug, Clone, Copy)]
struct OpenString {
    quote: char,
    triple: bool,
    line: usize,
}

/// Incremental tokenizer fed one physical line at a time.
#[derive(Debug, Default)]
pub struct Lexer {
    brackets: Vec<(char, usize)>,
    string: Option<OpenString>,
    backslash: bool,
    current: Option<LogicalLine>,
    lines: Vec<LogicalLine>,
    error: Option<SyntaxIssue>,
    last_line: usize,
}

fn indent_width(line: &str) -> usize {
    let mut w = 0;
    for c in line.chars() {
        match c {
            ' ' => w += 1,
            '\t' => w = (w / 8 + 1) * 8,
            '\x0c' => w = 0,
            _ => break,
        }
    }
    w
}

fn closer_for(open: char) -> char {
    match open {
        '(' => ')',
        '[' => ']',
        _ => '}',
    }
}

impl Lexer {
    pub fn new() -> Self {
        Self::default()
    }

    /// True while a bracket, triple-quoted string or backslash continuation
    /// keeps the current logical line open.
    pub fn in_continuation(&self) -> bool {
        !self.brackets.is_empty() || self.string.is_some() || self.backslash
    }

    /// True inside an unterminated triple-quoted string.
    pub fn in_string(&self) -> bool {
        self.string.is_some()
    }

    fn fail(&mut self, issue: SyntaxIssue) {
        if self.error.is_none() {
            self.error = Some(issue);
        }
    }

    pub fn feed_line(&mut self, line_no: usize, text: &str) {
        self.last_line = line_no;
        let continuing = self.in_continuation();
        self.backslash = false;
        if !continuing {
            let body = text.trim_start();
            if body.is_empty() || body.starts_with('#') {
                return;
            }
            self.current = Some(LogicalLine {
                line: line_no,
                indent: indent_width(text),
                code: String::new(),
            });
        }
        let mut code = std::mem::take(&mut self.current.as_mut().expect("open line").code);
        if continuing && !code.is_empty() {
            code.push(' ');
        }

        let chars: Vec<char> = text.chars().collect();
        let mut i = if continuing {
            0
        } else {
            chars.iter().take_while(|c| c.is_whitespace()).count()
        };
        while i < chars.len() {
            let c = chars[i];
            if let Some(s) = self.string {
                if c == '\\' {
                    i += 2;
                    continue;
                }
                if c == s.quote {
                    if !s.triple {
                        self.string = None;
                        code.push(c);
                    } else if chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c) {
                        self.string = None;
                        code.push(c);
                        i += 2;
                    }
                }
                i += 1;
                continue;
            }
            match c {
                '#' => break,
                '\'' | '"' => {
                    let triple = chars.get(i + 1) == Some(&c) && chars.get(i + 2) == Some(&c);
                    self.string = Some(OpenString {
                        quote: c,
                        triple,
                        line: line_no,
                    });
                    code.push(c);
                    i += if triple { 3 } else { 1 };
                    continue;
                }
                '(' | '[' | '{' => {
                    self.brackets.push((c, line_no));
                    code.push(c);
                }
                ')' | ']' | '}' => {
                    match self.brackets.pop() {
                        None => self.fail(SyntaxIssue::syntax(line_no, format!("unmatched '{c}'"))),
                        Some((open, _)) if closer_for(open) != c => self.fail(SyntaxIssue::syntax(
                            line_no,
                            format!("closing parenthesis '{c}' does not match opening parenthesis '{open}'"),
                        )),
                        Some(_) => {}
                    }
                    code.push(c);
                }
                '\\' => {
                    if chars[i + 1..].iter().all(|c| c.is_whitespace()) && i + 1 == chars.len() {
                        self.backslash = true;
                    } else {
                        self.fail(SyntaxIssue::syntax(
                            line_no,
                            "unexpected character after line continuation character",
                        ));
                    }
                }
                '`' | '$' | '?' => {
                    self.fail(SyntaxIssue::syntax(line_no, format!("invalid syntax: stray '{c}'")));
                    code.push(c);
                }
                _ => code.push(c),
            }
            i += 1;
        }

        if let Some(s) = self.string {
            if !s.triple {
                let escaped_eol = text.ends_with('\\');
                if !escaped_eol {
                    self.fail(SyntaxIssue::syntax(
                        line_no,
                        format!("unterminated string literal (detected at line {line_no})"),
                    ));
                    self.string = None;
                    code.push(s.quote);
                }
            }
        }

        let cur = self.current.as_mut().expect("open line");
        cur.code = code;
        if !self.in_continuation() {
            let mut done = self.current.take().expect("open line");
            done.code = done.code.trim_end().to_string();
            self.lines.push(done);
        }
    }

    pub fn finish(mut self) -> Result<Vec<LogicalLine>, SyntaxIssue> {
        if let Some(s) = self.string {
            let issue = if s.triple {
                SyntaxIssue::syntax(
                    s.line,
                    format!("unterminated triple-quoted string literal (detected at line {})", self.last_line),
                )
            } else {
                SyntaxIssue::syntax(s.line, "unterminated string literal")
            };
            self.fail(issue);
        }
        if let Some(&(open, line)) = self.brackets.first() {
            self.fail(SyntaxIssue::syntax(line, format!("'{open}' was never closed")));
        }
        if self.backslash {
            self.fail(SyntaxIssue::syntax(self.last_line, "unexpected EOF while parsing"));
        }
        match self.error {
            Some(e) => Err(e),
            None => Ok(self.lines),
        }
    }
}

const COMPOUND: &[&str] = &[
    "def", "if", "elif", "else", "for", "while", "try", "except", "finally", "with", "class",
    "async", "match", "case",
];

fn first_word(code: &str) -> &str {
    let end = code
        .find(|c: char| !(c.is_alphanumeric() || c == '_'))
        .unwrap_or(code.len());
    &code[..end]
}

/// Position of the first `:` outside brackets, if any.
fn top_level_colon(code: &str) -> Option<usize> {
    let mut depth = 0i32;
    let mut quote: Option<char> = None;
    for (i, c) in code.char_indices() {
        if let Some(q) = quote {
            if c == q {
                quote = None;
            }
            continue;
        }
        match c {
            '\'' | '"' => quote = Some(c),
            '(' | '[' | '{' => depth += 1,
            ')' | ']' | '}' => depth -= 1,
            ':' if depth == 0 => {
                // walrus
                if code[i + 1..].starts_with('=') {
                    continue;
                }
                return Some(i);
            }
            _ => {}
        }
    }
    None
}

fn check_statement(l: &LogicalLine) -> Result<(), SyntaxIssue> {
    let word = first_word(&l.code);
    let colon = top_level_colon(&l.code);
    // `lambda` bodies put a colon at depth zero in ordinary statements
    let has_lambda = l.code.contains("lambda");
    if COMPOUND.contains(&word) && !matches!(word, "match" | "case") {
        if colon.is_none() {
            return Err(SyntaxIssue::syntax(l.line, "expected ':'"));
        }
        if word == "def" {
            let shape = regex_lite_def(&l.code);
            if !shape {
                return Err(SyntaxIssue::syntax(l.line, "invalid function definition"));
            }
        }
        if matches!(word, "else" | "try" | "finally") && colon != Some(word.len()) {
            let rest = l.code[word.len()..colon.unwrap_or(l.code.len())].trim();
            if !rest.is_empty() {
                return Err(SyntaxIssue::syntax(l.line, "invalid syntax"));
            }
        }
    } else if l.code.ends_with(':') && !has_lambda {
        return Err(SyntaxIssue::syntax(l.line, "invalid syntax"));
    }
    if word == "print" {
        let rest = l.code[5..].trim_start();
        if rest.starts_with('"') || rest.starts_with('\'') {
            return Err(SyntaxIssue::syntax(
                l.line,
                "Missing parentheses in call to 'print'",
            ));
        }
    }
    Ok(())
}

/// `def name(...)` optionally followed by `-> annotation`, then `:`.
fn regex_lite_def(code: &str) -> bool {
    let rest = code["def".len()..].trim_start();
    let name_len = rest
        .find(|c: char| !(c.is_alphanumeric() || c == '_'))
        .unwrap_or(rest.len());
    if name_len == 0 || rest.starts_with(|c: char| c.is_ascii_digit()) {
        return false;
    }
    rest[name_len..].trim_start().starts_with('(')
}

/// Opens a block that needs an indented body on the next line.
fn opens_block(code: &str) -> bool {
    code.ends_with(':') && COMPOUND.contains(&first_word(code))
}

pub fn logical_lines(src: &str) -> Result<Vec<LogicalLine>, SyntaxIssue> {
    let mut lexer = Lexer::new();
    for (i, line) in src.lines().enumerate() {
        lexer.feed_line(i + 1, line);
    }
    lexer.finish()
}

/// Checks a whole module.
pub fn check_source(src: &str) -> Result<(), SyntaxIssue> {
    let lines = logical_lines(src)?;
    let mut stack = vec![0usize];
    let mut expect_block: Option<usize> = None;
    for l in &lines {
        check_statement(l)?;
        let top = *stack.last().expect("non-empty");
        if l.indent > top {
            if expect_block.is_none() {
                return Err(SyntaxIssue::indentation(l.line, "unexpected indent"));
            }
            stack.push(l.indent);
        } else {
            if let Some(opened) = expect_block {
                return Err(SyntaxIssue::indentation(
                    l.line,
                    format!("expected an indented block after statement on line {opened}"),
                ));
            }
            while l.indent < *stack.last().expect("non-empty") {
                stack.pop();
            }
            if *stack.last().expect("non-empty") != l.indent {
                return Err(SyntaxIssue::indentation(
                    l.line,
                    "unindent does not match any outer indentation level",
                ));
            }
        }
        expect_block = opens_block(&l.code).then_some(l.line);
    }
    if let Some(opened) = expect_block {
        let eof = src.lines().count().max(1);
        return Err(SyntaxIssue::indentation(
            eof,
            format!("expected an indented block after statement on line {opened}"),
        ));
    }
    Ok(())
}

/// Checks that `src` is exactly one top-level function named `name`.
pub fn check_function(src: &str, name: &str) -> Result<(), SyntaxIssue> {
    check_source(src)?;
    let lines = logical_lines(src)?;
    let first = lines
        .first()
        .ok_or_else(|| SyntaxIssue::syntax(1, "empty source"))?;
    let is_target = first.indent == 0
        && first_word(&first.code) == "def"
        && first.code["def".len()..].trim_start().starts_with(name)
        && first.code["def".len()..].trim_start()[name.len()..]
            .trim_start()
            .starts_with('(');
    if !is_target {
        return Err(SyntaxIssue::syntax(
            first.line,
            format!("source does not start with `def {name}(`"),
        ));
    }
    if let Some(stray) = lines.iter().skip(1).find(|l| l.indent == 0) {
        return Err(SyntaxIssue::syntax(
            stray.line,
            "unexpected top-level statement after the function",
        ));
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn err(src: &str) -> SyntaxIssue {
        check_source(src).expect_err("should fail")
    }

    #[test]
    fn accepts_typical_generated_code() {
        let src = r#"def execute_command(image):
    image_patch = ImagePatch(image)
    bananas = image_patch.find("banana")
    if len(bananas) == 0:
        return image_patch.simple_query("What appliance is above the bananas?")
    items = [p for p in image_patch.find("appliance")
             if p.vertical_center > bananas[0].vertical_center]
    text = """multi
line: ( unbalanced inside string"""
    d = {"a": 1, 'b': lambda x: x}
    try:
        return items[0].simple_query("What is this?")  # comment (
    except IndexError:
        return "microwave"
"#;
        check_function(src, "execute_command").unwrap();
    }

    #[test]
    fn unclosed_paren() {
        let e = err("def f(x):\n    return g(x\n");
        assert_eq!(e.exception, "SyntaxError");
        assert!(e.message.contains("never closed"), "{e}");
        assert_eq!(e.line, 2);
    }

    #[test]
    fn mismatched_bracket() {
        assert!(err("x = [1, 2)\n").message.contains("does not match"));
    }

    #[test]
    fn missing_colon() {
        let e = err("def f(x):\n    if x > 1\n        return 2\n");
        assert_eq!(e.message, "expected ':'");
        assert_eq!(e.line, 2);
    }

    #[test]
    fn empty_block() {
        let e = err("def f(x):\nreturn 1\n");
        assert_eq!(e.exception, "IndentationError");
        let e = err("def f(x):\n");
        assert!(e.message.starts_with("expected an indented block"));
    }

    #[test]
    fn bad_dedent_and_unexpected_indent() {
        let e = err("def f(x):\n    a = 1\n  b = 2\n");
        assert!(e.message.contains("unindent"));
        let e = err("a = 1\n    b = 2\n");
        assert_eq!(e.message, "unexpected indent");
    }

    #[test]
    fn unterminated_strings() {
        assert!(err("x = 'abc\n").message.contains("unterminated string"));
        assert!(err("x = \"\"\"abc\n").message.contains("triple-quoted"));
    }

    #[test]
    fn markdown_leftovers_rejected() {
        assert!(err("def f():\n    return 1\n```\n").message.contains("stray"));
    }

    #[test]
    fn python2_print() {
        assert!(err("print 'x'\n").message.contains("print"));
    }

    #[test]
    fn one_line_compound_ok() {
        check_source("def f(x):\n    if x: return 1\n    return 2\n").unwrap();
        check_source("def f(x):\n    g = lambda y: y + 1\n    return g(x)\n").unwrap();
        check_source("def f(x):\n    if (n := len(x)) > 3:\n        return n\n    return 0\n").unwrap();
    }

    #[test]
    fn function_shape() {
        check_function("def execute_test(image):\n    assert True\n", "execute_test").unwrap();
        assert!(check_function("def other(image):\n    pass\n", "execute_test").is_err());
        assert!(check_function("def execute_test(image):\n    pass\nx = 1\n", "execute_test").is_err());
        // prefix of another name does not count
        assert!(check_function("def execute_test2(image):\n    pass\n", "execute_test").is_err());
    }
}
