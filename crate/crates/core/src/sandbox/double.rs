//! Scripted guest: a protocol double that evaluates a small, straight-line
//! subset of Python against a scene fixture instead of an image.
//!
//! Supported: function definitions, assignments, `return`, `assert`,
//! `raise`, `pass`, imports (ignored) and expressions built from literals,
//! names, calls, attribute access, indexing, comparisons, boolean and
//! arithmetic operators, f-strings and `any(... for ... in ...)`. Compound
//! statements raise `NotImplementedError` when reached.
//!
//! Comment directives make failure scenarios easy to script:
//! `# double: raise Name: message`, `# double: hang` and
//! `# double: return-object NAME`.

use std::collections::HashMap;
use std::io::{BufRead, Write};
use std::rc::Rc;
use std::time::Duration;

use crate::guest_syntax::{check_source, Lexer};
use crate::metrics::normalize_answer;
use crate::outcome::ErrorPhase;
use crate::task::{BoundingBox, SceneFixture, TaskKind, DEFAULT_ANSWER};

use super::pyexpr::{
    parse_assert, parse_assignment, parse_expr, parse_params, BinOp, CmpOp, Expr, FPart, Lit, Param,
};
use super::{timeout_reply, ErrorReply, ExecutionRequest, GuestReply, Sandbox, SandboxError, WireValue};

const MAX_DEPTH: usize = 64;
const COMPOUND: &[&str] = &[
    "if", "elif", "else", "for", "while", "with", "try", "except", "finally", "class", "async", "match",
];

/// What the double does when a program asks it to hang.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HangMode {
    /// Answer immediately with the reply a supervisor would synthesize.
    Report,
    /// Block forever so an external supervisor has to kill the process.
    Block,
}

#[derive(Debug, Clone)]
pub struct ScriptedGuest {
    hang: HangMode,
}

impl Default for ScriptedGuest {
    fn default() -> Self {
        Self::new(HangMode::Report)
    }
}

impl ScriptedGuest {
    pub fn new(hang: HangMode) -> Self {
        Self { hang }
    }

    pub fn evaluate(
        &self,
        program: &str,
        kind: TaskKind,
        fixture: &SceneFixture,
        budget: Duration,
    ) -> GuestReply {
        let _ = kind;
        if let Err(issue) = check_source(program) {
            let source_line = program.lines().nth(issue.line.saturating_sub(1)).unwrap_or("");
            return GuestReply::Error(ErrorReply {
                phase: ErrorPhase::Parse,
                exception_name: issue.exception.clone(),
                message: issue.message.clone(),
                traceback: format!(
                    "  File \"<program>\", line {}\n    {}\n{}: {}",
                    issue.line,
                    source_line.trim(),
                    issue.exception,
                    issue.message
                ),
                timed_out: false,
                result: None,
            });
        }
        let nodes = build(program);
        let mut interp = Interp::new(fixture);
        match interp.exec_module(&nodes) {
            Ok(()) => GuestReply::Ok {
                result: interp.globals.get("result").map(wire).unwrap_or(WireValue::Null),
            },
            Err(Exc::Hang) => match self.hang {
                HangMode::Report => timeout_reply(budget),
                HangMode::Block => loop {
                    std::thread::sleep(Duration::from_secs(3600));
                },
            },
            Err(Exc::Raise {
                name,
                message,
                trace,
            }) => {
                let phase = match interp.globals.get("__phase__") {
                    Some(Val::Str(p)) if p == "test" => ErrorPhase::Test,
                    _ => ErrorPhase::Solution,
                };
                let result = match phase {
                    ErrorPhase::Test => interp.globals.get("result").map(wire),
                    _ => None,
                };
                GuestReply::Error(ErrorReply {
                    phase,
                    traceback: format_traceback(program, &trace, &name, &message),
                    exception_name: name,
                    message,
                    timed_out: false,
                    result,
                })
            }
        }
    }

    /// Serves exactly one request read from `input`.
    pub fn serve<R: BufRead, W: Write>(&self, mut input: R, mut output: W) -> Result<(), SandboxError> {
        let mut line = String::new();
        input.read_line(&mut line)?;
        let request: ExecutionRequest =
            serde_json::from_str(line.trim()).map_err(|e| SandboxError::Malformed {
                line: line.trim().to_string(),
                message: e.to_string(),
            })?;
        let reply = self.execute(&request)?;
        let mut text = serde_json::to_string(&reply).expect("reply serializes");
        text.push('\n');
        output.write_all(text.as_bytes())?;
        output.flush()?;
        Ok(())
    }
}

impl Sandbox for ScriptedGuest {
    fn execute(&self, request: &ExecutionRequest) -> Result<GuestReply, SandboxError> {
        let fixture =
            SceneFixture::load(&request.fixture_path).map_err(|e| SandboxError::Fixture(e.to_string()))?;
        Ok(self.evaluate(&request.program, request.kind, &fixture, request.budget()))
    }
}

fn format_traceback(program: &str, trace: &[(String, usize)], name: &str, message: &str) -> String {
    let lines: Vec<&str> = program.lines().collect();
    let mut out = String::from("Traceback (most recent call last):\n");
    for (func, line) in trace {
        out.push_str(&format!("  File \"<program>\", line {line}, in {func}\n"));
        if let Some(src) = lines.get(line.saturating_sub(1)) {
            out.push_str(&format!("    {}\n", src.trim()));
        }
    }
    if message.is_empty() {
        out.push_str(name);
    } else {
        out.push_str(&format!("{name}: {message}"));
    }
    out
}

// Program structure

#[derive(Debug)]
struct Item {
    line: usize,
    indent: usize,
    text: String,
    directive: bool,
}

#[derive(Debug)]
enum NodeKind {
    Stmt,
    Directive,
    Def {
        name: String,
        params: String,
        body: Rc<Vec<Node>>,
    },
    Compound(String),
}

#[derive(Debug)]
struct Node {
    line: usize,
    text: String,
    kind: NodeKind,
}

fn indent_of(line: &str) -> usize {
    line.chars()
        .take_while(|c| c.is_whitespace())
        .map(|c| if c == '\t' { 8 } else { 1 })
        .sum()
}

fn items(src: &str) -> Vec<Item> {
    let mut out = Vec::new();
    let mut lexer = Lexer::new();
    let mut current: Option<Item> = None;
    for (i, raw) in src.lines().enumerate() {
        if lexer.in_continuation() {
            if let Some(cur) = current.as_mut() {
                cur.text.push('\n');
                cur.text.push_str(raw);
            }
        } else {
            let trimmed = raw.trim();
            if trimmed.is_empty() {
                continue;
            }
            if let Some(comment) = trimmed.strip_prefix('#') {
                if let Some(d) = comment.trim_start().strip_prefix("double:") {
                    out.push(Item {
                        line: i + 1,
                        indent: indent_of(raw),
                        text: d.trim().to_string(),
                        directive: true,
                    });
                }
                continue;
            }
            current = Some(Item {
                line: i + 1,
                indent: indent_of(raw),
                text: raw.trim_start().to_string(),
                directive: false,
            });
        }
        lexer.feed_line(i + 1, raw);
        if !lexer.in_continuation() {
            out.extend(current.take());
        }
    }
    out.extend(current.take());
    out
}

fn first_word(text: &str) -> &str {
    let end = text
        .find(|c: char| !(c.is_alphanumeric() || c == '_'))
        .unwrap_or(text.len());
    &text[..end]
}

fn def_header(text: &str) -> Option<(String, String, Option<String>)> {
    let rest = text.strip_prefix("def")?.trim_start();
    let name = first_word(rest);
    if name.is_empty() {
        return None;
    }
    let after = rest[name.len()..].trim_start().strip_prefix('(')?;
    // Match the closing parenthesis of the parameter list.
    let mut depth = 0usize;
    let mut close = None;
    for (i, c) in after.char_indices() {
        match c {
            '(' | '[' | '{' => depth += 1,
            ')' if depth == 0 => {
                close = Some(i);
                break;
            }
            ')' | ']' | '}' => depth = depth.saturating_sub(1),
            _ => {}
        }
    }
    let close = close?;
    let params = after[..close].to_string();
    let tail = &after[close + 1..];
    let colon = tail.find(':')?;
    let inline = tail[colon + 1..].trim();
    let inline = (!inline.is_empty() && !inline.starts_with('#')).then(|| inline.to_string());
    Some((name.to_string(), params, inline))
}

fn nest(items: &[Item], pos: &mut usize, min_indent: usize) -> Vec<Node> {
    let mut nodes = Vec::new();
    let block_indent = items.get(*pos).map(|i| i.indent).unwrap_or(min_indent);
    while let Some(item) = items.get(*pos) {
        if item.indent < min_indent || (!item.directive && item.indent < block_indent) {
            break;
        }
        *pos += 1;
        if item.directive {
            nodes.push(Node {
                line: item.line,
                text: item.text.clone(),
                kind: NodeKind::Directive,
            });
            continue;
        }
        let word = first_word(&item.text);
        let has_body = items
            .get(*pos)
            .is_some_and(|next| next.indent > item.indent);
        let body = if has_body {
            nest(items, pos, item.indent + 1)
        } else {
            Vec::new()
        };
        let kind = if word == "def" {
            match def_header(&item.text) {
                Some((name, params, inline)) => {
                    let mut body = body;
                    if let Some(stmt) = inline {
                        body.insert(
                            0,
                            Node {
                                line: item.line,
                                text: stmt,
                                kind: NodeKind::Stmt,
                            },
                        );
                    }
                    NodeKind::Def {
                        name,
                        params,
                        body: Rc::new(body),
                    }
                }
                None => NodeKind::Compound("def".into()),
            }
        } else if COMPOUND.contains(&word) {
            NodeKind::Compound(word.to_string())
        } else {
            NodeKind::Stmt
        };
        nodes.push(Node {
            line: item.line,
            text: item.text.clone(),
            kind,
        });
    }
    nodes
}

fn build(src: &str) -> Vec<Node> {
    let items = items(src);
    let mut pos = 0;
    let mut nodes = nest(&items, &mut pos, 0);
    // Anything left over sits at an unexpected indent; keep evaluating it.
    while pos < items.len() {
        let indent = items[pos].indent;
        nodes.extend(nest(&items, &mut pos, indent));
    }
    nodes
}

// Values

#[derive(Debug, Clone, PartialEq)]
struct Patch {
    bbox: BoundingBox,
    object: Option<usize>,
}

#[derive(Debug)]
struct Func {
    name: String,
    params: Vec<Param>,
    body: Rc<Vec<Node>>,
}

#[derive(Debug, Clone)]
enum Val {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    None,
    List(Vec<Val>),
    Patch(Patch),
    Func(Rc<Func>),
    Builtin(&'static str),
    Type(&'static str),
}

const BUILTINS: &[&str] = &[
    "len",
    "isinstance",
    "any",
    "all",
    "llm_query",
    "bool_to_yesno",
    "print",
    "abs",
    "min",
    "max",
];
const TYPES: &[&str] = &["str", "int", "float", "bool", "list", "ImagePatch"];

fn type_name(v: &Val) -> &'static str {
    match v {
        Val::Str(_) => "str",
        Val::Int(_) => "int",
        Val::Float(_) => "float",
        Val::Bool(_) => "bool",
        Val::None => "NoneType",
        Val::List(_) => "list",
        Val::Patch(_) => "ImagePatch",
        Val::Func(_) => "function",
        Val::Builtin(_) => "builtin_function_or_method",
        Val::Type(_) => "type",
    }
}

fn truthy(v: &Val) -> bool {
    match v {
        Val::Str(s) => !s.is_empty(),
        Val::Int(i) => *i != 0,
        Val::Float(f) => *f != 0.0,
        Val::Bool(b) => *b,
        Val::None => false,
        Val::List(l) => !l.is_empty(),
        _ => true,
    }
}

fn fmt_float(f: f64) -> String {
    if f.is_finite() && f.fract() == 0.0 && f.abs() < 1e16 {
        format!("{f:.1}")
    } else {
        format!("{f}")
    }
}

fn py_repr(v: &Val) -> String {
    match v {
        Val::Str(s) => format!("'{}'", s.replace('\\', "\\\\").replace('\'', "\\'")),
        other => py_str(other),
    }
}

fn py_str(v: &Val) -> String {
    match v {
        Val::Str(s) => s.clone(),
        Val::Int(i) => i.to_string(),
        Val::Float(f) => fmt_float(*f),
        Val::Bool(true) => "True".into(),
        Val::Bool(false) => "False".into(),
        Val::None => "None".into(),
        Val::List(items) => format!(
            "[{}]",
            items.iter().map(py_repr).collect::<Vec<_>>().join(", ")
        ),
        Val::Patch(p) => format!(
            "ImagePatch({}, {}, {}, {})",
            p.bbox.left, p.bbox.lower, p.bbox.right, p.bbox.upper
        ),
        Val::Func(f) => format!("<function {}>", f.name),
        Val::Builtin(n) => format!("<built-in function {n}>"),
        Val::Type(n) => format!("<class '{n}'>"),
    }
}

fn wire(v: &Val) -> WireValue {
    match v {
        Val::Str(s) => WireValue::Text(s.clone()),
        Val::Patch(p) => WireValue::Box(p.bbox.into()),
        Val::None => WireValue::Null,
        other => WireValue::Text(py_str(other)),
    }
}

fn number(v: &Val) -> Option<f64> {
    match v {
        Val::Int(i) => Some(*i as f64),
        Val::Float(f) => Some(*f),
        Val::Bool(b) => Some(f64::from(u8::from(*b))),
        _ => None,
    }
}

fn py_eq(a: &Val, b: &Val) -> bool {
    match (a, b) {
        (Val::Str(x), Val::Str(y)) => x == y,
        (Val::None, Val::None) => true,
        (Val::List(x), Val::List(y)) => x.len() == y.len() && x.iter().zip(y).all(|(p, q)| py_eq(p, q)),
        (Val::Patch(x), Val::Patch(y)) => x.bbox == y.bbox,
        (Val::Type(x), Val::Type(y)) | (Val::Builtin(x), Val::Builtin(y)) => x == y,
        (Val::Func(x), Val::Func(y)) => Rc::ptr_eq(x, y),
        _ => match (number(a), number(b)) {
            (Some(x), Some(y)) => x == y,
            _ => false,
        },
    }
}

/// Lowercase, underscores as spaces, crude singular of the last word.
fn noun_key(s: &str) -> String {
    let words: Vec<String> = s
        .to_lowercase()
        .replace('_', " ")
        .split_whitespace()
        .map(str::to_string)
        .collect();
    let mut words = words;
    if let Some(last) = words.last_mut() {
        *last = singular(last);
    }
    words.join(" ")
}

fn singular(w: &str) -> String {
    if let Some(stem) = w.strip_suffix("ies") {
        if !stem.is_empty() {
            return format!("{stem}y");
        }
    }
    for suffix in ["ches", "shes", "sses", "xes"] {
        if w.ends_with(suffix) {
            return w[..w.len() - 2].to_string();
        }
    }
    if w.ends_with('s') && !w.ends_with("ss") && w.len() > 2 {
        return w[..w.len() - 1].to_string();
    }
    w.to_string()
}

fn question_key(s: &str) -> String {
    normalize_answer(s).trim_end_matches('?').trim_end().to_string()
}

fn lookup<'m>(map: &'m std::collections::BTreeMap<String, String>, q: &str) -> Option<&'m String> {
    map.get(q).or_else(|| {
        let key = question_key(q);
        map.iter().find(|(k, _)| question_key(k) == key).map(|(_, v)| v)
    })
}

// Interpreter

enum Exc {
    Raise {
        name: String,
        message: String,
        trace: Vec<(String, usize)>,
    },
    Hang,
}

type Res<T> = Result<T, Exc>;
type Locals = Option<HashMap<String, Val>>;

struct Interp<'a> {
    fixture: &'a SceneFixture,
    globals: HashMap<String, Val>,
    frames: Vec<(String, usize)>,
}

impl<'a> Interp<'a> {
    fn new(fixture: &'a SceneFixture) -> Self {
        let mut globals = HashMap::new();
        globals.insert(
            "image".to_string(),
            Val::Patch(Patch {
                bbox: fixture.bounds(),
                object: None,
            }),
        );
        Self {
            fixture,
            globals,
            frames: vec![("<module>".into(), 0)],
        }
    }

    fn raise<T>(&self, name: &str, message: impl Into<String>) -> Res<T> {
        Err(Exc::Raise {
            name: name.to_string(),
            message: message.into(),
            trace: self.frames.clone(),
        })
    }

    fn unsupported<T>(&self, what: impl std::fmt::Display) -> Res<T> {
        self.raise(
            "NotImplementedError",
            format!("scripted guest cannot evaluate {what}"),
        )
    }

    fn exec_module(&mut self, nodes: &[Node]) -> Res<()> {
        let mut locals: Locals = None;
        self.exec_block(nodes, &mut locals).map(|_| ())
    }

    fn exec_block(&mut self, nodes: &[Node], locals: &mut Locals) -> Res<Option<Val>> {
        for node in nodes {
            if let Some(frame) = self.frames.last_mut() {
                frame.1 = node.line;
            }
            if let Some(v) = self.exec_node(node, locals)? {
                return Ok(Some(v));
            }
        }
        Ok(None)
    }

    fn store(&mut self, locals: &mut Locals, name: &str, v: Val) {
        match locals {
            Some(map) => {
                map.insert(name.to_string(), v);
            }
            None => {
                self.globals.insert(name.to_string(), v);
            }
        }
    }

    fn exec_node(&mut self, node: &Node, locals: &mut Locals) -> Res<Option<Val>> {
        match &node.kind {
            NodeKind::Directive => self.directive(&node.text),
            NodeKind::Compound(word) => self.unsupported(format!("`{word}` blocks")),
            NodeKind::Def { name, params, body } => {
                let params = match parse_params(params) {
                    Ok(p) => p,
                    Err(e) => return self.unsupported(format!("parameters of `{name}`: {e}")),
                };
                let f = Val::Func(Rc::new(Func {
                    name: name.clone(),
                    params,
                    body: body.clone(),
                }));
                self.store(locals, name, f);
                Ok(None)
            }
            NodeKind::Stmt => self.statement(&node.text, locals),
        }
    }

    fn directive(&mut self, text: &str) -> Res<Option<Val>> {
        if text == "hang" {
            return Err(Exc::Hang);
        }
        if let Some(rest) = text.strip_prefix("raise ") {
            let (name, message) = match rest.split_once(':') {
                Some((n, m)) => (n.trim(), m.trim()),
                None => (rest.trim(), ""),
            };
            return self.raise(name, message);
        }
        if let Some(name) = text.strip_prefix("return-object ") {
            let key = noun_key(name);
            return match self
                .fixture
                .objects
                .iter()
                .position(|o| noun_key(&o.name) == key)
            {
                Some(i) => Ok(Some(Val::Patch(Patch {
                    bbox: self.fixture.objects[i].bbox,
                    object: Some(i),
                }))),
                None => self.raise("IndexError", "list index out of range"),
            };
        }
        self.unsupported(format!("directive `{text}`"))
    }

    fn statement(&mut self, text: &str, locals: &mut Locals) -> Res<Option<Val>> {
        let word = first_word(text);
        let rest = text[word.len()..].trim();
        match word {
            "pass" if rest.is_empty() => Ok(None),
            "import" | "from" => Ok(None),
            "return" => {
                if rest.is_empty() {
                    return Ok(Some(Val::None));
                }
                let e = self.parse(rest, parse_expr)?;
                self.eval(&e, locals).map(Some)
            }
            "assert" => {
                let (test, msg) = self.parse(rest, parse_assert)?;
                if truthy(&self.eval(&test, locals)?) {
                    return Ok(None);
                }
                let message = match msg {
                    Some(m) => py_str(&self.eval(&m, locals)?),
                    None => String::new(),
                };
                self.raise("AssertionError", message)
            }
            "raise" => {
                if rest.is_empty() {
                    return self.raise("RuntimeError", "No active exception to reraise");
                }
                let e = self.parse(rest, parse_expr)?;
                match e {
                    Expr::Name(n) => self.raise(&n, ""),
                    Expr::Call { func, args, .. } => match *func {
                        Expr::Name(n) => {
                            let message = match args.first() {
                                Some(a) => py_str(&self.eval(a, locals)?),
                                None => String::new(),
                            };
                            self.raise(&n, message)
                        }
                        _ => self.unsupported(format!("`{text}`")),
                    },
                    _ => self.unsupported(format!("`{text}`")),
                }
            }
            _ => match parse_assignment(text) {
                Some(Ok((targets, e))) => {
                    let v = self.eval(&e, locals)?;
                    for t in targets {
                        self.store(locals, &t, v.clone());
                    }
                    Ok(None)
                }
                Some(Err(err)) => self.unsupported(format!("`{text}`: {err}")),
                None => {
                    let e = self.parse(text, parse_expr)?;
                    self.eval(&e, locals)?;
                    Ok(None)
                }
            },
        }
    }

    fn parse<T>(
        &self,
        src: &str,
        f: impl Fn(&str) -> Result<T, super::pyexpr::ParseError>,
    ) -> Res<T> {
        match f(src) {
            Ok(v) => Ok(v),
            Err(e) => self.unsupported(format!("`{}`: {e}", src.trim())),
        }
    }

    fn lookup(&self, name: &str, locals: &Locals) -> Res<Val> {
        if let Some(v) = locals.as_ref().and_then(|l| l.get(name)) {
            return Ok(v.clone());
        }
        if let Some(v) = self.globals.get(name) {
            return Ok(v.clone());
        }
        if let Some(b) = BUILTINS.iter().find(|b| **b == name) {
            return Ok(Val::Builtin(b));
        }
        if let Some(t) = TYPES.iter().find(|t| **t == name) {
            return Ok(Val::Type(t));
        }
        self.raise("NameError", format!("name '{name}' is not defined"))
    }

    fn eval(&mut self, e: &Expr, locals: &mut Locals) -> Res<Val> {
        match e {
            Expr::Lit(l) => Ok(match l {
                Lit::Str(s) => Val::Str(s.clone()),
                Lit::Int(i) => Val::Int(*i),
                Lit::Float(f) => Val::Float(*f),
                Lit::Bool(b) => Val::Bool(*b),
                Lit::None => Val::None,
            }),
            Expr::Name(n) => self.lookup(n, locals),
            Expr::FStr(parts) => {
                let mut out = String::new();
                for p in parts {
                    match p {
                        FPart::Text(t) => out.push_str(t),
                        FPart::Expr(x) => out.push_str(&py_str(&self.eval(x, locals)?)),
                    }
                }
                Ok(Val::Str(out))
            }
            Expr::List(items) => {
                let mut out = Vec::with_capacity(items.len());
                for i in items {
                    out.push(self.eval(i, locals)?);
                }
                Ok(Val::List(out))
            }
            Expr::Attr(obj, attr) => {
                let v = self.eval(obj, locals)?;
                self.attribute(&v, attr)
            }
            Expr::Call { func, args, kwargs } => self.call(func, args, kwargs, locals),
            Expr::GenExp { elt, var, iter } => {
                let source = self.eval(iter, locals)?;
                let items = self.iterate(&source)?;
                let mut scope: Locals = Some(locals.clone().unwrap_or_default());
                let mut out = Vec::with_capacity(items.len());
                for item in items {
                    if let Some(map) = scope.as_mut() {
                        map.insert(var.clone(), item);
                    }
                    out.push(self.eval(elt, &mut scope)?);
                }
                Ok(Val::List(out))
            }
            Expr::Index(obj, index) => {
                let v = self.eval(obj, locals)?;
                let i = self.eval(index, locals)?;
                self.index(&v, &i)
            }
            Expr::Not(x) => Ok(Val::Bool(!truthy(&self.eval(x, locals)?))),
            Expr::Neg(x) => match self.eval(x, locals)? {
                Val::Int(i) => Ok(Val::Int(-i)),
                Val::Float(f) => Ok(Val::Float(-f)),
                other => self.raise(
                    "TypeError",
                    format!("bad operand type for unary -: '{}'", type_name(&other)),
                ),
            },
            Expr::And(a, b) => {
                let l = self.eval(a, locals)?;
                if truthy(&l) {
                    self.eval(b, locals)
                } else {
                    Ok(l)
                }
            }
            Expr::Or(a, b) => {
                let l = self.eval(a, locals)?;
                if truthy(&l) {
                    Ok(l)
                } else {
                    self.eval(b, locals)
                }
            }
            Expr::Compare(first, chain) => {
                let mut left = self.eval(first, locals)?;
                for (op, rhs) in chain {
                    let right = self.eval(rhs, locals)?;
                    if !self.compare(*op, &left, &right)? {
                        return Ok(Val::Bool(false));
                    }
                    left = right;
                }
                Ok(Val::Bool(true))
            }
            Expr::Bin(op, a, b) => {
                let l = self.eval(a, locals)?;
                let r = self.eval(b, locals)?;
                self.binary(*op, &l, &r)
            }
        }
    }

    fn iterate(&self, v: &Val) -> Res<Vec<Val>> {
        match v {
            Val::List(items) => Ok(items.clone()),
            Val::Str(s) => Ok(s.chars().map(|c| Val::Str(c.to_string())).collect()),
            other => self.raise(
                "TypeError",
                format!("'{}' object is not iterable", type_name(other)),
            ),
        }
    }

    fn index(&self, v: &Val, i: &Val) -> Res<Val> {
        let Val::Int(i) = i else {
            return self.raise(
                "TypeError",
                format!("indices must be integers, not {}", type_name(i)),
            );
        };
        let pick = |len: usize| -> Option<usize> {
            let idx = if *i < 0 { len as i64 + i } else { *i };
            (0..len as i64).contains(&idx).then_some(idx as usize)
        };
        match v {
            Val::List(items) => match pick(items.len()) {
                Some(k) => Ok(items[k].clone()),
                None => self.raise("IndexError", "list index out of range"),
            },
            Val::Str(s) => {
                let chars: Vec<char> = s.chars().collect();
                match pick(chars.len()) {
                    Some(k) => Ok(Val::Str(chars[k].to_string())),
                    None => self.raise("IndexError", "string index out of range"),
                }
            }
            other => self.raise(
                "TypeError",
                format!("'{}' object is not subscriptable", type_name(other)),
            ),
        }
    }

    fn compare(&self, op: CmpOp, a: &Val, b: &Val) -> Res<bool> {
        Ok(match op {
            CmpOp::Eq => py_eq(a, b),
            CmpOp::Ne => !py_eq(a, b),
            CmpOp::Is => matches!((a, b), (Val::None, Val::None)) || (matches!((a, b), (Val::Bool(_), Val::Bool(_))) && py_eq(a, b)),
            CmpOp::IsNot => !self.compare(CmpOp::Is, a, b)?,
            CmpOp::In => self.contains(b, a)?,
            CmpOp::NotIn => !self.contains(b, a)?,
            CmpOp::Lt | CmpOp::Le | CmpOp::Gt | CmpOp::Ge => {
                let ord = match (a, b) {
                    (Val::Str(x), Val::Str(y)) => x.partial_cmp(y),
                    _ => match (number(a), number(b)) {
                        (Some(x), Some(y)) => x.partial_cmp(&y),
                        _ => None,
                    },
                };
                let symbol = match op {
                    CmpOp::Lt => "<",
                    CmpOp::Le => "<=",
                    CmpOp::Gt => ">",
                    _ => ">=",
                };
                let Some(ord) = ord else {
                    return self.raise(
                        "TypeError",
                        format!(
                            "'{symbol}' not supported between instances of '{}' and '{}'",
                            type_name(a),
                            type_name(b)
                        ),
                    );
                };
                match op {
                    CmpOp::Lt => ord.is_lt(),
                    CmpOp::Le => ord.is_le(),
                    CmpOp::Gt => ord.is_gt(),
                    _ => ord.is_ge(),
                }
            }
        })
    }

    fn contains(&self, container: &Val, item: &Val) -> Res<bool> {
        match (container, item) {
            (Val::List(items), _) => Ok(items.iter().any(|x| py_eq(x, item))),
            (Val::Str(s), Val::Str(sub)) => Ok(s.contains(sub.as_str())),
            (Val::Str(_), other) => self.raise(
                "TypeError",
                format!("'in <string>' requires string as left operand, not {}", type_name(other)),
            ),
            (other, _) => self.raise(
                "TypeError",
                format!("argument of type '{}' is not iterable", type_name(other)),
            ),
        }
    }

    fn binary(&self, op: BinOp, a: &Val, b: &Val) -> Res<Val> {
        match (op, a, b) {
            (BinOp::Add, Val::Str(x), Val::Str(y)) => return Ok(Val::Str(format!("{x}{y}"))),
            (BinOp::Add, Val::List(x), Val::List(y)) => {
                return Ok(Val::List(x.iter().chain(y).cloned().collect()))
            }
            (BinOp::Add, Val::Int(x), Val::Int(y)) => return Ok(Val::Int(x + y)),
            (BinOp::Sub, Val::Int(x), Val::Int(y)) => return Ok(Val::Int(x - y)),
            (BinOp::Mul, Val::Int(x), Val::Int(y)) => return Ok(Val::Int(x * y)),
            _ => {}
        }
        let symbol = match op {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        };
        let (Some(x), Some(y)) = (number(a), number(b)) else {
            return self.raise(
                "TypeError",
                format!(
                    "unsupported operand type(s) for {symbol}: '{}' and '{}'",
                    type_name(a),
                    type_name(b)
                ),
            );
        };
        Ok(Val::Float(match op {
            BinOp::Add => x + y,
            BinOp::Sub => x - y,
            BinOp::Mul => x * y,
            BinOp::Div => {
                if y == 0.0 {
                    return self.raise("ZeroDivisionError", "division by zero");
                }
                x / y
            }
        }))
    }

    fn attribute(&self, v: &Val, attr: &str) -> Res<Val> {
        if let Val::Patch(p) = v {
            let b = &p.bbox;
            let value = match attr {
                "left" => Some(b.left),
                "lower" => Some(b.lower),
                "right" => Some(b.right),
                "upper" => Some(b.upper),
                "width" => Some(b.width()),
                "height" => Some(b.height()),
                "horizontal_center" => Some(b.center().0),
                "vertical_center" => Some(b.center().1),
                _ => None,
            };
            if let Some(f) = value {
                return Ok(Val::Float(f));
            }
        }
        self.no_attribute(v, attr)
    }

    fn no_attribute<T>(&self, v: &Val, attr: &str) -> Res<T> {
        self.raise(
            "AttributeError",
            format!("'{}' object has no attribute '{attr}'", type_name(v)),
        )
    }

    fn call(
        &mut self,
        func: &Expr,
        args: &[Expr],
        kwargs: &[(String, Expr)],
        locals: &mut Locals,
    ) -> Res<Val> {
        if let Expr::Attr(obj, method) = func {
            let target = self.eval(obj, locals)?;
            let mut vals = Vec::with_capacity(args.len());
            for a in args {
                vals.push(self.eval(a, locals)?);
            }
            return self.method(&target, method, &vals);
        }
        let callee = self.eval(func, locals)?;
        let mut vals = Vec::with_capacity(args.len());
        for a in args {
            vals.push(self.eval(a, locals)?);
        }
        let mut kw = Vec::with_capacity(kwargs.len());
        for (k, e) in kwargs {
            kw.push((k.clone(), self.eval(e, locals)?));
        }
        match callee {
            Val::Func(f) => self.call_function(&f, vals, kw),
            Val::Builtin(name) => self.builtin(name, &vals),
            Val::Type(name) => self.construct(name, &vals),
            other => self.raise(
                "TypeError",
                format!("'{}' object is not callable", type_name(&other)),
            ),
        }
    }

    fn call_function(&mut self, f: &Rc<Func>, args: Vec<Val>, kwargs: Vec<(String, Val)>) -> Res<Val> {
        if self.frames.len() > MAX_DEPTH {
            return self.raise("RecursionError", "maximum recursion depth exceeded");
        }
        let mut scope = HashMap::new();
        let mut positional = args.into_iter();
        let mut kwargs: Vec<(String, Val)> = kwargs;
        for p in &f.params {
            match p.star {
                1 => {
                    scope.insert(p.name.clone(), Val::List(positional.by_ref().collect()));
                }
                2 => {
                    scope.insert(p.name.clone(), Val::None);
                    kwargs.clear();
                }
                _ => {
                    let v = match positional.next() {
                        Some(v) => v,
                        None => match kwargs.iter().position(|(k, _)| *k == p.name) {
                            Some(i) => kwargs.remove(i).1,
                            None => match &p.default {
                                Some(d) => {
                                    let mut none: Locals = None;
                                    self.eval(d, &mut none)?
                                }
                                None => {
                                    return self.raise(
                                        "TypeError",
                                        format!(
                                            "{}() missing 1 required positional argument: '{}'",
                                            f.name, p.name
                                        ),
                                    )
                                }
                            },
                        },
                    };
                    scope.insert(p.name.clone(), v);
                }
            }
        }
        if positional.next().is_some() {
            return self.raise("TypeError", format!("{}() got too many positional arguments", f.name));
        }
        if let Some((k, _)) = kwargs.first() {
            return self.raise(
                "TypeError",
                format!("{}() got an unexpected keyword argument '{k}'", f.name),
            );
        }
        self.frames.push((f.name.clone(), 0));
        let mut locals: Locals = Some(scope);
        let out = self.exec_block(&f.body, &mut locals);
        let out = out?;
        self.frames.pop();
        Ok(out.unwrap_or(Val::None))
    }

    fn arity(&self, name: &str, args: &[Val], n: usize) -> Res<()> {
        if args.len() == n {
            Ok(())
        } else {
            self.raise(
                "TypeError",
                format!("{name}() takes {n} argument(s) ({} given)", args.len()),
            )
        }
    }

    fn builtin(&self, name: &str, args: &[Val]) -> Res<Val> {
        match name {
            "len" => {
                self.arity(name, args, 1)?;
                match &args[0] {
                    Val::Str(s) => Ok(Val::Int(s.chars().count() as i64)),
                    Val::List(l) => Ok(Val::Int(l.len() as i64)),
                    other => self.raise(
                        "TypeError",
                        format!("object of type '{}' has no len()", type_name(other)),
                    ),
                }
            }
            "isinstance" => {
                self.arity(name, args, 2)?;
                let types = match &args[1] {
                    Val::Type(t) => vec![*t],
                    Val::List(items) => items
                        .iter()
                        .filter_map(|t| match t {
                            Val::Type(t) => Some(*t),
                            _ => None,
                        })
                        .collect(),
                    _ => {
                        return self.raise(
                            "TypeError",
                            "isinstance() arg 2 must be a type or tuple of types",
                        )
                    }
                };
                let actual = type_name(&args[0]);
                Ok(Val::Bool(types.iter().any(|t| {
                    *t == actual || (*t == "int" && actual == "bool")
                })))
            }
            "any" | "all" => {
                self.arity(name, args, 1)?;
                let items = self.iterate(&args[0])?;
                Ok(Val::Bool(if name == "any" {
                    items.iter().any(truthy)
                } else {
                    items.iter().all(truthy)
                }))
            }
            "llm_query" => {
                let Some(Val::Str(q)) = args.first() else {
                    return self.raise("TypeError", "llm_query() expects a question string");
                };
                Ok(Val::Str(
                    lookup(&self.fixture.knowledge, q)
                        .cloned()
                        .unwrap_or_else(|| "no".into()),
                ))
            }
            "bool_to_yesno" => {
                self.arity(name, args, 1)?;
                Ok(Val::Str(if truthy(&args[0]) { "yes" } else { "no" }.into()))
            }
            "print" => Ok(Val::None),
            "abs" => {
                self.arity(name, args, 1)?;
                match &args[0] {
                    Val::Int(i) => Ok(Val::Int(i.abs())),
                    other => match number(other) {
                        Some(f) => Ok(Val::Float(f.abs())),
                        None => self.raise(
                            "TypeError",
                            format!("bad operand type for abs(): '{}'", type_name(other)),
                        ),
                    },
                }
            }
            "min" | "max" => {
                let items = match args {
                    [single] => self.iterate(single)?,
                    many => many.to_vec(),
                };
                let mut best: Option<Val> = None;
                for item in items {
                    best = Some(match best {
                        None => item,
                        Some(cur) => {
                            let better = if name == "min" {
                                self.compare(CmpOp::Lt, &item, &cur)?
                            } else {
                                self.compare(CmpOp::Gt, &item, &cur)?
                            };
                            if better {
                                item
                            } else {
                                cur
                            }
                        }
                    });
                }
                match best {
                    Some(v) => Ok(v),
                    None => self.raise("ValueError", format!("{name}() arg is an empty sequence")),
                }
            }
            other => self.unsupported(format!("builtin `{other}`")),
        }
    }

    fn construct(&self, name: &str, args: &[Val]) -> Res<Val> {
        match (name, args) {
            ("str", []) => Ok(Val::Str(String::new())),
            ("str", [v]) => Ok(Val::Str(py_str(v))),
            ("bool", [v]) => Ok(Val::Bool(truthy(v))),
            ("list", [v]) => Ok(Val::List(self.iterate(v)?)),
            ("int", [Val::Str(s)]) => match s.trim().parse::<i64>() {
                Ok(i) => Ok(Val::Int(i)),
                Err(_) => self.raise(
                    "ValueError",
                    format!("invalid literal for int() with base 10: '{s}'"),
                ),
            },
            ("int", [v]) => match number(v) {
                Some(f) => Ok(Val::Int(f.trunc() as i64)),
                None => self.raise("TypeError", format!("int() argument must be a string or a number, not '{}'", type_name(v))),
            },
            ("float", [Val::Str(s)]) => match s.trim().parse::<f64>() {
                Ok(f) => Ok(Val::Float(f)),
                Err(_) => self.raise("ValueError", format!("could not convert string to float: '{s}'")),
            },
            ("float", [v]) => match number(v) {
                Some(f) => Ok(Val::Float(f)),
                None => self.raise("TypeError", format!("float() argument must be a string or a number, not '{}'", type_name(v))),
            },
            ("ImagePatch", [Val::Patch(p)]) => Ok(Val::Patch(p.clone())),
            ("ImagePatch", _) => self.raise("TypeError", "ImagePatch() expects an image"),
            _ => self.raise("TypeError", format!("{name}() got unexpected arguments")),
        }
    }

    fn matching_objects(&self, patch: &Patch, name: &str) -> Vec<usize> {
        let key = noun_key(name);
        self.fixture
            .objects
            .iter()
            .enumerate()
            .filter(|(_, o)| noun_key(&o.name) == key && o.bbox.intersects(&patch.bbox))
            .map(|(i, _)| i)
            .collect()
    }

    fn str_arg<'v>(&self, method: &str, args: &'v [Val], i: usize) -> Res<&'v str> {
        match args.get(i) {
            Some(Val::Str(s)) => Ok(s),
            Some(other) => self.raise(
                "TypeError",
                format!("{method}() argument {} must be str, not {}", i + 1, type_name(other)),
            ),
            None => self.raise("TypeError", format!("{method}() missing argument {}", i + 1)),
        }
    }

    fn method(&self, target: &Val, method: &str, args: &[Val]) -> Res<Val> {
        match target {
            Val::Str(s) => self.str_method(s, method, args),
            Val::Patch(p) => self.patch_method(p, method, args),
            other => self.no_attribute(other, method),
        }
    }

    fn str_method(&self, s: &str, method: &str, args: &[Val]) -> Res<Val> {
        let text = |v: String| Ok(Val::Str(v));
        match method {
            "lower" => text(s.to_lowercase()),
            "upper" => text(s.to_uppercase()),
            "title" => text(
                s.split(' ')
                    .map(|w| {
                        let mut c = w.chars();
                        match c.next() {
                            Some(f) => f.to_uppercase().chain(c.flat_map(char::to_lowercase)).collect(),
                            None => String::new(),
                        }
                    })
                    .collect::<Vec<String>>()
                    .join(" "),
            ),
            "strip" => match args.first() {
                Some(Val::Str(chars)) => text(s.trim_matches(|c| chars.contains(c)).to_string()),
                _ => text(s.trim().to_string()),
            },
            "split" => {
                let parts: Vec<Val> = match args.first() {
                    Some(Val::Str(sep)) if !sep.is_empty() => {
                        s.split(sep.as_str()).map(|p| Val::Str(p.into())).collect()
                    }
                    Some(Val::Str(_)) => return self.raise("ValueError", "empty separator"),
                    _ => s.split_whitespace().map(|p| Val::Str(p.into())).collect(),
                };
                Ok(Val::List(parts))
            }
            "isdigit" | "isnumeric" => Ok(Val::Bool(!s.is_empty() && s.chars().all(|c| c.is_ascii_digit()))),
            "isalpha" => Ok(Val::Bool(!s.is_empty() && s.chars().all(char::is_alphabetic))),
            "startswith" => Ok(Val::Bool(s.starts_with(self.str_arg(method, args, 0)?))),
            "endswith" => Ok(Val::Bool(s.ends_with(self.str_arg(method, args, 0)?))),
            "find" => {
                let sub = self.str_arg(method, args, 0)?;
                Ok(Val::Int(match s.find(sub) {
                    Some(byte) => s[..byte].chars().count() as i64,
                    None => -1,
                }))
            }
            "count" => Ok(Val::Int(s.matches(self.str_arg(method, args, 0)?).count() as i64)),
            "replace" => text(s.replace(self.str_arg(method, args, 0)?, self.str_arg(method, args, 1)?)),
            _ => self.no_attribute(&Val::Str(s.to_string()), method),
        }
    }

    fn patch_method(&self, p: &Patch, method: &str, args: &[Val]) -> Res<Val> {
        match method {
            "find" => {
                let name = self.str_arg(method, args, 0)?;
                Ok(Val::List(
                    self.matching_objects(p, name)
                        .into_iter()
                        .map(|i| {
                            Val::Patch(Patch {
                                bbox: self.fixture.objects[i].bbox,
                                object: Some(i),
                            })
                        })
                        .collect(),
                ))
            }
            "exists" => {
                let name = self.str_arg(method, args, 0)?;
                Ok(Val::Bool(!self.matching_objects(p, name).is_empty()))
            }
            "verify_property" => {
                let name = self.str_arg(method, args, 0)?;
                let prop = noun_key(self.str_arg(method, args, 1)?);
                Ok(Val::Bool(self.matching_objects(p, name).into_iter().any(|i| {
                    self.fixture.objects[i]
                        .attributes
                        .iter()
                        .any(|a| noun_key(a) == prop)
                })))
            }
            "simple_query" => {
                let q = self.str_arg(method, args, 0)?;
                let default = self.fixture.default_answer.as_deref().unwrap_or(DEFAULT_ANSWER);
                Ok(Val::Str(
                    lookup(&self.fixture.qa, q)
                        .cloned()
                        .unwrap_or_else(|| default.to_string()),
                ))
            }
            "crop" => {
                let mut coords = [0.0; 4];
                if args.len() != 4 {
                    return self.raise("TypeError", format!("crop() takes 4 arguments ({} given)", args.len()));
                }
                for (slot, v) in coords.iter_mut().zip(args) {
                    match number(v) {
                        Some(f) => *slot = f,
                        None => {
                            return self.raise(
                                "TypeError",
                                format!("crop() coordinates must be numbers, not {}", type_name(v)),
                            )
                        }
                    }
                }
                let b = BoundingBox::from(coords);
                if b.validate().is_err() || !b.is_within(&self.fixture.bounds()) {
                    return self.raise(
                        "ValueError",
                        format!(
                            "crop box [{}, {}, {}, {}] lies outside the image",
                            coords[0], coords[1], coords[2], coords[3]
                        ),
                    );
                }
                Ok(Val::Patch(Patch {
                    bbox: b,
                    object: None,
                }))
            }
            "compute_depth" => {
                let depth = p
                    .object
                    .and_then(|i| self.fixture.depth.get(&self.fixture.objects[i].name));
                match depth {
                    Some(d) => Ok(Val::Float(*d)),
                    None => self.unsupported("compute_depth() on a patch without fixture depth"),
                }
            }
            "best_text_match" | "llm_query" => self.unsupported(format!("ImagePatch.{method}()")),
            _ => self.no_attribute(&Val::Patch(p.clone()), method),
        }
    }
}
