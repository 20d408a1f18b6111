//! Tokenizer and parser for the expression subset the scripted guest
//! evaluates. Anything outside the subset is a parse error, which the guest
//! reports as `NotImplementedError`.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub enum Lit {
    Str(String),
    Int(i64),
    Float(f64),
    Bool(bool),
    None,
}

#[derive(Debug, Clone, PartialEq)]
pub enum FPart {
    Text(String),
    Expr(Expr),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmpOp {
    Eq,
    Ne,
    Lt,
    Le,
    Gt,
    Ge,
    In,
    NotIn,
    Is,
    IsNot,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Expr {
    Lit(Lit),
    Name(String),
    FStr(Vec<FPart>),
    List(Vec<Expr>),
    Attr(Box<Expr>, String),
    Call {
        func: Box<Expr>,
        args: Vec<Expr>,
        kwargs: Vec<(String, Expr)>,
    },
    GenExp {
        elt: Box<Expr>,
        var: String,
        iter: Box<Expr>,
    },
    Index(Box<Expr>, Box<Expr>),
    Not(Box<Expr>),
    Neg(Box<Expr>),
    And(Box<Expr>, Box<Expr>),
    Or(Box<Expr>, Box<Expr>),
    Compare(Box<Expr>, Vec<(CmpOp, Expr)>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParseError(pub String);

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Name(String),
    Int(i64),
    Float(f64),
    Str { value: String, fmt: bool },
    Op(&'static str),
}

const OPS: &[&str] = &[
    "==", "!=", "<=", ">=", "->", "**", "//", "(", ")", "[", "]", "{", "}", ",", ".", ":", "=", "<",
    ">", "+", "-", "*", "/", "%",
];

fn unescape(body: &str, raw: bool) -> String {
    if raw {
        return body.to_string();
    }
    let mut out = String::with_capacity(body.len());
    let mut chars = body.chars();
    while let Some(c) = chars.next() {
        if c != '\\' {
            out.push(c);
            continue;
        }
        match chars.next() {
            Some('n') => out.push('\n'),
            Some('t') => out.push('\t'),
            Some('r') => out.push('\r'),
            Some('0') => out.push('\0'),
            Some('\n') => {}
            Some(other @ ('\\' | '\'' | '"')) => out.push(other),
            Some(other) => {
                out.push('\\');
                out.push(other);
            }
            None => out.push('\\'),
        }
    }
    out
}

fn tokenize(src: &str) -> Result<Vec<Tok>, ParseError> {
    let chars: Vec<char> = src.chars().collect();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        if c.is_whitespace() {
            i += 1;
            continue;
        }
        if c == '\\' && chars.get(i + 1) == Some(&'\n') {
            i += 2;
            continue;
        }
        if c == '#' {
            while i < chars.len() && chars[i] != '\n' {
                i += 1;
            }
            continue;
        }
        if c.is_ascii_alphabetic() || c == '_' {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_alphanumeric() || chars[i] == '_') {
                i += 1;
            }
            let word: String = chars[start..i].iter().collect();
            let lower = word.to_ascii_lowercase();
            let is_prefix = matches!(lower.as_str(), "f" | "r" | "b" | "u" | "rb" | "br" | "fr" | "rf");
            if is_prefix && matches!(chars.get(i), Some('"' | '\'')) {
                let (value, next) = read_string(&chars, i, lower.contains('r'))?;
                if lower.contains('b') {
                    return Err(ParseError("bytes literals are not supported".into()));
                }
                toks.push(Tok::Str {
                    value,
                    fmt: lower.contains('f'),
                });
                i = next;
            } else {
                toks.push(Tok::Name(word));
            }
            continue;
        }
        if c.is_ascii_digit() || (c == '.' && chars.get(i + 1).is_some_and(|d| d.is_ascii_digit())) {
            let start = i;
            while i < chars.len() && (chars[i].is_ascii_digit() || chars[i] == '.' || chars[i] == '_') {
                i += 1;
            }
            let text: String = chars[start..i].iter().filter(|c| **c != '_').collect();
            if text.contains('.') {
                let v = text
                    .parse()
                    .map_err(|_| ParseError(format!("bad number `{text}`")))?;
                toks.push(Tok::Float(v));
            } else {
                let v = text
                    .parse()
                    .map_err(|_| ParseError(format!("bad number `{text}`")))?;
                toks.push(Tok::Int(v));
            }
            continue;
        }
        if c == '"' || c == '\'' {
            let (value, next) = read_string(&chars, i, false)?;
            toks.push(Tok::Str { value, fmt: false });
            i = next;
            continue;
        }
        let rest: String = chars[i..chars.len().min(i + 2)].iter().collect();
        match OPS.iter().find(|op| rest.starts_with(**op)) {
            Some(op) => {
                toks.push(Tok::Op(op));
                i += op.len();
            }
            None => return Err(ParseError(format!("unexpected character `{c}`"))),
        }
    }
    Ok(toks)
}

/// Reads a string literal starting at the opening quote; returns the decoded
/// body and the index just past the closing quote.
fn read_string(chars: &[char], start: usize, raw: bool) -> Result<(String, usize), ParseError> {
    let q = chars[start];
    let triple = chars.get(start + 1) == Some(&q) && chars.get(start + 2) == Some(&q);
    let open = if triple { 3 } else { 1 };
    let mut i = start + open;
    while i < chars.len() {
        if chars[i] == '\\' {
            i += 2;
            continue;
        }
        let closes = if triple {
            chars[i] == q && chars.get(i + 1) == Some(&q) && chars.get(i + 2) == Some(&q)
        } else {
            chars[i] == q
        };
        if closes {
            let body: String = chars[start + open..i].iter().collect();
            return Ok((unescape(&body, raw), i + open));
        }
        i += 1;
    }
    Err(ParseError("unterminated string".into()))
}

struct Parser {
    toks: Vec<Tok>,
    pos: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos)
    }

    fn peek_at(&self, n: usize) -> Option<&Tok> {
        self.toks.get(self.pos + n)
    }

    fn next(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn is_op(&self, op: &str) -> bool {
        matches!(self.peek(), Some(Tok::Op(o)) if *o == op)
    }

    fn is_kw(&self, kw: &str) -> bool {
        matches!(self.peek(), Some(Tok::Name(n)) if n == kw)
    }

    fn eat_op(&mut self, op: &str) -> bool {
        if self.is_op(op) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn eat_kw(&mut self, kw: &str) -> bool {
        if self.is_kw(kw) {
            self.pos += 1;
            true
        } else {
            false
        }
    }

    fn expect_op(&mut self, op: &str) -> Result<(), ParseError> {
        if self.eat_op(op) {
            Ok(())
        } else {
            Err(ParseError(format!("expected `{op}`, found {:?}", self.peek())))
        }
    }

    fn name(&mut self) -> Result<String, ParseError> {
        match self.next() {
            Some(Tok::Name(n)) => Ok(n),
            other => Err(ParseError(format!("expected a name, found {other:?}"))),
        }
    }

    fn expr(&mut self) -> Result<Expr, ParseError> {
        if self.is_kw("lambda") {
            return Err(ParseError("lambda is not supported".into()));
        }
        let value = self.or_expr()?;
        if self.is_kw("if") {
            return Err(ParseError("conditional expressions are not supported".into()));
        }
        Ok(value)
    }

    fn or_expr(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.and_expr()?;
        while self.eat_kw("or") {
            left = Expr::Or(Box::new(left), Box::new(self.and_expr()?));
        }
        Ok(left)
    }

    fn and_expr(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.not_expr()?;
        while self.eat_kw("and") {
            left = Expr::And(Box::new(left), Box::new(self.not_expr()?));
        }
        Ok(left)
    }

    fn not_expr(&mut self) -> Result<Expr, ParseError> {
        if self.eat_kw("not") {
            return Ok(Expr::Not(Box::new(self.not_expr()?)));
        }
        self.comparison()
    }

    fn cmp_op(&mut self) -> Option<CmpOp> {
        let op = match self.peek()? {
            Tok::Op("==") => CmpOp::Eq,
            Tok::Op("!=") => CmpOp::Ne,
            Tok::Op("<") => CmpOp::Lt,
            Tok::Op("<=") => CmpOp::Le,
            Tok::Op(">") => CmpOp::Gt,
            Tok::Op(">=") => CmpOp::Ge,
            Tok::Name(n) if n == "in" => CmpOp::In,
            Tok::Name(n) if n == "not" && matches!(self.peek_at(1), Some(Tok::Name(m)) if m == "in") => {
                self.pos += 1;
                CmpOp::NotIn
            }
            Tok::Name(n) if n == "is" => {
                if matches!(self.peek_at(1), Some(Tok::Name(m)) if m == "not") {
                    self.pos += 1;
                    CmpOp::IsNot
                } else {
                    CmpOp::Is
                }
            }
            _ => return None,
        };
        self.pos += 1;
        Some(op)
    }

    fn comparison(&mut self) -> Result<Expr, ParseError> {
        let left = self.arith()?;
        let mut chain = Vec::new();
        while let Some(op) = self.cmp_op() {
            chain.push((op, self.arith()?));
        }
        if chain.is_empty() {
            Ok(left)
        } else {
            Ok(Expr::Compare(Box::new(left), chain))
        }
    }

    fn arith(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.term()?;
        loop {
            let op = if self.eat_op("+") {
                BinOp::Add
            } else if self.eat_op("-") {
                BinOp::Sub
            } else {
                return Ok(left);
            };
            left = Expr::Bin(op, Box::new(left), Box::new(self.term()?));
        }
    }

    fn term(&mut self) -> Result<Expr, ParseError> {
        let mut left = self.unary()?;
        loop {
            let op = if self.eat_op("*") {
                BinOp::Mul
            } else if self.eat_op("/") {
                BinOp::Div
            } else {
                return Ok(left);
            };
            left = Expr::Bin(op, Box::new(left), Box::new(self.unary()?));
        }
    }

    fn unary(&mut self) -> Result<Expr, ParseError> {
        if self.eat_op("-") {
            return Ok(Expr::Neg(Box::new(self.unary()?)));
        }
        if self.eat_op("+") {
            return self.unary();
        }
        self.postfix()
    }

    fn postfix(&mut self) -> Result<Expr, ParseError> {
        let mut e = self.atom()?;
        loop {
            if self.eat_op(".") {
                e = Expr::Attr(Box::new(e), self.name()?);
            } else if self.eat_op("(") {
                e = self.call(e)?;
            } else if self.eat_op("[") {
                if self.is_op(":") {
                    return Err(ParseError("slices are not supported".into()));
                }
                let index = self.expr()?;
                if self.is_op(":") {
                    return Err(ParseError("slices are not supported".into()));
                }
                self.expect_op("]")?;
                e = Expr::Index(Box::new(e), Box::new(index));
            } else {
                return Ok(e);
            }
        }
    }

    fn call(&mut self, func: Expr) -> Result<Expr, ParseError> {
        let mut args = Vec::new();
        let mut kwargs = Vec::new();
        while !self.is_op(")") {
            if self.is_op("*") || self.is_op("**") {
                return Err(ParseError("star arguments are not supported".into()));
            }
            let keyword = matches!(self.peek(), Some(Tok::Name(_)))
                && matches!(self.peek_at(1), Some(Tok::Op("=")));
            if keyword {
                let k = self.name()?;
                self.expect_op("=")?;
                kwargs.push((k, self.expr()?));
            } else {
                let value = self.expr()?;
                if self.eat_kw("for") {
                    let var = self.name()?;
                    if !self.eat_kw("in") {
                        return Err(ParseError("expected `in` in generator".into()));
                    }
                    let iter = self.or_expr()?;
                    if self.is_kw("if") || self.is_kw("for") {
                        return Err(ParseError("generator filters are not supported".into()));
                    }
                    args.push(Expr::GenExp {
                        elt: Box::new(value),
                        var,
                        iter: Box::new(iter),
                    });
                } else {
                    args.push(value);
                }
            }
            if !self.eat_op(",") {
                break;
            }
        }
        self.expect_op(")")?;
        Ok(Expr::Call {
            func: Box::new(func),
            args,
            kwargs,
        })
    }

    fn sequence(&mut self, close: &str) -> Result<Vec<Expr>, ParseError> {
        let mut items = Vec::new();
        while !self.is_op(close) {
            items.push(self.expr()?);
            if self.is_kw("for") {
                return Err(ParseError("comprehensions are not supported".into()));
            }
            if !self.eat_op(",") {
                break;
            }
        }
        self.expect_op(close)?;
        Ok(items)
    }

    fn atom(&mut self) -> Result<Expr, ParseError> {
        match self.next() {
            Some(Tok::Name(n)) => Ok(match n.as_str() {
                "True" => Expr::Lit(Lit::Bool(true)),
                "False" => Expr::Lit(Lit::Bool(false)),
                "None" => Expr::Lit(Lit::None),
                _ => Expr::Name(n),
            }),
            Some(Tok::Int(v)) => Ok(Expr::Lit(Lit::Int(v))),
            Some(Tok::Float(v)) => Ok(Expr::Lit(Lit::Float(v))),
            Some(Tok::Str { value, fmt }) => {
                let mut parts = vec![(value, fmt)];
                // Adjacent literals concatenate.
                while let Some(Tok::Str { .. }) = self.peek() {
                    if let Some(Tok::Str { value, fmt }) = self.next() {
                        parts.push((value, fmt));
                    }
                }
                if parts.iter().all(|(_, f)| !f) {
                    return Ok(Expr::Lit(Lit::Str(parts.into_iter().map(|(v, _)| v).collect())));
                }
                let mut out = Vec::new();
                for (value, fmt) in parts {
                    if fmt {
                        out.extend(fstring_parts(&value)?);
                    } else {
                        out.push(FPart::Text(value));
                    }
                }
                Ok(Expr::FStr(out))
            }
            Some(Tok::Op("(")) => {
                let items = self.sequence(")")?;
                match items.len() {
                    1 => Ok(items.into_iter().next().expect("one item")),
                    _ => Ok(Expr::List(items)),
                }
            }
            Some(Tok::Op("[")) => Ok(Expr::List(self.sequence("]")?)),
            other => Err(ParseError(format!("unexpected token {other:?}"))),
        }
    }
}

fn fstring_parts(body: &str) -> Result<Vec<FPart>, ParseError> {
    let mut parts = Vec::new();
    let mut text = String::new();
    let mut chars = body.chars().peekable();
    while let Some(c) = chars.next() {
        match c {
            '{' if chars.peek() == Some(&'{') => {
                chars.next();
                text.push('{');
            }
            '}' if chars.peek() == Some(&'}') => {
                chars.next();
                text.push('}');
            }
            '{' => {
                let mut inner = String::new();
                let mut depth = 0;
                loop {
                    match chars.next() {
                        Some('}') if depth == 0 => break,
                        Some(ch) => {
                            if matches!(ch, '(' | '[' | '{') {
                                depth += 1;
                            } else if matches!(ch, ')' | ']' | '}') {
                                depth -= 1;
                            }
                            inner.push(ch);
                        }
                        None => return Err(ParseError("unterminated f-string field".into())),
                    }
                }
                if inner.contains(':') || inner.contains('!') {
                    return Err(ParseError("f-string format specs are not supported".into()));
                }
                if !text.is_empty() {
                    parts.push(FPart::Text(std::mem::take(&mut text)));
                }
                parts.push(FPart::Expr(parse_expr(&inner)?));
            }
            '}' => return Err(ParseError("single `}` in f-string".into())),
            _ => text.push(c),
        }
    }
    if !text.is_empty() {
        parts.push(FPart::Text(text));
    }
    Ok(parts)
}

fn parser(src: &str) -> Result<Parser, ParseError> {
    Ok(Parser {
        toks: tokenize(src)?,
        pos: 0,
    })
}

fn finish<T>(p: &Parser, value: T) -> Result<T, ParseError> {
    match p.peek() {
        None => Ok(value),
        Some(t) => Err(ParseError(format!("unexpected trailing token {t:?}"))),
    }
}

pub fn parse_expr(src: &str) -> Result<Expr, ParseError> {
    let mut p = parser(src)?;
    let e = p.expr()?;
    finish(&p, e)
}

/// Parses `test[, message]` as found after `assert`.
pub fn parse_assert(src: &str) -> Result<(Expr, Option<Expr>), ParseError> {
    let mut p = parser(src)?;
    let test = p.expr()?;
    let msg = if p.eat_op(",") { Some(p.expr()?) } else { None };
    finish(&p, (test, msg))
}

/// Parses `name = value` when the statement is a plain assignment.
pub fn parse_assignment(src: &str) -> Option<Result<(Vec<String>, Expr), ParseError>> {
    let toks = tokenize(src).ok()?;
    let mut targets = Vec::new();
    let mut pos = 0;
    while let (Some(Tok::Name(n)), Some(Tok::Op("="))) = (toks.get(pos), toks.get(pos + 1)) {
        targets.push(n.clone());
        pos += 2;
    }
    if targets.is_empty() {
        return None;
    }
    let mut p = Parser { toks, pos };
    Some(p.expr().and_then(|e| finish(&p, (targets, e))))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param {
    pub name: String,
    pub default: Option<Expr>,
    pub star: u8,
}

/// Parses the inside of a `def name(...)` parameter list.
pub fn parse_params(src: &str) -> Result<Vec<Param>, ParseError> {
    let mut p = parser(src)?;
    let mut params = Vec::new();
    while p.peek().is_some() {
        let star = if p.eat_op("**") {
            2
        } else if p.eat_op("*") {
            1
        } else {
            0
        };
        let name = p.name()?;
        if p.eat_op(":") {
            p.expr()?;
        }
        let default = if p.eat_op("=") { Some(p.expr()?) } else { None };
        params.push(Param { name, default, star });
        if !p.eat_op(",") {
            break;
        }
    }
    finish(&p, params)
}
