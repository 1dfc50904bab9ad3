//! Benchmark DSL.
//!
//! One contraction per line:
//!
//! ```text
//! C[m,n] += A[m,k] * B[k,n] | m=64 n=64 k=64 post=relu name=mm64
//! ```
//!
//! Whitespace is insignificant and `#` starts a comment. Besides `var=int`
//! extents the parameter list accepts `post=identity|relu` and `name=<label>`.

use std::collections::BTreeMap;
use std::fmt;

use thiserror::Error;

use crate::ir::{ContractionSpec, PostOp, SpecError, TensorRef};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParseErrorKind {
    Syntax,
    Semantic,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub struct ParseError {
    pub kind: ParseErrorKind,
    /// 1-based line, set when parsing multi-line input.
    pub line: Option<usize>,
    /// 1-based character column.
    pub column: usize,
    pub message: String,
}

impl fmt::Display for ParseError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let kind = match self.kind {
            ParseErrorKind::Syntax => "syntax error",
            ParseErrorKind::Semantic => "semantic error",
        };
        match self.line {
            Some(l) => write!(f, "{kind} at {l}:{}: {}", self.column, self.message),
            None => write!(f, "{kind} at column {}: {}", self.column, self.message),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok<'a> {
    Ident(&'a str),
    Int(&'a str),
    LBracket,
    RBracket,
    Comma,
    PlusEq,
    Star,
    Pipe,
    Eq,
    Minus,
}

impl fmt::Display for Tok<'_> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Tok::Ident(s) | Tok::Int(s) => write!(f, "`{s}`"),
            Tok::LBracket => f.write_str("`[`"),
            Tok::RBracket => f.write_str("`]`"),
            Tok::Comma => f.write_str("`,`"),
            Tok::PlusEq => f.write_str("`+=`"),
            Tok::Star => f.write_str("`*`"),
            Tok::Pipe => f.write_str("`|`"),
            Tok::Eq => f.write_str("`=`"),
            Tok::Minus => f.write_str("`-`"),
        }
    }
}

struct Lexer<'a> {
    toks: Vec<(usize, Tok<'a>)>,
    pos: usize,
    end_col: usize,
}

fn syntax(column: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        kind: ParseErrorKind::Syntax,
        line: None,
        column,
        message: message.into(),
    }
}

fn semantic(column: usize, message: impl Into<String>) -> ParseError {
    ParseError {
        kind: ParseErrorKind::Semantic,
        line: None,
        column,
        message: message.into(),
    }
}

fn is_ident_start(c: char) -> bool {
    c.is_ascii_alphabetic() || c == '_'
}

fn is_ident_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || c == '_'
}

fn is_label_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.')
}

impl<'a> Lexer<'a> {
    fn new(text: &'a str) -> Result<Self, ParseError> {
        let text = match text.find('#') {
            Some(i) => &text[..i],
            None => text,
        };
        let col = |byte: usize| text[..byte].chars().count() + 1;
        let mut toks = Vec::new();
        let mut it = text.char_indices().peekable();
        while let Some((i, c)) = it.next() {
            let tok = match c {
                c if c.is_whitespace() => continue,
                '[' => Tok::LBracket,
                ']' => Tok::RBracket,
                ',' => Tok::Comma,
                '*' => Tok::Star,
                '|' => Tok::Pipe,
                '=' => Tok::Eq,
                '-' => Tok::Minus,
                '+' => match it.next() {
                    Some((_, '=')) => Tok::PlusEq,
                    _ => return Err(syntax(col(i), "expected `+=`")),
                },
                c if c.is_ascii_digit() => {
                    let mut end = i + 1;
                    while let Some(&(j, d)) = it.peek() {
                        if !d.is_ascii_digit() {
                            break;
                        }
                        end = j + 1;
                        it.next();
                    }
                    Tok::Int(&text[i..end])
                }
                c if is_ident_start(c) => {
                    let mut end = i + c.len_utf8();
                    while let Some(&(j, d)) = it.peek() {
                        if !is_label_char(d) {
                            break;
                        }
                        end = j + d.len_utf8();
                        it.next();
                    }
                    Tok::Ident(&text[i..end])
                }
                other => return Err(syntax(col(i), format!("unexpected character `{other}`"))),
            };
            toks.push((col(i), tok));
        }
        Ok(Lexer {
            toks,
            pos: 0,
            end_col: col(text.len()),
        })
    }

    fn peek(&self) -> Option<&Tok<'a>> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn column(&self) -> usize {
        self.toks.get(self.pos).map_or(self.end_col, |(c, _)| *c)
    }

    fn next(&mut self) -> Option<(usize, Tok<'a>)> {
        let t = self.toks.get(self.pos).cloned();
        self.pos += 1;
        t
    }

    fn expect(&mut self, want: Tok<'static>) -> Result<usize, ParseError> {
        let col = self.column();
        match self.next() {
            Some((c, t)) if t == want => Ok(c),
            Some((c, t)) => Err(syntax(c, format!("expected {want}, found {t}"))),
            None => Err(syntax(col, format!("expected {want}, found end of line"))),
        }
    }

    fn ident(&mut self, what: &str) -> Result<(usize, &'a str), ParseError> {
        let col = self.column();
        match self.next() {
            Some((c, Tok::Ident(s))) => {
                if !s.chars().all(is_ident_char) {
                    return Err(syntax(c, format!("invalid {what} `{s}`")));
                }
                Ok((c, s))
            }
            Some((c, t)) => Err(syntax(c, format!("expected {what}, found {t}"))),
            None => Err(syntax(col, format!("expected {what}, found end of line"))),
        }
    }
}

fn tensor(lx: &mut Lexer<'_>) -> Result<TensorRef, ParseError> {
    let (_, name) = lx.ident("tensor name")?;
    lx.expect(Tok::LBracket)?;
    let mut indices = Vec::new();
    if lx.peek() != Some(&Tok::RBracket) {
        loop {
            let (_, idx) = lx.ident("index variable")?;
            indices.push(idx.to_string());
            if lx.peek() == Some(&Tok::Comma) {
                lx.next();
            } else {
                break;
            }
        }
    }
    lx.expect(Tok::RBracket)?;
    Ok(TensorRef {
        name: name.to_string(),
        indices,
    })
}

/// Parse a single benchmark line. Blank or comment-only input is a syntax error.
pub fn parse_spec(text: &str) -> Result<ContractionSpec, ParseError> {
    let mut lx = Lexer::new(text)?;
    let output = tensor(&mut lx)?;
    lx.expect(Tok::PlusEq)?;
    let a = tensor(&mut lx)?;
    lx.expect(Tok::Star)?;
    let b = tensor(&mut lx)?;
    if lx.peek() == Some(&Tok::Star) {
        return Err(semantic(lx.column(), "contractions take exactly two operands"));
    }
    lx.expect(Tok::Pipe)?;

    let mut extents = BTreeMap::new();
    let mut post_op = PostOp::Identity;
    let mut name = None;
    let mut cols: BTreeMap<String, usize> = BTreeMap::new();
    while lx.peek().is_some() {
        let (kcol, key) = lx.ident("parameter name")?;
        lx.expect(Tok::Eq)?;
        let vcol = lx.column();
        match key {
            "post" => {
                let (c, v) = lx.ident("post-op")?;
                post_op = match v {
                    "relu" => PostOp::Relu,
                    "identity" => PostOp::Identity,
                    other => return Err(semantic(c, format!("unknown post-op `{other}`"))),
                };
            }
            "name" => match lx.next() {
                Some((_, Tok::Ident(s))) | Some((_, Tok::Int(s))) => name = Some(s.to_string()),
                _ => return Err(syntax(vcol, "expected benchmark name")),
            },
            var => {
                let negative = lx.peek() == Some(&Tok::Minus);
                if negative {
                    lx.next();
                }
                let digits = match lx.next() {
                    Some((_, Tok::Int(d))) => d,
                    _ => return Err(syntax(vcol, format!("expected integer extent for `{var}`"))),
                };
                let value: usize = digits
                    .parse()
                    .ok()
                    .filter(|&v| v <= u32::MAX as usize)
                    .ok_or_else(|| semantic(vcol, format!("extent of `{var}` out of range")))?;
                if negative || value == 0 {
                    return Err(semantic(vcol, format!("extent of `{var}` must be positive")));
                }
                if extents.insert(var.to_string(), value).is_some() {
                    return Err(semantic(kcol, format!("extent of `{var}` declared twice")));
                }
                cols.insert(var.to_string(), kcol);
            }
        }
    }

    let name = name.unwrap_or_else(|| {
        let mut n = output.name.clone();
        for (v, e) in &extents {
            n.push_str(&format!("_{v}{e}"));
        }
        n
    });
    ContractionSpec::new(name, output, [a, b], extents, post_op).map_err(|e| {
        let col = match &e {
            SpecError::UnusedExtent(v) | SpecError::NonPositiveExtent(v) => {
                cols.get(v).copied().unwrap_or(1)
            }
            _ => 1,
        };
        semantic(col, e.to_string())
    })
}

/// Parse a file of benchmark lines, skipping blanks and comments.
pub fn parse_benchmarks(text: &str) -> Result<Vec<ContractionSpec>, ParseError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let body = line.split('#').next().unwrap_or("");
        if body.trim().is_empty() {
            continue;
        }
        out.push(parse_spec(line).map_err(|mut e| {
            e.line = Some(i + 1);
            e
        })?);
    }
    Ok(out)
}
