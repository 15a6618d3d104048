//! Boolean access policies over attribute names.
//!
//! Text grammar (keywords are case-insensitive, rendered upper-case):
//!
//! ```text
//! expr      := term | term ("AND" term)+ | term ("OR" term)+
//! term      := leaf | "(" expr ")" | threshold
//! threshold := k "-of-{" expr ("," expr)* "}"
//! leaf      := [A-Za-z0-9_.:@-]+
//! ```
//!
//! Mixing `AND` and `OR` at one level is rejected; there is no implicit
//! precedence.

use std::collections::BTreeSet;
use std::fmt;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::wire::{DecodeError, Reader, Writer};

pub const POLICY_FORMAT_VERSION: u8 = 1;

const TAG_LEAF: u8 = 1;
const TAG_AND: u8 = 2;
const TAG_OR: u8 = 3;
const TAG_THRESHOLD: u8 = 4;

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Policy {
    Leaf(String),
    And(Vec<Policy>),
    Or(Vec<Policy>),
    Threshold { k: usize, children: Vec<Policy> },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolicyError {
    #[error("syntax error at byte {pos}: {msg}")]
    Syntax { pos: usize, msg: String },
    #[error("invalid policy: {0}")]
    Invalid(String),
}

impl Policy {
    pub fn leaf(name: impl Into<String>) -> Self {
        Policy::Leaf(name.into())
    }

    pub fn and(children: Vec<Policy>) -> Self {
        Policy::And(children)
    }

    pub fn or(children: Vec<Policy>) -> Self {
        Policy::Or(children)
    }

    pub fn threshold(k: usize, children: Vec<Policy>) -> Self {
        Policy::Threshold { k, children }
    }

    pub fn parse(text: &str) -> Result<Self, PolicyError> {
        let p = Parser::new(text)?.parse_all()?;
        p.validate()?;
        Ok(p)
    }

    /// Structural checks: non-empty gates, `1 <= k <= m`, well-formed names.
    pub fn validate(&self) -> Result<(), PolicyError> {
        match self {
            Policy::Leaf(name) => {
                if !is_valid_leaf(name) {
                    return Err(PolicyError::Invalid(format!("bad attribute name {name:?}")));
                }
            }
            Policy::And(c) | Policy::Or(c) => {
                if c.is_empty() {
                    return Err(PolicyError::Invalid("empty gate".into()));
                }
                for ch in c {
                    ch.validate()?;
                }
            }
            Policy::Threshold { k, children } => {
                if *k < 1 || *k > children.len() {
                    return Err(PolicyError::Invalid(format!(
                        "threshold {k}-of-{} out of range",
                        children.len()
                    )));
                }
                if children.len() > 255 {
                    return Err(PolicyError::Invalid("threshold wider than 255".into()));
                }
                for ch in children {
                    ch.validate()?;
                }
            }
        }
        Ok(())
    }

    /// Leaf names in pre-order (duplicates kept).
    pub fn leaves(&self) -> Vec<&str> {
        let mut out = Vec::new();
        self.collect_leaves(&mut out);
        out
    }

    fn collect_leaves<'a>(&'a self, out: &mut Vec<&'a str>) {
        match self {
            Policy::Leaf(n) => out.push(n),
            Policy::And(c) | Policy::Or(c) | Policy::Threshold { children: c, .. } => {
                for ch in c {
                    ch.collect_leaves(out);
                }
            }
        }
    }

    pub fn leaf_count(&self) -> usize {
        match self {
            Policy::Leaf(_) => 1,
            Policy::And(c) | Policy::Or(c) | Policy::Threshold { children: c, .. } => {
                c.iter().map(Policy::leaf_count).sum()
            }
        }
    }

    /// Depth of the tree; a bare leaf has depth 1.
    pub fn depth(&self) -> usize {
        match self {
            Policy::Leaf(_) => 1,
            Policy::And(c) | Policy::Or(c) | Policy::Threshold { children: c, .. } => {
                1 + c.iter().map(Policy::depth).max().unwrap_or(0)
            }
        }
    }

    pub fn satisfied_by<F: Fn(&str) -> bool + Copy>(&self, has: F) -> bool {
        match self {
            Policy::Leaf(n) => has(n),
            Policy::And(c) => c.iter().all(|ch| ch.satisfied_by(has)),
            Policy::Or(c) => c.iter().any(|ch| ch.satisfied_by(has)),
            Policy::Threshold { k, children } => {
                children.iter().filter(|ch| ch.satisfied_by(has)).count() >= *k
            }
        }
    }

    /// Versioned canonical bytes: format version, then pre-order nodes.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.u8(POLICY_FORMAT_VERSION);
        self.write_node(&mut w);
        w.finish()
    }

    fn write_node(&self, w: &mut Writer) {
        match self {
            Policy::Leaf(n) => {
                w.u8(TAG_LEAF).u16(n.len() as u16).raw(n.as_bytes());
            }
            Policy::And(c) | Policy::Or(c) => {
                w.u8(if matches!(self, Policy::And(_)) { TAG_AND } else { TAG_OR });
                w.u16(c.len() as u16);
                for ch in c {
                    ch.write_node(w);
                }
            }
            Policy::Threshold { k, children } => {
                w.u8(TAG_THRESHOLD).u16(*k as u16).u16(children.len() as u16);
                for ch in children {
                    ch.write_node(w);
                }
            }
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DecodeError> {
        let mut r = Reader::new(bytes);
        let p = Self::read(&mut r)?;
        r.finish()?;
        Ok(p)
    }

    pub(crate) fn read(r: &mut Reader<'_>) -> Result<Self, DecodeError> {
        r.expect_version(POLICY_FORMAT_VERSION)?;
        let p = Self::read_node(r, 0)?;
        p.validate().map_err(|_| DecodeError::Invalid("policy"))?;
        Ok(p)
    }

    fn read_node(r: &mut Reader<'_>, depth: usize) -> Result<Self, DecodeError> {
        if depth > 64 {
            return Err(DecodeError::Invalid("policy depth"));
        }
        let children = |r: &mut Reader<'_>, n: usize| -> Result<Vec<Policy>, DecodeError> {
            (0..n).map(|_| Self::read_node(r, depth + 1)).collect()
        };
        match r.u8("policy node")? {
            TAG_LEAF => {
                let n = r.u16("leaf")? as usize;
                let name = std::str::from_utf8(r.take(n, "leaf")?)
                    .map_err(|_| DecodeError::Utf8("leaf"))?;
                Ok(Policy::Leaf(name.to_string()))
            }
            TAG_AND => {
                let n = r.u16("and")? as usize;
                Ok(Policy::And(children(r, n)?))
            }
            TAG_OR => {
                let n = r.u16("or")? as usize;
                Ok(Policy::Or(children(r, n)?))
            }
            TAG_THRESHOLD => {
                let k = r.u16("threshold")? as usize;
                let n = r.u16("threshold")? as usize;
                Ok(Policy::Threshold {
                    k,
                    children: children(r, n)?,
                })
            }
            tag => Err(DecodeError::Tag {
                what: "policy node",
                tag,
            }),
        }
    }

    /// Random policy over `attrs` with at most `max_depth` levels.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, attrs: &[String], max_depth: usize) -> Policy {
        assert!(!attrs.is_empty());
        if max_depth <= 1 || rng.gen_bool(0.3) {
            return Policy::Leaf(attrs.choose(rng).unwrap().clone());
        }
        let width = rng.gen_range(2..=3);
        let children: Vec<Policy> = (0..width)
            .map(|_| Policy::random(rng, attrs, max_depth - 1))
            .collect();
        match rng.gen_range(0..3) {
            0 => Policy::And(children),
            1 => Policy::Or(children),
            _ => {
                let k = rng.gen_range(1..=children.len());
                Policy::Threshold { k, children }
            }
        }
    }
}

/// Reference evaluator over an explicit attribute set.
pub fn policy_satisfies(policy: &Policy, attrs: &BTreeSet<String>) -> bool {
    policy.satisfied_by(|a| attrs.contains(a))
}

pub fn parse_policy(text: &str) -> Result<Policy, PolicyError> {
    Policy::parse(text)
}

impl std::str::FromStr for Policy {
    type Err = PolicyError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Policy::parse(s)
    }
}

impl fmt::Display for Policy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Policy::Leaf(n) => f.write_str(n),
            Policy::And(c) | Policy::Or(c) => {
                let op = if matches!(self, Policy::And(_)) { " AND " } else { " OR " };
                if c.len() == 1 {
                    // A unary gate renders as a 1-of-1 threshold so it reparses
                    // to the same tree shape.
                    return write!(f, "1-of-{{{}}}", c[0]);
                }
                for (i, ch) in c.iter().enumerate() {
                    if i > 0 {
                        f.write_str(op)?;
                    }
                    match ch {
                        Policy::And(_) | Policy::Or(_) => write!(f, "({ch})")?,
                        _ => write!(f, "{ch}")?,
                    }
                }
                Ok(())
            }
            Policy::Threshold { k, children } => {
                write!(f, "{k}-of-{{")?;
                for (i, ch) in children.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{ch}")?;
                }
                f.write_str("}")
            }
        }
    }
}

fn is_leaf_char(c: char) -> bool {
    c.is_ascii_alphanumeric() || matches!(c, '_' | '.' | ':' | '@' | '-')
}

fn is_keyword(w: &str) -> bool {
    w.eq_ignore_ascii_case("and") || w.eq_ignore_ascii_case("or")
}

fn is_valid_leaf(name: &str) -> bool {
    !name.is_empty()
        && name.len() <= u16::MAX as usize
        && name.chars().all(is_leaf_char)
        && !is_keyword(name)
        && threshold_prefix(name).is_none()
}

/// `"3-of-"` -> `Some(3)`.
fn threshold_prefix(word: &str) -> Option<usize> {
    let digits = word.strip_suffix("-of-")?;
    if digits.is_empty() || !digits.chars().all(|c| c.is_ascii_digit()) {
        return None;
    }
    digits.parse().ok()
}

#[derive(Debug, Clone, PartialEq)]
enum Tok {
    Word(String),
    And,
    Or,
    Threshold(usize),
    LParen,
    RParen,
    RBrace,
    Comma,
}

struct Parser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl Parser {
    fn new(text: &str) -> Result<Self, PolicyError> {
        let mut toks = Vec::new();
        let chars: Vec<(usize, char)> = text.char_indices().collect();
        let mut i = 0;
        while i < chars.len() {
            let (at, c) = chars[i];
            match c {
                c if c.is_whitespace() => i += 1,
                '(' => {
                    toks.push((at, Tok::LParen));
                    i += 1;
                }
                ')' => {
                    toks.push((at, Tok::RParen));
                    i += 1;
                }
                '}' => {
                    toks.push((at, Tok::RBrace));
                    i += 1;
                }
                ',' => {
                    toks.push((at, Tok::Comma));
                    i += 1;
                }
                c if is_leaf_char(c) => {
                    let start = i;
                    while i < chars.len() && is_leaf_char(chars[i].1) {
                        i += 1;
                    }
                    let end_byte = chars.get(i).map(|x| x.0).unwrap_or(text.len());
                    let word = &text[at..end_byte];
                    let _ = start;
                    if let (Some(k), Some((_, '{'))) = (threshold_prefix(word), chars.get(i)) {
                        toks.push((at, Tok::Threshold(k)));
                        i += 1;
                    } else if word.eq_ignore_ascii_case("and") {
                        toks.push((at, Tok::And));
                    } else if word.eq_ignore_ascii_case("or") {
                        toks.push((at, Tok::Or));
                    } else {
                        toks.push((at, Tok::Word(word.to_string())));
                    }
                }
                other => {
                    return Err(PolicyError::Syntax {
                        pos: at,
                        msg: format!("unexpected character {other:?}"),
                    })
                }
            }
        }
        Ok(Parser {
            toks,
            pos: 0,
            end: text.len(),
        })
    }

    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|t| &t.1)
    }

    fn here(&self) -> usize {
        self.toks.get(self.pos).map(|t| t.0).unwrap_or(self.end)
    }

    fn err<T>(&self, msg: impl Into<String>) -> Result<T, PolicyError> {
        Err(PolicyError::Syntax {
            pos: self.here(),
            msg: msg.into(),
        })
    }

    fn parse_all(mut self) -> Result<Policy, PolicyError> {
        if self.toks.is_empty() {
            return self.err("empty policy");
        }
        let p = self.expr()?;
        if self.pos != self.toks.len() {
            return self.err("unexpected trailing input");
        }
        Ok(p)
    }

    fn expr(&mut self) -> Result<Policy, PolicyError> {
        let first = self.term()?;
        let op = match self.peek() {
            Some(Tok::And) => Tok::And,
            Some(Tok::Or) => Tok::Or,
            _ => return Ok(first),
        };
        let mut children = vec![first];
        loop {
            match self.peek() {
                Some(t) if *t == op => {
                    self.pos += 1;
                    children.push(self.term()?);
                }
                Some(Tok::And) | Some(Tok::Or) => {
                    return self.err("ambiguous: parenthesize mixed AND/OR");
                }
                _ => break,
            }
        }
        Ok(if op == Tok::And {
            Policy::And(children)
        } else {
            Policy::Or(children)
        })
    }

    fn term(&mut self) -> Result<Policy, PolicyError> {
        match self.peek().cloned() {
            Some(Tok::Word(w)) => {
                self.pos += 1;
                Ok(Policy::Leaf(w))
            }
            Some(Tok::LParen) => {
                self.pos += 1;
                let inner = self.expr()?;
                if self.peek() != Some(&Tok::RParen) {
                    return self.err("expected ')'");
                }
                self.pos += 1;
                Ok(inner)
            }
            Some(Tok::Threshold(k)) => {
                self.pos += 1;
                let mut children = vec![self.expr()?];
                loop {
                    match self.peek() {
                        Some(Tok::Comma) => {
                            self.pos += 1;
                            children.push(self.expr()?);
                        }
                        Some(Tok::RBrace) => {
                            self.pos += 1;
                            break;
                        }
                        _ => return self.err("expected ',' or '}'"),
                    }
                }
                if k < 1 || k > children.len() {
                    return self.err(format!("threshold {k}-of-{} out of range", children.len()));
                }
                Ok(Policy::Threshold { k, children })
            }
            Some(_) => self.err("expected attribute, '(' or threshold"),
            None => self.err("unexpected end of policy"),
        }
    }
}
