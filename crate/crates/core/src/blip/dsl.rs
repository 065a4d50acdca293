//! Text form of blip models.
//!
//! ```text
//! # comments run to end of line; statements end at `;` or newline
//! [m=0]                  # block scope: any of all, m=INT, k=INT, j=INT
//! psi1: a[m]
//! psi3: a[m]*timegap
//! [m=1, k=2]
//! psi7: a[m]            # or on one line: [m=1,k=2] psi7: a[m]; psi8: h[m][0]
//! psi10: a[m]*h[m-1][0]
//! ```
//!
//! Factors: `a[T]`, `h[T][r]`, `l[T][c]`, `lagsum_a`, `timegap`, where `T` is
//! `m`, `m-d` or an absolute time. Repeating a label adds its terms into one
//! coefficient, within or across blocks.

use std::fmt;

use super::{Atom, BlipModel, Block, Scope, Term, TimeRef};
use crate::error::{Error, Result};

struct Cursor<'a> {
    text: &'a str,
    pos: usize,
    line: usize,
    col0: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, message: impl Into<String>) -> Error {
        Error::SpecParse {
            line: self.line,
            column: self.col0 + self.pos + 1,
            message: message.into(),
        }
    }

    fn rest(&self) -> &'a str {
        &self.text[self.pos..]
    }

    fn skip_ws(&mut self) {
        while self.rest().starts_with([' ', '\t', '\r']) {
            self.pos += 1;
        }
    }

    fn eat(&mut self, s: &str) -> bool {
        self.skip_ws();
        if self.rest().starts_with(s) {
            self.pos += s.len();
            true
        } else {
            false
        }
    }

    fn expect(&mut self, s: &str) -> Result<()> {
        if self.eat(s) {
            Ok(())
        } else {
            Err(self.err(format!("expected `{s}`")))
        }
    }

    fn int(&mut self) -> Result<usize> {
        self.skip_ws();
        let digits = self.rest().chars().take_while(char::is_ascii_digit).count();
        if digits == 0 {
            return Err(self.err("expected integer"));
        }
        let v = self.rest()[..digits]
            .parse()
            .map_err(|_| self.err("integer out of range"))?;
        self.pos += digits;
        Ok(v)
    }

    fn ident(&mut self) -> Result<&'a str> {
        self.skip_ws();
        let rest = self.rest();
        let len = rest
            .char_indices()
            .take_while(|&(i, c)| c == '_' || c.is_ascii_alphabetic() || (i > 0 && c.is_ascii_digit()))
            .count();
        if len == 0 {
            return Err(self.err("expected identifier"));
        }
        self.pos += len;
        Ok(&rest[..len])
    }

    fn at_end(&mut self) -> bool {
        self.skip_ws();
        self.rest().is_empty()
    }
}

fn parse_time(c: &mut Cursor<'_>, term: &str) -> Result<TimeRef> {
    c.skip_ws();
    if c.eat("m") {
        if c.eat("-") {
            let d = c.int()?;
            return Ok(if d == 0 { TimeRef::Current } else { TimeRef::Lag(d) });
        }
        if c.eat("+") {
            let d = c.int()?;
            if d > 0 {
                return Err(Error::Leakage {
                    term: term.to_string(),
                    detail: format!("m+{d} is after the blip time"),
                });
            }
        }
        return Ok(TimeRef::Current);
    }
    Ok(TimeRef::Abs(c.int()?))
}

fn parse_factor(c: &mut Cursor<'_>, term: &str) -> Result<Atom> {
    let name = c.ident()?;
    let atom = match name {
        "a" => {
            c.expect("[")?;
            let t = parse_time(c, term)?;
            c.expect("]")?;
            Atom::A(t)
        }
        "h" | "l" => {
            c.expect("[")?;
            let t = parse_time(c, term)?;
            c.expect("]")?;
            c.expect("[")?;
            let idx = c.int()?;
            c.expect("]")?;
            if name == "h" {
                Atom::H(t, idx)
            } else {
                Atom::L(t, idx)
            }
        }
        "lagsum_a" => {
            if c.eat("(") {
                c.expect("m")?;
                c.expect(")")?;
            }
            Atom::LagsumA
        }
        "timegap" => Atom::Timegap,
        other => return Err(c.err(format!("unknown factor `{other}`"))),
    };
    Ok(atom)
}

fn parse_scope(c: &mut Cursor<'_>) -> Result<Scope> {
    let mut scope = Scope::default();
    loop {
        let key = c.ident()?;
        match key {
            "all" => {}
            "m" | "k" | "j" => {
                c.expect("=")?;
                let v = c.int()?;
                let slot = match key {
                    "m" => &mut scope.m,
                    "k" => &mut scope.k,
                    _ => &mut scope.j,
                };
                if slot.is_some() {
                    return Err(c.err(format!("`{key}` given twice")));
                }
                *slot = Some(v);
            }
            other => return Err(c.err(format!("unknown scope key `{other}`"))),
        }
        if c.eat("]") {
            break;
        }
        if !c.eat(",") {
            return Err(c.err("expected `,` or `]`"));
        }
    }
    if let (Some(m), Some(k)) = (scope.m, scope.k) {
        if k <= m {
            return Err(c.err(format!("block needs k > m, got m={m}, k={k}")));
        }
    }
    if scope.k == Some(0) {
        return Err(c.err("k=0 admits no blip times"));
    }
    Ok(scope)
}

/// Earliest blip time a block may be evaluated at.
fn min_m(scope: &Scope) -> usize {
    scope.m.unwrap_or(0)
}

fn check_term(term: &Term, scope: &Scope, text: &str, require_zero: bool) -> Result<()> {
    for f in &term.factors {
        if let Some(TimeRef::Abs(t)) = f.time() {
            if t > min_m(scope) {
                return Err(Error::Leakage {
                    term: text.to_string(),
                    detail: format!(
                        "absolute time {t} may exceed the blip time (block allows m={})",
                        min_m(scope)
                    ),
                });
            }
        }
    }
    if require_zero {
        let vanishes = term.factors.iter().any(|f| match f {
            Atom::A(t) | Atom::H(t, _) => match *t {
                TimeRef::Current => true,
                TimeRef::Abs(a) => scope.m == Some(a),
                TimeRef::Lag(_) => false,
            },
            _ => false,
        });
        if !vanishes {
            return Err(Error::ZeroConstraintViolation(text.to_string()));
        }
    }
    Ok(())
}

pub(super) fn parse(text: &str, require_zero: bool) -> Result<BlipModel> {
    let mut labels: Vec<String> = Vec::new();
    let mut blocks: Vec<Block> = Vec::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("");
        let mut offset = 0;
        for stmt in line.split(';') {
            let mut c = Cursor {
                text: stmt,
                pos: 0,
                line: lineno + 1,
                col0: offset,
            };
            offset += stmt.len() + 1;
            if c.at_end() {
                continue;
            }
            if c.eat("[") {
                let scope = parse_scope(&mut c)?;
                blocks.push(Block {
                    scope,
                    terms: Vec::new(),
                });
                if c.at_end() {
                    continue;
                }
            }
            let label = c.ident()?.to_string();
            c.expect(":")?;
            let body = stmt[c.pos..].trim().to_string();
            let mut factors = vec![parse_factor(&mut c, &body)?];
            while c.eat("*") {
                factors.push(parse_factor(&mut c, &body)?);
            }
            if !c.at_end() {
                return Err(c.err("unexpected text after term"));
            }
            if blocks.is_empty() {
                blocks.push(Block {
                    scope: Scope::default(),
                    terms: Vec::new(),
                });
            }
            let block = blocks.last_mut().expect("non-empty");
            let term = Term {
                label: intern(&mut labels, &label),
                factors,
            };
            check_term(&term, &block.scope, &format!("{label}: {body}"), require_zero)?;
            block.terms.push(term);
        }
    }
    if labels.is_empty() {
        return Err(Error::SpecParse {
            line: 1,
            column: 1,
            message: "model has no terms".into(),
        });
    }
    Ok(BlipModel { labels, blocks })
}

fn intern(labels: &mut Vec<String>, label: &str) -> usize {
    match labels.iter().position(|l| l == label) {
        Some(i) => i,
        None => {
            labels.push(label.to_string());
            labels.len() - 1
        }
    }
}

impl fmt::Display for TimeRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TimeRef::Current => write!(f, "m"),
            TimeRef::Lag(d) => write!(f, "m-{d}"),
            TimeRef::Abs(t) => write!(f, "{t}"),
        }
    }
}

impl fmt::Display for Atom {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Atom::A(t) => write!(f, "a[{t}]"),
            Atom::H(t, r) => write!(f, "h[{t}][{r}]"),
            Atom::L(t, c) => write!(f, "l[{t}][{c}]"),
            Atom::LagsumA => write!(f, "lagsum_a"),
            Atom::Timegap => write!(f, "timegap"),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = [("m", self.m), ("k", self.k), ("j", self.j)]
            .iter()
            .filter_map(|(k, v)| v.map(|v| format!("{k}={v}")))
            .collect();
        if parts.is_empty() {
            write!(f, "[all]")
        } else {
            write!(f, "[{}]", parts.join(","))
        }
    }
}

impl fmt::Display for BlipModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for block in &self.blocks {
            writeln!(f, "{}", block.scope)?;
            for term in &block.terms {
                let factors: Vec<String> = term.factors.iter().map(Atom::to_string).collect();
                writeln!(f, "{}: {}", self.labels[term.label], factors.join("*"))?;
            }
        }
        Ok(())
    }
}
