//! Temporal behavior specs over finite execution traces.
//!
//! Formulas are evaluated over the *observable* positions of a trace: the
//! event-emitting steps, in order, each carrying its pre-instruction uid and
//! emitted events. Temporal operators use finite-trace semantics with a
//! strong next: on the empty trace atoms, `X`, `F`, and `U` are false and
//! `G` is true; boolean connectives are structural.
//!
//! Surface syntax: `!`, `&&`, `||`, `->`, prefix `F`/`G`/`X`, infix `U`
//! (right-associative), `exists v: body` / `forall v: body` quantifying `v`
//! over the 32-bit values occurring in the trace. Precedence, tightest
//! first: unary, `U`, `&&`, `||`, `->`.
//!
//! Two evaluators are provided. [`holds`] labels each subformula bottom-up
//! with its truth at every position, linear in `|formula| * |trace|` per
//! quantifier-free formula. [`holds_naive`] is a direct transcription of
//! the semantics, kept as the reference the labeling evaluator is
//! differential-tested against.

use std::collections::{BTreeSet, HashMap};
use std::fmt;

use crate::vm::{PathId, Perms, Region, SyscallEvent, SyscallKind, Trace, TraceEvent};

/// A value argument of an atom: literal or quantified variable.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Term {
    Lit(u32),
    Var(String),
}

impl Term {
    fn resolve(&self, env: &HashMap<String, u32>) -> u32 {
        match self {
            Term::Lit(v) => *v,
            Term::Var(name) => *env
                .get(name)
                .unwrap_or_else(|| panic!("unbound variable `{name}`")),
        }
    }
}

impl fmt::Display for Term {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Term::Lit(v) => write!(f, "{v}"),
            Term::Var(n) => write!(f, "{n}"),
        }
    }
}

/// Atomic propositions over a single observable position.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum AtomicProp {
    /// A file read flagged sensitive.
    ReadsSensitive,
    /// A file read of the given path.
    Reads(PathId),
    /// Any network send.
    SendAny,
    /// A file write to the given path.
    WritesTo(PathId),
    /// A memory write landing in the given region.
    WritesRegion(Region),
    /// An mprotect granting at least the given permission bits.
    Mprotect(Perms),
    /// The position's (pre-instruction) uid equals the term.
    UidEq(Term),
    /// The position's uid differs from the term.
    UidNe(Term),
    /// Any syscall of the given kind.
    Syscall(SyscallKind),
}

/// A temporal formula.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Formula {
    Atom(AtomicProp),
    Not(Box<Formula>),
    And(Box<Formula>, Box<Formula>),
    Or(Box<Formula>, Box<Formula>),
    Implies(Box<Formula>, Box<Formula>),
    Next(Box<Formula>),
    Eventually(Box<Formula>),
    Globally(Box<Formula>),
    Until(Box<Formula>, Box<Formula>),
    Exists(String, Box<Formula>),
    Forall(String, Box<Formula>),
}

impl Formula {
    pub fn boxed(self) -> Box<Formula> {
        Box::new(self)
    }

    /// Variables used without an enclosing quantifier.
    pub fn free_vars(&self) -> BTreeSet<String> {
        fn walk(f: &Formula, bound: &mut Vec<String>, out: &mut BTreeSet<String>) {
            let mut term = |t: &Term| {
                if let Term::Var(v) = t {
                    if !bound.iter().any(|b| b == v) {
                        out.insert(v.clone());
                    }
                }
            };
            match f {
                Formula::Atom(AtomicProp::UidEq(t)) | Formula::Atom(AtomicProp::UidNe(t)) => {
                    term(t)
                }
                Formula::Atom(_) => {}
                Formula::Not(a) | Formula::Next(a) | Formula::Eventually(a)
                | Formula::Globally(a) => walk(a, bound, out),
                Formula::And(a, b) | Formula::Or(a, b) | Formula::Implies(a, b)
                | Formula::Until(a, b) => {
                    walk(a, bound, out);
                    walk(b, bound, out);
                }
                Formula::Exists(v, a) | Formula::Forall(v, a) => {
                    bound.push(v.clone());
                    walk(a, bound, out);
                    bound.pop();
                }
            }
        }
        let mut out = BTreeSet::new();
        walk(self, &mut Vec::new(), &mut out);
        out
    }
}

/// One observable position: the pre-instruction uid and the events the
/// instruction emitted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Position {
    pub uid: u32,
    pub events: Vec<TraceEvent>,
}

/// The observable positions of a trace, in execution order.
pub fn positions(trace: &Trace) -> Vec<Position> {
    trace
        .observations
        .iter()
        .map(|o| Position { uid: o.uid, events: o.events.clone() })
        .collect()
}

/// All 32-bit values mentioned by the trace: position uids plus every value
/// argument carried by an event. This is the quantifier domain.
pub fn value_domain(trace: &Trace) -> BTreeSet<u32> {
    let mut out = BTreeSet::new();
    for obs in &trace.observations {
        out.insert(obs.uid);
        for ev in &obs.events {
            match ev {
                TraceEvent::Syscall(sc) => match sc {
                    SyscallEvent::Send { socket } => {
                        out.insert(*socket);
                    }
                    SyscallEvent::Setuid { value } | SyscallEvent::Time { value } => {
                        out.insert(*value);
                    }
                    _ => {}
                },
                TraceEvent::UidChange { old, new } => {
                    out.insert(*old);
                    out.insert(*new);
                }
                TraceEvent::MemWrite { addr, value, .. } => {
                    out.insert(*addr);
                    out.insert(*value as u32);
                }
                TraceEvent::BranchTaken { .. } => {}
            }
        }
    }
    out
}

fn atom_holds(atom: &AtomicProp, env: &HashMap<String, u32>, pos: &Position) -> bool {
    let any_syscall = |pred: &dyn Fn(&SyscallEvent) -> bool| {
        pos.events.iter().any(|e| matches!(e, TraceEvent::Syscall(sc) if pred(sc)))
    };
    match atom {
        AtomicProp::ReadsSensitive => {
            any_syscall(&|sc| matches!(sc, SyscallEvent::ReadFile { sensitive: true, .. }))
        }
        AtomicProp::Reads(path) => {
            any_syscall(&|sc| matches!(sc, SyscallEvent::ReadFile { path: p, .. } if p == path))
        }
        AtomicProp::SendAny => any_syscall(&|sc| matches!(sc, SyscallEvent::Send { .. })),
        AtomicProp::WritesTo(path) => {
            any_syscall(&|sc| matches!(sc, SyscallEvent::WriteFile { path: p } if p == path))
        }
        AtomicProp::WritesRegion(region) => pos
            .events
            .iter()
            .any(|e| matches!(e, TraceEvent::MemWrite { region: r, .. } if r == region)),
        AtomicProp::Mprotect(need) => any_syscall(&|sc| {
            matches!(sc, SyscallEvent::Mprotect { perms, .. } if perms.0 & need.0 == need.0)
        }),
        AtomicProp::UidEq(t) => pos.uid == t.resolve(env),
        AtomicProp::UidNe(t) => pos.uid != t.resolve(env),
        AtomicProp::Syscall(kind) => any_syscall(&|sc| sc.kind() == *kind),
    }
}

/// Truth of `formula` on the empty trace.
fn empty_holds(formula: &Formula, domain: &BTreeSet<u32>) -> bool {
    match formula {
        Formula::Atom(_) | Formula::Next(_) | Formula::Eventually(_) | Formula::Until(..) => {
            false
        }
        Formula::Globally(_) => true,
        Formula::Not(a) => !empty_holds(a, domain),
        Formula::And(a, b) => empty_holds(a, domain) && empty_holds(b, domain),
        Formula::Or(a, b) => empty_holds(a, domain) || empty_holds(b, domain),
        Formula::Implies(a, b) => !empty_holds(a, domain) || empty_holds(b, domain),
        Formula::Exists(_, a) => domain.iter().any(|_| empty_holds(a, domain)),
        Formula::Forall(_, a) => domain.iter().all(|_| empty_holds(a, domain)),
    }
}

/// Labels `formula` with its truth at every position, bottom-up. The
/// returned vector has one entry per position.
fn label(
    formula: &Formula,
    pos: &[Position],
    domain: &BTreeSet<u32>,
    env: &mut HashMap<String, u32>,
) -> Vec<bool> {
    let n = pos.len();
    match formula {
        Formula::Atom(a) => pos.iter().map(|p| atom_holds(a, env, p)).collect(),
        Formula::Not(a) => label(a, pos, domain, env).into_iter().map(|b| !b).collect(),
        Formula::And(a, b) => {
            let (la, lb) = (label(a, pos, domain, env), label(b, pos, domain, env));
            la.into_iter().zip(lb).map(|(x, y)| x && y).collect()
        }
        Formula::Or(a, b) => {
            let (la, lb) = (label(a, pos, domain, env), label(b, pos, domain, env));
            la.into_iter().zip(lb).map(|(x, y)| x || y).collect()
        }
        Formula::Implies(a, b) => {
            let (la, lb) = (label(a, pos, domain, env), label(b, pos, domain, env));
            la.into_iter().zip(lb).map(|(x, y)| !x || y).collect()
        }
        Formula::Next(a) => {
            let la = label(a, pos, domain, env);
            (0..n).map(|i| i + 1 < n && la[i + 1]).collect()
        }
        Formula::Eventually(a) => {
            let la = label(a, pos, domain, env);
            let mut out = vec![false; n];
            let mut seen = false;
            for i in (0..n).rev() {
                seen = seen || la[i];
                out[i] = seen;
            }
            out
        }
        Formula::Globally(a) => {
            let la = label(a, pos, domain, env);
            let mut out = vec![false; n];
            let mut all = true;
            for i in (0..n).rev() {
                all = all && la[i];
                out[i] = all;
            }
            out
        }
        Formula::Until(a, b) => {
            let (la, lb) = (label(a, pos, domain, env), label(b, pos, domain, env));
            let mut out = vec![false; n];
            for i in (0..n).rev() {
                out[i] = lb[i] || (la[i] && i + 1 < n && out[i + 1]);
            }
            out
        }
        Formula::Exists(v, a) => {
            let mut out = vec![false; n];
            for value in domain {
                let shadowed = env.insert(v.clone(), *value);
                let la = label(a, pos, domain, env);
                match shadowed {
                    Some(old) => {
                        env.insert(v.clone(), old);
                    }
                    None => {
                        env.remove(v);
                    }
                }
                for i in 0..n {
                    out[i] = out[i] || la[i];
                }
            }
            out
        }
        Formula::Forall(v, a) => {
            let mut out = vec![true; n];
            for value in domain {
                let shadowed = env.insert(v.clone(), *value);
                let la = label(a, pos, domain, env);
                match shadowed {
                    Some(old) => {
                        env.insert(v.clone(), old);
                    }
                    None => {
                        env.remove(v);
                    }
                }
                for i in 0..n {
                    out[i] = out[i] && la[i];
                }
            }
            out
        }
    }
}

/// Does the trace satisfy the formula? Closed formulas only; free variables
/// are a caller bug.
pub fn holds(formula: &Formula, trace: &Trace) -> bool {
    let pos = positions(trace);
    let domain = value_domain(trace);
    if pos.is_empty() {
        return empty_holds(formula, &domain);
    }
    label(formula, &pos, &domain, &mut HashMap::new())[0]
}

/// Reference evaluator: a direct transcription of the finite-trace
/// semantics by recursion on (formula, position). Exponential in nesting
/// depth in the worst case; exists to differential-test [`holds`].
pub fn holds_naive(formula: &Formula, trace: &Trace) -> bool {
    let pos = positions(trace);
    let domain = value_domain(trace);
    fn at(
        f: &Formula,
        i: usize,
        pos: &[Position],
        domain: &BTreeSet<u32>,
        env: &mut HashMap<String, u32>,
    ) -> bool {
        let n = pos.len();
        match f {
            Formula::Atom(a) => i < n && atom_holds(a, env, &pos[i]),
            Formula::Not(a) => !at(a, i, pos, domain, env),
            Formula::And(a, b) => at(a, i, pos, domain, env) && at(b, i, pos, domain, env),
            Formula::Or(a, b) => at(a, i, pos, domain, env) || at(b, i, pos, domain, env),
            Formula::Implies(a, b) => !at(a, i, pos, domain, env) || at(b, i, pos, domain, env),
            Formula::Next(a) => i + 1 < n && at(a, i + 1, pos, domain, env),
            Formula::Eventually(a) => (i..n).any(|j| at(a, j, pos, domain, env)),
            Formula::Globally(a) => (i..n).all(|j| at(a, j, pos, domain, env)),
            Formula::Until(a, b) => (i..n).any(|j| {
                at(b, j, pos, domain, env) && (i..j).all(|k| at(a, k, pos, domain, env))
            }),
            Formula::Exists(v, a) => domain.iter().any(|value| {
                let shadowed = env.insert(v.clone(), *value);
                let r = at(a, i, pos, domain, env);
                match shadowed {
                    Some(old) => {
                        env.insert(v.clone(), old);
                    }
                    None => {
                        env.remove(v);
                    }
                }
                r
            }),
            Formula::Forall(v, a) => domain.iter().all(|value| {
                let shadowed = env.insert(v.clone(), *value);
                let r = at(a, i, pos, domain, env);
                match shadowed {
                    Some(old) => {
                        env.insert(v.clone(), old);
                    }
                    None => {
                        env.remove(v);
                    }
                }
                r
            }),
        }
    }
    at(formula, 0, &pos, &domain, &mut HashMap::new())
}

// ---------------------------------------------------------------------------
// Printing

impl fmt::Display for AtomicProp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AtomicProp::ReadsSensitive => write!(f, "reads_sensitive"),
            AtomicProp::Reads(p) => write!(f, "reads({})", p.name()),
            AtomicProp::SendAny => write!(f, "send"),
            AtomicProp::WritesTo(p) => write!(f, "writes_to({})", p.name()),
            AtomicProp::WritesRegion(r) => write!(f, "writes_region({})", r.name()),
            AtomicProp::Mprotect(p) => write!(f, "mprotect({p})"),
            AtomicProp::UidEq(t) => write!(f, "uid_eq({t})"),
            AtomicProp::UidNe(t) => write!(f, "uid_ne({t})"),
            AtomicProp::Syscall(k) => write!(f, "syscall({})", k.name()),
        }
    }
}

/// Binding strength, loosest (1) to tightest (5); atoms are 6.
fn level(f: &Formula) -> u8 {
    match f {
        Formula::Implies(..) | Formula::Exists(..) | Formula::Forall(..) => 1,
        Formula::Or(..) => 2,
        Formula::And(..) => 3,
        Formula::Until(..) => 4,
        Formula::Not(_) | Formula::Next(_) | Formula::Eventually(_) | Formula::Globally(_) => 5,
        Formula::Atom(_) => 6,
    }
}

fn fmt_at(f: &Formula, min: u8, out: &mut fmt::Formatter<'_>) -> fmt::Result {
    let mine = level(f);
    if mine < min {
        write!(out, "(")?;
        fmt_at(f, 1, out)?;
        return write!(out, ")");
    }
    match f {
        Formula::Atom(a) => write!(out, "{a}"),
        Formula::Not(a) => {
            write!(out, "!")?;
            fmt_unary_operand(a, false, out)
        }
        Formula::Next(a) => {
            write!(out, "X")?;
            fmt_unary_operand(a, true, out)
        }
        Formula::Eventually(a) => {
            write!(out, "F")?;
            fmt_unary_operand(a, true, out)
        }
        Formula::Globally(a) => {
            write!(out, "G")?;
            fmt_unary_operand(a, true, out)
        }
        Formula::Until(a, b) => {
            fmt_at(a, 5, out)?;
            write!(out, " U ")?;
            fmt_at(b, 4, out)
        }
        Formula::And(a, b) => {
            fmt_at(a, 3, out)?;
            write!(out, " && ")?;
            fmt_at(b, 4, out)
        }
        Formula::Or(a, b) => {
            fmt_at(a, 2, out)?;
            write!(out, " || ")?;
            fmt_at(b, 3, out)
        }
        Formula::Implies(a, b) => {
            fmt_at(a, 2, out)?;
            write!(out, " -> ")?;
            fmt_at(b, 1, out)
        }
        Formula::Exists(v, a) => {
            write!(out, "exists {v}: ")?;
            fmt_at(a, 1, out)
        }
        Formula::Forall(v, a) => {
            write!(out, "forall {v}: ")?;
            fmt_at(a, 1, out)
        }
    }
}

/// Unary operands print bare when they bind at least as tightly, otherwise
/// in parentheses hugging the operator: `F(a && b)`, `!send`, `G F send`.
/// Letter operators need a separating space before a bare operand so two
/// idents do not fuse into one token.
fn fmt_unary_operand(a: &Formula, sep: bool, out: &mut fmt::Formatter<'_>) -> fmt::Result {
    if level(a) >= 5 {
        if sep {
            write!(out, " ")?;
        }
        fmt_at(a, 5, out)
    } else {
        write!(out, "(")?;
        fmt_at(a, 1, out)?;
        write!(out, ")")
    }
}

impl fmt::Display for Formula {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt_at(self, 1, f)
    }
}

// ---------------------------------------------------------------------------
// Parsing

/// Formula parse failure, with a byte offset into the source.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("offset {offset}: {msg}")]
pub struct FormulaError {
    pub offset: usize,
    pub msg: String,
}

fn ferr(offset: usize, msg: impl Into<String>) -> FormulaError {
    FormulaError { offset, msg: msg.into() }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    Ident(String),
    Number(u32),
    LParen,
    RParen,
    AndAnd,
    OrOr,
    Bang,
    Arrow,
    Colon,
}

fn lex(src: &str) -> Result<Vec<(usize, Tok)>, FormulaError> {
    let bytes = src.as_bytes();
    let mut toks = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let c = bytes[i] as char;
        match c {
            c if c.is_whitespace() => i += 1,
            '(' => {
                toks.push((i, Tok::LParen));
                i += 1;
            }
            ')' => {
                toks.push((i, Tok::RParen));
                i += 1;
            }
            '!' => {
                toks.push((i, Tok::Bang));
                i += 1;
            }
            ':' => {
                toks.push((i, Tok::Colon));
                i += 1;
            }
            '&' => {
                if bytes.get(i + 1) == Some(&b'&') {
                    toks.push((i, Tok::AndAnd));
                    i += 2;
                } else {
                    return Err(ferr(i, "expected `&&`"));
                }
            }
            '|' => {
                if bytes.get(i + 1) == Some(&b'|') {
                    toks.push((i, Tok::OrOr));
                    i += 2;
                } else {
                    return Err(ferr(i, "expected `||`"));
                }
            }
            '-' => {
                if bytes.get(i + 1) == Some(&b'>') {
                    toks.push((i, Tok::Arrow));
                    i += 2;
                } else {
                    return Err(ferr(i, "expected `->`"));
                }
            }
            c if c.is_ascii_digit() => {
                let start = i;
                while i < bytes.len() && (bytes[i] as char).is_ascii_digit() {
                    i += 1;
                }
                let n: u32 = src[start..i]
                    .parse()
                    .map_err(|_| ferr(start, "number out of range"))?;
                toks.push((start, Tok::Number(n)));
            }
            c if c.is_ascii_alphabetic() || c == '_' => {
                let start = i;
                while i < bytes.len()
                    && ((bytes[i] as char).is_ascii_alphanumeric() || bytes[i] == b'_')
                {
                    i += 1;
                }
                toks.push((start, Tok::Ident(src[start..i].to_string())));
            }
            other => return Err(ferr(i, format!("unexpected character `{other}`"))),
        }
    }
    Ok(toks)
}

struct FParser {
    toks: Vec<(usize, Tok)>,
    pos: usize,
    end: usize,
}

impl FParser {
    fn peek(&self) -> Option<&Tok> {
        self.toks.get(self.pos).map(|(_, t)| t)
    }

    fn offset(&self) -> usize {
        self.toks.get(self.pos).map(|(o, _)| *o).unwrap_or(self.end)
    }

    fn bump(&mut self) -> Option<Tok> {
        let t = self.toks.get(self.pos).map(|(_, t)| t.clone());
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, want: &Tok, what: &str) -> Result<(), FormulaError> {
        let off = self.offset();
        match self.bump() {
            Some(t) if t == *want => Ok(()),
            _ => Err(ferr(off, format!("expected {what}"))),
        }
    }

    fn parse_formula(&mut self) -> Result<Formula, FormulaError> {
        let lhs = self.parse_or()?;
        if self.peek() == Some(&Tok::Arrow) {
            self.bump();
            let rhs = self.parse_formula()?;
            return Ok(Formula::Implies(lhs.boxed(), rhs.boxed()));
        }
        Ok(lhs)
    }

    fn parse_or(&mut self) -> Result<Formula, FormulaError> {
        let mut lhs = self.parse_and()?;
        while self.peek() == Some(&Tok::OrOr) {
            self.bump();
            let rhs = self.parse_and()?;
            lhs = Formula::Or(lhs.boxed(), rhs.boxed());
        }
        Ok(lhs)
    }

    fn parse_and(&mut self) -> Result<Formula, FormulaError> {
        let mut lhs = self.parse_until()?;
        while self.peek() == Some(&Tok::AndAnd) {
            self.bump();
            let rhs = self.parse_until()?;
            lhs = Formula::And(lhs.boxed(), rhs.boxed());
        }
        Ok(lhs)
    }

    fn parse_until(&mut self) -> Result<Formula, FormulaError> {
        let lhs = self.parse_unary()?;
        if matches!(self.peek(), Some(Tok::Ident(id)) if id == "U") {
            self.bump();
            let rhs = self.parse_until()?;
            return Ok(Formula::Until(lhs.boxed(), rhs.boxed()));
        }
        Ok(lhs)
    }

    fn parse_unary(&mut self) -> Result<Formula, FormulaError> {
        let off = self.offset();
        match self.peek() {
            Some(Tok::Bang) => {
                self.bump();
                Ok(Formula::Not(self.parse_unary()?.boxed()))
            }
            Some(Tok::LParen) => {
                self.bump();
                let inner = self.parse_formula()?;
                self.expect(&Tok::RParen, "`)`")?;
                Ok(inner)
            }
            Some(Tok::Ident(id)) => match id.as_str() {
                "F" => {
                    self.bump();
                    Ok(Formula::Eventually(self.parse_unary()?.boxed()))
                }
                "G" => {
                    self.bump();
                    Ok(Formula::Globally(self.parse_unary()?.boxed()))
                }
                "X" => {
                    self.bump();
                    Ok(Formula::Next(self.parse_unary()?.boxed()))
                }
                "exists" | "forall" => {
                    let exists = id == "exists";
                    self.bump();
                    let var_off = self.offset();
                    let var = match self.bump() {
                        Some(Tok::Ident(v)) => v,
                        _ => return Err(ferr(var_off, "expected variable name")),
                    };
                    self.expect(&Tok::Colon, "`:` after quantified variable")?;
                    let body = self.parse_formula()?.boxed();
                    Ok(if exists {
                        Formula::Exists(var, body)
                    } else {
                        Formula::Forall(var, body)
                    })
                }
                _ => self.parse_atom(),
            },
            _ => Err(ferr(off, "expected a formula")),
        }
    }

    fn parse_atom(&mut self) -> Result<Formula, FormulaError> {
        let off = self.offset();
        let name = match self.bump() {
            Some(Tok::Ident(n)) => n,
            _ => return Err(ferr(off, "expected an atom")),
        };
        let arg = |parser: &mut Self| -> Result<(usize, String), FormulaError> {
            parser.expect(&Tok::LParen, "`(`")?;
            let aoff = parser.offset();
            let text = match parser.bump() {
                Some(Tok::Ident(a)) => a,
                Some(Tok::Number(n)) => n.to_string(),
                _ => return Err(ferr(aoff, "expected an argument")),
            };
            parser.expect(&Tok::RParen, "`)`")?;
            Ok((aoff, text))
        };
        let atom = match name.as_str() {
            "reads_sensitive" => AtomicProp::ReadsSensitive,
            "send" => AtomicProp::SendAny,
            "exec" => AtomicProp::Syscall(SyscallKind::Exec),
            "reads" => {
                let (aoff, a) = arg(self)?;
                AtomicProp::Reads(
                    PathId::from_name(&a).ok_or_else(|| ferr(aoff, "unknown path identifier"))?,
                )
            }
            "writes_to" => {
                let (aoff, a) = arg(self)?;
                AtomicProp::WritesTo(
                    PathId::from_name(&a).ok_or_else(|| ferr(aoff, "unknown path identifier"))?,
                )
            }
            "writes_region" => {
                let (aoff, a) = arg(self)?;
                AtomicProp::WritesRegion(
                    Region::from_name(&a).ok_or_else(|| ferr(aoff, "unknown region"))?,
                )
            }
            "mprotect" => {
                let (aoff, a) = arg(self)?;
                AtomicProp::Mprotect(
                    Perms::from_name(&a).ok_or_else(|| ferr(aoff, "bad permission flags"))?,
                )
            }
            "uid_eq" | "uid_ne" => {
                let (_, a) = arg(self)?;
                let term = match a.parse::<u32>() {
                    Ok(v) => Term::Lit(v),
                    Err(_) => Term::Var(a),
                };
                if name == "uid_eq" {
                    AtomicProp::UidEq(term)
                } else {
                    AtomicProp::UidNe(term)
                }
            }
            "syscall" => {
                let (aoff, a) = arg(self)?;
                let kind = SyscallKind::ALL
                    .iter()
                    .copied()
                    .find(|k| k.name() == a)
                    .ok_or_else(|| ferr(aoff, "unknown syscall kind"))?;
                AtomicProp::Syscall(kind)
            }
            other => return Err(ferr(off, format!("unknown atom `{other}`"))),
        };
        Ok(Formula::Atom(atom))
    }
}

/// Parses a formula from its surface syntax.
pub fn parse_formula(src: &str) -> Result<Formula, FormulaError> {
    let toks = lex(src)?;
    let mut p = FParser { toks, pos: 0, end: src.len() };
    let f = p.parse_formula()?;
    if p.pos != p.toks.len() {
        return Err(ferr(p.offset(), "trailing input after formula"));
    }
    Ok(f)
}

// ---------------------------------------------------------------------------
// Specs

/// A named behavior spec.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Spec {
    pub name: String,
    pub formula: Formula,
}

/// The built-in malicious behavior specs: data exfiltration, privilege
/// escalation, persistence installation, and self-modifying code.
pub fn builtin_specs() -> Vec<Spec> {
    let mk = |name: &str, src: &str| Spec {
        name: name.to_string(),
        formula: parse_formula(src).expect("builtin spec parses"),
    };
    vec![
        mk("exfil", "F(reads_sensitive && F(send))"),
        mk("privesc", "F(uid_ne(0) && X(uid_eq(0)))"),
        mk("persist", "F(writes_to(CRON) || writes_to(SYSTEMD))"),
        mk("poly", "F(mprotect(RWX) && F(writes_region(TEXT)))"),
    ]
}

/// Names of the specs the trace satisfies, in spec order. A non-empty
/// result marks the trace malicious.
pub fn classify_trace(trace: &Trace, specs: &[Spec]) -> Vec<String> {
    specs
        .iter()
        .filter(|s| holds(&s.formula, trace))
        .map(|s| s.name.clone())
        .collect()
}

/// Parses a spec file: one `name: formula` per line, `#` comments and blank
/// lines ignored.
pub fn parse_specs(src: &str) -> Result<Vec<Spec>, FormulaError> {
    let mut specs = Vec::new();
    let mut consumed = 0;
    for line in src.lines() {
        let offset = consumed;
        consumed += line.len() + 1;
        let body = line.trim();
        if body.is_empty() || body.starts_with('#') {
            continue;
        }
        let (name, rest) = body
            .split_once(':')
            .ok_or_else(|| ferr(offset, "expected `name: formula`"))?;
        let formula = parse_formula(rest)
            .map_err(|e| ferr(offset + name.len() + 1 + e.offset, e.msg))?;
        specs.push(Spec { name: name.trim().to_string(), formula });
    }
    Ok(specs)
}

/// Renders specs in the format [`parse_specs`] reads.
pub fn format_specs(specs: &[Spec]) -> String {
    let mut out = String::new();
    for s in specs {
        out.push_str(&format!("{}: {}\n", s.name, s.formula));
    }
    out
}
