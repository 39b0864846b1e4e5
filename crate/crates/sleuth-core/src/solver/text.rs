//! Canonical text form for expressions and path constraints.
//!
//! S-expression syntax: constants are decimal, symbolic bytes are `in[i]`,
//! operators are prefix (`(add in[0] 1)`, `(ult in[0] 10)`, `(and p q)`).
//! Bitwise and boolean connectives use distinct names (`bvand` vs `and`) so
//! the sort of a term is visible in its text. A path constraint prints as a
//! flat top-level `(and c1 c2 ...)`, one argument per clause, `true` when
//! empty.
//!
//! `parse_constraint` inverts `Display` up to conjunction grouping: n-ary
//! `and` parses as its argument list, so a single clause that is itself a
//! top-level conjunction reparses as several clauses. The conjunction is
//! the same either way.

use std::fmt;

use crate::vm::CmpKind;

use super::{BinOp, PathConstraint, SymExpr, UnOp};

fn bin_name(op: BinOp) -> &'static str {
    match op {
        BinOp::Add => "add",
        BinOp::Sub => "sub",
        BinOp::Mul => "mul",
        BinOp::And => "bvand",
        BinOp::Or => "bvor",
        BinOp::Xor => "bvxor",
        BinOp::Shl => "shl",
        BinOp::Shr => "shr",
    }
}

fn cmp_name(cmp: CmpKind) -> &'static str {
    match cmp {
        CmpKind::Eq => "eq",
        CmpKind::Ne => "ne",
        CmpKind::Slt => "slt",
        CmpKind::Sle => "sle",
        CmpKind::Ult => "ult",
        CmpKind::Ule => "ule",
    }
}

impl fmt::Display for SymExpr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SymExpr::Const(c) => write!(f, "{c}"),
            SymExpr::SymByte(i) => write!(f, "in[{i}]"),
            SymExpr::Unary(UnOp::Not, a) => write!(f, "(bvnot {a})"),
            SymExpr::Unary(UnOp::Neg, a) => write!(f, "(neg {a})"),
            SymExpr::Binary(op, a, b) => write!(f, "({} {a} {b})", bin_name(*op)),
            SymExpr::Cmp(cmp, a, b) => write!(f, "({} {a} {b})", cmp_name(*cmp)),
            SymExpr::BoolAnd(a, b) => write!(f, "(and {a} {b})"),
            SymExpr::BoolOr(a, b) => write!(f, "(or {a} {b})"),
            SymExpr::BoolNot(a) => write!(f, "(not {a})"),
        }
    }
}

pub(super) fn fmt_constraint(pc: &PathConstraint, f: &mut fmt::Formatter<'_>) -> fmt::Result {
    match pc.clauses.len() {
        0 => write!(f, "true"),
        1 => write!(f, "{}", pc.clauses[0]),
        _ => {
            write!(f, "(and")?;
            for c in &pc.clauses {
                write!(f, " {c}")?;
            }
            write!(f, ")")
        }
    }
}

/// Text parsing failures.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TextError {
    #[error("unexpected end of input")]
    UnexpectedEnd,
    #[error("unexpected token `{0}`")]
    UnexpectedToken(String),
    #[error("unknown operator `{0}`")]
    UnknownOp(String),
    #[error("operator `{op}` expects {expected} arguments, found {got}")]
    Arity { op: String, expected: usize, got: usize },
    #[error("malformed atom `{0}`")]
    BadAtom(String),
    #[error("trailing input after expression")]
    TrailingInput,
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Token {
    LParen,
    RParen,
    Atom(String),
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut tokens = Vec::new();
    let mut atom = String::new();
    let flush = |atom: &mut String, tokens: &mut Vec<Token>| {
        if !atom.is_empty() {
            tokens.push(Token::Atom(std::mem::take(atom)));
        }
    };
    for c in text.chars() {
        match c {
            '(' => {
                flush(&mut atom, &mut tokens);
                tokens.push(Token::LParen);
            }
            ')' => {
                flush(&mut atom, &mut tokens);
                tokens.push(Token::RParen);
            }
            c if c.is_whitespace() => flush(&mut atom, &mut tokens),
            c => atom.push(c),
        }
    }
    flush(&mut atom, &mut tokens);
    tokens
}

struct Parser {
    tokens: Vec<Token>,
    pos: usize,
}

impl Parser {
    fn next(&mut self) -> Result<&Token, TextError> {
        let t = self.tokens.get(self.pos).ok_or(TextError::UnexpectedEnd)?;
        self.pos += 1;
        Ok(t)
    }

    fn parse_atom(text: &str) -> Result<SymExpr, TextError> {
        if let Some(rest) = text.strip_prefix("in[") {
            let idx = rest
                .strip_suffix(']')
                .and_then(|s| s.parse::<u16>().ok())
                .ok_or_else(|| TextError::BadAtom(text.to_string()))?;
            return Ok(SymExpr::SymByte(idx));
        }
        text.parse::<u32>()
            .map(SymExpr::Const)
            .map_err(|_| TextError::BadAtom(text.to_string()))
    }

    fn parse_expr(&mut self) -> Result<SymExpr, TextError> {
        match self.next()? {
            Token::RParen => Err(TextError::UnexpectedToken(")".to_string())),
            Token::Atom(a) => Self::parse_atom(&a.clone()),
            Token::LParen => {
                let op = match self.next()? {
                    Token::Atom(a) => a.clone(),
                    Token::LParen => return Err(TextError::UnexpectedToken("(".to_string())),
                    Token::RParen => return Err(TextError::UnexpectedToken(")".to_string())),
                };
                let mut args = Vec::new();
                loop {
                    match self.tokens.get(self.pos).ok_or(TextError::UnexpectedEnd)? {
                        Token::RParen => {
                            self.pos += 1;
                            break;
                        }
                        _ => args.push(self.parse_expr()?),
                    }
                }
                Self::apply(&op, args)
            }
        }
    }

    fn apply(op: &str, mut args: Vec<SymExpr>) -> Result<SymExpr, TextError> {
        let arity = |n: usize, args: &Vec<SymExpr>| -> Result<(), TextError> {
            if args.len() != n {
                return Err(TextError::Arity {
                    op: op.to_string(),
                    expected: n,
                    got: args.len(),
                });
            }
            Ok(())
        };
        let un = |op: UnOp, mut args: Vec<SymExpr>| {
            SymExpr::Unary(op, args.remove(0).boxed())
        };
        let bin = |op: BinOp, mut args: Vec<SymExpr>| {
            let a = args.remove(0);
            let b = args.remove(0);
            SymExpr::Binary(op, a.boxed(), b.boxed())
        };
        let cmp = |op: CmpKind, mut args: Vec<SymExpr>| {
            let a = args.remove(0);
            let b = args.remove(0);
            SymExpr::Cmp(op, a.boxed(), b.boxed())
        };
        match op {
            "bvnot" => arity(1, &args).map(|_| un(UnOp::Not, args)),
            "neg" => arity(1, &args).map(|_| un(UnOp::Neg, args)),
            "add" => arity(2, &args).map(|_| bin(BinOp::Add, args)),
            "sub" => arity(2, &args).map(|_| bin(BinOp::Sub, args)),
            "mul" => arity(2, &args).map(|_| bin(BinOp::Mul, args)),
            "bvand" => arity(2, &args).map(|_| bin(BinOp::And, args)),
            "bvor" => arity(2, &args).map(|_| bin(BinOp::Or, args)),
            "bvxor" => arity(2, &args).map(|_| bin(BinOp::Xor, args)),
            "shl" => arity(2, &args).map(|_| bin(BinOp::Shl, args)),
            "shr" => arity(2, &args).map(|_| bin(BinOp::Shr, args)),
            "eq" => arity(2, &args).map(|_| cmp(CmpKind::Eq, args)),
            "ne" => arity(2, &args).map(|_| cmp(CmpKind::Ne, args)),
            "slt" => arity(2, &args).map(|_| cmp(CmpKind::Slt, args)),
            "sle" => arity(2, &args).map(|_| cmp(CmpKind::Sle, args)),
            "ult" => arity(2, &args).map(|_| cmp(CmpKind::Ult, args)),
            "ule" => arity(2, &args).map(|_| cmp(CmpKind::Ule, args)),
            "not" => arity(1, &args).map(|_| SymExpr::BoolNot(args.remove(0).boxed())),
            "and" | "or" => {
                if args.len() < 2 {
                    return Err(TextError::Arity {
                        op: op.to_string(),
                        expected: 2,
                        got: args.len(),
                    });
                }
                // N-ary connectives right-fold into the binary AST form.
                let build: fn(SymExpr, SymExpr) -> SymExpr = if op == "and" {
                    |a, b| SymExpr::BoolAnd(a.boxed(), b.boxed())
                } else {
                    |a, b| SymExpr::BoolOr(a.boxed(), b.boxed())
                };
                let last = args.pop().unwrap();
                Ok(args.into_iter().rev().fold(last, |acc, a| build(a, acc)))
            }
            other => Err(TextError::UnknownOp(other.to_string())),
        }
    }
}

/// Parses a single expression in canonical text form.
pub fn parse_expr(text: &str) -> Result<SymExpr, TextError> {
    let mut p = Parser { tokens: tokenize(text), pos: 0 };
    let e = p.parse_expr()?;
    if p.pos != p.tokens.len() {
        return Err(TextError::TrailingInput);
    }
    Ok(e)
}

/// Parses a path constraint: `true` for the empty constraint, otherwise an
/// expression whose top-level right-nested conjunction spine becomes the
/// clause list.
pub fn parse_constraint(text: &str) -> Result<PathConstraint, TextError> {
    let trimmed = text.trim();
    if trimmed == "true" {
        return Ok(PathConstraint::new());
    }
    let mut clauses = Vec::new();
    let mut cur = parse_expr(trimmed)?;
    loop {
        match cur {
            SymExpr::BoolAnd(a, b) => {
                clauses.push(*a);
                cur = *b;
            }
            other => {
                clauses.push(other);
                break;
            }
        }
    }
    Ok(PathConstraint::from_clauses(clauses))
}
