//! Bitvector expressions over symbolic input bytes and a complete solver
//! for conjunctions of boolean constraints.
//!
//! Expressions mirror the machine's semantics exactly: 32-bit wrapping
//! arithmetic, shift amounts masked to 5 bits, and symbolic input bytes
//! ranging over `0..=255` (zero-extended to 32 bits). The solver enumerates
//! byte assignments DPLL-style with unsigned interval pruning; on a finite
//! byte domain that makes it complete, so `Unsat` is a proof. `Unknown`
//! only ever means the budget ran out.

mod search;
mod text;

pub use search::{check_sat, check_sat_with_stats, entails, Budget, Model, SatResult};
pub use text::{parse_constraint, parse_expr, TextError};

use std::collections::BTreeSet;
use std::fmt;

use crate::vm::CmpKind;

/// Expression sort: 32-bit bitvector or boolean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Sort {
    Bv32,
    Bool,
}

/// Unary bitvector operators.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum UnOp {
    /// Bitwise complement.
    Not,
    /// Two's-complement negation.
    Neg,
}

/// Binary bitvector operators, matching the machine's ALU.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    And,
    Or,
    Xor,
    Shl,
    Shr,
}

impl BinOp {
    pub fn eval(self, lhs: u32, rhs: u32) -> u32 {
        match self {
            BinOp::Add => lhs.wrapping_add(rhs),
            BinOp::Sub => lhs.wrapping_sub(rhs),
            BinOp::Mul => lhs.wrapping_mul(rhs),
            BinOp::And => lhs & rhs,
            BinOp::Or => lhs | rhs,
            BinOp::Xor => lhs ^ rhs,
            BinOp::Shl => lhs << (rhs & 0x1f),
            BinOp::Shr => lhs >> (rhs & 0x1f),
        }
    }
}

/// A symbolic expression. Bitvector-sorted variants build values; `Cmp` and
/// the `Bool*` variants build constraints.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum SymExpr {
    /// Concrete 32-bit constant.
    Const(u32),
    /// The `i`-th symbolic input byte, zero-extended to 32 bits.
    SymByte(u16),
    Unary(UnOp, Box<SymExpr>),
    Binary(BinOp, Box<SymExpr>, Box<SymExpr>),
    Cmp(CmpKind, Box<SymExpr>, Box<SymExpr>),
    BoolAnd(Box<SymExpr>, Box<SymExpr>),
    BoolOr(Box<SymExpr>, Box<SymExpr>),
    BoolNot(Box<SymExpr>),
}

/// Evaluation result; which variant appears is fixed by the expression's
/// sort.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Value {
    Bv(u32),
    Bool(bool),
}

impl Value {
    pub fn as_bv(self) -> u32 {
        match self {
            Value::Bv(v) => v,
            Value::Bool(_) => panic!("boolean value where bitvector expected"),
        }
    }

    pub fn as_bool(self) -> bool {
        match self {
            Value::Bool(b) => b,
            Value::Bv(_) => panic!("bitvector value where boolean expected"),
        }
    }
}

/// Sort violation, reported with the offending subexpression.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("expected {expected:?} but `{expr}` has sort {found:?}")]
pub struct SortError {
    pub expected: Sort,
    pub found: Sort,
    pub expr: String,
}

impl SymExpr {
    pub fn boxed(self) -> Box<SymExpr> {
        Box::new(self)
    }

    /// The expression's sort, assuming it is well-sorted.
    pub fn sort(&self) -> Sort {
        match self {
            SymExpr::Const(_) | SymExpr::SymByte(_) | SymExpr::Unary(..) | SymExpr::Binary(..) => {
                Sort::Bv32
            }
            SymExpr::Cmp(..) | SymExpr::BoolAnd(..) | SymExpr::BoolOr(..) | SymExpr::BoolNot(_) => {
                Sort::Bool
            }
        }
    }

    /// Checks operand sorts recursively and returns the expression's sort.
    pub fn check_sorts(&self) -> Result<Sort, SortError> {
        let expect = |e: &SymExpr, want: Sort| -> Result<(), SortError> {
            let found = e.check_sorts()?;
            if found != want {
                return Err(SortError { expected: want, found, expr: e.to_string() });
            }
            Ok(())
        };
        match self {
            SymExpr::Const(_) | SymExpr::SymByte(_) => Ok(Sort::Bv32),
            SymExpr::Unary(_, a) => {
                expect(a, Sort::Bv32)?;
                Ok(Sort::Bv32)
            }
            SymExpr::Binary(_, a, b) => {
                expect(a, Sort::Bv32)?;
                expect(b, Sort::Bv32)?;
                Ok(Sort::Bv32)
            }
            SymExpr::Cmp(_, a, b) => {
                expect(a, Sort::Bv32)?;
                expect(b, Sort::Bv32)?;
                Ok(Sort::Bool)
            }
            SymExpr::BoolAnd(a, b) | SymExpr::BoolOr(a, b) => {
                expect(a, Sort::Bool)?;
                expect(b, Sort::Bool)?;
                Ok(Sort::Bool)
            }
            SymExpr::BoolNot(a) => {
                expect(a, Sort::Bool)?;
                Ok(Sort::Bool)
            }
        }
    }

    /// Evaluates under a concrete input; bytes past the end of `input` read
    /// zero, matching the machine's input semantics.
    pub fn eval(&self, input: &[u8]) -> Value {
        match self {
            SymExpr::Const(c) => Value::Bv(*c),
            SymExpr::SymByte(i) => {
                Value::Bv(input.get(*i as usize).copied().unwrap_or(0) as u32)
            }
            SymExpr::Unary(op, a) => {
                let v = a.eval(input).as_bv();
                Value::Bv(match op {
                    UnOp::Not => !v,
                    UnOp::Neg => v.wrapping_neg(),
                })
            }
            SymExpr::Binary(op, a, b) => {
                Value::Bv(op.eval(a.eval(input).as_bv(), b.eval(input).as_bv()))
            }
            SymExpr::Cmp(cmp, a, b) => {
                Value::Bool(cmp.eval(a.eval(input).as_bv(), b.eval(input).as_bv()))
            }
            SymExpr::BoolAnd(a, b) => {
                Value::Bool(a.eval(input).as_bool() && b.eval(input).as_bool())
            }
            SymExpr::BoolOr(a, b) => {
                Value::Bool(a.eval(input).as_bool() || b.eval(input).as_bool())
            }
            SymExpr::BoolNot(a) => Value::Bool(!a.eval(input).as_bool()),
        }
    }

    /// Indices of all symbolic bytes the expression mentions.
    pub fn sym_bytes(&self) -> BTreeSet<u16> {
        let mut out = BTreeSet::new();
        self.collect_sym_bytes(&mut out);
        out
    }

    pub(crate) fn collect_sym_bytes(&self, out: &mut BTreeSet<u16>) {
        match self {
            SymExpr::Const(_) => {}
            SymExpr::SymByte(i) => {
                out.insert(*i);
            }
            SymExpr::Unary(_, a) | SymExpr::BoolNot(a) => a.collect_sym_bytes(out),
            SymExpr::Binary(_, a, b) | SymExpr::Cmp(_, a, b) | SymExpr::BoolAnd(a, b)
            | SymExpr::BoolOr(a, b) => {
                a.collect_sym_bytes(out);
                b.collect_sym_bytes(out);
            }
        }
    }

    /// Number of nodes in the expression tree.
    pub fn node_count(&self) -> usize {
        match self {
            SymExpr::Const(_) | SymExpr::SymByte(_) => 1,
            SymExpr::Unary(_, a) | SymExpr::BoolNot(a) => 1 + a.node_count(),
            SymExpr::Binary(_, a, b) | SymExpr::Cmp(_, a, b) | SymExpr::BoolAnd(a, b)
            | SymExpr::BoolOr(a, b) => 1 + a.node_count() + b.node_count(),
        }
    }

    /// Tree depth; a leaf has depth 1.
    pub fn depth(&self) -> usize {
        match self {
            SymExpr::Const(_) | SymExpr::SymByte(_) => 1,
            SymExpr::Unary(_, a) | SymExpr::BoolNot(a) => 1 + a.depth(),
            SymExpr::Binary(_, a, b) | SymExpr::Cmp(_, a, b) | SymExpr::BoolAnd(a, b)
            | SymExpr::BoolOr(a, b) => 1 + a.depth().max(b.depth()),
        }
    }
}

/// Negates a branch condition. Comparisons flip to their complement with
/// operands swapped (`!(a <u b)` is `b <=u a`), `BoolNot` is peeled, and
/// anything else is wrapped. The transform is an involution:
/// `negate_branch(negate_branch(e)) == e`.
pub fn negate_branch(cond: &SymExpr) -> SymExpr {
    match cond {
        SymExpr::Cmp(cmp, a, b) => match cmp {
            CmpKind::Eq => SymExpr::Cmp(CmpKind::Ne, a.clone(), b.clone()),
            CmpKind::Ne => SymExpr::Cmp(CmpKind::Eq, a.clone(), b.clone()),
            CmpKind::Ult => SymExpr::Cmp(CmpKind::Ule, b.clone(), a.clone()),
            CmpKind::Ule => SymExpr::Cmp(CmpKind::Ult, b.clone(), a.clone()),
            CmpKind::Slt => SymExpr::Cmp(CmpKind::Sle, b.clone(), a.clone()),
            CmpKind::Sle => SymExpr::Cmp(CmpKind::Slt, b.clone(), a.clone()),
        },
        SymExpr::BoolNot(inner) => (**inner).clone(),
        other => SymExpr::BoolNot(other.clone().boxed()),
    }
}

/// Rewrites an expression into an equivalent, usually smaller one: constant
/// folding on bitvector operators, additive and multiplicative identities,
/// and double-negation elimination. Preserves `eval` on every input.
pub fn simplify(expr: &SymExpr) -> SymExpr {
    match expr {
        SymExpr::Const(_) | SymExpr::SymByte(_) => expr.clone(),
        SymExpr::Unary(op, a) => {
            let a = simplify(a);
            if let SymExpr::Const(c) = a {
                return SymExpr::Const(match op {
                    UnOp::Not => !c,
                    UnOp::Neg => c.wrapping_neg(),
                });
            }
            SymExpr::Unary(*op, a.boxed())
        }
        SymExpr::Binary(op, a, b) => {
            let a = simplify(a);
            let b = simplify(b);
            if let (SymExpr::Const(x), SymExpr::Const(y)) = (&a, &b) {
                return SymExpr::Const(op.eval(*x, *y));
            }
            match (op, &a, &b) {
                (BinOp::Add, x, SymExpr::Const(0)) | (BinOp::Add, SymExpr::Const(0), x) => {
                    return x.clone()
                }
                (BinOp::Sub, x, SymExpr::Const(0)) => return x.clone(),
                (BinOp::Mul, _, SymExpr::Const(0)) | (BinOp::Mul, SymExpr::Const(0), _) => {
                    return SymExpr::Const(0)
                }
                (BinOp::Mul, x, SymExpr::Const(1)) | (BinOp::Mul, SymExpr::Const(1), x) => {
                    return x.clone()
                }
                (BinOp::And, _, SymExpr::Const(0)) | (BinOp::And, SymExpr::Const(0), _) => {
                    return SymExpr::Const(0)
                }
                (BinOp::Or, x, SymExpr::Const(0)) | (BinOp::Or, SymExpr::Const(0), x) => {
                    return x.clone()
                }
                (BinOp::Xor, x, SymExpr::Const(0)) | (BinOp::Xor, SymExpr::Const(0), x) => {
                    return x.clone()
                }
                (BinOp::Shl, x, SymExpr::Const(s)) | (BinOp::Shr, x, SymExpr::Const(s))
                    if s & 0x1f == 0 =>
                {
                    return x.clone()
                }
                _ => {}
            }
            SymExpr::Binary(*op, a.boxed(), b.boxed())
        }
        SymExpr::Cmp(cmp, a, b) => {
            SymExpr::Cmp(*cmp, simplify(a).boxed(), simplify(b).boxed())
        }
        SymExpr::BoolAnd(a, b) => SymExpr::BoolAnd(simplify(a).boxed(), simplify(b).boxed()),
        SymExpr::BoolOr(a, b) => SymExpr::BoolOr(simplify(a).boxed(), simplify(b).boxed()),
        SymExpr::BoolNot(a) => match simplify(a) {
            SymExpr::BoolNot(inner) => *inner,
            other => SymExpr::BoolNot(other.boxed()),
        },
    }
}

/// A path constraint: the conjunction of boolean clauses collected along one
/// execution path, in branch order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct PathConstraint {
    pub clauses: Vec<SymExpr>,
}

impl PathConstraint {
    pub fn new() -> PathConstraint {
        PathConstraint::default()
    }

    pub fn from_clauses(clauses: Vec<SymExpr>) -> PathConstraint {
        PathConstraint { clauses }
    }

    /// Appends a clause; duplicates of an existing clause are dropped, which
    /// keeps unrolled loop conditions from piling up.
    pub fn push(&mut self, clause: SymExpr) {
        if !self.clauses.contains(&clause) {
            self.clauses.push(clause);
        }
    }

    pub fn len(&self) -> usize {
        self.clauses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clauses.is_empty()
    }

    /// All clauses simplified; order preserved.
    pub fn simplified(&self) -> PathConstraint {
        PathConstraint { clauses: self.clauses.iter().map(simplify).collect() }
    }

    /// True when every clause holds under `input`.
    pub fn holds(&self, input: &[u8]) -> bool {
        self.clauses.iter().all(|c| c.eval(input).as_bool())
    }

    /// Symbolic bytes mentioned by any clause.
    pub fn sym_bytes(&self) -> BTreeSet<u16> {
        let mut out = BTreeSet::new();
        for c in &self.clauses {
            c.collect_sym_bytes(&mut out);
        }
        out
    }

    /// Single-expression form: the right-fold conjunction of all clauses.
    /// Empty constraints have no expression form (they are trivially true).
    pub fn as_expr(&self) -> Option<SymExpr> {
        let mut iter = self.clauses.iter().rev().cloned();
        let last = iter.next()?;
        Some(iter.fold(last, |acc, c| SymExpr::BoolAnd(c.boxed(), acc.boxed())))
    }
}

impl fmt::Display for PathConstraint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        text::fmt_constraint(self, f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vm::CmpKind;

    fn byte(i: u16) -> SymExpr {
        SymExpr::SymByte(i)
    }

    fn konst(c: u32) -> SymExpr {
        SymExpr::Const(c)
    }

    #[test]
    fn eval_wraps_and_masks_shifts() {
        let e = SymExpr::Binary(BinOp::Add, konst(u32::MAX).boxed(), konst(1).boxed());
        assert_eq!(e.eval(&[]), Value::Bv(0));
        let s = SymExpr::Binary(BinOp::Shl, konst(1).boxed(), konst(33).boxed());
        assert_eq!(s.eval(&[]), Value::Bv(2));
    }

    #[test]
    fn sym_byte_zero_extends_and_defaults_to_zero() {
        assert_eq!(byte(0).eval(&[0xff]), Value::Bv(255));
        assert_eq!(byte(5).eval(&[0xff]), Value::Bv(0));
    }

    #[test]
    fn sort_checking_rejects_bool_in_alu() {
        let bad = SymExpr::Binary(
            BinOp::Add,
            konst(1).boxed(),
            SymExpr::Cmp(CmpKind::Eq, konst(0).boxed(), konst(0).boxed()).boxed(),
        );
        let e = bad.check_sorts().unwrap_err();
        assert_eq!(e.expected, Sort::Bv32);
        assert_eq!(e.found, Sort::Bool);
    }

    #[test]
    fn negate_branch_is_involutive_and_complementary() {
        let cases = vec![
            SymExpr::Cmp(CmpKind::Eq, byte(0).boxed(), konst(7).boxed()),
            SymExpr::Cmp(CmpKind::Ult, byte(0).boxed(), byte(1).boxed()),
            SymExpr::Cmp(CmpKind::Sle, byte(1).boxed(), konst(3).boxed()),
            SymExpr::BoolAnd(
                SymExpr::Cmp(CmpKind::Ne, byte(0).boxed(), konst(0).boxed()).boxed(),
                SymExpr::Cmp(CmpKind::Eq, byte(1).boxed(), konst(1).boxed()).boxed(),
            ),
        ];
        for e in cases {
            let n = negate_branch(&e);
            assert_eq!(negate_branch(&n), e);
            for input in [[0u8, 0], [7, 3], [255, 1], [128, 200]] {
                assert_eq!(e.eval(&input).as_bool(), !n.eval(&input).as_bool(), "{e}");
            }
        }
    }

    #[test]
    fn simplify_folds_constants() {
        let e = SymExpr::Binary(
            BinOp::Mul,
            SymExpr::Binary(BinOp::Add, konst(2).boxed(), konst(3).boxed()).boxed(),
            konst(4).boxed(),
        );
        assert_eq!(simplify(&e), konst(20));
    }

    #[test]
    fn simplify_identities_and_double_negation() {
        let e = SymExpr::Binary(BinOp::Add, byte(0).boxed(), konst(0).boxed());
        assert_eq!(simplify(&e), byte(0));
        let p = SymExpr::Cmp(CmpKind::Eq, byte(0).boxed(), konst(1).boxed());
        let nn = SymExpr::BoolNot(SymExpr::BoolNot(p.clone().boxed()).boxed());
        assert_eq!(simplify(&nn), p);
    }

    #[test]
    fn path_constraint_drops_duplicate_clauses() {
        let c = SymExpr::Cmp(CmpKind::Ult, byte(0).boxed(), konst(10).boxed());
        let mut pc = PathConstraint::new();
        pc.push(c.clone());
        pc.push(c.clone());
        assert_eq!(pc.len(), 1);
    }

    #[test]
    fn as_expr_matches_clausewise_eval() {
        let mut pc = PathConstraint::new();
        pc.push(SymExpr::Cmp(CmpKind::Ult, byte(0).boxed(), konst(10).boxed()));
        pc.push(SymExpr::Cmp(CmpKind::Ne, byte(1).boxed(), konst(0).boxed()));
        let e = pc.as_expr().unwrap();
        for input in [[0u8, 0], [5, 1], [20, 1], [9, 0]] {
            assert_eq!(pc.holds(&input), e.eval(&input).as_bool());
        }
    }
}
