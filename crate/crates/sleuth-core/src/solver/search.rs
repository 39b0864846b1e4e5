//! Complete search over the byte domain with interval pruning.
//!
//! The search assigns symbolic bytes one at a time in index order, values
//! ascending, and prunes a partial assignment as soon as abstract interval
//! evaluation proves some clause false. Intervals are sound
//! over-approximations, so pruning never loses a model and a fully explored
//! tree without one is a proof of unsatisfiability. Everything is
//! deterministic: the same constraint always yields the same verdict and,
//! when satisfiable, the same (lexicographically minimal) model.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::vm::CmpKind;

use super::{negate_branch, BinOp, PathConstraint, SymExpr, UnOp};

/// Search budget. Node and wall-clock limits are both optional; exceeding
/// either turns the answer into [`SatResult::Unknown`]. The default allows
/// 30 seconds of wall time per query; deterministic pipelines should prefer
/// [`Budget::nodes`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Budget {
    pub max_nodes: Option<u64>,
    pub max_millis: Option<u64>,
}

impl Default for Budget {
    fn default() -> Self {
        Budget { max_nodes: None, max_millis: Some(30_000) }
    }
}

impl Budget {
    pub fn nodes(n: u64) -> Budget {
        Budget { max_nodes: Some(n), max_millis: None }
    }

    pub fn unlimited() -> Budget {
        Budget { max_nodes: None, max_millis: None }
    }
}

/// A satisfying assignment for the referenced symbolic bytes. Bytes the
/// constraint never mentions are unconstrained and read as zero.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Model {
    bytes: BTreeMap<u16, u8>,
}

impl Model {
    pub fn get(&self, index: u16) -> u8 {
        self.bytes.get(&index).copied().unwrap_or(0)
    }

    pub fn assignments(&self) -> impl Iterator<Item = (u16, u8)> + '_ {
        self.bytes.iter().map(|(i, v)| (*i, *v))
    }

    /// Concrete input of length `len` realizing this model, unmentioned
    /// bytes zero-filled. Length is clamped up if the model mentions a byte
    /// past `len`.
    pub fn input_vec(&self, len: usize) -> Vec<u8> {
        let needed = self
            .bytes
            .keys()
            .next_back()
            .map(|i| *i as usize + 1)
            .unwrap_or(0);
        let mut out = vec![0u8; len.max(needed)];
        for (i, v) in &self.bytes {
            out[*i as usize] = *v;
        }
        out
    }
}

/// Solver verdict. `Unsat` is definitive; `Unknown` only arises from budget
/// exhaustion.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SatResult {
    Sat(Model),
    Unsat,
    Unknown,
}

impl SatResult {
    pub fn is_sat(&self) -> bool {
        matches!(self, SatResult::Sat(_))
    }
}

/// Unsigned interval `[lo, hi]`, the abstract value of an expression under a
/// partial assignment. Always non-empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Interval {
    lo: u32,
    hi: u32,
}

const TOP: Interval = Interval { lo: 0, hi: u32::MAX };

impl Interval {
    fn exact(v: u32) -> Interval {
        Interval { lo: v, hi: v }
    }

    fn singleton(self) -> Option<u32> {
        (self.lo == self.hi).then_some(self.lo)
    }

    /// Smallest `2^k - 1` mask covering both bounds; an upper bound for
    /// bitwise or / xor results.
    fn bit_ceiling(a: u32, b: u32) -> u32 {
        let m = a | b;
        if m == 0 {
            0
        } else {
            u32::MAX >> m.leading_zeros()
        }
    }

    fn add(self, o: Interval) -> Interval {
        match (self.hi as u64).checked_add(o.hi as u64) {
            Some(hi) if hi <= u32::MAX as u64 => {
                Interval { lo: self.lo + o.lo, hi: hi as u32 }
            }
            _ => TOP,
        }
    }

    fn sub(self, o: Interval) -> Interval {
        if self.lo >= o.hi {
            Interval { lo: self.lo - o.hi, hi: self.hi - o.lo }
        } else {
            TOP
        }
    }

    fn mul(self, o: Interval) -> Interval {
        let hi = self.hi as u64 * o.hi as u64;
        if hi <= u32::MAX as u64 {
            Interval { lo: self.lo * o.lo, hi: hi as u32 }
        } else {
            TOP
        }
    }

    fn bitand(self, o: Interval) -> Interval {
        Interval { lo: 0, hi: self.hi.min(o.hi) }
    }

    fn bitor(self, o: Interval) -> Interval {
        Interval { lo: self.lo.max(o.lo), hi: Self::bit_ceiling(self.hi, o.hi) }
    }

    fn bitxor(self, o: Interval) -> Interval {
        Interval { lo: 0, hi: Self::bit_ceiling(self.hi, o.hi) }
    }

    fn bitnot(self) -> Interval {
        Interval { lo: !self.hi, hi: !self.lo }
    }

    fn neg(self) -> Interval {
        if self.lo == 0 && self.hi == 0 {
            Interval::exact(0)
        } else if self.lo > 0 {
            Interval { lo: self.hi.wrapping_neg(), hi: self.lo.wrapping_neg() }
        } else {
            TOP
        }
    }

    fn shl(self, o: Interval) -> Interval {
        match o.singleton() {
            Some(s) => {
                let s = s & 0x1f;
                if self.hi <= (u32::MAX >> s) {
                    Interval { lo: self.lo << s, hi: self.hi << s }
                } else {
                    TOP
                }
            }
            None => TOP,
        }
    }

    fn shr(self, o: Interval) -> Interval {
        // Shifting right is antitone in the shift amount, but masking to 5
        // bits breaks monotonicity unless the whole interval stays below 32.
        if o.hi < 32 {
            Interval { lo: self.lo >> o.hi, hi: self.hi >> o.lo }
        } else {
            match o.singleton() {
                Some(s) => Interval { lo: self.lo >> (s & 0x1f), hi: self.hi >> (s & 0x1f) },
                None => Interval { lo: 0, hi: self.hi },
            }
        }
    }

    /// Sign classification for deciding signed comparisons on intervals.
    fn sign(self) -> SignClass {
        if self.hi <= i32::MAX as u32 {
            SignClass::NonNeg
        } else if self.lo > i32::MAX as u32 {
            SignClass::Neg
        } else {
            SignClass::Mixed
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum SignClass {
    NonNeg,
    Neg,
    Mixed,
}

/// Three-valued truth for abstract clause evaluation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Truth {
    True,
    False,
    Unknown,
}

impl Truth {
    fn not(self) -> Truth {
        match self {
            Truth::True => Truth::False,
            Truth::False => Truth::True,
            Truth::Unknown => Truth::Unknown,
        }
    }

    fn and(self, o: Truth) -> Truth {
        match (self, o) {
            (Truth::False, _) | (_, Truth::False) => Truth::False,
            (Truth::True, Truth::True) => Truth::True,
            _ => Truth::Unknown,
        }
    }

    fn or(self, o: Truth) -> Truth {
        match (self, o) {
            (Truth::True, _) | (_, Truth::True) => Truth::True,
            (Truth::False, Truth::False) => Truth::False,
            _ => Truth::Unknown,
        }
    }
}

/// Partial assignment: value per symbolic byte, dense over the referenced
/// byte list.
struct Assignment<'a> {
    indices: &'a [u16],
    values: Vec<Option<u8>>,
}

impl<'a> Assignment<'a> {
    fn lookup(&self, byte: u16) -> Option<u8> {
        self.indices
            .binary_search(&byte)
            .ok()
            .and_then(|slot| self.values[slot])
    }
}

fn abstract_bv(e: &SymExpr, asg: &Assignment) -> Interval {
    match e {
        SymExpr::Const(c) => Interval::exact(*c),
        SymExpr::SymByte(i) => match asg.lookup(*i) {
            Some(v) => Interval::exact(v as u32),
            None => Interval { lo: 0, hi: 255 },
        },
        SymExpr::Unary(op, a) => {
            let a = abstract_bv(a, asg);
            match op {
                UnOp::Not => a.bitnot(),
                UnOp::Neg => a.neg(),
            }
        }
        SymExpr::Binary(op, a, b) => {
            let a = abstract_bv(a, asg);
            let b = abstract_bv(b, asg);
            match op {
                BinOp::Add => a.add(b),
                BinOp::Sub => a.sub(b),
                BinOp::Mul => a.mul(b),
                BinOp::And => a.bitand(b),
                BinOp::Or => a.bitor(b),
                BinOp::Xor => a.bitxor(b),
                BinOp::Shl => a.shl(b),
                BinOp::Shr => a.shr(b),
            }
        }
        _ => panic!("bitvector abstraction on boolean expression"),
    }
}

fn abstract_cmp(cmp: CmpKind, a: Interval, b: Interval) -> Truth {
    match cmp {
        CmpKind::Ult => {
            if a.hi < b.lo {
                Truth::True
            } else if a.lo >= b.hi {
                Truth::False
            } else {
                Truth::Unknown
            }
        }
        CmpKind::Ule => {
            if a.hi <= b.lo {
                Truth::True
            } else if a.lo > b.hi {
                Truth::False
            } else {
                Truth::Unknown
            }
        }
        CmpKind::Eq => {
            if a.hi < b.lo || b.hi < a.lo {
                Truth::False
            } else if a.singleton().is_some() && a == b {
                Truth::True
            } else {
                Truth::Unknown
            }
        }
        CmpKind::Ne => abstract_cmp(CmpKind::Eq, a, b).not(),
        CmpKind::Slt | CmpKind::Sle => match (a.sign(), b.sign()) {
            // Same signedness region: signed order agrees with unsigned.
            (SignClass::NonNeg, SignClass::NonNeg) | (SignClass::Neg, SignClass::Neg) => {
                abstract_cmp(unsigned_of(cmp), a, b)
            }
            (SignClass::Neg, SignClass::NonNeg) => Truth::True,
            (SignClass::NonNeg, SignClass::Neg) => Truth::False,
            _ => Truth::Unknown,
        },
    }
}

fn unsigned_of(cmp: CmpKind) -> CmpKind {
    match cmp {
        CmpKind::Slt => CmpKind::Ult,
        CmpKind::Sle => CmpKind::Ule,
        other => other,
    }
}

fn abstract_bool(e: &SymExpr, asg: &Assignment) -> Truth {
    match e {
        SymExpr::Cmp(cmp, a, b) => abstract_cmp(*cmp, abstract_bv(a, asg), abstract_bv(b, asg)),
        SymExpr::BoolAnd(a, b) => abstract_bool(a, asg).and(abstract_bool(b, asg)),
        SymExpr::BoolOr(a, b) => abstract_bool(a, asg).or(abstract_bool(b, asg)),
        SymExpr::BoolNot(a) => abstract_bool(a, asg).not(),
        _ => panic!("boolean abstraction on bitvector expression"),
    }
}

struct Gas<'a> {
    budget: &'a Budget,
    nodes: u64,
    start: Instant,
}

impl<'a> Gas<'a> {
    fn new(budget: &'a Budget) -> Gas<'a> {
        Gas { budget, nodes: 0, start: Instant::now() }
    }

    /// Counts one search node; `Err` means the budget is spent.
    fn tick(&mut self) -> Result<(), ()> {
        self.nodes += 1;
        if let Some(max) = self.budget.max_nodes {
            if self.nodes > max {
                return Err(());
            }
        }
        if let Some(ms) = self.budget.max_millis {
            // Clock checks are costly; sample every 4096 nodes.
            if self.nodes % 4096 == 0 && self.start.elapsed().as_millis() as u64 > ms {
                return Err(());
            }
        }
        Ok(())
    }
}

fn search(
    clauses: &[SymExpr],
    asg: &mut Assignment,
    next: usize,
    gas: &mut Gas,
) -> Result<Option<Model>, ()> {
    gas.tick()?;
    let mut all_true = true;
    for clause in clauses {
        match abstract_bool(clause, asg) {
            Truth::False => return Ok(None),
            Truth::Unknown => all_true = false,
            Truth::True => {}
        }
    }
    if all_true {
        // Sound regardless of the remaining free bytes; complete with the
        // minimal assignment.
        let mut bytes = BTreeMap::new();
        for (slot, idx) in asg.indices.iter().enumerate() {
            bytes.insert(*idx, asg.values[slot].unwrap_or(0));
        }
        return Ok(Some(Model { bytes }));
    }
    if next == asg.indices.len() {
        // Fully assigned yet undecided: the abstraction lost precision;
        // decide concretely.
        let input = Model {
            bytes: asg
                .indices
                .iter()
                .enumerate()
                .map(|(slot, idx)| (*idx, asg.values[slot].unwrap()))
                .collect(),
        }
        .input_vec(0);
        let ok = clauses.iter().all(|c| c.eval(&input).as_bool());
        return Ok(if ok {
            Some(Model {
                bytes: asg
                    .indices
                    .iter()
                    .enumerate()
                    .map(|(slot, idx)| (*idx, asg.values[slot].unwrap()))
                    .collect(),
            })
        } else {
            None
        });
    }
    for v in 0u8..=255 {
        asg.values[next] = Some(v);
        if let Some(model) = search(clauses, asg, next + 1, gas)? {
            asg.values[next] = None;
            return Ok(Some(model));
        }
    }
    asg.values[next] = None;
    Ok(None)
}

/// Decides satisfiability of the conjunction and returns the number of
/// search nodes visited.
pub fn check_sat_with_stats(constraint: &PathConstraint, budget: &Budget) -> (SatResult, u64) {
    let indices: Vec<u16> = constraint.sym_bytes().into_iter().collect();
    let clauses = &constraint.clauses;
    let mut asg = Assignment { indices: &indices, values: vec![None; indices.len()] };
    let mut gas = Gas::new(budget);
    let verdict = match search(clauses, &mut asg, 0, &mut gas) {
        Ok(Some(model)) => SatResult::Sat(model),
        Ok(None) => SatResult::Unsat,
        Err(()) => SatResult::Unknown,
    };
    (verdict, gas.nodes)
}

/// Decides satisfiability of the conjunction of `constraint`'s clauses.
pub fn check_sat(constraint: &PathConstraint, budget: &Budget) -> SatResult {
    check_sat_with_stats(constraint, budget).0
}

/// Does `constraint` entail `clause`? Decided by refuting
/// `constraint && !clause`. `None` means the budget ran out.
pub fn entails(constraint: &PathConstraint, clause: &SymExpr, budget: &Budget) -> Option<bool> {
    let mut refute = constraint.clone();
    refute.push(negate_branch(clause));
    match check_sat(&refute, budget) {
        SatResult::Unsat => Some(true),
        SatResult::Sat(_) => Some(false),
        SatResult::Unknown => None,
    }
}
